//! `HGFW` container for named tensors.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"HGFW"  u32 version (=1)  u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u64 dim, numel × f32 }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HGFW";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, expected HGFW".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut r, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 8];
            read_exact(&mut r, &mut d)?;
            let d = usize::try_from(u64::from_le_bytes(d)).map_err(|_| Error::Format("dimension overflow".into()))?;
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (1 << 31))
            .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
        let mut raw = vec![0u8; numel * 4];
        read_exact(&mut r, &mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(out)
}

pub fn write_checkpoint_file(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), entries)
}

pub fn read_checkpoint_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("ab", &t)]).unwrap();
        let mut expect = b"HGFW".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        expect.push(1);
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_checkpoint(&b"NOPE"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("x", &Tensor::zeros(&[3]))]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            entries in prop::collection::vec(
                ("[a-z._0-9]{1,12}", prop::collection::vec(1usize..4, 0..3), any::<u32>()),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor)> = entries
                .iter()
                .map(|(name, shape, seed)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n)
                        .map(|i| f32::from_bits(seed.wrapping_add((i as u32).wrapping_mul(2_654_435_761)) & 0x7f7f_ffff) as f64)
                        .collect();
                    (name.clone(), Tensor::new(shape.clone(), data).unwrap())
                })
                .collect();
            let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
            let mut first = Vec::new();
            write_checkpoint(&mut first, &refs).unwrap();
            let back = read_checkpoint(&first[..]).unwrap();
            prop_assert_eq!(&back, &tensors);
            let refs: Vec<(&str, &Tensor)> = back.iter().map(|(n, t)| (n.as_str(), t)).collect();
            let mut second = Vec::new();
            write_checkpoint(&mut second, &refs).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
