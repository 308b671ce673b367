//! `CLWC` checkpoint encoding.
//!
//! ```text
//! "CLWC" | version u16 | layers u16 |
//!   per layer: in u32 | out u32 | activation u8 | weights f64... | bias f64...
//! ```
//! All integers and floats are little-endian. Momentum buffers and the frozen
//! flag are not stored; loading yields an unfrozen segment with zero momentum.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::segment::{Activation, DenseLayer, Segment};
use crate::tensor::{read_f64, read_u16, read_u32, read_u8};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLWC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(segment: &Segment, w: &mut W) -> Result<()> {
    let n = u16::try_from(segment.layers().len())
        .map_err(|_| Error::Format("too many layers for u16".into()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    for l in segment.layers() {
        w.write_all(&(l.in_dim as u32).to_le_bytes())?;
        w.write_all(&(l.out_dim as u32).to_le_bytes())?;
        w.write_all(&[l.activation.code()])?;
        for v in l.weight.iter().chain(&l.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Segment> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a CLWC checkpoint".into()));
    }
    let version = read_u16(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = read_u16(r)? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let in_dim = read_u32(r)? as usize;
        let out_dim = read_u32(r)? as usize;
        let act = Activation::from_code(read_u8(r)?)?;
        let weight = (0..in_dim * out_dim)
            .map(|_| read_f64(r))
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..out_dim).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        layers.push(DenseLayer::new(in_dim, out_dim, weight, bias, act)?);
    }
    Segment::new(layers)
}

pub fn checkpoint_bytes(segment: &Segment) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(segment, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn save_checkpoint(segment: &Segment, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(segment))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Segment> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let s = Segment::new(vec![DenseLayer::identity(2)]).unwrap();
        let b = checkpoint_bytes(&s);
        assert_eq!(&b[..4], b"CLWC");
        assert_eq!(&b[4..6], &1u16.to_le_bytes());
        assert_eq!(&b[6..8], &1u16.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(b[16], 0);
        assert_eq!(b.len(), 17 + 8 * 6);
        assert_eq!(&b[17..25], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = checkpoint_bytes(&Segment::new(vec![DenseLayer::identity(1)]).unwrap());
        b[0] = b'X';
        assert!(matches!(read_checkpoint(&mut b.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let b = checkpoint_bytes(&Segment::init(&[3, 4], Activation::Relu, 1).unwrap());
        assert!(read_checkpoint(&mut &b[..b.len() - 3]).is_err());
    }
}
