//! Flat binary dataset format, little-endian throughout:
//!
//! ```text
//! magic     8 bytes  "FDNASDS\0"
//! version   u32      1
//! classes   u32
//! ndim      u32
//! dims      ndim x u32   per-example shape
//! count     u64
//! examples  count * prod(dims) x f64
//! labels    count x u32
//! ```

use std::io::{Read, Write};

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"FDNASDS\0";
const VERSION: u32 = 1;

pub fn write_dataset<W: Write>(dataset: &LabeledDataset, mut out: W) -> Result<()> {
    let io = |e| Error::io("writing dataset", e);
    let mut buf = Vec::with_capacity(32 + dataset.raw_examples().len() * 8 + dataset.len() * 4);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.example_shape().len() as u32).to_le_bytes());
    for &d in dataset.example_shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for v in dataset.raw_examples() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in dataset.labels() {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out.write_all(&buf).map_err(io)
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading dataset", e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8)? != DATASET_MAGIC {
        return Err(Error::Serde("dataset: bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Serde(format!(
            "dataset: unsupported version {version}"
        )));
    }
    let classes = cur.u32()? as usize;
    let ndim = cur.u32()? as usize;
    let shape: Vec<usize> = (0..ndim)
        .map(|_| cur.u32().map(|d| d as usize))
        .collect::<Result<_>>()?;
    let count = cur.u64()? as usize;
    let width: usize = shape.iter().product();
    let total = count
        .checked_mul(width)
        .ok_or_else(|| Error::Serde("dataset: size overflow".into()))?;
    let mut examples = Vec::with_capacity(total);
    for _ in 0..total {
        examples.push(f64::from_le_bytes(
            cur.take(8)?.try_into().expect("8 bytes"),
        ));
    }
    let labels: Vec<usize> = (0..count)
        .map(|_| cur.u32().map(|l| l as usize))
        .collect::<Result<_>>()?;
    if cur.pos != bytes.len() {
        return Err(Error::Serde(format!(
            "dataset: {} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    LabeledDataset::new(shape, classes, examples, labels)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Serde("dataset: truncated file".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn round_trip_and_layout() {
        let ds = generate_synthetic(3, [1, 2, 2], 2, 0.3, 5).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(&buf[..8], DATASET_MAGIC);
        // header 8 + 4 + 4 + 4 + 3*4 + 8, then 6*4 f64 and 6 u32
        assert_eq!(buf.len(), 40 + 6 * 4 * 8 + 6 * 4);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_corruption() {
        let ds = generate_synthetic(2, [1, 1, 2], 1, 0.0, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_dataset(bad.as_slice()).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_dataset(extra.as_slice()).is_err());
    }
}
