//! Native binary bundle.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "TSTM"                      magic
//! u16 version                 currently 1
//! u16 flags                   bit 0: scenario tags present
//! u64 steps, u64 nodes, u32 interval_minutes
//! nodes x (u32 byte length, UTF-8 node id)
//! steps x u64                 timestamps, epoch seconds
//! steps*nodes x f32           speeds, row-major
//! [tags] nodes x u8           node class (0 connected, 1 isolated)
//!        nodes*nodes x f32    generated adjacency, row-major
//!        steps*nodes x u8     event mask (0/1)
//! 32 bytes                    SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::synthetic::{NodeClass, ScenarioTags};
use crate::data::GraphSignalSeries;
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"TSTM";
pub const BUNDLE_VERSION: u16 = 1;
const FLAG_TAGS: u16 = 1;

pub fn encode_bundle(series: &GraphSignalSeries, tags: Option<&ScenarioTags>) -> Vec<u8> {
    let (t, n) = (series.len(), series.n_nodes());
    let mut buf = Vec::with_capacity(32 + t * (8 + 4 * n));
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(if tags.is_some() { FLAG_TAGS } else { 0 }).to_le_bytes());
    buf.extend_from_slice(&(t as u64).to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&series.interval_minutes().to_le_bytes());
    for id in series.node_ids() {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for ts in series.timestamps() {
        buf.extend_from_slice(&ts.to_le_bytes());
    }
    for v in series.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(tags) = tags {
        buf.extend(tags.node_class.iter().map(|c| *c as u8));
        for a in &tags.adjacency {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        buf.extend(tags.event_mask.iter().map(|&e| u8::from(e)));
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Bounds-checked little-endian reader; running off the end is reported as
/// a checksum failure because it can only happen on a damaged file.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8], pos: usize) -> Self {
        Self { buf, pos }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).ok_or(Error::Checksum)?;
        let out = self.buf.get(self.pos..end).ok_or(Error::Checksum)?;
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn count(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checksum)
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<(GraphSignalSeries, Option<ScenarioTags>)> {
    if bytes.len() < 4 || &bytes[..4] != BUNDLE_MAGIC {
        return Err(Error::BadMagic { expected: "TSTM" });
    }
    if bytes.len() < 6 {
        return Err(Error::Checksum);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BUNDLE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: BUNDLE_VERSION,
        });
    }
    if bytes.len() < 6 + 32 {
        return Err(Error::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let mut c = Cursor::new(body, 6);
    let flags = c.u16()?;
    let t = c.count()?;
    let n = c.count()?;
    let interval = c.u32()?;
    let mut node_ids = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = c.u32()? as usize;
        let raw = c.take(len)?;
        node_ids.push(String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            row: 0,
            column: node_ids.len() + 1,
            reason: "node id is not UTF-8".into(),
        })?);
    }
    let timestamps = (0..t).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
    let values = (0..t * n).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
    let tags = if flags & FLAG_TAGS != 0 {
        let node_class = c
            .take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(NodeClass::Connected),
                1 => Ok(NodeClass::Isolated),
                _ => Err(Error::Checksum),
            })
            .collect::<Result<Vec<_>>>()?;
        let adjacency = (0..n * n).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
        let event_mask = c.take(t * n)?.iter().map(|&b| b != 0).collect();
        Some(ScenarioTags {
            node_class,
            adjacency,
            event_mask,
        })
    } else {
        None
    };
    if c.pos != body.len() {
        return Err(Error::Checksum);
    }
    let series = GraphSignalSeries::new(values, timestamps, node_ids, interval)?;
    Ok((series, tags))
}

pub fn save_bundle(
    series: &GraphSignalSeries,
    tags: Option<&ScenarioTags>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_bundle(series, tags)).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<(GraphSignalSeries, Option<ScenarioTags>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_series() -> GraphSignalSeries {
        GraphSignalSeries::new(
            vec![1.5, 0.0, -0.0, 65.25, f32::MIN_POSITIVE, 3.0],
            vec![0, 300, 600],
            vec!["a".into(), "ü-node".into()],
            5,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_with_tags() {
        let s = sample_series();
        let tags = ScenarioTags {
            node_class: vec![NodeClass::Isolated, NodeClass::Connected],
            adjacency: vec![0.0, 0.0, 0.0, 0.0],
            event_mask: vec![false, true, false, true, false, false],
        };
        let (back, back_tags) = decode_bundle(&encode_bundle(&s, Some(&tags))).unwrap();
        assert_eq!(back, s);
        assert_eq!(back_tags, Some(tags));
        // -0.0 == 0.0 under PartialEq; compare the bits as well
        let bits = |s: &GraphSignalSeries| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&s));
    }

    #[test]
    fn truncated_is_checksum_failure() {
        let bytes = encode_bundle(&sample_series(), None);
        for cut in [bytes.len() - 1, bytes.len() - 40, 10] {
            assert!(matches!(decode_bundle(&bytes[..cut]), Err(Error::Checksum)));
        }
    }

    #[test]
    fn flipped_byte_is_checksum_failure() {
        let mut bytes = encode_bundle(&sample_series(), None);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_bundle(&bytes), Err(Error::Checksum)));
    }

    #[test]
    fn magic_and_version_checked() {
        let mut bytes = encode_bundle(&sample_series(), None);
        bytes[0] = b'X';
        assert!(matches!(decode_bundle(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = encode_bundle(&sample_series(), None);
        // big-endian version 1 reads as 256
        bytes[4] = 0;
        bytes[5] = 1;
        assert!(matches!(decode_bundle(&bytes), Err(Error::Version { found: 256, .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_series_roundtrip_bit_exact(
            n in 1usize..4,
            t in 1usize..20,
            seed in any::<u64>(),
            start in 0u64..1_000_000,
        ) {
            let mut state = seed;
            let values: Vec<f32> = (0..n * t).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                f32::from_bits((state >> 32) as u32 & 0x7f7f_ffff)
            }).collect();
            let ts = (0..t as u64).map(|i| start * 60 + i * 600).collect();
            let ids = (0..n).map(|i| format!("road-{i}")).collect();
            let s = GraphSignalSeries::new(values, ts, ids, 10).unwrap();
            let (back, tags) = decode_bundle(&encode_bundle(&s, None)).unwrap();
            prop_assert!(tags.is_none());
            let bits = |s: &GraphSignalSeries| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&s));
            prop_assert_eq!(back.timestamps(), s.timestamps());
        }
    }
}
