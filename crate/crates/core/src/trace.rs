//! Edge-coverage traces: hit counting, hit-count bucketing and the `GNT1` file format.
//!
//! A trace is a fixed-length vector with one class per map slot. Each class is
//! `0` when the slot was never hit, otherwise one of seven magnitude buckets of
//! the hit count (see [`bucketize`]).

use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of classes a map slot can take (the zero class plus seven count buckets).
pub const NUM_CLASSES: usize = 8;

/// Default coverage map size for desk-scale campaigns.
pub const DEFAULT_MAP_SIZE: usize = 1024;

/// Map size of the full-scale profile.
pub const PAPER_MAP_SIZE: usize = 65536;

const GNT_MAGIC: &[u8; 4] = b"GNT1";

/// Slot index of the transition `prev_loc -> cur_loc`.
///
/// Fails when `map_size` is not a power of two.
pub fn edge_index(prev_loc: u32, cur_loc: u32, map_size: usize) -> Result<usize> {
    if !map_size.is_power_of_two() {
        return Err(Error::config(
            "map_size",
            format!("{map_size} is not a power of two"),
        ));
    }
    Ok(((cur_loc ^ (prev_loc >> 1)) as usize) & (map_size - 1))
}

/// Collapses a raw hit count into one of the eight trace classes.
pub fn bucketize(count: u32) -> u8 {
    match count {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 3,
        4..=7 => 4,
        8..=15 => 5,
        16..=31 => 6,
        _ => 7,
    }
}

/// Bucketed coverage of one execution.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct CoverageTrace {
    classes: Vec<u8>,
}

impl CoverageTrace {
    pub fn zeroed(map_size: usize) -> Self {
        assert!(map_size > 0, "map size must be positive");
        CoverageTrace {
            classes: vec![0; map_size],
        }
    }

    pub fn from_classes(classes: Vec<u8>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Shape("trace must have at least one slot".into()));
        }
        if let Some((i, c)) = classes
            .iter()
            .enumerate()
            .find(|(_, &c)| c as usize >= NUM_CLASSES)
        {
            return Err(Error::Shape(format!("slot {i} holds class {c}, expected 0..=7")));
        }
        Ok(CoverageTrace { classes })
    }

    pub fn map_size(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn is_all_zero(&self) -> bool {
        self.classes.iter().all(|&c| c == 0)
    }

    pub fn nonzero_slots(&self) -> usize {
        self.classes.iter().filter(|&&c| c != 0).count()
    }

    /// Number of slots whose classes differ.
    pub fn hamming(&self, other: &CoverageTrace) -> usize {
        self.classes
            .iter()
            .zip(&other.classes)
            .filter(|(a, b)| a != b)
            .count()
            + self.classes.len().abs_diff(other.classes.len())
    }

    /// Content hash used for deduplication and file naming.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.classes.len() as u32).to_le_bytes());
        h.update(&self.classes);
        h.finalize().into()
    }

    /// `GNT1` encoding: magic, little-endian `u32` map size, one byte per slot.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.classes.len());
        out.extend_from_slice(GNT_MAGIC);
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.classes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != GNT_MAGIC {
            return Err(Error::Shape("missing GNT1 header".into()));
        }
        let size = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + size {
            return Err(Error::Shape(format!(
                "GNT1 header declares {size} slots but {} bytes follow",
                bytes.len() - 8
            )));
        }
        Self::from_classes(bytes[8..].to_vec())
    }
}

impl fmt::Debug for CoverageTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hits: Vec<(usize, u8)> = self
            .classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(i, &c)| (i, c))
            .collect();
        f.debug_struct("CoverageTrace")
            .field("map_size", &self.classes.len())
            .field("hits", &hits)
            .finish()
    }
}

/// Per-execution hit-count map. Each execution owns its own tracer, so
/// concurrent executions never share coverage state.
pub struct Tracer {
    counts: Vec<u32>,
    mask: usize,
    prev: u32,
}

impl Tracer {
    pub fn new(map_size: usize) -> Result<Self> {
        edge_index(0, 0, map_size)?;
        Ok(Tracer {
            counts: vec![0; map_size],
            mask: map_size - 1,
            prev: 0,
        })
    }

    /// Records arrival at instrumentation point `loc`.
    #[inline]
    pub fn hit(&mut self, loc: u32) {
        let idx = ((loc ^ (self.prev >> 1)) as usize) & self.mask;
        self.counts[idx] = self.counts[idx].saturating_add(1);
        self.prev = loc;
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn finish(self) -> CoverageTrace {
        CoverageTrace {
            classes: self.counts.into_iter().map(bucketize).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn edge_index_examples() {
        assert_eq!(edge_index(0, 0, 1024).unwrap(), 0);
        assert_eq!(edge_index(2, 3, 1024).unwrap(), 2);
        assert_eq!(edge_index(1024, 7, 1024).unwrap(), 519);
    }

    #[test]
    fn edge_index_rejects_non_power_of_two() {
        assert!(matches!(edge_index(1, 2, 1000), Err(Error::Config { .. })));
        assert!(edge_index(1, 2, 0).is_err());
    }

    #[test]
    fn bucket_table() {
        assert_eq!(bucketize(0), 0);
        assert_eq!(bucketize(5), 4);
        assert_eq!(bucketize(1000), 7);
        assert_eq!(bucketize(7), 4);
        assert_eq!(bucketize(8), 5);
        assert_eq!(bucketize(31), 6);
        assert_eq!(bucketize(32), 7);
    }

    #[test]
    fn tracer_accumulates_edges() {
        let mut t = Tracer::new(16).unwrap();
        t.hit(3); // 3 ^ 0
        t.hit(3); // 3 ^ 1
        t.hit(3);
        let trace = t.finish();
        assert_eq!(trace.classes()[3], 1);
        assert_eq!(trace.classes()[2], 2);
    }

    #[test]
    fn gnt1_layout_is_exact() {
        let t = CoverageTrace::from_classes(vec![0, 7, 3, 0]).unwrap();
        assert_eq!(t.to_bytes(), b"GNT1\x04\x00\x00\x00\x00\x07\x03\x00".to_vec());
    }

    #[test]
    fn gnt1_rejects_bad_input() {
        assert!(CoverageTrace::from_bytes(b"GNT0\x01\x00\x00\x00\x00").is_err());
        assert!(CoverageTrace::from_bytes(b"GNT1\x02\x00\x00\x00\x00").is_err());
        assert!(CoverageTrace::from_bytes(b"GNT1\x01\x00\x00\x00\x09").is_err());
    }

    proptest! {
        #[test]
        fn bucketize_is_monotone(a in 0u32..5000, b in 0u32..5000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bucketize(lo) <= bucketize(hi));
        }

        #[test]
        fn gnt1_roundtrip(classes in proptest::collection::vec(0u8..8, 1..300)) {
            let t = CoverageTrace::from_classes(classes).unwrap();
            prop_assert_eq!(CoverageTrace::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }
}
