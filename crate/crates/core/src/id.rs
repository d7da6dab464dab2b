//! Bit-packed vector identifiers.
//!
//! A 64-bit id stores the root-to-leaf branch path left-aligned in the
//! most-significant bits, `bits_per_branch` bits per level, zero-padded
//! below the leaf's depth. The within-leaf slot fills the bits below the
//! path. For a leaf at depth `d` that is `64 - d * bits_per_branch` bits, so
//! shallow leaves may use padding bits for extra slots. Sorting raw ids
//! therefore lists every subtree as one contiguous run.
//!
//! `u64::MAX` is never assigned. It is the exclusive upper sentinel for
//! nodes on the rightmost edge of the id space, whose true bound is `2^64`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the base tree and of the id bit budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TreeConfigRepr")]
pub struct TreeConfig {
    /// Children per split (k of each k-means step).
    pub branch_factor: usize,
    /// Maximum vectors per base leaf at build time.
    pub leaf_capacity: usize,
    /// Maximum number of branch levels below the root.
    pub max_depth: usize,
    /// Slot bits reserved below the deepest path level.
    pub slot_bits: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self::new(16, 64)
    }
}

/// Omitted fields fall back to what [`TreeConfig::new`] derives.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeConfigRepr {
    branch_factor: Option<usize>,
    leaf_capacity: Option<usize>,
    max_depth: Option<usize>,
    slot_bits: Option<usize>,
}

impl From<TreeConfigRepr> for TreeConfig {
    fn from(r: TreeConfigRepr) -> Self {
        let d = TreeConfig::default();
        let mut t = TreeConfig::new(
            r.branch_factor.unwrap_or(d.branch_factor),
            r.leaf_capacity.unwrap_or(d.leaf_capacity),
        );
        if let Some(s) = r.slot_bits {
            t.slot_bits = s;
            t.max_depth = 64usize.saturating_sub(s) / bits_for(t.branch_factor.max(2));
        }
        if let Some(m) = r.max_depth {
            t.max_depth = m;
        }
        t
    }
}

impl TreeConfig {
    /// Config with the default 8 slot bits and the deepest path that fits.
    pub fn new(branch_factor: usize, leaf_capacity: usize) -> Self {
        let bpb = bits_for(branch_factor.max(2));
        Self {
            branch_factor,
            leaf_capacity,
            max_depth: (64 - 8) / bpb,
            slot_bits: 8,
        }
    }

    pub fn bits_per_branch(&self) -> usize {
        bits_for(self.branch_factor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_factor < 2 {
            return Err(Error::InvalidConfig("branch_factor must be at least 2".into()));
        }
        if self.leaf_capacity < 1 {
            return Err(Error::InvalidConfig("leaf_capacity must be at least 1".into()));
        }
        if self.slot_bits == 0 || self.slot_bits > 64 {
            return Err(Error::InvalidConfig("slot_bits must be in 1..=64".into()));
        }
        if self.max_depth * self.bits_per_branch() + self.slot_bits > 64 {
            return Err(Error::InvalidConfig(format!(
                "max_depth {} * {} bits + {} slot bits exceeds 64",
                self.max_depth,
                self.bits_per_branch(),
                self.slot_bits
            )));
        }
        if self.slot_bits < 64 && (self.leaf_capacity as u128) > (1u128 << self.slot_bits) {
            return Err(Error::InvalidConfig(format!(
                "leaf_capacity {} does not fit in {} slot bits",
                self.leaf_capacity, self.slot_bits
            )));
        }
        Ok(())
    }

    /// Bits available for slots in a leaf at `depth`.
    pub fn slot_field_bits(&self, depth: usize) -> usize {
        64 - depth * self.bits_per_branch()
    }

    /// Number of distinct slots a leaf at `depth` can address.
    pub fn slot_capacity(&self, depth: usize) -> u128 {
        1u128 << self.slot_field_bits(depth)
    }

    pub fn encode(&self, path: &[u32], slot: u64) -> Result<VectorId> {
        if path.len() > self.max_depth {
            return Err(Error::IdOverflow(format!(
                "path length {} exceeds max_depth {}",
                path.len(),
                self.max_depth
            )));
        }
        let mut node = NodeId::ROOT;
        for &b in path {
            if b as usize >= self.branch_factor {
                return Err(Error::IdOverflow(format!(
                    "branch {b} >= branch_factor {}",
                    self.branch_factor
                )));
            }
            node = node.child(b, self);
        }
        node.slot_id(slot, self)
    }

    /// Path and slot of `id`, given the depth of its leaf.
    pub fn decode(&self, id: VectorId, depth: usize) -> (Vec<u32>, u64) {
        let path = (0..depth).map(|d| branch_at(id.0, d, self)).collect();
        (path, id.0 & low_mask(self.slot_field_bits(depth)))
    }
}

fn bits_for(branch_factor: usize) -> usize {
    (usize::BITS - (branch_factor - 1).leading_zeros()) as usize
}

#[inline]
pub(crate) fn low_mask(bits: usize) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Branch index taken at `depth` on the path encoded in `raw`.
#[inline]
pub(crate) fn branch_at(raw: u64, depth: usize, cfg: &TreeConfig) -> u32 {
    let bpb = cfg.bits_per_branch();
    let shift = 64 - (depth + 1) * bpb;
    ((raw >> shift) & low_mask(bpb)) as u32
}

/// Raw 64-bit vector identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VectorId(pub u64);

impl fmt::Display for VectorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

/// A tree node named by its path prefix. Ordered by `(prefix, depth)` so
/// an ancestor sorts before its descendants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub prefix: u64,
    pub depth: u8,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { prefix: 0, depth: 0 };

    pub fn child(self, branch: u32, cfg: &TreeConfig) -> NodeId {
        let shift = 64 - (self.depth as usize + 1) * cfg.bits_per_branch();
        NodeId {
            prefix: self.prefix | (u64::from(branch) << shift),
            depth: self.depth + 1,
        }
    }

    pub fn path(self, cfg: &TreeConfig) -> Vec<u32> {
        (0..self.depth as usize)
            .map(|d| branch_at(self.prefix, d, cfg))
            .collect()
    }

    /// Half-open raw id range `[min, max)` owned by this node's subtree.
    pub fn range(self, cfg: &TreeConfig) -> (u64, u64) {
        let span = 1u128 << cfg.slot_field_bits(self.depth as usize);
        let end = u128::from(self.prefix) + span;
        (self.prefix, end.min(u128::from(u64::MAX)) as u64)
    }

    pub fn contains(self, id: VectorId, cfg: &TreeConfig) -> bool {
        let (lo, hi) = self.range(cfg);
        id.0 >= lo && id.0 < hi
    }

    /// Id of `slot` inside this node treated as a leaf.
    pub fn slot_id(self, slot: u64, cfg: &TreeConfig) -> Result<VectorId> {
        let bits = cfg.slot_field_bits(self.depth as usize);
        if bits < 64 && slot >> bits != 0 {
            return Err(Error::IdOverflow(format!(
                "slot {slot} does not fit in {bits} bits at depth {}",
                self.depth
            )));
        }
        let raw = self.prefix | slot;
        if raw == u64::MAX {
            return Err(Error::IdOverflow("id u64::MAX is reserved".into()));
        }
        Ok(VectorId(raw))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}/{}", self.prefix, self.depth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg4() -> TreeConfig {
        TreeConfig {
            branch_factor: 16,
            leaf_capacity: 16,
            max_depth: 15,
            slot_bits: 4,
        }
    }

    #[test]
    fn zero_and_single_branch() {
        let cfg = cfg4();
        assert_eq!(cfg.bits_per_branch(), 4);
        assert_eq!(cfg.encode(&[], 0).unwrap(), VectorId(0));
        assert_eq!(cfg.encode(&[1], 0).unwrap(), VectorId(1 << 60));
    }

    #[test]
    fn ranges() {
        let cfg = cfg4();
        assert_eq!(NodeId::ROOT.range(&cfg), (0, u64::MAX));
        let c1 = NodeId::ROOT.child(1, &cfg);
        assert_eq!(c1.range(&cfg), (1 << 60, 2 << 60));
        let last = NodeId::ROOT.child(15, &cfg);
        assert_eq!(last.range(&cfg).1, u64::MAX);
    }

    #[test]
    fn bits_per_branch_rounds_up() {
        for (bf, bits) in [(2, 1), (3, 2), (4, 2), (5, 3), (16, 4), (17, 5), (32, 5)] {
            let cfg = TreeConfig {
                branch_factor: bf,
                ..cfg4()
            };
            assert_eq!(cfg.bits_per_branch(), bits, "bf={bf}");
        }
    }

    #[test]
    fn overflow_errors() {
        let cfg = cfg4();
        assert!(cfg.encode(&[16], 0).is_err());
        assert!(cfg.encode(&[0; 16], 0).is_err());
        assert!(cfg.encode(&[0; 15], 16).is_err());
        assert!(cfg.encode(&[15; 15], 15).is_err(), "u64::MAX is reserved");
        assert!(cfg.encode(&[15; 15], 14).is_ok());
    }

    #[test]
    fn config_validation() {
        assert!(TreeConfig::default().validate().is_ok());
        assert!(TreeConfig {
            max_depth: 16,
            ..cfg4()
        }
        .validate()
        .is_err());
        assert!(TreeConfig {
            branch_factor: 1,
            ..cfg4()
        }
        .validate()
        .is_err());
        assert!(TreeConfig {
            leaf_capacity: 17,
            ..cfg4()
        }
        .validate()
        .is_err());
    }

    fn path_and_slot() -> impl Strategy<Value = (Vec<u32>, u64)> {
        (0usize..=15, 0u64..16).prop_flat_map(|(len, slot)| (proptest::collection::vec(0u32..16, len), Just(slot)))
    }

    proptest! {
        #[test]
        fn roundtrip((path, slot) in path_and_slot()) {
            let cfg = cfg4();
            prop_assume!(!(path.len() == 15 && path.iter().all(|&b| b == 15) && slot == 15));
            let id = cfg.encode(&path, slot).unwrap();
            prop_assert_eq!(cfg.decode(id, path.len()), (path, slot));
        }

        /// Order preservation holds between tree-realizable positions, i.e.
        /// whenever neither path is a proper prefix of the other.
        #[test]
        fn order_matches_tuple_order(a in path_and_slot(), b in path_and_slot()) {
            let cfg = cfg4();
            let is_prefix = |x: &[u32], y: &[u32]| x.len() < y.len() && y.starts_with(x);
            prop_assume!(!is_prefix(&a.0, &b.0) && !is_prefix(&b.0, &a.0));
            let (Ok(ia), Ok(ib)) = (cfg.encode(&a.0, a.1), cfg.encode(&b.0, b.1)) else {
                return Ok(());
            };
            prop_assert_eq!(ia.cmp(&ib), a.cmp(&b));
        }

        #[test]
        fn child_ranges_nest(path in proptest::collection::vec(0u32..16, 0..14), b in 0u32..16) {
            let cfg = cfg4();
            let mut node = NodeId::ROOT;
            for &p in &path { node = node.child(p, &cfg); }
            let child = node.child(b, &cfg);
            let (plo, phi) = node.range(&cfg);
            let (clo, chi) = child.range(&cfg);
            prop_assert!(plo <= clo && chi <= phi && clo < chi);
            if b > 0 {
                let sib = node.child(b - 1, &cfg);
                prop_assert_eq!(sib.range(&cfg).1, clo);
            }
        }
    }
}
