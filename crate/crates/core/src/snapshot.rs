//! Binary index snapshots. Layout is documented in `docs/SNAPSHOT_FORMAT.md`.

use std::path::Path;

use crate::bloom::{BloomFilter, BloomParams};
use crate::error::{Error, Result};
use crate::id::{NodeId, TreeConfig};
use crate::index::{Index, IndexConfig, Leaf, Membership, Node, Slot};
use crate::Label;

pub const MAGIC: &[u8; 4] = b"CUR2";
pub const VERSION: u16 = 1;

struct W(Vec<u8>);

impl W {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct R<'a> {
    b: &'a [u8],
    pos: usize,
}

impl R<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .b
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::Snapshot(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Snapshot("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    /// Guard element counts against the bytes that remain.
    fn count(&mut self, min_elem_bytes: usize) -> Result<usize> {
        let n = self.u32()?;
        if n.saturating_mul(min_elem_bytes) > self.b.len() - self.pos {
            return Err(Error::Snapshot(format!(
                "count {n} at byte {} exceeds file",
                self.pos - 4
            )));
        }
        Ok(n)
    }
}

impl Index {
    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut w = W(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(VERSION);
        let c = &self.config;
        w.u32(c.tree.branch_factor);
        w.u32(c.tree.leaf_capacity);
        w.u32(c.tree.max_depth);
        w.u32(c.tree.slot_bits);
        w.u32(self.dim);
        w.u32(c.buffer_capacity);
        w.u8(match c.membership {
            Membership::Bloom => 0,
            Membership::Exact => 1,
        });
        w.f64(c.bloom_fp_rate);
        w.u8(c.bloom_expected_labels.is_some() as u8);
        w.u64(c.bloom_expected_labels.unwrap_or(0) as u64);
        w.f64(c.rebuild_threshold);
        w.u32(c.kmeans_iters);
        w.u64(c.seed);
        w.u64(self.bloom_params.bits as u64);
        w.u32(self.bloom_params.hashes);
        w.u64(self.labels.next_virtual);
        w.u64(self.generation);
        w.u64(self.nodes.len() as u64);
        for n in &self.nodes {
            w.u64(n.id.prefix);
            w.u8(n.id.depth);
            w.u32(n.children.len());
            w.u64(n.size as u64);
            w.u64(n.updates);
            n.centroid.iter().for_each(|&v| w.f32(v));
            w.f32(n.mean_radius);
            match &n.leaf {
                Some(leaf) => {
                    w.u8(1);
                    w.u32(leaf.slots.len());
                    for (i, s) in leaf.slots.iter().enumerate() {
                        w.u64(s.key);
                        w.u8(s.live as u8);
                        w.u32(s.labels.len());
                        s.labels.iter().for_each(|&l| w.u32(l as usize));
                        leaf.vectors[i * self.dim..(i + 1) * self.dim]
                            .iter()
                            .for_each(|&v| w.f32(v));
                    }
                }
                None => w.u8(0),
            }
            w.u32(n.buffers.len());
            for (&l, ids) in &n.buffers {
                w.u32(l as usize);
                w.u32(ids.len());
                ids.iter().for_each(|&id| w.u64(id));
            }
            w.u32(n.interior.len());
            n.interior.iter().for_each(|&l| w.u32(l as usize));
            n.bloom.words().iter().for_each(|&x| w.u64(x));
        }
        w.u32(self.labels.virtual_defs.len());
        for (&l, text) in &self.labels.virtual_defs {
            w.u32(l as usize);
            w.u32(text.len());
            w.0.extend_from_slice(text.as_bytes());
        }
        w.u32(self.rebuild_queue.len());
        for q in &self.rebuild_queue {
            w.u64(q.prefix);
            w.u8(q.depth);
        }
        w.0
    }

    /// Decode and fully validate a snapshot.
    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = R { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let tree = TreeConfig {
            branch_factor: r.u32()?,
            leaf_capacity: r.u32()?,
            max_depth: r.u32()?,
            slot_bits: r.u32()?,
        };
        let dim = r.u32()?;
        let buffer_capacity = r.u32()?;
        let membership = match r.u8()? {
            0 => Membership::Bloom,
            1 => Membership::Exact,
            m => return Err(Error::Snapshot(format!("unknown membership mode {m}"))),
        };
        let bloom_fp_rate = r.f64()?;
        let has_expected = r.u8()? != 0;
        let expected = r.u64()? as usize;
        let config = IndexConfig {
            tree,
            buffer_capacity,
            bloom_fp_rate,
            bloom_expected_labels: has_expected.then_some(expected),
            membership,
            rebuild_threshold: r.f64()?,
            kmeans_iters: r.u32()?,
            seed: r.u64()?,
        };
        config.validate().map_err(|e| Error::Snapshot(e.to_string()))?;
        if dim == 0 {
            return Err(Error::Snapshot("zero dimension".into()));
        }
        let bits = r.u64()? as usize;
        let hashes = r.u32()?;
        if bits == 0 || hashes == 0 {
            return Err(Error::Snapshot("empty bloom parameters".into()));
        }
        let mut index = Index::empty(config, dim);
        index.bloom_params = BloomParams { bits, hashes };
        index.labels.next_virtual = r.u64()?;
        index.generation = r.u64()?;
        let n_nodes = r.u64()? as usize;
        if n_nodes == 0 || n_nodes > bytes.len() {
            return Err(Error::Snapshot(format!("implausible node count {n_nodes}")));
        }
        let words = bits.div_ceil(64);
        let mut nodes = Vec::with_capacity(n_nodes);
        let mut kids_left: Vec<(usize, usize)> = Vec::new();
        for i in 0..n_nodes {
            let id = NodeId {
                prefix: r.u64()?,
                depth: r.u8()?,
            };
            let n_children = r.u32()?;
            let size = r.u64()? as usize;
            let updates = r.u64()?;
            let centroid = r.f32s(dim)?;
            let mean_radius = r.f32()?;
            let leaf = match r.u8()? {
                0 => None,
                1 => {
                    let n_slots = r.count(13)?;
                    let mut leaf = Leaf {
                        slots: Vec::with_capacity(n_slots),
                        vectors: Vec::with_capacity(n_slots * dim),
                    };
                    for _ in 0..n_slots {
                        let key = r.u64()?;
                        let live = r.u8()? != 0;
                        let nl = r.count(4)?;
                        let labels = (0..nl).map(|_| r.u32().map(|l| l as Label)).collect::<Result<_>>()?;
                        leaf.slots.push(Slot { key, live, labels });
                        leaf.vectors.extend(r.f32s(dim)?);
                    }
                    Some(leaf)
                }
                f => return Err(Error::Snapshot(format!("bad leaf flag {f}"))),
            };
            let mut buffers = std::collections::BTreeMap::new();
            for _ in 0..r.count(8)? {
                let l = r.u32()? as Label;
                let n = r.count(8)?;
                let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                buffers.insert(l, ids);
            }
            let mut interior = std::collections::BTreeSet::new();
            for _ in 0..r.count(4)? {
                interior.insert(r.u32()? as Label);
            }
            let bloom = BloomFilter::from_words((0..words).map(|_| r.u64()).collect::<Result<_>>()?);
            // Attach to the nearest ancestor still expecting children.
            let parent = loop {
                match kids_left.last_mut() {
                    None if i == 0 => break None,
                    None => return Err(Error::Snapshot("more than one root".into())),
                    Some((_, 0)) => {
                        kids_left.pop();
                    }
                    Some((p, left)) => {
                        *left -= 1;
                        break Some(*p);
                    }
                }
            };
            if let Some(p) = parent {
                let pn: &mut Node = &mut nodes[p];
                pn.children.push(i);
            }
            kids_left.push((i, n_children));
            nodes.push(Node {
                id,
                parent,
                children: Vec::with_capacity(n_children),
                centroid,
                mean_radius,
                size,
                updates,
                leaf,
                buffers,
                interior,
                bloom,
            });
        }
        if kids_left.iter().any(|&(_, left)| left > 0) {
            return Err(Error::Snapshot("node records end before all children".into()));
        }
        index.nodes = nodes;
        for _ in 0..r.count(8)? {
            let l = r.u32()? as Label;
            let len = r.count(1)?;
            let text = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Snapshot("virtual definition is not UTF-8".into()))?;
            index.labels.virtual_defs.insert(l, text.to_owned());
        }
        for _ in 0..r.count(9)? {
            index.rebuild_queue.push(NodeId {
                prefix: r.u64()?,
                depth: r.u8()?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Snapshot(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        // Slot ids must encode before the key map can be derived.
        for n in &index.nodes {
            if let Some(leaf) = &n.leaf {
                if let Some(last) = leaf.slots.len().checked_sub(1) {
                    n.id.slot_id(last as u64, &index.config.tree)
                        .map_err(|e| Error::Snapshot(e.to_string()))?;
                }
            }
        }
        index.rebuild_key_map();
        index.labels.counts = index
            .collect_label_ids()
            .into_iter()
            .map(|(l, v)| (l, v.len()))
            .collect();
        index.check_invariants().map_err(|v| Error::Snapshot(v.to_string()))?;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_snapshot_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot_bytes(&bytes)
    }
}
