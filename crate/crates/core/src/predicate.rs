//! Boolean label predicates, their qualified id lists, and the temporary
//! index that mirrors the base tree over such a list.
//!
//! Grammar (`!` binds tighter than `&`, which binds tighter than `|`):
//!
//! ```text
//! expr  := and ('|' and)*
//! and   := unary ('&' unary)*
//! unary := '!' unary | atom
//! atom  := INTEGER | '(' expr ')'
//! ```
//!
//! A negation is only meaningful against a bounding set, so `!p` must be a
//! direct operand of an `&` that also has a non-negated operand. The `&`
//! then denotes `(∩ positive operands) \ (∪ negated operands)`.

use std::fmt;
use std::num::NonZeroUsize;
use std::sync::Arc;

use lru::LruCache;

use crate::error::{Error, Result};
use crate::id::{NodeId, VectorId};
use crate::index::Index;
use crate::labels::is_virtual;
use crate::search::{search_space, SearchParams, SearchResult, SearchSpace};
use crate::Label;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Predicate {
    Label(Label),
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
    Not(Box<Predicate>),
}

impl Predicate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Parser {
            src: text.as_bytes(),
            pos: 0,
        };
        p.skip_ws();
        if p.pos == p.src.len() {
            return Err(Error::EmptyPredicate);
        }
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("unexpected trailing input"));
        }
        let e = e.normalize();
        e.check(false).map_err(|msg| Error::Parse { pos: 0, msg })?;
        Ok(e)
    }

    /// Flatten nested operators, sort and deduplicate operands, and collapse
    /// single-operand groups. Equal sets yield equal normal forms for the
    /// usual commutativity, associativity and idempotence rewrites.
    pub fn normalize(self) -> Self {
        match self {
            Predicate::Label(_) => self,
            Predicate::Not(c) => Predicate::Not(Box::new(c.normalize())),
            Predicate::And(ops) => Self::group(ops, true),
            Predicate::Or(ops) => Self::group(ops, false),
        }
    }

    fn group(ops: Vec<Predicate>, and: bool) -> Self {
        let mut flat = Vec::with_capacity(ops.len());
        for op in ops.into_iter().map(Predicate::normalize) {
            match op {
                Predicate::And(inner) if and => flat.extend(inner),
                Predicate::Or(inner) if !and => flat.extend(inner),
                other => flat.push(other),
            }
        }
        flat.sort_by_cached_key(|p| p.to_string());
        flat.dedup();
        if flat.len() == 1 {
            return flat.pop().expect("one operand");
        }
        if and {
            Predicate::And(flat)
        } else {
            Predicate::Or(flat)
        }
    }

    fn check(&self, under_and: bool) -> std::result::Result<(), String> {
        match self {
            Predicate::Label(_) => Ok(()),
            Predicate::Not(c) if under_and => c.check(false),
            Predicate::Not(_) => Err("negation must be an operand of '&' with a positive operand".into()),
            Predicate::Or(ops) => ops.iter().try_for_each(|o| o.check(false)),
            Predicate::And(ops) => {
                if ops.iter().all(|o| matches!(o, Predicate::Not(_))) {
                    return Err("'&' needs at least one non-negated operand".into());
                }
                ops.iter().try_for_each(|o| o.check(true))
            }
        }
    }

    /// Every label mentioned.
    pub fn labels(&self) -> Vec<Label> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect(&self, out: &mut Vec<Label>) {
        match self {
            Predicate::Label(l) => out.push(*l),
            Predicate::Not(c) => c.collect(out),
            Predicate::And(ops) | Predicate::Or(ops) => ops.iter().for_each(|o| o.collect(out)),
        }
    }

    /// Per-vector evaluation against a sorted label set.
    pub fn matches(&self, labels: &[Label]) -> bool {
        match self {
            Predicate::Label(l) => labels.binary_search(l).is_ok(),
            Predicate::Or(ops) => ops.iter().any(|o| o.matches(labels)),
            Predicate::And(ops) => ops.iter().all(|o| match o {
                Predicate::Not(c) => !c.matches(labels),
                p => p.matches(labels),
            }),
            // Only reachable for unchecked trees; no bounding set means nothing qualifies.
            Predicate::Not(_) => false,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, ops: &[Predicate], sep: &str| {
            f.write_str("(")?;
            for (i, o) in ops.iter().enumerate() {
                if i > 0 {
                    f.write_str(sep)?;
                }
                write!(f, "{o}")?;
            }
            f.write_str(")")
        };
        match self {
            Predicate::Label(l) => write!(f, "{l}"),
            Predicate::Not(c) => write!(f, "!{c}"),
            Predicate::And(ops) => join(f, ops, " & "),
            Predicate::Or(ops) => join(f, ops, " | "),
        }
    }
}

impl std::str::FromStr for Predicate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Predicate::parse(s)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Predicate> {
        let mut ops = vec![self.and()?];
        while self.eat(b'|') {
            ops.push(self.and()?);
        }
        Ok(if ops.len() == 1 {
            ops.pop().unwrap()
        } else {
            Predicate::Or(ops)
        })
    }

    fn and(&mut self) -> Result<Predicate> {
        let mut ops = vec![self.unary()?];
        while self.eat(b'&') {
            ops.push(self.unary()?);
        }
        Ok(if ops.len() == 1 {
            ops.pop().unwrap()
        } else {
            Predicate::And(ops)
        })
    }

    fn unary(&mut self) -> Result<Predicate> {
        if self.eat(b'!') {
            return Ok(Predicate::Not(Box::new(self.unary()?)));
        }
        if self.eat(b'(') {
            let e = self.expr()?;
            if !self.eat(b')') {
                return Err(self.err("expected ')'"));
            }
            return Ok(e);
        }
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a label, '!' or '('"));
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        text.parse::<Label>().map(Predicate::Label).map_err(|_| Error::Parse {
            pos: start,
            msg: format!("label {text} out of range"),
        })
    }
}

/// Sorted union of sorted, duplicate-free lists.
fn union(lists: Vec<Vec<u64>>) -> Vec<u64> {
    let mut lists = lists;
    while lists.len() > 1 {
        let b = lists.pop().unwrap();
        let a = lists.pop().unwrap();
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        lists.insert(0, out);
    }
    lists.pop().unwrap_or_default()
}

/// `a ∩ b` (keep = true) or `a \ b` (keep = false), both sorted.
fn filter_sorted(a: &[u64], b: &[u64], keep: bool) -> Vec<u64> {
    let mut out = Vec::new();
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        let present = j < b.len() && b[j] == x;
        if present == keep {
            out.push(x);
        }
    }
    out
}

impl Index {
    /// Sorted ids of the live vectors satisfying `p`, from buffer merges.
    pub fn eval_predicate(&self, p: &Predicate) -> Vec<u64> {
        match p {
            Predicate::Label(l) => self.label_members(*l),
            Predicate::Or(ops) => union(ops.iter().map(|o| self.eval_predicate(o)).collect()),
            Predicate::And(ops) => {
                let (neg, pos): (Vec<&Predicate>, Vec<&Predicate>) =
                    ops.iter().partition(|o| matches!(o, Predicate::Not(_)));
                let mut pos_sets: Vec<Vec<u64>> = pos.iter().map(|o| self.eval_predicate(o)).collect();
                pos_sets.sort_by_key(Vec::len);
                let mut acc = match pos_sets.first() {
                    Some(s) => s.clone(),
                    None => return Vec::new(),
                };
                for s in &pos_sets[1..] {
                    acc = filter_sorted(&acc, s, true);
                }
                for n in neg {
                    let Predicate::Not(c) = n else { unreachable!() };
                    acc = filter_sorted(&acc, &self.eval_predicate(c), false);
                }
                acc
            }
            Predicate::Not(_) => Vec::new(),
        }
    }

    /// Algorithm-2 construction over a sorted id list: a slice becomes a leaf
    /// when it fits in `B_max` (or its base node is a base leaf); otherwise
    /// it is split among the base children by binary search on their id
    /// ranges. No distances are computed.
    pub fn build_temp_index(&self, ids: Vec<u64>) -> Result<TempIndex> {
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidIdList("ids must be strictly ascending".into()));
        }
        if ids.last() == Some(&u64::MAX) {
            return Err(Error::InvalidIdList("id u64::MAX lies outside the root range".into()));
        }
        let mut t = TempIndex {
            ids,
            nodes: Vec::new(),
            generation: self.generation,
        };
        if !t.ids.is_empty() && !self.nodes.is_empty() {
            let n = t.ids.len();
            self.temp_node(&mut t, 0, 0, n);
        }
        Ok(t)
    }

    fn temp_node(&self, t: &mut TempIndex, base: usize, lo: usize, hi: usize) -> usize {
        let me = t.nodes.len();
        t.nodes.push(TempNode {
            base,
            id: self.nodes[base].id,
            lo,
            hi,
            children: Vec::new(),
        });
        if hi - lo <= self.config.buffer_capacity || self.nodes[base].is_leaf() {
            return me;
        }
        let mut kids = Vec::new();
        for &c in &self.nodes[base].children {
            let (clo, chi) = self.nodes[c].id.range(&self.config.tree);
            let a = lo + t.ids[lo..hi].partition_point(|&x| x < clo);
            let b = lo + t.ids[lo..hi].partition_point(|&x| x < chi);
            if a < b {
                kids.push(self.temp_node(t, c, a, b));
            }
        }
        t.nodes[me].children = kids;
        me
    }

    /// Evaluate `p`, build its temporary index and search it.
    pub fn search_predicate(&self, q: &[f32], p: &Predicate, params: &SearchParams) -> Result<SearchResult> {
        params.validate()?;
        self.check_query(q)?;
        let t = self.build_temp_index(self.eval_predicate(p))?;
        self.search_temp(&t, q, params)
    }

    /// Search with an externally supplied sorted list of qualifying ids.
    pub fn search_with_id_list(&self, q: &[f32], ids: Vec<u64>, params: &SearchParams) -> Result<SearchResult> {
        params.validate()?;
        self.check_query(q)?;
        if let Some(&bad) = ids.iter().find(|&&id| self.key_of(VectorId(id)).is_none()) {
            return Err(Error::InvalidIdList(format!("id {bad:#x} is not a live vector")));
        }
        let t = self.build_temp_index(ids)?;
        self.search_temp(&t, q, params)
    }

    /// Search a previously built temporary index.
    pub fn search_temp(&self, t: &TempIndex, q: &[f32], params: &SearchParams) -> Result<SearchResult> {
        params.validate()?;
        self.check_query(q)?;
        if t.generation != self.generation {
            return Err(Error::StaleTempIndex {
                built: t.generation,
                current: self.generation,
            });
        }
        let view = TempView { index: self, temp: t };
        let (found, stats, trace) = search_space(&view, q, params, |id| self.vector_unchecked(id));
        Ok(self.finish(found, stats, trace))
    }

    /// Pre-index `p` under a fresh virtual label: its temporary index's leaf
    /// slices become buffers at the same base nodes, its internal nodes become
    /// internal nodes of the new label's tree, and the label is recorded on
    /// every qualifying vector so later updates and rebuilds keep it.
    pub fn integrate_as_virtual_label(&mut self, p: &Predicate) -> Result<Label> {
        let ids = self.eval_predicate(p);
        if ids.is_empty() {
            return Err(Error::EmptyPredicate);
        }
        let t = self.build_temp_index(ids)?;
        let v = self.labels.allocate_virtual().ok_or(Error::VirtualLabelsExhausted)?;
        let params = self.bloom_params;
        for tn in &t.nodes {
            let node = &mut self.nodes[tn.base];
            if tn.children.is_empty() {
                node.buffers.insert(v, t.ids[tn.lo..tn.hi].to_vec());
            } else {
                node.interior.insert(v);
            }
            node.bloom.insert(v, params);
        }
        for &id in &t.ids {
            let (leaf, slot) = self.locate(VectorId(id)).expect("qualified id is live");
            let labels = &mut self.nodes[leaf].leaf.as_mut().expect("leaf").slots[slot].labels;
            let at = labels.partition_point(|&l| l < v);
            labels.insert(at, v);
        }
        self.labels.add(v, t.ids.len());
        self.labels.virtual_defs.insert(v, p.clone().normalize().to_string());
        self.generation += 1;
        Ok(v)
    }

    /// Predicate text a virtual label was created from.
    pub fn virtual_definition(&self, v: Label) -> Option<&str> {
        debug_assert!(is_virtual(v) || !self.labels.virtual_defs.contains_key(&v));
        self.labels.virtual_defs.get(&v).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TempNode {
    /// Arena index of the mirrored base node.
    pub base: usize,
    pub id: NodeId,
    /// Half-open offsets into [`TempIndex::ids`].
    pub lo: usize,
    pub hi: usize,
    pub children: Vec<usize>,
}

/// Mirror of the base tree over one sorted qualified-id list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TempIndex {
    pub ids: Vec<u64>,
    /// Pre-order; index 0 is the root when the list is non-empty.
    pub nodes: Vec<TempNode>,
    generation: u64,
}

impl TempIndex {
    pub fn leaves(&self) -> impl Iterator<Item = &TempNode> {
        self.nodes.iter().filter(|n| n.children.is_empty())
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}

struct TempView<'a> {
    index: &'a Index,
    temp: &'a TempIndex,
}

impl SearchSpace for TempView<'_> {
    fn root(&self) -> Option<usize> {
        (!self.temp.nodes.is_empty()).then_some(0)
    }
    fn node_id(&self, n: usize) -> NodeId {
        self.temp.nodes[n].id
    }
    fn centroid(&self, n: usize) -> &[f32] {
        &self.index.nodes[self.temp.nodes[n].base].centroid
    }
    fn mean_radius(&self, n: usize) -> f32 {
        self.index.nodes[self.temp.nodes[n].base].mean_radius
    }
    fn children(&self, n: usize) -> &[usize] {
        &self.temp.nodes[n].children
    }
    fn member(&self, _: usize) -> bool {
        true
    }
    fn buffer(&self, n: usize) -> Option<&[u64]> {
        let t = &self.temp.nodes[n];
        t.children.is_empty().then(|| &self.temp.ids[t.lo..t.hi])
    }
}

/// LRU cache of temporary indexes keyed by normalized predicate text and
/// index generation. Capacity 0 disables caching.
pub struct PredicateCache {
    inner: Option<LruCache<(String, u64), Arc<TempIndex>>>,
    pub hits: u64,
    pub misses: u64,
}

impl PredicateCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: NonZeroUsize::new(capacity).map(LruCache::new),
            hits: 0,
            misses: 0,
        }
    }

    pub fn get_or_build(&mut self, index: &Index, p: &Predicate) -> Result<Arc<TempIndex>> {
        let key = (p.clone().normalize().to_string(), index.generation());
        if let Some(cache) = &mut self.inner {
            if let Some(t) = cache.get(&key) {
                self.hits += 1;
                return Ok(Arc::clone(t));
            }
        }
        self.misses += 1;
        let t = Arc::new(index.build_temp_index(index.eval_predicate(p))?);
        if let Some(cache) = &mut self.inner {
            cache.put(key, Arc::clone(&t));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Predicate {
        Predicate::parse(s).unwrap()
    }

    #[test]
    fn precedence() {
        assert_eq!(
            p("(3 & 7) | !4 & 3"),
            Predicate::Or(vec![
                Predicate::And(vec![Predicate::Label(3), Predicate::Label(7)]),
                Predicate::And(vec![Predicate::Not(Box::new(Predicate::Label(4))), Predicate::Label(3)]),
            ])
            .normalize()
        );
        assert_eq!(p("1|2&3").to_string(), "((2 & 3) | 1)");
    }

    #[test]
    fn normal_form_is_canonical() {
        assert_eq!(p("3 & 7").to_string(), p("7&3").to_string());
        assert_eq!(p("(1|2)|3").to_string(), p("3|(2|1)").to_string());
        assert_eq!(p("5 & 5"), Predicate::Label(5));
        assert_eq!(p(&p("(1 & !2) | 9").to_string()), p("(1 & !2) | 9"));
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "",
            "!3",
            "3 &",
            "(3",
            "3 | !4",
            "!3 & !4",
            "a",
            "99999999999",
            "3 4",
            "!!3 & 1",
        ] {
            assert!(Predicate::parse(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn per_vector_semantics() {
        let e = p("(3 & !4) | 9");
        assert!(e.matches(&[3]));
        assert!(!e.matches(&[3, 4]));
        assert!(e.matches(&[3, 4, 9]));
        assert!(!e.matches(&[]));
    }

    #[test]
    fn sorted_set_helpers() {
        assert_eq!(union(vec![vec![1, 4], vec![2, 4, 9], vec![]]), vec![1, 2, 4, 9]);
        assert_eq!(filter_sorted(&[1, 2, 3, 5], &[2, 5, 7], true), vec![2, 5]);
        assert_eq!(filter_sorted(&[1, 2, 3, 5], &[2, 5, 7], false), vec![1, 3]);
    }

    #[test]
    fn cache_hits_on_equivalent_text() {
        use crate::dataset::{Dataset, LabelAssignment};
        let ds = Dataset::new(1, (0..50).map(|i| i as f32).collect()).unwrap();
        let la = LabelAssignment::new((0..50).map(|i| vec![i % 3, 10 + i % 2]).collect());
        let idx = Index::build(&ds, &la, Default::default()).unwrap();
        let mut c = PredicateCache::new(4);
        let a = c.get_or_build(&idx, &p("1 & 10")).unwrap();
        let b = c.get_or_build(&idx, &p("10&1")).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!((c.hits, c.misses), (1, 1));
        let mut off = PredicateCache::new(0);
        off.get_or_build(&idx, &p("1")).unwrap();
        off.get_or_build(&idx, &p("1")).unwrap();
        assert_eq!((off.hits, off.misses), (0, 2));
    }
}
