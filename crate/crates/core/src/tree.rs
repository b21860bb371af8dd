//! Servable hierarchical index: assembly from finalized codebooks, beam
//! search with scoring-call accounting, and a binary container.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HillError, Result};
use crate::hill::LevelCodebook;
use crate::linalg::{dot, rank_order, top_k, Matrix, Scored};
use crate::metrics::{Retrieval, Retriever};
use crate::model::NodeEmbeddings;
use crate::scalar::Scalar;

pub const INDEX_MAGIC: [u8; 4] = *b"HILL";
pub const INDEX_VERSION: u32 = 1;
const NONE: u32 = u32::MAX;

/// Nodes of one tree level.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexLevel<T> {
    pub level: usize,
    /// Full embedding of each node's representative item; zero for nodes
    /// without one.
    pub embeddings: Matrix<T>,
    pub representative: Vec<Option<u32>>,
    pub parent: Vec<Option<u32>>,
    /// Node ids at the level below, or item ids at level 2. Ascending.
    pub children: Vec<Vec<u32>>,
}

impl<T> IndexLevel<T> {
    pub fn width(&self) -> usize {
        self.children.len()
    }

    /// Nodes that take part in search (those with children).
    pub fn searchable(&self) -> impl Iterator<Item = u32> + '_ {
        self.children.iter().enumerate().filter(|(_, c)| !c.is_empty()).map(|(k, _)| k as u32)
    }

    pub fn max_fanout(&self) -> usize {
        self.children.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalIndex<T> {
    pub dim: usize,
    /// Item embeddings used for leaf scoring.
    pub items: Matrix<T>,
    /// Level-2 node of every item.
    pub item_parent: Vec<u32>,
    /// Levels `2..=N`, nearest-to-items first.
    pub levels: Vec<IndexLevel<T>>,
}

/// Ranked items with per-query accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult<T> {
    pub items: Vec<Scored<T>>,
    /// Dot products performed.
    pub scoring_calls: u64,
    /// Per returned item, its ancestors from the top level down to level 2.
    pub path_trace: Vec<Vec<u32>>,
    /// Beam survivors per level, top level first.
    pub survivors: Vec<Vec<u32>>,
}

impl<T> Default for RetrievalResult<T> {
    fn default() -> Self {
        Self { items: Vec::new(), scoring_calls: 0, path_trace: Vec::new(), survivors: Vec::new() }
    }
}

impl<T: Scalar> HierarchicalIndex<T> {
    pub fn empty(dim: usize) -> Self {
        Self { dim, items: Matrix::zeros(0, dim), item_parent: Vec::new(), levels: Vec::new() }
    }

    /// Number of tree levels `N` (items are level 1).
    pub fn num_levels(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    /// Level `n` (2..=N).
    pub fn level(&self, n: usize) -> Option<&IndexLevel<T>> {
        n.checked_sub(2).and_then(|i| self.levels.get(i))
    }

    pub fn top(&self) -> Option<&IndexLevel<T>> {
        self.levels.last()
    }

    /// Children of a level-`n` entity (items when `n == 2`).
    pub fn children(&self, level: usize, node: u32) -> &[u32] {
        self.level(level).and_then(|l| l.children.get(node as usize)).map_or(&[], Vec::as_slice)
    }

    /// Ancestors of `item`, top level first, ending at its level-2 node.
    pub fn item_path(&self, item: u32) -> Vec<u32> {
        let Some(&first) = self.item_parent.get(item as usize) else {
            return Vec::new();
        };
        let mut path = vec![first];
        let mut node = first;
        for lvl in &self.levels {
            match lvl.parent.get(node as usize).copied().flatten() {
                Some(p) => {
                    path.push(p);
                    node = p;
                }
                None => break,
            }
        }
        path.reverse();
        path
    }

    /// Structural checks: every item has one level-2 parent listing it,
    /// every non-empty lower node has a parent that lists it, childless
    /// nodes carry no representative, and every item reaches the top.
    pub fn validate(&self) -> Result<()> {
        let v = self.num_items();
        if self.item_parent.len() != v {
            return Err(HillError::Format("item parent table size mismatch".into()));
        }
        if v > 0 && self.levels.is_empty() {
            return Err(HillError::Format("items without index levels".into()));
        }
        let mut seen = vec![0u32; v];
        if let Some(l2) = self.levels.first() {
            for (k, ch) in l2.children.iter().enumerate() {
                for &j in ch {
                    let j = j as usize;
                    if j >= v || self.item_parent[j] != k as u32 {
                        return Err(HillError::Format(format!("level 2 node {k} lists foreign item {j}")));
                    }
                    seen[j] += 1;
                }
            }
        }
        if let Some(j) = seen.iter().position(|&c| c != 1) {
            return Err(HillError::Format(format!("item {j} is not the child of exactly one level-2 node")));
        }
        for (i, lvl) in self.levels.iter().enumerate() {
            let n = lvl.width();
            if lvl.representative.len() != n || lvl.parent.len() != n || lvl.embeddings.rows() != n {
                return Err(HillError::Format(format!("level {} tables disagree in size", lvl.level)));
            }
            let above = self.levels.get(i + 1);
            for k in 0..n {
                let empty = lvl.children[k].is_empty();
                if empty && (lvl.representative[k].is_some() || lvl.parent[k].is_some()) {
                    return Err(HillError::Format(format!("childless node {k} at level {} is linked", lvl.level)));
                }
                if let Some(r) = lvl.representative[k] {
                    if r as usize >= v {
                        return Err(HillError::Format(format!("representative {r} out of range")));
                    }
                }
                match (above, lvl.parent[k]) {
                    (Some(up), Some(p)) => {
                        if up.children.get(p as usize).is_none_or(|c| c.binary_search(&(k as u32)).is_err()) {
                            return Err(HillError::Format(format!(
                                "node {k} at level {} not listed by parent {p}",
                                lvl.level
                            )));
                        }
                    }
                    (Some(_), None) if !empty => {
                        return Err(HillError::Format(format!("orphan node {k} at level {}", lvl.level)));
                    }
                    (None, Some(_)) => return Err(HillError::Format("top-level node with a parent".into())),
                    _ => {}
                }
                if let Some(below) = i.checked_sub(1).map(|b| &self.levels[b]) {
                    for &c in &lvl.children[k] {
                        if below.parent.get(c as usize).copied().flatten() != Some(k as u32) {
                            return Err(HillError::Format(format!("child {c} of node {k} disagrees on parent")));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> NodeEmbeddings<T> for HierarchicalIndex<T> {
    fn node_embedding(&self, level: usize, node: u32) -> Option<&[T]> {
        let l = self.level(level)?;
        l.representative.get(node as usize)?.as_ref()?;
        Some(l.embeddings.row(node as usize))
    }
}

/// Builds the tree from finalized codebooks (levels 2..N in order).
///
/// An item's parent is its level-2 assignment; a level-`n` node's parent is
/// the level-`n+1` assignment of its representative item. Nodes end up
/// childless when nothing maps to them; they lose their representative and
/// parent and are skipped by search.
pub fn assemble<T: Scalar>(
    codebooks: &[LevelCodebook<T>],
    item_embeddings: &Matrix<T>,
) -> Result<HierarchicalIndex<T>> {
    let v = item_embeddings.rows();
    let d = item_embeddings.cols();
    if codebooks.is_empty() {
        if v == 0 {
            return Ok(HierarchicalIndex::empty(d));
        }
        return Err(HillError::config("assembling an index needs at least one level"));
    }
    for (i, cb) in codebooks.iter().enumerate() {
        if !cb.finalized {
            return Err(HillError::Unfinalized { level: cb.level });
        }
        if cb.level != i + 2 {
            return Err(HillError::Domain(format!("codebook {i} has level {}, expected {}", cb.level, i + 2)));
        }
        if cb.assignment.len() != v {
            return Err(HillError::DimensionMismatch { expected: v, actual: cb.assignment.len() });
        }
        if cb.dim() != d {
            return Err(HillError::DimensionMismatch { expected: d, actual: cb.dim() });
        }
    }
    let item_parent = codebooks[0].assignment.clone();
    let mut levels: Vec<IndexLevel<T>> = Vec::with_capacity(codebooks.len());
    for (i, cb) in codebooks.iter().enumerate() {
        let k = cb.num_nodes();
        let mut children = vec![Vec::new(); k];
        match i.checked_sub(1) {
            None => {
                for (j, &p) in item_parent.iter().enumerate() {
                    children[p as usize].push(j as u32);
                }
            }
            Some(b) => {
                for (c, p) in levels[b].parent.iter().enumerate() {
                    if let Some(p) = p {
                        children[*p as usize].push(c as u32);
                    }
                }
            }
        }
        let representative: Vec<Option<u32>> =
            (0..k).map(|n| cb.representative[n].filter(|_| !children[n].is_empty())).collect();
        let parent = match codebooks.get(i + 1) {
            Some(up) => representative.iter().map(|r| r.map(|r| up.assignment[r as usize])).collect(),
            None => vec![None; k],
        };
        let mut embeddings = Matrix::zeros(k, d);
        for (n, r) in representative.iter().enumerate() {
            if let Some(r) = r {
                embeddings.row_mut(n).copy_from_slice(item_embeddings.row(*r as usize));
            }
        }
        levels.push(IndexLevel { level: cb.level, embeddings, representative, parent, children });
    }
    let index = HierarchicalIndex { dim: d, items: item_embeddings.clone(), item_parent, levels };
    debug_assert!(index.validate().is_ok());
    Ok(index)
}

fn score_set<T: Scalar>(
    user: &[T],
    ids: impl Iterator<Item = u32>,
    embeddings: &Matrix<T>,
    calls: &mut u64,
) -> Vec<Scored<T>> {
    ids.map(|id| {
        *calls += 1;
        Scored { id, score: dot(user, embeddings.row(id as usize)) }
    })
    .collect()
}

/// Level-by-level descent keeping the `beam` best nodes (ties to the lowest
/// id). Candidate items under the final survivors are all scored; ids in
/// `exclude` (sorted) are then dropped before taking `top_k`. Excluded items
/// still count as scoring calls.
pub fn beam_search_excluding<T: Scalar>(
    index: &HierarchicalIndex<T>,
    user: &[T],
    beam: usize,
    top_k_items: usize,
    exclude: &[u32],
) -> Result<RetrievalResult<T>> {
    if beam == 0 || top_k_items == 0 {
        return Err(HillError::config("beam width and top_k must be >= 1"));
    }
    if user.len() != index.dim {
        return Err(HillError::DimensionMismatch { expected: index.dim, actual: user.len() });
    }
    let Some(top) = index.top() else {
        return Ok(RetrievalResult::default());
    };
    let mut calls = 0u64;
    let mut survivors = Vec::with_capacity(index.levels.len());
    let mut kept = top_k(score_set(user, top.searchable(), &top.embeddings, &mut calls), beam);
    survivors.push(kept.iter().map(|s| s.id).collect::<Vec<_>>());
    for lvl in index.levels.iter().rev().skip(1) {
        let above = &index.levels[lvl.level - 1];
        let cands = kept.iter().flat_map(|s| above.children[s.id as usize].iter().copied());
        kept = top_k(score_set(user, cands, &lvl.embeddings, &mut calls), beam);
        survivors.push(kept.iter().map(|s| s.id).collect());
    }
    let l2 = &index.levels[0];
    let cands = kept.iter().flat_map(|s| l2.children[s.id as usize].iter().copied());
    let mut scored = score_set(user, cands, &index.items, &mut calls);
    scored.retain(|s| exclude.binary_search(&s.id).is_err());
    let items = top_k(scored, top_k_items);
    let path_trace = items.iter().map(|s| index.item_path(s.id)).collect();
    Ok(RetrievalResult { items, scoring_calls: calls, path_trace, survivors })
}

pub fn beam_search<T: Scalar>(
    index: &HierarchicalIndex<T>,
    user: &[T],
    beam: usize,
    top_k_items: usize,
) -> Result<RetrievalResult<T>> {
    beam_search_excluding(index, user, beam, top_k_items, &[])
}

/// Exact top-k by dot product over every item, minus `exclude` (sorted).
pub fn brute_force_top_k<T: Scalar>(items: &Matrix<T>, user: &[T], k: usize, exclude: &[u32]) -> Vec<Scored<T>> {
    let scored = (0..items.rows() as u32)
        .filter(|j| exclude.binary_search(j).is_err())
        .map(|j| Scored { id: j, score: dot(user, items.row(j as usize)) })
        .collect();
    top_k(scored, k)
}

/// Scoring-call accounting for one index and beam width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub beam: usize,
    /// Upper bound on calls per level, top level first, items last.
    pub calls_bound: Vec<u64>,
    pub total_calls_bound: u64,
    /// `Σ calls_bound · unit cost`.
    pub weighted_cost_bound: f64,
    /// Flat retrieval: every item once at the item-level cost.
    pub flat_cost: f64,
    pub flat_calls: u64,
}

/// Analytic cost of beam search. The top level costs its searchable width;
/// each lower level costs at most `min(B · max fanout above, width)`.
/// `unit_costs` gives the per-call cost per level (top first, items last);
/// missing entries default to 1.
pub fn cost_estimate<T: Scalar>(index: &HierarchicalIndex<T>, beam: usize, unit_costs: &[f64]) -> CostReport {
    let v = index.num_items() as u64;
    let mut bound = Vec::new();
    if let Some(top) = index.top() {
        bound.push(top.searchable().count() as u64);
        let mut above = top;
        for lvl in index.levels.iter().rev().skip(1) {
            let width = lvl.searchable().count() as u64;
            bound.push(((beam * above.max_fanout()) as u64).min(width));
            above = lvl;
        }
        bound.push(((beam * above.max_fanout()) as u64).min(v));
    }
    let cost = |i: usize| unit_costs.get(i).copied().unwrap_or(1.0);
    let weighted = bound.iter().enumerate().map(|(i, &c)| c as f64 * cost(i)).sum();
    let flat_unit = unit_costs.get(bound.len().saturating_sub(1)).copied().unwrap_or(1.0);
    CostReport {
        beam,
        total_calls_bound: bound.iter().sum(),
        calls_bound: bound,
        weighted_cost_bound: weighted,
        flat_cost: v as f64 * flat_unit,
        flat_calls: v,
    }
}

/// Calls implied by a query's survivors: the searchable top level plus the
/// children of every survivor.
pub fn trace_cost<T: Scalar>(index: &HierarchicalIndex<T>, survivors: &[Vec<u32>]) -> u64 {
    let Some(top) = index.top() else {
        return 0;
    };
    let mut calls = top.searchable().count() as u64;
    for (s, lvl) in survivors.iter().zip(index.levels.iter().rev()) {
        calls += s.iter().map(|&k| lvl.children[k as usize].len() as u64).sum::<u64>();
    }
    calls
}

/// Exhaustive dot-product retrieval.
pub struct FlatRetriever<'a, T> {
    pub users: &'a Matrix<T>,
    pub items: &'a Matrix<T>,
}

impl<T: Scalar> Retriever for FlatRetriever<'_, T> {
    fn retrieve(&self, user: u32, k: usize, exclude: &[u32]) -> Retrieval {
        let top = brute_force_top_k(self.items, self.users.row(user as usize), k, exclude);
        Retrieval { items: top.into_iter().map(|s| s.id).collect(), scoring_calls: self.items.rows() as u64 }
    }
}

/// Beam search over a hierarchical index.
pub struct BeamRetriever<'a, T> {
    pub users: &'a Matrix<T>,
    pub index: &'a HierarchicalIndex<T>,
    pub beam: usize,
}

impl<T: Scalar> Retriever for BeamRetriever<'_, T> {
    fn retrieve(&self, user: u32, k: usize, exclude: &[u32]) -> Retrieval {
        match beam_search_excluding(self.index, self.users.row(user as usize), self.beam, k.max(1), exclude) {
            Ok(r) => Retrieval { items: r.items.into_iter().map(|s| s.id).collect(), scoring_calls: r.scoring_calls },
            Err(e) => {
                log::error!("beam search for user {user}: {e}");
                Retrieval::default()
            }
        }
    }
}

/// Serializes the index. Embeddings are stored as `f32`.
pub fn encode<T: Scalar>(index: &HierarchicalIndex<T>) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, x: u32| out.extend_from_slice(&x.to_le_bytes());
    out.extend_from_slice(&INDEX_MAGIC);
    put(&mut out, INDEX_VERSION);
    put(&mut out, index.num_levels() as u32);
    put(&mut out, index.dim as u32);
    out.extend_from_slice(&(index.num_items() as u64).to_le_bytes());
    for lvl in &index.levels {
        put(&mut out, lvl.width() as u32);
    }
    for lvl in &index.levels {
        for k in 0..lvl.width() {
            put(&mut out, k as u32);
            put(&mut out, lvl.representative[k].unwrap_or(NONE));
            put(&mut out, lvl.parent[k].unwrap_or(NONE));
            put(&mut out, lvl.children[k].len() as u32);
            for &c in &lvl.children[k] {
                put(&mut out, c);
            }
            for x in lvl.embeddings.row(k) {
                out.extend_from_slice(&x.as_f32().to_le_bytes());
            }
        }
    }
    for x in index.items.as_slice() {
        out.extend_from_slice(&x.as_f32().to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| HillError::Format("truncated index file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| HillError::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))).collect())
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<HierarchicalIndex<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != INDEX_MAGIC {
        return Err(HillError::Format("not an index file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != INDEX_VERSION {
        return Err(HillError::Format(format!("unsupported index version {version}")));
    }
    let n = c.u32()? as usize;
    if n == 0 {
        return Err(HillError::Format("index declares zero levels".into()));
    }
    let dim = c.u32()? as usize;
    let v = usize::try_from(u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")))
        .map_err(|_| HillError::Format("item count overflow".into()))?;
    let widths = (1..n).map(|_| c.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
    let opt = |x: u32| (x != NONE).then_some(x);
    let mut levels = Vec::with_capacity(widths.len());
    for (i, &w) in widths.iter().enumerate() {
        let mut lvl = IndexLevel {
            level: i + 2,
            embeddings: Matrix::zeros(0, dim),
            representative: Vec::with_capacity(w.min(1 << 20)),
            parent: Vec::with_capacity(w.min(1 << 20)),
            children: Vec::with_capacity(w.min(1 << 20)),
        };
        for k in 0..w {
            if c.u32()? as usize != k {
                return Err(HillError::Format(format!("level {} node records out of order", i + 2)));
            }
            lvl.representative.push(opt(c.u32()?));
            lvl.parent.push(opt(c.u32()?));
            let count = c.u32()? as usize;
            let ch = (0..count).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            lvl.children.push(ch);
            lvl.embeddings.push_row(&c.reals::<T>(dim)?)?;
        }
        levels.push(lvl);
    }
    let items = Matrix::from_vec(v, dim, c.reals(v.saturating_mul(dim))?)?;
    if c.pos != bytes.len() {
        return Err(HillError::Format("trailing bytes in index file".into()));
    }
    let mut item_parent = vec![NONE; v];
    if let Some(l2) = levels.first() {
        for (k, ch) in l2.children.iter().enumerate() {
            for &j in ch {
                match item_parent.get_mut(j as usize) {
                    Some(p) => *p = k as u32,
                    None => return Err(HillError::Format(format!("item {j} out of range"))),
                }
            }
        }
    }
    let index = HierarchicalIndex { dim, items, item_parent, levels };
    index.validate()?;
    Ok(index)
}

pub fn save<T: Scalar>(index: &HierarchicalIndex<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| HillError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(index)).and_then(|_| w.flush()).map_err(|e| HillError::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<HierarchicalIndex<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| HillError::io(path, e))?;
    decode(&bytes)
}

/// Ranks scored entities with the shared tie rule (score desc, id asc).
pub fn sort_ranked<T: Scalar>(v: &mut [Scored<T>]) {
    v.sort_by(rank_order);
}
