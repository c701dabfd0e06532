//! Dependency graphs and trees induced from soft dependency masks.
//!
//! Masks follow the block convention: `mask[j][i]` is the mass token `i`
//! sends to token `j`, so `j` is a candidate parent of `i`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::block::AttentionState;
use crate::dynpool::{expand_mask, PruneLedger};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default minimum part size, as a fraction of the token count.
pub const DEFAULT_MIN_PART_SIZE: f64 = 0.01;
/// Default depth cut for candidate part subtrees.
pub const DEFAULT_PART_DEPTH: usize = 2;

fn check_square<T: Scalar>(mask: &Tensor<T>) -> Result<usize> {
    if mask.rank() != 2 || mask.rows() != mask.cols() {
        return Err(Error::shape(format!("mask must be square, got {:?}", mask.dims())));
    }
    Ok(mask.rows())
}

/// Parent of every node under the argmax rule: the receiver of the largest
/// mass sent by that node, excluding itself, ties to the lowest index.
/// A single node has no parent.
pub fn argmax_graph<T: Scalar>(mask: &Tensor<T>) -> Result<Vec<Option<usize>>> {
    let n = check_square(mask)?;
    Ok((0..n)
        .map(|i| {
            let mut best: Option<(usize, T)> = None;
            for j in (0..n).filter(|&j| j != i) {
                let v = mask.get2(j, i);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect())
}

/// Nodes that are no node's argmax parent.
pub fn leaves(parents: &[Option<usize>]) -> Vec<usize> {
    let mut has_child = vec![false; parents.len()];
    for p in parents.iter().flatten() {
        has_child[*p] = true;
    }
    (0..parents.len()).filter(|&i| !has_child[i]).collect()
}

/// Incoming mass of every token: row sums of the mask.
pub fn row_mass<T: Scalar>(mask: &Tensor<T>) -> Result<Vec<f64>> {
    let n = check_square(mask)?;
    Ok((0..n)
        .map(|j| mask.row(j).iter().map(|v| v.to_f64_lossless()).sum())
        .collect())
}

/// Cumulative incoming mass over the given layers, which must share a token set.
pub fn received_mass<T: Scalar>(states: &[AttentionState<T>]) -> Result<Vec<f64>> {
    let first = states
        .first()
        .ok_or_else(|| Error::Usage("received mass needs at least one layer".into()))?;
    let n = first.num_tokens();
    let mut total = vec![0.0; n];
    for (l, st) in states.iter().enumerate() {
        if st.num_tokens() != n {
            return Err(Error::Usage(format!(
                "layer {} has {} tokens, expected {n}",
                l + 1,
                st.num_tokens()
            )));
        }
        for (t, m) in total.iter_mut().zip(row_mass(&st.mask)?) {
            *t += m;
        }
    }
    Ok(total)
}

/// Mean of the per-layer masks. Masks over pruned token sets are first
/// expanded to the full token set through `ledger`.
pub fn aggregate_masks<T: Scalar>(
    states: &[AttentionState<T>],
    ledger: Option<&PruneLedger>,
) -> Result<Tensor<T>> {
    if states.is_empty() {
        return Err(Error::Usage("no layers to aggregate".into()));
    }
    let n = match ledger {
        Some(l) => l.num_tokens,
        None => states[0].num_tokens(),
    };
    let mut acc = Tensor::<T>::zeros([n, n]);
    for (layer, st) in states.iter().enumerate() {
        let full = match ledger {
            Some(l) => expand_mask(&st.mask, l, layer)?,
            None if st.num_tokens() == n => st.mask.clone(),
            None => {
                return Err(Error::Usage(format!(
                    "layer {} has {} tokens but no prune ledger was given",
                    layer + 1,
                    st.num_tokens()
                )))
            }
        };
        acc = acc.add(&full)?;
    }
    Ok(acc.scale(T::one() / T::from_usize(states.len()).unwrap()))
}

/// A rooted arborescence over token indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyTree {
    pub root: usize,
    /// `None` only for the root.
    pub parent: Vec<Option<usize>>,
    /// Score of the edge into each node; the root carries its root score.
    pub weight: Vec<f64>,
    pub depth: Vec<usize>,
    /// Part label per node; all zero until partitioned.
    pub subtree: Vec<usize>,
}

impl DependencyTree {
    /// Builds a tree from parent pointers, checking it is a single spanning arborescence.
    pub fn from_parents(parent: Vec<Option<usize>>, weight: Vec<f64>) -> Result<Self> {
        let n = parent.len();
        if n == 0 || weight.len() != n {
            return Err(Error::Integrity(format!(
                "{n} parents with {} weights",
                weight.len()
            )));
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
        let [root] = roots[..] else {
            return Err(Error::Integrity(format!("expected one root, found {}", roots.len())));
        };
        if let Some(i) = (0..n).find(|&i| parent[i].is_some_and(|p| p >= n || p == i)) {
            return Err(Error::Integrity(format!("node {i} has an invalid parent")));
        }
        if let Some(i) = weight.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Integrity(format!("node {i} has weight {}", weight[i])));
        }
        let mut depth = vec![usize::MAX; n];
        depth[root] = 0;
        for start in 0..n {
            let mut path = Vec::new();
            let mut v = start;
            while depth[v] == usize::MAX {
                if path.len() > n {
                    return Err(Error::Integrity(format!("cycle through node {start}")));
                }
                path.push(v);
                v = parent[v].expect("only the root lacks a parent");
            }
            let mut d = depth[v];
            for &u in path.iter().rev() {
                d += 1;
                depth[u] = d;
            }
        }
        Ok(Self {
            root,
            parent,
            weight,
            depth,
            subtree: vec![0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.len()];
        for (i, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                ch[*p].push(i);
            }
        }
        ch
    }

    /// Sum of all edge weights including the root score.
    pub fn total_score(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// Nodes ordered by depth, then index.
    pub fn breadth_first(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| (self.depth[i], i));
        order
    }

    pub fn subtree_sizes(&self) -> Vec<usize> {
        let mut size = vec![1; self.len()];
        for &v in self.breadth_first().iter().rev() {
            if let Some(p) = self.parent[v] {
                size[p] += size[v];
            }
        }
        size
    }
}

/// Lexicographic edge weight: a penalty count first, then the score.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Weight {
    penalty: i64,
    score: f64,
}

impl Weight {
    fn sub(self, other: Weight) -> Weight {
        Weight {
            penalty: self.penalty - other.penalty,
            score: self.score - other.score,
        }
    }

    fn cmp(self, other: Weight) -> Ordering {
        self.penalty
            .cmp(&other.penalty)
            .then(self.score.partial_cmp(&other.score).unwrap_or(Ordering::Equal))
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    src: usize,
    dst: usize,
    w: Weight,
}

/// Maximum arborescence rooted at `root` over `n` nodes. Returns, per node,
/// the index into `edges` of its incoming edge (`usize::MAX` for the root).
/// Ties go to the earliest edge in `edges`.
fn max_arborescence(n: usize, root: usize, edges: &[Edge]) -> Vec<usize> {
    let mut best = vec![usize::MAX; n];
    for (k, e) in edges.iter().enumerate() {
        if e.dst == root || e.src == e.dst {
            continue;
        }
        if best[e.dst] == usize::MAX || e.w.cmp(edges[best[e.dst]].w) == Ordering::Greater {
            best[e.dst] = k;
        }
    }

    let Some(cycle) = find_cycle(n, root, |v| edges[best[v]].src) else {
        return best;
    };
    let mut in_cycle = vec![false; n];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    // Contracted ids: non-cycle nodes keep their relative order, the cycle
    // becomes the last node.
    let mut id = vec![0; n];
    let mut next = 0;
    for v in 0..n {
        if !in_cycle[v] {
            id[v] = next;
            next += 1;
        }
    }
    let cnode = next;
    for &v in &cycle {
        id[v] = cnode;
    }
    let mut sub_edges = Vec::with_capacity(edges.len());
    let mut origin = Vec::with_capacity(edges.len());
    for (k, e) in edges.iter().enumerate() {
        let (s, d) = (in_cycle[e.src], in_cycle[e.dst]);
        if s && d {
            continue;
        }
        let w = if d { e.w.sub(edges[best[e.dst]].w) } else { e.w };
        sub_edges.push(Edge {
            src: id[e.src],
            dst: id[e.dst],
            w,
        });
        origin.push(k);
    }
    let sub = max_arborescence(cnode + 1, id[root], &sub_edges);

    let mut chosen = best;
    for v in 0..n {
        if !in_cycle[v] && v != root {
            chosen[v] = origin[sub[id[v]]];
        }
    }
    let entry = origin[sub[cnode]];
    chosen[edges[entry].dst] = entry;
    chosen
}

/// First cycle among non-root nodes under the parent function, scanning
/// start nodes in index order.
fn find_cycle(n: usize, root: usize, parent: impl Fn(usize) -> usize) -> Option<Vec<usize>> {
    // 0 = unvisited, 1 = on the current walk, 2 = done
    let mut state = vec![0u8; n];
    state[root] = 2;
    for start in 0..n {
        let mut walk = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            walk.push(v);
            v = parent(v);
        }
        if state[v] == 1 {
            let pos = walk.iter().position(|&u| u == v).expect("on walk");
            return Some(walk[pos..].to_vec());
        }
        for u in walk {
            state[u] = 2;
        }
    }
    None
}

/// Maximum spanning arborescence with exactly one root.
///
/// `score[p][c]` is the weight of making `p` the parent of `c` (the mass `c`
/// sends to `p`), `root_scores[c]` the weight of making `c` the root. Among
/// single-rooted arborescences the total weight is maximal; ties go to the
/// edge that comes first in (child, parent) order.
pub fn chu_liu_edmonds<T: Scalar>(score: &Tensor<T>, root_scores: &[T]) -> Result<DependencyTree> {
    let n = check_square(score)?;
    if root_scores.len() != n {
        return Err(Error::shape(format!(
            "{} root scores for {n} nodes",
            root_scores.len()
        )));
    }
    if !score.is_finite() || root_scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite arborescence scores".into()));
    }
    let vroot = n;
    let mut edges = Vec::with_capacity(n * n);
    for c in 0..n {
        for p in 0..=n {
            if p == c {
                continue;
            }
            let w = if p == vroot {
                Weight {
                    penalty: -1,
                    score: root_scores[c].to_f64_lossless(),
                }
            } else {
                Weight {
                    penalty: 0,
                    score: score.get2(p, c).to_f64_lossless(),
                }
            };
            edges.push(Edge { src: p, dst: c, w });
        }
    }
    let chosen = max_arborescence(n + 1, vroot, &edges);
    let mut parent = vec![None; n];
    let mut weight = vec![0.0; n];
    for c in 0..n {
        let e = edges[chosen[c]];
        parent[c] = (e.src != vroot).then_some(e.src);
        weight[c] = e.w.score;
    }
    DependencyTree::from_parents(parent, weight)
}

/// Tree over a mask, rooted by received mass.
pub fn tree_from_mask<T: Scalar>(mask: &Tensor<T>) -> Result<DependencyTree> {
    let roots: Vec<T> = row_mass(mask)?.into_iter().map(T::from_f64_lossy).collect();
    chu_liu_edmonds(mask, &roots)
}

/// Labels parts: a node at depth `1..=max_depth` whose subtree holds at least
/// `min_size · N` nodes starts a new part; every other node joins its
/// parent's part. The root's part is 0, later parts are numbered in
/// breadth-first order.
pub fn partition_subtrees(tree: &mut DependencyTree, min_size: f64, max_depth: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&min_size) {
        return Err(Error::Config(format!("min part size {min_size} outside [0, 1]")));
    }
    let n = tree.len();
    let sizes = tree.subtree_sizes();
    let threshold = min_size * n as f64;
    let mut parts = 1;
    for v in tree.breadth_first() {
        tree.subtree[v] = match tree.parent[v] {
            None => 0,
            Some(p) => {
                let d = tree.depth[v];
                if (1..=max_depth).contains(&d) && sizes[v] as f64 >= threshold {
                    parts += 1;
                    parts - 1
                } else {
                    tree.subtree[p]
                }
            }
        };
    }
    Ok(parts)
}
