//! Dependency-driven token pruning with a ledger for dense retrieval.
//!
//! Token indices in a [`PruneLedger`] always refer to the original,
//! unpruned token order. Survivor lists are kept in ascending order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::{argmax_graph, leaves};

/// One pruned token and where its information went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    /// 1-based block after which the token was removed.
    pub layer: usize,
    pub token: usize,
    /// `(parent, probability)` over the survivors of this step.
    pub parents: Vec<(usize, f64)>,
    /// Cumulative gate of the token when it was removed.
    pub gate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneLedger {
    pub num_tokens: usize,
    pub events: Vec<PruneEvent>,
    /// Token set entering each block, in original indices.
    pub layer_survivors: Vec<Vec<usize>>,
}

impl PruneLedger {
    pub fn new(num_tokens: usize) -> Self {
        Self {
            num_tokens,
            events: Vec::new(),
            layer_survivors: Vec::new(),
        }
    }

    /// Tokens left after every recorded event.
    pub fn final_survivors(&self) -> Vec<usize> {
        let mut alive = vec![true; self.num_tokens];
        for e in &self.events {
            if e.token < self.num_tokens {
                alive[e.token] = false;
            }
        }
        (0..self.num_tokens).filter(|&i| alive[i]).collect()
    }

    /// Checks the structural invariants: each token pruned at most once,
    /// parents alive at prune time, distributions summing to one.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_tokens;
        let mut alive = vec![true; n];
        let mut last_layer = 0;
        for (k, e) in self.events.iter().enumerate() {
            let bad = |m: String| Err(Error::Integrity(format!("prune event {k}: {m}")));
            if e.token >= n || !alive[e.token] {
                return bad(format!("token {} is not a live token", e.token));
            }
            if e.layer < last_layer {
                return bad("events out of layer order".into());
            }
            last_layer = e.layer;
            alive[e.token] = false;
            if !(0.0..=1.0).contains(&e.gate) {
                return bad(format!("gate {} outside [0, 1]", e.gate));
            }
            let mut total = 0.0;
            for &(p, w) in &e.parents {
                if p >= n || p == e.token || !(w >= 0.0) {
                    return bad(format!("invalid parent ({p}, {w})"));
                }
                total += w;
            }
            if (total - 1.0).abs() > 1e-6 {
                return bad(format!("parent distribution sums to {total}"));
            }
        }
        // parents must outlive their children
        let mut pruned_at = vec![usize::MAX; n];
        for (k, e) in self.events.iter().enumerate() {
            pruned_at[e.token] = k;
        }
        for (k, e) in self.events.iter().enumerate() {
            if let Some(&(p, _)) = e.parents.iter().find(|(p, _)| pruned_at[*p] <= k) {
                return Err(Error::Integrity(format!(
                    "prune event {k}: parent {p} was already pruned"
                )));
            }
        }
        for (l, s) in self.layer_survivors.iter().enumerate() {
            if s.windows(2).any(|w| w[0] >= w[1]) || s.last().is_some_and(|&t| t >= n) {
                return Err(Error::Integrity(format!("layer {} survivor list malformed", l + 1)));
            }
        }
        Ok(())
    }
}

/// Removes tokens until `kept` remain.
///
/// `mask`, `received` and `gates` are indexed by position in `survivors`;
/// `received` is the cumulative incoming mass. Leaves of the argmax graph of
/// `mask` are removed in ascending order of received mass (ties to the lower
/// original index). When they run out, leaves are re-derived on the
/// remaining tokens after every removal; if the graph has no leaf at all the
/// least-receiving token is removed.
pub fn prune_step<T: Scalar>(
    mask: &Tensor<T>,
    received: &[f64],
    gates: &[T],
    survivors: &[usize],
    layer: usize,
    kept: usize,
) -> Result<(Vec<usize>, Vec<PruneEvent>)> {
    let n = survivors.len();
    if mask.dims() != [n, n] || received.len() != n || gates.len() != n {
        return Err(Error::shape(format!(
            "prune step over {n} survivors with mask {:?}, {} scores, {} gates",
            mask.dims(),
            received.len(),
            gates.len()
        )));
    }
    if kept > n {
        return Err(Error::Usage(format!("cannot keep {kept} of {n} tokens")));
    }
    if kept == 0 {
        return Err(Error::Usage("at least one token must survive".into()));
    }
    if kept == n {
        return Ok((survivors.to_vec(), Vec::new()));
    }

    let rank = |a: &usize, b: &usize| {
        received[*a]
            .partial_cmp(&received[*b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(survivors[*a].cmp(&survivors[*b]))
    };
    let mut alive = vec![true; n];
    let mut count = n;
    let mut removed = Vec::new();

    let mut first = leaves(&argmax_graph(mask)?);
    first.sort_by(rank);
    for p in first {
        if count == kept {
            break;
        }
        alive[p] = false;
        removed.push(p);
        count -= 1;
    }
    while count > kept {
        let pos: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
        let sub = mask.select_rows(&pos)?.transpose_last2().select_rows(&pos)?.transpose_last2();
        let mut cand: Vec<usize> = leaves(&argmax_graph(&sub)?).into_iter().map(|k| pos[k]).collect();
        if cand.is_empty() {
            cand = pos;
        }
        let p = *cand.iter().min_by(|a, b| rank(a, b)).expect("non-empty");
        alive[p] = false;
        removed.push(p);
        count -= 1;
    }

    let keep_pos: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    let events = removed
        .into_iter()
        .map(|p| {
            let col: Vec<f64> = keep_pos.iter().map(|&q| mask.get2(q, p).to_f64_lossless()).collect();
            let total: f64 = col.iter().sum();
            let parents = keep_pos
                .iter()
                .zip(&col)
                .map(|(&q, &w)| {
                    let prob = if total > 0.0 { w / total } else { 1.0 / keep_pos.len() as f64 };
                    (survivors[q], prob)
                })
                .collect();
            PruneEvent {
                layer,
                token: survivors[p],
                parents,
                gate: gates[p].to_f64_lossless().clamp(0.0, 1.0),
            }
        })
        .collect();
    Ok((keep_pos.iter().map(|&q| survivors[q]).collect(), events))
}

/// Rebuilds all `N` token features from the final survivors by replaying the
/// ledger backwards: each pruned token is the parent-weighted mix of its
/// (already rebuilt) parents.
pub fn retrieve_dense<T: Scalar>(tokens: &Tensor<T>, ledger: &PruneLedger) -> Result<Tensor<T>> {
    ledger.validate()?;
    let survivors = ledger.final_survivors();
    if tokens.rank() != 2 || tokens.rows() != survivors.len() {
        return Err(Error::Integrity(format!(
            "{:?} tokens for {} final survivors",
            tokens.dims(),
            survivors.len()
        )));
    }
    if ledger.events.is_empty() {
        return Ok(tokens.clone());
    }
    let c = tokens.cols();
    let mut out = Tensor::<T>::zeros([ledger.num_tokens, c]);
    for (k, &s) in survivors.iter().enumerate() {
        out.data_mut()[s * c..(s + 1) * c].copy_from_slice(tokens.row(k));
    }
    for e in ledger.events.iter().rev() {
        let mut row = vec![T::zero(); c];
        for &(p, w) in &e.parents {
            let w = T::from_f64_lossy(w);
            for (r, &v) in row.iter_mut().zip(out.row(p)) {
                *r += w * v;
            }
        }
        out.data_mut()[e.token * c..(e.token + 1) * c].copy_from_slice(&row);
    }
    Ok(out)
}

/// Expands the mask of 0-based block `layer` to all `N` tokens.
///
/// Entries between tokens present at that block are copied. A token pruned
/// before the block sends its cached gate mass along its recorded parent
/// distribution, so its column sums to that gate.
pub fn expand_mask<T: Scalar>(mask: &Tensor<T>, ledger: &PruneLedger, layer: usize) -> Result<Tensor<T>> {
    let n = ledger.num_tokens;
    let present = match ledger.layer_survivors.get(layer) {
        Some(s) => s.clone(),
        None if ledger.events.is_empty() => (0..n).collect(),
        None => {
            return Err(Error::Integrity(format!(
                "ledger has no token set for layer {}",
                layer + 1
            )))
        }
    };
    let m = present.len();
    if mask.dims() != [m, m] {
        return Err(Error::Integrity(format!(
            "mask {:?} for {m} tokens at layer {}",
            mask.dims(),
            layer + 1
        )));
    }
    let mut out = Tensor::<T>::zeros([n, n]);
    for (a, &j) in present.iter().enumerate() {
        for (b, &i) in present.iter().enumerate() {
            out.set2(j, i, mask.get2(a, b));
        }
    }
    // Events with layer <= the 0-based block index happened before it.
    for e in ledger.events.iter().filter(|e| e.layer <= layer) {
        for &(q, w) in &e.parents {
            let v = out.get2(q, e.token) + T::from_f64_lossy(e.gate * w);
            out.set2(q, e.token, v);
        }
    }
    Ok(out)
}
