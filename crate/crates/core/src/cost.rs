//! FLOPs and parameter accounting.
//!
//! Counts are multiply-accumulates of the matrix products; softmax,
//! normalization and elementwise work are not counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};

/// Per-component FLOPs. The same shape serves for one layer and for a model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub attention: u64,
    pub projections: u64,
    pub ffn: u64,
    pub selector: u64,
    pub controller: u64,
    pub embedder: u64,
    pub classifier: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.attention + self.projections + self.ffn + self.selector + self.controller + self.embedder + self.classifier
    }

    /// Attention plus projections plus FFN: the `2N²C + 12NC²` core.
    pub fn attention_stack(&self) -> u64 {
        self.attention + self.projections + self.ffn
    }

    fn accumulate(&mut self, o: &Breakdown) {
        self.attention += o.attention;
        self.projections += o.projections;
        self.ffn += o.ffn;
        self.selector += o.selector;
        self.controller += o.controller;
        self.embedder += o.embedder;
        self.classifier += o.classifier;
    }
}

/// One block over `n` tokens of width `c` with `h` heads.
///
/// The controller is the two-layer `C → C/2 → 1` network actually run by the
/// block, so it costs `NC²/2 + NC/2`, not `NC`.
pub fn layer_flops(n: usize, c: usize, h: usize) -> Breakdown {
    let (n, c, h) = (n as u64, c as u64, h as u64);
    Breakdown {
        attention: 2 * n * n * c,
        projections: 4 * n * c * c,
        ffn: 8 * n * c * c,
        selector: n * c * h,
        controller: n * c * c / 2 + n * c / 2,
        embedder: 0,
        classifier: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tokens_per_layer: Vec<usize>,
    pub per_layer: Vec<u64>,
    pub breakdown: Breakdown,
    pub total: u64,
    pub attention_stack: u64,
    /// Controller cost under the cheaper `O(NC)` accounting, summed over layers.
    pub controller_claimed: u64,
    pub params: usize,
}

pub fn model_cost(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let tokens = cfg.tokens_per_layer();
    let mut breakdown = Breakdown::default();
    let mut per_layer = Vec::with_capacity(tokens.len());
    let mut controller_claimed = 0u64;
    for &n in &tokens {
        let l = layer_flops(n, cfg.channels, cfg.heads);
        per_layer.push(l.total());
        breakdown.accumulate(&l);
        controller_claimed += (n * cfg.channels) as u64;
    }
    breakdown.embedder = (cfg.num_tokens() * cfg.patch_dim() * cfg.channels) as u64;
    breakdown.classifier = (cfg.channels * cfg.num_classes) as u64;
    Ok(CostReport {
        tokens_per_layer: tokens,
        per_layer,
        total: breakdown.total(),
        attention_stack: breakdown.attention_stack(),
        breakdown,
        controller_claimed,
        params: ModelParams::expected(cfg).num_params(),
    })
}

impl CostReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>5} {:>6} {:>15}", "layer", "tokens", "flops");
        for (i, (n, f)) in self.tokens_per_layer.iter().zip(&self.per_layer).enumerate() {
            let _ = writeln!(s, "{:>5} {:>6} {:>15}", i + 1, n, f);
        }
        let b = &self.breakdown;
        let rows = [
            ("attention", b.attention),
            ("projections", b.projections),
            ("ffn", b.ffn),
            ("selector", b.selector),
            ("controller", b.controller),
            ("embedder", b.embedder),
            ("classifier", b.classifier),
        ];
        for (name, v) in rows {
            let _ = writeln!(s, "{name:>12} {v:>15}");
        }
        let _ = writeln!(s, "{:>12} {:>15}", "total", self.total);
        let _ = writeln!(s, "{:>12} {:>15}", "stack", self.attention_stack);
        let _ = writeln!(s, "{:>12} {:>15}  (O(NC) accounting)", "ctrl claim", self.controller_claimed);
        let _ = writeln!(s, "{:>12} {:>15}", "params", self.params);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(n: u64, c: u64) -> u64 {
        2 * n * n * c + 12 * n * c * c
    }

    #[test]
    fn per_layer_core_matches_the_closed_form() {
        assert_eq!(layer_flops(196, 192, 12).attention_stack(), 101_455_872);
        assert_eq!(f(196, 192), 101_455_872);
        assert_eq!(layer_flops(1, 1, 1).attention, 2);
    }

    #[test]
    fn doubling_tokens_quadruples_only_attention() {
        let a = layer_flops(50, 64, 4);
        let b = layer_flops(100, 64, 4);
        assert_eq!(b.attention, 4 * a.attention);
        assert_eq!(b.projections, 2 * a.projections);
        assert_eq!(b.ffn, 2 * a.ffn);
        assert_eq!(b.selector, 2 * a.selector);
        assert_eq!(b.controller, 2 * a.controller);
    }

    #[test]
    fn tiny_model_total() {
        let r = model_cost(&ModelConfig::depvit_t()).unwrap();
        assert_eq!(r.attention_stack, 12 * f(196, 192));
        assert!((r.total as f64 / 1.3e9 - 1.0).abs() < 0.10, "{}", r.total);
        assert!((r.params as f64 / 6.2e6 - 1.0).abs() < 0.10, "{}", r.params);
        assert_eq!(r.total, r.breakdown.total());
        assert_eq!(r.total, r.per_layer.iter().sum::<u64>() + r.breakdown.embedder + r.breakdown.classifier);
        assert_eq!(r.controller_claimed, 12 * 196 * 192);
    }

    #[test]
    fn lite_total() {
        let r = model_cost(&ModelConfig::lite_t()).unwrap();
        let oracle = 2 * f(196, 192) + 3 * f(160, 192) + 3 * f(128, 192) + 3 * f(96, 192) + f(64, 192);
        assert_eq!(r.attention_stack, oracle);
        assert!((r.attention_stack as f64 / 0.801e9 - 1.0).abs() < 0.01);
        assert!((r.total as f64 / 0.8e9 - 1.0).abs() < 0.10, "{}", r.total);
        assert_eq!(r.params, model_cost(&ModelConfig::depvit_t()).unwrap().params);
    }

    #[test]
    fn lite_without_schedule_is_the_full_model() {
        let lite = ModelConfig {
            prune_schedule: Vec::new(),
            ..ModelConfig::lite_t()
        };
        assert_eq!(model_cost(&lite).unwrap(), model_cost(&ModelConfig::depvit_t()).unwrap());
    }

    #[test]
    fn zero_layers_cost_embedder_and_classifier() {
        let cfg = ModelConfig {
            layers: 0,
            ..ModelConfig::depvit_t()
        };
        let r = model_cost(&cfg).unwrap();
        assert!(r.per_layer.is_empty());
        assert_eq!(r.total, 196 * 768 * 192 + 192 * 1000);
    }

    #[test]
    fn small_model_table_lists_every_layer() {
        let t = model_cost(&ModelConfig::toy()).unwrap().table();
        assert_eq!(t.lines().count(), 1 + 4 + 7 + 4);
    }

    proptest! {
        #[test]
        fn flops_do_not_grow_when_fewer_tokens_are_kept(
            k in proptest::collection::vec(1usize..=196, 4),
            which in 0usize..4,
            drop in 1usize..50,
        ) {
            let mut kept = k.clone();
            kept.sort_unstable_by(|a, b| b.cmp(a));
            let layers = [2, 5, 8, 11];
            let cfg = |kept: &[usize]| ModelConfig {
                prune_schedule: layers.iter().copied().zip(kept.iter().copied()).collect(),
                ..ModelConfig::lite_t()
            };
            let base = model_cost(&cfg(&kept)).unwrap();
            let mut fewer = kept.clone();
            fewer[which] = fewer[which].saturating_sub(drop).max(1);
            for i in which + 1..4 {
                fewer[i] = fewer[i].min(fewer[which]);
            }
            let less = model_cost(&cfg(&fewer)).unwrap();
            prop_assert!(less.total <= base.total);
            prop_assert!(less.attention_stack <= base.attention_stack);
            prop_assert_eq!(base.total, base.breakdown.total());
        }
    }
}
