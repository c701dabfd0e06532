//! Acceptance runner: one PASS/FAIL line per criterion.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depvit::block::{block_forward, block_grad_check, reverse_compose, BlockConfig};
use depvit::cost::model_cost;
use depvit::dynpool::{expand_mask, retrieve_dense};
use depvit::eval::{fiedler_vector, hungarian_match};
use depvit::io::export::to_json;
use depvit::io::{Container, RunConfig, Stored, TreeJson};
use depvit::model::{model_forward, toy_train, TrainConfig};
use depvit::synth::{self, BlobConfig, BlobSample};
use depvit::tree::{chu_liu_edmonds, partition_subtrees, tree_from_mask};
use depvit::{BlockWeights, DependencyTree, ModelConfig, ModelInput, ModelWeights, Tensor};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn config(name: &str) -> RunConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&p).unwrap_or_else(|e| panic!("{e}"))
}

fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random multiple of 1/64 in [0, 1): sums of a few of these are exact.
fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..64) as f64 / 64.0
}

fn cost_full() -> Check {
    let r = model_cost(&config("depvit-t.cfg").model).map_err(|e| e.to_string())?;
    let per_layer = depvit::cost::layer_flops(196, 192, 12).attention_stack();
    ensure(per_layer == 101_455_872, || format!("per-layer stack {per_layer}"))?;
    let rel = (r.total as f64 / 1.3e9 - 1.0).abs();
    ensure(rel < 0.10, || format!("total {} is {:.1}% from 1.3G", r.total, rel * 100.0))?;
    Ok(format!("total {:.3}G, per-layer stack {per_layer}", r.total as f64 / 1e9))
}

fn cost_lite() -> Check {
    let r = model_cost(&config("lite-t.cfg").model).map_err(|e| e.to_string())?;
    let stack = (r.attention_stack as f64 / 0.801e9 - 1.0).abs();
    let total = (r.total as f64 / 0.8e9 - 1.0).abs();
    ensure(stack < 0.01, || format!("stack {} off by {:.2}%", r.attention_stack, stack * 100.0))?;
    ensure(total < 0.10, || format!("total {} off by {:.1}%", r.total, total * 100.0))?;
    Ok(format!(
        "stack {:.4}G, total {:.3}G",
        r.attention_stack as f64 / 1e9,
        r.total as f64 / 1e9
    ))
}

fn gradient_check() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let r = block_grad_check(seed, 8, 16, 4, 1e-4).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
        ensure(r.passed, || format!("seed {seed}: max relative error {:e}", r.max_rel_error))?;
    }
    Ok(format!("20 seeds, worst relative error {worst:.2e}"))
}

fn brute_force_tree(score: &[Vec<f64>], root: &[f64]) -> f64 {
    let n = root.len();
    let mut best = f64::NEG_INFINITY;
    let mut parent = vec![0usize; n];
    for code in 0..(n + 1).pow(n as u32) {
        let mut c = code;
        for p in parent.iter_mut() {
            *p = c % (n + 1);
            c /= n + 1;
        }
        // parent == n marks the root
        if parent.iter().filter(|&&p| p == n).count() != 1 {
            continue;
        }
        let reaches_root = (0..n).all(|s| {
            let mut v = s;
            for _ in 0..n {
                if parent[v] == n {
                    return true;
                }
                v = parent[v];
            }
            parent[v] == n
        });
        if !reaches_root {
            continue;
        }
        let total: f64 = (0..n)
            .map(|c| if parent[c] == n { root[c] } else { score[parent[c]][c] })
            .sum();
        best = best.max(total);
    }
    best
}

fn brute_force_assignment(score: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
    if row == score.len() {
        return 0.0;
    }
    let mut best = brute_force_assignment(score, row + 1, used);
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            best = best.max(score[row][j] + brute_force_assignment(score, row + 1, used));
            used[j] = false;
        }
    }
    best
}

fn dense_fiedler(w: &DMatrix<f64>) -> Vec<f64> {
    let n = w.nrows();
    let deg: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    let l = DMatrix::from_fn(n, n, |i, j| {
        let d = if i == j { deg[i] } else { 0.0 };
        (d - w[(i, j)]) / (deg[i] * deg[j]).sqrt()
    });
    let eig = l.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let z = eig.eigenvectors.column(order[1]);
    let y: Vec<f64> = (0..n).map(|i| z[i] / deg[i].sqrt()).collect();
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    y.into_iter().map(|v| v / norm).collect()
}

fn oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let n = rng.random_range(1..=6);
        let score: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| dyadic(&mut rng)).collect()).collect();
        let root: Vec<f64> = (0..n).map(|_| dyadic(&mut rng)).collect();
        let flat: Vec<f64> = score.concat();
        let t = chu_liu_edmonds(&Tensor::<f64>::from_f64([n, n], &flat).unwrap(), &root).map_err(|e| e.to_string())?;
        let want = brute_force_tree(&score, &root);
        ensure(t.total_score() == want, || format!("tree case {case}: {} vs {want}", t.total_score()))?;
    }
    for case in 0..1000 {
        let (p, g) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let score: Vec<Vec<f64>> = (0..p).map(|_| (0..g).map(|_| dyadic(&mut rng)).collect()).collect();
        let pairs = hungarian_match(&score).map_err(|e| e.to_string())?;
        let got: f64 = pairs.iter().map(|&(i, j)| score[i][j]).sum();
        let want = brute_force_assignment(&score, 0, &mut vec![false; g]);
        ensure(got == want, || format!("assignment case {case}: {got} vs {want}"))?;
    }
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(2..=12);
        let mut w = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.01..1.0));
        w = (&w + w.transpose()) * 0.5;
        let (y, _, _) = fiedler_vector(&w).map_err(|e| e.to_string())?;
        let o = dense_fiedler(&w);
        let sign = if y.iter().zip(&o).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        let err = y.iter().zip(&o).map(|(a, b)| (a - sign * b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        ensure(err < 1e-5, || format!("fiedler case {case}: error {err:e}"))?;
    }
    Ok(format!("1000 trees, 1000 assignments exact; fiedler worst {worst:.1e}"))
}

fn random_block(rng: &mut ChaCha8Rng, ch: usize, heads: usize) -> BlockWeights<f64> {
    BlockWeights::<f64>::init(ch, heads, rng)
        .unwrap()
        .map(|t| t.add(&uniform(t.dims(), -0.5, 0.5, rng)).unwrap())
}

fn small_model(rng: &mut ChaCha8Rng, schedule: Vec<(usize, usize)>) -> (ModelConfig, ModelWeights<f64>) {
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 4,
        channels: 8,
        heads: 2,
        layers: 3,
        prune_schedule: schedule,
        seed: rng.random(),
        ..ModelConfig::toy()
    };
    let w = ModelWeights::<f64>::init(&cfg)
        .unwrap()
        .map(|t| t.add(&uniform(t.dims(), -0.3, 0.3, rng)).unwrap());
    (cfg, w)
}

fn invariants() -> Check {
    const CASES: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..CASES {
        // column stochasticity with one head and M ≡ 1
        let n = rng.random_range(1..10);
        let w = random_block(&mut rng, 8, 1);
        let x = uniform(&[n, 8], -1.0, 1.0, &mut rng);
        let (af, _) = depvit::block::forward_attention(&x, &w, 1).map_err(|e| e.to_string())?;
        let (_, mask) = reverse_compose(&af, &Tensor::ones([n, 1]), &Tensor::ones([n, 1])).unwrap();
        for i in 0..n {
            let col: f64 = (0..n).map(|j| mask.get2(j, i)).sum();
            ensure((col - 1.0).abs() < 1e-6, || format!("case {case}: column {i} sums to {col}"))?;
        }

        // gating bounds and permutation equivariance of one block
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let w = random_block(&mut rng, 8, heads);
        let x = uniform(&[n, 8], -1.0, 1.0, &mut rng);
        let m_prev = uniform(&[n, 1], 0.05, 1.0, &mut rng);
        let cfg = BlockConfig::new(heads);
        let (out, st) = block_forward(&x, &w, &m_prev, &cfg).map_err(|e| e.to_string())?;
        for i in 0..n {
            let m = st.message.data()[i];
            ensure(m <= m_prev.data()[i], || format!("case {case}: M grew at token {i}"))?;
            for j in 0..n {
                ensure(st.mask.get2(j, i) <= m + 1e-12, || format!("case {case}: A_M[{j}][{i}] above M"))?;
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let (pout, pst) = block_forward(&x.select_rows(&perm).unwrap(), &w, &m_prev.select_rows(&perm).unwrap(), &cfg)
            .map_err(|e| e.to_string())?;
        for (a, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                ensure((pout.get2(a, c) - out.get2(p, c)).abs() < 1e-9, || format!("case {case}: not equivariant"))?;
            }
            for (b, &q) in perm.iter().enumerate() {
                ensure((pst.mask.get2(a, b) - st.mask.get2(p, q)).abs() < 1e-12, || {
                    format!("case {case}: mask not equivariant")
                })?;
            }
        }

        // M shrinks through a model; empty schedule retrieval is the identity
        let (cfg, w) = small_model(&mut rng, Vec::new());
        let input = ModelInput::Tokens(uniform(&[16, 8], -1.0, 1.0, &mut rng));
        let out = model_forward(&input, &cfg, &w).map_err(|e| e.to_string())?;
        for pair in out.states.windows(2) {
            let ok = pair[1].message.data().iter().zip(pair[0].message.data()).all(|(b, a)| b <= a);
            ensure(ok, || format!("case {case}: cumulative gate increased"))?;
        }
        let dense = retrieve_dense(&out.tokens, &out.ledger).map_err(|e| e.to_string())?;
        let same = dense.data().iter().zip(out.tokens.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && dense.dims() == out.tokens.dims(), || format!("case {case}: retrieval changed tokens"))?;

        // expanded masks conserve every token's sent mass
        let kept1 = rng.random_range(1..=16);
        let kept2 = rng.random_range(1..=kept1);
        let (cfg, w) = small_model(&mut rng, vec![(1, kept1), (2, kept2)]);
        let out = model_forward(&input, &cfg, &w).map_err(|e| e.to_string())?;
        for (layer, st) in out.states.iter().enumerate() {
            let e = expand_mask(&st.mask, &out.ledger, layer).map_err(|e| e.to_string())?;
            let present = &out.ledger.layer_survivors[layer];
            for i in 0..16 {
                let col: f64 = (0..16).map(|j| e.get2(j, i)).sum();
                let want = match present.iter().position(|&t| t == i) {
                    Some(b) => st.message.data()[b],
                    None => out.ledger.events.iter().find(|ev| ev.token == i).unwrap().gate,
                };
                ensure((col - want).abs() < 1e-6, || format!("case {case}: layer {layer} token {i} mass {col} vs {want}"))?;
            }
        }
    }
    Ok(format!("{CASES} cases for each of six properties"))
}

struct Trained {
    cfg: ModelConfig,
    weights: ModelWeights<f64>,
}

fn structure_recovery(trained: &mut Option<Trained>) -> Check {
    let run = config("toy.cfg");
    let cfg = run.model.clone();
    let blobs = BlobConfig::for_model(&cfg).map_err(|e| e.to_string())?;
    let samples: Vec<BlobSample<f64>> = blobs.dataset(64, synth::TOY_DATA_SEED).map_err(|e| e.to_string())?;
    let hp = TrainConfig {
        steps: 200,
        lr: synth::TOY_LR,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let init = ModelWeights::init(&cfg).map_err(|e| e.to_string())?;
    let report = toy_train(&synth::labelled(&samples), &cfg, init, &hp).map_err(|e| e.to_string())?;
    ensure(report.train_accuracy >= 0.95, || format!("train accuracy {}", report.train_accuracy))?;
    let depth = depvit::tree::DEFAULT_PART_DEPTH;
    let miou = synth::part_recovery(&samples, &cfg, &report.weights, run.min_part_size, depth)
        .map_err(|e| e.to_string())?;
    *trained = Some(Trained {
        cfg,
        weights: report.weights,
    });
    ensure(miou >= 0.8, || format!("mIoU {miou:.3} below 0.8 (train accuracy {})", report.train_accuracy))?;
    Ok(format!("train accuracy {}, mIoU {miou:.3}", report.train_accuracy))
}

fn lite_consistency(trained: &Option<Trained>) -> Check {
    let t = trained.as_ref().ok_or("no trained model")?;
    let lite = ModelConfig {
        prune_schedule: vec![(2, 32)],
        ..t.cfg.clone()
    };
    let blobs = BlobConfig::for_model(&t.cfg).map_err(|e| e.to_string())?;
    let samples: Vec<BlobSample<f64>> = blobs.dataset(100, 2024).map_err(|e| e.to_string())?;
    let mut agree = 0;
    for s in &samples {
        let input = ModelInput::Tokens(s.tokens.clone());
        let full = model_forward(&input, &t.cfg, &t.weights).map_err(|e| e.to_string())?;
        let pruned = model_forward(&input, &lite, &t.weights).map_err(|e| e.to_string())?;
        ensure(pruned.tokens.rows() == 32, || format!("lite kept {} tokens", pruned.tokens.rows()))?;
        agree += usize::from(full.predicted_class() == pruned.predicted_class());
    }
    ensure(agree >= 90, || format!("{agree}/100 agree"))?;
    Ok(format!("{agree}/100 predictions agree at 32 of 64 tokens"))
}

fn io_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let path = std::path::Path::new("mem");
    for case in 0..100 {
        let rank = rng.random_range(0..4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(1..6)).collect();
        let len: usize = dims.iter().product();
        let bits64: Vec<f64> = (0..len).map(|_| f64::from_bits(rng.random::<u64>())).collect();
        let raw32: Vec<f32> = (0..len).map(|_| f32::from_bits(rng.random::<u32>())).collect();
        let mut c = Container::new();
        c.push("f32", Stored::F32(Tensor::new(dims.clone(), raw32.clone()).unwrap())).unwrap();
        c.push("f64", Stored::F64(Tensor::new(dims.clone(), bits64.clone()).unwrap())).unwrap();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, path).map_err(|e| e.to_string())?;
        ensure(back.to_bytes() == bytes, || format!("container case {case} re-encodes differently"))?;
        let same32 = match back.get("f32") {
            Some(Stored::F32(t)) => t.data().iter().zip(&raw32).all(|(a, b)| a.to_bits() == b.to_bits()),
            _ => false,
        };
        let same64 = match back.get("f64") {
            Some(Stored::F64(t)) => t.data().iter().zip(&bits64).all(|(a, b)| a.to_bits() == b.to_bits()),
            _ => false,
        };
        ensure(same32 && same64 && back.get("f64").unwrap().dims() == dims, || format!("container case {case}"))?;
    }
    for case in 0..100 {
        let n = rng.random_range(1..20);
        let mask = uniform(&[n, n], 0.0, 1.0, &mut rng);
        let mut tree: DependencyTree = tree_from_mask(&mask).map_err(|e| e.to_string())?;
        partition_subtrees(&mut tree, rng.random_range(0.0..0.5), 2).map_err(|e| e.to_string())?;
        let text = to_json(&TreeJson::from(&tree)).map_err(|e| e.to_string())?;
        let back: TreeJson = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let back = back.to_tree().map_err(|e| e.to_string())?;
        let weights_exact = back.weight.iter().zip(&tree.weight).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(back.parent == tree.parent && back.root == tree.root && weights_exact, || {
            format!("tree case {case} changed")
        })?;
    }
    Ok("100 containers per dtype bit-identical, 100 trees exact".into())
}

fn main() {
    let mut trained = None;
    let mut failed = 0;
    let criteria: Vec<(&str, Duration, Box<dyn FnOnce(&mut Option<Trained>) -> Check>)> = vec![
        ("cost model, DependencyViT-T", Duration::from_secs(1), Box::new(|_| cost_full())),
        ("cost model, Lite-T", Duration::from_secs(1), Box::new(|_| cost_lite())),
        ("block gradient check", Duration::from_secs(60), Box::new(|_| gradient_check())),
        ("oracle equivalence", Duration::from_secs(120), Box::new(|_| oracles())),
        ("invariant suite", Duration::from_secs(120), Box::new(|_| invariants())),
        ("synthetic structure recovery", Duration::from_secs(300), Box::new(structure_recovery)),
        ("Lite consistency", Duration::from_secs(120), Box::new(|t| lite_consistency(t))),
        ("IO round trips", Duration::from_secs(60), Box::new(|_| io_round_trips())),
    ];
    for (k, (name, limit, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = run(&mut trained);
        let took = start.elapsed();
        let result = result.and_then(|detail| {
            if took <= limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {took:.1?}, limit {limit:?}"))
            }
        });
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail} ({took:.2?})", k + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why} ({took:.2?})", k + 1);
            }
        }
    }
    println!("{} of 8 criteria passed", 8 - failed);
    // failures are reported above; set ACCEPTANCE_STRICT=1 to also fail the run
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
