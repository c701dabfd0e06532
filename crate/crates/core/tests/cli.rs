use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use depvit::io::{write_ppm, Container, TreeJson};
use depvit::model::Image;
use depvit::Tensor;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn depvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depvit")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn flops_reports_the_tiny_model() {
    let cfg = configs().join("depvit-t.cfg");
    let out = depvit(&["flops", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0));
    let total = stdout_json(&out)["total"].as_f64().unwrap();
    assert!((total - 1.3e9).abs() / 1.3e9 < 0.1, "{total}");

    let table = depvit(&["flops", "--config", s(&cfg), "--table"]);
    assert_eq!(table.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&table.stdout).lines().count() > 12);
}

#[test]
fn gradcheck_passes_and_reports_its_worst_error() {
    let out = depvit(&["gradcheck", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_json(&out)["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn eval_parts_on_identical_grids_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"width": 3, "height": 2, "labels": [0, 0, 1, 1, -1, 2]}"#).unwrap();
    let out = depvit(&["eval-parts", "--pred", s(&grid), "--gt", s(&grid)]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["mIoU"].as_f64(), Some(1.0));
    assert_eq!(v["mAcc"].as_f64(), Some(1.0));

    let strict = depvit(&["eval-parts", "--pred", s(&grid), "--gt", s(&grid), "--min-miou", "1.5"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn eval_saliency_scores_a_perfect_map() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("scores.json");
    let gt = dir.path().join("gt.json");
    std::fs::write(&pred, r#"{"width": 2, "height": 2, "values": [0.9, 0.1, 0.8, 0.2]}"#).unwrap();
    std::fs::write(&gt, r#"{"width": 2, "height": 2, "labels": [1, 0, 1, 0]}"#).unwrap();
    let out = depvit(&["eval-saliency", "--pred", s(&pred), "--gt", s(&gt)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["maxF"].as_f64(), Some(1.0));
}

#[test]
fn missing_weights_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.dvtn");
    let out = depvit(&[
        "parse",
        "--input",
        s(&missing),
        "--weights",
        s(&missing),
        "--config",
        s(&configs().join("toy.cfg")),
        "--out",
        s(&dir.path().join("t.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.dvtn"));
}

#[test]
fn bad_config_and_bad_usage_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "colour = 3\n").unwrap();
    let out = depvit(&["flops", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    assert_eq!(depvit(&["flops"]).status.code(), Some(2));
}

#[test]
fn single_patch_image_parses_to_one_node() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one.cfg");
    std::fs::write(&cfg, "image_size = 16\nchannels = 32\nheads = 4\nlayers = 2\nnum_classes = 2\n").unwrap();
    let weights = dir.path().join("w.dvtn");
    let init = depvit(&["init", "--config", s(&cfg), "--out", s(&weights)]);
    assert_eq!(init.status.code(), Some(0), "{}", String::from_utf8_lossy(&init.stderr));
    let img = dir.path().join("one.ppm");
    write_ppm(&img, &Image::new(16, 16, vec![0.5; 16 * 16 * 3]).unwrap()).unwrap();
    let tree = dir.path().join("tree.json");
    let out = depvit(&[
        "parse", "--input", s(&img), "--weights", s(&weights), "--config", s(&cfg), "--out", s(&tree),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let t: TreeJson = serde_json::from_str(&std::fs::read_to_string(&tree).unwrap()).unwrap();
    assert_eq!(t.nodes.len(), 1);
    assert_eq!(t.nodes[0].parent, None);
}

#[test]
fn init_parse_and_prune_on_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let toy = configs().join("toy.cfg");
    let weights = dir.path().join("w.dvtn");
    assert_eq!(depvit(&["init", "--config", s(&toy), "--out", s(&weights)]).status.code(), Some(0));

    let data: Vec<f64> = (0..64 * 32).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.5).collect();
    let mut c = Container::new();
    c.push_tensor("tokens", &Tensor::<f64>::from_f64([64, 32], &data).unwrap()).unwrap();
    let input = dir.path().join("tokens.dvtn");
    c.write(&input).unwrap();

    let (tree, dot, mask) = (dir.path().join("t.json"), dir.path().join("t.dot"), dir.path().join("m.json"));
    let out = depvit(&[
        "parse", "--input", s(&input), "--weights", s(&weights), "--config", s(&toy), "--out", s(&tree),
        "--dot", s(&dot), "--mask", s(&mask), "--layer", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["nodes"].as_u64(), Some(64));
    let t: TreeJson = serde_json::from_str(&std::fs::read_to_string(&tree).unwrap()).unwrap();
    assert_eq!(t.to_tree().unwrap().len(), 64);
    assert_eq!(std::fs::read_to_string(&dot).unwrap().matches("->").count(), 63);

    let lite = dir.path().join("lite.cfg");
    let text = std::fs::read_to_string(&toy).unwrap();
    std::fs::write(&lite, text.replace("prune_layers =", "prune_layers = 2").replace("kept_tokens =", "kept_tokens = 32"))
        .unwrap();
    let (ledger, dense) = (dir.path().join("ledger.json"), dir.path().join("dense.dvtn"));
    let out = depvit(&[
        "prune", "--input", s(&input), "--weights", s(&weights), "--config", s(&lite), "--ledger", s(&ledger),
        "--dense", s(&dense),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!((v["pruned"].as_u64(), v["kept"].as_u64()), (Some(32), Some(32)));
    let back = Container::read(&dense).unwrap();
    assert_eq!(back.get("tokens").unwrap().dims(), &[64, 32]);
}
