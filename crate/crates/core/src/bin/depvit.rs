use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use depvit::cost::model_cost;
use depvit::dynpool::{expand_mask, retrieve_dense};
use depvit::eval::{part_metrics, saliency_metrics, LabelGrid, MetricReport};
use depvit::io::export::{read_json, to_json, tree_to_dot, write_text};
use depvit::io::{read_ppm, Container, MaskJson, RunConfig, ScoreGrid, TreeJson};
use depvit::model::{model_forward, toy_train, ForwardOutput, TrainConfig};
use depvit::synth::{self, BlobConfig};
use depvit::tree::{aggregate_masks, partition_subtrees, tree_from_mask, DEFAULT_PART_DEPTH};
use depvit::{Error, ModelInput, ModelWeights, Result, Tensor};

#[derive(Parser)]
#[command(name = "depvit", version, about = "Dependency trees from reversed attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the model and write the induced dependency tree.
    Parse(ParseArgs),
    /// Run a pruning model and write its prune ledger and retrieved tokens.
    Prune(PruneArgs),
    /// Score a part labelling against ground truth.
    EvalParts(EvalPartsArgs),
    /// Score a saliency map against a foreground labelling.
    EvalSaliency(EvalSaliencyArgs),
    /// FLOPs and parameter count of a configuration.
    Flops(FlopsArgs),
    /// Finite-difference check of the block gradients.
    Gradcheck(GradcheckArgs),
    /// Train the configured model on synthetic blob counting.
    TrainToy(TrainArgs),
    /// Write freshly initialized weights.
    Init(InitArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// PPM (P6) image, or a DVTN container holding one N×C token matrix.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct ParseArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dot: Option<PathBuf>,
    /// Also write the mask the tree was built from.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Build from one block's mask (1-based) instead of the average.
    #[arg(long, conflicts_with = "avg")]
    layer: Option<usize>,
    /// Build from the mask averaged over blocks (the default).
    #[arg(long)]
    avg: bool,
    /// Deepest tree level that may start a new part.
    #[arg(long, default_value_t = DEFAULT_PART_DEPTH)]
    part_depth: usize,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    ledger: PathBuf,
    /// Container for the final tokens scattered back to every original position.
    #[arg(long)]
    dense: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPartsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Exit with status 1 when mIoU is below this.
    #[arg(long)]
    min_miou: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSaliencyArgs {
    /// Score grid JSON.
    #[arg(long)]
    pred: PathBuf,
    /// Label grid JSON; labels above zero are foreground.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = depvit::eval::DEFAULT_BETA2)]
    beta2: f64,
    /// Exit with status 1 when maxF is below this.
    #[arg(long)]
    min_maxf: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: PathBuf,
    /// Print a table instead of JSON.
    #[arg(long)]
    table: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 5)]
    tokens: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = synth::TOY_LR)]
    lr: f64,
    /// Seeds weight init and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = synth::TOY_DATA_SEED)]
    data_seed: u64,
    #[arg(long, default_value_t = DEFAULT_PART_DEPTH)]
    part_depth: usize,
    /// Exit with status 1 when final train accuracy is below this.
    #[arg(long)]
    min_accuracy: Option<f64>,
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Store float64 instead of float32.
    #[arg(long)]
    f64: bool,
}

enum Outcome {
    Pass,
    CheckFailed(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Parse(a) => parse(a),
        Command::Prune(a) => prune(a),
        Command::EvalParts(a) => eval_parts(a),
        Command::EvalSaliency(a) => eval_saliency(a),
        Command::Flops(a) => flops(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Init(a) => init(a),
    };
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed(why)) => {
            eprintln!("check failed: {why}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn emit<V: Serialize>(v: &V, out: Option<&Path>) -> Result<()> {
    let text = to_json(v)?;
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_input(path: &Path) -> Result<ModelInput<f64>> {
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        return Ok(ModelInput::Image(read_ppm(path)?));
    }
    let c = Container::read(path)?;
    let t = c.single_or("tokens").ok_or_else(|| {
        Error::Usage(format!(
            "{}: expected one entry or an entry named \"tokens\"",
            path.display()
        ))
    })?;
    Ok(ModelInput::Tokens(t.to_tensor()))
}

fn run_model(a: &ModelArgs) -> Result<(RunConfig, ForwardOutput<f64>)> {
    let cfg = RunConfig::load(&a.config)?;
    let weights: ModelWeights<f64> = Container::read(&a.weights)?.to_weights(&cfg.model)?;
    let input = load_input(&a.input)?;
    let out = model_forward(&input, &cfg.model, &weights)?;
    Ok((cfg, out))
}

fn parse(a: ParseArgs) -> Result<Outcome> {
    let (cfg, out) = run_model(&a.model)?;
    let mask: Tensor<f64> = match a.layer {
        Some(k) => {
            if k == 0 || k > out.states.len() {
                return Err(Error::Usage(format!("--layer {k} outside 1..={}", out.states.len())));
            }
            expand_mask(&out.states[k - 1].mask, &out.ledger, k - 1)?
        }
        None => aggregate_masks(&out.states, Some(&out.ledger))?,
    };
    let mut tree = tree_from_mask(&mask)?;
    let parts = partition_subtrees(&mut tree, cfg.min_part_size, a.part_depth)?;
    write_text(&a.out, &to_json(&TreeJson::from(&tree))?)?;
    if let Some(p) = &a.dot {
        write_text(p, &tree_to_dot(&tree))?;
    }
    if let Some(p) = &a.mask {
        write_text(p, &to_json(&MaskJson::from_tensor(&mask)?)?)?;
    }
    emit(
        &json!({ "nodes": tree.len(), "root": tree.root, "parts": parts, "class": out.predicted_class() }),
        None,
    )?;
    Ok(Outcome::Pass)
}

fn prune(a: PruneArgs) -> Result<Outcome> {
    let (_, out) = run_model(&a.model)?;
    write_text(&a.ledger, &to_json(&out.ledger)?)?;
    if let Some(p) = &a.dense {
        let dense = retrieve_dense(&out.tokens, &out.ledger)?;
        let mut c = Container::new();
        c.push_tensor("tokens", &dense)?;
        c.write(p)?;
    }
    emit(
        &json!({
            "tokens": out.ledger.num_tokens,
            "pruned": out.ledger.events.len(),
            "kept": out.tokens.rows(),
        }),
        None,
    )?;
    Ok(Outcome::Pass)
}

fn eval_parts(a: EvalPartsArgs) -> Result<Outcome> {
    let pred: LabelGrid = read_json(&a.pred)?;
    let gt: LabelGrid = read_json(&a.gt)?;
    let report = part_metrics(&pred, &gt)?;
    emit(&report, a.out.as_deref())?;
    Ok(threshold("mIoU", report.miou, a.min_miou))
}

fn eval_saliency(a: EvalSaliencyArgs) -> Result<Outcome> {
    let pred: ScoreGrid = read_json(&a.pred)?;
    pred.validate()?;
    let gt: LabelGrid = read_json(&a.gt)?;
    gt.validate()?;
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Usage(format!(
            "score grid is {}x{}, labels are {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let fg: Vec<bool> = gt.labels.iter().map(|&l| l > 0).collect();
    let report: MetricReport = saliency_metrics(&pred.values, &fg, a.beta2)?;
    emit(&report, a.out.as_deref())?;
    Ok(threshold("maxF", report.max_f, a.min_maxf))
}

fn threshold(name: &str, value: Option<f64>, min: Option<f64>) -> Outcome {
    match (value, min) {
        (Some(v), Some(m)) if v < m => Outcome::CheckFailed(format!("{name} {v} below {m}")),
        (None, Some(_)) => Outcome::CheckFailed(format!("{name} undefined")),
        _ => Outcome::Pass,
    }
}

fn flops(a: FlopsArgs) -> Result<Outcome> {
    let cfg = RunConfig::load(&a.config)?;
    let report = model_cost(&cfg.model)?;
    if a.table {
        let text = report.table();
        match &a.out {
            Some(p) => write_text(p, &text)?,
            None => print!("{text}"),
        }
    } else {
        emit(&report, a.out.as_deref())?;
    }
    Ok(Outcome::Pass)
}

fn gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    if a.channels == 0 || a.heads == 0 || !a.channels.is_multiple_of(a.heads) || !a.channels.is_multiple_of(2) {
        return Err(Error::Usage(format!(
            "{} channels must be even and split into {} heads",
            a.channels, a.heads
        )));
    }
    let report = depvit::block::block_grad_check(a.seed, a.tokens, a.channels, a.heads, a.tolerance)?;
    emit(&report, a.out.as_deref())?;
    Ok(if report.passed {
        Outcome::Pass
    } else {
        Outcome::CheckFailed(format!(
            "max relative error {:e} above {:e}",
            report.max_rel_error, a.tolerance
        ))
    })
}

fn train_toy(a: TrainArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.model.seed = a.seed;
    let blobs = BlobConfig::for_model(&cfg.model)?;
    let samples = blobs.dataset::<f64>(a.samples, a.data_seed)?;
    let data = synth::labelled(&samples);
    let hp = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let report = toy_train(&data, &cfg.model, ModelWeights::init(&cfg.model)?, &hp)?;
    let miou = synth::part_recovery(&samples, &cfg.model, &report.weights, cfg.min_part_size, a.part_depth)?;
    if let Some(p) = &a.weights_out {
        Container::from_weights(&report.weights.cast::<f32>())?.write(p)?;
    }
    emit(
        &json!({
            "steps": a.steps,
            "lr": a.lr,
            "seed": a.seed,
            "samples": a.samples,
            "train_accuracy": report.train_accuracy,
            "final_loss": report.losses.last(),
            "losses": report.losses,
            "part_miou": miou,
        }),
        a.out.as_deref(),
    )?;
    Ok(threshold("train accuracy", Some(report.train_accuracy), a.min_accuracy))
}

fn init(a: InitArgs) -> Result<Outcome> {
    let cfg = RunConfig::load(&a.config)?;
    let c = if a.f64 {
        Container::from_weights(&ModelWeights::<f64>::init(&cfg.model)?)?
    } else {
        Container::from_weights(&ModelWeights::<f32>::init(&cfg.model)?)?
    };
    c.write(&a.out)?;
    Ok(Outcome::Pass)
}
