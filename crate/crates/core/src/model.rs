//! Patch embedding, the dependency-block stack, gate-weighted pooling and the
//! classifier, plus a small Adam trainer for toy data.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{block_on_tape, AttentionState, BlockConfig, BlockParams, BlockWeights, Direction, StateVars};
use crate::dynpool::{prune_step, PruneLedger};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, INIT_STD};
use crate::scalar::{c, Scalar};
use crate::tensor::{Tape, Tensor, Var};
use crate::tree::row_mass;

/// Colour channels of input images.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub temperature: f64,
    /// `(1-based block, tokens kept after it)`.
    pub prune_schedule: Vec<(usize, usize)>,
    pub num_classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub direction: Direction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::depvit_t()
    }
}

impl ModelConfig {
    pub fn depvit_t() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 192,
            heads: 12,
            layers: 12,
            temperature: 0.1,
            prune_schedule: Vec::new(),
            num_classes: 1000,
            seed: 0,
            direction: Direction::Reverse,
        }
    }

    pub fn depvit_s() -> Self {
        Self {
            channels: 384,
            ..Self::depvit_t()
        }
    }

    pub fn lite_schedule() -> Vec<(usize, usize)> {
        vec![(2, 160), (5, 128), (8, 96), (11, 64)]
    }

    pub fn lite_t() -> Self {
        Self {
            prune_schedule: Self::lite_schedule(),
            ..Self::depvit_t()
        }
    }

    pub fn lite_s() -> Self {
        Self {
            prune_schedule: Self::lite_schedule(),
            ..Self::depvit_s()
        }
    }

    /// 32×32 inputs in 4×4 patches (64 tokens), 4 narrow blocks.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 32,
            heads: 4,
            layers: 4,
            temperature: 0.1,
            prune_schedule: Vec::new(),
            num_classes: 2,
            seed: 0,
            direction: Direction::Reverse,
        }
    }

    pub fn num_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size.max(1);
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * IMAGE_CHANNELS
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            heads: self.heads,
            temperature: self.temperature,
            direction: self.direction,
        }
    }

    /// Token count entering each block under the prune schedule.
    pub fn tokens_per_layer(&self) -> Vec<usize> {
        let mut n = self.num_tokens();
        (1..=self.layers)
            .map(|l| {
                let here = n;
                if let Some(&(_, kept)) = self.prune_schedule.iter().find(|(at, _)| *at == l) {
                    n = kept;
                }
                here
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!("{} channels do not split into {} heads", self.channels, self.heads));
        }
        if !self.channels.is_multiple_of(2) {
            return bad(format!("channel count {} must be even", self.channels));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        let n = self.num_tokens();
        let mut last = (0, n);
        for &(layer, kept) in &self.prune_schedule {
            if layer == 0 || layer > self.layers {
                return bad(format!("prune layer {layer} outside 1..={}", self.layers));
            }
            if layer <= last.0 {
                return bad("prune layers must be strictly increasing".into());
            }
            if kept == 0 || kept > last.1 {
                return bad(format!(
                    "kept count {kept} at layer {layer} must be in 1..={}",
                    last.1
                ));
            }
            last = (layer, kept);
        }
        Ok(())
    }
}

/// An RGB image with values in `[0, 1]`, stored row-major as `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * IMAGE_CHANNELS {
            return Err(Error::shape(format!(
                "{}×{} image with {} values",
                width,
                height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * IMAGE_CHANNELS],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let k = (y * self.width + x) * IMAGE_CHANNELS;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }
}

/// Non-overlapping patches flattened in (row, column, channel) order; one row
/// per patch, patches in raster order.
pub fn extract_patches<T: Scalar>(image: &Image, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || !image.width.is_multiple_of(patch) || !image.height.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "{}×{} image does not tile into {patch}×{patch} patches",
            image.width, image.height
        )));
    }
    let (gx, gy) = (image.width / patch, image.height / patch);
    let dim = patch * patch * IMAGE_CHANNELS;
    let mut data = Vec::with_capacity(gx * gy * dim);
    for py in 0..gy {
        for px in 0..gx {
            for y in 0..patch {
                let start = ((py * patch + y) * image.width + px * patch) * IMAGE_CHANNELS;
                data.extend(
                    image.data[start..start + patch * IMAGE_CHANNELS]
                        .iter()
                        .map(|&v| T::from_f64_lossy(v as f64)),
                );
            }
        }
    }
    Tensor::new([gx * gy, dim], data)
}

/// All learned tensors of a model; `P` is a tensor, a tape handle or a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub patch_weight: P,
    pub patch_bias: P,
    pub pos_embed: P,
    pub blocks: Vec<BlockParams<P>>,
    pub norm_gain: P,
    pub norm_bias: P,
    pub head_weight: P,
    pub head_bias: P,
}

pub type ModelWeights<T> = ModelParams<Tensor<T>>;

const TOP_LEVEL: [&str; 7] = [
    "patch_embed.weight",
    "patch_embed.bias",
    "pos_embed",
    "norm.gain",
    "norm.bias",
    "head.weight",
    "head.bias",
];

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            patch_weight: f(&self.patch_weight),
            patch_bias: f(&self.patch_bias),
            pos_embed: f(&self.pos_embed),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            norm_gain: f(&self.norm_gain),
            norm_bias: f(&self.norm_bias),
            head_weight: f(&self.head_weight),
            head_bias: f(&self.head_bias),
        }
    }

    /// Every slot with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            (TOP_LEVEL[0].to_string(), &self.patch_weight),
            (TOP_LEVEL[1].to_string(), &self.patch_bias),
            (TOP_LEVEL[2].to_string(), &self.pos_embed),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.fields().into_iter().map(|(n, p)| (format!("blocks.{l}.{n}"), p)));
        }
        out.push((TOP_LEVEL[3].to_string(), &self.norm_gain));
        out.push((TOP_LEVEL[4].to_string(), &self.norm_bias));
        out.push((TOP_LEVEL[5].to_string(), &self.head_weight));
        out.push((TOP_LEVEL[6].to_string(), &self.head_bias));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend(b.fields_mut().into_iter().map(|(_, p)| p));
        }
        out.extend([
            &mut self.norm_gain,
            &mut self.norm_bias,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }
}

impl ModelParams<Vec<usize>> {
    pub fn expected(cfg: &ModelConfig) -> Self {
        let ch = cfg.channels;
        ModelParams {
            patch_weight: vec![cfg.patch_dim(), ch],
            patch_bias: vec![ch],
            pos_embed: vec![cfg.num_tokens(), ch],
            blocks: (0..cfg.layers)
                .map(|_| BlockWeights::<f64>::expected_dims(ch, cfg.heads))
                .collect(),
            norm_gain: vec![ch],
            norm_bias: vec![ch],
            head_weight: vec![ch, cfg.num_classes],
            head_bias: vec![cfg.num_classes],
        }
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, d)| d.iter().product::<usize>()).sum()
    }
}

impl<T: Scalar> ModelWeights<T> {
    /// Deterministic initialization from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ch = cfg.channels;
        let patch_weight = trunc_normal([cfg.patch_dim(), ch], INIT_STD, &mut rng);
        let pos_embed = trunc_normal([cfg.num_tokens(), ch], INIT_STD, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights::init(ch, cfg.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_weight = trunc_normal([ch, cfg.num_classes], INIT_STD, &mut rng);
        Ok(Self {
            patch_weight,
            patch_bias: Tensor::zeros([ch]),
            pos_embed,
            blocks,
            norm_gain: Tensor::ones([ch]),
            norm_bias: Tensor::zeros([ch]),
            head_weight,
            head_bias: Tensor::zeros([cfg.num_classes]),
        })
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let expected = ModelParams::expected(cfg);
        if expected.blocks.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "weights hold {} blocks, config wants {}",
                self.blocks.len(),
                cfg.layers
            )));
        }
        for ((name, t), (_, dims)) in self.named().into_iter().zip(expected.named()) {
            if t.dims() != dims.as_slice() {
                return Err(Error::Config(format!(
                    "weight {name} has shape {:?}, config wants {dims:?}",
                    t.dims()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("weight {name} is not finite")));
            }
        }
        Ok(())
    }

    /// Assembles weights from named tensors, failing on missing or extra names.
    pub fn from_named(cfg: &ModelConfig, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let expected = ModelParams::expected(cfg);
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let slots = BlockParams::<()>::NAMES
                .iter()
                .map(|n| take(&format!("blocks.{l}.{n}")))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(BlockParams::from_fields(slots).expect("one tensor per slot"));
        }
        let w = Self {
            patch_weight: take(TOP_LEVEL[0])?,
            patch_bias: take(TOP_LEVEL[1])?,
            pos_embed: take(TOP_LEVEL[2])?,
            blocks,
            norm_gain: take(TOP_LEVEL[3])?,
            norm_bias: take(TOP_LEVEL[4])?,
            head_weight: take(TOP_LEVEL[5])?,
            head_bias: take(TOP_LEVEL[6])?,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("checkpoint has unexpected tensor {extra}")));
        }
        debug_assert_eq!(expected.named().len(), w.named().len());
        w.validate(cfg)?;
        Ok(w)
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        self.map(|t| t.cast())
    }

    pub fn to_tape(&self, tape: &mut Tape<T>, requires_grad: bool) -> ModelParams<Var> {
        self.map(|t| tape.leaf(t.clone(), requires_grad))
    }
}

/// What the model consumes: an image, or a token matrix that skips the
/// patch embedding and the positional table.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput<T> {
    Image(Image),
    Tokens(Tensor<T>),
}

/// Embeds an image: patch projection plus the positional table.
pub fn patch_embed<T: Scalar>(image: &Image, w: &ModelWeights<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    check_image(image, cfg)?;
    extract_patches::<T>(image, cfg.patch_size)?
        .matmul(&w.patch_weight)?
        .add_row_bias(&w.patch_bias)?
        .add(&w.pos_embed)
}

fn check_image(image: &Image, cfg: &ModelConfig) -> Result<()> {
    if image.width != cfg.image_size || image.height != cfg.image_size {
        return Err(Error::Config(format!(
            "{}×{} image for a model configured for {}×{}",
            image.width, image.height, cfg.image_size, cfg.image_size
        )));
    }
    Ok(())
}

/// Tape handles of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub states: Vec<StateVars>,
    pub ledger: PruneLedger,
    pub tokens: Var,
    pub pooled: Var,
    pub logits: Var,
}

/// Records a full forward pass, pruning after the scheduled blocks.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    input: &ModelInput<T>,
    w: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<TapeForward> {
    let mut x = match input {
        ModelInput::Image(img) => {
            check_image(img, cfg)?;
            let patches = tape.constant(extract_patches(img, cfg.patch_size)?);
            let emb = tape.linear(patches, w.patch_weight, Some(w.patch_bias))?;
            tape.add(emb, w.pos_embed)?
        }
        ModelInput::Tokens(t) => {
            if t.rank() != 2 || t.cols() != cfg.channels {
                return Err(Error::shape(format!(
                    "token input {:?} for {} channels",
                    t.dims(),
                    cfg.channels
                )));
            }
            tape.constant(t.clone())
        }
    };
    let n = tape.value(x).rows();
    if !cfg.prune_schedule.is_empty() && n != cfg.num_tokens() {
        return Err(Error::Config(format!(
            "{n} tokens but the prune schedule assumes {}",
            cfg.num_tokens()
        )));
    }
    let bcfg = cfg.block_config();
    let mut ledger = PruneLedger::new(n);
    let mut survivors: Vec<usize> = (0..n).collect();
    let mut received = vec![0.0; n];
    let mut m = tape.constant(Tensor::ones([n, 1]));
    let mut states = Vec::with_capacity(w.blocks.len());
    for (l, bw) in w.blocks.iter().enumerate() {
        ledger.layer_survivors.push(survivors.clone());
        let (out, st) = block_on_tape(tape, x, bw, m, &bcfg)?;
        x = out;
        m = st.message;
        for (k, r) in row_mass(tape.value(st.mask))?.into_iter().enumerate() {
            received[survivors[k]] += r;
        }
        let layer = l + 1;
        if let Some(&(_, kept)) = cfg.prune_schedule.iter().find(|(at, _)| *at == layer) {
            let scores: Vec<f64> = survivors.iter().map(|&t| received[t]).collect();
            let gates = tape.value(st.message).data().to_vec();
            let (next, events) = prune_step(tape.value(st.mask), &scores, &gates, &survivors, layer, kept)?;
            if !events.is_empty() {
                let keep: Vec<usize> = next
                    .iter()
                    .map(|t| survivors.binary_search(t).expect("survivor"))
                    .collect();
                x = tape.select_rows(x, &keep)?;
                m = tape.select_rows(m, &keep)?;
                ledger.events.extend(events);
                survivors = next;
            }
        }
        states.push(st);
    }
    let pooled = tape.weighted_mean_rows(x, m)?;
    let normed = tape.layer_norm(pooled, w.norm_gain, w.norm_bias)?;
    let logits = tape.linear(normed, w.head_weight, Some(w.head_bias))?;
    Ok(TapeForward {
        states,
        ledger,
        tokens: x,
        pooled,
        logits,
    })
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub states: Vec<AttentionState<T>>,
    pub ledger: PruneLedger,
    /// Final survivor tokens, in ascending original index.
    pub tokens: Tensor<T>,
    pub pooled: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn predicted_class(&self) -> usize {
        argmax(self.logits.data())
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

pub fn model_forward<T: Scalar>(
    input: &ModelInput<T>,
    cfg: &ModelConfig,
    w: &ModelWeights<T>,
) -> Result<ForwardOutput<T>> {
    cfg.validate()?;
    if w.blocks.len() != cfg.layers {
        return Err(Error::Config(format!(
            "weights hold {} blocks, config wants {}",
            w.blocks.len(),
            cfg.layers
        )));
    }
    let mut tape = Tape::new();
    let vars = w.to_tape(&mut tape, false);
    let f = forward_on_tape(&mut tape, input, &vars, cfg)?;
    Ok(ForwardOutput {
        states: f.states.iter().map(|s| s.collect(&tape)).collect::<Result<_>>()?,
        ledger: f.ledger,
        tokens: tape.value(f.tokens).clone(),
        pooled: tape.value(f.pooled).clone(),
        logits: tape.value(f.logits).clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    pub weights: ModelWeights<T>,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
    /// Accuracy of the final weights on the whole training set.
    pub train_accuracy: f64,
}

/// Adam state over a fixed list of tensors.
struct Adam<T> {
    cfg: TrainConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(cfg: &TrainConfig, shapes: &[&[usize]]) -> Self {
        let zeros: Vec<Tensor<T>> = shapes.iter().map(|d| Tensor::zeros(d.to_vec())).collect();
        Self {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let lr_t = self.cfg.lr * (1.0 - b2.powi(self.t)).sqrt() / (1.0 - b1.powi(self.t));
        let (b1, b2, lr_t, eps) = (c::<T>(b1), c::<T>(b2), c::<T>(lr_t), c::<T>(self.cfg.eps));
        let one = T::one();
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (self.m[k].data_mut(), self.v[k].data_mut(), grads[k].data());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                *w -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Mean cross-entropy of a batch and its gradient for every weight.
pub fn batch_loss_and_grad<T: Scalar>(
    data: &[(ModelInput<T>, usize)],
    batch: &[usize],
    cfg: &ModelConfig,
    w: &ModelWeights<T>,
) -> Result<(f64, ModelWeights<T>)> {
    let mut tape = Tape::new();
    let vars = w.to_tape(&mut tape, true);
    let mut total: Option<Var> = None;
    for &k in batch {
        let (input, label) = &data[k];
        if *label >= cfg.num_classes {
            return Err(Error::Training(format!("label {label} outside {} classes", cfg.num_classes)));
        }
        let f = forward_on_tape(&mut tape, input, &vars, cfg)?;
        let loss = tape.cross_entropy(f.logits, &[*label])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::Training("empty batch".into()))?;
    let mean = tape.scale(total, T::one() / T::from_usize(batch.len()).unwrap())?;
    let loss = tape.value(mean).data()[0].to_f64_lossless();
    if !loss.is_finite() {
        return Err(Error::Training(format!("loss diverged to {loss}")));
    }
    let grads = tape.backward(mean)?;
    Ok((loss, vars.map(|&v| grads.get(v))))
}

/// Fraction of examples whose predicted class matches the label.
pub fn accuracy<T: Scalar>(data: &[(ModelInput<T>, usize)], cfg: &ModelConfig, w: &ModelWeights<T>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (input, label) in data {
        if model_forward(input, cfg, w)?.predicted_class() == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Adam on mean cross-entropy. Batches are drawn from a seeded shuffle; a
/// batch size at least the dataset size uses the whole set in order.
pub fn toy_train<T: Scalar>(
    data: &[(ModelInput<T>, usize)],
    cfg: &ModelConfig,
    init: ModelWeights<T>,
    hp: &TrainConfig,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    init.validate(cfg)?;
    if data.is_empty() || hp.batch_size == 0 {
        return Err(Error::Training("training needs data and a positive batch size".into()));
    }
    if !(hp.lr >= 0.0 && hp.lr.is_finite()) {
        return Err(Error::Training(format!("learning rate {} must be non-negative", hp.lr)));
    }
    let mut w = init;
    let shapes: Vec<Vec<usize>> = w.named().iter().map(|(_, t)| t.dims().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|d| d.as_slice()).collect();
    let mut adam = Adam::<T>::new(hp, &shape_refs);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut losses = Vec::with_capacity(hp.steps);
    for _ in 0..hp.steps {
        let batch: Vec<usize> = if hp.batch_size >= data.len() {
            (0..data.len()).collect()
        } else {
            if cursor + hp.batch_size > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += hp.batch_size;
            order[cursor - hp.batch_size..cursor].to_vec()
        };
        let (loss, grads) = batch_loss_and_grad(data, &batch, cfg, &w)?;
        losses.push(loss);
        let grads: Vec<Tensor<T>> = grads.named().into_iter().map(|(_, g)| g.clone()).collect();
        adam.step(w.slots_mut(), &grads);
        if w.slots_mut().iter().any(|t| !t.is_finite()) {
            return Err(Error::Training("weights became non-finite".into()));
        }
    }
    let train_accuracy = accuracy(data, cfg, &w)?;
    Ok(TrainReport {
        weights: w,
        losses,
        train_accuracy,
    })
}
