//! The reversed-attention dependency block.
//!
//! A block runs pre-norm multi-head attention in which each token *sends* its
//! softmax budget to the tokens it attends to. The budget of sender `i` on
//! head `h` is scaled by the head selector `P[i][h]` and by the cumulative
//! message gate `M[i]`:
//!
//! ```text
//! A_R[h][j][i] = A_F[h][i][j] * P[i][h] * M[i]
//! A_M[j][i]    = sum_h A_R[h][j][i]
//! o_j          = concat_h( sum_i A_R[h][j][i] v_i ) W_o
//! ```
//!
//! Standalone kernels ([`forward_attention`], [`head_selector`],
//! [`message_controller`], [`reverse_compose`]) evaluate single pieces on
//! plain tensors. [`block_on_tape`] is the differentiable composition used by
//! the model, the trainer and [`block_backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{param_record, trunc_normal, INIT_STD};
use crate::scalar::{c, Scalar};
use crate::tensor::{Tape, Tensor, Var};

/// Default head-selector softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

param_record! {
    /// Learned projections of one dependency block. Matrices are stored
    /// input-major (`in × out`) so that `y = x · W + b`.
    BlockParams {
        norm1_gain,
        norm1_bias,
        q_weight,
        q_bias,
        k_weight,
        k_bias,
        v_weight,
        v_bias,
        proj_weight,
        proj_bias,
        selector_weight,
        controller1_weight,
        controller1_bias,
        controller2_weight,
        controller2_bias,
        norm2_gain,
        norm2_bias,
        fc1_weight,
        fc1_bias,
        fc2_weight,
        fc2_bias,
    }
}

pub type BlockWeights<T> = BlockParams<Tensor<T>>;

/// How attention output is composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Tokens send messages along the transposed, gated attention.
    #[default]
    Reverse,
    /// Standard gathering attention; selector and gate only shape the mask.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub heads: usize,
    pub temperature: f64,
    pub direction: Direction,
}

impl BlockConfig {
    pub fn new(heads: usize) -> Self {
        Self {
            heads,
            temperature: DEFAULT_TEMPERATURE,
            direction: Direction::Reverse,
        }
    }
}

/// Everything a block exposes for tree induction and pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState<T> {
    /// `H×N×N`, row `i` of head `h` is the distribution of sender `i`.
    pub forward: Tensor<T>,
    /// `N×H`, each row a distribution over heads.
    pub selector: Tensor<T>,
    /// `N×1`, this layer's controller output.
    pub gate: Tensor<T>,
    /// `N×1`, cumulative product of gates through this layer.
    pub message: Tensor<T>,
    /// `H×N×N`, entry `[h][j][i]` is the mass `i` sends to `j` on head `h`.
    pub reversed: Tensor<T>,
    /// `N×N` soft dependency mask, `[j][i]` = mass sent from `i` to `j`.
    pub mask: Tensor<T>,
}

impl<T: Scalar> AttentionState<T> {
    pub fn num_tokens(&self) -> usize {
        self.mask.dims()[0]
    }
}

impl<T: Scalar> BlockWeights<T> {
    /// Truncated-normal (std 0.02) matrices, zero biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_dims(channels, heads)?;
        let ch = channels;
        let half = ch / 2;
        let w = |rows: usize, cols: usize, rng: &mut R| trunc_normal::<T, R>([rows, cols], INIT_STD, rng);
        Ok(Self {
            norm1_gain: Tensor::ones([ch]),
            norm1_bias: Tensor::zeros([ch]),
            q_weight: w(ch, ch, rng),
            q_bias: Tensor::zeros([ch]),
            k_weight: w(ch, ch, rng),
            k_bias: Tensor::zeros([ch]),
            v_weight: w(ch, ch, rng),
            v_bias: Tensor::zeros([ch]),
            proj_weight: w(ch, ch, rng),
            proj_bias: Tensor::zeros([ch]),
            selector_weight: w(ch, heads, rng),
            controller1_weight: w(ch, half, rng),
            controller1_bias: Tensor::zeros([half]),
            controller2_weight: w(half, 1, rng),
            controller2_bias: Tensor::zeros([1]),
            norm2_gain: Tensor::ones([ch]),
            norm2_bias: Tensor::zeros([ch]),
            fc1_weight: w(ch, 4 * ch, rng),
            fc1_bias: Tensor::zeros([4 * ch]),
            fc2_weight: w(4 * ch, ch, rng),
            fc2_bias: Tensor::zeros([ch]),
        })
    }

    pub fn channels(&self) -> usize {
        self.q_weight.rows()
    }

    pub fn heads(&self) -> usize {
        self.selector_weight.cols()
    }

    /// Expected shape of every slot for a `channels`/`heads` block.
    pub fn expected_dims(channels: usize, heads: usize) -> BlockParams<Vec<usize>> {
        let ch = channels;
        let half = ch / 2;
        BlockParams {
            norm1_gain: vec![ch],
            norm1_bias: vec![ch],
            q_weight: vec![ch, ch],
            q_bias: vec![ch],
            k_weight: vec![ch, ch],
            k_bias: vec![ch],
            v_weight: vec![ch, ch],
            v_bias: vec![ch],
            proj_weight: vec![ch, ch],
            proj_bias: vec![ch],
            selector_weight: vec![ch, heads],
            controller1_weight: vec![ch, half],
            controller1_bias: vec![half],
            controller2_weight: vec![half, 1],
            controller2_bias: vec![1],
            norm2_gain: vec![ch],
            norm2_bias: vec![ch],
            fc1_weight: vec![ch, 4 * ch],
            fc1_bias: vec![4 * ch],
            fc2_weight: vec![4 * ch, ch],
            fc2_bias: vec![ch],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::expected_dims(self.channels(), self.heads());
        for ((name, t), (_, dims)) in self.fields().into_iter().zip(expected.fields()) {
            if t.dims() != dims.as_slice() {
                return Err(Error::shape(format!(
                    "block weight {name}: expected {dims:?}, got {:?}",
                    t.dims()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("block weight {name} is not finite")));
            }
        }
        check_dims(self.channels(), self.heads())
    }

    pub fn num_params(&self) -> usize {
        self.fields().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_tape(&self, tape: &mut Tape<T>, requires_grad: bool) -> BlockParams<Var> {
        self.map(|t| tape.leaf(t.clone(), requires_grad))
    }
}

fn check_dims(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::shape(format!(
            "{channels} channels do not split into {heads} heads"
        )));
    }
    if !channels.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "message controller needs an even channel count, got {channels}"
        )));
    }
    Ok(())
}

fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    x.matmul(w)?.add_row_bias(b)
}

/// Per-head forward attention `softmax(Q_h K_h^T / sqrt(C_h))` and the value heads.
///
/// `x` is the (already normalized) block input.
pub fn forward_attention<T: Scalar>(
    x: &Tensor<T>,
    w: &BlockWeights<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let ch = w.channels();
    if x.rank() != 2 || x.cols() != ch {
        return Err(Error::shape(format!(
            "tokens {:?} for {ch} channels",
            x.dims()
        )));
    }
    check_dims(ch, heads)?;
    let width = ch / heads;
    let q = linear(x, &w.q_weight, &w.q_bias)?;
    let k = linear(x, &w.k_weight, &w.k_bias)?;
    let v = linear(x, &w.v_weight, &w.v_bias)?;
    let scale = T::one() / c::<T>(width as f64).sqrt();
    let mut attn = Vec::with_capacity(heads);
    let mut values = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * width, width)?;
        let kh = k.slice_cols(h * width, width)?;
        let logits = qh.matmul(&kh.transpose_last2())?.scale(scale);
        attn.push(logits.softmax_rows(T::one())?);
        values.push(v.slice_cols(h * width, width)?);
    }
    Ok((Tensor::stack(&attn)?, values))
}

/// `P = softmax(X W_p / temperature)` over the head axis.
pub fn head_selector<T: Scalar>(x: &Tensor<T>, selector: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    x.matmul(selector)?.softmax_rows(temperature)
}

/// Returns this layer's gate `g = sigmoid(GELU(X W1 + b1) W2 + b2)` and the
/// cumulative gate `M = M_prev ⊙ g`.
pub fn message_controller<T: Scalar>(
    x: &Tensor<T>,
    w: &BlockWeights<T>,
    m_prev: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let hidden = linear(x, &w.controller1_weight, &w.controller1_bias)?.gelu();
    let gate = linear(&hidden, &w.controller2_weight, &w.controller2_bias)?.sigmoid();
    if m_prev.len() != gate.len() {
        return Err(Error::shape(format!(
            "{} previous gates for {} tokens",
            m_prev.len(),
            gate.len()
        )));
    }
    let m_prev = m_prev.clone().reshape(gate.dims().to_vec())?;
    let message = m_prev.mul(&gate)?;
    Ok((gate, message))
}

/// Builds `A_R` (`H×N×N`) and `A_M` (`N×N`) with sender-side scaling.
pub fn reverse_compose<T: Scalar>(
    forward: &Tensor<T>,
    selector: &Tensor<T>,
    message: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if forward.rank() != 3 || forward.dims()[1] != forward.dims()[2] {
        return Err(Error::shape(format!("forward attention {:?}", forward.dims())));
    }
    let (heads, n) = (forward.dims()[0], forward.dims()[1]);
    if selector.dims() != [n, heads] || message.len() != n {
        return Err(Error::shape(format!(
            "selector {:?} / message {:?} for {heads} heads of {n} tokens",
            selector.dims(),
            message.dims()
        )));
    }
    let mut reversed = Tensor::zeros([heads, n, n]);
    let mut mask = Tensor::zeros([n, n]);
    for h in 0..heads {
        for i in 0..n {
            let s = selector.get2(i, h) * message.data()[i];
            for j in 0..n {
                let v = forward.data()[(h * n + i) * n + j] * s;
                reversed.data_mut()[(h * n + j) * n + i] = v;
                mask.data_mut()[j * n + i] += v;
            }
        }
    }
    Ok((reversed, mask))
}

/// Tape handles for the pieces of one block evaluation.
#[derive(Debug, Clone)]
pub struct StateVars {
    pub forward: Vec<Var>,
    pub selector: Var,
    pub gate: Var,
    pub message: Var,
    pub reversed: Vec<Var>,
    pub mask: Var,
}

impl StateVars {
    pub fn collect<T: Scalar>(&self, tape: &Tape<T>) -> Result<AttentionState<T>> {
        let gather = |vars: &[Var]| -> Result<Tensor<T>> {
            let mats: Vec<Tensor<T>> = vars.iter().map(|&v| tape.value(v).clone()).collect();
            Tensor::stack(&mats)
        };
        Ok(AttentionState {
            forward: gather(&self.forward)?,
            selector: tape.value(self.selector).clone(),
            gate: tape.value(self.gate).clone(),
            message: tape.value(self.message).clone(),
            reversed: gather(&self.reversed)?,
            mask: tape.value(self.mask).clone(),
        })
    }
}

/// Records one pre-norm dependency block on `tape`.
///
/// `x` is `N×C`, `m_prev` is `N×1`. Returns the block output and state handles.
pub fn block_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &BlockParams<Var>,
    m_prev: Var,
    cfg: &BlockConfig,
) -> Result<(Var, StateVars)> {
    let ch = tape.value(w.q_weight).rows();
    let heads = cfg.heads;
    check_dims(ch, heads)?;
    if tape.value(w.selector_weight).cols() != heads {
        return Err(Error::shape(format!(
            "selector has {} heads, config {heads}",
            tape.value(w.selector_weight).cols()
        )));
    }
    let n = tape.value(x).rows();
    if tape.value(x).cols() != ch || tape.value(m_prev).dims() != [n, 1] {
        return Err(Error::shape(format!(
            "block input {:?} with gates {:?} for {ch} channels",
            tape.value(x).dims(),
            tape.value(m_prev).dims()
        )));
    }
    let width = ch / heads;
    let h1 = tape.layer_norm(x, w.norm1_gain, w.norm1_bias)?;
    let q = tape.linear(h1, w.q_weight, Some(w.q_bias))?;
    let k = tape.linear(h1, w.k_weight, Some(w.k_bias))?;
    let v = tape.linear(h1, w.v_weight, Some(w.v_bias))?;

    let sel_logits = tape.matmul(h1, w.selector_weight)?;
    let selector = tape.softmax_rows(sel_logits, c(cfg.temperature))?;

    let hidden = tape.linear(h1, w.controller1_weight, Some(w.controller1_bias))?;
    let hidden = tape.gelu(hidden)?;
    let gate = tape.linear(hidden, w.controller2_weight, Some(w.controller2_bias))?;
    let gate = tape.sigmoid(gate)?;
    let message = tape.mul(m_prev, gate)?;

    let scale = T::one() / c::<T>(width as f64).sqrt();
    let mut forward = Vec::with_capacity(heads);
    let mut reversed = Vec::with_capacity(heads);
    let mut outputs = Vec::with_capacity(heads);
    let mut mask: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * width, width)?;
        let kh = tape.slice_cols(k, h * width, width)?;
        let vh = tape.slice_cols(v, h * width, width)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let af = tape.softmax_rows(logits, T::one())?;

        let p_col = tape.slice_cols(selector, h, 1)?;
        let send = tape.mul(p_col, message)?;
        let scaled = tape.scale_rows(af, send)?;
        let ar = tape.transpose(scaled)?;
        mask = Some(match mask {
            Some(acc) => tape.add(acc, ar)?,
            None => ar,
        });
        let out = match cfg.direction {
            Direction::Reverse => tape.matmul(ar, vh)?,
            Direction::Forward => tape.matmul(af, vh)?,
        };
        forward.push(af);
        reversed.push(ar);
        outputs.push(out);
    }
    let heads_out = tape.concat_cols(&outputs)?;
    let attn = tape.linear(heads_out, w.proj_weight, Some(w.proj_bias))?;
    let x1 = tape.add(x, attn)?;

    let h2 = tape.layer_norm(x1, w.norm2_gain, w.norm2_bias)?;
    let f = tape.linear(h2, w.fc1_weight, Some(w.fc1_bias))?;
    let f = tape.gelu(f)?;
    let f = tape.linear(f, w.fc2_weight, Some(w.fc2_bias))?;
    let out = tape.add(x1, f)?;

    let state = StateVars {
        forward,
        selector,
        gate,
        message,
        reversed,
        mask: mask.expect("at least one head"),
    };
    Ok((out, state))
}

/// Evaluates one block. `m_prev` is `N×1` (all ones for the first layer).
pub fn block_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &BlockWeights<T>,
    m_prev: &Tensor<T>,
    cfg: &BlockConfig,
) -> Result<(Tensor<T>, AttentionState<T>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mv = tape.constant(m_prev.clone().reshape([m_prev.len(), 1])?);
    let wv = w.to_tape(&mut tape, false);
    let (out, state) = block_on_tape(&mut tape, xv, &wv, mv, cfg)?;
    Ok((tape.value(out).clone(), state.collect(&tape)?))
}

/// Upstream gradients flowing into a block's outputs.
#[derive(Debug, Clone)]
pub struct BlockUpstream<T> {
    /// d loss / d X_out (`N×C`).
    pub tokens: Tensor<T>,
    /// d loss / d A_M (`N×N`), if the mask feeds the loss.
    pub mask: Option<Tensor<T>>,
    /// d loss / d pooled (`1×C`) for the gate-weighted mean of X_out.
    pub pooled: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct BlockGradients<T> {
    pub tokens: Tensor<T>,
    pub weights: BlockWeights<T>,
    pub message: Tensor<T>,
}

/// Vector-Jacobian product of a block: pulls upstream gradients back to the
/// input tokens, every weight and the incoming cumulative gate.
pub fn block_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &BlockWeights<T>,
    m_prev: &Tensor<T>,
    cfg: &BlockConfig,
    upstream: &BlockUpstream<T>,
) -> Result<BlockGradients<T>> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let mv = tape.param(m_prev.clone().reshape([m_prev.len(), 1])?);
    let wv = w.to_tape(&mut tape, true);
    let (out, state) = block_on_tape(&mut tape, xv, &wv, mv, cfg)?;
    let loss = upstream_loss(&mut tape, out, &state, upstream)?;
    let mut grads = tape.backward(loss)?;
    Ok(BlockGradients {
        tokens: grads.take(xv),
        weights: wv.map(|&v| grads.get(v)),
        message: grads.take(mv).reshape(m_prev.dims().to_vec())?,
    })
}

/// `Σ out⊙d_out + Σ A_M⊙d_mask + pooled·d_pooled` with constant upstream factors.
pub(crate) fn upstream_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    state: &StateVars,
    upstream: &BlockUpstream<T>,
) -> Result<Var> {
    let mut terms = Vec::new();
    let d = tape.constant(upstream.tokens.clone());
    let t = tape.mul(out, d)?;
    terms.push(tape.sum(t)?);
    if let Some(dm) = &upstream.mask {
        let d = tape.constant(dm.clone());
        let t = tape.mul(state.mask, d)?;
        terms.push(tape.sum(t)?);
    }
    if let Some(dp) = &upstream.pooled {
        let pooled = tape.weighted_mean_rows(out, state.message)?;
        let d = tape.constant(dp.clone());
        let t = tape.mul(pooled, d)?;
        terms.push(tape.sum(t)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Finite-difference check of [`block_backward`] on a random block.
///
/// Weights are the seeded init plus uniform noise so no gradient is
/// trivially zero; the loss couples tokens, the soft mask and the pooled
/// vector to random upstream factors.
pub fn block_grad_check(
    seed: u64,
    tokens: usize,
    channels: usize,
    heads: usize,
    tolerance: f64,
) -> Result<crate::tensor::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |dims: &[usize], scale: f64, rng: &mut ChaCha8Rng| {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
    };
    let w = BlockWeights::<f64>::init(channels, heads, &mut rng)?;
    let mut fields = Vec::new();
    for (_, t) in w.fields() {
        fields.push(t.add(&uniform(t.dims(), 0.4, &mut rng)?)?);
    }
    let x = uniform(&[tokens, channels], 1.0, &mut rng)?;
    let m_prev = uniform(&[tokens, 1], 0.45, &mut rng)?.map(|v| v + 0.5);
    let upstream = BlockUpstream {
        tokens: uniform(&[tokens, channels], 1.0, &mut rng)?,
        mask: Some(uniform(&[tokens, tokens], 1.0, &mut rng)?),
        pooled: Some(uniform(&[1, channels], 1.0, &mut rng)?),
    };
    let mut inputs = vec![x, m_prev];
    inputs.extend(fields);
    let cfg = BlockConfig::new(heads);
    crate::tensor::grad_check(
        |tape, vars| {
            let wv = BlockParams::from_fields(vars[2..].iter().copied())
                .ok_or_else(|| Error::shape("block parameter count"))?;
            let (out, st) = block_on_tape(tape, vars[0], &wv, vars[1], &cfg)?;
            upstream_loss(tape, out, &st, &upstream)
        },
        &inputs,
        1e-4,
        tolerance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn scaled_weights(ch: usize, heads: usize, scale: f64, rng: &mut ChaCha8Rng) -> BlockWeights<f64> {
        let w = BlockWeights::<f64>::init(ch, heads, rng).unwrap();
        w.map(|t| {
            let noise = random(t.dims(), scale, rng);
            t.add(&noise).unwrap()
        })
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = scaled_weights(8, 2, 0.5, &mut rng);
        let x = random(&[1, 8], 1.0, &mut rng);
        let (af, _) = forward_attention(&x, &w, 2).unwrap();
        assert_eq!(af.data(), &[1.0, 1.0]);
        let cfg = BlockConfig::new(1);
        let w1 = scaled_weights(8, 1, 0.5, &mut rng);
        let (_, st) = block_forward(&x, &w1, &Tensor::ones([1, 1]), &cfg).unwrap();
        assert_eq!(st.selector.data(), &[1.0]);
        assert!((st.mask.data()[0] - st.gate.data()[0]).abs() < 1e-15);
    }

    #[test]
    fn zero_query_key_weights_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = scaled_weights(8, 2, 0.5, &mut rng);
        for t in [&mut w.q_weight, &mut w.k_weight, &mut w.q_bias, &mut w.k_bias] {
            *t = t.map(|_| 0.0);
        }
        let x = random(&[5, 8], 1.0, &mut rng);
        let (af, _) = forward_attention(&x, &w, 2).unwrap();
        assert!(af.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_token_attention_matches_scalar_recomputation() {
        // H=1, C=2: with identity projections and zero bias, Q = K = X.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = BlockWeights::<f64>::init(2, 1, &mut rng).unwrap();
        w.q_weight = Tensor::eye(2);
        w.k_weight = Tensor::eye(2);
        let x = Tensor::from_f64([2, 2], &[1.0, 0.0, 0.5, 2.0]).unwrap();
        let (af, _) = forward_attention(&x, &w, 1).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let l = [[1.0 * s, 0.5 * s], [0.5 * s, (0.25 + 4.0) * s]];
        for i in 0..2 {
            let z = l[i][0].exp() + l[i][1].exp();
            for j in 0..2 {
                assert!((af.data()[i * 2 + j] - l[i][j].exp() / z).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn head_selector_cases() {
        let x = Tensor::<f64>::from_f64([3, 2], &[1., 2., -1., 0.5, 3., 3.]).unwrap();
        let p = head_selector(&x, &Tensor::zeros([2, 4]), 0.1).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        // logits row [1, 2] at temperature 0.1
        let one = Tensor::<f64>::from_f64([1, 1], &[1.0]).unwrap();
        let sel = Tensor::<f64>::from_f64([1, 2], &[1.0, 2.0]).unwrap();
        let p = head_selector(&one, &sel, 0.1).unwrap();
        let hi = 1.0 / (1.0 + (-10f64).exp());
        assert!((p.data()[1] - hi).abs() < 1e-15);
        assert!((p.data()[0] - (1.0 - hi)).abs() < 1e-15);
        assert!((p.data()[0] - 4.54e-5).abs() < 1e-7);
        let p = head_selector(&x, &Tensor::from_f64([2, 1], &[0.3, -2.0]).unwrap(), 0.1).unwrap();
        assert!(p.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn message_controller_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = scaled_weights(4, 2, 0.3, &mut rng);
        w.controller2_weight = w.controller2_weight.map(|_| 0.0);
        w.controller2_bias = w.controller2_bias.map(|_| 0.0);
        let x = random(&[3, 4], 1.0, &mut rng);
        let (g, m) = message_controller(&x, &w, &Tensor::ones([3, 1])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
        assert_eq!(g, m);
        // second layer gate 0.8: sigmoid(b) = 0.8 with b = ln 4
        let mut w2 = w.clone();
        w2.controller2_bias = Tensor::from_f64([1], &[4f64.ln()]).unwrap();
        let (g2, m2) = message_controller(&x, &w2, &m).unwrap();
        assert!(g2.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        assert!(m2.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        // gates pinned at 1 keep M at 1
        let mut w3 = w.clone();
        w3.controller2_bias = Tensor::from_f64([1], &[1e3]).unwrap();
        let (_, m3) = message_controller(&x, &w3, &Tensor::ones([3, 1])).unwrap();
        assert!(m3.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reverse_compose_identity() {
        let af = Tensor::<f64>::eye(3).reshape([1, 3, 3]).unwrap();
        let (ar, am) = reverse_compose(&af, &Tensor::ones([3, 1]), &Tensor::ones([3, 1])).unwrap();
        assert_eq!(ar.slab(0).unwrap(), Tensor::eye(3));
        assert_eq!(am, Tensor::eye(3));
    }

    #[test]
    fn reverse_compose_hand_case() {
        // N=3, H=2
        let af = Tensor::<f64>::from_f64(
            [2, 3, 3],
            &[
                0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2, //
                0.3, 0.3, 0.4, 0.5, 0.25, 0.25, 0.0, 1.0, 0.0,
            ],
        )
        .unwrap();
        let p = Tensor::<f64>::from_f64([3, 2], &[0.9, 0.1, 0.5, 0.5, 0.2, 0.8]).unwrap();
        let m = Tensor::<f64>::from_f64([3, 1], &[1.0, 0.5, 0.25]).unwrap();
        let (_, am) = reverse_compose(&af, &p, &m).unwrap();
        // A_M[j][i] = M[i] * (P[i][0] A0[i][j] + P[i][1] A1[i][j])
        let expected = [
            [1.0 * (0.9 * 0.2 + 0.1 * 0.3), 0.5 * (0.5 * 0.1 + 0.5 * 0.5), 0.25 * (0.2 * 0.6 + 0.8 * 0.0)],
            [1.0 * (0.9 * 0.5 + 0.1 * 0.3), 0.5 * (0.5 * 0.1 + 0.5 * 0.25), 0.25 * (0.2 * 0.2 + 0.8 * 1.0)],
            [1.0 * (0.9 * 0.3 + 0.1 * 0.4), 0.5 * (0.5 * 0.8 + 0.5 * 0.25), 0.25 * (0.2 * 0.2 + 0.8 * 0.0)],
        ];
        for j in 0..3 {
            for i in 0..3 {
                assert!((am.get2(j, i) - expected[j][i]).abs() < 1e-15, "({j},{i})");
            }
        }
    }

    #[test]
    fn zero_ffn_and_output_projection_is_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = scaled_weights(8, 2, 0.5, &mut rng);
        for t in [&mut w.proj_weight, &mut w.proj_bias, &mut w.fc2_weight, &mut w.fc2_bias] {
            *t = t.map(|_| 0.0);
        }
        let x = random(&[4, 8], 1.0, &mut rng);
        let (out, _) = block_forward(&x, &w, &Tensor::ones([4, 1]), &BlockConfig::new(2)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn block_state_matches_standalone_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = scaled_weights(8, 4, 0.5, &mut rng);
        let x = random(&[3, 8], 1.0, &mut rng);
        let m_prev = Tensor::from_f64([3, 1], &[1.0, 0.7, 0.2]).unwrap();
        let cfg = BlockConfig::new(4);
        let (_, st) = block_forward(&x, &w, &m_prev, &cfg).unwrap();
        let h = x.layer_norm(&w.norm1_gain, &w.norm1_bias).unwrap();
        let (af, _) = forward_attention(&h, &w, 4).unwrap();
        let p = head_selector(&h, &w.selector_weight, 0.1).unwrap();
        let (g, m) = message_controller(&h, &w, &m_prev).unwrap();
        let (ar, am) = reverse_compose(&af, &p, &m).unwrap();
        assert!(st.forward.max_abs_diff(&af) < 1e-14);
        assert!(st.selector.max_abs_diff(&p) < 1e-14);
        assert!(st.gate.max_abs_diff(&g) < 1e-14);
        assert!(st.reversed.max_abs_diff(&ar) < 1e-14);
        assert!(st.mask.max_abs_diff(&am) < 1e-14);
    }

    /// Standard pre-norm transformer block written with plain kernels.
    fn reference_transformer_block(x: &Tensor<f64>, w: &BlockWeights<f64>, heads: usize) -> Tensor<f64> {
        let h = x.layer_norm(&w.norm1_gain, &w.norm1_bias).unwrap();
        let (af, values) = forward_attention(&h, w, heads).unwrap();
        let outs: Vec<Tensor<f64>> = (0..heads)
            .map(|k| af.slab(k).unwrap().matmul(&values[k]).unwrap())
            .collect();
        let refs: Vec<&Tensor<f64>> = outs.iter().collect();
        let o = linear(&Tensor::concat_cols(&refs).unwrap(), &w.proj_weight, &w.proj_bias).unwrap();
        let x1 = x.add(&o).unwrap();
        let h2 = x1.layer_norm(&w.norm2_gain, &w.norm2_bias).unwrap();
        let f = linear(&h2, &w.fc1_weight, &w.fc1_bias).unwrap().gelu();
        x1.add(&linear(&f, &w.fc2_weight, &w.fc2_bias).unwrap()).unwrap()
    }

    #[test]
    fn forward_direction_is_a_standard_transformer_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = scaled_weights(8, 2, 0.5, &mut rng);
        let x = random(&[5, 8], 1.0, &mut rng);
        let cfg = BlockConfig {
            direction: Direction::Forward,
            ..BlockConfig::new(2)
        };
        let (out, _) = block_forward(&x, &w, &random(&[5, 1], 1.0, &mut rng).map(f64::abs), &cfg).unwrap();
        assert!(out.max_abs_diff(&reference_transformer_block(&x, &w, 2)) < 1e-12);
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        let r = block_grad_check(8, 5, 8, 2, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn block_backward_constant_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = scaled_weights(8, 2, 0.4, &mut rng);
        let x = random(&[4, 8], 1.0, &mut rng);
        let up = BlockUpstream {
            tokens: Tensor::zeros([4, 8]),
            mask: None,
            pooled: None,
        };
        let g = block_backward(&x, &w, &Tensor::ones([4, 1]), &BlockConfig::new(2), &up).unwrap();
        assert!(g.tokens.data().iter().all(|&v| v == 0.0));
        assert!(g.message.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.fields().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn message_gradient_flows_through_gate_and_reversal() {
        // Central differences on M_prev alone, loss only through the mask
        // (A_R scaling) or only through the pooled output (gate product).
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = scaled_weights(8, 2, 0.4, &mut rng);
        let x = random(&[4, 8], 1.0, &mut rng);
        let m_prev = Tensor::from_f64([4, 1], &[0.9, 0.4, 0.7, 0.2]).unwrap();
        let cfg = BlockConfig::new(2);
        for (mask, pooled) in [(true, false), (false, true)] {
            let up = BlockUpstream {
                tokens: Tensor::zeros([4, 8]),
                mask: mask.then(|| random(&[4, 4], 1.0, &mut rng)),
                pooled: pooled.then(|| random(&[1, 8], 1.0, &mut rng)),
            };
            let g = block_backward(&x, &w, &m_prev, &cfg, &up).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                let eval = |delta: f64| {
                    let mut m = m_prev.clone();
                    m.data_mut()[i] += delta;
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone());
                    let mv = tape.constant(m);
                    let wv = w.to_tape(&mut tape, false);
                    let (out, st) = block_on_tape(&mut tape, xv, &wv, mv, &cfg).unwrap();
                    let l = upstream_loss(&mut tape, out, &st, &up).unwrap();
                    tape.value(l).data()[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = g.message.data()[i];
                assert!(analytic.abs() > 1e-6);
                assert!((numeric - analytic).abs() <= 1e-5 * analytic.abs().max(1.0), "{i}: {numeric} vs {analytic}");
            }
        }
    }

    fn state_for(seed: u64, n: usize, heads: usize, m_prev: &Tensor<f64>) -> AttentionState<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = scaled_weights(8, heads, 0.6, &mut rng);
        let x = random(&[n, 8], 2.0, &mut rng);
        block_forward(&x, &w, m_prev, &BlockConfig::new(heads)).unwrap().1
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn mask_columns_are_stochastic_without_gating(seed in any::<u64>(), n in 1usize..7) {
            let st = state_for(seed, n, 1, &Tensor::ones([n, 1]));
            // With H=1 P is identically 1; force M≡1 by recomposing.
            let (_, am) = reverse_compose(&st.forward, &st.selector, &Tensor::ones([n, 1])).unwrap();
            let sums = am.sum_axis(0).unwrap();
            for &s in sums.data() {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn mask_bounded_by_gate(seed in any::<u64>(), n in 1usize..7, heads in prop::sample::select(vec![1usize, 2, 4])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let m_prev = random(&[n, 1], 0.5, &mut rng).map(|v| v + 0.5);
            let st = state_for(seed, n, heads, &m_prev);
            for j in 0..n {
                for i in 0..n {
                    prop_assert!(st.mask.get2(j, i) >= 0.0);
                    prop_assert!(st.mask.get2(j, i) <= st.message.data()[i] + 1e-6);
                }
            }
            for i in 0..n {
                prop_assert!(st.message.data()[i] <= m_prev.data()[i]);
                prop_assert!((0.0..=1.0).contains(&st.gate.data()[i]));
                let row: f64 = st.selector.row(i).iter().sum();
                prop_assert!((row - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn block_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = scaled_weights(8, 2, 0.6, &mut rng);
            let x = random(&[n, 8], 2.0, &mut rng);
            let m_prev = random(&[n, 1], 0.5, &mut rng).map(|v| v + 0.5);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let cfg = BlockConfig::new(2);
            let (out, st) = block_forward(&x, &w, &m_prev, &cfg).unwrap();
            let (pout, pst) = block_forward(
                &x.select_rows(&perm).unwrap(),
                &w,
                &m_prev.select_rows(&perm).unwrap(),
                &cfg,
            ).unwrap();
            prop_assert!(pout.max_abs_diff(&out.select_rows(&perm).unwrap()) < 1e-10);
            for a in 0..n {
                for b in 0..n {
                    prop_assert!((pst.mask.get2(a, b) - st.mask.get2(perm[a], perm[b])).abs() < 1e-10);
                }
            }
        }
    }
}
