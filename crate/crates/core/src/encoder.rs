//! Toy-scale encoder: embeddings, stacked mixer/FFN sublayers with post
//! layer norm, and a classification head. 64-bit only.

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::affine::Affine;
use crate::cost::{OpCounter, Path};
use crate::error::{Error, Result};
use crate::grad::{accumulate, backward_block, ParamSet};
use crate::mixer::{forward as mixer_forward, Diagnostics, MixerConfig, MixerTape, ProjectionSet};
use crate::segment::SegmentMap;
use crate::tensor::{SeededRng, Tensor};

pub const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    ClsToken,
    MaxPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d: usize,
    pub layers: usize,
    /// Defaults to `4 * d`.
    #[serde(default)]
    pub ffn_hidden: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// Per-layer template; `d` must match and `layer_index` is overwritten.
    pub mixer: MixerConfig,
    #[serde(default = "default_head")]
    pub head: Head,
    pub num_classes: usize,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_head() -> Head {
    Head::MaxPool
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, max_len: usize, d: usize, layers: usize, num_classes: usize) -> Self {
        EncoderConfig {
            vocab_size,
            max_len,
            d,
            layers,
            ffn_hidden: None,
            dropout_rate: default_dropout(),
            mixer: MixerConfig::new(d, 1),
            head: default_head(),
            num_classes,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d)
    }

    pub fn layer_mixer(&self, layer: usize) -> MixerConfig {
        MixerConfig { layer_index: layer + 1, ..self.mixer.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.d == 0 || self.ffn_dim() == 0 {
            return Err(Error::config("vocab_size, max_len, d and ffn_hidden must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.mixer.d != self.d {
            return Err(Error::config(format!("mixer d {} differs from encoder d {}", self.mixer.d, self.d)));
        }
        self.mixer.validate()
    }
}

/// Per-dimension gain and bias of a layer norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm { gain: Tensor::full(&[d], 1.0), bias: Tensor::zeros(&[d]) }
    }
}

/// Row-wise statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalises each row to zero mean and unit variance, then applies
/// gain and bias. A constant row maps to the bias.
pub fn layer_norm(x: &Tensor, ln: &LayerNorm) -> Result<(Tensor, LnCache)> {
    let (n, d) = x.dims2()?;
    if ln.gain.shape() != [d] {
        return Err(Error::shape(format!("layer norm width {:?} for rows of {d}", ln.gain.shape())));
    }
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut y = Tensor::zeros(&[n, d]);
    let mut inv_std = Vec::with_capacity(n);
    for t in 0..n {
        let row = x.row(t);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let z = (row[j] - mean) * inv;
            xhat.row_mut(t)[j] = z;
            y.row_mut(t)[j] = z * ln.gain.data()[j] + ln.bias.data()[j];
        }
    }
    Ok((y.check_finite("layer norm")?, LnCache { xhat, inv_std }))
}

fn layer_norm_backward(dy: &Tensor, cache: &LnCache, ln: &LayerNorm, grad: &mut LayerNorm) -> Tensor {
    let (n, d) = dy.dims2().expect("rank 2");
    let mut dx = Tensor::zeros(&[n, d]);
    for t in 0..n {
        let (dyr, xh) = (dy.row(t), cache.xhat.row(t));
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            grad.gain.data_mut()[j] += dyr[j] * xh[j];
            grad.bias.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * ln.gain.data()[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_x = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx.row_mut(t)[j] = cache.inv_std[t] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_x);
        }
    }
    dx
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub mixer: ProjectionSet,
    pub ln1: LayerNorm,
    pub ffn_in: Affine,
    pub ffn_out: Affine,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub head: Affine,
}

/// Standard deviation of token and position embeddings at init.
pub const EMBEDDING_STD: f64 = 0.02;

impl EncoderParams {
    /// Small embeddings (std [`EMBEDDING_STD`]), fan-in scaled projections,
    /// and a near-zero head so initial logits are close to uniform.
    pub fn init(cfg: &EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let f = cfg.ffn_dim();
        let std_d = 1.0 / (d as f64).sqrt();
        let token_emb = Tensor::random_normal(&[cfg.vocab_size, d], EMBEDDING_STD, rng);
        let pos_emb = Tensor::random_normal(&[cfg.max_len, d], EMBEDDING_STD, rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                mixer: ProjectionSet::random(d, cfg.mixer.share_kv, std_d, rng),
                ln1: LayerNorm::new(d),
                ffn_in: Affine::random(d, f, std_d, rng),
                ffn_out: Affine::random(f, d, 1.0 / (f as f64).sqrt(), rng),
                ln2: LayerNorm::new(d),
            })
            .collect();
        let head = Affine::random(d, cfg.num_classes, 0.01, rng);
        Ok(EncoderParams { token_emb, pos_emb, layers, head })
    }

    /// Same layout, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(0.0));
        z
    }

    /// Checks every shape against `cfg`.
    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let (d, f) = (cfg.d, cfg.ffn_dim());
        let expect = |name: &str, t: &Tensor, shape: &[usize]| {
            if t.shape() != shape {
                Err(Error::shape(format!("{name}: {:?}, expected {shape:?}", t.shape())))
            } else {
                Ok(())
            }
        };
        expect("token_emb", &self.token_emb, &[cfg.vocab_size, d])?;
        expect("pos_emb", &self.pos_emb, &[cfg.max_len, d])?;
        if self.layers.len() != cfg.layers {
            return Err(Error::shape(format!("{} layers, config says {}", self.layers.len(), cfg.layers)));
        }
        for l in &self.layers {
            if l.mixer.dim() != d || l.mixer.shares_kv() != cfg.mixer.share_kv {
                return Err(Error::shape("mixer projections do not match config"));
            }
            expect("ffn_in.weight", &l.ffn_in.weight, &[d, f])?;
            expect("ffn_out.weight", &l.ffn_out.weight, &[f, d])?;
            expect("ln1.gain", &l.ln1.gain, &[d])?;
            expect("ln2.gain", &l.ln2.gain, &[d])?;
        }
        expect("head.weight", &self.head.weight, &[d, cfg.num_classes])
    }
}

impl ParamSet for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("token_emb", &self.token_emb);
        f("pos_emb", &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            l.mixer.visit(&mut |name, t| f(&format!("layers.{i}.mixer.{name}"), t));
            f(&format!("layers.{i}.ln1.gain"), &l.ln1.gain);
            f(&format!("layers.{i}.ln1.bias"), &l.ln1.bias);
            f(&format!("layers.{i}.ffn_in.weight"), &l.ffn_in.weight);
            f(&format!("layers.{i}.ffn_in.bias"), &l.ffn_in.bias);
            f(&format!("layers.{i}.ffn_out.weight"), &l.ffn_out.weight);
            f(&format!("layers.{i}.ffn_out.bias"), &l.ffn_out.bias);
            f(&format!("layers.{i}.ln2.gain"), &l.ln2.gain);
            f(&format!("layers.{i}.ln2.bias"), &l.ln2.bias);
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("token_emb", &mut self.token_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.mixer.visit_mut(&mut |name, t| f(&format!("layers.{i}.mixer.{name}"), t));
            f(&format!("layers.{i}.ln1.gain"), &mut l.ln1.gain);
            f(&format!("layers.{i}.ln1.bias"), &mut l.ln1.bias);
            f(&format!("layers.{i}.ffn_in.weight"), &mut l.ffn_in.weight);
            f(&format!("layers.{i}.ffn_in.bias"), &mut l.ffn_in.bias);
            f(&format!("layers.{i}.ffn_out.weight"), &mut l.ffn_out.weight);
            f(&format!("layers.{i}.ffn_out.bias"), &mut l.ffn_out.bias);
            f(&format!("layers.{i}.ln2.gain"), &mut l.ln2.gain);
            f(&format!("layers.{i}.ln2.bias"), &mut l.ln2.bias);
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }
}

/// Forward record of one encoder layer.
#[derive(Clone, Debug)]
pub struct LayerTape {
    pub mix: MixerTape,
    /// Inverted-dropout multipliers (absent in eval mode).
    pub mask1: Option<Vec<f64>>,
    pub ln1: LnCache,
    pub h1: Tensor,
    pub ffn_pre: Tensor,
    pub ffn_act: Tensor,
    pub mask2: Option<Vec<f64>>,
    pub ln2: LnCache,
}

#[derive(Clone, Debug)]
pub struct EncoderTape {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTape>,
    pub output: Tensor,
}

impl EncoderTape {
    pub fn diagnostics(&self) -> Vec<Diagnostics> {
        self.layers.iter().map(|l| l.mix.diagnostics()).collect()
    }

    /// Argmax winners of every max-pool in the stack.
    pub fn max_winners(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| l.mix.max_winners()).collect()
    }
}

fn dropout_mask(len: usize, rate: f64, rng: &mut SeededRng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len).map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 }).collect()
}

fn apply_mask(x: &mut Tensor, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.data_mut().iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
}

fn embed(tokens: &[u32], params: &EncoderParams, cfg: &EncoderConfig) -> Result<Tensor> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if n > cfg.max_len {
        return Err(Error::Input(format!("sequence length {n} exceeds max_len {}", cfg.max_len)));
    }
    let d = cfg.d;
    let mut h = Tensor::zeros(&[n, d]);
    for (t, &tok) in tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::Input(format!("token id {tok} outside vocabulary of {}", cfg.vocab_size)));
        }
        let row = h.row_mut(t);
        for ((o, &e), &p) in row.iter_mut().zip(params.token_emb.row(tok as usize)).zip(params.pos_emb.row(t)) {
            *o = e + p;
        }
    }
    Ok(h)
}

/// Runs the encoder. `dropout` supplies the mask RNG in training mode;
/// `None` is eval mode.
pub fn forward(
    tokens: &[u32],
    seg: &SegmentMap,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    mut dropout: Option<&mut SeededRng>,
) -> Result<EncoderTape> {
    cfg.validate()?;
    params.check(cfg)?;
    let mut h = embed(tokens, params, cfg)?;
    let mut ops = OpCounter::new();
    let mut layers = Vec::with_capacity(cfg.layers);
    for (i, lp) in params.layers.iter().enumerate() {
        let mcfg = cfg.layer_mixer(i);
        let mix = mixer_forward(&h, &lp.mixer, seg, &mcfg, Path::Fused, &mut ops)?;
        let n_el = h.len();
        let mask_for = |rng: &mut Option<&mut SeededRng>| match rng {
            Some(r) if cfg.dropout_rate > 0.0 => Some(dropout_mask(n_el, cfg.dropout_rate, r)),
            _ => None,
        };
        let mask1 = mask_for(&mut dropout);
        let mut sum = mix.output.clone();
        apply_mask(&mut sum, &mask1);
        sum.add_assign(&h)?;
        let (h1, ln1) = layer_norm(&sum, &lp.ln1)?;

        let ffn_pre = lp.ffn_in.apply(&h1, &mut ops)?;
        let ffn_act = ffn_pre.map(gelu);
        let mut ffn_out = lp.ffn_out.apply(&ffn_act, &mut ops)?;
        let mask2 = mask_for(&mut dropout);
        apply_mask(&mut ffn_out, &mask2);
        ffn_out.add_assign(&h1)?;
        let (h2, ln2) = layer_norm(&ffn_out, &lp.ln2)?;
        layers.push(LayerTape { mix, mask1, ln1, h1, ffn_pre, ffn_act, mask2, ln2 });
        h = h2;
    }
    Ok(EncoderTape { tokens: tokens.to_vec(), layers, output: h })
}

/// Eval-mode encoding.
pub fn encode(tokens: &[u32], seg: &SegmentMap, params: &EncoderParams, cfg: &EncoderConfig) -> Result<Tensor> {
    Ok(forward(tokens, seg, params, cfg, None)?.output)
}

/// Pooled head input plus, for max pooling, the winning row per column.
#[derive(Clone, Debug)]
pub struct HeadTape {
    pub pooled: Tensor,
    pub argmax: Vec<usize>,
    pub logits: Tensor,
}

pub fn classify_tape(encoded: &Tensor, head: Head, weights: &Affine) -> Result<HeadTape> {
    let (n, d) = encoded.dims2()?;
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let (pooled, argmax) = match head {
        Head::ClsToken => (encoded.row(0).to_vec(), vec![0; d]),
        Head::MaxPool => {
            let mut v = encoded.row(0).to_vec();
            let mut idx = vec![0; d];
            for t in 1..n {
                for (j, &x) in encoded.row(t).iter().enumerate() {
                    if x > v[j] {
                        v[j] = x;
                        idx[j] = t;
                    }
                }
            }
            (v, idx)
        }
    };
    let pooled = Tensor::new(&[1, d], pooled)?;
    let logits = weights.apply(&pooled, &mut OpCounter::new())?.reshape(&[weights.outputs()])?;
    Ok(HeadTape { pooled, argmax, logits })
}

pub fn classify(encoded: &Tensor, head: Head, weights: &Affine) -> Result<Tensor> {
    Ok(classify_tape(encoded, head, weights)?.logits)
}

/// Cross-entropy of `logits` against `label`, with its gradient.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let c = logits.len();
    if label >= c {
        return Err(Error::Index { index: label, len: c });
    }
    let z = logits.data();
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - mx).exp()).sum();
    let log_z = mx + sum.ln();
    let grad: Vec<f64> = z.iter().map(|v| (v - log_z).exp()).collect();
    let mut grad = Tensor::vector(grad);
    grad.data_mut()[label] -= 1.0;
    Ok((log_z - z[label], grad))
}

/// Loss, logits and parameter gradients for one labelled sequence.
pub struct Example<'a> {
    pub tokens: &'a [u32],
    pub seg: &'a SegmentMap,
    pub label: usize,
}

pub struct LossGrad {
    pub loss: f64,
    pub logits: Tensor,
    /// Argmax winners of every max-pool including the head.
    pub regime: Vec<usize>,
}

/// Forward + backward for one example, accumulating into `grads`.
pub fn loss_and_grad(
    ex: &Example,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    dropout: Option<&mut SeededRng>,
    grads: &mut EncoderParams,
) -> Result<LossGrad> {
    let tape = forward(ex.tokens, ex.seg, params, cfg, dropout)?;
    let head = classify_tape(&tape.output, cfg.head, &params.head)?;
    let (loss, dlogits) = cross_entropy(&head.logits, ex.label)?;
    let (n, d) = tape.output.dims2()?;

    let d_pooled = params.head.backward(&head.pooled, &dlogits.clone().reshape(&[1, cfg.num_classes])?, &mut grads.head)?;
    let mut dh = Tensor::zeros(&[n, d]);
    for j in 0..d {
        dh.row_mut(head.argmax[j])[j] += d_pooled.data()[j];
    }
    for (i, (lt, lp)) in tape.layers.iter().zip(&params.layers).enumerate().rev() {
        let lg = &mut grads.layers[i];
        let dsum2 = layer_norm_backward(&dh, &lt.ln2, &lp.ln2, &mut lg.ln2);
        let mut d_ffn_out = dsum2.clone();
        apply_mask(&mut d_ffn_out, &lt.mask2);
        let d_act = lp.ffn_out.backward(&lt.ffn_act, &d_ffn_out, &mut lg.ffn_out)?;
        let d_pre = Tensor::new(
            d_act.shape(),
            d_act.data().iter().zip(lt.ffn_pre.data()).map(|(g, &x)| g * gelu_grad(x)).collect(),
        )?;
        let mut dh1 = lp.ffn_in.backward(&lt.h1, &d_pre, &mut lg.ffn_in)?;
        dh1.add_assign(&dsum2)?;
        let dsum1 = layer_norm_backward(&dh1, &lt.ln1, &lp.ln1, &mut lg.ln1);
        let mut d_mix = dsum1.clone();
        apply_mask(&mut d_mix, &lt.mask1);
        let block = backward_block(&lt.mix, &lp.mixer, &d_mix)?;
        accumulate(&mut lg.mixer, &block.params);
        dh = dsum1;
        dh.add_assign(&block.input)?;
    }
    for (t, &tok) in ex.tokens.iter().enumerate() {
        let src = dh.row(t);
        for (g, &v) in grads.token_emb.row_mut(tok as usize).iter_mut().zip(src) {
            *g += v;
        }
        for (g, &v) in grads.pos_emb.row_mut(t).iter_mut().zip(src) {
            *g += v;
        }
    }
    let mut regime = tape.max_winners();
    if cfg.head == Head::MaxPool {
        regime.extend_from_slice(&head.argmax);
    }
    Ok(LossGrad { loss, logits: head.logits, regime })
}

/// Eval-mode loss only (used by finite differences).
pub fn loss(ex: &Example, params: &EncoderParams, cfg: &EncoderConfig) -> Result<(f64, Vec<usize>)> {
    let tape = forward(ex.tokens, ex.seg, params, cfg, None)?;
    let head = classify_tape(&tape.output, cfg.head, &params.head)?;
    let (l, _) = cross_entropy(&head.logits, ex.label)?;
    let mut regime = tape.max_winners();
    if cfg.head == Head::MaxPool {
        regime.extend_from_slice(&head.argmax);
    }
    Ok((l, regime))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Ga,
    Smp,
    Lmp,
    Mean,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Ga => "GA",
            Branch::Smp => "SMP",
            Branch::Lmp => "LMP",
            Branch::Mean => "mean",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    /// 1-based.
    pub layer: usize,
    pub branch: Branch,
    pub value: f64,
}

/// Mean over tokens and heads of the per-head RMS of `x` (`N × d`).
pub fn branch_norm(x: &Tensor, heads: usize) -> Result<f64> {
    let (n, d) = x.dims2()?;
    if heads == 0 || d % heads != 0 || n == 0 {
        return Err(Error::shape(format!("cannot split {n}x{d} into {heads} heads")));
    }
    let dh = d / heads;
    let mut total = 0.0;
    for t in 0..n {
        for chunk in x.row(t).chunks_exact(dh) {
            total += (chunk.iter().map(|v| v * v).sum::<f64>() / dh as f64).sqrt();
        }
    }
    Ok(total / (n * heads) as f64)
}

/// Per-layer L2 statistics of the three pooling branches over a set of
/// examples, plus their average. `runs[e][l]` holds the diagnostics of
/// layer `l` for example `e`; a missing entry is a state error.
pub fn pooling_norms(runs: &[Option<Vec<Diagnostics>>], heads: usize) -> Result<Vec<NormRow>> {
    let missing = || Error::State("pooling norms need forward diagnostics".into());
    let first = runs.first().ok_or_else(missing)?.as_ref().ok_or_else(missing)?;
    let layers = first.len();
    if layers == 0 {
        return Err(missing());
    }
    let mut sums = vec![[0.0; 3]; layers];
    for run in runs {
        let run = run.as_ref().ok_or_else(missing)?;
        if run.len() != layers {
            return Err(Error::State("examples disagree on layer count".into()));
        }
        for (l, diag) in run.iter().enumerate() {
            sums[l][0] += branch_norm(&diag.global_term, heads)?;
            sums[l][1] += branch_norm(&diag.segment_term, heads)?;
            sums[l][2] += branch_norm(&diag.local_term, heads)?;
        }
    }
    let count = runs.len() as f64;
    let mut rows = Vec::with_capacity(layers * 4);
    for (l, s) in sums.iter().enumerate() {
        let means = s.map(|v| v / count);
        for (b, v) in [Branch::Ga, Branch::Smp, Branch::Lmp].into_iter().zip(means) {
            rows.push(NormRow { layer: l + 1, branch: b, value: v });
        }
        rows.push(NormRow { layer: l + 1, branch: Branch::Mean, value: means.iter().sum::<f64>() / 3.0 });
    }
    Ok(rows)
}

pub const CHECKPOINT_FORMAT: &str = "ponet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk JSON layout of a parameter checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(cfg: &EncoderConfig, params: &EncoderParams) -> Self {
        let mut tensors = Vec::new();
        params.visit(&mut |name, t| {
            tensors.push(NamedTensor { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            tensors,
        }
    }

    pub fn into_params(self) -> Result<(EncoderConfig, EncoderParams)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        let cfg = self.config;
        let mut params = EncoderParams::init(&cfg, &mut SeededRng::new(0))?;
        let mut by_name: std::collections::HashMap<String, NamedTensor> =
            self.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut err = None;
        params.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match by_name.remove(name) {
                Some(nt) if nt.shape == t.shape() && nt.data.len() == t.len() => {
                    t.data_mut().copy_from_slice(&nt.data);
                }
                Some(nt) => err = Some(Error::shape(format!("{name}: stored {:?}, expected {:?}", nt.shape, t.shape()))),
                None => err = Some(Error::Input(format!("checkpoint lacks tensor {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Input(format!("unexpected tensor {extra} in checkpoint")));
        }
        let mut finite = true;
        params.visit(&mut |_, t| finite &= t.is_finite());
        if !finite {
            return Err(Error::NonFinite("checkpoint tensor"));
        }
        Ok((cfg, params))
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests;
