//! The multi-granularity pooling token mixer.
//!
//! Six affine projections feed three poolings: global aggregation (sequence
//! mean used as a single query for cross-attention over the sequence),
//! segment max-pooling and local sliding max-pooling. Fusion multiplies the
//! global and segment vectors into a per-token projection and adds the local
//! term.
//!
//! Two execution orders compute the same function. [`Path::Naive`] projects
//! every row first and fuses with two Hadamard products; [`Path::Fused`] pools
//! before projecting the query and adds the global and segment vectors before
//! a single Hadamard product.

mod pool;

use serde::{Deserialize, Serialize};

pub use self::pool::{lmp, smp, tmp, tmp_dilation, tmp_reach, Pooled};
use crate::affine::Affine;
pub use crate::cost::Path;
use crate::cost::OpCounter;
use crate::error::{Error, Result};
use crate::segment::SegmentMap;
use crate::tensor::{reduce_mean, softmax, Real, SeededRng, Tensor};

/// Ablation variants: which branches contribute to the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Global branch uses the sequence mean directly, no cross-attention.
    NoSsGa,
    NoGa,
    NoSmp,
    NoLmp,
    /// Global branch only (no segment or local pooling).
    GaOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::NoSsGa, Variant::NoGa, Variant::NoSmp, Variant::NoLmp, Variant::GaOnly];

    pub fn uses_ga(self) -> bool {
        self != Variant::NoGa
    }

    pub fn uses_cross_attention(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSmp | Variant::NoLmp | Variant::GaOnly)
    }

    pub fn uses_smp(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSsGa | Variant::NoGa | Variant::NoLmp)
    }

    pub fn uses_lmp(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSsGa | Variant::NoGa | Variant::NoSmp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSsGa => "no_ss_ga",
            Variant::NoGa => "no_ga",
            Variant::NoSmp => "no_smp",
            Variant::NoLmp => "no_lmp",
            Variant::GaOnly => "ga_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    pub d: usize,
    pub heads: usize,
    pub lmp_window: usize,
    pub lmp_stride: usize,
    pub share_kv: bool,
    pub variant: Variant,
    pub tmp_enabled: bool,
    /// 1-based position of the layer in the stack (sets the tree pooling dilation).
    pub layer_index: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            d: 64,
            heads: 1,
            lmp_window: 3,
            lmp_stride: 1,
            share_kv: true,
            variant: Variant::Full,
            tmp_enabled: false,
            layer_index: 1,
        }
    }
}

impl MixerConfig {
    pub fn new(d: usize, heads: usize) -> Self {
        MixerConfig { d, heads, ..Default::default() }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!("d={} must be a positive multiple of heads={}", self.d, self.heads)));
        }
        if self.lmp_window % 2 == 0 {
            return Err(Error::config(format!("lmp_window must be odd, got {}", self.lmp_window)));
        }
        if self.lmp_stride != 1 {
            return Err(Error::config(format!("lmp_stride must be 1, got {}", self.lmp_stride)));
        }
        if self.layer_index == 0 {
            return Err(Error::config("layer_index is 1-based"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `1/sqrt(d/heads)`.
    pub fn attention_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// The six projections. With shared key/value the value projection is the
/// key projection itself, so an update to one is an update to both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct ProjectionSet<T = f64> {
    pub query: Affine<T>,
    pub key: Affine<T>,
    /// `None` when shared with `key`.
    pub value: Option<Affine<T>>,
    pub segment: Affine<T>,
    pub local: Affine<T>,
    pub output: Affine<T>,
}

impl<T: Real> ProjectionSet<T> {
    pub fn random(d: usize, share_kv: bool, std: f64, rng: &mut SeededRng) -> Self {
        let mut next = || Affine::random(d, d, std, rng);
        let query = next();
        let key = next();
        let value = if share_kv { None } else { Some(next()) };
        ProjectionSet { query, key, value, segment: next(), local: next(), output: next() }
    }

    /// Random weights and small random biases, for tests that need every
    /// parameter to matter.
    pub fn random_with_bias(d: usize, share_kv: bool, std: f64, rng: &mut SeededRng) -> Self {
        let mut p = Self::random(d, share_kv, std, rng);
        p.for_each_mut(|_, a| a.bias = Tensor::random_normal(&[d], 0.1, rng));
        p
    }

    pub fn identity(d: usize, share_kv: bool) -> Self {
        let i = Affine::identity(d);
        ProjectionSet {
            query: i.clone(),
            key: i.clone(),
            value: if share_kv { None } else { Some(i.clone()) },
            segment: i.clone(),
            local: i.clone(),
            output: i,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.query.inputs();
        let z = Affine::zeros(d, d);
        ProjectionSet {
            query: z.clone(),
            key: z.clone(),
            value: self.value.as_ref().map(|_| z.clone()),
            segment: z.clone(),
            local: z.clone(),
            output: z,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.inputs()
    }

    pub fn shares_kv(&self) -> bool {
        self.value.is_none()
    }

    pub fn value_proj(&self) -> &Affine<T> {
        self.value.as_ref().unwrap_or(&self.key)
    }

    /// Visits each distinct projection with its name.
    pub fn for_each(&self, mut f: impl FnMut(&'static str, &Affine<T>)) {
        f("query", &self.query);
        f("key", &self.key);
        if let Some(v) = &self.value {
            f("value", v);
        }
        f("segment", &self.segment);
        f("local", &self.local);
        f("output", &self.output);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&'static str, &mut Affine<T>)) {
        f("query", &mut self.query);
        f("key", &mut self.key);
        if let Some(v) = &mut self.value {
            f("value", v);
        }
        f("segment", &mut self.segment);
        f("local", &mut self.local);
        f("output", &mut self.output);
    }

    pub fn cast<U: Real>(&self) -> ProjectionSet<U> {
        ProjectionSet {
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.as_ref().map(Affine::cast),
            segment: self.segment.cast(),
            local: self.local.cast(),
            output: self.output.cast(),
        }
    }

    fn check(&self, d: usize, cfg: &MixerConfig) -> Result<()> {
        let mut bad = None;
        self.for_each(|name, a| {
            if a.weight.shape() != [d, d] || a.bias.shape() != [d] {
                bad.get_or_insert(name);
            }
        });
        if let Some(name) = bad {
            return Err(Error::shape(format!("projection `{name}` is not {d}x{d}")));
        }
        if self.shares_kv() != cfg.share_kv {
            return Err(Error::config("share_kv flag disagrees with the projection set"));
        }
        Ok(())
    }
}

/// All six projected sequences, `H_* = H W_* + b_*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections<T> {
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
    pub segment: Tensor<T>,
    pub local: Tensor<T>,
    pub output: Tensor<T>,
}

pub fn project_all<T: Real>(h: &Tensor<T>, params: &ProjectionSet<T>, ops: &mut OpCounter) -> Result<Projections<T>> {
    if !h.is_finite() {
        return Err(Error::NonFinite("mixer input"));
    }
    Ok(Projections {
        query: params.query.apply(h, ops)?,
        key: params.key.apply(h, ops)?,
        value: params.value_proj().apply(h, ops)?,
        segment: params.segment.apply(h, ops)?,
        local: params.local.apply(h, ops)?,
        output: params.output.apply(h, ops)?,
    })
}

/// First stage of global aggregation: column mean of the query projection.
pub fn ga_first_stage<T: Real>(h_q: &Tensor<T>) -> Result<Tensor<T>> {
    h_q.dims2()?;
    reduce_mean(h_q, 0)
}

/// Second stage: `g` attends over the sequence, one softmax per head.
/// Returns `g'` and the `heads × N` attention weights.
pub fn ga_second_stage<T: Real>(
    g: &Tensor<T>,
    key: &Tensor<T>,
    value: &Tensor<T>,
    cfg: &MixerConfig,
    ops: &mut OpCounter,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, d) = key.dims2()?;
    if value.shape() != key.shape() || g.shape() != [d] || d != cfg.d {
        return Err(Error::shape(format!(
            "g {:?}, keys {:?}, values {:?}, d={}",
            g.shape(),
            key.shape(),
            value.shape(),
            cfg.d
        )));
    }
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = T::lit(cfg.attention_scale());
    let gv = g.data();
    let mut scores = Tensor::zeros(&[heads, n]);
    for t in 0..n {
        let k_row = key.row(t);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let dot: T = gv[cols.clone()].iter().zip(&k_row[cols]).map(|(&a, &b)| a * b).sum();
            scores.data_mut()[h * n + t] = dot * scale;
        }
    }
    ops.record(n * d);
    let weights = softmax(&scores, 1).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite("attention scores"),
        other => other,
    })?;
    let mut out = vec![T::zero(); d];
    for t in 0..n {
        let v_row = value.row(t);
        for h in 0..heads {
            let w = weights.data()[h * n + t];
            for j in h * dh..(h + 1) * dh {
                out[j] += w * v_row[j];
            }
        }
    }
    ops.record(n * d);
    Ok((Tensor::vector(out).check_finite("cross-attention")?, weights))
}

/// `P[n] = g' ⊙ H_o[n] + S[k(n)] ⊙ H_o[n] + L[n]`; absent branches are
/// skipped.
pub fn fuse_naive<T: Real>(
    global: Option<&Tensor<T>>,
    seg_max: Option<&Tensor<T>>,
    local: Option<&Tensor<T>>,
    h_o: &Tensor<T>,
    seg: &SegmentMap,
    ops: &mut OpCounter,
) -> Result<Tensor<T>> {
    let (n, d) = h_o.dims2()?;
    if seg.len() != n {
        return Err(Error::shape("segment map length differs from sequence"));
    }
    if global.is_some_and(|g| g.shape() != [d])
        || seg_max.is_some_and(|s| s.shape() != [seg.num_segments(), d])
        || local.is_some_and(|l| l.shape() != [n, d])
    {
        return Err(Error::shape("fusion operand shapes disagree"));
    }
    let mut p = Tensor::zeros(&[n, d]);
    if let Some(g) = global {
        for t in 0..n {
            for ((o, &x), &gv) in p.row_mut(t).iter_mut().zip(h_o.row(t)).zip(g.data()) {
                *o += gv * x;
            }
        }
        ops.record(n * d);
    }
    if let Some(s) = seg_max {
        for t in 0..n {
            let srow = s.row(seg.segment_of(t));
            for ((o, &x), &sv) in p.row_mut(t).iter_mut().zip(h_o.row(t)).zip(srow) {
                *o += sv * x;
            }
        }
        ops.record(n * d);
    }
    if let Some(l) = local {
        p.add_assign(l)?;
    }
    p.check_finite("fusion")
}

/// Everything a forward pass computed, kept for diagnostics and backward.
#[derive(Clone, Debug)]
pub struct MixerTape<T = f64> {
    pub path: Path,
    pub config: MixerConfig,
    pub segments: SegmentMap,
    pub input: Tensor<T>,
    /// Column mean of the input (fused path only).
    pub input_mean: Option<Tensor<T>>,
    /// Query projection of every row (naive path only).
    pub query: Option<Tensor<T>>,
    pub g: Option<Tensor<T>>,
    pub key: Option<Tensor<T>>,
    pub value: Option<Tensor<T>>,
    pub attention: Option<Tensor<T>>,
    pub g_prime: Option<Tensor<T>>,
    pub segment_proj: Option<Tensor<T>>,
    pub seg_max: Option<Pooled<T>>,
    pub local_proj: Option<Tensor<T>>,
    pub local_max: Option<Pooled<T>>,
    pub tree_max: Option<Pooled<T>>,
    pub out_proj: Option<Tensor<T>>,
    pub output: Tensor<T>,
}

/// Per-branch tensors of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics<T = f64> {
    pub g: Option<Tensor<T>>,
    pub g_prime: Option<Tensor<T>>,
    pub seg_max: Option<Tensor<T>>,
    pub local: Option<Tensor<T>>,
    pub tree: Option<Tensor<T>>,
    /// GA contribution per token, `N × d` (zeros when the branch is off).
    pub global_term: Tensor<T>,
    /// SMP contribution per token, `N × d`.
    pub segment_term: Tensor<T>,
    /// LMP contribution per token, `N × d`.
    pub local_term: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerOutput<T = f64> {
    pub p: Tensor<T>,
    pub diagnostics: Option<Diagnostics<T>>,
}

impl<T: Real> MixerTape<T> {
    /// Global vector that enters fusion: `g'`, or `g` for the no-SS-GA variant.
    pub fn fusion_global(&self) -> Option<&Tensor<T>> {
        if !self.config.variant.uses_ga() {
            None
        } else if self.config.variant.uses_cross_attention() {
            self.g_prime.as_ref()
        } else {
            self.g.as_ref()
        }
    }

    pub fn diagnostics(&self) -> Diagnostics<T> {
        let (n, d) = self.output.dims2().expect("rank-2 output");
        let mut global_term = Tensor::zeros(&[n, d]);
        let mut segment_term = Tensor::zeros(&[n, d]);
        if let Some(h_o) = &self.out_proj {
            if let Some(g) = self.fusion_global() {
                for t in 0..n {
                    for ((o, &x), &gv) in global_term.row_mut(t).iter_mut().zip(h_o.row(t)).zip(g.data()) {
                        *o = gv * x;
                    }
                }
            }
            if let Some(s) = &self.seg_max {
                for t in 0..n {
                    let srow = s.values.row(self.segments.segment_of(t));
                    for ((o, &x), &sv) in segment_term.row_mut(t).iter_mut().zip(h_o.row(t)).zip(srow) {
                        *o = sv * x;
                    }
                }
            }
        }
        let local_term = self.local_max.as_ref().map_or_else(|| Tensor::zeros(&[n, d]), |l| l.values.clone());
        Diagnostics {
            g: self.g.clone(),
            g_prime: self.g_prime.clone(),
            seg_max: self.seg_max.as_ref().map(|s| s.values.clone()),
            local: self.local_max.as_ref().map(|l| l.values.clone()),
            tree: self.tree_max.as_ref().map(|t| t.values.clone()),
            global_term,
            segment_term,
            local_term,
        }
    }

    pub fn into_output(self, with_diagnostics: bool) -> MixerOutput<T> {
        let diagnostics = with_diagnostics.then(|| self.diagnostics());
        MixerOutput { p: self.output, diagnostics }
    }

    /// Runs the forward again from the recorded input.
    pub fn replay(&self, params: &ProjectionSet<T>, ops: &mut OpCounter) -> Result<MixerTape<T>> {
        forward(&self.input, params, &self.segments, &self.config, self.path, ops)
    }

    /// Argmax winners of every max-pool, concatenated. Two forwards with the
    /// same winners are in the same differentiable region.
    pub fn max_winners(&self) -> Vec<usize> {
        [&self.seg_max, &self.local_max, &self.tree_max]
            .into_iter()
            .flatten()
            .flat_map(|p| p.argmax.iter().copied())
            .collect()
    }
}

/// Runs the mixer along `path`, recording intermediates.
pub fn forward<T: Real>(
    h: &Tensor<T>,
    params: &ProjectionSet<T>,
    seg: &SegmentMap,
    cfg: &MixerConfig,
    path: Path,
    ops: &mut OpCounter,
) -> Result<MixerTape<T>> {
    cfg.validate()?;
    let (n, d) = h.dims2()?;
    if d != cfg.d {
        return Err(Error::shape(format!("input width {d} but d={}", cfg.d)));
    }
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if seg.len() != n {
        return Err(Error::shape(format!("segment map covers {} tokens, input has {n}", seg.len())));
    }
    params.check(d, cfg)?;
    match path {
        Path::Naive => forward_naive(h, params, seg, cfg, ops),
        Path::Fused => forward_fused(h, params, seg, cfg, ops),
    }
}

fn forward_naive<T: Real>(
    h: &Tensor<T>,
    params: &ProjectionSet<T>,
    seg: &SegmentMap,
    cfg: &MixerConfig,
    ops: &mut OpCounter,
) -> Result<MixerTape<T>> {
    let v = cfg.variant;
    let proj = project_all(h, params, ops)?;
    let g = v.uses_ga().then(|| ga_first_stage(&proj.query)).transpose()?;
    let (g_prime, attention) = match &g {
        Some(g) if v.uses_cross_attention() => {
            let (gp, w) = ga_second_stage(g, &proj.key, &proj.value, cfg, ops)?;
            (Some(gp), Some(w))
        }
        _ => (None, None),
    };
    let seg_max = v.uses_smp().then(|| smp(&proj.segment, seg)).transpose()?;
    let local_max = v.uses_lmp().then(|| lmp(&proj.local, cfg.lmp_window, cfg.lmp_stride)).transpose()?;
    let tree_max = cfg.tmp_enabled.then(|| tmp(&proj.local, cfg.layer_index)).transpose()?;

    let global = if v.uses_cross_attention() { g_prime.as_ref() } else { g.as_ref() };
    let mut output = fuse_naive(
        global,
        seg_max.as_ref().map(|s| &s.values),
        local_max.as_ref().map(|l| &l.values),
        &proj.output,
        seg,
        ops,
    )?;
    if let Some(t) = &tree_max {
        output.add_assign(&t.values)?;
    }
    Ok(MixerTape {
        path: Path::Naive,
        config: cfg.clone(),
        segments: seg.clone(),
        input: h.clone(),
        input_mean: None,
        query: Some(proj.query),
        g,
        key: Some(proj.key),
        value: Some(proj.value),
        attention,
        g_prime,
        segment_proj: Some(proj.segment),
        seg_max,
        local_proj: Some(proj.local),
        local_max,
        tree_max,
        out_proj: Some(proj.output),
        output,
    })
}

fn forward_fused<T: Real>(
    h: &Tensor<T>,
    params: &ProjectionSet<T>,
    seg: &SegmentMap,
    cfg: &MixerConfig,
    ops: &mut OpCounter,
) -> Result<MixerTape<T>> {
    if !h.is_finite() {
        return Err(Error::NonFinite("mixer input"));
    }
    let v = cfg.variant;
    let (n, d) = h.dims2()?;

    let (input_mean, g) = if v.uses_ga() {
        let mean = reduce_mean(h, 0)?;
        let g = params.query.apply(&mean.clone().reshape(&[1, d])?, ops)?.reshape(&[d])?;
        (Some(mean), Some(g))
    } else {
        (None, None)
    };
    let (key, value, g_prime, attention) = match &g {
        Some(g) if v.uses_cross_attention() => {
            let key = params.key.apply(h, ops)?;
            let value = params.value_proj().apply(h, ops)?;
            let (gp, w) = ga_second_stage(g, &key, &value, cfg, ops)?;
            (Some(key), Some(value), Some(gp), Some(w))
        }
        _ => (None, None, None, None),
    };
    let (segment_proj, seg_max) = if v.uses_smp() {
        let hs = params.segment.apply(h, ops)?;
        let pooled = smp(&hs, seg)?;
        (Some(hs), Some(pooled))
    } else {
        (None, None)
    };
    let needs_local = v.uses_lmp() || cfg.tmp_enabled;
    let local_proj = needs_local.then(|| params.local.apply(h, ops)).transpose()?;
    let local_max = match &local_proj {
        Some(hl) if v.uses_lmp() => Some(lmp(hl, cfg.lmp_window, cfg.lmp_stride)?),
        _ => None,
    };
    let tree_max = match &local_proj {
        Some(hl) if cfg.tmp_enabled => Some(tmp(hl, cfg.layer_index)?),
        _ => None,
    };

    let global = if v.uses_cross_attention() { g_prime.as_ref() } else { g.as_ref() };
    let mut output = Tensor::zeros(&[n, d]);
    let out_proj = if global.is_some() || seg_max.is_some() {
        let h_o = params.output.apply(h, ops)?;
        let mut coeff = vec![T::zero(); d];
        for t in 0..n {
            coeff.iter_mut().for_each(|c| *c = T::zero());
            if let Some(g) = global {
                coeff.copy_from_slice(g.data());
            }
            if let Some(s) = &seg_max {
                for (c, &sv) in coeff.iter_mut().zip(s.values.row(seg.segment_of(t))) {
                    *c += sv;
                }
            }
            for ((o, &x), &c) in output.row_mut(t).iter_mut().zip(h_o.row(t)).zip(&coeff) {
                *o = c * x;
            }
        }
        ops.record(n * d);
        Some(h_o)
    } else {
        None
    };
    if let Some(l) = &local_max {
        output.add_assign(&l.values)?;
    }
    if let Some(t) = &tree_max {
        output.add_assign(&t.values)?;
    }
    Ok(MixerTape {
        path: Path::Fused,
        config: cfg.clone(),
        segments: seg.clone(),
        input: h.clone(),
        input_mean,
        query: None,
        g,
        key,
        value,
        attention,
        g_prime,
        segment_proj,
        seg_max,
        local_proj,
        local_max,
        tree_max,
        out_proj,
        output: output.check_finite("fusion")?,
    })
}

/// Fused-path forward without instrumentation.
pub fn mix_fused<T: Real>(
    h: &Tensor<T>,
    params: &ProjectionSet<T>,
    seg: &SegmentMap,
    cfg: &MixerConfig,
) -> Result<MixerOutput<T>> {
    Ok(forward(h, params, seg, cfg, Path::Fused, &mut OpCounter::new())?.into_output(false))
}

/// Naive-path forward without instrumentation.
pub fn mix_naive<T: Real>(
    h: &Tensor<T>,
    params: &ProjectionSet<T>,
    seg: &SegmentMap,
    cfg: &MixerConfig,
) -> Result<MixerOutput<T>> {
    Ok(forward(h, params, seg, cfg, Path::Naive, &mut OpCounter::new())?.into_output(false))
}

/// Largest elementwise `|a-b| / max(|a|, |b|, 1)`.
///
/// The unit floor keeps entries that cancel to nearly zero from turning
/// rounding noise into a large ratio.
pub fn max_rel_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}
