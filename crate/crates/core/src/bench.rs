//! Forward-pass timing of stacked mixer blocks against reference
//! self-attention, with analytic memory estimates and instrumented
//! multiplication counts.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::affine::Affine;
use crate::cost::{count_mults, count_mults_attention, OpCounter, Path};
use crate::error::{Error, Result};
use crate::mixer::{forward, MixerConfig, ProjectionSet};
use crate::segment::SegmentMap;
use crate::tensor::{Real, SeededRng, Tensor};

pub const BUDGET_ENV: &str = "PONET_MEM_BUDGET_BYTES";
/// Used when neither the spec nor the environment sets a budget.
pub const DEFAULT_BUDGET_BYTES: u64 = 3 << 30;
/// Tokens per segment in benchmark inputs.
pub const BENCH_SEGMENT_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    PonetNaive,
    PonetFused,
    SelfAttention,
}

impl MixerKind {
    pub const ALL: [MixerKind; 3] = [MixerKind::PonetNaive, MixerKind::PonetFused, MixerKind::SelfAttention];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::PonetNaive => "ponet_naive",
            MixerKind::PonetFused => "ponet_fused",
            MixerKind::SelfAttention => "self_attention",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub lengths: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub batch: usize,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    pub mixers: Vec<MixerKind>,
    pub precision: Precision,
    /// Refuse runs whose estimated footprint exceeds this many bytes.
    pub budget_bytes: Option<u64>,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            lengths: vec![512, 1024, 2048, 4096, 8192, 16384],
            d: 64,
            heads: 2,
            layers: 2,
            batch: 32,
            warmup_iters: 1,
            measured_iters: 3,
            mixers: MixerKind::ALL.to_vec(),
            precision: Precision::F32,
            budget_bytes: None,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::config("lengths must be non-empty and positive"));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lengths must be strictly ascending"));
        }
        if self.measured_iters < 3 {
            return Err(Error::config("measured_iters must be at least 3"));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!("d={} is not divisible into {} heads", self.d, self.heads)));
        }
        if self.layers == 0 || self.batch == 0 {
            return Err(Error::config("layers and batch must be positive"));
        }
        if self.mixers.is_empty() {
            return Err(Error::config("no mixers selected"));
        }
        Ok(())
    }

    /// Budget from the spec, else the environment, else the default.
    pub fn effective_budget(&self) -> Result<u64> {
        if let Some(b) = self.budget_bytes {
            return Ok(b);
        }
        match std::env::var(BUDGET_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| Error::config(format!("{BUDGET_ENV}={v:?} is not a byte count"))),
            Err(_) => Ok(DEFAULT_BUDGET_BYTES),
        }
    }

    fn elem_bytes(&self) -> u64 {
        match self.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mixer: MixerKind,
    pub length: usize,
    pub d: usize,
    pub heads: usize,
    pub batch: usize,
    /// Median wall time of one forward over the whole batch and all layers.
    pub median_seconds: f64,
    pub est_bytes: u64,
    /// Multiplications of one block on one sequence.
    pub mult_count: u64,
}

/// One tensor alive at the peak of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LiveTensor {
    pub name: &'static str,
    pub elems: u64,
    pub elem_bytes: u64,
}

/// Tensors simultaneously alive at the end of one block forward, including
/// the batch input and output buffers. Sequences are processed one at a
/// time, so only one sequence's intermediates are counted.
pub fn footprint(kind: MixerKind, n: usize, d: usize, heads: usize, batch: usize, elem_bytes: u64) -> Vec<LiveTensor> {
    let (n, d, heads, batch) = (n as u64, d as u64, heads as u64, batch as u64);
    let k = n.div_ceil(BENCH_SEGMENT_LEN as u64);
    let idx = std::mem::size_of::<usize>() as u64;
    let t = |name, elems| LiveTensor { name, elems, elem_bytes };
    let mut live = vec![t("batch_input", batch * n * d), t("batch_output", batch * n * d), t("input", n * d)];
    match kind {
        MixerKind::SelfAttention => {
            live.extend([
                t("query", n * d),
                t("key", n * d),
                t("value", n * d),
                t("scores", heads * n * n),
                t("context", n * d),
                t("output", n * d),
            ]);
        }
        MixerKind::PonetNaive | MixerKind::PonetFused => {
            if kind == MixerKind::PonetNaive {
                live.push(t("query", n * d));
            } else {
                live.push(t("input_mean", d));
            }
            live.extend([
                t("g", d),
                t("key", n * d),
                t("value", n * d),
                t("attention", heads * n),
                t("g_prime", d),
                t("segment_proj", n * d),
                t("segment_max", k * d),
                LiveTensor { name: "segment_argmax", elems: k * d, elem_bytes: idx },
                t("local_proj", n * d),
                t("local_max", n * d),
                LiveTensor { name: "local_argmax", elems: n * d, elem_bytes: idx },
                t("out_proj", n * d),
                t("output", n * d),
            ]);
        }
    }
    live
}

pub fn estimate_bytes(live: &[LiveTensor]) -> u64 {
    live.iter().map(|t| t.elems * t.elem_bytes).sum()
}

/// Projections of a reference multi-head self-attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub query: Affine<T>,
    pub key: Affine<T>,
    pub value: Affine<T>,
    pub output: Affine<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn random(d: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut a = || Affine::<f64>::random(d, d, std, rng).cast();
        AttentionParams { query: a(), key: a(), value: a(), output: a() }
    }
}

/// Standard softmax attention with a materialised `heads × N × N` score
/// tensor. Counts `4Nd² + 2N²d` multiplications.
pub fn self_attention<T: Real>(
    h: &Tensor<T>,
    params: &AttentionParams<T>,
    heads: usize,
    ops: &mut OpCounter,
) -> Result<Tensor<T>> {
    let (n, d) = h.dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("d={d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let q = params.query.apply(h, ops)?;
    let k = params.key.apply(h, ops)?;
    let v = params.value.apply(h, ops)?;
    let mut scores = vec![T::zero(); heads * n * n];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let row = &mut scores[(hd * n + i) * n..(hd * n + i + 1) * n];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                *s = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * scale;
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                sum = sum + *s;
            }
            for s in row.iter_mut() {
                *s = *s / sum;
            }
        }
        ops.record(n * n * dh);
    }
    let mut ctx = Tensor::zeros(&[n, d]);
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let w = &scores[(hd * n + i) * n..(hd * n + i + 1) * n];
            let mut acc = vec![T::zero(); dh];
            for (j, &wj) in w.iter().enumerate() {
                for (a, &vv) in acc.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *a += wj * vv;
                }
            }
            ctx.row_mut(i)[cols.clone()].copy_from_slice(&acc);
        }
        ops.record(n * n * dh);
    }
    params.output.apply(&ctx, ops)
}

enum LayerParams<T> {
    Ponet(ProjectionSet<T>),
    Attention(AttentionParams<T>),
}

fn run_forward<T: Real>(
    kind: MixerKind,
    batch: &[Tensor<T>],
    layers: &[LayerParams<T>],
    cfg: &MixerConfig,
    seg: &SegmentMap,
    ops: &mut OpCounter,
) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(batch.len());
    for x in batch {
        let mut h = x.clone();
        for (i, lp) in layers.iter().enumerate() {
            h = match lp {
                LayerParams::Ponet(p) => {
                    let path = if kind == MixerKind::PonetNaive { Path::Naive } else { Path::Fused };
                    let lcfg = MixerConfig { layer_index: i + 1, ..cfg.clone() };
                    forward(&h, p, seg, &lcfg, path, ops)?.output
                }
                LayerParams::Attention(a) => self_attention(&h, a, cfg.heads, ops)?,
            };
        }
        out.push(h);
    }
    Ok(out)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

fn bench_one<T: Real>(spec: &BenchSpec, kind: MixerKind, n: usize, est_bytes: u64) -> Result<BenchRow> {
    let mut rng = SeededRng::new(spec.seed).fork(n as u64);
    let cfg = MixerConfig::new(spec.d, spec.heads);
    let std = 1.0 / (spec.d as f64).sqrt();
    let layers: Vec<LayerParams<T>> = (0..spec.layers)
        .map(|_| match kind {
            MixerKind::SelfAttention => LayerParams::Attention(AttentionParams::random(spec.d, &mut rng)),
            _ => LayerParams::Ponet(ProjectionSet::<f64>::random(spec.d, cfg.share_kv, std, &mut rng).cast()),
        })
        .collect();
    let batch: Vec<Tensor<T>> = (0..spec.batch).map(|_| Tensor::random_normal(&[n, spec.d], 1.0, &mut rng)).collect();
    let seg = SegmentMap::even(n, n.div_ceil(BENCH_SEGMENT_LEN))?;

    let mut ops = OpCounter::new();
    run_forward(kind, &batch, &layers, &cfg, &seg, &mut ops)?;
    let per_block = ops.mults() / (spec.layers * spec.batch) as u64;
    for _ in 1..spec.warmup_iters {
        run_forward(kind, &batch, &layers, &cfg, &seg, &mut OpCounter::new())?;
    }
    let mut times = Vec::with_capacity(spec.measured_iters);
    for _ in 0..spec.measured_iters {
        let start = Instant::now();
        let out = run_forward(kind, &batch, &layers, &cfg, &seg, &mut OpCounter::new())?;
        times.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
        std::hint::black_box(out);
    }
    Ok(BenchRow {
        mixer: kind,
        length: n,
        d: spec.d,
        heads: spec.heads,
        batch: spec.batch,
        median_seconds: median(times),
        est_bytes,
        mult_count: per_block,
    })
}

/// Closed-form multiplication count for one block on one sequence.
pub fn expected_mults(kind: MixerKind, n: usize, d: usize) -> u64 {
    match kind {
        MixerKind::PonetNaive => count_mults(n as u64, d as u64, Path::Naive),
        MixerKind::PonetFused => count_mults(n as u64, d as u64, Path::Fused),
        MixerKind::SelfAttention => count_mults_attention(n as u64, d as u64),
    }
}

/// Runs every (mixer, length) pair. The first forward doubles as the
/// instrumented count and as a warm-up iteration. `on_row` sees each row
/// as soon as it is measured.
pub fn run_bench(spec: &BenchSpec, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let budget = spec.effective_budget()?;
    let mut plan = Vec::new();
    for &kind in &spec.mixers {
        for &n in &spec.lengths {
            let est = estimate_bytes(&footprint(kind, n, spec.d, spec.heads, spec.batch, spec.elem_bytes()));
            if est > budget {
                return Err(Error::Budget { needed: est, budget });
            }
            plan.push((kind, n, est));
        }
    }
    let mut rows = Vec::with_capacity(plan.len());
    for (kind, n, est) in plan {
        let row = match spec.precision {
            Precision::F32 => bench_one::<f32>(spec, kind, n, est)?,
            Precision::F64 => bench_one::<f64>(spec, kind, n, est)?,
        };
        if row.mult_count != expected_mults(kind, n, spec.d) {
            return Err(Error::State(format!(
                "{} at N={n}: counted {} multiplications, closed form gives {}",
                kind.name(),
                row.mult_count,
                expected_mults(kind, n, spec.d)
            )));
        }
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRatio {
    pub from: usize,
    pub to: usize,
    pub time_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub mixer: MixerKind,
    /// Least-squares slope of `ln(time)` against `ln(N)`.
    pub exponent: f64,
    pub ratios: Vec<LengthRatio>,
}

/// Fits the growth exponent per mixer; needs at least three lengths each.
pub fn scaling_report(rows: &[BenchRow]) -> Result<Vec<ScalingFit>> {
    let mut kinds: Vec<MixerKind> = rows.iter().map(|r| r.mixer).collect();
    kinds.sort();
    kinds.dedup();
    if kinds.is_empty() {
        return Err(Error::Input("no benchmark rows".into()));
    }
    kinds
        .into_iter()
        .map(|kind| {
            let mut pts: Vec<(usize, f64)> =
                rows.iter().filter(|r| r.mixer == kind).map(|r| (r.length, r.median_seconds)).collect();
            pts.sort_by_key(|p| p.0);
            pts.dedup_by_key(|p| p.0);
            if pts.len() < 3 {
                return Err(Error::Input(format!("{} has {} lengths, need at least 3", kind.name(), pts.len())));
            }
            if pts.iter().any(|p| !(p.1 > 0.0)) {
                return Err(Error::Input(format!("{} has a non-positive time", kind.name())));
            }
            let xs: Vec<f64> = pts.iter().map(|p| (p.0 as f64).ln()).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
            let mx = xs.iter().sum::<f64>() / xs.len() as f64;
            let my = ys.iter().sum::<f64>() / ys.len() as f64;
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let ratios = pts
                .windows(2)
                .map(|w| LengthRatio { from: w[0].0, to: w[1].0, time_ratio: w[1].1 / w[0].1 })
                .collect();
            Ok(ScalingFit { mixer: kind, exponent: sxy / sxx, ratios })
        })
        .collect()
}
