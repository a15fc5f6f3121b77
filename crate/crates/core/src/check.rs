//! Self-verification suites run by `ponet check`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::causal::{batch_causal, leakage_trials, CausalStream};
use crate::cost::{count_mults, OpCounter, Path};
use crate::encoder::{loss, loss_and_grad, EncoderConfig, EncoderParams, Example, Head};
use crate::error::{Error, Result};
use crate::grad::{fd_check, FdOptions, Probe};
use crate::mixer::{forward, max_rel_diff, mix_fused, mix_naive, MixerConfig, ProjectionSet, Variant};
use crate::segment::SegmentMap;
use crate::tensor::{SeededRng, Tensor};

pub const REPORT_SCHEMA: &str = "ponet-check-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivalenceSpec {
    pub instances: usize,
    pub max_n: usize,
    pub max_d: usize,
    pub max_k: usize,
    pub heads: Vec<usize>,
    pub tolerance: f64,
}

impl Default for EquivalenceSpec {
    fn default() -> Self {
        EquivalenceSpec { instances: 200, max_n: 64, max_d: 32, max_k: 8, heads: vec![1, 2, 4], tolerance: 1e-10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpCountSpec {
    pub lengths: Vec<usize>,
    pub dims: Vec<usize>,
}

impl Default for OpCountSpec {
    fn default() -> Self {
        OpCountSpec { lengths: vec![1, 7, 64, 512], dims: vec![1, 8, 64] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientSpec {
    pub seeds: usize,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub layers: usize,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradientSpec {
    fn default() -> Self {
        GradientSpec { seeds: 20, n: 6, d: 4, k: 2, layers: 1, h: 1e-5, tolerance: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalSpec {
    pub streams: usize,
    pub length: usize,
    pub d: usize,
    pub window: usize,
    pub probes: usize,
    pub mean_tolerance: f64,
}

impl Default for CausalSpec {
    fn default() -> Self {
        CausalSpec { streams: 20, length: 64, d: 8, window: 3, probes: 50, mean_tolerance: 1e-12 }
    }
}

/// Deliberate corruption used to prove the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Nudges one output-projection weight on the fused side only.
    CorruptFusedProjection,
    /// Scales the analytic gradient before comparison.
    CorruptGradient,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub seed: u64,
    pub equivalence: EquivalenceSpec,
    pub op_count: OpCountSpec,
    pub gradient: GradientSpec,
    pub causal: CausalSpec,
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed error, in the suite's own metric.
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
    /// First few failing cases, human readable.
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub schema: String,
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

impl CheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect()
    }
}

const MAX_LISTED: usize = 10;

struct Tally {
    cases: usize,
    max_error: f64,
    failures: Vec<String>,
    failed: bool,
}

impl Tally {
    fn new() -> Self {
        Tally { cases: 0, max_error: 0.0, failures: Vec::new(), failed: false }
    }

    fn record(&mut self, error: f64, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if error.is_nan() {
            self.max_error = f64::NAN;
        } else if !self.max_error.is_nan() {
            self.max_error = self.max_error.max(error);
        }
        if !ok {
            self.failed = true;
            if self.failures.len() < MAX_LISTED {
                self.failures.push(describe());
            }
        }
    }

    fn finish(self, name: &str, tolerance: f64, start: Instant) -> SuiteReport {
        SuiteReport {
            name: name.to_string(),
            passed: !self.failed && self.cases > 0,
            cases: self.cases,
            max_error: self.max_error,
            tolerance,
            seconds: start.elapsed().as_secs_f64(),
            failures: self.failures,
        }
    }
}

fn corrupt(params: &mut ProjectionSet) {
    params.output.weight.data_mut()[0] += 1e-3;
}

/// Fused vs naive mixer on random instances, every variant.
pub fn equivalence_suite(spec: &EquivalenceSpec, seed: u64, fault: Option<Fault>) -> Result<SuiteReport> {
    let start = Instant::now();
    if spec.heads.is_empty() || spec.max_n == 0 || spec.max_k == 0 {
        return Err(Error::config("equivalence suite needs heads, max_n and max_k"));
    }
    let mut rng = SeededRng::new(seed).fork(11);
    let mut tally = Tally::new();
    for i in 0..spec.instances {
        let variant = Variant::ALL[i % Variant::ALL.len()];
        let heads = spec.heads[rng.below(spec.heads.len())];
        let per_head = spec.max_d / heads;
        if per_head == 0 {
            return Err(Error::config(format!("max_d {} is smaller than {heads} heads", spec.max_d)));
        }
        let d = heads * (1 + rng.below(per_head));
        let n = 1 + rng.below(spec.max_n);
        let k = 1 + rng.below(spec.max_k.min(n));
        let share = rng.bernoulli(0.5);
        let cfg = MixerConfig {
            lmp_window: 1 + 2 * rng.below(3),
            share_kv: share,
            tmp_enabled: rng.bernoulli(0.25),
            layer_index: 1 + rng.below(3),
            ..MixerConfig::new(d, heads)
        }
        .with_variant(variant);
        let h = Tensor::random_normal(&[n, d], 1.0, &mut rng);
        let params = ProjectionSet::random_with_bias(d, share, 1.0 / (d as f64).sqrt(), &mut rng);
        let seg = SegmentMap::even(n, k)?;
        let naive = mix_naive(&h, &params, &seg, &cfg)?.p;
        let mut fused_params = params;
        if fault == Some(Fault::CorruptFusedProjection) {
            corrupt(&mut fused_params);
        }
        let fused = mix_fused(&h, &fused_params, &seg, &cfg)?.p;
        let diff = max_rel_diff(&fused, &naive);
        tally.record(diff, diff <= spec.tolerance, || {
            format!("instance {i}: {} n={n} d={d} heads={heads} k={k} diff={diff:e}", variant.name())
        });
    }
    Ok(tally.finish("equivalence", spec.tolerance, start))
}

/// Instrumented multiplication counts against the closed forms.
pub fn op_count_suite(spec: &OpCountSpec, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = SeededRng::new(seed).fork(12);
    let mut tally = Tally::new();
    for &n in &spec.lengths {
        for &d in &spec.dims {
            let h = Tensor::<f64>::random_normal(&[n, d], 1.0, &mut rng);
            let params = ProjectionSet::random(d, true, 0.5, &mut rng);
            let cfg = MixerConfig::new(d, 1);
            let seg = SegmentMap::whole(n)?;
            for path in [Path::Naive, Path::Fused] {
                let mut ops = OpCounter::new();
                forward(&h, &params, &seg, &cfg, path, &mut ops)?;
                let expect = count_mults(n as u64, d as u64, path);
                let got = ops.mults();
                let err = got.abs_diff(expect) as f64;
                tally.record(err, got == expect, || format!("{path:?} n={n} d={d}: counted {got}, expected {expect}"));
            }
        }
    }
    Ok(tally.finish("op_count", 0.0, start))
}

fn grad_model(spec: &GradientSpec) -> EncoderConfig {
    let mut cfg = EncoderConfig::new(8, spec.n, spec.d, spec.layers, 3);
    cfg.mixer = MixerConfig::new(spec.d, 1);
    cfg.dropout_rate = 0.0;
    cfg
}

/// Encoder cross-entropy gradients against central differences.
pub fn gradient_suite(spec: &GradientSpec, seed: u64, fault: Option<Fault>) -> Result<SuiteReport> {
    let start = Instant::now();
    let opts = FdOptions { h: spec.h, tolerance: spec.tolerance };
    let mut tally = Tally::new();
    for s in 0..spec.seeds {
        let mut rng = SeededRng::new(seed).fork(1000 + s as u64);
        let mut cfg = grad_model(spec);
        cfg.head = if s % 2 == 0 { Head::MaxPool } else { Head::ClsToken };
        let mut params = EncoderParams::init(&cfg, &mut rng)?;
        // probe a generic point: at the small training-init embeddings the
        // first layer norm is badly conditioned for central differences
        params.token_emb = Tensor::random_normal(params.token_emb.shape(), 1.0, &mut rng);
        params.pos_emb = Tensor::random_normal(params.pos_emb.shape(), 1.0, &mut rng);
        let tokens: Vec<u32> = (0..spec.n).map(|_| rng.below(cfg.vocab_size) as u32).collect();
        let seg = SegmentMap::even(spec.n, spec.k)?;
        let ex = Example { tokens: &tokens, seg: &seg, label: rng.below(cfg.num_classes) };
        let mut grads = params.zeros_like();
        loss_and_grad(&ex, &params, &cfg, None, &mut grads)?;
        if fault == Some(Fault::CorruptGradient) {
            crate::grad::ParamSet::visit_mut(&mut grads, &mut |_, t| {
                t.data_mut().iter_mut().for_each(|v| *v *= 1.01)
            });
        }
        let report = fd_check(
            |p: &EncoderParams| {
                let (value, regime) = loss(&ex, p, &cfg)?;
                Ok(Probe { value, regime })
            },
            &params,
            &grads,
            opts,
        )?;
        let worst = report.params.iter().filter(|p| !p.failing.is_empty()).map(|p| p.name.clone()).collect::<Vec<_>>();
        tally.record(report.max_rel_err, report.passed, || {
            format!("seed {s}: max rel err {:e} in {}", report.max_rel_err, worst.join(", "))
        });
    }
    Ok(tally.finish("gradient", spec.tolerance, start))
}

/// Streaming vs per-prefix recomputation, plus future-token leakage probes.
pub fn causal_suite(spec: &CausalSpec, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    if spec.length < 2 {
        return Err(Error::config("causal suite needs streams of at least two tokens"));
    }
    let mut rng = SeededRng::new(seed).fork(13);
    let mut tally = Tally::new();
    for s in 0..spec.streams {
        // alternate the max-only variant (must be bitwise) and the mean variant
        let variant = if s % 2 == 0 { Variant::NoGa } else { Variant::NoSsGa };
        let cfg = MixerConfig { lmp_window: spec.window, ..MixerConfig::new(spec.d, 1) }.with_variant(variant);
        let params = ProjectionSet::<f64>::random_with_bias(spec.d, true, 1.0 / (spec.d as f64).sqrt(), &mut rng);
        let h = Tensor::random_normal(&[spec.length, spec.d], 1.0, &mut rng);
        let flags: Vec<bool> = (0..spec.length).map(|t| t == 0 || rng.bernoulli(0.15)).collect();
        let mut stream = CausalStream::new(params.clone(), cfg.clone())?;
        let rows = (0..spec.length).map(|t| stream.step(h.row(t), flags[t])).collect::<Result<Vec<_>>>()?;
        let streamed = Tensor::from_rows(&rows)?;
        let batch = batch_causal(&h, &flags, &params, &cfg)?;
        let (diff, ok) = if variant == Variant::NoGa {
            let exact = streamed == batch;
            (if exact { 0.0 } else { max_rel_diff(&streamed, &batch) }, exact)
        } else {
            let diff = max_rel_diff(&streamed, &batch);
            (diff, diff <= spec.mean_tolerance)
        };
        tally.record(diff, ok, || format!("stream {s} ({}): diff {diff:e}", variant.name()));
    }
    let cfg = MixerConfig { lmp_window: spec.window, ..MixerConfig::new(spec.d, 1) }.with_variant(Variant::NoSsGa);
    let params = ProjectionSet::random_with_bias(spec.d, true, 1.0 / (spec.d as f64).sqrt(), &mut rng);
    let h = Tensor::random_normal(&[spec.length, spec.d], 1.0, &mut rng);
    let flags: Vec<bool> = (0..spec.length).map(|t| t == 0 || rng.bernoulli(0.15)).collect();
    let leak = leakage_trials(&h, &flags, spec.probes, &params, &cfg, &mut rng)?;
    let mut report = tally.finish("causal", spec.mean_tolerance, start);
    report.cases += leak.trials;
    if leak.violations > 0 {
        report.passed = false;
        report
            .failures
            .push(format!("{} of {} leakage probes moved a past emission (max {:e})", leak.violations, leak.trials, leak.max_change));
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

pub fn run_checks(cfg: &CheckConfig) -> Result<CheckReport> {
    let suites = vec![
        equivalence_suite(&cfg.equivalence, cfg.seed, cfg.fault)?,
        op_count_suite(&cfg.op_count, cfg.seed)?,
        gradient_suite(&cfg.gradient, cfg.seed, cfg.fault)?,
        causal_suite(&cfg.causal, cfg.seed)?,
    ];
    let passed = suites.iter().all(|s| s.passed);
    Ok(CheckReport { schema: REPORT_SCHEMA.to_string(), seed: cfg.seed, passed, suites })
}
