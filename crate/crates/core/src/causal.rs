//! Causal streaming form of the mixer without the second attention stage.
//!
//! Every step folds one row into a running mean, an open-segment running
//! max and a short ring buffer, so the cost per token does not depend on how
//! many tokens came before.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::affine::Affine;
use crate::cost::OpCounter;
use crate::encoder::{gelu, layer_norm, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::mixer::{MixerConfig, ProjectionSet, Variant};
use crate::tensor::{matmul, reduce_mean, Real, SeededRng, Tensor};

/// Rejects configurations that cannot run causally.
pub fn check_streamable(cfg: &MixerConfig) -> Result<()> {
    cfg.validate()?;
    match cfg.variant {
        Variant::NoSsGa | Variant::NoGa => {}
        v => {
            return Err(Error::config(format!(
                "variant {} cannot stream: the cross-attention stage needs every token's key, \
                 so only no_ss_ga (running mean) or no_ga can run causally",
                v.name()
            )))
        }
    }
    if cfg.tmp_enabled {
        return Err(Error::config("tree max-pooling looks ahead and cannot stream"));
    }
    Ok(())
}

/// Per-stream state. Size is `O(d · window)`, independent of stream length.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalState<T = f64> {
    pub t: usize,
    /// Mean of the query projections seen so far.
    pub running_mean: Vec<T>,
    /// Max of the segment projections of the open segment (`-∞` when empty).
    pub seg_running_max: Vec<T>,
    pub current_segment: usize,
    /// Local projections of the last `window - 1` rows, oldest first.
    pub lmp_buffer: VecDeque<Vec<T>>,
}

pub fn stream_init<T: Real>(params: &ProjectionSet<T>, cfg: &MixerConfig) -> Result<CausalState<T>> {
    check_streamable(cfg)?;
    if params.dim() != cfg.d {
        return Err(Error::shape(format!("projections of width {} for d={}", params.dim(), cfg.d)));
    }
    Ok(CausalState {
        t: 0,
        running_mean: vec![T::zero(); cfg.d],
        seg_running_max: vec![T::neg_infinity(); cfg.d],
        current_segment: 0,
        lmp_buffer: VecDeque::with_capacity(cfg.lmp_window.saturating_sub(1)),
    })
}

fn project_row<T: Real>(a: &Affine<T>, row: &Tensor<T>, ops: &mut OpCounter) -> Result<Vec<T>> {
    Ok(a.apply(row, ops)?.into_data())
}

/// Consumes one row and returns the mixer output for it. `boundary` marks
/// the row as the first of a new segment (ignored for the very first row).
pub fn stream_step<T: Real>(
    state: &mut CausalState<T>,
    row: &[T],
    boundary: bool,
    params: &ProjectionSet<T>,
    cfg: &MixerConfig,
) -> Result<Vec<T>> {
    let d = cfg.d;
    if row.len() != d {
        return Err(Error::shape(format!("row of {} values for d={d}", row.len())));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stream row"));
    }
    if state.running_mean.len() != d {
        return Err(Error::State("stream state built for a different width".into()));
    }
    let x = Tensor::new(&[1, d], row.to_vec())?;
    let mut ops = OpCounter::new();
    let v = cfg.variant;

    if v.uses_ga() {
        let q = project_row(&params.query, &x, &mut ops)?;
        let t = T::from_usize(state.t).expect("count fits");
        let t1 = T::from_usize(state.t + 1).expect("count fits");
        for (m, qv) in state.running_mean.iter_mut().zip(q) {
            *m = (t * *m + qv) / t1;
        }
    }
    if v.uses_smp() {
        if boundary && state.t > 0 {
            state.current_segment += 1;
            state.seg_running_max.iter_mut().for_each(|m| *m = T::neg_infinity());
        }
        let s = project_row(&params.segment, &x, &mut ops)?;
        for (m, sv) in state.seg_running_max.iter_mut().zip(s) {
            if sv > *m {
                *m = sv;
            }
        }
    } else if boundary && state.t > 0 {
        state.current_segment += 1;
    }
    let local = if v.uses_lmp() {
        let l = project_row(&params.local, &x, &mut ops)?;
        let mut mx = l.clone();
        for past in &state.lmp_buffer {
            for (m, &p) in mx.iter_mut().zip(past) {
                if p > *m {
                    *m = p;
                }
            }
        }
        let keep = cfg.lmp_window - 1;
        if keep > 0 {
            if state.lmp_buffer.len() == keep {
                state.lmp_buffer.pop_front();
            }
            state.lmp_buffer.push_back(l);
        }
        Some(mx)
    } else {
        None
    };

    let mut out = vec![T::zero(); d];
    if v.uses_ga() || v.uses_smp() {
        let o = project_row(&params.output, &x, &mut ops)?;
        if v.uses_ga() {
            for ((p, &g), &ov) in out.iter_mut().zip(&state.running_mean).zip(&o) {
                *p = g * ov;
            }
        }
        if v.uses_smp() {
            for ((p, &s), &ov) in out.iter_mut().zip(&state.seg_running_max).zip(&o) {
                *p += s * ov;
            }
        }
    }
    if let Some(l) = local {
        for (p, lv) in out.iter_mut().zip(l) {
            *p += lv;
        }
    }
    state.t += 1;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stream output"));
    }
    Ok(out)
}

/// A stream bundled with its parameters.
#[derive(Clone, Debug)]
pub struct CausalStream<T = f64> {
    params: ProjectionSet<T>,
    cfg: MixerConfig,
    state: CausalState<T>,
}

impl<T: Real> CausalStream<T> {
    pub fn new(params: ProjectionSet<T>, cfg: MixerConfig) -> Result<Self> {
        let state = stream_init(&params, &cfg)?;
        Ok(CausalStream { params, cfg, state })
    }

    pub fn step(&mut self, row: &[T], boundary: bool) -> Result<Vec<T>> {
        stream_step(&mut self.state, row, boundary, &self.params, &self.cfg)
    }

    pub fn state(&self) -> &CausalState<T> {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state = stream_init(&self.params, &self.cfg).expect("validated at construction");
    }
}

/// Segment starts from boundary flags (the first row always starts one).
pub fn segment_ids_from_flags(boundaries: &[bool]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(boundaries.len());
    let mut current = 0;
    for (t, &b) in boundaries.iter().enumerate() {
        if b && t > 0 {
            current += 1;
        }
        ids.push(current);
    }
    ids
}

/// Batch reference: recomputes row `t` from the prefix `H[0..=t]` alone.
/// Quadratic in length; used as the equivalence oracle.
pub fn batch_causal<T: Real>(
    h: &Tensor<T>,
    boundaries: &[bool],
    params: &ProjectionSet<T>,
    cfg: &MixerConfig,
) -> Result<Tensor<T>> {
    check_streamable(cfg)?;
    let (n, d) = h.dims2()?;
    if boundaries.len() != n {
        return Err(Error::shape(format!("{} boundary flags for {n} rows", boundaries.len())));
    }
    let seg = segment_ids_from_flags(boundaries);
    let v = cfg.variant;
    let mut out = Tensor::zeros(&[n, d]);
    for t in 0..n {
        let prefix = Tensor::from_rows(&(0..=t).map(|r| h.row(r)).collect::<Vec<_>>())?;
        let proj = |a: &Affine<T>| -> Result<Tensor<T>> {
            let mut y = matmul(&prefix, &a.weight)?;
            for r in 0..=t {
                for (o, &b) in y.row_mut(r).iter_mut().zip(a.bias.data()) {
                    *o += b;
                }
            }
            Ok(y)
        };
        let row = out.row_mut(t);
        if v.uses_ga() || v.uses_smp() {
            let o = proj(&params.output)?;
            if v.uses_ga() {
                let g = reduce_mean(&proj(&params.query)?, 0)?;
                for j in 0..d {
                    row[j] = g.data()[j] * o.at(t, j);
                }
            }
            if v.uses_smp() {
                let hs = proj(&params.segment)?;
                let start = (0..=t).find(|&r| seg[r] == seg[t]).expect("t is in its own segment");
                for j in 0..d {
                    let mx = (start..=t).map(|r| hs.at(r, j)).fold(T::neg_infinity(), T::max);
                    row[j] += mx * o.at(t, j);
                }
            }
        }
        if v.uses_lmp() {
            let hl = proj(&params.local)?;
            let lo = (t + 1).saturating_sub(cfg.lmp_window);
            for j in 0..d {
                row[j] += (lo..=t).map(|r| hl.at(r, j)).fold(T::neg_infinity(), T::max);
            }
        }
    }
    out.check_finite("batch causal")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest change seen in any checked emission.
    pub max_change: f64,
}

/// Replaces row `t_perturb` with fresh noise and measures how much any
/// emission at or before `t_check` moved. Indices are 0-based.
pub fn leakage_probe(
    h: &Tensor,
    boundaries: &[bool],
    t_perturb: usize,
    t_check: usize,
    params: &ProjectionSet,
    cfg: &MixerConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    let (n, d) = h.dims2()?;
    if !(t_check < t_perturb && t_perturb < n) {
        return Err(Error::Input(format!("need t_check < t_perturb < {n}, got {t_check}, {t_perturb}")));
    }
    let run = |x: &Tensor| -> Result<Vec<Vec<f64>>> {
        let mut s = CausalStream::new(params.clone(), cfg.clone())?;
        (0..n).map(|t| s.step(x.row(t), boundaries[t])).collect()
    };
    let base = run(h)?;
    let mut poked = h.clone();
    for j in 0..d {
        poked.row_mut(t_perturb)[j] = 10.0 * rng.normal();
    }
    let moved = run(&poked)?;
    let mut worst = 0.0f64;
    for t in 0..=t_check {
        for (a, b) in base[t].iter().zip(&moved[t]) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Runs `trials` random probes over `h`; any nonzero change is a violation.
pub fn leakage_trials(
    h: &Tensor,
    boundaries: &[bool],
    trials: usize,
    params: &ProjectionSet,
    cfg: &MixerConfig,
    rng: &mut SeededRng,
) -> Result<LeakageReport> {
    let n = h.rows();
    if n < 2 {
        return Err(Error::Input("leakage probes need at least two rows".into()));
    }
    let mut report = LeakageReport { trials, violations: 0, max_change: 0.0 };
    for _ in 0..trials {
        let t_perturb = 1 + rng.below(n - 1);
        let t_check = rng.below(t_perturb);
        let change = leakage_probe(h, boundaries, t_perturb, t_check, params, cfg, rng)?;
        if change != 0.0 {
            report.violations += 1;
        }
        report.max_change = report.max_change.max(change);
    }
    Ok(report)
}

/// Token-level causal encoder: one stream state per layer, with the
/// residual, layer-norm and feed-forward steps applied row by row.
#[derive(Clone, Debug)]
pub struct CausalEncoderStream {
    params: EncoderParams,
    cfg: EncoderConfig,
    layers: Vec<CausalState>,
    t: usize,
}

impl CausalEncoderStream {
    pub fn new(params: EncoderParams, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        params.check(&cfg)?;
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(i, lp)| stream_init(&lp.mixer, &cfg.layer_mixer(i)))
            .collect::<Result<_>>()?;
        Ok(CausalEncoderStream { params, cfg, layers, t: 0 })
    }

    /// Embeds `token` at the next position and runs it through every layer.
    pub fn step(&mut self, token: u32, boundary: bool) -> Result<Vec<f64>> {
        if token as usize >= self.cfg.vocab_size {
            return Err(Error::Input(format!("token id {token} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        if self.t >= self.cfg.max_len {
            return Err(Error::Input(format!("stream exceeds max_len {}", self.cfg.max_len)));
        }
        let mut h: Vec<f64> = self
            .params
            .token_emb
            .row(token as usize)
            .iter()
            .zip(self.params.pos_emb.row(self.t))
            .map(|(a, b)| a + b)
            .collect();
        for (i, (state, lp)) in self.layers.iter_mut().zip(&self.params.layers).enumerate() {
            let mixed = stream_step(state, &h, boundary, &lp.mixer, &self.cfg.layer_mixer(i))?;
            h = sublayers_row(&h, &mixed, lp)?;
        }
        self.t += 1;
        Ok(h)
    }
}

fn sublayers_row(h: &[f64], mixed: &[f64], lp: &crate::encoder::LayerParams) -> Result<Vec<f64>> {
    let d = h.len();
    let sum: Vec<f64> = h.iter().zip(mixed).map(|(a, b)| a + b).collect();
    let (h1, _) = layer_norm(&Tensor::new(&[1, d], sum)?, &lp.ln1)?;
    let mut ops = OpCounter::new();
    let act = lp.ffn_in.apply(&h1, &mut ops)?.map(gelu);
    let mut r = lp.ffn_out.apply(&act, &mut ops)?;
    r.add_assign(&h1)?;
    Ok(layer_norm(&r, &lp.ln2)?.0.into_data())
}

/// Batch reference for [`CausalEncoderStream`]: each layer's mixer is the
/// prefix-recomputed [`batch_causal`].
pub fn batch_causal_encode(
    tokens: &[u32],
    boundaries: &[bool],
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    let n = tokens.len();
    let mut h = Tensor::zeros(&[n, cfg.d]);
    for (t, &tok) in tokens.iter().enumerate() {
        for j in 0..cfg.d {
            h.row_mut(t)[j] = params.token_emb.at(tok as usize, j) + params.pos_emb.at(t, j);
        }
    }
    for (i, lp) in params.layers.iter().enumerate() {
        let mixed = batch_causal(&h, boundaries, &lp.mixer, &cfg.layer_mixer(i))?;
        let rows = (0..n).map(|t| sublayers_row(h.row(t), mixed.row(t), lp)).collect::<Result<Vec<_>>>()?;
        h = Tensor::from_rows(&rows)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::mix_fused;
    use crate::segment::SegmentMap;

    fn setup(d: usize, window: usize, variant: Variant, seed: u64) -> (ProjectionSet, MixerConfig, SeededRng) {
        let mut rng = SeededRng::new(seed);
        let params = ProjectionSet::random_with_bias(d, true, 0.5, &mut rng);
        let cfg = MixerConfig { lmp_window: window, ..MixerConfig::new(d, 1) }.with_variant(variant);
        (params, cfg, rng)
    }

    fn random_boundaries(n: usize, rng: &mut SeededRng) -> Vec<bool> {
        (0..n).map(|t| t == 0 || rng.bernoulli(0.2)).collect()
    }

    fn stream_all(h: &Tensor, b: &[bool], params: &ProjectionSet, cfg: &MixerConfig) -> Tensor {
        let mut s = CausalStream::new(params.clone(), cfg.clone()).unwrap();
        let rows: Vec<Vec<f64>> = (0..h.rows()).map(|t| s.step(h.row(t), b[t]).unwrap()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn recursion_instances() {
        let (mut params, cfg, _) = setup(1, 3, Variant::NoSsGa, 1);
        params.query = Affine::identity(1);
        params.segment = Affine::identity(1);
        let mut st = stream_init(&params, &cfg).unwrap();
        st.t = 3;
        st.running_mean = vec![2.0];
        st.seg_running_max = vec![5.0];
        stream_step(&mut st, &[4.0], false, &params, &cfg).unwrap();
        assert_eq!(st.running_mean, vec![2.5]);
        st.seg_running_max = vec![5.0];
        stream_step(&mut st, &[3.0], false, &params, &cfg).unwrap();
        assert_eq!(st.seg_running_max, vec![5.0]);
    }

    #[test]
    fn init_contract() {
        let (params, cfg, _) = setup(4, 3, Variant::NoSsGa, 2);
        let a = stream_init(&params, &cfg).unwrap();
        assert_eq!(a, stream_init(&params, &cfg).unwrap());
        assert_eq!(a.t, 0);
        assert!(a.seg_running_max.iter().all(|v| *v == f64::NEG_INFINITY));
        assert!(a.running_mean.iter().all(|v| *v == 0.0));
        for v in [Variant::Full, Variant::NoSmp, Variant::NoLmp, Variant::GaOnly] {
            let err = stream_init(&params, &cfg.clone().with_variant(v)).unwrap_err();
            assert!(matches!(err, Error::Config(ref m) if m.contains("cannot stream")), "{err}");
        }
        let tmp = MixerConfig { tmp_enabled: true, ..cfg };
        assert!(stream_init(&params, &tmp).is_err());
    }

    #[test]
    fn single_step_equals_batch_length_one() {
        let (params, cfg, mut rng) = setup(5, 3, Variant::NoSsGa, 3);
        let h = Tensor::random_normal(&[1, 5], 1.0, &mut rng);
        let batch = mix_fused(&h, &params, &SegmentMap::whole(1).unwrap(), &cfg).unwrap().p;
        let got = stream_all(&h, &[true], &params, &cfg);
        for (a, b) in got.data().iter().zip(batch.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stream_matches_prefix_recomputation() {
        for (i, v) in [Variant::NoSsGa, Variant::NoGa].into_iter().enumerate() {
            for window in [1, 3, 5] {
                let (params, cfg, mut rng) = setup(6, window, v, 10 + i as u64);
                let h = Tensor::random_normal(&[24, 6], 1.0, &mut rng);
                let b = random_boundaries(24, &mut rng);
                let streamed = stream_all(&h, &b, &params, &cfg);
                let batch = batch_causal(&h, &b, &params, &cfg).unwrap();
                for (x, y) in streamed.data().iter().zip(batch.data()) {
                    assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{v:?} w={window}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn max_paths_are_exact() {
        // without the mean branch, every value is a max of identical
        // projections, so agreement is bitwise
        let (params, cfg, mut rng) = setup(4, 3, Variant::NoGa, 20);
        let h = Tensor::random_normal(&[30, 4], 1.0, &mut rng);
        let b = random_boundaries(30, &mut rng);
        assert_eq!(stream_all(&h, &b, &params, &cfg), batch_causal(&h, &b, &params, &cfg).unwrap());
    }

    #[test]
    fn last_row_equals_batch_mixer_on_prefix() {
        // the final emission sees the whole sequence, so it must equal the
        // ordinary no_ss_ga mixer at the last row once the local window is
        // one-sided, which holds for window 1
        let (params, cfg, mut rng) = setup(4, 1, Variant::NoSsGa, 21);
        let h = Tensor::random_normal(&[9, 4], 1.0, &mut rng);
        let b: Vec<bool> = (0..9).map(|t| t % 3 == 0).collect();
        let streamed = stream_all(&h, &b, &params, &cfg);
        let seg = SegmentMap::from_ids(&segment_ids_from_flags(&b)).unwrap();
        let batch = mix_fused(&h, &params, &seg, &cfg).unwrap().p;
        for j in 0..4 {
            assert!((streamed.at(8, j) - batch.at(8, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_is_bitwise() {
        let (params, cfg, mut rng) = setup(4, 3, Variant::NoSsGa, 22);
        let h = Tensor::random_normal(&[40, 4], 1.0, &mut rng);
        let b = random_boundaries(40, &mut rng);
        assert_eq!(stream_all(&h, &b, &params, &cfg), stream_all(&h, &b, &params, &cfg));
        let mut s = CausalStream::new(params.clone(), cfg.clone()).unwrap();
        let first: Vec<_> = (0..40).map(|t| s.step(h.row(t), b[t]).unwrap()).collect();
        s.reset();
        let second: Vec<_> = (0..40).map(|t| s.step(h.row(t), b[t]).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn buffer_is_bounded() {
        let (params, cfg, mut rng) = setup(3, 5, Variant::NoSsGa, 23);
        let mut s = CausalStream::new(params, cfg).unwrap();
        for _ in 0..100 {
            let row: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            s.step(&row, rng.bernoulli(0.1)).unwrap();
            assert!(s.state().lmp_buffer.len() <= 4);
        }
        assert_eq!(s.state().t, 100);
    }

    #[test]
    fn leakage_examples() {
        let (params, cfg, mut rng) = setup(4, 3, Variant::NoSsGa, 24);
        let h = Tensor::random_normal(&[10, 4], 1.0, &mut rng);
        let b = random_boundaries(10, &mut rng);
        assert_eq!(leakage_probe(&h, &b, 9, 8, &params, &cfg, &mut rng).unwrap(), 0.0);
        assert_eq!(leakage_probe(&h, &b, 4, 3, &params, &cfg, &mut rng).unwrap(), 0.0);
        assert!(leakage_probe(&h, &b, 3, 3, &params, &cfg, &mut rng).is_err());
        let r = leakage_trials(&h, &b, 50, &params, &cfg, &mut rng).unwrap();
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn non_finite_row_rejected() {
        let (params, cfg, _) = setup(2, 3, Variant::NoSsGa, 25);
        let mut s = CausalStream::new(params, cfg).unwrap();
        assert_eq!(s.step(&[f64::NAN, 0.0], false), Err(Error::NonFinite("stream row")));
        assert!(s.step(&[0.0], false).is_err());
    }

    #[test]
    fn f32_stream_tracks_f64() {
        let (params, cfg, mut rng) = setup(4, 3, Variant::NoSsGa, 26);
        let h = Tensor::random_normal(&[16, 4], 1.0, &mut rng);
        let b = random_boundaries(16, &mut rng);
        let exact = stream_all(&h, &b, &params, &cfg);
        let mut s = CausalStream::new(params.cast::<f32>(), cfg).unwrap();
        let h32 = h.cast::<f32>();
        for t in 0..16 {
            let out = s.step(h32.row(t), b[t]).unwrap();
            for (a, &e) in out.iter().zip(exact.row(t)) {
                assert!((*a as f64 - e).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn encoder_stream_matches_batch_reference() {
        let mut cfg = EncoderConfig::new(9, 32, 6, 3, 2);
        cfg.mixer = MixerConfig::new(6, 2).with_variant(Variant::NoSsGa);
        let mut rng = SeededRng::new(27);
        let params = EncoderParams::init(&cfg, &mut rng).unwrap();
        let tokens: Vec<u32> = (0..20).map(|_| rng.below(9) as u32).collect();
        let b = random_boundaries(20, &mut rng);
        let mut s = CausalEncoderStream::new(params.clone(), cfg.clone()).unwrap();
        let streamed: Vec<Vec<f64>> = tokens.iter().zip(&b).map(|(&t, &bd)| s.step(t, bd).unwrap()).collect();
        let batch = batch_causal_encode(&tokens, &b, &params, &cfg).unwrap();
        for (t, row) in streamed.iter().enumerate() {
            for (x, y) in row.iter().zip(batch.row(t)) {
                assert!((x - y).abs() < 1e-10, "t={t}: {x} vs {y}");
            }
        }
        assert!(s.step(9, false).is_err());
    }
}
