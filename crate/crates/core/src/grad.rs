//! Hand-written backward pass for the mixer and a central finite-difference
//! checker.

use serde::{Deserialize, Serialize};

use crate::affine::Affine;
use crate::cost::Path;
use crate::error::{Error, Result};
use crate::mixer::{MixerTape, ProjectionSet};
use crate::tensor::Tensor;

/// Forward record consumed by [`backward_block`].
pub type BlockTape = MixerTape<f64>;

/// Gradients of a scalar loss w.r.t. the mixer input and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads {
    pub input: Tensor,
    /// Same layout as the parameters; with shared key/value the value
    /// gradient is accumulated into `key`.
    pub params: ProjectionSet,
}

/// Backpropagates `d_out` (gradient w.r.t. the mixer output) through a
/// recorded forward pass.
pub fn backward_block(tape: &BlockTape, params: &ProjectionSet, d_out: &Tensor) -> Result<BlockGrads> {
    let (n, d) = tape.output.dims2()?;
    if d_out.shape() != [n, d] {
        return Err(Error::shape(format!("d_out {:?} vs output [{n}, {d}]", d_out.shape())));
    }
    if params.shares_kv() != tape.config.share_kv || params.dim() != d {
        return Err(Error::State("parameters do not match the tape".into()));
    }
    let cfg = &tape.config;
    let seg = &tape.segments;
    let h = &tape.input;
    let mut grads = params.zeros_like();
    let mut d_input = Tensor::zeros(&[n, d]);

    // fusion
    let global = tape.fusion_global();
    let mut d_global = global.map(|_| vec![0.0; d]);
    let mut d_seg_max = tape.seg_max.as_ref().map(|_| Tensor::<f64>::zeros(&[seg.num_segments(), d]));
    if let Some(h_o) = &tape.out_proj {
        let mut d_h_o = Tensor::zeros(&[n, d]);
        for t in 0..n {
            let k = seg.segment_of(t);
            let (dp, ho) = (d_out.row(t), h_o.row(t));
            let dho = d_h_o.row_mut(t);
            for j in 0..d {
                if let (Some(g), Some(dg)) = (global, d_global.as_mut()) {
                    dho[j] += dp[j] * g.data()[j];
                    dg[j] += dp[j] * ho[j];
                }
                if let (Some(s), Some(ds)) = (&tape.seg_max, d_seg_max.as_mut()) {
                    dho[j] += dp[j] * s.values.at(k, j);
                    ds.row_mut(k)[j] += dp[j] * ho[j];
                }
            }
        }
        d_input.add_assign(&params.output.backward(h, &d_h_o, &mut grads.output)?)?;
    }

    // local and tree pooling share the local projection
    if tape.local_max.is_some() || tape.tree_max.is_some() {
        let mut d_h_l = Tensor::zeros(&[n, d]);
        for pooled in [&tape.local_max, &tape.tree_max].into_iter().flatten() {
            for (i, &dp) in d_out.data().iter().enumerate() {
                let j = i % d;
                d_h_l.data_mut()[pooled.argmax[i] * d + j] += dp;
            }
        }
        d_input.add_assign(&params.local.backward(h, &d_h_l, &mut grads.local)?)?;
    }

    if let (Some(pooled), Some(ds)) = (&tape.seg_max, &d_seg_max) {
        let mut d_h_s = Tensor::zeros(&[n, d]);
        for (i, &g) in ds.data().iter().enumerate() {
            d_h_s.data_mut()[pooled.argmax[i] * d + i % d] += g;
        }
        d_input.add_assign(&params.segment.backward(h, &d_h_s, &mut grads.segment)?)?;
    }

    // global aggregation
    if let Some(d_global) = d_global {
        let d_g = if cfg.variant.uses_cross_attention() {
            let (d_g, d_key, d_value) = attention_backward(tape, &d_global)?;
            d_input.add_assign(&params.key.backward(h, &d_key, &mut grads.key)?)?;
            let dv_in = match (&params.value, &mut grads.value) {
                (Some(vp), Some(vg)) => vp.backward(h, &d_value, vg)?,
                _ => params.key.backward(h, &d_value, &mut grads.key)?,
            };
            d_input.add_assign(&dv_in)?;
            d_g
        } else {
            d_global
        };
        let inv_n = 1.0 / n as f64;
        match tape.path {
            Path::Naive => {
                let mut d_hq = Tensor::zeros(&[n, d]);
                for t in 0..n {
                    for (o, &g) in d_hq.row_mut(t).iter_mut().zip(&d_g) {
                        *o = g * inv_n;
                    }
                }
                d_input.add_assign(&params.query.backward(h, &d_hq, &mut grads.query)?)?;
            }
            Path::Fused => {
                let mean = tape.input_mean.as_ref().ok_or_else(|| Error::State("fused tape without input mean".into()))?;
                let mean_row = mean.clone().reshape(&[1, d])?;
                let d_g_row = Tensor::new(&[1, d], d_g)?;
                let d_mean = params.query.backward(&mean_row, &d_g_row, &mut grads.query)?;
                for t in 0..n {
                    for (o, &g) in d_input.row_mut(t).iter_mut().zip(d_mean.data()) {
                        *o += g * inv_n;
                    }
                }
            }
        }
    }

    Ok(BlockGrads { input: d_input.check_finite("mixer backward")?, params: grads })
}

/// Backward of the per-head single-query attention. Returns gradients for
/// `g`, the key projection and the value projection.
fn attention_backward(tape: &BlockTape, d_gp: &[f64]) -> Result<(Vec<f64>, Tensor, Tensor)> {
    let missing = || Error::State("tape lacks attention intermediates".into());
    let g = tape.g.as_ref().ok_or_else(missing)?.data();
    let key = tape.key.as_ref().ok_or_else(missing)?;
    let value = tape.value.as_ref().ok_or_else(missing)?;
    let w = tape.attention.as_ref().ok_or_else(missing)?;
    let (n, d) = key.dims2()?;
    let heads = tape.config.heads;
    let dh = tape.config.head_dim();
    let scale = tape.config.attention_scale();

    let mut d_value = Tensor::zeros(&[n, d]);
    let mut d_key = Tensor::zeros(&[n, d]);
    let mut d_g = vec![0.0; d];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        let wh = &w.data()[hd * n..(hd + 1) * n];
        let dw: Vec<f64> = (0..n)
            .map(|t| cols.clone().map(|j| d_gp[j] * value.at(t, j)).sum())
            .collect();
        let mean_dw: f64 = wh.iter().zip(&dw).map(|(a, b)| a * b).sum();
        for t in 0..n {
            let ds = wh[t] * (dw[t] - mean_dw);
            for j in cols.clone() {
                d_value.row_mut(t)[j] = wh[t] * d_gp[j];
                d_key.row_mut(t)[j] = scale * ds * g[j];
                d_g[j] += scale * ds * key.at(t, j);
            }
        }
    }
    Ok((d_g, d_key, d_value))
}

/// Something with named `f64` tensors that can be perturbed coordinate by
/// coordinate.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_coords(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.len());
        total
    }

    /// Flat copy of every coordinate in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }
}

impl ParamSet for Affine {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

impl ParamSet for ProjectionSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.for_each(|name, a| {
            f(&format!("{name}.weight"), &a.weight);
            f(&format!("{name}.bias"), &a.bias);
        });
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.for_each_mut(|name, a| {
            f(&format!("{name}.weight"), &mut a.weight);
            f(&format!("{name}.bias"), &mut a.bias);
        });
    }
}

/// `dst += src`, coordinate by coordinate. Both must share a layout.
pub fn accumulate<P: ParamSet>(dst: &mut P, src: &P) {
    let flat = src.flatten();
    let mut offset = 0;
    dst.visit_mut(&mut |_, t| {
        for (v, s) in t.data_mut().iter_mut().zip(&flat[offset..]) {
            *v += s;
        }
        offset += t.len();
    });
    debug_assert_eq!(offset, flat.len());
}

/// Plain list of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensors(pub Vec<(String, Tensor)>);

impl ParamSet for NamedTensors {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (n, t) in &self.0 {
            f(n, t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (n, t) in &mut self.0 {
            f(n, t);
        }
    }
}

/// Mixer input together with its parameters, so one check covers both.
#[derive(Clone, Debug)]
pub struct BlockInputs {
    pub input: Tensor,
    pub params: ProjectionSet,
}

impl ParamSet for BlockInputs {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("input", &self.input);
        self.params.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("input", &mut self.input);
        self.params.visit_mut(f);
    }
}

/// Scalar value of the checked function plus the argmax winners of every
/// max-pool it went through.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub regime: Vec<usize>,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Probe { value, regime: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub h: f64,
    pub tolerance: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { h: 1e-5, tolerance: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Coordinates over tolerance.
    pub failing: Vec<usize>,
    /// Coordinates where a perturbation changed a max-pool winner; excluded
    /// from the statistics.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub h: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub flagged: usize,
    pub passed: bool,
    pub params: Vec<ParamReport>,
}

/// Denominator floor for [`rel_err`]. Central differences at h = 1e-5 carry
/// roughly 1e-11 of roundoff, so for gradients below this size the ratio
/// would measure that noise rather than the gradient.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a-b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn set_coord<P: ParamSet>(p: &mut P, flat: usize, value: f64) {
    let mut offset = 0;
    p.visit_mut(&mut |_, t| {
        if flat >= offset && flat < offset + t.len() {
            t.data_mut()[flat - offset] = value;
        }
        offset += t.len();
    });
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// Coordinates whose ±h evaluations change a max-pool winner sit on a
/// non-differentiable ridge; they are listed as flagged and left out of the
/// pass/fail decision.
pub fn fd_check<P, F>(mut f: F, params: &P, analytic: &P, opts: FdOptions) -> Result<GradReport>
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> Result<Probe>,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::config(format!("finite-difference step {} outside [1e-7, 1e-3]", opts.h)));
    }
    let mut layout = Vec::new();
    params.visit(&mut |name, t| layout.push((name.to_string(), t.len())));
    let mut grad_layout = Vec::new();
    analytic.visit(&mut |name, t| grad_layout.push((name.to_string(), t.len())));
    if layout != grad_layout {
        return Err(Error::shape("analytic gradient layout differs from parameters"));
    }
    let base_vals = params.flatten();
    let grad_vals = analytic.flatten();
    let base = f(params)?;
    if !base.value.is_finite() {
        return Err(Error::NonFinite("checked function"));
    }

    let mut work = params.clone();
    let mut reports = Vec::with_capacity(layout.len());
    let mut offset = 0;
    let (mut checked, mut flagged_total, mut global_max) = (0, 0, 0.0f64);
    for (name, len) in layout {
        let mut rep = ParamReport {
            name,
            coords: len,
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
            failing: Vec::new(),
            flagged: Vec::new(),
        };
        let mut total = 0.0;
        let mut counted = 0usize;
        for c in 0..len {
            let flat = offset + c;
            let x0 = base_vals[flat];
            set_coord(&mut work, flat, x0 + opts.h);
            let plus = f(&work)?;
            set_coord(&mut work, flat, x0 - opts.h);
            let minus = f(&work)?;
            set_coord(&mut work, flat, x0);
            if !plus.value.is_finite() || !minus.value.is_finite() {
                return Err(Error::NonFinite("checked function"));
            }
            if plus.regime != base.regime || minus.regime != base.regime {
                rep.flagged.push(c);
                continue;
            }
            let fd = (plus.value - minus.value) / (2.0 * opts.h);
            let err = rel_err(fd, grad_vals[flat]);
            if err >= opts.tolerance {
                rep.failing.push(c);
            }
            rep.max_rel_err = rep.max_rel_err.max(err);
            total += err;
            counted += 1;
        }
        rep.mean_rel_err = if counted > 0 { total / counted as f64 } else { 0.0 };
        checked += counted;
        flagged_total += rep.flagged.len();
        global_max = global_max.max(rep.max_rel_err);
        offset += len;
        reports.push(rep);
    }
    let passed = reports.iter().all(|r| r.failing.is_empty());
    Ok(GradReport {
        h: opts.h,
        tolerance: opts.tolerance,
        max_rel_err: global_max,
        checked,
        flagged: flagged_total,
        passed,
        params: reports,
    })
}
