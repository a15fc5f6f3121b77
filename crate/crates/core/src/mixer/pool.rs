//! Max-pooling kernels. Each returns the pooled values plus the absolute row
//! index that won every output element (lowest index on ties), which is what
//! the backward pass routes gradient to.

use crate::error::{Error, Result};
use crate::segment::SegmentMap;
use crate::tensor::{Real, Tensor};

/// Pooled values and, per output element, the winning input row.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled<T> {
    pub values: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Segment max-pooling: one `d`-vector per segment.
pub fn smp<T: Real>(h_s: &Tensor<T>, seg: &SegmentMap) -> Result<Pooled<T>> {
    let (n, d) = h_s.dims2()?;
    if seg.len() != n {
        return Err(Error::shape(format!("segment map covers {} tokens, input has {n}", seg.len())));
    }
    let k = seg.num_segments();
    let mut values = Tensor::full(&[k, d], T::neg_infinity());
    let mut argmax = vec![0usize; k * d];
    for s in 0..k {
        let range = seg.range(s);
        let start = range.start;
        for r in range {
            let row = h_s.row(r);
            let dst = values.row_mut(s);
            for j in 0..d {
                if r == start || row[j] > dst[j] {
                    dst[j] = row[j];
                    argmax[s * d + j] = r;
                }
            }
        }
    }
    Ok(Pooled { values: values.check_finite("smp")?, argmax })
}

/// Sliding max over `[n - w/2, n + w/2] ∩ [0, N)`. Truncated boundary
/// windows behave like `-∞` padding.
pub fn lmp<T: Real>(h_l: &Tensor<T>, window: usize, stride: usize) -> Result<Pooled<T>> {
    if window % 2 == 0 {
        return Err(Error::config(format!("local pooling window must be odd, got {window}")));
    }
    if stride != 1 {
        return Err(Error::config(format!("local pooling stride must be 1, got {stride}")));
    }
    let (n, d) = h_l.dims2()?;
    let half = window / 2;
    let mut values = Tensor::zeros(&[n, d]);
    let mut argmax = vec![0usize; n * d];
    for t in 0..n {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(n.saturating_sub(1));
        window_max(h_l, lo..=hi, t, &mut values, &mut argmax);
    }
    Ok(Pooled { values, argmax })
}

/// Dilation used by tree max-pooling on 1-based layer `layer_index`.
pub fn tmp_dilation(layer_index: usize) -> usize {
    let shift = layer_index.saturating_sub(1);
    if shift >= usize::BITS as usize {
        usize::MAX
    } else {
        1usize << shift
    }
}

/// Longest token distance linked by `layers` stacked tree max-pooling layers:
/// each side reaches `Σ 2^(l-1) = 2^layers - 1`.
pub fn tmp_reach(layers: u32) -> u64 {
    (1u64 << (layers + 1)) - 2
}

/// Tree max-pooling: `max(H[n-δ], H[n], H[n+δ])` over in-range neighbours,
/// with `δ = 2^(layer_index-1)`.
pub fn tmp<T: Real>(h: &Tensor<T>, layer_index: usize) -> Result<Pooled<T>> {
    if layer_index == 0 {
        return Err(Error::config("layer_index is 1-based"));
    }
    let (n, d) = h.dims2()?;
    let delta = tmp_dilation(layer_index);
    let mut values = Tensor::zeros(&[n, d]);
    let mut argmax = vec![0usize; n * d];
    let mut rows = Vec::with_capacity(3);
    for t in 0..n {
        rows.clear();
        if let Some(prev) = t.checked_sub(delta) {
            rows.push(prev);
        }
        rows.push(t);
        if let Some(next) = t.checked_add(delta).filter(|&m| m < n) {
            rows.push(next);
        }
        window_max(h, rows.iter().copied(), t, &mut values, &mut argmax);
    }
    Ok(Pooled { values, argmax })
}

/// Writes the max over `rows` (ascending) into output row `t`.
fn window_max<T: Real>(
    src: &Tensor<T>,
    rows: impl IntoIterator<Item = usize>,
    t: usize,
    values: &mut Tensor<T>,
    argmax: &mut [usize],
) {
    let d = values.shape()[1];
    let dst = values.row_mut(t);
    let idx = &mut argmax[t * d..(t + 1) * d];
    let mut rows = rows.into_iter();
    let first = rows.next().expect("window has at least the centre row");
    dst.copy_from_slice(src.row(first));
    idx.iter_mut().for_each(|i| *i = first);
    for r in rows {
        for ((v, i), &x) in dst.iter_mut().zip(idx.iter_mut()).zip(src.row(r)) {
            if x > *v {
                *v = x;
                *i = r;
            }
        }
    }
}
