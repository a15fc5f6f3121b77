//! Dense row-major tensors of rank 1 to 3 and the handful of kernels the
//! mixer needs: matmul, softmax, mean and max reductions.
//!
//! Every kernel checks its output for NaN/Inf and reports it as
//! [`Error::NonFinite`] instead of passing it on.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (speed paths) and
/// `f64` (verification paths).
pub trait Real:
    Float + FromPrimitive + Sum + AddAssign + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the float type")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::shape(format!("rank {} not in 1..=3", shape.len())));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_rank(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_rank(shape).expect("tensor rank");
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Builds an `rows × cols` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!("ragged rows: {} vs {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn random_normal(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = T::lit(rng.normal() * std);
        }
        t
    }

    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = T::lit(rng.uniform(lo, hi));
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_rank(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64().unwrap())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += other` elementwise, same shape required.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} += {:?}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Outer/axis/inner decomposition used by axis-wise kernels.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| *i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// `a[m×k] · b[k×n]`, accumulated in ascending `k` order.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![T::zero(); m * n];
    for (out_row, a_row) in out.chunks_exact_mut(n.max(1)).zip(a.data.chunks_exact(k.max(1))) {
        for (&a_ip, b_row) in a_row.iter().zip(b.data.chunks_exact(n.max(1))) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }.check_finite("matmul")
}

/// Numerically stable softmax along `axis` (max subtracted before `exp`).
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mx = (0..len).map(|a| x.data[idx(a)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for a in 0..len {
                let e = (x.data[idx(a)] - mx).exp();
                out.data[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out.data[idx(a)] = out.data[idx(a)] / total;
            }
        }
    }
    out.check_finite("softmax")
}

/// Arithmetic mean along `axis`; the reduced axis is dropped.
pub fn reduce_mean<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let count = T::from_usize(len).unwrap();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for a in 0..len {
            let src = &x.data[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        dst.iter_mut().for_each(|v| *v = *v / count);
    }
    Tensor { shape: reduced_shape(&x.shape, axis), data: out }.check_finite("reduce_mean")
}

/// Maximum along `axis` plus the winning index per output element.
/// Ties go to the lowest index.
pub fn reduce_max_argmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let mut values = vec![T::neg_infinity(); outer * inner];
    let mut index = vec![0usize; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (i, &s) in src.iter().enumerate() {
                let slot = o * inner + i;
                if a == 0 || s > values[slot] {
                    values[slot] = s;
                    index[slot] = a;
                }
            }
        }
    }
    let t = Tensor { shape: reduced_shape(&x.shape, axis), data: values }.check_finite("reduce_max")?;
    Ok((t, index))
}

/// Seeded, portable generator. ChaCha8 gives the same stream on every
/// platform for a given seed.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; `fork(k)` is stable for a given parent seed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mixed = self.seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        SeededRng::new(mixed.rotate_left(17) ^ 0xD1B5_4A32_D192_ED03)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let r = matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(3);
        let a = Tensor::<f64>::random_normal(&[7, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::random_normal(&[5, 3], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_is_exact_on_both_sides() {
        let mut rng = SeededRng::new(11);
        let a = Tensor::<f64>::random_normal(&[4, 4], 1.0, &mut rng);
        let i = Tensor::identity(4);
        assert_eq!(matmul(&i, &a).unwrap(), a);
        assert_eq!(matmul(&a, &i).unwrap(), a);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]), 0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] >= 0.0);

        let s = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]), 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, &v) in s.data().iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_middle_axis_sums_to_one() {
        let mut rng = SeededRng::new(5);
        let x = Tensor::<f64>::random_normal(&[2, 4, 3], 2.0, &mut rng);
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let total: f64 = (0..4).map(|a| s.data()[(o * 4 + a) * 3 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_empty_and_nan() {
        let e = Tensor::<f64>::new(&[2, 0], vec![]).unwrap();
        assert_eq!(softmax(&e, 1), Err(Error::EmptySequence));
        let n = Tensor::vector(vec![f64::NAN, 1.0]);
        assert!(matches!(softmax(&n, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reduce_mean_cases() {
        assert_eq!(reduce_mean(&m(&[&[1.0, 3.0], &[3.0, 1.0]]), 0).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(reduce_mean(&m(&[&[5.0, 7.0]]), 0).unwrap().data(), &[5.0, 7.0]);
        let e = Tensor::<f64>::new(&[0, 3], vec![]).unwrap();
        assert_eq!(reduce_mean(&e, 0), Err(Error::EmptySequence));
    }

    fn pairwise(v: &[f64]) -> f64 {
        match v.len() {
            0 => 0.0,
            1 => v[0],
            n => pairwise(&v[..n / 2]) + pairwise(&v[n / 2..]),
        }
    }

    #[test]
    fn reduce_mean_matches_pairwise_sum() {
        let mut rng = SeededRng::new(9);
        let x = Tensor::<f64>::random_normal(&[9, 4], 1.0, &mut rng);
        let mean = reduce_mean(&x, 0).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..9).map(|i| x.at(i, j)).collect();
            assert!((mean.data()[j] - pairwise(&col) / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_max_cases() {
        let (v, i) = reduce_max_argmax(&m(&[&[1.0, 5.0], &[3.0, 2.0]]), 0).unwrap();
        assert_eq!(v.data(), &[3.0, 5.0]);
        assert_eq!(i, vec![1, 0]);
        let (v, i) = reduce_max_argmax(&m(&[&[2.0], &[2.0]]), 0).unwrap();
        assert_eq!((v.data(), i), (&[2.0][..], vec![0]));
    }

    #[test]
    fn reduce_max_matches_scan() {
        let mut rng = SeededRng::new(21);
        let x = Tensor::<f64>::random_normal(&[8, 3], 1.0, &mut rng);
        let (v, idx) = reduce_max_argmax(&x, 0).unwrap();
        for j in 0..3 {
            let mut best = 0;
            for i in 1..8 {
                if x.at(i, j) > x.at(best, j) {
                    best = i;
                }
            }
            assert_eq!(idx[j], best);
            assert_eq!(v.data()[j], x.at(best, j));
        }
    }

    #[test]
    fn rng_is_reproducible() {
        let a = Tensor::<f64>::random_normal(&[3, 3], 1.0, &mut SeededRng::new(42));
        let b = Tensor::<f64>::random_normal(&[3, 3], 1.0, &mut SeededRng::new(42));
        assert_eq!(a, b);
        let c = Tensor::<f64>::random_normal(&[3, 3], 1.0, &mut SeededRng::new(43));
        assert_ne!(a, c);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
                let x = Tensor::vector(v.clone());
                let shifted = Tensor::vector(v.iter().map(|a| a + c).collect());
                let a = softmax(&x, 0).unwrap();
                let b = softmax(&shifted, 0).unwrap();
                for (p, q) in a.data().iter().zip(b.data()) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            }

            #[test]
            fn max_dominates_column(rows in 1usize..10, cols in 1usize..5, seed in any::<u64>()) {
                let x = Tensor::<f64>::random_normal(&[rows, cols], 1.0, &mut SeededRng::new(seed));
                let (v, idx) = reduce_max_argmax(&x, 0).unwrap();
                for j in 0..cols {
                    prop_assert_eq!(x.at(idx[j], j), v.data()[j]);
                    for i in 0..rows {
                        prop_assert!(x.at(i, j) <= v.data()[j]);
                    }
                }
            }
        }
    }
}
