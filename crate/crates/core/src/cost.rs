//! Multiplication accounting.
//!
//! Counted: products inside matrix products, attention scores, attention
//! weighted sums and Hadamard products. Not counted: scalar normalisations
//! (division by the sequence length, the attention scale, softmax) and bias
//! additions. Under this convention the mixer's instrumented count equals the
//! closed forms in [`count_mults`].

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{matmul, Real, Tensor};

/// Which execution order the mixer follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    /// Projections of every row first, then pooling, then two separate
    /// Hadamard products in the fusion.
    Naive,
    /// Pool-then-project for the global query and add-then-multiply fusion.
    Fused,
}

/// Per-call multiplication counter. Not shared between calls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    mults: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mults(&self) -> u64 {
        self.mults
    }

    pub fn record(&mut self, n: usize) {
        self.mults += n as u64;
    }

    pub fn matmul<T: Real>(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let out = matmul(a, b)?;
        let (m, k) = a.dims2()?;
        let n = b.shape()[1];
        self.record(m * k * n);
        Ok(out)
    }
}

/// Closed-form multiplication count of one full-variant mixer forward.
///
/// Naive: `6Nd² + 4Nd`. Fused: `(5N+1)d² + 3Nd`.
pub fn count_mults(n: u64, d: u64, path: Path) -> u64 {
    match path {
        Path::Naive => 6 * n * d * d + 4 * n * d,
        Path::Fused => (5 * n + 1) * d * d + 3 * n * d,
    }
}

/// Closed form for the reference self-attention layer: four `d×d`
/// projections plus `QKᵀ` and `A·V`.
pub fn count_mults_attention(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert_eq!(count_mults(512, 64, Path::Fused), 10_588_160);
        assert_eq!(count_mults(512, 64, Path::Naive), 12_713_984);
        assert_eq!(count_mults(1, 1, Path::Fused), 9);
    }

    #[test]
    fn cost_is_affine_in_length() {
        for d in [1, 8, 64] {
            for n in [1, 7, 64, 512] {
                for path in [Path::Naive, Path::Fused] {
                    let c = |m| count_mults(m, d, path);
                    assert_eq!(c(2 * n) - c(n), c(3 * n) - c(2 * n));
                }
            }
        }
    }

    #[test]
    fn counter_tracks_matmul() {
        let mut ops = OpCounter::new();
        ops.matmul(&Tensor::<f64>::zeros(&[3, 4]), &Tensor::zeros(&[4, 5])).unwrap();
        assert_eq!(ops.mults(), 60);
    }
}
