use serde::{Deserialize, Serialize};

use crate::cost::OpCounter;
use crate::error::{Error, Result};
use crate::tensor::{Real, SeededRng, Tensor};

/// `x · weight + bias` with `weight: in × out` and `bias: out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct Affine<T = f64> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Affine<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (_, out) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::shape(format!("bias {:?} for {out} outputs", bias.shape())));
        }
        Ok(Affine { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Affine { weight: Tensor::zeros(&[inputs, outputs]), bias: Tensor::zeros(&[outputs]) }
    }

    pub fn identity(d: usize) -> Self {
        Affine { weight: Tensor::identity(d), bias: Tensor::zeros(&[d]) }
    }

    /// Normal weights with the given std, zero bias.
    pub fn random(inputs: usize, outputs: usize, std: f64, rng: &mut SeededRng) -> Self {
        Affine {
            weight: Tensor::random_normal(&[inputs, outputs], std, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply(&self, x: &Tensor<T>, ops: &mut OpCounter) -> Result<Tensor<T>> {
        let mut y = ops.matmul(x, &self.weight)?;
        let b = self.bias.data();
        let cols = b.len();
        for row in y.data_mut().chunks_exact_mut(cols.max(1)) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y.check_finite("affine")
    }

    pub fn cast<U: Real>(&self) -> Affine<U> {
        Affine { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

impl Affine<f64> {
    /// Backward of `y = x·W + b`: accumulates `dW += xᵀ·dy`, `db += Σ dy`
    /// into `grad` and returns `dx = dy·Wᵀ`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Affine) -> Result<Tensor> {
        let dw = crate::tensor::matmul(&x.transpose()?, dy)?;
        grad.weight.add_assign(&dw)?;
        for row in dy.data().chunks_exact(self.outputs().max(1)) {
            for (g, &v) in grad.bias.data_mut().iter_mut().zip(row) {
                *g += v;
            }
        }
        crate::tensor::matmul(dy, &self.weight.transpose()?)
    }
}
