// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat parameter storage and optimizers shared by the VAE detector, the
//! attention classifier and the linear baseline.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A named, row-major parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(name: &str, shape: &[usize], value: f64) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    /// Glorot-uniform draw in `(-r, r)`, `r = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<R: Rng>(name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-r..r)).collect();
        Self { name: name.to_string(), shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayView2::from_shape((r, c), &self.data).expect("tensor shape")
    }

    pub fn view1_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[..])
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayViewMut2::from_shape((r, c), &mut self.data).expect("tensor shape")
    }

    /// Treats a 3-D tensor `[a, b, c]` as `a` stacked `b x c` matrices.
    pub fn slab(&self, i: usize) -> ArrayView2<'_, f64> {
        let (b, c) = (self.shape[1], self.shape[2]);
        ArrayView2::from_shape((b, c), &self.data[i * b * c..(i + 1) * b * c]).expect("tensor shape")
    }

    pub fn slab_mut(&mut self, i: usize) -> ArrayViewMut2<'_, f64> {
        let (b, c) = (self.shape[1], self.shape[2]);
        ArrayViewMut2::from_shape((b, c), &mut self.data[i * b * c..(i + 1) * b * c]).expect("tensor shape")
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            other => panic!("tensor {} has shape {other:?}, expected 2-D", self.name),
        }
    }
}

/// An ordered list of tensors; the order is part of the persisted format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamList {
    pub tensors: Vec<Tensor>,
}

impl ParamList {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.name, &t.shape)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamList) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= alpha;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Mutable access to the `i`-th scalar in flat order.
    pub fn scalar_mut(&mut self, mut i: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if i < t.data.len() {
                return &mut t.data[i];
            }
            i -= t.data.len();
        }
        panic!("scalar index out of range");
    }

    pub fn shapes_match(&self, other: &ParamList) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// SGD with classical (heavy-ball) momentum: `v = mu v + g; p -= lr v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<ParamList>,
}

impl MomentumSgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate, momentum, velocity: None }
    }

    pub fn step(&mut self, params: &mut ParamList, grads: &ParamList) {
        let v = self.velocity.get_or_insert_with(|| grads.zeros_like());
        v.scale(self.momentum);
        v.axpy(1.0, grads);
        params.axpy(-self.learning_rate, v);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy of a logit against a soft target.
#[inline]
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    // -[y ln p + (1-y) ln(1-p)], ln p = -softplus(-z), ln(1-p) = -softplus(z)
    target * softplus(-logit) + (1.0 - target) * softplus(logit)
}

/// Relative error between two gradient vectors, `|a - b| / max(|a|, |b|)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central finite-difference gradient of `loss` with respect to every
/// scalar of `params`.
pub fn numeric_gradient<F>(params: &ParamList, h: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&ParamList) -> f64,
{
    let mut p = params.clone();
    (0..params.scalar_count())
        .map(|i| {
            let orig = *p.scalar_mut(i);
            *p.scalar_mut(i) = orig + h;
            let up = loss(&p);
            *p.scalar_mut(i) = orig - h;
            let down = loss(&p);
            *p.scalar_mut(i) = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
