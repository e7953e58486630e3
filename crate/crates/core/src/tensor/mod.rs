//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value. Differentiation happens on a [`Tape`]: every
//! op appends a node, and since nodes can only refer to earlier nodes the
//! tape order is already topological, so [`Var::backward`] is a single reverse
//! sweep that visits each reachable node once.

mod loss;
mod nn;
mod optim;
mod tape;

pub use loss::{dispersion_loss, mean_squared_norm, DispersionPairs};
pub use nn::{gelu, gelu_grad, Attention, InputLayout, Linear, Mlp, MlpOutput, VelocityModel};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Row-major matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// `(rows, cols)` of a 2D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[self.shape.len() - 1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Identity of a trainable tensor across tapes and optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: ParamId::fresh(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }
}

impl Clone for Parameter {
    /// Clones get a fresh identity so the copy trains independently.
    fn clone(&self) -> Self {
        Self::new(self.value.clone())
    }
}

impl PartialEq for Parameter {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

/// Anything exposing named trainable tensors in a fixed order.
///
/// `named_params` and `params_mut` must list parameters in the same order.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Parameter)>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn num_params(&self) -> usize {
        self.named_params()
            .iter()
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect()
    }

    /// Overwrites parameters from `(name, tensor)` pairs; names and shapes
    /// must match exactly.
    fn load_snapshot(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::shape(format!(
                "model has {} tensors, checkpoint has {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::shape(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        for (p, (_, t)) in self.params_mut().into_iter().zip(tensors) {
            p.value = t.clone();
        }
        Ok(())
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    params: Vec<(String, &'a Parameter)>,
) -> impl Iterator<Item = (String, &'a Parameter)> + use<'a> {
    let prefix = prefix.to_string();
    params
        .into_iter()
        .map(move |(n, p)| (format!("{prefix}.{n}"), p))
}

/// `out[m, n] (+)= a[m, k] * b[k, n]` with optional transposes of the inputs
/// given their stored (untransposed) shapes.
pub(crate) fn matmul_into(
    a: &[f64],
    a_shape: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_shape: (usize, usize),
    trans_b: bool,
    out: &mut [f64],
) {
    let (m, k) = if trans_a {
        (a_shape.1, a_shape.0)
    } else {
        a_shape
    };
    let n = if trans_b { b_shape.0 } else { b_shape.1 };
    let transposed_a;
    let a: &[f64] = if trans_a {
        let mut t = vec![0.0; m * k];
        for p in 0..k {
            for i in 0..m {
                t[i * k + p] = a[p * m + i];
            }
        }
        transposed_a = t;
        &transposed_a
    } else {
        a
    };
    let transposed_b;
    let b: &[f64] = if trans_b {
        let mut t = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                t[p * n + j] = b[j * k + p];
            }
        }
        transposed_b = t;
        &transposed_b
    } else {
        b
    };
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.dims2().unwrap(), (2, 2));
        assert_eq!(t.at2(1, 0), 3.0);
        assert!(Tensor::scalar(2.0).item().is_ok());
        assert!(t.item().is_err());
    }

    #[test]
    fn matmul_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut out = [0.0; 4];
        matmul_into(&a, (2, 3), false, &b, (3, 2), false, &mut out);
        assert_eq!(out, [4.0, 5.0, 10.0, 11.0]);
        // a * a^T
        let mut out = [0.0; 4];
        matmul_into(&a, (2, 3), false, &a, (2, 3), true, &mut out);
        assert_eq!(out, [14.0, 32.0, 32.0, 77.0]);
        // a^T * a is 3x3
        let mut out = [0.0; 9];
        matmul_into(&a, (2, 3), true, &a, (2, 3), false, &mut out);
        assert_eq!(out[0], 17.0);
        assert_eq!(out[8], 45.0);
    }

    #[test]
    fn cloned_parameters_get_new_ids() {
        let p = Parameter::new(Tensor::zeros(&[2]));
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert_eq!(p, q);
    }
}
