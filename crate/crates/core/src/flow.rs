//! Flow-matching objectives over flat latents.
//!
//! ```text
//! z_t = t z_1 + (1 - t) z_0                 v = z_1 - z_0
//! direct: || v - f(z_x, z_t, t) ||^2         t ~ U[0, 1], z_0 ~ N(0, I)
//! cv:     || v - f(z_x, z_0) ||^2            z_0 ~ N(0, I)
//! cvfs:   || z_1 - f(z_x) ||^2               z_0 = 0
//! ```
//!
//! Inference integrates with left-endpoint Euler; under a fixed start a
//! single evaluation `f(z_x)` is the prediction.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    dispersion_loss, mean_squared_norm, AdamW, AdamWConfig, DispersionPairs, InputLayout,
    MlpOutput, Module, Tape, Tensor, Var, VelocityModel,
};

/// Weight of the dispersion regularizer in the training loss.
pub const DISPERSION_WEIGHT: f64 = 0.5;
/// Temperature of the dispersion regularizer.
pub const DISPERSION_TAU: f64 = 1.0;
pub const DEFAULT_BATCH_SIZE: usize = 32;
/// Learning rate for the small synthetic tasks; the AdamW default is the
/// full-scale value.
pub const TOY_LR: f64 = 3e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    DirectAdapt,
    ConsistentVelocity,
    ConsistentVelocityFixedStart,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [
        ObjectiveKind::DirectAdapt,
        ObjectiveKind::ConsistentVelocity,
        ObjectiveKind::ConsistentVelocityFixedStart,
    ];

    /// CLI spelling: `direct`, `cv`, `cvfs`.
    pub fn name(self) -> &'static str {
        match self {
            Self::DirectAdapt => "direct",
            Self::ConsistentVelocity => "cv",
            Self::ConsistentVelocityFixedStart => "cvfs",
        }
    }

    /// Inputs the velocity model must accept under this objective.
    pub fn layout(self) -> InputLayout {
        match self {
            Self::DirectAdapt => InputLayout::ConditionStateTime,
            Self::ConsistentVelocity => InputLayout::ConditionStart,
            Self::ConsistentVelocityFixedStart => InputLayout::Condition,
        }
    }

    pub fn fixed_start(self) -> bool {
        self == Self::ConsistentVelocityFixedStart
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" | "direct_adapt" | "fm" => Ok(Self::DirectAdapt),
            "cv" | "consistent_velocity" => Ok(Self::ConsistentVelocity),
            "cvfs" | "consistent_velocity_fixed_start" => Ok(Self::ConsistentVelocityFixedStart),
            other => Err(Error::Config(format!(
                "unknown objective '{other}' (direct, cv, cvfs)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowObjective {
    pub kind: ObjectiveKind,
    /// Euler steps used at inference by [`ObjectiveKind::DirectAdapt`].
    pub euler_steps: usize,
}

impl FlowObjective {
    pub fn new(kind: ObjectiveKind, euler_steps: usize) -> Result<Self> {
        if euler_steps == 0 {
            return Err(Error::contract("euler_steps must be at least 1"));
        }
        Ok(Self { kind, euler_steps })
    }

    pub fn direct(euler_steps: usize) -> Result<Self> {
        Self::new(ObjectiveKind::DirectAdapt, euler_steps)
    }

    pub fn cv() -> Self {
        Self {
            kind: ObjectiveKind::ConsistentVelocity,
            euler_steps: 1,
        }
    }

    pub fn cvfs() -> Self {
        Self {
            kind: ObjectiveKind::ConsistentVelocityFixedStart,
            euler_steps: 1,
        }
    }
}

/// One minibatch of flow pairs. `t` has one entry per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub z_x: Tensor,
    pub z_y1: Tensor,
    pub z_y0: Tensor,
    pub t: Vec<f64>,
}

impl FlowBatch {
    pub fn new(z_x: Tensor, z_y1: Tensor, z_y0: Tensor, t: Vec<f64>) -> Result<Self> {
        let (n, _) = z_x.dims2()?;
        let (n1, d1) = z_y1.dims2()?;
        let (n0, d0) = z_y0.dims2()?;
        if n1 != n || n0 != n || d0 != d1 || t.len() != n {
            return Err(Error::shape(format!(
                "batch mismatch: z_x {:?}, z_y1 {:?}, z_y0 {:?}, {} times",
                z_x.shape(),
                z_y1.shape(),
                z_y0.shape(),
                t.len()
            )));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::domain(format!("time {bad} outside [0, 1]")));
        }
        Ok(Self { z_x, z_y1, z_y0, t })
    }

    /// Fixed-start batch: `z_y0 = 0`, `t = 0`.
    pub fn fixed_start(z_x: Tensor, z_y1: Tensor) -> Result<Self> {
        let zeros = Tensor::zeros(z_y1.shape());
        let n = z_y1.shape()[0];
        Self::new(z_x, z_y1, zeros, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `v = z_y1 - z_y0`.
    pub fn velocity_target(&self) -> Tensor {
        let data = self
            .z_y1
            .data()
            .iter()
            .zip(self.z_y0.data())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::new(self.z_y1.shape().to_vec(), data).expect("shape checked at construction")
    }
}

/// `z_t = t z_y1 + (1 - t) z_y0`, row by row.
pub fn interpolate(batch: &FlowBatch) -> Result<Tensor> {
    let (n, d) = batch.z_y1.dims2()?;
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        let t = batch.t[r];
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("time {t} outside [0, 1]")));
        }
        for (a, b) in batch.z_y1.row(r).iter().zip(batch.z_y0.row(r)) {
            out.push(t * a + (1.0 - t) * b);
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Objective term plus the model's hidden activations (for the regularizer).
pub struct ObjectiveOutput<'t> {
    pub loss: Var<'t>,
    pub forward: MlpOutput<'t>,
}

fn require_layout(model: &VelocityModel, kind: ObjectiveKind) -> Result<()> {
    if model.layout != kind.layout() {
        return Err(Error::contract(format!(
            "{kind} needs a {:?} model, got {:?}",
            kind.layout(),
            model.layout
        )));
    }
    Ok(())
}

/// Builds the objective's loss graph on `tape`.
pub fn objective_loss<'t>(
    tape: &'t Tape,
    model: &VelocityModel,
    kind: ObjectiveKind,
    batch: &FlowBatch,
) -> Result<ObjectiveOutput<'t>> {
    require_layout(model, kind)?;
    let forward = match kind {
        ObjectiveKind::DirectAdapt => {
            let z_t = interpolate(batch)?;
            model.forward(tape, &batch.z_x, &z_t, &batch.t)?
        }
        ObjectiveKind::ConsistentVelocity => {
            model.forward(tape, &batch.z_x, &batch.z_y0, &batch.t)?
        }
        ObjectiveKind::ConsistentVelocityFixedStart => {
            if batch.z_y0.data().iter().any(|&v| v != 0.0) {
                return Err(Error::contract("fixed-start objective needs z_y0 = 0"));
            }
            model.forward(tape, &batch.z_x, &batch.z_y0, &batch.t)?
        }
    };
    let target = tape.constant(batch.velocity_target());
    let loss = mean_squared_norm(forward.output, target)?;
    Ok(ObjectiveOutput { loss, forward })
}

/// Mean squared norm of `v - f(z_x, z_t, t)`.
pub fn fm_loss<'t>(tape: &'t Tape, model: &VelocityModel, batch: &FlowBatch) -> Result<Var<'t>> {
    if !model.accepts_time() {
        return Err(Error::contract(
            "flow-matching loss needs a model with a time input",
        ));
    }
    Ok(objective_loss(tape, model, ObjectiveKind::DirectAdapt, batch)?.loss)
}

/// Mean squared norm of `v - f(z_x, z_y0)`.
pub fn cv_loss<'t>(tape: &'t Tape, model: &VelocityModel, batch: &FlowBatch) -> Result<Var<'t>> {
    Ok(objective_loss(tape, model, ObjectiveKind::ConsistentVelocity, batch)?.loss)
}

/// Mean squared norm of `z_y1 - f(z_x)`; rejects a nonzero start.
pub fn cvfs_loss<'t>(tape: &'t Tape, model: &VelocityModel, batch: &FlowBatch) -> Result<Var<'t>> {
    Ok(objective_loss(
        tape,
        model,
        ObjectiveKind::ConsistentVelocityFixedStart,
        batch,
    )?
    .loss)
}

/// Anything that can be integrated: a trained model or an analytic field.
///
/// `start` is the trajectory origin `z_0`, `state` the current `z_t`; each
/// field reads whichever it depends on.
pub trait VelocityField {
    fn latent_dim(&self) -> usize;
    fn eval(&self, z_x: &Tensor, start: &Tensor, state: &Tensor, t: f64) -> Result<Tensor>;
}

impl VelocityField for VelocityModel {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn eval(&self, z_x: &Tensor, start: &Tensor, state: &Tensor, t: f64) -> Result<Tensor> {
        let n = z_x.dims2()?.0;
        match self.layout {
            InputLayout::Condition | InputLayout::ConditionStart => {
                self.velocity(z_x, start, &vec![t; n])
            }
            InputLayout::ConditionStateTime => self.velocity(z_x, state, &vec![t; n]),
        }
    }
}

/// `f = c` everywhere, the same vector for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    pub velocity: Vec<f64>,
}

impl VelocityField for ConstantField {
    fn latent_dim(&self) -> usize {
        self.velocity.len()
    }

    fn eval(&self, _z_x: &Tensor, _start: &Tensor, state: &Tensor, _t: f64) -> Result<Tensor> {
        let (n, d) = state.dims2()?;
        if d != self.velocity.len() {
            return Err(Error::shape(format!(
                "state width {d}, field width {}",
                self.velocity.len()
            )));
        }
        Tensor::new(vec![n, d], self.velocity.repeat(n))
    }
}

/// Marginal rectified-flow velocity for `z_0 ~ N(0, I)` and a target drawn
/// uniformly from a finite set:
///
/// ```text
/// v(z, t) = sum_k w_k (x_k - z) / (1 - t),   w_k ∝ N(z; t x_k, (1 - t)^2 I)
/// ```
///
/// `t` is clamped to `1 - 1e-9` to keep the field finite at the target end.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    pub targets: Vec<Vec<f64>>,
}

impl MarginalField {
    pub fn new(targets: Vec<Vec<f64>>) -> Result<Self> {
        let Some(d) = targets.first().map(Vec::len) else {
            return Err(Error::contract("marginal field needs at least one target"));
        };
        if d == 0 || targets.iter().any(|x| x.len() != d) {
            return Err(Error::shape("targets must share a positive width"));
        }
        Ok(Self { targets })
    }

    pub fn at(&self, z: &[f64], t: f64) -> Vec<f64> {
        let s = 1.0 - t.min(1.0 - 1e-9);
        let log_w: Vec<f64> = self
            .targets
            .iter()
            .map(|x| {
                let d2: f64 = x.iter().zip(z).map(|(x, z)| (z - t * x).powi(2)).sum();
                -d2 / (2.0 * s * s)
            })
            .collect();
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut v = vec![0.0; z.len()];
        for (x, w) in self.targets.iter().zip(&w) {
            for (vi, (xi, zi)) in v.iter_mut().zip(x.iter().zip(z)) {
                *vi += w / total * (xi - zi) / s;
            }
        }
        v
    }
}

impl VelocityField for MarginalField {
    fn latent_dim(&self) -> usize {
        self.targets[0].len()
    }

    fn eval(&self, _z_x: &Tensor, _start: &Tensor, state: &Tensor, t: f64) -> Result<Tensor> {
        let (n, d) = state.dims2()?;
        if d != self.latent_dim() {
            return Err(Error::shape(format!(
                "state width {d}, field width {}",
                self.latent_dim()
            )));
        }
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            data.extend(self.at(state.row(r), t));
        }
        Tensor::new(vec![n, d], data)
    }
}

/// Left-endpoint Euler from `t = 0` to `t = 1` with step `1 / steps`.
pub fn euler_infer<F: VelocityField + ?Sized>(
    field: &F,
    z_x: &Tensor,
    z_y0: &Tensor,
    steps: usize,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::contract("Euler integration needs at least one step"));
    }
    let h = 1.0 / steps as f64;
    let mut z = z_y0.clone();
    for k in 0..steps {
        let t = k as f64 * h;
        let v = field.eval(z_x, z_y0, &z, t)?;
        if v.shape() != z.shape() {
            return Err(Error::shape(format!(
                "velocity {:?} for state {:?}",
                v.shape(),
                z.shape()
            )));
        }
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += h * vi;
        }
    }
    Ok(z)
}

/// `f(z_x)` from the zero start: the fixed-start prediction.
pub fn single_step_infer<F: VelocityField + ?Sized>(field: &F, z_x: &Tensor) -> Result<Tensor> {
    let n = z_x.dims2()?.0;
    let zeros = Tensor::zeros(&[n, field.latent_dim()]);
    field.eval(z_x, &zeros, &zeros, 0.0)
}

/// Prediction under an objective's inference path. Stochastic paths draw
/// `z_0 ~ N(0, I)` from `rng`.
pub fn predict<R: Rng + ?Sized>(
    objective: &FlowObjective,
    field: &(impl VelocityField + ?Sized),
    z_x: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let n = z_x.dims2()?.0;
    match objective.kind {
        ObjectiveKind::ConsistentVelocityFixedStart => single_step_infer(field, z_x),
        ObjectiveKind::ConsistentVelocity => {
            let z0 = Tensor::randn(&[n, field.latent_dim()], 1.0, rng);
            euler_infer(field, z_x, &z0, 1)
        }
        ObjectiveKind::DirectAdapt => {
            let z0 = Tensor::randn(&[n, field.latent_dim()], 1.0, rng);
            euler_infer(field, z_x, &z0, objective.euler_steps)
        }
    }
}

/// One arrow of a velocity-field plot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub z1: f64,
    pub z2: f64,
    pub t: f64,
    pub v1: f64,
    pub v2: f64,
}

/// Evaluates a 2-D field at each `(z1, z2, t)` lattice point under one
/// condition row. The lattice point serves as both state and start.
pub fn velocity_field_grid<F: VelocityField + ?Sized>(
    field: &F,
    z_x: &[f64],
    lattice: &[(f64, f64, f64)],
) -> Result<Vec<FieldSample>> {
    if field.latent_dim() != 2 {
        return Err(Error::contract(format!(
            "field plots need a 2-D latent, got {}",
            field.latent_dim()
        )));
    }
    // Analytic fields ignore the condition; an empty one becomes a single zero.
    let cond = if z_x.is_empty() {
        Tensor::zeros(&[1, 1])
    } else {
        Tensor::new(vec![1, z_x.len()], z_x.to_vec())?
    };
    let mut out = Vec::with_capacity(lattice.len());
    for &(z1, z2, t) in lattice {
        let z = Tensor::new(vec![1, 2], vec![z1, z2])?;
        let v = field.eval(&cond, &z, &z, t)?;
        out.push(FieldSample {
            z1,
            z2,
            t,
            v1: v.data()[0],
            v2: v.data()[1],
        });
    }
    Ok(out)
}

/// Regular `n x n` lattice over `[lo, hi]^2` at each time in `times`.
pub fn square_lattice(lo: f64, hi: f64, n: usize, times: &[f64]) -> Vec<(f64, f64, f64)> {
    let step = if n > 1 {
        (hi - lo) / (n - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(n * n * times.len());
    for &t in times {
        for j in 0..n {
            for i in 0..n {
                out.push((lo + i as f64 * step, lo + j as f64 * step, t));
            }
        }
    }
    out
}

/// Euler trajectory (including the start) of a single row.
pub fn trajectory<F: VelocityField + ?Sized>(
    field: &F,
    z_x: &Tensor,
    z0: &[f64],
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::contract("Euler integration needs at least one step"));
    }
    let start = Tensor::new(vec![1, z0.len()], z0.to_vec())?;
    let mut z = start.clone();
    let mut path = vec![z0.to_vec()];
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let v = field.eval(z_x, &start, &z, k as f64 * h)?;
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += h * vi;
        }
        path.push(z.data().to_vec());
    }
    Ok(path)
}

/// Conditional regression pairs with a pool label per row (0 = indoor-like,
/// 1 = outdoor-like).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDataset {
    pub z_x: Tensor,
    pub z_y1: Tensor,
    pub pools: Vec<usize>,
    pub descriptor: String,
}

impl FlowDataset {
    pub fn new(
        z_x: Tensor,
        z_y1: Tensor,
        pools: Vec<usize>,
        descriptor: impl Into<String>,
    ) -> Result<Self> {
        let (n, _) = z_x.dims2()?;
        let (n1, _) = z_y1.dims2()?;
        if n1 != n || pools.len() != n {
            return Err(Error::shape(format!(
                "{n} conditions, {n1} targets, {} pool labels",
                pools.len()
            )));
        }
        Ok(Self {
            z_x,
            z_y1,
            pools,
            descriptor: descriptor.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    pub fn cond_dim(&self) -> usize {
        self.z_x.shape()[1]
    }

    pub fn latent_dim(&self) -> usize {
        self.z_y1.shape()[1]
    }

    /// Rows `indices` as `(z_x, z_y1)`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((
            gather_rows(&self.z_x, indices)?,
            gather_rows(&self.z_y1, indices)?,
        ))
    }
}

pub(crate) fn gather_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (n, d) = t.dims2()?;
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= n {
            return Err(Error::shape(format!("row {i} of {n}")));
        }
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![indices.len(), d], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyMap {
    /// `z_y1 = A z_x`.
    Linear,
    /// `z_y1 = tanh(A z_x) + 0.5 sin(B z_x)`.
    Nonlinear,
}

impl FromStr for ToyMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "nonlinear" => Ok(Self::Nonlinear),
            other => Err(Error::Config(format!("unknown toy map '{other}'"))),
        }
    }
}

/// A conditional regression task `z_y1 = g(z_x)` whose map is fixed by `seed`.
///
/// Conditions come from two pools: indoor-like `N(0, 0.5^2 I)` with
/// probability 0.9 and outdoor-like `N(0, 1.5^2 I)` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub map: ToyMap,
    pub cond_dim: usize,
    pub latent_dim: usize,
    pub seed: u64,
    a: Tensor,
    b: Tensor,
}

pub const POOL_SCALES: [f64; 2] = [0.5, 1.5];
pub const DEFAULT_POOL_MIX: [f64; 2] = [0.9, 0.1];

impl ToyTask {
    pub fn new(map: ToyMap, cond_dim: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if cond_dim == 0 || latent_dim == 0 {
            return Err(Error::shape("toy task dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (cond_dim as f64).sqrt();
        let a = Tensor::randn(&[latent_dim, cond_dim], std, &mut rng);
        let b = Tensor::randn(&[latent_dim, cond_dim], 2.0 * std, &mut rng);
        Ok(Self {
            map,
            cond_dim,
            latent_dim,
            seed,
            a,
            b,
        })
    }

    /// The linear map `A` (`[latent_dim, cond_dim]`).
    pub fn matrix(&self) -> &Tensor {
        &self.a
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.latent_dim)
            .map(|r| {
                let ax: f64 = self.a.row(r).iter().zip(x).map(|(a, x)| a * x).sum();
                match self.map {
                    ToyMap::Linear => ax,
                    ToyMap::Nonlinear => {
                        let bx: f64 = self.b.row(r).iter().zip(x).map(|(b, x)| b * x).sum();
                        ax.tanh() + 0.5 * bx.sin()
                    }
                }
            })
            .collect()
    }

    /// `n` samples drawn with the pool mix, deterministic in `sample_seed`.
    pub fn sample(&self, n: usize, mix: &[f64], sample_seed: u64) -> Result<FlowDataset> {
        if mix.len() != POOL_SCALES.len() {
            return Err(Error::Config(format!(
                "pool mix needs {} weights",
                POOL_SCALES.len()
            )));
        }
        let pick =
            WeightedIndex::new(mix).map_err(|e| Error::Config(format!("pool mix {mix:?}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let mut xs = Vec::with_capacity(n * self.cond_dim);
        let mut ys = Vec::with_capacity(n * self.latent_dim);
        let mut pools = Vec::with_capacity(n);
        for _ in 0..n {
            let pool = pick.sample(&mut rng);
            let x: Vec<f64> = (0..self.cond_dim)
                .map(|_| POOL_SCALES[pool] * rng.sample::<f64, _>(StandardNormal))
                .collect();
            ys.extend(self.apply(&x));
            xs.extend(x);
            pools.push(pool);
        }
        if n == 0 {
            return Err(Error::contract("toy dataset must be nonempty"));
        }
        FlowDataset::new(
            Tensor::new(vec![n, self.cond_dim], xs)?,
            Tensor::new(vec![n, self.latent_dim], ys)?,
            pools,
            format!(
                "toy:{}:{}->{}:task_seed={}:n={n}:sample_seed={sample_seed}",
                match self.map {
                    ToyMap::Linear => "linear",
                    ToyMap::Nonlinear => "nonlinear",
                },
                self.cond_dim,
                self.latent_dim,
                self.seed
            ),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub dispersion_weight: f64,
    pub dispersion_tau: f64,
    #[serde(with = "pairs_serde")]
    pub dispersion_pairs: DispersionPairs,
    /// Hidden layer fed to the regularizer; `None` is the last hidden layer.
    pub dispersion_layer: Option<usize>,
    /// Per-pool draw probabilities; `None` walks a shuffled permutation.
    pub pool_mix: Option<Vec<f64>>,
    pub seed: u64,
    /// Seed for the noise used when measuring test MSE.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: DEFAULT_BATCH_SIZE,
            optimizer: AdamWConfig::default(),
            dispersion_weight: DISPERSION_WEIGHT,
            dispersion_tau: DISPERSION_TAU,
            dispersion_pairs: DispersionPairs::Inclusive,
            dispersion_layer: None,
            pool_mix: Some(DEFAULT_POOL_MIX.to_vec()),
            seed: 0,
            eval_seed: 12345,
        }
    }
}

mod pairs_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::tensor::DispersionPairs;

    pub fn serialize<S: Serializer>(p: &DispersionPairs, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match p {
            DispersionPairs::Inclusive => "inclusive",
            DispersionPairs::Exclusive => "exclusive",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DispersionPairs, D::Error> {
        match String::deserialize(d)?.as_str() {
            "inclusive" => Ok(DispersionPairs::Inclusive),
            "exclusive" => Ok(DispersionPairs::Exclusive),
            other => Err(serde::de::Error::custom(format!(
                "unknown dispersion pairs '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective term over the epoch's steps (regularizer excluded).
    pub train_loss: f64,
    pub dispersion: f64,
    pub test_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub forward_evals: usize,
}

impl TrainTrace {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn final_test_mse(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_mse)
    }

    /// `epoch,train_loss,test_mse`; a missing test MSE is an empty field.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            epoch: usize,
            train_loss: f64,
            test_mse: Option<f64>,
        }
        let rows = self.epochs.iter().map(|e| Row {
            epoch: e.epoch,
            train_loss: e.train_loss,
            test_mse: e.test_mse,
        });
        crate::io::write_csv(out, rows)
    }
}

/// Per-element mean squared error of the objective's prediction on `data`.
pub fn test_mse(
    objective: &FlowObjective,
    model: &VelocityModel,
    data: &FlowDataset,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = predict(objective, model, &data.z_x, &mut rng)?;
    Ok(mse(&pred, &data.z_y1))
}

/// Per-element mean of `(a - b)^2`.
pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n
}

/// Draws minibatch row indices for one epoch.
pub(crate) struct BatchSampler {
    pools: Vec<Vec<usize>>,
    pick: Option<WeightedIndex<f64>>,
    n: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub(crate) fn new(
        pool_labels: &[usize],
        mix: Option<&[f64]>,
        batch_size: usize,
    ) -> Result<Self> {
        if pool_labels.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        if batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        let pick = match mix {
            Some(mix) => {
                let count = pool_labels.iter().max().map_or(0, |m| m + 1).max(mix.len());
                let mut pools = vec![Vec::new(); count];
                for (i, &p) in pool_labels.iter().enumerate() {
                    pools[p].push(i);
                }
                for (p, w) in mix.iter().enumerate() {
                    if *w > 0.0 && pools[p].is_empty() {
                        return Err(Error::contract(format!(
                            "pool {p} has weight {w} but no samples"
                        )));
                    }
                }
                let weights: Vec<f64> = (0..count)
                    .map(|p| mix.get(p).copied().unwrap_or(0.0))
                    .collect();
                let pick = WeightedIndex::new(&weights)
                    .map_err(|e| Error::Config(format!("pool mix {mix:?}: {e}")))?;
                return Ok(Self {
                    pools,
                    pick: Some(pick),
                    n: pool_labels.len(),
                    batch_size,
                });
            }
            None => None,
        };
        Ok(Self {
            pools: Vec::new(),
            pick,
            n: pool_labels.len(),
            batch_size,
        })
    }

    pub(crate) fn steps_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub(crate) fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        match &self.pick {
            Some(pick) => (0..self.steps_per_epoch())
                .map(|_| {
                    (0..self.batch_size)
                        .map(|_| {
                            let pool = &self.pools[pick.sample(rng)];
                            pool[rng.random_range(0..pool.len())]
                        })
                        .collect()
                })
                .collect(),
            None => {
                let mut order: Vec<usize> = (0..self.n).collect();
                order.shuffle(rng);
                order
                    .chunks(self.batch_size)
                    .map(<[usize]>::to_vec)
                    .collect()
            }
        }
    }
}

/// Builds a batch for `kind` from target rows, drawing starts and times.
pub fn make_batch<R: Rng + ?Sized>(
    kind: ObjectiveKind,
    z_x: Tensor,
    z_y1: Tensor,
    rng: &mut R,
) -> Result<FlowBatch> {
    let n = z_y1.dims2()?.0;
    match kind {
        ObjectiveKind::ConsistentVelocityFixedStart => FlowBatch::fixed_start(z_x, z_y1),
        ObjectiveKind::ConsistentVelocity => {
            let z0 = Tensor::randn(z_y1.shape(), 1.0, rng);
            FlowBatch::new(z_x, z_y1, z0, vec![0.0; n])
        }
        ObjectiveKind::DirectAdapt => {
            let z0 = Tensor::randn(z_y1.shape(), 1.0, rng);
            let t = (0..n).map(|_| rng.random::<f64>()).collect();
            FlowBatch::new(z_x, z_y1, z0, t)
        }
    }
}

/// Minibatch AdamW on `objective + weight * dispersion(hidden)`.
///
/// `test`, when given, is scored after every epoch with
/// [`test_mse`] under `config.eval_seed`.
pub fn train(
    objective: &FlowObjective,
    model: &mut VelocityModel,
    data: &FlowDataset,
    config: &TrainConfig,
    test: Option<&FlowDataset>,
) -> Result<TrainTrace> {
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    require_layout(model, objective.kind)?;
    if data.cond_dim() != model.cond_dim || data.latent_dim() != model.latent_dim {
        return Err(Error::shape(format!(
            "dataset {}->{} for model {}->{}",
            data.cond_dim(),
            data.latent_dim(),
            model.cond_dim,
            model.latent_dim
        )));
    }
    let hidden_layers = model.hidden_widths().len();
    let layer = if config.dispersion_weight != 0.0 {
        match config.dispersion_layer {
            _ if hidden_layers == 0 => {
                return Err(Error::contract("dispersion needs a hidden layer"))
            }
            Some(l) if l >= hidden_layers => {
                return Err(Error::contract(format!(
                    "dispersion layer {l} of {hidden_layers}"
                )))
            }
            Some(l) => Some(l),
            None => Some(hidden_layers - 1),
        }
    } else {
        None
    };
    let sampler = BatchSampler::new(&data.pools, config.pool_mix.as_deref(), config.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer);
    let mut trace = TrainTrace::default();
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut disp_sum = 0.0;
        let batches = sampler.epoch(&mut rng);
        for idx in &batches {
            let (z_x, z_y1) = data.gather(idx)?;
            let batch = make_batch(objective.kind, z_x, z_y1, &mut rng)?;
            let tape = Tape::new();
            let out = objective_loss(&tape, model, objective.kind, &batch)?;
            let mut total = out.loss;
            if let Some(l) = layer {
                let d = dispersion_loss(
                    &tape,
                    out.forward.hidden[l],
                    config.dispersion_tau,
                    config.dispersion_pairs,
                )?;
                disp_sum += d.item()?;
                total = total.add(d.scale(config.dispersion_weight))?;
            }
            let value = out.loss.item()?;
            if !value.is_finite() {
                return Err(Error::degenerate(format!("loss diverged at epoch {epoch}")));
            }
            loss_sum += value;
            let grads = total.backward()?;
            trace.forward_evals += tape.forward_evals();
            opt.step(&mut model.params_mut(), &grads)?;
            trace.steps += 1;
        }
        let steps = batches.len() as f64;
        let test_mse = test
            .map(|t| test_mse(objective, model, t, config.eval_seed))
            .transpose()?;
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / steps,
            dispersion: disp_sum / steps,
            test_mse,
        });
    }
    Ok(trace)
}

/// JSON record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub objective: ObjectiveKind,
    pub euler_steps: usize,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub dataset: String,
    pub final_metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(
        objective: &FlowObjective,
        config: &TrainConfig,
        dataset: &str,
        trace: &TrainTrace,
    ) -> Self {
        let mut final_metrics = BTreeMap::new();
        if let Some(l) = trace.final_train_loss() {
            final_metrics.insert("train_loss".to_string(), l);
        }
        if let Some(m) = trace.final_test_mse() {
            final_metrics.insert("test_mse".to_string(), m);
        }
        Self {
            objective: objective.kind,
            euler_steps: objective.euler_steps,
            seed: config.seed,
            epochs: config.epochs,
            lr: config.optimizer.lr,
            lambda: config.dispersion_weight,
            dataset: dataset.to_string(),
            final_metrics,
        }
    }
}
