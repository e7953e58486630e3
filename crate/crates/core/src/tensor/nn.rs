//! Layers: affine maps, a GELU MLP, single-head global attention, and the
//! MLP velocity model used by the flow objectives.
//!
//! The activation everywhere is the tanh form of GELU,
//! `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{prefixed, Module, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

const GELU_CUBIC: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let th = (k * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Parameter::new(Tensor::uniform(&[inputs, outputs], bound, rng)),
            bias: bias.then(|| Parameter::new(Tensor::zeros(&[outputs]))),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (_, out) = weight.dims2()?;
        if let Some(b) = &bias {
            if b.numel() != out {
                return Err(Error::shape(format!(
                    "bias of {} for {out} outputs",
                    b.numel()
                )));
            }
        }
        Ok(Self {
            weight: Parameter::new(weight),
            bias: bias.map(Parameter::new),
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(tape.param(&self.weight))?;
        match &self.bias {
            Some(b) => y.add_row(tape.param(b)),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            out.push(("bias".to_string(), b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }
}

/// Affine layers with GELU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Output plus the post-activation hidden states, one per hidden layer.
pub struct MlpOutput<'t> {
    pub output: Var<'t>,
    pub hidden: Vec<Var<'t>>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::shape(format!("bad MLP widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], true, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<MlpOutput<'t>> {
        let (_, width) = x.value().dims2()?;
        if width != self.input_width() {
            return Err(Error::shape(format!(
                "MLP expects {} inputs, got {width}",
                self.input_width()
            )));
        }
        let mut h = x;
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = h.gelu();
                hidden.push(h);
            }
        }
        Ok(MlpOutput { output: h, hidden })
    }
}

impl Module for Mlp {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.named_params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

/// Single-head scaled dot-product attention over the whole sequence:
/// `softmax(Q K^T / sqrt(d) + mask) V W_o` with `Q, K, V = x W_{q,k,v}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(dim, dim, false, rng),
            key: Linear::new(dim, dim, false, rng),
            value: Linear::new(dim, dim, false, rng),
            output: Linear::new(dim, dim, false, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.inputs()
    }

    /// `tokens: [batch, seq, dim]`. `mask` is an additive `[seq, seq]` bias;
    /// `-inf` entries block attention.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        tokens: Var<'t>,
        mask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let shape = tokens.shape();
        let &[batch, seq, dim] = shape.as_slice() else {
            return Err(Error::shape(format!(
                "attention expects [batch, seq, dim], got {shape:?}"
            )));
        };
        if dim != self.dim() {
            return Err(Error::shape(format!(
                "attention dim {} vs tokens {dim}",
                self.dim()
            )));
        }
        if let Some(m) = mask {
            if m.shape() != [seq, seq] {
                return Err(Error::shape(format!(
                    "mask {:?} for sequence {seq}",
                    m.shape()
                )));
            }
        }
        let flat = tokens.reshape(&[batch * seq, dim])?;
        let q = self.query.forward(tape, flat)?;
        let k = self.key.forward(tape, flat)?;
        let v = self.value.forward(tape, flat)?;
        let mask = mask.map(|m| tape.constant(m.clone()));
        let scale = 1.0 / (dim as f64).sqrt();
        let mut heads = Vec::with_capacity(batch);
        for b in 0..batch {
            let (lo, hi) = (b * seq, (b + 1) * seq);
            let qb = q.slice_rows(lo, hi)?;
            let kb = k.slice_rows(lo, hi)?;
            let vb = v.slice_rows(lo, hi)?;
            let mut logits = qb.matmul(kb.transpose()?)?.scale(scale);
            if let Some(m) = mask {
                logits = logits.add(m)?;
            }
            heads.push(logits.softmax_rows()?.matmul(vb)?);
        }
        let mixed = Var::concat_rows(&heads)?;
        self.output
            .forward(tape, mixed)?
            .reshape(&[batch, seq, dim])
    }
}

impl Module for Attention {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out: Vec<_> = prefixed("query", self.query.named_params()).collect();
        out.extend(prefixed("key", self.key.named_params()));
        out.extend(prefixed("value", self.value.named_params()));
        out.extend(prefixed("output", self.output.named_params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.query.params_mut();
        out.extend(self.key.params_mut());
        out.extend(self.value.params_mut());
        out.extend(self.output.params_mut());
        out
    }
}

/// Which quantities a velocity model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLayout {
    /// `f(z_x)`.
    Condition,
    /// `f(z_x, z_0)`.
    ConditionStart,
    /// `f(z_x, z_t, t)`.
    ConditionStateTime,
}

impl FromStr for InputLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condition" => Ok(Self::Condition),
            "condition_start" => Ok(Self::ConditionStart),
            "condition_state_time" => Ok(Self::ConditionStateTime),
            other => Err(Error::Config(format!("unknown input layout '{other}'"))),
        }
    }
}

/// MLP velocity field over flat latents. Output width equals the latent width.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    pub layout: InputLayout,
    pub cond_dim: usize,
    pub latent_dim: usize,
    pub mlp: Mlp,
}

impl VelocityModel {
    pub fn new<R: Rng + ?Sized>(
        layout: InputLayout,
        cond_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let input = match layout {
            InputLayout::Condition => cond_dim,
            InputLayout::ConditionStart => cond_dim + latent_dim,
            InputLayout::ConditionStateTime => cond_dim + latent_dim + 1,
        };
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(latent_dim);
        Ok(Self {
            layout,
            cond_dim,
            latent_dim,
            mlp: Mlp::new(&widths, rng)?,
        })
    }

    pub fn accepts_time(&self) -> bool {
        self.layout == InputLayout::ConditionStateTime
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.mlp.layers[1..].iter().map(Linear::inputs).collect()
    }

    /// Assembles `[z_x | z | t]` per the layout; unused parts are ignored.
    pub fn assemble_input(&self, z_x: &Tensor, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        let (n, cx) = z_x.dims2()?;
        if cx != self.cond_dim {
            return Err(Error::shape(format!(
                "condition width {cx}, model expects {}",
                self.cond_dim
            )));
        }
        let with_state = self.layout != InputLayout::Condition;
        if with_state {
            let (nz, cz) = z.dims2()?;
            if nz != n || cz != self.latent_dim {
                return Err(Error::shape(format!(
                    "state {:?}, expected [{n}, {}]",
                    z.shape(),
                    self.latent_dim
                )));
            }
        }
        let with_time = self.accepts_time();
        if with_time && t.len() != n {
            return Err(Error::shape(format!("{} times for batch of {n}", t.len())));
        }
        let width = self.mlp.input_width();
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend_from_slice(z_x.row(r));
            if with_state {
                data.extend_from_slice(z.row(r));
            }
            if with_time {
                data.push(t[r]);
            }
        }
        Tensor::new(vec![n, width], data)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        z_x: &Tensor,
        z: &Tensor,
        t: &[f64],
    ) -> Result<MlpOutput<'t>> {
        let input = tape.constant(self.assemble_input(z_x, z, t)?);
        tape.count_forward();
        self.mlp.forward(tape, input)
    }

    /// Velocity without recording gradients.
    pub fn velocity(&self, z_x: &Tensor, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.forward(&tape, z_x, z, t)?;
        Ok(out.output.to_tensor())
    }
}

impl Module for VelocityModel {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        prefixed("mlp", self.mlp.named_params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.mlp.params_mut()
    }
}
