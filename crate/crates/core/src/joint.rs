//! Joint depth and normal prediction over width-concatenated tokens.
//!
//! The image half and a zero half form one sequence `[left | right]`. One
//! forward pass yields `[p_l | p_r]`; depth supervises `p_l`, normals `p_r`:
//!
//! ```text
//! L = E || v_D - p_l ||^2 + || v_N - p_r ||^2
//! ```
//!
//! Under the fixed-start objective the start is zero, so `v_D` and `v_N` are
//! the encoded labels themselves. Tokens interact only through attention.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth_codec::{self, NormalizedLabel, QuantScheme, SchemeKind};
use crate::error::{Error, Result};
use crate::flow::BatchSampler;
use crate::grid::{Grid, Mask, NormalGrid};
use crate::metrics;
use crate::scenes::{self, SceneSample};
use crate::tensor::{
    mean_squared_norm, prefixed, AdamW, AdamWConfig, Attention, Linear, Mlp, Module, Parameter,
    Tape, Tensor, Var,
};

pub const DEFAULT_PATCH: usize = 2;
pub const DEFAULT_CHANNELS: usize = 16;

/// Additive attention mask over `[left | right]` that forbids cross-half
/// attention: `0` within a half, `-inf` across.
pub fn block_diagonal_mask(seq: usize) -> Result<Tensor> {
    if !seq.is_multiple_of(2) {
        return Err(Error::shape(format!("sequence length {seq} is odd")));
    }
    let half = seq / 2;
    let mut m = Tensor::zeros(&[seq, seq]);
    for i in 0..seq {
        for j in 0..seq {
            if (i < half) != (j < half) {
                m.data_mut()[i * seq + j] = f64::NEG_INFINITY;
            }
        }
    }
    Ok(m)
}

/// Per-token embed, learned positions, one residual attention block, one
/// residual per-token MLP, per-token head.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenModel {
    pub embed: Linear,
    pub position: Parameter,
    pub attention: Attention,
    pub mlp: Mlp,
    pub head: Linear,
    /// Additive attention bias, e.g. [`block_diagonal_mask`].
    pub mask: Option<Tensor>,
}

impl TokenModel {
    pub fn new<R: Rng + ?Sized>(
        seq: usize,
        channels: usize,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if seq == 0 || channels == 0 || dim == 0 || hidden == 0 {
            return Err(Error::shape("token model sizes must be positive"));
        }
        Ok(Self {
            embed: Linear::new(channels, dim, true, rng),
            position: Parameter::new(Tensor::randn(&[seq, dim], 0.1, rng)),
            attention: Attention::new(dim, rng),
            mlp: Mlp::new(&[dim, hidden, dim], rng)?,
            head: Linear::new(dim, channels, true, rng),
            mask: None,
        })
    }

    pub fn seq(&self) -> usize {
        self.position.value.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.embed.inputs()
    }

    /// `tokens: [batch, seq, channels] -> [batch, seq, channels]`.
    pub fn forward<'t>(&self, tape: &'t Tape, tokens: Var<'t>) -> Result<Var<'t>> {
        let shape = tokens.shape();
        let &[batch, seq, channels] = shape.as_slice() else {
            return Err(Error::shape(format!(
                "tokens must be [batch, seq, channels], got {shape:?}"
            )));
        };
        if seq != self.seq() || channels != self.channels() {
            return Err(Error::shape(format!(
                "model takes [*, {}, {}], got {shape:?}",
                self.seq(),
                self.channels()
            )));
        }
        tape.count_forward();
        let dim = self.attention.dim();
        let flat = tokens.reshape(&[batch * seq, channels])?;
        let pos = tape.param(&self.position);
        let pos = Var::concat_rows(&vec![pos; batch])?;
        let h = self.embed.forward(tape, flat)?.add(pos)?;
        let attended =
            self.attention
                .forward(tape, h.reshape(&[batch, seq, dim])?, self.mask.as_ref())?;
        let h = h.add(attended.reshape(&[batch * seq, dim])?)?;
        let h = h.add(self.mlp.forward(tape, h)?.output)?;
        self.head.forward(tape, h)?.reshape(&[batch, seq, channels])
    }

    pub fn predict(&self, tokens: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(tokens.clone());
        Ok(self.forward(&tape, x)?.to_tensor())
    }
}

impl Module for TokenModel {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out: Vec<_> = prefixed("embed", self.embed.named_params()).collect();
        out.push(("position".to_string(), &self.position));
        out.extend(prefixed("attention", self.attention.named_params()));
        out.extend(prefixed("mlp", self.mlp.named_params()));
        out.extend(prefixed("head", self.head.named_params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.embed.params_mut();
        out.push(&mut self.position);
        out.extend(self.attention.params_mut());
        out.extend(self.mlp.params_mut());
        out.extend(self.head.params_mut());
        out
    }
}

/// Width-concatenated token sequence: `tokens[:, ..half_split]` is the left
/// half, the rest the right half.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatLatent {
    pub tokens: Tensor,
    pub half_split: usize,
}

impl ConcatLatent {
    /// Joins `[batch, n, c]` halves along the sequence axis.
    pub fn concat(left: &Tensor, right: &Tensor) -> Result<Self> {
        let (&[b, n, c], &[b2, n2, c2]) = (left.shape(), right.shape()) else {
            return Err(Error::shape("halves must be [batch, n, channels]"));
        };
        if (b, n, c) != (b2, n2, c2) {
            return Err(Error::shape(format!(
                "halves {:?} and {:?}",
                left.shape(),
                right.shape()
            )));
        }
        let mut data = Vec::with_capacity(2 * b * n * c);
        for i in 0..b {
            data.extend_from_slice(&left.data()[i * n * c..(i + 1) * n * c]);
            data.extend_from_slice(&right.data()[i * n * c..(i + 1) * n * c]);
        }
        Ok(Self {
            tokens: Tensor::new(vec![b, 2 * n, c], data)?,
            half_split: n,
        })
    }
}

fn split_shape(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let &[b, s, c] = shape else {
        return Err(Error::shape(format!(
            "expected [batch, seq, channels], got {shape:?}"
        )));
    };
    if s % 2 != 0 {
        return Err(Error::shape(format!("sequence length {s} is odd")));
    }
    Ok((b, s / 2, c))
}

/// First and second halves along the sequence axis.
pub fn split_output(output: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, n, c) = split_shape(output.shape())?;
    let mut left = Vec::with_capacity(b * n * c);
    let mut right = Vec::with_capacity(b * n * c);
    for i in 0..b {
        let base = i * 2 * n * c;
        left.extend_from_slice(&output.data()[base..base + n * c]);
        right.extend_from_slice(&output.data()[base + n * c..base + 2 * n * c]);
    }
    Ok((
        Tensor::new(vec![b, n, c], left)?,
        Tensor::new(vec![b, n, c], right)?,
    ))
}

/// [`split_output`] on the tape.
pub fn split_var<'t>(output: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (b, n, c) = split_shape(&output.shape())?;
    let rows = output.reshape(&[b * 2, n * c])?;
    let mut lefts = Vec::with_capacity(b);
    let mut rights = Vec::with_capacity(b);
    for i in 0..b {
        lefts.push(rows.slice_rows(2 * i, 2 * i + 1)?);
        rights.push(rows.slice_rows(2 * i + 1, 2 * i + 2)?);
    }
    Ok((
        Var::concat_rows(&lefts)?.reshape(&[b, n, c])?,
        Var::concat_rows(&rights)?.reshape(&[b, n, c])?,
    ))
}

/// Per-half squared error, batch-averaged: `(depth term, normal term)`.
pub fn half_losses<'t>(
    p_l: Var<'t>,
    p_r: Var<'t>,
    v_d: Var<'t>,
    v_n: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let shape = p_l.shape();
    for s in [p_r.shape(), v_d.shape(), v_n.shape()] {
        if s != shape {
            return Err(Error::shape(format!(
                "joint loss shapes {shape:?} vs {s:?}"
            )));
        }
    }
    let &[b, n, c] = shape.as_slice() else {
        return Err(Error::shape(format!(
            "expected [batch, n, channels], got {shape:?}"
        )));
    };
    let flat = |v: Var<'t>| v.reshape(&[b, n * c]);
    Ok((
        mean_squared_norm(flat(p_l)?, flat(v_d)?)?,
        mean_squared_norm(flat(p_r)?, flat(v_n)?)?,
    ))
}

/// `E || v_D - p_l ||^2 + || v_N - p_r ||^2`.
pub fn joint_loss<'t>(p_l: Var<'t>, p_r: Var<'t>, v_d: Var<'t>, v_n: Var<'t>) -> Result<Var<'t>> {
    let (d, n) = half_losses(p_l, p_r, v_d, v_n)?;
    d.add(n)
}

/// Flattens `patch x patch` blocks of a per-pixel feature into tokens of
/// width `channels` (zero-padded), row-major over blocks.
pub fn patchify<T>(
    grid: &Grid<T>,
    patch: usize,
    channels: usize,
    feature: impl Fn(&T) -> Vec<f64>,
) -> Result<Vec<Vec<f64>>> {
    let (w, h) = (grid.width(), grid.height());
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::shape(format!(
            "{w}x{h} grid does not tile into {patch}x{patch} patches"
        )));
    }
    let mut tokens = Vec::with_capacity((w / patch) * (h / patch));
    for br in 0..h / patch {
        for bc in 0..w / patch {
            let mut t = Vec::with_capacity(channels);
            for r in 0..patch {
                for c in 0..patch {
                    t.extend(feature(grid.get(bc * patch + c, br * patch + r)));
                }
            }
            if t.len() > channels {
                return Err(Error::shape(format!(
                    "{} features exceed {channels} channels",
                    t.len()
                )));
            }
            t.resize(channels, 0.0);
            tokens.push(t);
        }
    }
    Ok(tokens)
}

/// Inverse of [`patchify`] for `k` features per pixel.
pub fn unpatchify(
    tokens: &[f64],
    width: usize,
    height: usize,
    patch: usize,
    channels: usize,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let blocks = (width / patch) * (height / patch);
    if tokens.len() != blocks * channels || patch * patch * k > channels {
        return Err(Error::shape(format!(
            "{} token values for {width}x{height}",
            tokens.len()
        )));
    }
    let mut out = vec![Vec::new(); width * height];
    for br in 0..height / patch {
        for bc in 0..width / patch {
            let t = &tokens[(br * (width / patch) + bc) * channels..][..channels];
            for r in 0..patch {
                for c in 0..patch {
                    let at = (r * patch + c) * k;
                    out[(br * patch + r) * width + bc * patch + c] = t[at..at + k].to_vec();
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMode {
    /// Depth and normals both supervised.
    Joint,
    /// Depth half only; the normal half is still produced but unsupervised.
    DepthOnly,
    NormalOnly,
}

/// Token layout shared by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub patch: usize,
    pub channels: usize,
    /// Depth on the right half, normals on the left.
    pub swap: bool,
    pub quant: SchemeKind,
}

impl Default for TokenLayout {
    fn default() -> Self {
        Self {
            patch: DEFAULT_PATCH,
            channels: DEFAULT_CHANNELS,
            swap: false,
            quant: SchemeKind::Logarithmic,
        }
    }
}

/// Encoded inputs and targets for a batch of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBatch {
    /// `[batch, 2n, channels]`: image tokens then zero start tokens.
    pub inputs: Tensor,
    /// `[batch, n, channels]` encoded depth labels.
    pub depth: Tensor,
    /// `[batch, n, channels]` normals.
    pub normals: Tensor,
}

impl TokenLayout {
    /// Default layout for a mode. Single-task runs read their target from
    /// the right (start) half; joint runs put depth on the image half.
    pub fn for_mode(mode: JointMode) -> Self {
        Self {
            swap: mode == JointMode::DepthOnly,
            ..Self::default()
        }
    }

    pub fn scheme(&self) -> QuantScheme {
        QuantScheme::reference(self.quant)
    }

    pub fn tokens_per_half(&self, resolution: usize) -> usize {
        (resolution / self.patch).pow(2)
    }

    pub fn batch(&self, scenes: &[&SceneSample]) -> Result<JointBatch> {
        let Some(first) = scenes.first() else {
            return Err(Error::contract("empty scene batch"));
        };
        let res = first.resolution();
        let n = self.tokens_per_half(res);
        let c = self.channels;
        let scheme = self.scheme();
        let mut inputs = Vec::with_capacity(scenes.len() * 2 * n * c);
        let mut depth = Vec::with_capacity(scenes.len() * n * c);
        let mut normals = Vec::with_capacity(scenes.len() * n * c);
        for s in scenes {
            if s.resolution() != res || s.normals.width() != res {
                return Err(Error::contract(
                    "scenes in a batch must share a resolution with both labels",
                ));
            }
            let label = depth_codec::encode(&scheme, &s.depth)?;
            if label.valid.count() != label.valid.len() {
                return Err(Error::contract(
                    "depth label outside the quantization range",
                ));
            }
            for t in patchify(&s.image_proxy, self.patch, c, |&v| vec![v])? {
                inputs.extend(t);
            }
            inputs.extend(std::iter::repeat_n(0.0, n * c));
            for t in patchify(&label.values, self.patch, c, |&v| vec![v])? {
                depth.extend(t);
            }
            for t in patchify(&s.normals, self.patch, c, |v| v.to_vec())? {
                normals.extend(t);
            }
        }
        let b = scenes.len();
        Ok(JointBatch {
            inputs: Tensor::new(vec![b, 2 * n, c], inputs)?,
            depth: Tensor::new(vec![b, n, c], depth)?,
            normals: Tensor::new(vec![b, n, c], normals)?,
        })
    }

    /// `(depth half, normal half)` of a model output, honoring `swap`.
    pub fn task_halves<'t>(&self, output: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (l, r) = split_var(output)?;
        Ok(if self.swap { (r, l) } else { (l, r) })
    }

    pub fn task_halves_tensor(&self, output: &Tensor) -> Result<(Tensor, Tensor)> {
        let (l, r) = split_output(output)?;
        Ok(if self.swap { (r, l) } else { (l, r) })
    }

    /// Decodes one sample's depth half to meters and its normal half to
    /// unit vectors.
    pub fn decode_sample(
        &self,
        depth: &[f64],
        normals: &[f64],
        resolution: usize,
    ) -> Result<(Grid<f64>, NormalGrid)> {
        let c = self.channels;
        let labels = unpatchify(depth, resolution, resolution, self.patch, c, 1)?;
        let values = Grid::from_vec(
            resolution,
            resolution,
            labels.into_iter().map(|v| v[0]).collect(),
        )?;
        let label = NormalizedLabel::new(values, Grid::filled(resolution, resolution, true))?;
        let meters = depth_codec::decode(&self.scheme(), &label)?;
        let ns = unpatchify(normals, resolution, resolution, self.patch, c, 3)?;
        let ns = ns
            .into_iter()
            .map(|v| {
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len > 0.0 {
                    [v[0] / len, v[1] / len, v[2] / len]
                } else {
                    [0.0, 0.0, 0.0]
                }
            })
            .collect();
        Ok((meters, Grid::from_vec(resolution, resolution, ns)?))
    }
}

/// Gradient reaching the inputs of one half from the other half's loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `||d L_right / d x_left||`.
    pub left_from_right: f64,
    /// `||d L_left / d x_right||`.
    pub right_from_left: f64,
}

fn half_input_norm(grad: &Tensor, left: bool) -> Result<f64> {
    let (l, r) = split_output(grad)?;
    Ok(if left { l.l2_norm() } else { r.l2_norm() })
}

/// Backpropagates each half's loss alone and measures the gradient on the
/// opposite half's input tokens. Both are zero iff no path crosses halves.
pub fn cross_half_gradient_probe(
    model: &TokenModel,
    batch: &JointBatch,
    layout: &TokenLayout,
) -> Result<ProbeResult> {
    let run = |right_loss: bool| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.var(batch.inputs.clone());
        let out = model.forward(&tape, x)?;
        let (l, r) = split_var(out)?;
        let (v_l, v_r) = if layout.swap {
            (&batch.normals, &batch.depth)
        } else {
            (&batch.depth, &batch.normals)
        };
        let (ll, lr) = half_losses(l, r, tape.constant(v_l.clone()), tape.constant(v_r.clone()))?;
        let grads = if right_loss {
            lr.backward()?
        } else {
            ll.backward()?
        };
        let g = grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(batch.inputs.shape()));
        half_input_norm(&g, right_loss)
    };
    Ok(ProbeResult {
        left_from_right: run(true)?,
        right_from_left: run(false)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub mode: JointMode,
    pub layout: TokenLayout,
    pub pool_mix: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            mode: JointMode::Joint,
            layout: TokenLayout::default(),
            pool_mix: Some(scenes::DEFAULT_MIX.to_vec()),
            seed: 0,
        }
    }
}

impl JointConfig {
    pub fn for_mode(mode: JointMode) -> Self {
        Self {
            mode,
            layout: TokenLayout::for_mode(mode),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointEpoch {
    pub epoch: usize,
    pub depth_loss: f64,
    pub normal_loss: f64,
    pub test_depth_mse: Option<f64>,
    pub test_normal_mse: Option<f64>,
    /// Mean angle (degrees) between normals differentiated from the
    /// predicted depth and the predicted normals, on the test scenes.
    pub consistency_deg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JointTrace {
    pub epochs: Vec<JointEpoch>,
    pub steps: usize,
    pub forward_evals: usize,
}

impl JointTrace {
    pub fn forwards_per_step(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.forward_evals as f64 / self.steps as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        crate::io::write_csv(out, &self.epochs)
    }
}

/// Held-out scores of a token model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointEval {
    /// Per-element MSE of the depth half in label space (real channels only).
    pub depth_mse: f64,
    pub normal_mse: f64,
    pub consistency_deg: f64,
}

fn real_channel_mse(pred: &Tensor, target: &Tensor, used: usize, channels: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred
        .data()
        .chunks(channels)
        .zip(target.data().chunks(channels))
    {
        for k in 0..used {
            sum += (p[k] - t[k]).powi(2);
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

pub fn evaluate_joint(
    model: &TokenModel,
    layout: &TokenLayout,
    scenes: &[SceneSample],
) -> Result<JointEval> {
    if scenes.is_empty() {
        return Err(Error::contract("no evaluation scenes"));
    }
    let refs: Vec<&SceneSample> = scenes.iter().collect();
    let batch = layout.batch(&refs)?;
    let out = model.predict(&batch.inputs)?;
    let (pd, pn) = layout.task_halves_tensor(&out)?;
    let p = layout.patch * layout.patch;
    let depth_mse = real_channel_mse(&pd, &batch.depth, p, layout.channels);
    let normal_mse = real_channel_mse(&pn, &batch.normals, 3 * p, layout.channels);
    let n = pd.numel() / scenes.len();
    let mut angles = 0.0;
    let mut counted = 0usize;
    for (i, s) in scenes.iter().enumerate() {
        let res = s.resolution();
        let (d, nrm) = layout.decode_sample(
            &pd.data()[i * n..(i + 1) * n],
            &pn.data()[i * n..(i + 1) * n],
            res,
        )?;
        let all = Mask::filled(res, res, true);
        let (fd, fd_valid) = scenes::fd_normals(&d, &all, scenes::pixel_size(res))?;
        let mask = fd_valid.and(&s.valid)?;
        let errs = metrics::angular_errors(&fd, &nrm, &mask)?;
        angles += errs.iter().sum::<f64>();
        counted += errs.len();
    }
    Ok(JointEval {
        depth_mse,
        normal_mse,
        consistency_deg: if counted > 0 {
            angles / counted as f64
        } else {
            f64::NAN
        },
    })
}

/// One forward pass and one optimizer step per batch for every mode.
pub fn train_joint(
    model: &mut TokenModel,
    train: &[SceneSample],
    config: &JointConfig,
    test: Option<&[SceneSample]>,
) -> Result<JointTrace> {
    if train.is_empty() {
        return Err(Error::contract("no training scenes"));
    }
    let layout = config.layout;
    let pools: Vec<usize> = train.iter().map(|s| s.pool.index()).collect();
    let mix = config.pool_mix.as_deref().filter(|_| {
        let has = |p: usize| pools.contains(&p);
        has(0) && has(1)
    });
    let sampler = BatchSampler::new(&pools, mix, config.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer);
    let mut trace = JointTrace::default();
    for epoch in 0..config.epochs {
        let (mut dsum, mut nsum) = (0.0, 0.0);
        let batches = sampler.epoch(&mut rng);
        for idx in &batches {
            let scenes: Vec<&SceneSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = layout.batch(&scenes)?;
            let tape = Tape::new();
            let out = model.forward(&tape, tape.constant(batch.inputs.clone()))?;
            let (pd, pn) = layout.task_halves(out)?;
            let (ld, ln) = half_losses(
                pd,
                pn,
                tape.constant(batch.depth.clone()),
                tape.constant(batch.normals.clone()),
            )?;
            let loss = match config.mode {
                JointMode::Joint => ld.add(ln)?,
                JointMode::DepthOnly => ld,
                JointMode::NormalOnly => ln,
            };
            let (dv, nv) = (ld.item()?, ln.item()?);
            if !(dv.is_finite() && nv.is_finite()) {
                return Err(Error::degenerate(format!(
                    "joint loss diverged at epoch {epoch}"
                )));
            }
            dsum += dv;
            nsum += nv;
            let grads = loss.backward()?;
            trace.forward_evals += tape.forward_evals();
            opt.step(&mut model.params_mut(), &grads)?;
            trace.steps += 1;
        }
        let eval = test
            .map(|t| evaluate_joint(model, &layout, t))
            .transpose()?;
        let steps = batches.len() as f64;
        trace.epochs.push(JointEpoch {
            epoch: epoch + 1,
            depth_loss: dsum / steps,
            normal_loss: nsum / steps,
            test_depth_mse: eval.map(|e| e.depth_mse),
            test_normal_mse: eval.map(|e| e.normal_mse),
            consistency_deg: eval.map(|e| e.consistency_deg),
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_of_two_tokens() {
        let t = Tensor::new(vec![1, 2, 1], vec![3.0, 7.0]).unwrap();
        let (l, r) = split_output(&t).unwrap();
        assert_eq!((l.data(), r.data()), (&[3.0][..], &[7.0][..]));
        assert!(split_output(&Tensor::zeros(&[1, 3, 1])).is_err());
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[3, 4, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4, 2], 1.0, &mut rng);
        let c = ConcatLatent::concat(&a, &b).unwrap();
        assert_eq!(c.half_split, 4);
        let (l, r) = split_output(&c.tokens).unwrap();
        assert_eq!((l, r), (a, b));
    }

    #[test]
    fn patchify_round_trip() {
        let g = Grid::from_fn(4, 4, |c, r| [c as f64, r as f64, (c * r) as f64]);
        let tokens = patchify(&g, 2, 16, |v| v.to_vec()).unwrap();
        assert_eq!(tokens.len(), 4);
        let flat: Vec<f64> = tokens.concat();
        let back = unpatchify(&flat, 4, 4, 2, 16, 3).unwrap();
        for (i, v) in back.iter().enumerate() {
            assert_eq!(v.as_slice(), g.as_slice()[i].as_slice());
        }
    }

    #[test]
    fn mask_blocks_cross_half() {
        let m = block_diagonal_mask(4).unwrap();
        assert_eq!(m.at2(0, 1), 0.0);
        assert_eq!(m.at2(0, 2), f64::NEG_INFINITY);
        assert!(block_diagonal_mask(3).is_err());
    }
}
