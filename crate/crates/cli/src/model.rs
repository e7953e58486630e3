//! Checkpoints with a JSON sidecar describing the architecture.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use depthflow_core::depth_codec::{self, QuantScheme};
use depthflow_core::flow::{self, FlowObjective, ObjectiveKind, ToyMap};
use depthflow_core::io::checkpoint;
use depthflow_core::joint::{JointMode, TokenLayout, TokenModel};
use depthflow_core::scenes::SceneSample;
use depthflow_core::{
    Error, Grid, Module, NormalGrid, NormalizedLabel, SchemeKind, Tensor, VelocityModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TaskSpec {
    Scenes {
        quant: SchemeKind,
        resolution: usize,
    },
    Toy {
        map: ToyMap,
        cond_dim: usize,
        latent_dim: usize,
        task_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Flattened-vector MLP velocity model.
    Flow {
        objective: ObjectiveKind,
        euler_steps: usize,
        hidden: Vec<usize>,
        task: TaskSpec,
    },
    /// Token model over width-concatenated halves, fixed zero start.
    Token {
        mode: JointMode,
        layout: TokenLayout,
        resolution: usize,
        dim: usize,
        hidden: usize,
    },
}

impl ModelSpec {
    pub fn flow_dims(task: &TaskSpec) -> (usize, usize) {
        match *task {
            TaskSpec::Scenes { resolution, .. } => {
                (resolution * resolution, resolution * resolution)
            }
            TaskSpec::Toy {
                cond_dim,
                latent_dim,
                ..
            } => (cond_dim, latent_dim),
        }
    }

    /// Scene resolution the model consumes, if it reads scenes.
    pub fn resolution(&self) -> Option<usize> {
        match self {
            ModelSpec::Flow {
                task: TaskSpec::Scenes { resolution, .. },
                ..
            } => Some(*resolution),
            ModelSpec::Flow { .. } => None,
            ModelSpec::Token { resolution, .. } => Some(*resolution),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Net {
    Flow(VelocityModel),
    Token(TokenModel),
}

impl Net {
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        match self {
            Net::Flow(m) => m.snapshot(),
            Net::Token(m) => m.snapshot(),
        }
    }

    fn load_snapshot(&mut self, t: &[(String, Tensor)]) -> depthflow_core::Result<()> {
        match self {
            Net::Flow(m) => m.load_snapshot(t),
            Net::Token(m) => m.load_snapshot(t),
        }
    }
}

/// One scene's prediction. `normals` is `None` for depth-only models.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrediction {
    pub depth: Grid<f64>,
    pub normals: Option<NormalGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub spec: ModelSpec,
    pub net: Net,
}

/// `model.ckpt` -> `model.json`.
pub fn sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

impl SavedModel {
    /// Fresh parameters drawn from `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match &spec {
            ModelSpec::Flow {
                objective,
                hidden,
                task,
                euler_steps,
            } => {
                FlowObjective::new(*objective, *euler_steps)?;
                let (c, l) = ModelSpec::flow_dims(task);
                Net::Flow(VelocityModel::new(
                    objective.layout(),
                    c,
                    l,
                    hidden,
                    &mut rng,
                )?)
            }
            ModelSpec::Token {
                layout,
                resolution,
                dim,
                hidden,
                ..
            } => {
                let seq = 2 * layout.tokens_per_half(*resolution);
                Net::Token(TokenModel::new(
                    seq,
                    layout.channels,
                    *dim,
                    *hidden,
                    &mut rng,
                )?)
            }
        };
        Ok(Self { spec, net })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        checkpoint::write(BufWriter::new(f), &self.net.snapshot())?;
        let mut json = serde_json::to_string_pretty(&self.spec)?;
        json.push('\n');
        let side = sidecar(path);
        fs::write(&side, json).with_context(|| format!("writing {}", side.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let text =
            fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?;
        let spec: ModelSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Corrupt(format!("{}: {e}", side.display())))?;
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let tensors = checkpoint::read(BufReader::new(f))
            .with_context(|| format!("reading {}", path.display()))?;
        let mut model = Self::init(spec, 0)?;
        model
            .net
            .load_snapshot(&tensors)
            .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        Ok(model)
    }

    /// Depth in meters (and normals when the model predicts them) for each
    /// scene. Stochastic objectives draw their starts from `rng`.
    pub fn predict_scenes<R: Rng + ?Sized>(
        &self,
        scenes: &[SceneSample],
        rng: &mut R,
    ) -> Result<Vec<ScenePrediction>> {
        let Some(first) = scenes.first() else {
            return Ok(Vec::new());
        };
        let res = first.resolution();
        if self.spec.resolution() != Some(res) {
            return Err(Error::Contract(format!(
                "model expects scenes at {:?}, data is {res}x{res}",
                self.spec.resolution()
            ))
            .into());
        }
        match (&self.spec, &self.net) {
            (
                ModelSpec::Flow {
                    objective,
                    euler_steps,
                    task: TaskSpec::Scenes { quant, .. },
                    ..
                },
                Net::Flow(m),
            ) => {
                let obj = FlowObjective::new(*objective, *euler_steps)?;
                let mut xs = Vec::with_capacity(scenes.len() * res * res);
                for s in scenes {
                    xs.extend_from_slice(s.image_proxy.as_slice());
                }
                let z_x = Tensor::new(vec![scenes.len(), res * res], xs)?;
                let pred = flow::predict(&obj, m, &z_x, rng)?;
                let scheme = QuantScheme::reference(*quant);
                (0..scenes.len())
                    .map(|i| {
                        let values = Grid::from_vec(res, res, pred.row(i).to_vec())?;
                        let label = NormalizedLabel::new(values, Grid::filled(res, res, true))?;
                        Ok(ScenePrediction {
                            depth: depth_codec::decode(&scheme, &label)?,
                            normals: None,
                        })
                    })
                    .collect()
            }
            (ModelSpec::Token { mode, layout, .. }, Net::Token(m)) => {
                let refs: Vec<&SceneSample> = scenes.iter().collect();
                let batch = layout.batch(&refs)?;
                let out = m.predict(&batch.inputs)?;
                let (pd, pn) = layout.task_halves_tensor(&out)?;
                let n = pd.numel() / scenes.len();
                (0..scenes.len())
                    .map(|i| {
                        let (depth, normals) = layout.decode_sample(
                            &pd.data()[i * n..(i + 1) * n],
                            &pn.data()[i * n..(i + 1) * n],
                            res,
                        )?;
                        Ok(ScenePrediction {
                            depth,
                            normals: (*mode != JointMode::DepthOnly).then_some(normals),
                        })
                    })
                    .collect()
            }
            _ => Err(Error::Contract("model does not read scenes".into()).into()),
        }
    }
}
