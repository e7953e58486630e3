use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::Result;
use depthflow_core::flow::{
    self, FlowDataset, FlowObjective, ObjectiveKind, ToyMap, ToyTask, TrainConfig,
    DEFAULT_BATCH_SIZE, DEFAULT_POOL_MIX, DISPERSION_WEIGHT, TOY_LR,
};
use depthflow_core::joint::{
    cross_half_gradient_probe, train_joint, JointConfig, JointMode, JointTrace, ProbeResult,
    TokenLayout,
};
use depthflow_core::scenes::{SceneSample, DEFAULT_MIX};
use depthflow_core::tensor::AdamWConfig;
use depthflow_core::SchemeKind;
use serde::Serialize;
use serde_json::json;

use crate::args::{ModelArgs, TrainArgs};
use crate::config::{List, Resolver};
use crate::data::{self, TEST_SEED_OFFSET};
use crate::model::{ModelSpec, Net, SavedModel, TaskSpec};
use crate::output::{run_dir, Run};
use crate::UsageError;

pub const CHECKPOINT: &str = "model.ckpt";
pub const JOINT_BATCH_SIZE: usize = 8;
pub const TOKEN_DIM: usize = 16;
pub const TOKEN_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointChoice {
    /// Flow MLP on flattened scenes.
    Off,
    /// Token model, both halves supervised.
    On,
    /// Token model, depth half only.
    Single,
}

impl FromStr for JointChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "off" | "false" | "no" => Ok(Self::Off),
            "on" | "true" | "yes" => Ok(Self::On),
            "single" | "depth-only" => Ok(Self::Single),
            other => Err(format!("'{other}' is not on, off or single")),
        }
    }
}

impl fmt::Display for JointChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::On => "on",
            Self::Single => "single",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskName {
    Scenes,
    Toy,
}

impl FromStr for TaskName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "scenes" => Ok(Self::Scenes),
            "toy" => Ok(Self::Toy),
            other => Err(format!("'{other}' is not scenes or toy")),
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scenes => "scenes",
            Self::Toy => "toy",
        })
    }
}

/// Resolved model and data settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub task: TaskName,
    pub joint: JointChoice,
    pub objective: ObjectiveKind,
    pub quant: SchemeKind,
    pub euler_steps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch_size: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub dim: usize,
    pub count: Option<usize>,
    pub test_count: Option<usize>,
    pub resolution: usize,
    pub cond_dim: usize,
    pub latent_dim: usize,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
}

fn path_setting(
    r: &mut Resolver,
    key: &str,
    flag: &Option<PathBuf>,
) -> Result<Option<PathBuf>, UsageError> {
    Ok(
        r.optional(key, flag.as_ref().map(|p| p.display().to_string()))?
            .map(PathBuf::from),
    )
}

impl Settings {
    pub fn resolve(r: &mut Resolver, a: &ModelArgs) -> Result<Self, UsageError> {
        Ok(Self {
            task: r.get("task", a.task, TaskName::Scenes)?,
            joint: r.get("joint", a.joint, JointChoice::Off)?,
            objective: r.get(
                "objective",
                a.objective,
                ObjectiveKind::ConsistentVelocityFixedStart,
            )?,
            quant: r.get("quant", a.quant, SchemeKind::Logarithmic)?,
            euler_steps: r.get("euler-steps", a.euler_steps, 1)?,
            epochs: r.get("epochs", a.epochs, 30)?,
            lr: r.get("lr", a.lr, TOY_LR)?,
            lambda: r.get("lambda", a.lambda, DISPERSION_WEIGHT)?,
            batch_size: r.optional("batch-size", a.batch_size)?,
            hidden: r
                .optional("hidden", a.hidden.clone())?
                .map(|l: List<usize>| l.0),
            dim: r.get("dim", a.dim, TOKEN_DIM)?,
            count: r.optional("count", a.count)?,
            test_count: r.optional("test-count", a.test_count)?,
            resolution: r.get("resolution", a.resolution, 16)?,
            cond_dim: r.get("cond-dim", a.cond_dim, 4)?,
            latent_dim: r.get("latent-dim", a.latent_dim, 4)?,
            data: path_setting(r, "data", &a.data)?,
            test_data: path_setting(r, "test-data", &a.test_data)?,
        })
    }

    fn uses_tokens(&self) -> bool {
        self.joint != JointChoice::Off
    }

    /// Batch size after path-dependent defaults.
    pub fn effective_batch(&self) -> usize {
        self.batch_size.unwrap_or(if self.uses_tokens() {
            JOINT_BATCH_SIZE
        } else {
            DEFAULT_BATCH_SIZE
        })
    }

    pub fn effective_hidden(&self) -> Vec<usize> {
        self.hidden
            .clone()
            .unwrap_or_else(|| match (self.uses_tokens(), self.task) {
                (true, _) => vec![TOKEN_HIDDEN],
                (false, TaskName::Scenes) => vec![128, 128],
                (false, TaskName::Toy) => vec![64, 64],
            })
    }

    pub fn effective_counts(&self) -> (usize, usize) {
        let (c, t) = match self.task {
            TaskName::Scenes => (128, 32),
            TaskName::Toy => (1024, 512),
        };
        (self.count.unwrap_or(c), self.test_count.unwrap_or(t))
    }

    pub fn spec(&self, seed: u64) -> Result<ModelSpec, UsageError> {
        let hidden = self.effective_hidden();
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(UsageError("hidden widths must be positive".into()));
        }
        match (self.joint, self.task) {
            (JointChoice::Off, TaskName::Scenes) => Ok(ModelSpec::Flow {
                objective: self.objective,
                euler_steps: self.euler_steps,
                hidden,
                task: TaskSpec::Scenes {
                    quant: self.quant,
                    resolution: self.resolution,
                },
            }),
            (JointChoice::Off, TaskName::Toy) => Ok(ModelSpec::Flow {
                objective: self.objective,
                euler_steps: self.euler_steps,
                hidden,
                task: TaskSpec::Toy {
                    map: ToyMap::Nonlinear,
                    cond_dim: self.cond_dim,
                    latent_dim: self.latent_dim,
                    task_seed: seed,
                },
            }),
            (_, TaskName::Toy) => Err(UsageError("joint training needs --task scenes".into())),
            (choice, TaskName::Scenes) => {
                let mode = if choice == JointChoice::On {
                    JointMode::Joint
                } else {
                    JointMode::DepthOnly
                };
                Ok(ModelSpec::Token {
                    mode,
                    layout: TokenLayout {
                        quant: self.quant,
                        ..TokenLayout::for_mode(mode)
                    },
                    resolution: self.resolution,
                    dim: self.dim,
                    hidden: hidden[0],
                })
            }
        }
    }

    pub fn hyper(&self, seed: u64) -> Hyper {
        Hyper {
            epochs: self.epochs,
            lr: self.lr,
            lambda: self.lambda,
            batch_size: self.effective_batch(),
            seed,
        }
    }

    pub fn load_data(&self, seed: u64) -> Result<TrainData> {
        let (count, test_count) = self.effective_counts();
        match self.task {
            TaskName::Scenes => {
                let (train, descriptor) =
                    data::scenes(self.data.as_deref(), seed, count, self.resolution)?;
                let (test, _) = data::scenes(
                    self.test_data.as_deref(),
                    seed + TEST_SEED_OFFSET,
                    test_count,
                    self.resolution,
                )?;
                Ok(TrainData::Scenes {
                    train,
                    test,
                    descriptor,
                })
            }
            TaskName::Toy => {
                let task = ToyTask::new(ToyMap::Nonlinear, self.cond_dim, self.latent_dim, seed)?;
                Ok(TrainData::Toy {
                    train: task.sample(count, &DEFAULT_POOL_MIX, seed + 1)?,
                    test: task.sample(test_count, &DEFAULT_POOL_MIX, seed + TEST_SEED_OFFSET)?,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum TrainData {
    Scenes {
        train: Vec<SceneSample>,
        test: Vec<SceneSample>,
        descriptor: String,
    },
    Toy {
        train: FlowDataset,
        test: FlowDataset,
    },
}

impl TrainData {
    pub fn descriptor(&self) -> String {
        match self {
            TrainData::Scenes { descriptor, .. } => descriptor.clone(),
            TrainData::Toy { train, .. } => train.descriptor.clone(),
        }
    }
}

/// `epoch,train_loss,test_mse`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub model: SavedModel,
    pub losses: Vec<LossRow>,
    pub joint: Option<JointTrace>,
    pub probe: Option<ProbeResult>,
    pub steps: usize,
    pub forwards_per_step: Option<f64>,
}

impl Outcome {
    /// Held-out MSE after the last epoch; label space for depth.
    pub fn test_mse(&self) -> Option<f64> {
        self.losses.last().and_then(|l| l.test_mse)
    }
}

/// Trains a fresh model for `spec` on `data`.
pub fn execute(spec: ModelSpec, hyper: &Hyper, data: &TrainData) -> Result<Outcome> {
    let mut model = SavedModel::init(spec, hyper.seed)?;
    let optimizer = AdamWConfig {
        lr: hyper.lr,
        ..AdamWConfig::default()
    };
    let spec = model.spec.clone();
    match (&spec, &mut model.net) {
        (
            ModelSpec::Flow {
                objective,
                euler_steps,
                ..
            },
            Net::Flow(m),
        ) => {
            let obj = FlowObjective::new(*objective, *euler_steps)?;
            let (train, test) = match data {
                TrainData::Scenes {
                    train,
                    test,
                    descriptor,
                } => {
                    let quant = match &spec {
                        ModelSpec::Flow {
                            task: TaskSpec::Scenes { quant, .. },
                            ..
                        } => *quant,
                        _ => return Err(UsageError("toy model given scene data".into()).into()),
                    };
                    (
                        data::flow_dataset(train, quant, descriptor)?,
                        data::flow_dataset(test, quant, "test")?,
                    )
                }
                TrainData::Toy { train, test } => (train.clone(), test.clone()),
            };
            let config = TrainConfig {
                epochs: hyper.epochs,
                batch_size: hyper.batch_size,
                optimizer,
                dispersion_weight: hyper.lambda,
                pool_mix: data::both_pools(&train.pools).then(|| DEFAULT_POOL_MIX.to_vec()),
                seed: hyper.seed,
                ..TrainConfig::default()
            };
            let trace = flow::train(&obj, m, &train, &config, Some(&test))?;
            let losses = trace
                .epochs
                .iter()
                .map(|e| LossRow {
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    test_mse: e.test_mse,
                })
                .collect();
            Ok(Outcome {
                losses,
                joint: None,
                probe: None,
                steps: trace.steps,
                forwards_per_step: (trace.steps > 0)
                    .then(|| trace.forward_evals as f64 / trace.steps as f64),
                model,
            })
        }
        (ModelSpec::Token { mode, layout, .. }, Net::Token(m)) => {
            let TrainData::Scenes { train, test, .. } = data else {
                return Err(UsageError("joint training needs scene data".into()).into());
            };
            let config = JointConfig {
                epochs: hyper.epochs,
                batch_size: hyper.batch_size,
                optimizer,
                mode: *mode,
                layout: *layout,
                pool_mix: Some(DEFAULT_MIX.to_vec()),
                seed: hyper.seed,
            };
            let trace = train_joint(m, train, &config, Some(test))?;
            let losses = trace
                .epochs
                .iter()
                .map(|e| LossRow {
                    epoch: e.epoch,
                    train_loss: match mode {
                        JointMode::Joint => e.depth_loss + e.normal_loss,
                        JointMode::DepthOnly => e.depth_loss,
                        JointMode::NormalOnly => e.normal_loss,
                    },
                    test_mse: e.test_depth_mse,
                })
                .collect();
            let probe_scenes: Vec<&SceneSample> = test.iter().take(4).collect();
            let probe = match probe_scenes.is_empty() {
                true => None,
                false => Some(cross_half_gradient_probe(
                    m,
                    &layout.batch(&probe_scenes)?,
                    layout,
                )?),
            };
            Ok(Outcome {
                losses,
                probe,
                steps: trace.steps,
                forwards_per_step: trace.forwards_per_step(),
                joint: Some(trace),
                model,
            })
        }
        _ => unreachable!("SavedModel::init pairs specs with matching nets"),
    }
}

pub fn run(a: TrainArgs) -> Result<()> {
    let mut r = Resolver::open(a.common.config.as_deref())?;
    let seed = r.get("seed", a.common.seed, 0u64)?;
    let out = path_setting(&mut r, "out", &a.common.out)?;
    let mut s = Settings::resolve(&mut r, &a.model)?;
    let mut settings = r.finish()?;
    settings.remove("out");
    let mut run = Run::create(run_dir(out, "train"), "train")?;
    if s.joint != JointChoice::Off && s.objective != ObjectiveKind::ConsistentVelocityFixedStart {
        run.warn(format!(
            "joint training always uses the fixed-start objective; --objective {} is ignored",
            s.objective
        ));
        s.objective = ObjectiveKind::ConsistentVelocityFixedStart;
        settings.insert("objective".into(), s.objective.to_string());
    }
    let spec = s.spec(seed)?;
    let hyper = s.hyper(seed);
    let (count, test_count) = s.effective_counts();
    record_effective(&mut settings, &s, count, test_count);
    let data = s.load_data(seed)?;
    let outcome = execute(spec, &hyper, &data)?;

    let ckpt = run.file(CHECKPOINT);
    outcome.model.save(&ckpt)?;
    run.file("model.json");
    run.write_csv("loss.csv", &outcome.losses)?;
    if let Some(trace) = &outcome.joint {
        let path = run.file("joint.csv");
        trace.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))?;
    }
    if let Some(p) = outcome.probe {
        run.write_csv("probe.csv", [p])?;
    }
    let results = json!({
        "dataset": data.descriptor(),
        "steps": outcome.steps,
        "forwards_per_step": outcome.forwards_per_step,
        "final_train_loss": outcome.losses.last().map(|l| l.train_loss),
        "final_test_mse": outcome.test_mse(),
        "probe": outcome.probe,
    });
    let path = run.finish(&settings, results)?;
    println!("{}", path.display());
    Ok(())
}

/// Adds the path-dependent defaults to the manifest settings.
pub fn record_effective(
    settings: &mut BTreeMap<String, String>,
    s: &Settings,
    count: usize,
    test_count: usize,
) {
    settings.insert("batch-size".into(), s.effective_batch().to_string());
    settings.insert("hidden".into(), List(s.effective_hidden()).to_string());
    settings.insert("count".into(), count.to_string());
    settings.insert("test-count".into(), test_count.to_string());
}
