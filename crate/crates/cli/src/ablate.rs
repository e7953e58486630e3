use std::path::PathBuf;

use anyhow::Result;
use depthflow_core::flow::ObjectiveKind;
use depthflow_core::metrics::AlignSpace;
use depthflow_core::SchemeKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::args::AblateArgs;
use crate::config::{List, Resolver};
use crate::eval::score_scenes;
use crate::output::{run_dir, Run};
use crate::train::{execute, JointChoice, Settings, TaskName, TrainData};
use crate::UsageError;

/// One row of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub id: &'static str,
    pub objective: ObjectiveKind,
    pub quant: SchemeKind,
    pub joint: JointChoice,
    pub euler_steps: usize,
}

const fn variant(
    id: &'static str,
    objective: ObjectiveKind,
    quant: SchemeKind,
    joint: JointChoice,
    euler_steps: usize,
) -> Variant {
    Variant {
        id,
        objective,
        quant,
        joint,
        euler_steps,
    }
}

use JointChoice::{Off, On, Single};
use ObjectiveKind::{
    ConsistentVelocity as Cv, ConsistentVelocityFixedStart as Cvfs, DirectAdapt as Direct,
};
use SchemeKind::{Inverse, Logarithmic, Uniform};

pub const SCENE_VARIANTS: [Variant; 8] = [
    variant("id2a", Direct, Uniform, Off, 1),
    variant("id2b", Direct, Uniform, Off, 10),
    variant("id3", Cv, Uniform, Off, 1),
    variant("id4", Cvfs, Uniform, Off, 1),
    variant("id5", Cvfs, Inverse, Off, 1),
    variant("id6", Cvfs, Logarithmic, Off, 1),
    variant("id6t", Cvfs, Logarithmic, Single, 1),
    variant("id8", Cvfs, Logarithmic, On, 1),
];

pub const TOY_VARIANTS: [Variant; 3] = [
    variant("direct", Direct, Uniform, Off, 1),
    variant("cv", Cv, Uniform, Off, 1),
    variant("cvfs", Cvfs, Uniform, Off, 1),
];

/// Per-seed result. Scene metrics are `None` on the toy task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub id: String,
    pub seed: u64,
    pub objective: String,
    pub quant: SchemeKind,
    pub joint: String,
    pub euler_steps: usize,
    pub label_mse: f64,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub mean_err_deg: Option<f64>,
    pub within_11_25: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub rank: usize,
    pub id: String,
    pub objective: String,
    pub quant: SchemeKind,
    pub joint: String,
    pub euler_steps: usize,
    pub seeds: usize,
    pub label_mse: f64,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub mean_err_deg: Option<f64>,
    pub within_11_25: Option<f64>,
}

fn apply(base: &Settings, v: &Variant) -> Settings {
    Settings {
        objective: v.objective,
        quant: v.quant,
        joint: v.joint,
        euler_steps: v.euler_steps,
        ..base.clone()
    }
}

/// Trains `v` on `data` and scores it on the held-out split.
pub fn run_variant(base: &Settings, v: &Variant, data: &TrainData, seed: u64) -> Result<RunRow> {
    let s = apply(base, v);
    let outcome = execute(s.spec(seed)?, &s.hyper(seed), data)?;
    let label_mse = outcome.test_mse().unwrap_or(f64::NAN);
    let metrics = match data {
        TrainData::Scenes { test, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds = outcome.model.predict_scenes(test, &mut rng)?;
            Some(score_scenes(&preds, test, AlignSpace::Depth, "")?.remove(0))
        }
        TrainData::Toy { .. } => None,
    };
    Ok(RunRow {
        id: v.id.to_string(),
        seed,
        objective: v.objective.to_string(),
        quant: v.quant,
        joint: v.joint.to_string(),
        euler_steps: v.euler_steps,
        label_mse,
        absrel: metrics.as_ref().map(|m| m.absrel),
        delta1: metrics.as_ref().map(|m| m.delta1),
        mean_err_deg: metrics.as_ref().map(|m| m.mean_err_deg),
        within_11_25: metrics.as_ref().map(|m| m.within_11_25),
    })
}

/// Every variant under every seed; data is drawn once per seed.
pub fn run_matrix(
    base: &Settings,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(&Variant, u64),
) -> Result<Vec<RunRow>> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        let data = base.load_data(seed)?;
        for v in variants {
            progress(v, seed);
            rows.push(run_variant(base, v, &data, seed)?);
        }
    }
    Ok(rows)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<_>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seed means per variant, ranked by AbsRel when present, else label MSE.
pub fn summarize(variants: &[Variant], rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = variants
        .iter()
        .map(|v| {
            let mine: Vec<&RunRow> = rows.iter().filter(|r| r.id == v.id).collect();
            SummaryRow {
                rank: 0,
                id: v.id.to_string(),
                objective: v.objective.to_string(),
                quant: v.quant,
                joint: v.joint.to_string(),
                euler_steps: v.euler_steps,
                seeds: mine.len(),
                label_mse: mean_of(mine.iter().map(|r| Some(r.label_mse))).unwrap_or(f64::NAN),
                absrel: mean_of(mine.iter().map(|r| r.absrel)),
                delta1: mean_of(mine.iter().map(|r| r.delta1)),
                mean_err_deg: mean_of(mine.iter().map(|r| r.mean_err_deg)),
                within_11_25: mean_of(mine.iter().map(|r| r.within_11_25)),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        let key = |r: &SummaryRow| r.absrel.unwrap_or(r.label_mse);
        key(a).total_cmp(&key(b)).then_with(|| a.id.cmp(&b.id))
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    out
}

fn by_id<'a>(summary: &'a [SummaryRow], id: &str) -> Option<&'a SummaryRow> {
    summary.iter().find(|r| r.id == id)
}

/// Pairwise comparisons reported in the manifest.
pub fn orderings(summary: &[SummaryRow], task: TaskName) -> serde_json::Value {
    let lt = |a: &str, b: &str, f: fn(&SummaryRow) -> Option<f64>| -> Option<bool> {
        Some(f(by_id(summary, a)?)? < f(by_id(summary, b)?)?)
    };
    let mse = |r: &SummaryRow| Some(r.label_mse);
    let absrel = |r: &SummaryRow| r.absrel;
    let err = |r: &SummaryRow| r.mean_err_deg;
    match task {
        TaskName::Toy => json!({
            "cvfs_below_cv": lt("cvfs", "cv", mse),
            "cv_below_direct": lt("cv", "direct", mse),
        }),
        TaskName::Scenes => json!({
            "cv_below_direct": lt("id3", "id2a", absrel),
            "cvfs_below_cv": lt("id4", "id3", absrel),
            "log_below_uniform": lt("id6", "id4", absrel),
            "log_below_inverse": lt("id6", "id5", absrel),
            "joint_below_single": lt("id8", "id6t", absrel),
            "joint_normals_vs_fd": lt("id8", "id6t", err),
        }),
    }
}

pub fn run(a: AblateArgs) -> Result<()> {
    let mut r = Resolver::open(a.common.config.as_deref())?;
    let out = r.optional(
        "out",
        a.common.out.as_ref().map(|p| p.display().to_string()),
    )?;
    let seeds = r.get("seeds", a.seeds.clone(), List(vec![0u64, 1, 2]))?;
    let base = Settings::resolve(&mut r, &a.model)?;
    let mut settings = r.finish()?;
    settings.remove("out");
    let m = &a.model;
    if m.objective.is_some() || m.quant.is_some() || m.joint.is_some() || m.euler_steps.is_some() {
        return Err(UsageError(
            "ablate sets objective, quant, joint and euler steps per configuration".into(),
        )
        .into());
    }
    for key in ["objective", "quant", "joint", "euler-steps"] {
        settings.remove(key);
    }
    if seeds.0.is_empty() {
        return Err(UsageError("--seeds is empty".into()).into());
    }
    let variants: &[Variant] = match base.task {
        TaskName::Scenes => &SCENE_VARIANTS,
        TaskName::Toy => &TOY_VARIANTS,
    };
    let (count, test_count) = base.effective_counts();
    settings.insert("count".into(), count.to_string());
    settings.insert("test-count".into(), test_count.to_string());

    let mut run = Run::create(run_dir(out.map(PathBuf::from), "ablate"), "ablate")?;
    let rows = run_matrix(&base, variants, &seeds.0, |v, seed| {
        eprintln!("ablate: {} seed {seed}", v.id)
    })?;
    let summary = summarize(variants, &rows);
    run.write_csv("runs.csv", &rows)?;
    run.write_csv("summary.csv", &summary)?;
    for s in &summary {
        println!(
            "{:>2} {:<5} label_mse {:.6}  absrel {}",
            s.rank,
            s.id,
            s.label_mse,
            s.absrel.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    let results = json!({ "summary": summary, "orderings": orderings(&summary, base.task) });
    let path = run.finish(&settings, results)?;
    println!("{}", path.display());
    Ok(())
}
