use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use depthflow_core::metrics::{evaluate_depth, evaluate_normals, AlignSpace, MetricRow};
use depthflow_core::scenes::{fd_normals, load_dataset, pixel_size, Pool, SceneSample};
use depthflow_core::{Error, Mask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::args::EvalArgs;
use crate::config::Resolver;
use crate::data::{self, TEST_SEED_OFFSET};
use crate::model::{SavedModel, ScenePrediction};
use crate::output::{run_dir, Run};
use crate::UsageError;

fn parse_align(s: &str) -> Result<AlignSpace, UsageError> {
    match s {
        "depth" => Ok(AlignSpace::Depth),
        "disparity" => Ok(AlignSpace::Disparity),
        other => Err(UsageError(format!(
            "--align '{other}' is not depth or disparity"
        ))),
    }
}

/// Per-image scores, `None` where the normal mask is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SceneScore {
    pool: Pool,
    n_valid: usize,
    absrel: f64,
    delta1: f64,
    normals: Option<(f64, f64)>,
}

fn score(pred: &ScenePrediction, gt: &SceneSample, space: AlignSpace) -> Result<SceneScore> {
    let d = evaluate_depth(&pred.depth, &gt.depth, &gt.valid, space)?;
    let (normals, mask) = match &pred.normals {
        Some(n) => (n.clone(), gt.valid.clone()),
        None => {
            let res = gt.resolution();
            let (n, ok) = fd_normals(&pred.depth, &Mask::filled(res, res, true), pixel_size(res))?;
            (n, ok.and(&gt.valid)?)
        }
    };
    let normals = match mask.count() {
        0 => None,
        _ => {
            let r = evaluate_normals(&normals, &gt.normals, &mask)?;
            Some((r.mean_err_deg, r.within_11_25))
        }
    };
    Ok(SceneScore {
        pool: gt.pool,
        n_valid: d.n_valid,
        absrel: d.absrel,
        delta1: d.delta1,
        normals,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn pool_label(p: Pool) -> &'static str {
    match p {
        Pool::IndoorLike => "indoor",
        Pool::OutdoorLike => "outdoor",
    }
}

/// Image-averaged metrics per dataset label: `all`, then each pool present.
fn rows(scores: &[SceneScore], suffix: &str) -> Vec<MetricRow> {
    let mut groups: Vec<(String, Vec<&SceneScore>)> = vec![("all".into(), scores.iter().collect())];
    for pool in Pool::ALL {
        let g: Vec<&SceneScore> = scores.iter().filter(|s| s.pool == pool).collect();
        if !g.is_empty() && g.len() < scores.len() {
            groups.push((pool_label(pool).to_string(), g));
        }
    }
    groups
        .into_iter()
        .map(|(name, g)| MetricRow {
            dataset: format!("{name}{suffix}"),
            n_valid: g.iter().map(|s| s.n_valid).sum(),
            absrel: 100.0 * mean(g.iter().map(|s| s.absrel)),
            delta1: 100.0 * mean(g.iter().map(|s| s.delta1)),
            mean_err_deg: mean(g.iter().filter_map(|s| s.normals.map(|n| n.0))),
            within_11_25: 100.0 * mean(g.iter().filter_map(|s| s.normals.map(|n| n.1))),
        })
        .collect()
}

/// Scores predictions against their scenes; the first row covers all scenes.
pub fn score_scenes(
    preds: &[ScenePrediction],
    gt: &[SceneSample],
    space: AlignSpace,
    suffix: &str,
) -> Result<Vec<MetricRow>> {
    if preds.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} scenes",
            preds.len(),
            gt.len()
        ))
        .into());
    }
    if gt.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()).into());
    }
    let scores = preds
        .iter()
        .zip(gt)
        .map(|(p, g)| score(p, g, space))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows(&scores, suffix))
}

fn dataset_predictions(dir: &Path, gt: &[SceneSample]) -> Result<Vec<ScenePrediction>> {
    let (_, pred) =
        load_dataset(dir).with_context(|| format!("loading predictions {}", dir.display()))?;
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} scenes",
            pred.len(),
            gt.len()
        ))
        .into());
    }
    Ok(pred
        .into_iter()
        .map(|s| ScenePrediction {
            depth: s.depth,
            normals: Some(s.normals),
        })
        .collect())
}

/// Spread of one metric across inference seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSpread {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub identical: bool,
}

pub fn spread(metric: &str, values: &[f64]) -> SeedSpread {
    let m = mean(values.iter().copied());
    let var = mean(values.iter().map(|v| (v - m).powi(2)));
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    SeedSpread {
        metric: metric.to_string(),
        mean: m,
        std: var.sqrt(),
        min,
        max,
        identical: values.windows(2).all(|w| w[0].to_bits() == w[1].to_bits()),
    }
}

pub fn run(a: EvalArgs) -> Result<()> {
    let mut r = Resolver::open(a.common.config.as_deref())?;
    let seed = r.get("seed", a.common.seed, 0u64)?;
    let out = r.optional(
        "out",
        a.common.out.as_ref().map(|p| p.display().to_string()),
    )?;
    let checkpoint = r.optional(
        "checkpoint",
        a.checkpoint.as_ref().map(|p| p.display().to_string()),
    )?;
    let pred_dir = r.optional("pred", a.pred.as_ref().map(|p| p.display().to_string()))?;
    let data_dir = r.optional("data", a.data.as_ref().map(|p| p.display().to_string()))?;
    let count = r.get("count", a.count, 32usize)?;
    let seeds = r.get("seeds", a.seeds, 1usize)?;
    let align = r.get("align", a.align.clone(), "depth".to_string())?;
    let model = match (&checkpoint, &pred_dir) {
        (Some(c), None) => Some(SavedModel::load(Path::new(c))?),
        (None, Some(_)) => None,
        _ => return Err(UsageError("give exactly one of --checkpoint and --pred".into()).into()),
    };
    let default_res = model
        .as_ref()
        .and_then(|m| m.spec.resolution())
        .unwrap_or(16);
    let resolution = r.get("resolution", a.resolution, default_res)?;
    let space = parse_align(&align)?;
    if seeds == 0 {
        return Err(UsageError("--seeds must be at least 1".into()).into());
    }
    let mut settings = r.finish()?;
    settings.remove("out");
    let mut run = Run::create(run_dir(out.map(PathBuf::from), "eval"), "eval")?;

    let (gt, descriptor) = data::scenes(
        data_dir.as_deref().map(Path::new),
        seed + TEST_SEED_OFFSET,
        count,
        resolution,
    )?;
    let mut all_rows = Vec::new();
    let mut heads = Vec::new();
    for k in 0..seeds {
        let preds = match (&model, &pred_dir) {
            (Some(m), _) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + k as u64);
                m.predict_scenes(&gt, &mut rng)?
            }
            (None, Some(dir)) => dataset_predictions(Path::new(dir), &gt)?,
            (None, None) => unreachable!(),
        };
        let suffix = if seeds > 1 {
            format!("@seed{k}")
        } else {
            String::new()
        };
        let rows = score_scenes(&preds, &gt, space, &suffix)?;
        heads.push(rows[0].clone());
        all_rows.extend(rows);
    }
    run.write_csv("metrics.csv", &all_rows)?;
    let spreads = vec![
        spread(
            "absrel",
            &heads.iter().map(|r| r.absrel).collect::<Vec<_>>(),
        ),
        spread(
            "delta1",
            &heads.iter().map(|r| r.delta1).collect::<Vec<_>>(),
        ),
        spread(
            "mean_err_deg",
            &heads.iter().map(|r| r.mean_err_deg).collect::<Vec<_>>(),
        ),
        spread(
            "within_11_25",
            &heads.iter().map(|r| r.within_11_25).collect::<Vec<_>>(),
        ),
    ];
    run.write_csv("seeds.csv", &spreads)?;
    let results = json!({
        "dataset": descriptor,
        "all": heads[0],
        "deterministic_across_seeds": spreads.iter().all(|s| s.identical),
    });
    let path = run.finish(&settings, results)?;
    println!("{}", path.display());
    Ok(())
}
