use std::path::{Path, PathBuf};

use anyhow::Result;
use depthflow_core::flow::{
    square_lattice, trajectory, velocity_field_grid, ConstantField, FieldSample, MarginalField,
};
use depthflow_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::args::FieldArgs;
use crate::config::{List, Resolver};
use crate::model::{ModelSpec, Net, SavedModel};
use crate::output::{run_dir, Run};
use crate::svg::{self, Plot};
use crate::UsageError;

/// Targets of the analytic two-dimensional example.
pub const TARGETS: [[f64; 2]; 3] = [[1.5, 1.0], [-1.0, 1.5], [0.5, -1.5]];
pub const EXTENT: f64 = 2.5;
pub const DEFAULT_GRID: usize = 11;
pub const DEFAULT_TIMES: [f64; 3] = [0.0, 0.5, 0.9];
pub const DEFAULT_STARTS: usize = 8;
pub const DEFAULT_EULER_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub mode: &'static str,
    pub path: usize,
    pub step: usize,
    pub z1: f64,
    pub z2: f64,
}

fn targets() -> Vec<Vec<f64>> {
    TARGETS.iter().map(|t| t.to_vec()).collect()
}

/// Marginal paths from Gaussian starts, then fixed-start paths from zero,
/// one per target.
pub fn trajectories(starts: usize, steps: usize, seed: u64) -> Result<Vec<TrajectoryRow>> {
    let field = MarginalField::new(targets())?;
    let cond = Tensor::zeros(&[1, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for p in 0..starts {
        let z0 = Tensor::randn(&[1, 2], 1.0, &mut rng).data().to_vec();
        for (step, z) in trajectory(&field, &cond, &z0, steps)?
            .into_iter()
            .enumerate()
        {
            rows.push(TrajectoryRow {
                mode: "direct",
                path: p,
                step,
                z1: z[0],
                z2: z[1],
            });
        }
    }
    for (p, target) in TARGETS.iter().enumerate() {
        let fixed = ConstantField {
            velocity: target.to_vec(),
        };
        for (step, z) in trajectory(&fixed, &cond, &[0.0, 0.0], steps)?
            .into_iter()
            .enumerate()
        {
            rows.push(TrajectoryRow {
                mode: "fixed",
                path: p,
                step,
                z1: z[0],
                z2: z[1],
            });
        }
    }
    Ok(rows)
}

/// Largest distance between consecutive unit directions along each path,
/// in degrees. Zero for straight paths.
pub fn max_turn_deg(rows: &[TrajectoryRow], mode: &str) -> f64 {
    let mut worst: f64 = 0.0;
    let paths: Vec<&TrajectoryRow> = rows.iter().filter(|r| r.mode == mode).collect();
    for w in paths.windows(3) {
        if w[0].path != w[2].path {
            continue;
        }
        let a = (w[1].z1 - w[0].z1, w[1].z2 - w[0].z2);
        let b = (w[2].z1 - w[1].z1, w[2].z2 - w[1].z2);
        let (na, nb) = (
            (a.0 * a.0 + a.1 * a.1).sqrt(),
            (b.0 * b.0 + b.1 * b.1).sqrt(),
        );
        if na < 1e-12 || nb < 1e-12 {
            continue;
        }
        let c = ((a.0 * b.0 + a.1 * b.1) / (na * nb)).clamp(-1.0, 1.0);
        worst = worst.max(c.acos().to_degrees());
    }
    worst
}

fn model_grid(path: &Path, lattice: &[(f64, f64, f64)]) -> Result<Vec<FieldSample>> {
    let model = SavedModel::load(path)?;
    match (&model.spec, &model.net) {
        (ModelSpec::Flow { task, .. }, Net::Flow(m)) => {
            let (cond, _) = ModelSpec::flow_dims(task);
            Ok(velocity_field_grid(m, &vec![0.0; cond], lattice)?)
        }
        _ => Err(
            Error::Contract("field plots need a flow checkpoint with a 2-D latent".into()).into(),
        ),
    }
}

fn panel(
    title: &str,
    grid: &[FieldSample],
    t: f64,
    paths: &[TrajectoryRow],
    mode: &str,
    colour: &str,
) -> Plot {
    let mut p = Plot::new(-EXTENT, EXTENT, 320.0);
    let scale = 0.12;
    for s in grid.iter().filter(|s| s.t == t) {
        p.arrow(s.z1, s.z2, scale * s.v1, scale * s.v2, "#555");
    }
    let mut current: Vec<(f64, f64)> = Vec::new();
    let mut last = None;
    for r in paths.iter().filter(|r| r.mode == mode) {
        if last != Some(r.path) && !current.is_empty() {
            p.polyline(&current, colour);
            current.clear();
        }
        current.push((r.z1, r.z2));
        last = Some(r.path);
    }
    if !current.is_empty() {
        p.polyline(&current, colour);
    }
    for t in TARGETS {
        p.circle(t[0], t[1], 4.0, "#c00");
    }
    p.label(28.0, 16.0, title);
    p
}

pub fn run(a: FieldArgs) -> Result<()> {
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
    let n = r.get("grid", a.grid, DEFAULT_GRID)?;
    let times = r.get("times", a.times.clone(), List(DEFAULT_TIMES.to_vec()))?;
    let starts = r.get("starts", a.starts, DEFAULT_STARTS)?;
    let steps = r.get("euler-steps", a.euler_steps, DEFAULT_EULER_STEPS)?;
    let mut settings = r.finish()?;
    settings.remove("out");
    if n == 0 || times.0.is_empty() {
        return Err(UsageError("--grid and --times must be non-empty".into()).into());
    }
    if times.0.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(UsageError("--times must lie in [0, 1]".into()).into());
    }
    if steps == 0 {
        return Err(UsageError("--euler-steps must be at least 1".into()).into());
    }

    let lattice = square_lattice(-EXTENT, EXTENT, n, &times.0);
    // Checked first so a bad checkpoint leaves no partial run behind.
    let model = checkpoint
        .as_deref()
        .map(|c| model_grid(Path::new(c), &lattice))
        .transpose()?;

    let mut run = Run::create(run_dir(out.map(PathBuf::from), "field-plot"), "field-plot")?;
    let direct = velocity_field_grid(&MarginalField::new(targets())?, &[], &lattice)?;
    let fixed = velocity_field_grid(
        &ConstantField {
            velocity: TARGETS[0].to_vec(),
        },
        &[],
        &lattice,
    )?;
    run.write_csv("field_direct.csv", &direct)?;
    run.write_csv("field_fixed.csv", &fixed)?;
    if let Some(m) = &model {
        run.write_csv("field_model.csv", m)?;
    }
    let paths = trajectories(starts, steps, seed)?;
    run.write_csv("trajectories.csv", &paths)?;

    let t_mid = times.0[times.0.len() / 2];
    let mut panels = vec![
        panel(
            &format!("noise start, t = {t_mid}"),
            &direct,
            t_mid,
            &paths,
            "direct",
            "#1f77b4",
        ),
        panel("zero start", &fixed, t_mid, &paths, "fixed", "#2ca02c"),
    ];
    if let Some(m) = &model {
        panels.push(panel(
            &format!("checkpoint, t = {t_mid}"),
            m,
            t_mid,
            &[],
            "",
            "#000",
        ));
    }
    run.write_text("field.svg", &svg::row(&panels))?;

    let results = json!({
        "targets": TARGETS,
        "max_turn_deg": { "direct": max_turn_deg(&paths, "direct"), "fixed": max_turn_deg(&paths, "fixed") },
        "model": model.is_some(),
    });
    let path = run.finish(&settings, results)?;
    println!("{}", path.display());
    Ok(())
}
