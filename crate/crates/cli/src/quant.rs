use std::path::PathBuf;

use anyhow::Result;
use depthflow_core::depth_codec::{distinguishable, ErrorRow};
use depthflow_core::{QuantScheme, SchemeKind, StepModel};
use serde_json::json;

use crate::args::QuantArgs;
use crate::config::{List, Ratio, Resolver};
use crate::output::{run_dir, Run};
use crate::UsageError;

pub const HEADLINE_DEPTHS: [f64; 2] = [80.0, 0.1];
pub const SWEEP_POINTS: usize = 200;
/// Pair checked for separability at the far end of the range.
pub const FAR_PAIR: (f64, f64) = (39.0, 78.0);

/// Rows for every scheme at every depth, schemes outermost.
pub fn error_table(
    schemes: &[SchemeKind],
    depths: &[f64],
    step: StepModel,
) -> Result<Vec<ErrorRow>> {
    let mut rows = Vec::with_capacity(schemes.len() * depths.len());
    for &kind in schemes {
        let scheme = QuantScheme::reference(kind);
        for &d in depths {
            rows.push(ErrorRow::compute(&scheme, d, step)?);
        }
    }
    Ok(rows)
}

/// `n` log-spaced depths over the scheme's range, the lower end lifted to
/// 0.1 m where the range starts at zero.
pub fn sweep_depths(scheme: &QuantScheme, n: usize) -> Vec<f64> {
    let lo = scheme.d_min().max(0.1);
    let hi = scheme.d_max();
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo * (hi / lo).powf(i as f64 / (n - 1) as f64)
                }
            })
            .collect(),
    }
}

pub fn run(a: QuantArgs) -> Result<()> {
    let mut r = Resolver::open(a.common.config.as_deref())?;
    let out = r.optional(
        "out",
        a.common.out.as_ref().map(|p| p.display().to_string()),
    )?;
    let default_schemes = List(
        SchemeKind::ALL
            .iter()
            .map(|k| k.name().to_string())
            .collect(),
    );
    let names = r.get("schemes", a.schemes.clone(), default_schemes)?;
    let delta_v = r.get("delta-v", a.delta_v, Ratio::from_fraction(1.0, 256.0))?;
    let depths = r.get("depths", a.depths.clone(), List(HEADLINE_DEPTHS.to_vec()))?;
    let points = r.get("sweep-points", a.sweep_points, SWEEP_POINTS)?;
    let mut settings = r.finish()?;
    settings.remove("out");

    let schemes = names
        .0
        .iter()
        .map(|n| {
            n.parse::<SchemeKind>()
                .map_err(|e| UsageError(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if schemes.is_empty() {
        return Err(UsageError("--schemes is empty".into()).into());
    }
    let step = StepModel::new(delta_v.value).map_err(|e| UsageError(format!("--delta-v: {e}")))?;

    let mut run = Run::create(
        run_dir(out.map(PathBuf::from), "quant-table"),
        "quant-table",
    )?;
    let table = error_table(&schemes, &depths.0, step)?;
    run.write_csv("errors.csv", &table)?;
    let mut sweep = Vec::new();
    for &kind in &schemes {
        let scheme = QuantScheme::reference(kind);
        for d in sweep_depths(&scheme, points) {
            sweep.push(ErrorRow::compute(&scheme, d, step)?);
        }
    }
    run.write_csv("sweep.csv", &sweep)?;

    let mut separable = serde_json::Map::new();
    for &kind in &schemes {
        let s = QuantScheme::reference(kind);
        separable.insert(
            kind.name().into(),
            json!(distinguishable(&s, FAR_PAIR.0, FAR_PAIR.1, step)?),
        );
    }
    for row in &table {
        println!(
            "{:<12} {:>8} m  abs {:>12.6} m  absrel {:.6}",
            row.scheme, row.depth_m, row.abs_error_m, row.absrel
        );
    }
    let results = json!({
        "delta_v": step.delta_v(),
        "table": table,
        "distinguishable": { "depths_m": [FAR_PAIR.0, FAR_PAIR.1], "by_scheme": separable },
    });
    let path = run.finish(&settings, results)?;
    println!("{}", path.display());
    Ok(())
}
