use std::path::PathBuf;

use anyhow::Result;
use depthflow_core::scenes::{generate_dataset, save_dataset, DatasetParams, Pool, DEFAULT_MIX};
use serde_json::json;

use crate::args::GenArgs;
use crate::config::{List, Resolver};
use crate::output::{run_dir, Run};
use crate::UsageError;

pub const DEFAULT_COUNT: usize = 100;
pub const DEFAULT_RESOLUTION: usize = 16;

pub fn run(a: GenArgs) -> Result<()> {
    let mut r = Resolver::open(a.common.config.as_deref())?;
    let seed = r.get("seed", a.common.seed, 0u64)?;
    let out = r.optional(
        "out",
        a.common.out.as_ref().map(|p| p.display().to_string()),
    )?;
    let count = r.get("count", a.count, DEFAULT_COUNT)?;
    let mix = r.get("mix", a.mix.clone(), List(DEFAULT_MIX.to_vec()))?;
    let resolution = r.get("resolution", a.resolution, DEFAULT_RESOLUTION)?;
    let mut settings = r.finish()?;
    settings.remove("out");
    let [indoor, outdoor] = mix.0[..] else {
        return Err(UsageError(format!(
            "--mix needs two probabilities, got {}",
            mix.0.len()
        ))
        .into());
    };

    let params = DatasetParams {
        seed,
        count,
        resolution,
        mix: [indoor, outdoor],
    };
    let samples = generate_dataset(&params)?;
    let mut run = Run::create(run_dir(out.map(PathBuf::from), "gen-data"), "gen-data")?;
    let manifest = save_dataset(run.dir(), &params, &samples)?;
    run.file(depthflow_core::scenes::MANIFEST_FILE);
    let pools = Pool::ALL.map(|p| samples.iter().filter(|s| s.pool == p).count());
    let results = json!({
        "count": manifest.count,
        "resolution": manifest.resolution,
        "indoor_like": pools[0],
        "outdoor_like": pools[1],
        "files": manifest.samples.len() * 4,
    });
    let path = run.finish(&settings, results)?;
    println!("{}", path.display());
    Ok(())
}
