//! Scene loading and the scene-to-flow adapter.

use std::path::Path;

use anyhow::{Context, Result};
use depthflow_core::depth_codec::{self, QuantScheme};
use depthflow_core::flow::FlowDataset;
use depthflow_core::scenes::{
    generate_dataset, load_dataset, DatasetParams, SceneSample, DEFAULT_MIX,
};
use depthflow_core::{Error, SchemeKind, Tensor};

/// Added to the run seed for the generated held-out scenes.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

/// Scenes from `dir`, or generated from `(seed, count, resolution)`.
/// The second value names the source for manifests.
pub fn scenes(
    dir: Option<&Path>,
    seed: u64,
    count: usize,
    resolution: usize,
) -> Result<(Vec<SceneSample>, String)> {
    match dir {
        Some(d) => {
            let (m, s) =
                load_dataset(d).with_context(|| format!("loading dataset {}", d.display()))?;
            Ok((
                s,
                format!("dir:{}:seed={}:n={}", d.display(), m.seed, m.count),
            ))
        }
        None => {
            let params = DatasetParams {
                seed,
                count,
                resolution,
                mix: DEFAULT_MIX,
            };
            let s = generate_dataset(&params)?;
            Ok((
                s,
                format!("generated:seed={seed}:n={count}:res={resolution}"),
            ))
        }
    }
}

/// Rows `image_proxy -> encoded depth label`, one scene per row.
pub fn flow_dataset(
    scenes: &[SceneSample],
    quant: SchemeKind,
    descriptor: &str,
) -> Result<FlowDataset> {
    let Some(first) = scenes.first() else {
        return Err(Error::Contract("no scenes".into()).into());
    };
    let res = first.resolution();
    let scheme = QuantScheme::reference(quant);
    let mut xs = Vec::with_capacity(scenes.len() * res * res);
    let mut ys = Vec::with_capacity(scenes.len() * res * res);
    for s in scenes {
        if s.resolution() != res {
            return Err(Error::Contract("scenes must share a resolution".into()).into());
        }
        let label = depth_codec::encode(&scheme, &s.depth)?;
        if label.valid.count() != label.valid.len() {
            return Err(Error::Contract("depth outside the quantization range".into()).into());
        }
        xs.extend_from_slice(s.image_proxy.as_slice());
        ys.extend_from_slice(label.values.as_slice());
    }
    let n = scenes.len();
    Ok(FlowDataset::new(
        Tensor::new(vec![n, res * res], xs)?,
        Tensor::new(vec![n, res * res], ys)?,
        scenes.iter().map(|s| s.pool.index()).collect(),
        format!("{descriptor}:quant={quant}"),
    )?)
}

/// Whether every pool label in `0..2` occurs at least once.
pub fn both_pools(pools: &[usize]) -> bool {
    pools.contains(&0) && pools.contains(&1)
}
