//! Procedural scenes with exact normals.
//!
//! Orthographic camera looking down `-z`; image rows run top to bottom,
//! world `y` points up. A surface at depth `D(x, y)` has the camera-frame
//! normal `(D_x, D_y, 1) / |(D_x, D_y, 1)|` (+z toward the viewer).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, NormalGrid};
use crate::io::{self, Pfm};

pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 80.0;
pub const INDOOR_RANGE: (f64, f64) = (0.5, 10.0);
/// Half-width of the orthographic view in meters.
pub const HALF_EXTENT: f64 = 2.0;
/// Light direction for the shading proxy (normalized at use).
pub const LIGHT: [f64; 3] = [0.3, 0.5, 1.0];
/// Sphere pixels whose normal makes more than this angle with the view axis
/// are treated as grazing and left out of the valid mask.
pub const GRAZING_DEG: f64 = 60.0;
pub const MIN_RESOLUTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Plane,
    Sphere,
    Wedge,
    Composite,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [
        Primitive::Plane,
        Primitive::Sphere,
        Primitive::Wedge,
        Primitive::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Plane => "plane",
            Self::Sphere => "sphere",
            Self::Wedge => "wedge",
            Self::Composite => "composite",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown primitive '{s}' (plane, sphere, wedge, composite)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    IndoorLike,
    OutdoorLike,
}

impl Pool {
    pub const ALL: [Pool; 2] = [Pool::IndoorLike, Pool::OutdoorLike];

    pub fn index(self) -> usize {
        match self {
            Self::IndoorLike => 0,
            Self::OutdoorLike => 1,
        }
    }
}

/// One surface of a scene. Depth and normal are evaluated in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    /// `D = c + a x + b y`.
    Plane { a: f64, b: f64, c: f64 },
    /// Front cap of a sphere centered `depth` meters away.
    Sphere {
        cx: f64,
        cy: f64,
        depth: f64,
        radius: f64,
    },
    /// `D = c + a |x - x0| + b y`; the two faces count as distinct surfaces.
    Ridge { x0: f64, a: f64, b: f64, c: f64 },
    /// Fronto-parallel rectangle, the visible face of a box.
    Rect {
        x0: f64,
        x1: f64,
        y0: f64,
        y1: f64,
        depth: f64,
    },
}

/// Hit record: depth, unit normal, a facet id (for discontinuity masking)
/// and whether the hit is grazing.
struct Hit {
    depth: f64,
    normal: [f64; 3],
    facet: usize,
    grazing: bool,
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl Surface {
    fn hit(&self, x: f64, y: f64) -> Option<(f64, [f64; 3], usize, bool)> {
        match *self {
            Surface::Plane { a, b, c } => Some((c + a * x + b * y, unit([a, b, 1.0]), 0, false)),
            Surface::Sphere {
                cx,
                cy,
                depth,
                radius,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let s2 = radius * radius - dx * dx - dy * dy;
                if s2 <= 0.0 {
                    return None;
                }
                let s = s2.sqrt();
                let normal = [dx / radius, dy / radius, s / radius];
                let grazing = normal[2] < GRAZING_DEG.to_radians().cos();
                Some((depth - s, normal, 0, grazing))
            }
            Surface::Ridge { x0, a, b, c } => {
                let side = if x >= x0 { 1.0 } else { -1.0 };
                let facet = usize::from(x >= x0);
                Some((
                    c + a * (x - x0).abs() + b * y,
                    unit([a * side, b, 1.0]),
                    facet,
                    false,
                ))
            }
            Surface::Rect {
                x0,
                x1,
                y0,
                y1,
                depth,
            } => (x >= x0 && x <= x1 && y >= y0 && y <= y1).then_some((
                depth,
                [0.0, 0.0, 1.0],
                0,
                false,
            )),
        }
    }
}

/// World coordinates of a pixel center.
pub fn pixel_center(col: usize, row: usize, resolution: usize) -> (f64, f64) {
    let h = pixel_size(resolution);
    (
        -HALF_EXTENT + (col as f64 + 0.5) * h,
        HALF_EXTENT - (row as f64 + 0.5) * h,
    )
}

pub fn pixel_size(resolution: usize) -> f64 {
    2.0 * HALF_EXTENT / resolution as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// Shading proxy in `[0, 1]`, quantized to `k / 255`.
    pub image_proxy: Grid<f64>,
    pub depth: Grid<f64>,
    pub normals: NormalGrid,
    pub valid: Mask,
    pub pool: Pool,
    pub primitive: Primitive,
}

impl SceneSample {
    pub fn resolution(&self) -> usize {
        self.depth.width()
    }
}

/// Rasterizes `surfaces` with a nearest-hit rule.
///
/// A pixel is valid when its hit is not grazing and its 8 neighbours hit the
/// same facet of the same surface, so finite-difference stencils never
/// straddle an occlusion boundary or crease.
pub fn render(
    surfaces: &[Surface],
    resolution: usize,
    pool: Pool,
    primitive: Primitive,
) -> Result<SceneSample> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::domain(format!(
            "resolution {resolution} below {MIN_RESOLUTION}"
        )));
    }
    let hits: Vec<Hit> = (0..resolution * resolution)
        .map(|i| {
            let (x, y) = pixel_center(i % resolution, i / resolution, resolution);
            surfaces
                .iter()
                .enumerate()
                .filter_map(|(k, s)| {
                    s.hit(x, y).map(|(depth, normal, facet, grazing)| Hit {
                        depth,
                        normal,
                        facet: k * 4 + facet,
                        grazing,
                    })
                })
                .min_by(|a, b| a.depth.total_cmp(&b.depth))
                .ok_or_else(|| Error::domain(format!("no surface covers pixel {i}")))
        })
        .collect::<Result<_>>()?;
    for h in &hits {
        if !(MIN_DEPTH..=MAX_DEPTH).contains(&h.depth) {
            return Err(Error::domain(format!(
                "depth {} outside [{MIN_DEPTH}, {MAX_DEPTH}]",
                h.depth
            )));
        }
    }
    let n = resolution;
    let at = |c: usize, r: usize| &hits[r * n + c];
    let depth = Grid::from_fn(n, n, |c, r| at(c, r).depth);
    let normals = Grid::from_fn(n, n, |c, r| at(c, r).normal);
    let valid = Grid::from_fn(n, n, |c, r| {
        let me = at(c, r);
        if me.grazing {
            return false;
        }
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (cc, rr) = (c as i64 + dc, r as i64 + dr);
                if cc < 0 || rr < 0 || cc >= n as i64 || rr >= n as i64 {
                    continue;
                }
                let other = at(cc as usize, rr as usize);
                if other.facet != me.facet || other.grazing {
                    return false;
                }
            }
        }
        true
    });
    let image_proxy = shade(&depth, &normals);
    Ok(SceneSample {
        image_proxy,
        depth,
        normals,
        valid,
        pool,
        primitive,
    })
}

/// Lambert term against [`LIGHT`], dimmed with distance, on a `k / 255` grid.
pub fn shade(depth: &Grid<f64>, normals: &NormalGrid) -> Grid<f64> {
    let l = unit(LIGHT);
    depth
        .zip_map(normals, |&d, n| {
            let lambert = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
            let v = 0.1 + 0.9 * lambert / (1.0 + d / 20.0);
            (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
        .expect("same shape")
}

fn indoor_surfaces<R: Rng + ?Sized>(kind: Primitive, rng: &mut R) -> Vec<Surface> {
    let tilt = |rng: &mut R| rng.random_range(-0.4..0.4);
    match kind {
        Primitive::Plane => vec![Surface::Plane {
            a: tilt(rng),
            b: tilt(rng),
            c: rng.random_range(2.5..8.0),
        }],
        Primitive::Sphere => {
            let back = rng.random_range(5.0..9.0);
            vec![
                Surface::Plane {
                    a: tilt(rng) / 2.0,
                    b: tilt(rng) / 2.0,
                    c: back,
                },
                Surface::Sphere {
                    cx: rng.random_range(-0.5..0.5),
                    cy: rng.random_range(-0.5..0.5),
                    depth: rng.random_range(2.5..4.5),
                    radius: rng.random_range(0.8..1.4),
                },
            ]
        }
        Primitive::Wedge => vec![Surface::Ridge {
            x0: rng.random_range(-0.8..0.8),
            a: rng.random_range(0.3..1.0),
            b: tilt(rng),
            c: rng.random_range(2.0..5.0),
        }],
        Primitive::Composite => vec![
            Surface::Plane {
                a: tilt(rng) / 2.0,
                b: tilt(rng) / 2.0,
                c: rng.random_range(6.0..8.5),
            },
            // Floor rising away from the camera.
            {
                let b = rng.random_range(1.5..2.5);
                Surface::Plane {
                    a: tilt(rng) / 2.0,
                    b,
                    c: 1.0 + b * HALF_EXTENT,
                }
            },
            Surface::Sphere {
                cx: rng.random_range(-1.0..1.0),
                cy: rng.random_range(-0.5..1.0),
                depth: rng.random_range(3.0..5.0),
                radius: rng.random_range(0.4..0.9),
            },
        ],
    }
}

fn outdoor_surfaces<R: Rng + ?Sized>(rng: &mut R) -> Vec<Surface> {
    // Ground from ~4 m at the bottom edge to 80 m at the top edge.
    let near = rng.random_range(3.0..6.0);
    let a: f64 = rng.random_range(-1.0..1.0);
    let b = (MAX_DEPTH - near - a.abs() * HALF_EXTENT) / (2.0 * HALF_EXTENT);
    let mut surfaces = vec![Surface::Plane {
        a,
        b,
        c: near + b * HALF_EXTENT,
    }];
    for _ in 0..rng.random_range(1..=3) {
        let w = rng.random_range(0.4..1.2);
        let x0 = rng.random_range(-HALF_EXTENT..HALF_EXTENT - w);
        let y0 = rng.random_range(-HALF_EXTENT..0.0);
        surfaces.push(Surface::Rect {
            x0,
            x1: x0 + w,
            y0,
            y1: y0 + rng.random_range(0.5..2.0),
            depth: rng.random_range(8.0..60.0),
        });
    }
    surfaces
}

/// Indoor-range scene of one primitive kind.
pub fn generate_scene(kind: Primitive, resolution: usize, seed: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render(
        &indoor_surfaces(kind, &mut rng),
        resolution,
        Pool::IndoorLike,
        kind,
    )
}

/// Ground plane plus boxes reaching [`MAX_DEPTH`].
pub fn generate_outdoor(resolution: usize, seed: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render(
        &outdoor_surfaces(&mut rng),
        resolution,
        Pool::OutdoorLike,
        Primitive::Composite,
    )
}

/// A scene from `pool`: indoor draws a primitive uniformly.
pub fn generate_pool_scene(pool: Pool, resolution: usize, seed: u64) -> Result<SceneSample> {
    match pool {
        Pool::IndoorLike => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let kind = Primitive::ALL[rng.random_range(0..Primitive::ALL.len())];
            generate_scene(kind, resolution, seed)
        }
        Pool::OutdoorLike => generate_outdoor(resolution, seed),
    }
}

/// Central-difference normals of a depth grid with pixel spacing `h`.
///
/// Border pixels and pixels whose stencil leaves `mask` are marked invalid
/// in the returned mask and get `[0, 0, 1]`.
pub fn fd_normals(depth: &Grid<f64>, mask: &Mask, h: f64) -> Result<(NormalGrid, Mask)> {
    depth.check_shape(mask, "mask")?;
    let (w, ht) = (depth.width(), depth.height());
    let ok = |c: usize, r: usize| {
        c > 0
            && r > 0
            && c + 1 < w
            && r + 1 < ht
            && *mask.get(c, r)
            && *mask.get(c - 1, r)
            && *mask.get(c + 1, r)
            && *mask.get(c, r - 1)
            && *mask.get(c, r + 1)
    };
    let valid = Grid::from_fn(w, ht, ok);
    let normals = Grid::from_fn(w, ht, |c, r| {
        if !ok(c, r) {
            return [0.0, 0.0, 1.0];
        }
        let dx = (depth.get(c + 1, r) - depth.get(c - 1, r)) / (2.0 * h);
        // Row r - 1 lies above row r.
        let dy = (depth.get(c, r - 1) - depth.get(c, r + 1)) / (2.0 * h);
        unit([dx, dy, 1.0])
    });
    Ok((normals, valid))
}

/// Scene pools with per-pool draw probabilities.
#[derive(Debug, Clone)]
pub struct ScenePools {
    pub indoor: Vec<SceneSample>,
    pub outdoor: Vec<SceneSample>,
    pub mix: [f64; 2],
}

pub const DEFAULT_MIX: [f64; 2] = [0.9, 0.1];

/// Draws `count` pool labels independently with probabilities `mix`.
pub fn draw_pools<R: Rng + ?Sized>(mix: [f64; 2], count: usize, rng: &mut R) -> Result<Vec<Pool>> {
    let pick =
        WeightedIndex::new(mix).map_err(|e| Error::Config(format!("pool mix {mix:?}: {e}")))?;
    Ok((0..count).map(|_| Pool::ALL[pick.sample(rng)]).collect())
}

/// `batch_size` scenes drawn independently: pool by `mix`, then uniformly
/// within the pool.
pub fn sample_batch<'a, R: Rng + ?Sized>(
    pools: &'a ScenePools,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'a SceneSample>> {
    if pools.indoor.is_empty() || pools.outdoor.is_empty() {
        return Err(Error::contract("both scene pools must be nonempty"));
    }
    let labels = draw_pools(pools.mix, batch_size, rng)?;
    Ok(labels
        .into_iter()
        .map(|p| {
            let pool = match p {
                Pool::IndoorLike => &pools.indoor,
                Pool::OutdoorLike => &pools.outdoor,
            };
            &pool[rng.random_range(0..pool.len())]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub mix: [f64; 2],
}

/// Per-sample seed, independent across indices.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_dataset(params: &DatasetParams) -> Result<Vec<SceneSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let pools = draw_pools(params.mix, params.count, &mut rng)?;
    pools
        .into_iter()
        .enumerate()
        .map(|(i, pool)| generate_pool_scene(pool, params.resolution, sample_seed(params.seed, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub pool: Pool,
    pub primitive: Primitive,
    pub depth: FileEntry,
    pub normals: FileEntry,
    pub image: FileEntry,
    pub mask: FileEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub mix: [f64; 2],
    pub depth_unit: String,
    pub normal_convention: String,
    pub samples: Vec<SampleEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORMAL_CONVENTION: &str =
    "camera frame, unit vectors, +x right, +y up, +z toward the viewer; three PFM channels in [-1, 1]";

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn entry(dir: &Path, name: String) -> Result<FileEntry> {
    let sha256 = sha256_file(&dir.join(&name))?;
    Ok(FileEntry { path: name, sha256 })
}

/// Writes every sample (depth and normal PFM, image and mask PNG) plus
/// `manifest.json` into `dir`, creating it if needed.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    params: &DatasetParams,
    samples: &[SceneSample],
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("scene_{i:05}");
        Pfm::from_grid(&s.depth).save(dir.join(format!("{stem}_depth.pfm")))?;
        Pfm::from_normals(&s.normals).save(dir.join(format!("{stem}_normals.pfm")))?;
        io::png::write_gray8(dir.join(format!("{stem}_image.png")), &s.image_proxy)?;
        io::png::write_mask(dir.join(format!("{stem}_mask.png")), &s.valid)?;
        entries.push(SampleEntry {
            index: i,
            pool: s.pool,
            primitive: s.primitive,
            depth: entry(dir, format!("{stem}_depth.pfm"))?,
            normals: entry(dir, format!("{stem}_normals.pfm"))?,
            image: entry(dir, format!("{stem}_image.png"))?,
            mask: entry(dir, format!("{stem}_mask.png"))?,
        });
    }
    let manifest = DatasetManifest {
        seed: params.seed,
        count: samples.len(),
        resolution: params.resolution,
        mix: params.mix,
        depth_unit: "m".to_string(),
        normal_convention: NORMAL_CONVENTION.to_string(),
        samples: entries,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

fn checked(dir: &Path, f: &FileEntry) -> Result<PathBuf> {
    let path = dir.join(&f.path);
    let got = sha256_file(&path)?;
    if got != f.sha256 {
        return Err(Error::corrupt(format!("{}: checksum mismatch", f.path)));
    }
    Ok(path)
}

/// Reads a dataset written by [`save_dataset`], verifying every checksum.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.samples.len() != manifest.count {
        return Err(Error::corrupt(format!(
            "manifest lists {} samples but count is {}",
            manifest.samples.len(),
            manifest.count
        )));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for e in &manifest.samples {
        let depth = Pfm::load(checked(dir, &e.depth)?)?.to_grid()?;
        let normals = Pfm::load(checked(dir, &e.normals)?)?.to_normals()?;
        let image_proxy = io::png::read_gray8(checked(dir, &e.image)?)?;
        let valid = io::png::read_mask(checked(dir, &e.mask)?)?;
        if !depth.same_shape(&normals)
            || !depth.same_shape(&image_proxy)
            || !depth.same_shape(&valid)
        {
            return Err(Error::corrupt(format!(
                "sample {}: grid sizes disagree",
                e.index
            )));
        }
        samples.push(SceneSample {
            image_proxy,
            depth,
            normals,
            valid,
            pool: e.pool,
            primitive: e.primitive,
        });
    }
    Ok((manifest, samples))
}

/// The sample as stored on disk: depth and normals rounded through `f32`.
pub fn storage_rounded(s: &SceneSample) -> SceneSample {
    let r = |v: f64| v as f32 as f64;
    SceneSample {
        image_proxy: s.image_proxy.clone(),
        depth: s.depth.map(|&v| r(v)),
        normals: s.normals.map(|n| [r(n[0]), r(n[1]), r(n[2])]),
        valid: s.valid.clone(),
        pool: s.pool,
        primitive: s.primitive,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fronto_parallel_plane() {
        let s = render(
            &[Surface::Plane {
                a: 0.0,
                b: 0.0,
                c: 3.0,
            }],
            8,
            Pool::IndoorLike,
            Primitive::Plane,
        )
        .unwrap();
        assert!(s.depth.as_slice().iter().all(|&d| d == 3.0));
        assert!(s.normals.as_slice().iter().all(|n| *n == [0.0, 0.0, 1.0]));
        assert_eq!(s.valid.count(), 64);
    }

    #[test]
    fn unknown_primitive_is_config_error() {
        assert!(matches!("cube".parse::<Primitive>(), Err(Error::Config(_))));
        assert_eq!("wedge".parse::<Primitive>().unwrap(), Primitive::Wedge);
    }

    #[test]
    fn generated_scenes_stay_in_range() {
        for seed in 0..20 {
            for kind in Primitive::ALL {
                let s = generate_scene(kind, 16, seed).unwrap();
                for &d in s.depth.as_slice() {
                    assert!((INDOOR_RANGE.0..=INDOOR_RANGE.1).contains(&d), "{kind} {d}");
                }
            }
            let s = generate_outdoor(16, seed).unwrap();
            assert!(s
                .depth
                .as_slice()
                .iter()
                .all(|&d| (MIN_DEPTH..=MAX_DEPTH).contains(&d)));
        }
    }

    #[test]
    fn image_is_on_8bit_grid() {
        let s = generate_scene(Primitive::Composite, 16, 3).unwrap();
        for &v in s.image_proxy.as_slice() {
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }
}
