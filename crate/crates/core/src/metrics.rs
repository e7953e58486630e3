//! Affine-invariant depth metrics and surface-normal angular metrics.
//!
//! Depth predictions are defined only up to scale and shift, so they are
//! first aligned to ground truth by least squares over the valid mask.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, NormalGrid};

/// Aligned depths are floored here before ratio metrics.
pub const DEPTH_FLOOR: f64 = 1e-6;
pub const DELTA1_THRESHOLD: f64 = 1.25;
pub const NORMAL_ACCURACY_DEG: f64 = 11.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignSpace {
    /// Fit `s * pred + t` to depth.
    #[default]
    Depth,
    /// Fit `s * pred + t` to `1 / depth` and invert the result.
    Disparity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub shift: f64,
    pub aligned: Grid<f64>,
}

fn usable(pred: f64, gt: f64, m: bool) -> bool {
    m && pred.is_finite() && gt.is_finite() && gt > 0.0
}

/// Closed-form least-squares `(s, t) = argmin sum (s p + t - y)^2`, i.e. the
/// 2x2 normal equations solved in centered form.
fn fit_affine(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> Result<(f64, f64)> {
    let n = pairs.clone().count();
    if n < 2 {
        return Err(Error::degenerate(format!(
            "{n} valid pixels, need at least 2"
        )));
    }
    let nf = n as f64;
    let (sp, sy) = pairs
        .clone()
        .fold((0.0, 0.0), |(a, b), (p, y)| (a + p, b + y));
    let (mp, my) = (sp / nf, sy / nf);
    let (mut spp, mut spy) = (0.0, 0.0);
    for (p, y) in pairs {
        spp += (p - mp) * (p - mp);
        spy += (p - mp) * (y - my);
    }
    let spread = mp.abs().max(1.0);
    if spp <= (1e-12 * spread).powi(2) * nf {
        return Err(Error::degenerate(
            "prediction is constant over the valid mask",
        ));
    }
    let s = spy / spp;
    Ok((s, my - s * mp))
}

pub fn affine_align(
    pred: &Grid<f64>,
    gt: &Grid<f64>,
    mask: &Mask,
    space: AlignSpace,
) -> Result<Alignment> {
    pred.check_shape(gt, "pred vs gt")?;
    pred.check_shape(mask, "pred vs mask")?;
    let triples = || {
        pred.as_slice()
            .iter()
            .zip(gt.as_slice())
            .zip(mask.as_slice())
            .filter(|((&p, &g), &m)| usable(p, g, m))
            .map(|((&p, &g), _)| (p, g))
    };
    let (scale, shift) = match space {
        AlignSpace::Depth => fit_affine(triples())?,
        AlignSpace::Disparity => fit_affine(triples().map(|(p, g)| (p, 1.0 / g)))?,
    };
    let aligned = pred.map(|&p| {
        let v = scale * p + shift;
        match space {
            AlignSpace::Depth => v,
            AlignSpace::Disparity => 1.0 / v.max(DEPTH_FLOOR),
        }
    });
    Ok(Alignment {
        scale,
        shift,
        aligned,
    })
}

fn valid_pairs<'a>(
    pred: &'a Grid<f64>,
    gt: &'a Grid<f64>,
    mask: &'a Mask,
) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a> {
    pred.check_shape(gt, "pred vs gt")?;
    pred.check_shape(mask, "pred vs mask")?;
    Ok(pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .zip(mask.as_slice())
        .filter(|((&p, &g), &m)| usable(p, g, m))
        .map(|((&p, &g), _)| (p, g)))
}

/// Mean of `|d - d_gt| / d_gt` over valid pixels.
pub fn absrel(pred: &Grid<f64>, gt: &Grid<f64>, mask: &Mask) -> Result<f64> {
    let pairs = valid_pairs(pred, gt, mask)?;
    let (sum, n) = pairs.fold((0.0, 0usize), |(s, n), (p, g)| {
        (s + (p - g).abs() / g, n + 1)
    });
    if n == 0 {
        return Err(Error::contract("absrel over an empty mask"));
    }
    Ok(sum / n as f64)
}

/// Fraction of valid pixels with `max(d / d_gt, d_gt / d) < 1.25`, with `d`
/// floored at [`DEPTH_FLOOR`].
pub fn delta1(pred: &Grid<f64>, gt: &Grid<f64>, mask: &Mask) -> Result<f64> {
    let pairs = valid_pairs(pred, gt, mask)?;
    let (hits, n) = pairs.fold((0usize, 0usize), |(h, n), (p, g)| {
        let p = p.max(DEPTH_FLOOR);
        let ratio = (p / g).max(g / p);
        (h + usize::from(ratio < DELTA1_THRESHOLD), n + 1)
    });
    if n == 0 {
        return Err(Error::contract("delta1 over an empty mask"));
    }
    Ok(hits as f64 / n as f64)
}

fn normalized(v: &[f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n > 0.0 && n.is_finite() {
        Some([v[0] / n, v[1] / n, v[2] / n])
    } else {
        None
    }
}

/// Angle in degrees between two vectors after renormalization, or `None` for
/// zero-length / non-finite inputs.
pub fn angle_deg(a: &[f64; 3], b: &[f64; 3]) -> Option<f64> {
    let (a, b) = (normalized(a)?, normalized(b)?);
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    Some(dot.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Per-pixel angular errors over the valid mask; pixels with a zero-length
/// vector are dropped.
pub fn angular_errors(pred: &NormalGrid, gt: &NormalGrid, mask: &Mask) -> Result<Vec<f64>> {
    pred.check_shape(gt, "pred vs gt normals")?;
    pred.check_shape(mask, "normals vs mask")?;
    Ok(pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .zip(mask.as_slice())
        .filter(|(_, &m)| m)
        .filter_map(|((p, g), _)| angle_deg(p, g))
        .collect())
}

pub fn mean_angular_error(pred: &NormalGrid, gt: &NormalGrid, mask: &Mask) -> Result<f64> {
    let errs = angular_errors(pred, gt, mask)?;
    if errs.is_empty() {
        return Err(Error::contract("angular error over an empty mask"));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Fraction of valid pixels with angular error strictly below 11.25 degrees.
pub fn within_11_25(pred: &NormalGrid, gt: &NormalGrid, mask: &Mask) -> Result<f64> {
    let errs = angular_errors(pred, gt, mask)?;
    if errs.is_empty() {
        return Err(Error::contract("angular accuracy over an empty mask"));
    }
    Ok(errs.iter().filter(|&&e| e < NORMAL_ACCURACY_DEG).count() as f64 / errs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthReport {
    pub n_valid: usize,
    pub absrel: f64,
    pub delta1: f64,
    pub scale: f64,
    pub shift: f64,
    /// Valid pixels whose aligned depth fell below [`DEPTH_FLOOR`].
    pub floored: usize,
}

/// Align, floor, then AbsRel and delta1.
pub fn evaluate_depth(
    pred: &Grid<f64>,
    gt: &Grid<f64>,
    mask: &Mask,
    space: AlignSpace,
) -> Result<DepthReport> {
    let al = affine_align(pred, gt, mask, space)?;
    let pairs = valid_pairs(&al.aligned, gt, mask)?;
    let floored = pairs.clone().filter(|&(p, _)| p < DEPTH_FLOOR).count();
    let n_valid = pairs.count();
    let clamped = al.aligned.map(|&p| p.max(DEPTH_FLOOR));
    Ok(DepthReport {
        n_valid,
        absrel: absrel(&clamped, gt, mask)?,
        delta1: delta1(&clamped, gt, mask)?,
        scale: al.scale,
        shift: al.shift,
        floored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalReport {
    pub n_valid: usize,
    pub mean_err_deg: f64,
    pub within_11_25: f64,
}

pub fn evaluate_normals(pred: &NormalGrid, gt: &NormalGrid, mask: &Mask) -> Result<NormalReport> {
    let errs = angular_errors(pred, gt, mask)?;
    Ok(NormalReport {
        n_valid: errs.len(),
        mean_err_deg: mean_angular_error(pred, gt, mask)?,
        within_11_25: within_11_25(pred, gt, mask)?,
    })
}

/// One CSV row. Ratios are reported as percentages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub dataset: String,
    pub n_valid: usize,
    pub absrel: f64,
    pub delta1: f64,
    pub mean_err_deg: f64,
    pub within_11_25: f64,
}

impl MetricRow {
    pub fn new(dataset: impl Into<String>, depth: &DepthReport, normals: &NormalReport) -> Self {
        Self {
            dataset: dataset.into(),
            n_valid: depth.n_valid,
            absrel: depth.absrel * 100.0,
            delta1: depth.delta1 * 100.0,
            mean_err_deg: normals.mean_err_deg,
            within_11_25: normals.within_11_25 * 100.0,
        }
    }
}
