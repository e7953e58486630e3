//! Depth label quantization into the `[-1, 1]` BF16 label space.
//!
//! Three schemes map depth `D` to a transformed quantity `X` and min-max
//! scale it: `V = 2 (X - X_min) / (X_max - X_min) - 1`.
//!
//! | scheme      | `X`     | local depth error for a step `dX` |
//! |-------------|---------|-----------------------------------|
//! | uniform     | `D`     | `dX`                              |
//! | inverse     | `1 / D` | `D^2 dX`                          |
//! | logarithmic | `ln D`  | `D dX`                            |
//!
//! The worst-case model takes `dX = (X_max - X_min) * dV / 2`, i.e. one step
//! `dV` of the normalized grid pulled back into `X`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bf16::{self, StepModel};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

/// Offset added before taking the log in percentile normalization.
pub const LOG_EPSILON: f64 = 1e-6;
pub const LOWER_PERCENTILE: f64 = 2.0;
pub const UPPER_PERCENTILE: f64 = 98.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Uniform,
    Inverse,
    Logarithmic,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [
        SchemeKind::Uniform,
        SchemeKind::Inverse,
        SchemeKind::Logarithmic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Uniform => "uniform",
            SchemeKind::Inverse => "inverse",
            SchemeKind::Logarithmic => "logarithmic",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "direct" => Ok(SchemeKind::Uniform),
            "inverse" | "disparity" => Ok(SchemeKind::Inverse),
            "logarithmic" | "log" => Ok(SchemeKind::Logarithmic),
            other => Err(Error::Config(format!(
                "unknown quantization scheme '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    kind: SchemeKind,
    d_min: f64,
    d_max: f64,
}

impl QuantScheme {
    pub fn new(kind: SchemeKind, d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min.is_finite() && d_max.is_finite() && d_min < d_max) {
            return Err(Error::domain(format!(
                "invalid depth range [{d_min}, {d_max}]"
            )));
        }
        let min_ok = match kind {
            SchemeKind::Uniform => d_min >= 0.0,
            SchemeKind::Inverse | SchemeKind::Logarithmic => d_min > 0.0,
        };
        if !min_ok {
            return Err(Error::domain(format!(
                "{kind} scheme cannot start at {d_min} m"
            )));
        }
        Ok(Self { kind, d_min, d_max })
    }

    pub fn uniform(d_min: f64, d_max: f64) -> Result<Self> {
        Self::new(SchemeKind::Uniform, d_min, d_max)
    }

    pub fn inverse(d_min: f64, d_max: f64) -> Result<Self> {
        Self::new(SchemeKind::Inverse, d_min, d_max)
    }

    pub fn logarithmic(d_min: f64, d_max: f64) -> Result<Self> {
        Self::new(SchemeKind::Logarithmic, d_min, d_max)
    }

    /// Ranges used for the driving-scene error table: `[0, 80]` m for the
    /// uniform scheme, `[0.1, 80]` m for the other two.
    pub fn reference(kind: SchemeKind) -> Self {
        let d_min = match kind {
            SchemeKind::Uniform => 0.0,
            _ => 0.1,
        };
        Self::new(kind, d_min, 80.0).expect("reference ranges are valid")
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn contains(&self, depth: f64) -> bool {
        depth >= self.d_min && depth <= self.d_max
    }

    /// Depth to the scheme's transformed space.
    pub fn transform(&self, depth: f64) -> f64 {
        match self.kind {
            SchemeKind::Uniform => depth,
            SchemeKind::Inverse => 1.0 / depth,
            SchemeKind::Logarithmic => depth.ln(),
        }
    }

    pub fn inverse_transform(&self, x: f64) -> f64 {
        match self.kind {
            SchemeKind::Uniform => x,
            SchemeKind::Inverse => 1.0 / x,
            SchemeKind::Logarithmic => x.exp(),
        }
    }

    /// `(X_min, X_max)`; for the inverse scheme `X_min` comes from `d_max`.
    pub fn transformed_range(&self) -> (f64, f64) {
        let a = self.transform(self.d_min);
        let b = self.transform(self.d_max);
        (a.min(b), a.max(b))
    }

    /// Label value before BF16 rounding.
    pub fn normalize(&self, depth: f64) -> f64 {
        let (lo, hi) = self.transformed_range();
        2.0 * (self.transform(depth) - lo) / (hi - lo) - 1.0
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        let (lo, hi) = self.transformed_range();
        self.inverse_transform(lo + (value + 1.0) * 0.5 * (hi - lo))
    }

    /// Worst-case step in transformed space, `(X_max - X_min) * dV / 2`.
    pub fn transformed_step(&self, step: StepModel) -> f64 {
        let (lo, hi) = self.transformed_range();
        (hi - lo) * step.delta_v() / 2.0
    }

    fn is_encodable(&self, depth: f64) -> bool {
        depth.is_finite()
            && self.contains(depth)
            && (self.kind == SchemeKind::Uniform || depth > 0.0)
    }
}

/// BF16 labels in `[-1, 1]` with their validity mask. Invalid entries hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLabel {
    pub values: Grid<f64>,
    pub valid: Mask,
}

impl NormalizedLabel {
    pub fn new(values: Grid<f64>, valid: Mask) -> Result<Self> {
        values.check_shape(&valid, "label values vs mask")?;
        Ok(Self { values, valid })
    }
}

/// Min-max maps each depth into `[-1, 1]` and rounds it to BF16.
///
/// Pixels that are non-finite, outside `[d_min, d_max]`, or non-positive
/// under a reciprocal/log transform are masked out rather than rejected.
pub fn encode(scheme: &QuantScheme, depth: &Grid<f64>) -> Result<NormalizedLabel> {
    let valid = depth.map(|&d| scheme.is_encodable(d));
    let mut values = Grid::filled(depth.width(), depth.height(), 0.0);
    for ((out, &d), &ok) in values
        .as_mut_slice()
        .iter_mut()
        .zip(depth.as_slice())
        .zip(valid.as_slice())
    {
        if ok {
            *out = bf16::quantize(scheme.normalize(d).clamp(-1.0, 1.0))?;
        }
    }
    NormalizedLabel::new(values, valid)
}

/// Inverse of the min-max mapping. Invalid pixels decode to NaN.
pub fn decode(scheme: &QuantScheme, label: &NormalizedLabel) -> Result<Grid<f64>> {
    label.values.zip_map(&label.valid, |&v, &ok| {
        if ok {
            scheme.denormalize(v.clamp(-1.0, 1.0))
        } else {
            f64::NAN
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorstCase {
    pub abs_error: f64,
    pub absrel: f64,
}

/// Linearized worst-case depth error at `depth` for one label step.
pub fn worst_case_error(scheme: &QuantScheme, depth: f64, step: StepModel) -> Result<WorstCase> {
    if !depth.is_finite() || !scheme.contains(depth) {
        return Err(Error::domain(format!(
            "depth {depth} m outside [{}, {}]",
            scheme.d_min(),
            scheme.d_max()
        )));
    }
    let dx = scheme.transformed_step(step);
    let abs_error = match scheme.kind() {
        SchemeKind::Uniform => dx,
        SchemeKind::Inverse => depth * depth * dx,
        SchemeKind::Logarithmic => depth * dx,
    };
    Ok(WorstCase {
        abs_error,
        absrel: abs_error / depth,
    })
}

/// Whether two depths stay at least one worst-case step apart in
/// transformed space.
pub fn distinguishable(scheme: &QuantScheme, d1: f64, d2: f64, step: StepModel) -> Result<bool> {
    for d in [d1, d2] {
        if !d.is_finite() || !scheme.contains(d) {
            return Err(Error::domain(format!(
                "depth {d} m outside the scheme range"
            )));
        }
    }
    if d1 == d2 {
        return Ok(false);
    }
    let gap = (scheme.transform(d1) - scheme.transform(d2)).abs();
    Ok(gap >= scheme.transformed_step(step))
}

/// Percentile of a sorted slice with linear interpolation between order
/// statistics (the inclusive definition: position `p/100 * (n-1)`).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::degenerate("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::domain(format!("percentile {p} outside [0, 100]")));
    }
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Log-depth values at the 2nd and 98th percentiles of the valid pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogAnchors {
    pub low: f64,
    pub high: f64,
}

impl LogAnchors {
    pub fn normalize(&self, depth: f64) -> f64 {
        ((depth + LOG_EPSILON).ln() - self.low) / (self.high - self.low) * 2.0 - 1.0
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        ((value + 1.0) * 0.5 * (self.high - self.low) + self.low).exp() - LOG_EPSILON
    }
}

fn log_valid_mask(depth: &Grid<f64>, mask: &Mask) -> Result<Mask> {
    let valid = depth.zip_map(mask, |&d, &m| m && d.is_finite() && d > 0.0)?;
    for (&d, &ok) in depth.as_slice().iter().zip(valid.as_slice()) {
        if ok && d < LOG_EPSILON {
            return Err(Error::domain(format!(
                "depth {d:e} m is below the log offset"
            )));
        }
    }
    Ok(valid)
}

pub fn log_anchors(depth: &Grid<f64>, mask: &Mask) -> Result<LogAnchors> {
    let valid = log_valid_mask(depth, mask)?;
    anchors_for(depth, &valid)
}

fn anchors_for(depth: &Grid<f64>, valid: &Mask) -> Result<LogAnchors> {
    let mut logs: Vec<f64> = depth
        .as_slice()
        .iter()
        .zip(valid.as_slice())
        .filter(|(_, &ok)| ok)
        .map(|(&d, _)| (d + LOG_EPSILON).ln())
        .collect();
    if logs.len() < 2 {
        return Err(Error::degenerate(format!(
            "{} valid depth values, need 2",
            logs.len()
        )));
    }
    logs.sort_by(f64::total_cmp);
    let low = percentile_sorted(&logs, LOWER_PERCENTILE)?;
    let high = percentile_sorted(&logs, UPPER_PERCENTILE)?;
    if high <= low {
        return Err(Error::degenerate("log-depth percentile band is empty"));
    }
    Ok(LogAnchors { low, high })
}

/// Log-depth label: `ln(D + 1e-6)` mapped so the 2nd/98th percentiles land on
/// -1/+1, clipped to `[-1, 1]`, rounded to BF16.
pub fn percentile_normalize(depth: &Grid<f64>, mask: &Mask) -> Result<NormalizedLabel> {
    percentile_normalize_with_anchors(depth, mask).map(|(label, _)| label)
}

pub fn percentile_normalize_with_anchors(
    depth: &Grid<f64>,
    mask: &Mask,
) -> Result<(NormalizedLabel, LogAnchors)> {
    let valid = log_valid_mask(depth, mask)?;
    let anchors = anchors_for(depth, &valid)?;
    let mut values = Grid::filled(depth.width(), depth.height(), 0.0);
    for ((out, &d), &ok) in values
        .as_mut_slice()
        .iter_mut()
        .zip(depth.as_slice())
        .zip(valid.as_slice())
    {
        if ok {
            *out = bf16::quantize(anchors.normalize(d).clamp(-1.0, 1.0))?;
        }
    }
    Ok((NormalizedLabel::new(values, valid)?, anchors))
}

/// One row of the quantization error table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub scheme: SchemeKind,
    pub depth_m: f64,
    pub abs_error_m: f64,
    pub absrel: f64,
}

impl ErrorRow {
    pub fn compute(scheme: &QuantScheme, depth: f64, step: StepModel) -> Result<Self> {
        let wc = worst_case_error(scheme, depth, step)?;
        Ok(Self {
            scheme: scheme.kind(),
            depth_m: depth,
            abs_error_m: wc.abs_error,
            absrel: wc.absrel,
        })
    }
}

/// CSV with header `scheme,depth_m,abs_error_m,absrel`.
pub fn write_error_table<W: Write>(out: W, rows: &[ErrorRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(d: f64) -> Grid<f64> {
        Grid::filled(1, 1, d)
    }

    #[test]
    fn uniform_midpoint_and_max() {
        let s = QuantScheme::uniform(0.0, 80.0).unwrap();
        assert_eq!(s.normalize(40.0), 0.0);
        assert_eq!(s.normalize(80.0), 1.0);
        let label = encode(&s, &single(80.0)).unwrap();
        assert_eq!(label.values.as_slice(), &[1.0]);
    }

    #[test]
    fn log_geometric_midpoint() {
        let s = QuantScheme::logarithmic(0.1, 80.0).unwrap();
        let mid = (0.1f64 * 80.0).sqrt();
        assert!(s.normalize(mid).abs() < 1e-12);
    }

    #[test]
    fn decode_endpoints() {
        let u = QuantScheme::uniform(0.0, 80.0).unwrap();
        assert_eq!(u.denormalize(0.0), 40.0);
        let inv = QuantScheme::inverse(0.1, 80.0).unwrap();
        assert!((inv.denormalize(1.0) - 0.1).abs() < 1e-12);
        let log = QuantScheme::logarithmic(0.1, 80.0).unwrap();
        assert!((log.denormalize(-1.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bad_pixels_are_masked() {
        let s = QuantScheme::inverse(0.1, 80.0).unwrap();
        let depth = Grid::from_vec(4, 1, vec![-1.0, 0.0, 5.0, f64::NAN]).unwrap();
        let label = encode(&s, &depth).unwrap();
        assert_eq!(label.valid.as_slice(), &[false, false, true, false]);
        let back = decode(&s, &label).unwrap();
        assert!(back.get(0, 0).is_nan());
        assert!((back.get(2, 0) - 5.0).abs() < 0.2);
    }

    #[test]
    fn scheme_validation() {
        assert!(QuantScheme::inverse(0.0, 80.0).is_err());
        assert!(QuantScheme::logarithmic(1.0, 1.0).is_err());
        assert!(QuantScheme::uniform(0.0, 80.0).is_ok());
        assert!("log".parse::<SchemeKind>().is_ok());
        assert!("cubic".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn worst_case_reference_values() {
        let step = StepModel::WORST_CASE;
        let u = worst_case_error(&QuantScheme::reference(SchemeKind::Uniform), 80.0, step).unwrap();
        assert_eq!(u.abs_error, 0.15625);
        let inv =
            worst_case_error(&QuantScheme::reference(SchemeKind::Inverse), 80.0, step).unwrap();
        assert!((inv.abs_error - 124.8).abs() < 0.1);
        let log =
            worst_case_error(&QuantScheme::reference(SchemeKind::Logarithmic), 0.1, step).unwrap();
        assert!((log.abs_error - 1.306e-3).abs() < 1e-6);
        assert!(
            worst_case_error(&QuantScheme::reference(SchemeKind::Logarithmic), 81.0, step).is_err()
        );
    }

    #[test]
    fn identical_depths_are_never_distinguishable() {
        for kind in SchemeKind::ALL {
            let s = QuantScheme::reference(kind);
            assert!(!distinguishable(&s, 5.0, 5.0, StepModel::WORST_CASE).unwrap());
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..5).map(f64::from).collect();
        assert_eq!(percentile_sorted(&v, 50.0).unwrap(), 2.0);
        assert_eq!(percentile_sorted(&v, 10.0).unwrap(), 0.4);
        assert_eq!(percentile_sorted(&v, 100.0).unwrap(), 4.0);
        assert!(percentile_sorted(&[], 50.0).is_err());
    }

    #[test]
    fn percentile_normalize_degenerate_inputs() {
        let flat = Grid::filled(4, 4, 3.0);
        let all = Grid::filled(4, 4, true);
        assert!(matches!(
            percentile_normalize(&flat, &all),
            Err(Error::Degenerate(_))
        ));
        let none = Grid::filled(4, 4, false);
        let ramp = Grid::from_fn(4, 4, |c, r| 1.0 + (c + 4 * r) as f64);
        assert!(matches!(
            percentile_normalize(&ramp, &none),
            Err(Error::Degenerate(_))
        ));
        let tiny = Grid::from_vec(2, 1, vec![1e-8, 1.0]).unwrap();
        let m = Grid::filled(2, 1, true);
        assert!(matches!(
            percentile_normalize(&tiny, &m),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn error_table_csv_header() {
        let rows = vec![ErrorRow::compute(
            &QuantScheme::reference(SchemeKind::Uniform),
            80.0,
            StepModel::WORST_CASE,
        )
        .unwrap()];
        let mut buf = Vec::new();
        write_error_table(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scheme,depth_m,abs_error_m,absrel\nuniform,80.0,0.15625,"));
    }
}
