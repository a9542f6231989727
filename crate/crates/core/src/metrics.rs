//! Registration quality metrics, evaluated on the fixed grid.
//!
//! Reductions are computed over fixed-size chunks and combined in index
//! order, so values do not depend on how many threads ran them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::volume::{Grid, Volume};

/// Additive stabilizer of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;
/// Edge length of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;
const CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("length mismatch: {a} vs {b}")]
    LenMismatch { a: usize, b: usize },
    #[error("label {0} appears in neither grid")]
    UnknownLabel(u16),
    #[error("label {0} has an empty mask")]
    EmptyMask(u16),
    #[error("volume has no label grid")]
    MissingLabels,
    #[error("dynamic range must be positive, got {0}")]
    BadRange(f64),
    #[error("percentile must be in (0, 100], got {0}")]
    BadPercentile(f64),
    #[error("report line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn check_dims(a: &Grid, b: &Grid) -> Result<(), MetricsError> {
    if a.dims != b.dims {
        return Err(MetricsError::DimMismatch {
            a: a.dims,
            b: b.dims,
        });
    }
    Ok(())
}

/// Deterministic chunked sum of `f(i)` over `0..n`.
fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            (c * CHUNK..end).map(&f).sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

/// Mean squared intensity difference.
pub fn mse(a: &Volume, b: &Volume) -> Result<f64, MetricsError> {
    check_dims(&a.grid, &b.grid)?;
    let n = a.data.len();
    let s = chunked_sum(n, |i| {
        let d = a.data[i] as f64 - b.data[i] as f64;
        d * d
    });
    Ok(s / n as f64)
}

/// Inclusive prefix sums over a 3-D grid with a zero border, so that any box
/// sum is eight lookups.
struct Integral {
    dims: [usize; 3],
    sums: Vec<f64>,
}

impl Integral {
    fn new<F: Fn(usize) -> f64>(dims: [usize; 3], f: F) -> Self {
        let [d0, d1, d2] = dims;
        let (e1, e2) = (d1 + 1, d2 + 1);
        let mut sums = vec![0.0; (d0 + 1) * e1 * e2];
        let at = |i: usize, j: usize, k: usize| (i * e1 + j) * e2 + k;
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    let v = f((i * d1 + j) * d2 + k);
                    sums[at(i + 1, j + 1, k + 1)] = v
                        + sums[at(i, j + 1, k + 1)]
                        + sums[at(i + 1, j, k + 1)]
                        + sums[at(i + 1, j + 1, k)]
                        - sums[at(i, j, k + 1)]
                        - sums[at(i, j + 1, k)]
                        - sums[at(i + 1, j, k)]
                        + sums[at(i, j, k)];
                }
            }
        }
        Self { dims, sums }
    }

    /// Sum over the half-open box `[lo, lo + size)`.
    fn box_sum(&self, lo: [usize; 3], size: [usize; 3]) -> f64 {
        let (e1, e2) = (self.dims[1] + 1, self.dims[2] + 1);
        let at = |i: usize, j: usize, k: usize| self.sums[(i * e1 + j) * e2 + k];
        let [i0, j0, k0] = lo;
        let [i1, j1, k1] = [lo[0] + size[0], lo[1] + size[1], lo[2] + size[2]];
        at(i1, j1, k1) - at(i0, j1, k1) - at(i1, j0, k1) - at(i1, j1, k0)
            + at(i0, j0, k1)
            + at(i0, j1, k0)
            + at(i1, j0, k0)
            - at(i0, j0, k0)
    }
}

/// Window extent actually used: 7 voxels, or the whole axis when shorter.
pub fn ssim_window(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|d| d.min(SSIM_WINDOW))
}

/// SSIM of one window given its moments (population statistics).
#[inline]
pub fn ssim_from_moments(
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
    c1: f64,
    c2: f64,
) -> f64 {
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean local SSIM over every fully contained uniform window, with
/// `C1 = (0.01 L)²`, `C2 = (0.03 L)²` for the declared dynamic range `L`.
pub fn ssim(a: &Volume, b: &Volume, dynamic_range: f64) -> Result<f64, MetricsError> {
    check_dims(&a.grid, &b.grid)?;
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(MetricsError::BadRange(dynamic_range));
    }
    let dims = a.grid.dims;
    let w = ssim_window(dims);
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let da = &a.data;
    let db = &b.data;
    let sa = Integral::new(dims, |i| da[i] as f64);
    let sb = Integral::new(dims, |i| db[i] as f64);
    let saa = Integral::new(dims, |i| (da[i] as f64).powi(2));
    let sbb = Integral::new(dims, |i| (db[i] as f64).powi(2));
    let sab = Integral::new(dims, |i| da[i] as f64 * db[i] as f64);
    let pos = [dims[0] - w[0] + 1, dims[1] - w[1] + 1, dims[2] - w[2] + 1];
    let count = (w[0] * w[1] * w[2]) as f64;
    let n_windows = pos[0] * pos[1] * pos[2];
    let total = chunked_sum(n_windows, |n| {
        let k = n % pos[2];
        let j = (n / pos[2]) % pos[1];
        let i = n / (pos[1] * pos[2]);
        let lo = [i, j, k];
        let mu_a = sa.box_sum(lo, w) / count;
        let mu_b = sb.box_sum(lo, w) / count;
        let var_a = saa.box_sum(lo, w) / count - mu_a * mu_a;
        let var_b = sbb.box_sum(lo, w) / count - mu_b * mu_b;
        let cov = sab.box_sum(lo, w) / count - mu_a * mu_b;
        ssim_from_moments(mu_a, mu_b, var_a, var_b, cov, c1, c2)
    });
    Ok(total / n_windows as f64)
}

/// `(2 Σ a·b + ε) / (Σ a + Σ b + ε)` over soft memberships.
pub fn soft_dice_probabilities(a: &[f32], b: &[f32]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LenMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let inter = chunked_sum(a.len(), |i| a[i] as f64 * b[i] as f64);
    let sa = chunked_sum(a.len(), |i| a[i] as f64);
    let sb = chunked_sum(b.len(), |i| b[i] as f64);
    Ok((2.0 * inter + DICE_EPS) / (sa + sb + DICE_EPS))
}

/// Per-label soft Dice on integer label grids (indicator memberships).
pub fn soft_dice(a: &[u16], b: &[u16], labels: &[u16]) -> Result<BTreeMap<u16, f64>, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LenMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let mut out = BTreeMap::new();
    for &label in labels {
        let inter = chunked_sum(a.len(), |i| {
            ((a[i] == label) & (b[i] == label)) as u8 as f64
        });
        let sa = chunked_sum(a.len(), |i| (a[i] == label) as u8 as f64);
        let sb = chunked_sum(b.len(), |i| (b[i] == label) as u8 as f64);
        if sa == 0.0 && sb == 0.0 {
            return Err(MetricsError::UnknownLabel(label));
        }
        out.insert(label, (2.0 * inter + DICE_EPS) / (sa + sb + DICE_EPS));
    }
    Ok(out)
}

/// Mask voxels with at least one face neighbor outside the mask (another
/// label, background, or off the grid), mapped to world millimeters.
pub fn boundary_points(labels: &[u16], grid: &Grid, label: u16) -> Vec<[f64; 3]> {
    let [d0, d1, d2] = grid.dims;
    let inside = |i: isize, j: isize, k: isize| -> bool {
        if i < 0 || j < 0 || k < 0 || i >= d0 as isize || j >= d1 as isize || k >= d2 as isize {
            return false;
        }
        labels[grid.index(i as usize, j as usize, k as usize)] == label
    };
    let mut pts = Vec::new();
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                if labels[grid.index(i, j, k)] != label {
                    continue;
                }
                let (ii, jj, kk) = (i as isize, j as isize, k as isize);
                let edge = !inside(ii - 1, jj, kk)
                    || !inside(ii + 1, jj, kk)
                    || !inside(ii, jj - 1, kk)
                    || !inside(ii, jj + 1, kk)
                    || !inside(ii, jj, kk - 1)
                    || !inside(ii, jj, kk + 1);
                if edge {
                    pts.push(grid.affine.apply([i as f64, j as f64, k as f64]));
                }
            }
        }
    }
    pts
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Exact directed Hausdorff distance `max_a min_b |a − b|` with the
/// early-break scan: a point is abandoned as soon as it is closer to some
/// `b` than the running maximum.
fn directed_max(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    // Fixed pseudo-random visiting order keeps early breaks effective on
    // spatially sorted inputs.
    let mut order: Vec<usize> = (0..to.len()).collect();
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for i in (1..order.len()).rev() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        order.swap(i, (state % (i as u64 + 1)) as usize);
    }
    let to: Vec<[f64; 3]> = order.iter().map(|&i| to[i]).collect();
    let mut cmax = 0.0f64;
    for a in from {
        let mut cmin = f64::INFINITY;
        for b in &to {
            let d = dist2(a, b);
            if d < cmin {
                cmin = d;
                if cmin <= cmax {
                    break;
                }
            }
        }
        if cmin > cmax {
            cmax = cmin;
        }
    }
    cmax.sqrt()
}

fn directed_all(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.par_iter()
        .map(|a| {
            to.iter()
                .map(|b| dist2(a, b))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Nearest-rank percentile of `values` (sorted in place).
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Symmetric Hausdorff distance in millimeters between the boundaries of
/// each label. `percentile = 100` is the exact maximum; smaller values take
/// the max of the two directed nearest-rank percentiles.
pub fn hausdorff_mm_percentile(
    a: &[u16],
    a_grid: &Grid,
    b: &[u16],
    b_grid: &Grid,
    labels: &[u16],
    pct: f64,
) -> Result<BTreeMap<u16, f64>, MetricsError> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(MetricsError::BadPercentile(pct));
    }
    if a.len() != a_grid.len() || b.len() != b_grid.len() {
        return Err(MetricsError::LenMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let mut out = BTreeMap::new();
    for &label in labels {
        let pa = boundary_points(a, a_grid, label);
        let pb = boundary_points(b, b_grid, label);
        if pa.is_empty() || pb.is_empty() {
            return Err(MetricsError::EmptyMask(label));
        }
        let hd = if pct >= 100.0 {
            directed_max(&pa, &pb).max(directed_max(&pb, &pa))
        } else {
            let mut ab = directed_all(&pa, &pb);
            let mut ba = directed_all(&pb, &pa);
            percentile(&mut ab, pct).max(percentile(&mut ba, pct))
        };
        out.insert(label, hd);
    }
    Ok(out)
}

pub fn hausdorff_mm(
    a: &[u16],
    a_grid: &Grid,
    b: &[u16],
    b_grid: &Grid,
    labels: &[u16],
) -> Result<BTreeMap<u16, f64>, MetricsError> {
    hausdorff_mm_percentile(a, a_grid, b, b_grid, labels, 100.0)
}

/// All metrics for one registered pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub mse: f64,
    pub ssim: f64,
    pub soft_dice: BTreeMap<u16, f64>,
    pub soft_dice_mean: Option<f64>,
    pub hausdorff_mm: BTreeMap<u16, f64>,
    pub hausdorff_mean: Option<f64>,
}

fn mean(m: &BTreeMap<u16, f64>) -> Option<f64> {
    (!m.is_empty()).then(|| m.values().sum::<f64>() / m.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    /// Declared SSIM dynamic range; `None` uses the span of both volumes.
    pub dynamic_range: Option<f64>,
    pub hd_percentile: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            dynamic_range: None,
            hd_percentile: 100.0,
        }
    }
}

/// Shared span of both volumes' intensities (at least 1e-12).
pub fn joint_range(a: &Volume, b: &Volume) -> f64 {
    let (lo_a, hi_a) = a.intensity_range();
    let (lo_b, hi_b) = b.intensity_range();
    ((hi_a.max(hi_b) - lo_a.min(lo_b)) as f64).max(1e-12)
}

/// Intensity metrics always; label metrics over the union of non-zero
/// labels when both volumes carry label grids.
pub fn evaluate(a: &Volume, b: &Volume, opts: ReportOptions) -> Result<MetricReport, MetricsError> {
    let range = opts.dynamic_range.unwrap_or_else(|| joint_range(a, b));
    let mut report = MetricReport {
        mse: mse(a, b)?,
        ssim: ssim(a, b, range)?,
        ..Default::default()
    };
    if let (Some(la), Some(lb)) = (&a.labels, &b.labels) {
        let mut labels = a.label_set();
        labels.extend(b.label_set());
        labels.sort_unstable();
        labels.dedup();
        report.soft_dice = soft_dice(la, lb, &labels)?;
        // a label missing on one side has no defined distance
        let both: Vec<u16> = labels
            .iter()
            .copied()
            .filter(|l| la.contains(l) && lb.contains(l))
            .collect();
        report.hausdorff_mm =
            hausdorff_mm_percentile(la, &a.grid, lb, &b.grid, &both, opts.hd_percentile)?;
    }
    report.soft_dice_mean = mean(&report.soft_dice);
    report.hausdorff_mean = mean(&report.hausdorff_mm);
    Ok(report)
}

impl fmt::Display for MetricReport {
    /// One `metric.label = value` line per entry.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mse.all = {}", self.mse)?;
        writeln!(f, "ssim.all = {}", self.ssim)?;
        for (l, v) in &self.soft_dice {
            writeln!(f, "soft_dice.{l} = {v}")?;
        }
        if let Some(m) = self.soft_dice_mean {
            writeln!(f, "soft_dice.mean = {m}")?;
        }
        for (l, v) in &self.hausdorff_mm {
            writeln!(f, "hausdorff_mm.{l} = {v}")?;
        }
        if let Some(m) = self.hausdorff_mean {
            writeln!(f, "hausdorff_mm.mean = {m}")?;
        }
        Ok(())
    }
}

impl FromStr for MetricReport {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut r = MetricReport::default();
        for (n, raw) in s.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| MetricsError::Parse {
                line: n + 1,
                msg: msg.to_string(),
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`"))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| err("value is not a number"))?;
            let (metric, label) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| err("expected `metric.label`"))?;
            match (metric, label) {
                ("mse", "all") => r.mse = value,
                ("ssim", "all") => r.ssim = value,
                ("soft_dice", "mean") => r.soft_dice_mean = Some(value),
                ("hausdorff_mm", "mean") => r.hausdorff_mean = Some(value),
                ("soft_dice", l) => {
                    r.soft_dice
                        .insert(l.parse().map_err(|_| err("bad label"))?, value);
                }
                ("hausdorff_mm", l) => {
                    r.hausdorff_mm
                        .insert(l.parse().map_err(|_| err("bad label"))?, value);
                }
                _ => return Err(err("unknown metric")),
            }
        }
        Ok(r)
    }
}
