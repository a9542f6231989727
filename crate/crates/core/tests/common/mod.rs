//! Independent brute-force oracles and random fixtures shared by the
//! integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use worldreg::coords::{invert, WorldAffine, WorldPoint};
use worldreg::solvers::{AffineTransform, KeypointSet, TpsTransform};
use worldreg::volume::{Grid, Volume};
use worldreg::warp::{Interpolation, WorldTransform, EDGE_TOLERANCE};

pub fn rotation(rng: &mut ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    let axis = nalgebra::Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// `R1 · diag(s) · R2 + t` with singular values in `[lo, hi]`.
pub fn random_affine(rng: &mut ChaCha8Rng, lo: f64, hi: f64, shift: f64) -> WorldAffine {
    let s = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::from_fn(|_, _| {
        rng.random_range(lo..=hi)
    }));
    let l = rotation(rng) * s * rotation(rng);
    let t = nalgebra::Vector3::from_fn(|_, _| rng.random_range(-shift..=shift));
    WorldAffine::from_parts(&l, &t).unwrap()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<WorldPoint> {
    (0..n)
        .map(|_| {
            WorldPoint::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half..half),
            )
        })
        .collect()
}

pub fn random_confidences(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.2..5.0)).collect()
}

pub fn rel_frobenius(a: &WorldAffine, b: &WorldAffine) -> f64 {
    (a.matrix() - b.matrix()).norm() / b.matrix().norm()
}

pub fn affine_t(m: WorldAffine) -> WorldTransform {
    WorldTransform::Affine(AffineTransform { matrix: m })
}

pub fn random_volume(
    rng: &mut ChaCha8Rng,
    dims: [usize; 3],
    affine: WorldAffine,
    labels: u16,
) -> Volume {
    let grid = Grid::new(dims, affine).unwrap();
    let data = (0..grid.len())
        .map(|_| rng.random_range(-100.0f32..100.0))
        .collect();
    let v = Volume::new(grid, data).unwrap();
    if labels == 0 {
        v
    } else {
        let l = (0..grid.len())
            .map(|_| rng.random_range(0..=labels))
            .collect();
        v.with_labels(l).unwrap()
    }
}

// ------------------------------------------------------------------ warp

fn affine_apply(m: &[[f64; 4]; 4], p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for r in 0..3 {
        out[r] = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
    }
    out
}

fn tps_apply(t: &TpsTransform, p: [f64; 3]) -> [f64; 3] {
    let mut out = affine_apply(&t.affine_part.rows(), p);
    for (c, w) in t.control_points.iter().zip(&t.warp_coefficients) {
        let r = ((p[0] - c.x) * (p[0] - c.x)
            + (p[1] - c.y) * (p[1] - c.y)
            + (p[2] - c.z) * (p[2] - c.z))
            .sqrt();
        for a in 0..3 {
            out[a] += w[a] * r;
        }
    }
    out
}

fn pull_apply(t: &WorldTransform, p: [f64; 3]) -> [f64; 3] {
    match t {
        WorldTransform::Affine(a) | WorldTransform::Rigid(a) => affine_apply(&a.matrix.rows(), p),
        WorldTransform::Tps(t) => tps_apply(t, p),
    }
}

fn oracle_trilinear(v: &Volume, x: [f64; 3]) -> f32 {
    let d = v.grid.dims;
    let mut base = [0usize; 3];
    let mut w = [[0.0f64; 2]; 3];
    let mut idx = [[0usize; 2]; 3];
    for a in 0..3 {
        let top = (d[a] - 1) as f64;
        if x[a] < -EDGE_TOLERANCE || x[a] > top + EDGE_TOLERANCE || x[a].is_nan() {
            return 0.0;
        }
        let c = x[a].clamp(0.0, top);
        base[a] = if d[a] >= 2 {
            (c.floor() as usize).min(d[a] - 2)
        } else {
            0
        };
        let f = c - base[a] as f64;
        w[a] = [1.0 - f, f];
        idx[a] = [base[a], (base[a] + 1).min(d[a] - 1)];
    }
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let (a, b, c) = (corner >> 2, (corner >> 1) & 1, corner & 1);
        let n = (idx[0][a] * d[1] + idx[1][b]) * d[2] + idx[2][c];
        acc += w[0][a] * w[1][b] * w[2][c] * v.data[n] as f64;
    }
    acc as f32
}

fn oracle_nearest(d: [usize; 3], x: [f64; 3]) -> Option<usize> {
    let mut r = [0usize; 3];
    for a in 0..3 {
        let v = x[a].round();
        if !(v >= 0.0 && v <= (d[a] - 1) as f64) {
            return None;
        }
        r[a] = v as usize;
    }
    Some((r[0] * d[1] + r[1]) * d[2] + r[2])
}

/// Per-voxel composition `A_m⁻¹ ∘ pull ∘ A_f`, one voxel at a time.
pub fn warp_oracle(
    moving: &Volume,
    fixed: &Grid,
    pull: &WorldTransform,
    mode: Interpolation,
) -> (Vec<f32>, Option<Vec<u16>>) {
    let af = fixed.affine.rows();
    let am_inv = invert(&moving.grid.affine).unwrap().rows();
    let md = moving.grid.dims;
    let mut data = Vec::with_capacity(fixed.len());
    let mut labels = Vec::with_capacity(fixed.len());
    for i in 0..fixed.dims[0] {
        for j in 0..fixed.dims[1] {
            for k in 0..fixed.dims[2] {
                let p = affine_apply(&af, [i as f64, j as f64, k as f64]);
                let q = pull_apply(pull, p);
                let v = affine_apply(&am_inv, q);
                data.push(match mode {
                    Interpolation::Trilinear => oracle_trilinear(moving, v),
                    Interpolation::Nearest => oracle_nearest(md, v).map_or(0.0, |n| moving.data[n]),
                });
                if let Some(l) = &moving.labels {
                    labels.push(oracle_nearest(md, v).map_or(0, |n| l[n]));
                }
            }
        }
    }
    (data, moving.labels.as_ref().map(|_| labels))
}

// --------------------------------------------------------------- metrics

pub fn mse_oracle(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += (*x as f64 - *y as f64).powi(2);
    }
    s / a.len() as f64
}

/// Direct two-pass window statistics, no integral images.
pub fn ssim_oracle(a: &Volume, b: &Volume, range: f64) -> f64 {
    let d = a.grid.dims;
    let w = d.map(|x| x.min(7));
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for i0 in 0..=d[0] - w[0] {
        for j0 in 0..=d[1] - w[1] {
            for k0 in 0..=d[2] - w[2] {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for i in i0..i0 + w[0] {
                    for j in j0..j0 + w[1] {
                        for k in k0..k0 + w[2] {
                            xs.push(a.at(i, j, k) as f64);
                            ys.push(b.at(i, j, k) as f64);
                        }
                    }
                }
                let n = xs.len() as f64;
                let ma = xs.iter().sum::<f64>() / n;
                let mb = ys.iter().sum::<f64>() / n;
                let va = xs.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
                let vb = ys.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
                let cov = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| (x - ma) * (y - mb))
                    .sum::<f64>()
                    / n;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn dice_oracle(a: &[u16], b: &[u16], label: u16) -> f64 {
    let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (p, q) = ((*x == label) as u8 as f64, (*y == label) as u8 as f64);
        inter += p * q;
        na += p;
        nb += q;
    }
    (2.0 * inter + 1e-6) / (na + nb + 1e-6)
}

fn boundary_oracle(l: &[u16], g: &Grid, label: u16) -> Vec<[f64; 3]> {
    let d = g.dims;
    let mut out = Vec::new();
    for n in 0..g.len() {
        if l[n] != label {
            continue;
        }
        let [i, j, k] = g.unravel(n);
        let c = [i as i64, j as i64, k as i64];
        let mut edge = false;
        for a in 0..3 {
            for s in [-1i64, 1] {
                let mut q = c;
                q[a] += s;
                if q[a] < 0 || q[a] >= d[a] as i64 {
                    edge = true;
                } else if l[g.index(q[0] as usize, q[1] as usize, q[2] as usize)] != label {
                    edge = true;
                }
            }
        }
        if edge {
            out.push(g.affine.apply([i as f64, j as f64, k as f64]));
        }
    }
    out
}

/// All-pairs symmetric Hausdorff distance between label boundaries.
pub fn hausdorff_oracle(a: &[u16], ga: &Grid, b: &[u16], gb: &Grid, label: u16) -> f64 {
    let pa = boundary_oracle(a, ga, label);
    let pb = boundary_oracle(b, gb, label);
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

// -------------------------------------------------------------- keypoints

/// Index-aligned sets with per-point confidences.
pub fn sets(
    m: Vec<WorldPoint>,
    f: Vec<WorldPoint>,
    cm: Vec<f64>,
    cf: Vec<f64>,
) -> (KeypointSet, KeypointSet) {
    (
        KeypointSet::new(m, cm).unwrap(),
        KeypointSet::new(f, cf).unwrap(),
    )
}
