//! Plain-text transform and keypoint files.
//!
//! Affine (and rigid) transforms are four lines of four reals: the
//! moving→fixed matrix, row-major. Splines are stored in the direction they
//! are evaluated:
//!
//! ```text
//! tps
//! direction fixed_to_moving
//! lambda 10
//! n 2
//! affine a00 a01 a02 a03     (three lines; last row is implicit)
//! control x y z              (n lines)
//! coeff wx wy wz             (n lines)
//! ```
//!
//! Reals are printed in shortest round-trip form so files reload exactly.

use std::fmt::Write as _;

use worldreg::coords::{WorldAffine, WorldPoint};
use worldreg::solvers::{AffineTransform, Keypoint, TpsTransform};
use worldreg::warp::WorldTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    MovingToFixed,
    FixedToMoving,
}

impl Direction {
    fn as_str(self) -> &'static str {
        match self {
            Direction::MovingToFixed => "moving_to_fixed",
            Direction::FixedToMoving => "fixed_to_moving",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformFile {
    pub transform: WorldTransform,
    pub direction: Direction,
}

impl TransformFile {
    /// The fixed→moving map used for warping.
    pub fn pull(&self) -> Result<WorldTransform, String> {
        match self.direction {
            Direction::FixedToMoving => Ok(self.transform.clone()),
            Direction::MovingToFixed => self
                .transform
                .inverse()
                .map_err(|e| e.to_string())?
                .ok_or_else(|| {
                    "a moving_to_fixed spline cannot be used for warping; store it fixed_to_moving"
                        .to_string()
                }),
        }
    }
}

pub fn format_affine(a: &WorldAffine) -> String {
    let mut s = String::new();
    for row in a.rows() {
        let _ = writeln!(s, "{:?} {:?} {:?} {:?}", row[0], row[1], row[2], row[3]);
    }
    s
}

pub fn format_tps(t: &TpsTransform, direction: Direction) -> String {
    let mut s = String::from("tps\n");
    let _ = writeln!(s, "direction {}", direction.as_str());
    let _ = writeln!(s, "lambda {:?}", t.lambda);
    let _ = writeln!(s, "n {}", t.control_points.len());
    for row in t.affine_part.rows().iter().take(3) {
        let _ = writeln!(
            s,
            "affine {:?} {:?} {:?} {:?}",
            row[0], row[1], row[2], row[3]
        );
    }
    for p in &t.control_points {
        let _ = writeln!(s, "control {:?} {:?} {:?}", p.x, p.y, p.z);
    }
    for w in &t.warp_coefficients {
        let _ = writeln!(s, "coeff {:?} {:?} {:?}", w[0], w[1], w[2]);
    }
    s
}

/// Affine variants are always written moving→fixed.
pub fn format_transform(f: &TransformFile) -> Result<String, String> {
    match (&f.transform, f.direction) {
        (WorldTransform::Tps(t), d) => Ok(format_tps(t, d)),
        (t, Direction::MovingToFixed) => Ok(format_affine(t.as_affine().expect("affine variant"))),
        (t, Direction::FixedToMoving) => {
            let inv = t
                .inverse()
                .map_err(|e| e.to_string())?
                .expect("affine variant");
            Ok(format_affine(inv.as_affine().expect("affine variant")))
        }
    }
}

fn reals(line: usize, toks: &[&str], want: usize) -> Result<Vec<f64>, String> {
    if toks.len() != want {
        return Err(format!(
            "line {line}: expected {want} values, got {}",
            toks.len()
        ));
    }
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("line {line}: `{t}` is not a finite real"))
        })
        .collect()
}

pub fn parse_transform(text: &str) -> Result<TransformFile, String> {
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(n, l)| {
            (
                n + 1,
                l.split('#')
                    .next()
                    .unwrap_or("")
                    .split_whitespace()
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|(_, t)| !t.is_empty())
        .collect();
    let Some((_, first)) = lines.first() else {
        return Err("empty transform file".into());
    };
    if first[0] != "tps" {
        if lines.len() != 4 {
            return Err(format!(
                "affine transform needs 4 rows, got {}",
                lines.len()
            ));
        }
        let mut rows = [[0.0; 4]; 4];
        for (r, (line, toks)) in lines.iter().enumerate() {
            let v = reals(*line, toks, 4)?;
            rows[r].copy_from_slice(&v);
        }
        let matrix = WorldAffine::from_rows(rows).map_err(|e| e.to_string())?;
        return Ok(TransformFile {
            transform: WorldTransform::Affine(AffineTransform { matrix }),
            direction: Direction::MovingToFixed,
        });
    }
    let mut direction = Direction::FixedToMoving;
    let mut lambda = None;
    let mut n = None;
    let mut affine = Vec::new();
    let mut controls = Vec::new();
    let mut coeffs = Vec::new();
    for (line, toks) in &lines[1..] {
        let (key, args) = (toks[0], &toks[1..]);
        match key {
            "direction" => {
                direction = match args {
                    ["moving_to_fixed"] => Direction::MovingToFixed,
                    ["fixed_to_moving"] => Direction::FixedToMoving,
                    _ => return Err(format!("line {line}: bad direction")),
                }
            }
            "lambda" => lambda = Some(reals(*line, args, 1)?[0]),
            "n" => {
                n = Some(
                    args.first()
                        .and_then(|t| t.parse::<usize>().ok())
                        .filter(|_| args.len() == 1)
                        .ok_or_else(|| format!("line {line}: bad count"))?,
                )
            }
            "affine" => {
                let v = reals(*line, args, 4)?;
                affine.push([v[0], v[1], v[2], v[3]]);
            }
            "control" => {
                let v = reals(*line, args, 3)?;
                controls.push(WorldPoint::new(v[0], v[1], v[2]));
            }
            "coeff" => {
                let v = reals(*line, args, 3)?;
                coeffs.push([v[0], v[1], v[2]]);
            }
            other => return Err(format!("line {line}: unknown key `{other}`")),
        }
    }
    let n = n.ok_or("missing `n`")?;
    let lambda = lambda.ok_or("missing `lambda`")?;
    if affine.len() != 3 || controls.len() != n || coeffs.len() != n {
        return Err(format!(
            "spline needs 3 affine rows and {n} control/coeff lines, got {}/{}/{}",
            affine.len(),
            controls.len(),
            coeffs.len()
        ));
    }
    let affine_part =
        WorldAffine::from_rows([affine[0], affine[1], affine[2], [0.0, 0.0, 0.0, 1.0]])
            .map_err(|e| e.to_string())?;
    Ok(TransformFile {
        transform: WorldTransform::Tps(TpsTransform {
            control_points: controls,
            affine_part,
            warp_coefficients: coeffs,
            lambda,
        }),
        direction,
    })
}

/// One `x_mm y_mm z_mm confidence` line per keypoint.
pub fn format_keypoints(kps: &[Keypoint]) -> String {
    let mut s = String::new();
    for k in kps {
        let _ = writeln!(
            s,
            "{:?} {:?} {:?} {:?}",
            k.position.x, k.position.y, k.position.z, k.confidence
        );
    }
    s
}

pub fn parse_keypoints(text: &str) -> Result<Vec<Keypoint>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let toks: Vec<&str> = raw
            .split('#')
            .next()
            .unwrap_or("")
            .split_whitespace()
            .collect();
        if toks.is_empty() {
            continue;
        }
        let v = reals(n + 1, &toks, 4)?;
        out.push(Keypoint::new(WorldPoint::new(v[0], v[1], v[2]), v[3]));
    }
    Ok(out)
}
