//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use worldreg::coords::{compose, WorldAffine};
use worldreg::keypoints::{
    center_of_mass, detect_keypoints, pair_keypoints, DetectorConfig, KeypointError,
};
use worldreg::metrics::{evaluate, MetricsError, ReportOptions};
use worldreg::objective::{
    refine_keypoints, solve_registration, LambdaChoice, ObjectiveError, RefinementConfig,
    SimilarityConfig, SimilarityTerm, TransformModel,
};
use worldreg::phantom::{
    affine_after_tps, make_pair, quickstart_spec, random_deformation, Orientation, PairGeometry,
    PhantomError, PhantomSpec,
};
use worldreg::solvers::{AffineTransform, Keypoint, KeypointSet, SolverError};
use worldreg::volio::{read_activations, read_volume, write_volume, VolioError};
use worldreg::warp::{warp_to_fixed_grid, Interpolation, WarpError, WorldTransform};
use worldreg::Volume;

use crate::transform_file::{
    format_keypoints, format_transform, parse_keypoints, parse_transform, Direction, TransformFile,
};
use crate::{
    Cli, Command, DetectorArgs, EvalArgs, KeypointArgs, PhantomArgs, RegisterArgs, TransformKind,
    WarpArgs,
};

pub const EXIT_IO: u8 = 2;
pub const EXIT_DEGENERATE: u8 = 3;
pub const EXIT_DETECTOR: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    fn io(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            msg: msg.into(),
        }
    }
}

impl From<VolioError> for CliError {
    fn from(e: VolioError) -> Self {
        match e {
            VolioError::Keypoints(k) => k.into(),
            other => CliError::io(other.to_string()),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        let code = match e {
            SolverError::DegenerateConfiguration(_)
            | SolverError::TooFewKeypoints(_)
            | SolverError::BadLambda(_) => EXIT_DEGENERATE,
            _ => EXIT_IO,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<KeypointError> for CliError {
    fn from(e: KeypointError) -> Self {
        let code = match &e {
            KeypointError::Solver(s) => return s.clone().into(),
            KeypointError::BadConfig(_) | KeypointError::MapSize { .. } => EXIT_IO,
            KeypointError::Coords(_) => EXIT_DEGENERATE,
            _ => EXIT_DETECTOR,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<WarpError> for CliError {
    fn from(e: WarpError) -> Self {
        Self {
            code: EXIT_DEGENERATE,
            msg: e.to_string(),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::Solver(s) => s.into(),
            ObjectiveError::Warp(w) => w.into(),
            other => CliError::io(other.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Solver(s) => s.into(),
            PhantomError::Warp(w) => w.into(),
            other => CliError::io(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Ctx {
    verbose: bool,
    seed: Option<u64>,
}

impl Ctx {
    fn info(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("info: {}", msg.as_ref());
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx {
        verbose: cli.verbose,
        seed: cli.seed,
    };
    match &cli.command {
        Command::Register(a) => register(&ctx, a),
        Command::Warp(a) => warp(&ctx, a),
        Command::Keypoints(a) => keypoints(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Phantom(a) => phantom(&ctx, a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Volume> {
    Ok(read_volume(path)?)
}

fn detector_config(a: &DetectorArgs) -> DetectorConfig {
    let d = DetectorConfig::default();
    DetectorConfig {
        n_keypoints: a.n_keypoints,
        blob_scales: a.blob_scales.clone().unwrap_or(d.blob_scales),
        min_activation_mass: a.min_mass,
        response_floor: a.response_floor.unwrap_or(d.response_floor),
    }
}

/// Everything one `register` invocation needs, validated.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub moving: PathBuf,
    pub fixed: PathBuf,
    pub model: TransformModel,
    pub keypoints: Option<(PathBuf, PathBuf)>,
    pub detector: DetectorConfig,
    pub similarity: Option<(SimilarityConfig, RefinementConfig)>,
    pub report: ReportOptions,
    pub out_transform: PathBuf,
    pub out_warped: Option<PathBuf>,
    pub out_report: Option<PathBuf>,
    pub out_keypoints: Option<PathBuf>,
}

fn parse_terms(items: &[String]) -> Result<Vec<(SimilarityTerm, f64)>> {
    items
        .iter()
        .map(|item| {
            let (name, weight) = item.split_once(':').unwrap_or((item.as_str(), "1"));
            let term: SimilarityTerm = name.trim().parse().map_err(CliError::io)?;
            let w: f64 = weight
                .trim()
                .parse()
                .map_err(|_| CliError::io(format!("bad weight in `{item}`")))?;
            Ok((term, w))
        })
        .collect()
}

impl RunManifest {
    fn from_args(a: &RegisterArgs, seed: Option<u64>) -> Result<Self> {
        let model = match (a.transform, a.lambda) {
            (TransformKind::Tps, Some(lambda)) => TransformModel::Tps { lambda },
            (TransformKind::Tps, None) => {
                return Err(CliError::io("--transform tps requires --lambda"))
            }
            (_, Some(_)) => {
                return Err(CliError::io("--lambda is only valid with --transform tps"))
            }
            (TransformKind::Rigid, None) => TransformModel::Rigid,
            (TransformKind::Affine, None) => TransformModel::Affine,
        };
        let similarity = if a.refine {
            let lambda = match model {
                TransformModel::Tps { lambda } => LambdaChoice::Fixed(lambda),
                _ => LambdaChoice::Affine,
            };
            let s = SimilarityConfig {
                terms: parse_terms(&a.similarity)?,
                lambda,
                dynamic_range: a.dynamic_range,
            };
            s.validate()?;
            let r = RefinementConfig {
                max_iters: a.refine_iters,
                step_mm: a.refine_step,
                rng_seed: seed.unwrap_or(0),
                ..Default::default()
            };
            Some((s, r))
        } else {
            None
        };
        let detector = detector_config(&a.detector);
        detector.validate()?;
        Ok(Self {
            moving: a.moving.clone(),
            fixed: a.fixed.clone(),
            model,
            keypoints: a.moving_keypoints.clone().zip(a.fixed_keypoints.clone()),
            detector,
            similarity,
            report: ReportOptions {
                dynamic_range: a.dynamic_range,
                hd_percentile: a.hd_percentile,
            },
            out_transform: a.out_transform.clone(),
            out_warped: a.out_warped.clone(),
            out_report: a.out_report.clone(),
            out_keypoints: a.out_keypoints.clone(),
        })
    }
}

fn read_keypoint_file(path: &Path) -> Result<Vec<Keypoint>> {
    parse_keypoints(&read_text(path)?).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn register(ctx: &Ctx, a: &RegisterArgs) -> Result<()> {
    let m = RunManifest::from_args(a, ctx.seed)?;
    let moving = load(&m.moving)?;
    let fixed = load(&m.fixed)?;
    let (mut km, kf) = match &m.keypoints {
        Some((pm, pf)) => (
            KeypointSet::from_keypoints(&read_keypoint_file(pm)?)?,
            KeypointSet::from_keypoints(&read_keypoint_file(pf)?)?,
        ),
        None => {
            let dm = detect_keypoints(&moving, &m.detector)?;
            let df = detect_keypoints(&fixed, &m.detector)?;
            ctx.info(format!(
                "detected {} moving and {} fixed keypoints",
                dm.len(),
                df.len()
            ));
            pair_keypoints(&dm, &df)?
        }
    };
    ctx.info(format!("{} keypoint pairs", km.len()));
    if let Some((s, r)) = &m.similarity {
        let refined = refine_keypoints(&moving, &fixed, &km, &kf, s, r)?;
        ctx.info(format!(
            "refinement: {} accepted steps, objective {} -> {}",
            refined.accepted_steps,
            refined.trace.first().copied().unwrap_or(f64::NAN),
            refined.objective
        ));
        km = refined.moving;
    }
    let reg = solve_registration(&km, &kf, m.model)?;
    let file = match &reg.forward {
        Some(fwd) => TransformFile {
            transform: fwd.clone(),
            direction: Direction::MovingToFixed,
        },
        None => TransformFile {
            transform: reg.pull.clone(),
            direction: Direction::FixedToMoving,
        },
    };
    write_text(
        &m.out_transform,
        &format_transform(&file).map_err(CliError::io)?,
    )?;
    println!("{}", m.out_transform.display());
    if let Some(prefix) = &m.out_keypoints {
        for (suffix, set) in [("moving", &km), ("fixed", &kf)] {
            let path = PathBuf::from(format!("{}.{suffix}.txt", prefix.display()));
            write_text(&path, &format_keypoints(&set.keypoints()))?;
            println!("{}", path.display());
        }
    }
    if m.out_warped.is_some() || m.out_report.is_some() {
        let warped = warp_to_fixed_grid(&moving, &fixed.grid, &reg.pull, Interpolation::Trilinear)?;
        if let Some(p) = &m.out_warped {
            write_volume(&warped, p)?;
            println!("{}", p.display());
        }
        if let Some(p) = &m.out_report {
            let report = evaluate(&warped, &fixed, m.report)?;
            write_text(p, &report.to_string())?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn warp(ctx: &Ctx, a: &WarpArgs) -> Result<()> {
    let text = read_text(&a.transform)?;
    let file = parse_transform(&text)
        .map_err(|e| CliError::io(format!("{}: {e}", a.transform.display())))?;
    let pull = file.pull().map_err(CliError::io)?;
    let moving = load(&a.moving)?;
    let fixed = load(&a.fixed)?;
    let mode = if a.labels || a.nearest {
        Interpolation::Nearest
    } else {
        Interpolation::Trilinear
    };
    ctx.info(format!(
        "warping {:?} onto {:?} grid",
        moving.dims(),
        fixed.dims()
    ));
    let out = warp_to_fixed_grid(&moving, &fixed.grid, &pull, mode)?;
    write_volume(&out, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn keypoints(ctx: &Ctx, a: &KeypointArgs) -> Result<()> {
    let vol = load(&a.volume)?;
    let cfg = detector_config(&a.detector);
    let kps = match &a.activations {
        Some(path) => {
            let stack = read_activations(path, vol.grid.affine)?;
            if stack.grid().dims != vol.dims() {
                return Err(CliError::io(format!(
                    "activation dims {:?} differ from volume dims {:?}",
                    stack.grid().dims,
                    vol.dims()
                )));
            }
            center_of_mass(&stack, cfg.min_activation_mass)?
        }
        None => detect_keypoints(&vol, &cfg)?,
    };
    ctx.info(format!("{} keypoints", kps.len()));
    let text = format_keypoints(&kps);
    match &a.out {
        Some(p) => {
            write_text(p, &text)?;
            println!("{}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn eval(_ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let va = load(&a.a)?;
    let vb = load(&a.b)?;
    let report = evaluate(
        &va,
        &vb,
        ReportOptions {
            dynamic_range: a.dynamic_range,
            hd_percentile: a.hd_percentile,
        },
    )?;
    match &a.out {
        Some(p) => {
            write_text(p, &report.to_string())?;
            println!("{}", p.display());
        }
        None => print!("{report}"),
    }
    Ok(())
}

fn triple(v: &[f64], what: &str) -> Result<[f64; 3]> {
    v.try_into()
        .map_err(|_| CliError::io(format!("{what} needs three comma-separated values")))
}

fn rotation_deg(r: [f64; 3]) -> WorldAffine {
    let [ax, ay, az] = r.map(f64::to_radians);
    let rx = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::x_axis(), ax);
    let ry = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::y_axis(), ay);
    let rz = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), az);
    let m = (rz * ry * rx).into_inner();
    WorldAffine::from_parts(&m, &nalgebra::Vector3::zeros()).expect("rotation is invertible")
}

fn phantom(ctx: &Ctx, a: &PhantomArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => PhantomSpec::parse(&read_text(p)?)
            .map_err(|e| CliError::io(format!("{}: {e}", p.display())))?,
        None => quickstart_spec(),
    };
    if let Some(s) = ctx.seed {
        spec.rng_seed = s;
    }
    let affine = match &a.transform {
        Some(p) => {
            let f = parse_transform(&read_text(p)?)
                .map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            match f.transform.as_affine() {
                Some(m) if f.direction == Direction::MovingToFixed => *m,
                _ => {
                    return Err(CliError::io(
                        "--transform must be a moving→fixed affine file",
                    ))
                }
            }
        }
        None => {
            let r = match &a.rotate_deg {
                Some(v) => rotation_deg(triple(v, "--rotate-deg")?),
                None => WorldAffine::identity(),
            };
            let t = match &a.translate {
                Some(v) => WorldAffine::translation_only(triple(v, "--translate")?),
                None => WorldAffine::identity(),
            };
            compose(&t, &r)
        }
    };
    let g = match a.deform_mm {
        Some(d) if d > 0.0 => {
            let tps = random_deformation(&spec.centers(), d, a.fov, spec.rng_seed)?;
            WorldTransform::Tps(affine_after_tps(&affine, &tps))
        }
        Some(d) if d < 0.0 => return Err(CliError::io("--deform-mm must be non-negative")),
        _ => WorldTransform::Affine(AffineTransform { matrix: affine }),
    };
    let orient = |s: &str| s.parse::<Orientation>().map_err(CliError::io);
    let geom = PairGeometry {
        fov_mm: a.fov,
        spacing_m: triple(&a.spacing_m, "--spacing-m")?,
        orientation_m: orient(&a.orientation_m)?,
        spacing_f: triple(&a.spacing_f, "--spacing-f")?,
        orientation_f: orient(&a.orientation_f)?,
    };
    ctx.info(format!("rendering {} shapes", spec.shapes.len()));
    let gt = make_pair(&spec, &g, &geom)?;
    if !["nii", "nii.gz", "rkm.txt"].contains(&a.format.as_str()) {
        return Err(CliError::io(format!("unknown format `{}`", a.format)));
    }
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let path = |name: &str| a.out_dir.join(name);
    let mv = path(&format!("moving.{}", a.format));
    let fx = path(&format!("fixed.{}", a.format));
    write_volume(&gt.moving, &mv)?;
    write_volume(&gt.fixed, &fx)?;
    let truth = TransformFile {
        transform: g,
        direction: Direction::MovingToFixed,
    };
    let files = [
        (
            path("truth.txt"),
            format_transform(&truth).map_err(CliError::io)?,
        ),
        (
            path("moving_keypoints.txt"),
            format_keypoints(&gt.true_keypoints.0.keypoints()),
        ),
        (
            path("fixed_keypoints.txt"),
            format_keypoints(&gt.true_keypoints.1.keypoints()),
        ),
        (path("phantom.txt"), spec.to_text()),
    ];
    for (p, text) in &files {
        write_text(p, text)?;
    }
    for p in [&mv, &fx].into_iter().chain(files.iter().map(|(p, _)| p)) {
        println!("{}", p.display());
    }
    Ok(())
}
