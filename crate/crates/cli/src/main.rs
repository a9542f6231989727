//! `worldreg` command-line front end.
//!
//! Every failure ends the process with a single stderr line
//! `code=<N> msg=<text>`: 2 for I/O and input errors, 3 for a degenerate
//! solve, 4 for detector failure. Stdout carries only artifact paths or the
//! requested report.

mod commands;
mod transform_file;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "worldreg",
    version,
    about = "Keypoint registration of medical volumes in scanner coordinates"
)]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every randomized step (phantom noise, spline draws, λ sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Progress messages on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a moving volume to a fixed one.
    Register(RegisterArgs),
    /// Warp a moving volume onto a fixed grid through a transform file.
    Warp(WarpArgs),
    /// Detect keypoints (or reduce external activation maps) in a volume.
    Keypoints(KeypointArgs),
    /// Compare two volumes on the same grid.
    Eval(EvalArgs),
    /// Render a synthetic pair with known ground truth.
    Phantom(PhantomArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransformKind {
    Rigid,
    Affine,
    Tps,
}

#[derive(Debug, Clone, Args)]
pub struct DetectorArgs {
    /// Number of keypoints per volume.
    #[arg(long, default_value_t = 8)]
    pub n_keypoints: usize,
    /// Comma-separated Gaussian scales in mm, increasing.
    #[arg(long, value_delimiter = ',')]
    pub blob_scales: Option<Vec<f64>>,
    /// Activation maps with no more mass than this are rejected.
    #[arg(long, default_value_t = 0.0)]
    pub min_mass: f64,
    /// Minimum scale-normalized blob response.
    #[arg(long)]
    pub response_floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long, value_enum, default_value = "affine")]
    pub transform: TransformKind,
    /// Spline rigidity; required with `--transform tps`.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Index-aligned keypoint files (`x y z confidence` per line); when
    /// absent, keypoints are detected and matched.
    #[arg(long, requires = "fixed_keypoints")]
    pub moving_keypoints: Option<PathBuf>,
    #[arg(long, requires = "moving_keypoints")]
    pub fixed_keypoints: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Refine moving keypoints by pattern search on the similarity objective.
    #[arg(long)]
    pub refine: bool,
    /// Objective terms as `name:weight`, names from mse, ssim, dice.
    #[arg(long, value_delimiter = ',', default_value = "ssim:1,dice:1")]
    pub similarity: Vec<String>,
    #[arg(long, default_value_t = 40)]
    pub refine_iters: usize,
    #[arg(long, default_value_t = 2.0)]
    pub refine_step: f64,
    /// SSIM dynamic range (default: joint intensity span).
    #[arg(long)]
    pub dynamic_range: Option<f64>,
    /// Hausdorff percentile (100 = classic maximum).
    #[arg(long, default_value_t = 100.0)]
    pub hd_percentile: f64,
    #[arg(long)]
    pub out_transform: PathBuf,
    #[arg(long)]
    pub out_warped: Option<PathBuf>,
    #[arg(long)]
    pub out_report: Option<PathBuf>,
    /// Also write the keypoints used, as `<prefix>.moving.txt` / `.fixed.txt`.
    #[arg(long)]
    pub out_keypoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub moving: PathBuf,
    /// Volume whose grid (dims and affine) the output uses.
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub transform: PathBuf,
    /// Treat intensities as a label map: nearest-neighbor sampling.
    #[arg(long)]
    pub labels: bool,
    /// Nearest-neighbor intensities.
    #[arg(long)]
    pub nearest: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeypointArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// External activation stack (RKMACT1) on the volume's grid.
    #[arg(long)]
    pub activations: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub dynamic_range: Option<f64>,
    #[arg(long, default_value_t = 100.0)]
    pub hd_percentile: f64,
    /// Report file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom description; the built-in quickstart phantom when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Ground-truth translation `x,y,z` (mm).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub translate: Option<Vec<f64>>,
    /// Ground-truth rotation about x, y, z (degrees), applied about the origin.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub rotate_deg: Option<Vec<f64>>,
    /// Add a smooth spline deformation bounded by this many mm.
    #[arg(long)]
    pub deform_mm: Option<f64>,
    /// Moving→fixed affine file, instead of translate/rotate.
    #[arg(long, conflicts_with_all = ["translate", "rotate_deg"])]
    pub transform: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    pub fov: f64,
    #[arg(long, value_delimiter = ',', default_value = "2,2,2")]
    pub spacing_m: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "2,2,2")]
    pub spacing_f: Vec<f64>,
    #[arg(long, default_value = "axial")]
    pub orientation_m: String,
    #[arg(long, default_value = "axial")]
    pub orientation_f: String,
    /// Output directory (created if needed).
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Volume format extension: `nii`, `nii.gz` or `rkm.txt`.
    #[arg(long, default_value = "nii.gz")]
    pub format: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("code=2 msg={first}");
            return ExitCode::from(2);
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("code=2 msg=--threads must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("code=2 msg=cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| commands::run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("code={} msg={}", e.code, e.msg.replace('\n', " "));
            ExitCode::from(e.code)
        }
    }
}
