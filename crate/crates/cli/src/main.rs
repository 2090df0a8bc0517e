use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smd::geometry::{CameraModel, Distortion, Intrinsics};
use smd::pipeline::{self, Input, PipelineConfig};
use smd::synth::{self, InitMode, SceneConfig};
use smd::{Error, Result};

#[derive(Parser)]
#[command(name = "smd", version, about = "Depth from small motion")]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a depth map from a frame directory or path prefix.
    Run {
        /// Frame directory, or a file-name prefix inside one.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Render a synthetic scene and run the pipeline on it.
    Synth {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Also write the rendered frames as PGM files here.
        #[arg(long)]
        save_frames: Option<PathBuf>,
    },
    /// Rank-1 vs flat initialization over seeded synthetic trials.
    Bench {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        /// Seed of the first trial; trial `t` uses `seed + t`.
        #[arg(long)]
        seed: Option<u64>,
        /// JSON-lines output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Grid distortion error of an estimated camera against a reference camera.
    CalibEval {
        /// Take the estimate from a run report instead of the flags below.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        est_focal: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        est_k1: f64,
        #[arg(long, default_value_t = 0.0)]
        est_k2: f64,
        #[arg(long)]
        true_focal: f64,
        #[arg(long)]
        true_k1: f64,
        #[arg(long)]
        true_k2: f64,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long, default_value_t = 10)]
        grid_step: usize,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
    /// File of `key = value` lines using these flag names; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    n_planes: Option<usize>,
    #[arg(long)]
    sweep_downscale: Option<usize>,
    #[arg(long)]
    median_radius: Option<usize>,
    /// rank1 or flat.
    #[arg(long)]
    init_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    ftol: Option<f64>,
    #[arg(long)]
    xtol: Option<f64>,
    #[arg(long)]
    huber_delta: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    window_radius: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    min_response: Option<f32>,
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long, default_value_t = 10)]
    n_frames: usize,
    #[arg(long, default_value_t = 300)]
    m_points: usize,
    #[arg(long, default_value_t = 1280)]
    width: usize,
    #[arg(long, default_value_t = 720)]
    height: usize,
    #[arg(long, default_value_t = 1280.0)]
    focal: f64,
    #[arg(long, default_value_t = -0.12, allow_hyphen_values = true)]
    k1: f64,
    #[arg(long, default_value_t = 0.03, allow_hyphen_values = true)]
    k2: f64,
    #[arg(long, default_value_t = 2.0)]
    depth_min: f64,
    #[arg(long, default_value_t = 10.0)]
    depth_max: f64,
    #[arg(long, default_value_t = 0.005)]
    baseline_frac: f64,
    #[arg(long, default_value_t = 0.0)]
    axial_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    rot_max: f64,
    #[arg(long, default_value_t = 0.3)]
    noise_px: f64,
}

impl SceneArgs {
    fn config(&self) -> SceneConfig {
        SceneConfig {
            n_frames: self.n_frames,
            m_points: self.m_points,
            width: self.width,
            height: self.height,
            focal: self.focal,
            k1: self.k1,
            k2: self.k2,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
            baseline_frac: self.baseline_frac,
            axial_frac: self.axial_frac,
            rot_max_deg: self.rot_max,
            noise_px: self.noise_px,
            seed: 0,
            render_images: false,
        }
    }
}

impl PipelineArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(|v| v.to_string())
        }
        vec![
            ("grid-size", s(&self.grid_size)),
            ("n-planes", s(&self.n_planes)),
            ("sweep-downscale", s(&self.sweep_downscale)),
            ("median-radius", s(&self.median_radius)),
            ("init-mode", s(&self.init_mode)),
            ("seed", s(&self.seed)),
            ("max-iter", s(&self.max_iter)),
            ("ftol", s(&self.ftol)),
            ("xtol", s(&self.xtol)),
            ("huber-delta", s(&self.huber_delta)),
            ("lambda0", s(&self.lambda0)),
            ("window-radius", s(&self.window_radius)),
            ("levels", s(&self.levels)),
            ("min-response", s(&self.min_response)),
        ]
    }

    /// Defaults, then the config file, then `SMD_SEED`, then flags.
    fn config(&self, input: Input) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::new(input, &self.output_dir);
        if let Some(path) = &self.config {
            cfg.apply_config_text(&fs::read_to_string(path)?)?;
        }
        cfg.apply_env()?;
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.output_dir = self.output_dir.clone();
        Ok(cfg)
    }
}

fn run_pipeline(cfg: &PipelineConfig) -> Result<i32> {
    match pipeline::run(cfg) {
        Ok(out) => {
            let r = &out.report;
            if let Some(ba) = &r.ba {
                eprintln!(
                    "features {}  ba {} iterations (converged: {})  cost {:.4} -> {:.4}",
                    r.feature_count, ba.iterations, ba.converged, ba.initial_cost, ba.final_cost
                );
            }
            if let Some(c) = &r.calibration {
                eprintln!("focal {:.2}  k1 {:.5}  k2 {:.5}", c.focal, c.k1, c.k2);
            }
            if let Some(s) = &r.synthetic {
                let grid = s
                    .grid_error_px
                    .map_or("n/a".to_string(), |g| format!("{g:.3} px"));
                eprintln!(
                    "focal error {:.3}%  grid distortion error {grid}",
                    s.focal_error_pct
                );
            }
            println!("{}", r.outputs.report.display());
            Ok(0)
        }
        Err(f) => {
            eprintln!("error: {f}");
            Ok(f.exit_code())
        }
    }
}

fn main_inner(cli: Cli) -> Result<i32> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    match cli.command {
        Command::Run { input, pipeline } => {
            let mut cfg = pipeline.config(Input::Frames(PathBuf::new()))?;
            if let Some(path) = input {
                cfg.input = Input::Frames(path);
            }
            if cfg.input == Input::Frames(PathBuf::new()) {
                return Err(Error::InvalidParameter(
                    "--input or an input key in --config is required".into(),
                ));
            }
            run_pipeline(&cfg)
        }
        Command::Synth {
            scene,
            pipeline,
            save_frames,
        } => {
            let cfg = pipeline.config(Input::Synthetic(scene.config()))?;
            if let (Some(dir), Input::Synthetic(sc)) = (&save_frames, &cfg.input) {
                let s = synth::generate(&SceneConfig {
                    seed: cfg.seed,
                    render_images: true,
                    ..sc.clone()
                })?;
                fs::create_dir_all(dir)?;
                for (i, img) in s.images.iter().flatten().enumerate() {
                    smd::io::save_gray(img, &dir.join(format!("frame_{i:03}.pgm")))?;
                }
            }
            run_pipeline(&cfg)
        }
        Command::Bench {
            scene,
            trials,
            max_iter,
            seed,
            output,
        } => {
            let mut cfg = scene.config();
            if let Some(s) = seed {
                cfg.seed = s;
            } else if let Ok(v) = std::env::var(pipeline::SEED_ENV) {
                cfg.seed = v.trim().parse().map_err(|_| {
                    Error::InvalidParameter(format!("{}={v:?}", pipeline::SEED_ENV))
                })?;
            }
            let opts = smd::ba::BaOptions {
                max_iter,
                ..Default::default()
            };
            let records = synth::bench_convergence(&cfg, trials, &opts)?;
            let text = synth::to_json_lines(&records)?;
            match output {
                Some(path) => fs::write(path, text)?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
            for mode in [InitMode::Rank1, InitMode::Flat] {
                let mut its: Vec<usize> = records
                    .iter()
                    .filter(|r| r.init_mode == mode && r.error.is_none())
                    .map(|r| r.iterations)
                    .collect();
                its.sort_unstable();
                let conv = records
                    .iter()
                    .filter(|r| r.init_mode == mode && r.converged)
                    .count();
                let median = its
                    .get(its.len().saturating_sub(1) / 2)
                    .copied()
                    .unwrap_or(0);
                eprintln!("{mode}: converged {conv}/{trials}, median iterations {median}");
            }
            Ok(0)
        }
        Command::CalibEval {
            report,
            est_focal,
            est_k1,
            est_k2,
            true_focal,
            true_k1,
            true_k2,
            width,
            height,
            grid_step,
        } => {
            let center = [width as f64 / 2.0, height as f64 / 2.0];
            let truth = CameraModel {
                intrinsics: Intrinsics::new(true_focal, center, width, height)?,
                distortion: Distortion::new(true_k1, true_k2),
            };
            let est = match report {
                Some(path) => {
                    let r = pipeline::read_report(&path)?;
                    let c = r.calibration.ok_or_else(|| {
                        Error::InvalidParameter(format!("{} has no calibration", path.display()))
                    })?;
                    CameraModel {
                        intrinsics: Intrinsics::new(c.focal, c.principal_point, width, height)?,
                        distortion: Distortion::new(c.k1, c.k2),
                    }
                }
                None => CameraModel {
                    intrinsics: Intrinsics::new(
                        est_focal.unwrap_or(true_focal),
                        center,
                        width,
                        height,
                    )?,
                    distortion: Distortion::new(est_k1, est_k2),
                },
            };
            let err = synth::grid_distortion_error(&est, &truth, grid_step)?;
            println!(
                "{}",
                serde_json::json!({
                    "grid_error_px": err,
                    "focal_error_pct": synth::eval_focal(est.intrinsics.focal, true_focal),
                })
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match main_inner(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
