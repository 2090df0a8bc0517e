//! End-to-end run: frames → tracks → initialization → bundle adjustment →
//! plane sweep → depth map on disk.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ba::{self, BaOptions, BaReport, BaState};
use crate::error::{Error, Result};
use crate::features::{build_tracks, TrackerParams};
use crate::image::GrayImage;
use crate::io;
use crate::sweep::{self, DepthMap};
use crate::synth::{self, GroundTruth, InitMode, SceneConfig};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "SMD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Input {
    /// Directory of frames, or a path prefix (see [`io::frame_paths`]).
    Frames(PathBuf),
    /// Rendered synthetic scene.
    Synthetic(SceneConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: Input,
    pub output_dir: PathBuf,
    pub grid_size: usize,
    pub n_planes: usize,
    pub sweep_downscale: usize,
    pub median_radius: usize,
    pub init_mode: InitMode,
    pub ba: BaOptions,
    pub tracker: TrackerParams,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(input: Input, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            input,
            output_dir: output_dir.into(),
            grid_size: 80,
            n_planes: 128,
            sweep_downscale: 2,
            median_radius: sweep::MEDIAN_RADIUS,
            init_mode: InitMode::Rank1,
            ba: BaOptions::default(),
            tracker: TrackerParams::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.grid_size < 8 {
            return bad("grid-size must be >= 8");
        }
        if self.n_planes == 0 {
            return bad("n-planes must be >= 1");
        }
        if self.sweep_downscale == 0 {
            return bad("sweep-downscale must be >= 1");
        }
        if self.median_radius == 0 {
            return bad("median-radius must be >= 1");
        }
        if self.ba.max_iter == 0 {
            return bad("max-iter must be >= 1");
        }
        Ok(())
    }

    /// Applies one `key = value` setting; keys are the kebab-case flag names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidParameter(format!("bad value {v:?} for {key}")))
        }
        match key {
            "input" => self.input = Input::Frames(PathBuf::from(value)),
            "output-dir" => self.output_dir = PathBuf::from(value),
            "grid-size" => self.grid_size = parse(key, value)?,
            "n-planes" => self.n_planes = parse(key, value)?,
            "sweep-downscale" => self.sweep_downscale = parse(key, value)?,
            "median-radius" => self.median_radius = parse(key, value)?,
            "init-mode" => self.init_mode = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "max-iter" => self.ba.max_iter = parse(key, value)?,
            "ftol" => self.ba.ftol = parse(key, value)?,
            "xtol" => self.ba.xtol = parse(key, value)?,
            "huber-delta" => self.ba.delta = parse(key, value)?,
            "lambda0" => self.ba.lambda0 = parse(key, value)?,
            "window-radius" => self.tracker.window_radius = parse(key, value)?,
            "levels" => self.tracker.levels = parse(key, value)?,
            "min-response" => self.tracker.min_response = parse(key, value)?,
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "unknown config key {key:?}"
                )))
            }
        }
        Ok(())
    }

    /// Applies a config file of `key = value` lines; `#` starts a comment.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidParameter(format!("config line {}: expected key = value", n + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Replaces the seed with `SMD_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    fn tracker_params(&self) -> TrackerParams {
        TrackerParams {
            grid_size: self.grid_size,
            ..self.tracker
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Read,
    Features,
    Init,
    Ba,
    Sweep,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Read => "read",
            Stage::Features => "features",
            Stage::Init => "init",
            Stage::Ba => "ba",
            Stage::Sweep => "sweep",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub k1: f64,
    pub k2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub depth_pfm: PathBuf,
    pub depth_preview: PathBuf,
    pub report: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEval {
    pub focal_error_pct: f64,
    /// `None` when the estimated distortion is not invertible over the grid.
    pub grid_error_px: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub init_mode: InitMode,
    pub seed: u64,
    pub stages: Vec<StageTime>,
    pub total_seconds: f64,
    pub n_frames: usize,
    pub image_size: [usize; 2],
    pub feature_count: usize,
    pub ba: Option<BaReport>,
    pub calibration: Option<Calibration>,
    pub plane_range: Option<[f64; 2]>,
    pub n_planes: usize,
    pub depth_size: Option<[usize; 2]>,
    pub valid_pixels: usize,
    pub synthetic: Option<SyntheticEval>,
    pub outputs: Outputs,
    pub error: Option<StageError>,
}

impl RunReport {
    /// Copy with every wall-clock field zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        r.total_seconds = 0.0;
        for s in &mut r.stages {
            s.seconds = 0.0;
        }
        if let Some(b) = &mut r.ba {
            b.wall_time_s = 0.0;
        }
        r
    }

    pub fn stage_seconds(&self, stage: Stage) -> Option<f64> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .map(|s| s.seconds)
    }
}

/// A stage failed; the partial report has been written.
#[derive(Debug)]
pub struct RunFailure {
    pub stage: Stage,
    pub error: Error,
    pub report: Box<RunReport>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for RunFailure {}

impl RunFailure {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

/// Final artifacts of a successful run, kept in memory.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub state: BaState,
    pub depth: DepthMap,
    pub planes: Vec<f64>,
}

type StageResult<T> = std::result::Result<T, (Stage, Error)>;

fn timed<T>(report: &mut RunReport, stage: Stage, f: impl FnOnce() -> Result<T>) -> StageResult<T> {
    let t = Instant::now();
    let out = f();
    report.stages.push(StageTime {
        stage,
        seconds: t.elapsed().as_secs_f64(),
    });
    out.map_err(|e| (stage, e))
}

fn empty_report(cfg: &PipelineConfig) -> RunReport {
    RunReport {
        init_mode: cfg.init_mode,
        seed: cfg.seed,
        stages: Vec::new(),
        total_seconds: 0.0,
        n_frames: 0,
        image_size: [0, 0],
        feature_count: 0,
        ba: None,
        calibration: None,
        plane_range: None,
        n_planes: cfg.n_planes,
        depth_size: None,
        valid_pixels: 0,
        synthetic: None,
        outputs: Outputs {
            depth_pfm: cfg.output_dir.join("depth.pfm"),
            depth_preview: cfg.output_dir.join("depth_preview.png"),
            report: cfg.output_dir.join("report.json"),
        },
        error: None,
    }
}

fn read_input(cfg: &PipelineConfig) -> Result<(Vec<GrayImage>, Option<GroundTruth>)> {
    match &cfg.input {
        Input::Frames(path) => Ok((io::load_frames(path)?, None)),
        Input::Synthetic(scene) => {
            let scene = synth::generate(&SceneConfig {
                seed: cfg.seed,
                render_images: true,
                ..scene.clone()
            })?;
            let images = scene
                .images
                .ok_or_else(|| Error::InvalidParameter("scene was not rendered".into()))?;
            Ok((images, Some(scene.truth)))
        }
    }
}

fn execute(cfg: &PipelineConfig, report: &mut RunReport) -> StageResult<RunOutput> {
    cfg.validate().map_err(|e| (Stage::Read, e))?;
    let (frames, truth) = timed(report, Stage::Read, || read_input(cfg))?;
    report.n_frames = frames.len();
    report.image_size = [frames[0].width(), frames[0].height()];

    let tracks = timed(report, Stage::Features, || {
        build_tracks(&frames, &cfg.tracker_params())
    })?;
    report.feature_count = tracks.m_points();

    let init = timed(report, Stage::Init, || {
        synth::initial_state(&tracks, cfg.init_mode)
    })?;

    let (state, ba_report) = timed(report, Stage::Ba, || ba::solve(&init, &tracks, &cfg.ba))?;
    report.ba = Some(ba_report);
    report.calibration = Some(Calibration {
        focal: state.focal,
        principal_point: state.intrinsics.principal_point,
        k1: state.distortion.k1,
        k2: state.distortion.k2,
    });
    if let Some(truth) = &truth {
        report.synthetic = Some(SyntheticEval {
            focal_error_pct: synth::eval_focal(state.focal, truth.camera.intrinsics.focal),
            grid_error_px: synth::grid_distortion_error(
                &state.camera(),
                &truth.camera,
                synth::BENCH_GRID_STEP,
            )
            .ok(),
        });
    }

    let (depth, planes) = timed(report, Stage::Sweep, || dense(cfg, &frames, &state))?;
    report.plane_range = Some([planes[0], planes[planes.len() - 1]]);
    report.depth_size = Some([depth.width, depth.height]);
    report.valid_pixels = depth.valid_count();
    Ok(RunOutput {
        report: report.clone(),
        state,
        depth,
        planes,
    })
}

/// Plane sweep at `1/sweep_downscale` resolution, selection and filtering.
pub fn dense(
    cfg: &PipelineConfig,
    frames: &[GrayImage],
    state: &BaState,
) -> Result<(DepthMap, Vec<f64>)> {
    let (lo, hi) = sweep::plane_range(&state.omegas)?;
    let planes = sweep::sample_planes(lo, hi, cfg.n_planes)?;
    let scaled: Vec<GrayImage> = frames
        .iter()
        .map(|f| f.downscale(cfg.sweep_downscale))
        .collect();
    let mut camera = state.camera();
    camera.intrinsics = camera.intrinsics.downscaled(cfg.sweep_downscale);
    let volume = sweep::sweep(&scaled[0], &scaled[1..], &camera, &state.poses, &planes)?;
    let raw = sweep::winner_take_all(&volume, &planes)?;
    Ok((sweep::median_refine(&raw, cfg.median_radius)?, planes))
}

fn write_outputs(out: &RunOutput) -> Result<()> {
    io::write_pfm(&out.depth, &out.report.outputs.depth_pfm)?;
    io::write_preview(&out.depth, &out.report.outputs.depth_preview)?;
    Ok(())
}

fn write_report(report: &RunReport) -> Result<()> {
    fs::write(
        &report.outputs.report,
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    Ok(())
}

/// Runs the pipeline and writes `depth.pfm`, `depth_preview.png` and
/// `report.json` to the output directory. On failure the report names the
/// failing stage and is still written when possible.
pub fn run(cfg: &PipelineConfig) -> std::result::Result<RunOutput, RunFailure> {
    let start = Instant::now();
    let mut report = empty_report(cfg);
    let fail = |mut report: RunReport, stage: Stage, error: Error| {
        report.total_seconds = start.elapsed().as_secs_f64();
        report.error = Some(StageError {
            stage,
            message: error.to_string(),
            exit_code: error.exit_code(),
        });
        let _ = write_report(&report);
        RunFailure {
            stage,
            error,
            report: Box::new(report),
        }
    };
    if let Err(e) = fs::create_dir_all(&cfg.output_dir) {
        return Err(fail(report, Stage::Read, e.into()));
    }
    let mut out = match execute(cfg, &mut report) {
        Ok(out) => out,
        Err((stage, e)) => return Err(fail(report, stage, e)),
    };
    if let Err(e) = write_outputs(&out) {
        return Err(fail(out.report, Stage::Sweep, e));
    }
    out.report.total_seconds = start.elapsed().as_secs_f64();
    if let Err(e) = write_report(&out.report) {
        return Err(fail(out.report, Stage::Sweep, e));
    }
    Ok(out)
}

/// Parses the `report.json` of a run.
pub fn read_report(path: &Path) -> Result<RunReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_config_text() {
        let mut cfg = PipelineConfig::new(Input::Frames("frames".into()), "out");
        assert_eq!(
            (cfg.grid_size, cfg.n_planes, cfg.sweep_downscale),
            (80, 128, 2)
        );
        assert_eq!(cfg.init_mode, InitMode::Rank1);
        cfg.apply_config_text(
            "# comment\nn-planes = 64\ninit-mode=flat\n\nmax-iter = 50 # trailing\n",
        )
        .unwrap();
        assert_eq!(
            (cfg.n_planes, cfg.init_mode, cfg.ba.max_iter),
            (64, InitMode::Flat, 50)
        );
        assert!(cfg.apply_config_text("bogus = 1").is_err());
        assert!(cfg.apply_config_text("n-planes 3").is_err());
        assert!(cfg.apply_config_text("n-planes = x").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = PipelineConfig::new(Input::Frames("f".into()), "o");
        assert!(cfg.validate().is_ok());
        cfg.grid_size = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn timing_fields_are_cleared() {
        let cfg = PipelineConfig::new(Input::Frames("f".into()), "o");
        let mut r = empty_report(&cfg);
        r.total_seconds = 3.0;
        r.stages.push(StageTime {
            stage: Stage::Read,
            seconds: 1.0,
        });
        let z = r.without_timing();
        assert_eq!(z.total_seconds, 0.0);
        assert_eq!(z.stages[0].seconds, 0.0);
        assert_eq!(Stage::Ba.to_string(), "ba");
    }
}
