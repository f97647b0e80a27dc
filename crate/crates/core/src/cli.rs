//! Command-line front end. Every subcommand writes `report.json` (the
//! deterministic part) and `timing.json` into its output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use image::{ImageFormat, Rgb, RgbImage};
use serde::Serialize;
use thiserror::Error;

use crate::correspond::{self, CorrespondenceSet};
use crate::geometry::{FeatureCloud, Label, RigidTransform, Vec3};
use crate::io::{self, archive, blob, IoError};
use crate::lift::{self, FileDepthSource};
use crate::pipeline::{
    self, at, filter_state, ConfigOverrides, GraspSummary, ObjectCounts, PipelineConfig, PipelineError, Stage,
    StageError, StateFilterStats,
};
use crate::register::{self, RegistrationResult};
use crate::synth::{self, NoiseSpec, SynthError, SynthOptions, Task};

pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CLOUD_FILE: &str = "cloud.bin";
pub const PAIRS_FILE: &str = "correspondences.json";
pub const DUMP_DIR: &str = "dump";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("plot: {0}")]
    Plot(String),
}

#[derive(Debug, Parser)]
#[command(name = "editreg", version, about = "Inter-object transforms from an observed and an edited RGB-D scene")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Pipeline parameters shared by every stage command. Flags override the
/// config file, which overrides the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Tuning {
    /// JSON config file with any subset of the pipeline parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k_layers: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub min_pts: Option<usize>,
    #[arg(long)]
    pub s_min: Option<usize>,
    #[arg(long)]
    pub d_thr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Skip the hierarchical filter.
    #[arg(long)]
    pub no_filter: bool,
    /// Keep the decoupled active scale instead of unifying it with the passive one.
    #[arg(long)]
    pub no_scale_align: bool,
}

impl Tuning {
    pub fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            seed: self.seed,
            k_layers: self.k_layers,
            eps: self.eps,
            min_pts: self.min_pts,
            s_min: self.s_min,
            d_thr: self.d_thr,
            margin: self.margin,
            use_filter: self.no_filter.then_some(false),
            scale_align: self.no_scale_align.then_some(false),
            ..Default::default()
        }
    }

    pub fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let file = self
            .config
            .as_deref()
            .map(|p| PipelineConfig::load_file(p).map_err(at(Stage::Config, p.display().to_string())))
            .transpose()?;
        let cfg = PipelineConfig::resolve(file.as_ref(), &self.overrides());
        cfg.validate()
            .map_err(|m| PipelineError { stage: Stage::Config, context: "configuration".into(), source: StageError::Config(m) })?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic observed/edited scene pair with ground truth.
    Synth {
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        depth_sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        flying_edge_fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        feature_noise: f64,
        /// Camera yaw about the scene centre, degrees.
        #[arg(long, default_value_t = 0.0)]
        yaw: f64,
        /// Rescale the edited active object about the centroid of its visible part.
        #[arg(long, default_value_t = 1.0)]
        active_scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift a scene archive's object pixels to a point cloud.
    Lift {
        #[arg(long)]
        scene: PathBuf,
        /// Depth blob predicted by an estimator for the cropped scene; when
        /// given, the scene is lifted through the crop plan instead of its
        /// own depth.
        #[arg(long)]
        depth_prediction: Option<PathBuf>,
        /// Context margin around the mask union, in pixels.
        #[arg(long, default_value_t = lift::DEFAULT_MARGIN)]
        crop_margin: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hierarchical flying-edge filter, per object.
    Filter {
        #[arg(long)]
        cloud: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
    /// Passive pixel pairs and active feature pairs between two clouds.
    Correspond {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        edit: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
    /// Similarity registration of both objects and the world-frame transform.
    Register {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        edit: PathBuf,
        /// Output of `correspond`.
        #[arg(long)]
        pairs: PathBuf,
        /// Observed scene archive, for its camera-to-world transform.
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the grasps whose gripper clears the passive hull at the goal.
    GraspFilter {
        /// Observed scene archive holding the grasp candidates.
        #[arg(long)]
        scene: PathBuf,
        /// Filtered observed cloud.
        #[arg(long)]
        cloud: PathBuf,
        /// Report written by `register` (or `pipeline`).
        #[arg(long)]
        registration: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage end to end.
    Pipeline {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        edit: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        /// Also write per-stage clouds and correspondences under `<out>/dump`.
        #[arg(long)]
        dump: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Static PNG overlays of each stage.
    Plot {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        edit: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Serialize)]
struct Timing {
    total_ms: f64,
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::from_io(dir, e)).map_err(at(Stage::Write, dir.display().to_string()))
}

fn write_report<T: Serialize>(out: &Path, report: &T, started: Instant) -> Result<(), PipelineError> {
    io::write_json(&out.join(REPORT_FILE), report).map_err(at(Stage::Write, REPORT_FILE))?;
    let timing = Timing { total_ms: started.elapsed().as_secs_f64() * 1e3 };
    io::write_json(&out.join(TIMING_FILE), &timing).map_err(at(Stage::Write, TIMING_FILE))
}

fn read_cloud(path: &Path, stage: Stage) -> Result<FeatureCloud, PipelineError> {
    blob::read_cloud(path).map_err(at(stage, path.display().to_string()))
}

#[derive(Debug, Serialize)]
struct SynthReport {
    ground_truth_file: &'static str,
    task: Task,
    seed: u64,
    noise: NoiseSpec,
    options: SynthOptions,
    gt_motion: RigidTransform,
    band_size: usize,
    flying_edges: usize,
    obs_objects: ObjectCounts,
    edit_objects: ObjectCounts,
    grasp_candidates: usize,
}

#[derive(Debug, Serialize)]
struct LiftReport {
    scene: String,
    via_depth_prediction: bool,
    feature_dim: usize,
    image_size: (usize, usize),
    counts: ObjectCounts,
}

#[derive(Debug, Serialize)]
struct FilterReport {
    config: PipelineConfig,
    input: ObjectCounts,
    kept: ObjectCounts,
    stats: StateFilterStats,
}

#[derive(Debug, Serialize)]
struct CorrespondReport {
    config: PipelineConfig,
    passive_pairs: usize,
    active_pairs: usize,
    active_mean_feat_dist: f64,
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct PairsFile {
    passive: CorrespondenceSet,
    active: CorrespondenceSet,
}

#[derive(Debug, Serialize)]
struct RegisterReport {
    config: PipelineConfig,
    t_a_world: RigidTransform,
    registration: RegistrationResult,
}

#[derive(Debug, Serialize)]
struct GraspReport {
    config: PipelineConfig,
    t_a_world: RigidTransform,
    grasps: GraspSummary,
}

#[derive(Debug, Serialize)]
struct PlotReport {
    config: PipelineConfig,
    images: Vec<PlotImage>,
}

#[derive(Debug, Serialize)]
struct PlotImage {
    file: String,
    width: u32,
    height: u32,
    drawn: usize,
}

fn counts(cloud: &FeatureCloud) -> ObjectCounts {
    let n = |l| cloud.labels().iter().filter(|&&x| x == l).count();
    ObjectCounts { active: n(Label::Active), passive: n(Label::Passive) }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let started = Instant::now();
    match cli.command {
        Command::Synth { task, seed, depth_sigma, flying_edge_fraction, feature_noise, yaw, active_scale, out } => {
            let noise = NoiseSpec { depth_sigma, flying_edge_fraction, feature_noise };
            let options = SynthOptions { yaw_deg: yaw, active_scale, ..SynthOptions::default() };
            let scene = synth::generate_with(task, noise, seed, options)?;
            create_dir(&out)?;
            scene.save(&out)?;
            let lift = |s: &crate::scene::SceneBundle| s.lift_objects().map(|c| counts(&c));
            let report = SynthReport {
                ground_truth_file: synth::GROUND_TRUTH_FILE,
                task,
                seed,
                noise,
                options,
                gt_motion: scene.gt_motion,
                band_size: scene.band_size,
                flying_edges: scene.flying_edge_count(),
                obs_objects: lift(&scene.obs).map_err(at(Stage::Lift, "observed scene"))?,
                edit_objects: lift(&scene.edit).map_err(at(Stage::Lift, "edited scene"))?,
                grasp_candidates: scene.obs.grasps.as_ref().map_or(0, |g| g.len()),
            };
            write_report(&out, &report, started)?;
        }
        Command::Lift { scene, depth_prediction, crop_margin, out } => {
            let bundle = archive::load_scene(&scene).map_err(at(Stage::Load, scene.display().to_string()))?;
            let cloud = match &depth_prediction {
                None => bundle.lift_objects(),
                Some(p) => {
                    let mut src = FileDepthSource::open(p)
                        .map_err(|e| IoError::invariant(p, "depth", e.0))
                        .map_err(at(Stage::Load, p.display().to_string()))?;
                    lift::lift_edited(&bundle.image, &bundle.masks, &mut src, &bundle.intr, &bundle.features, crop_margin)
                }
            }
            .map_err(at(Stage::Lift, scene.display().to_string()))?;
            create_dir(&out)?;
            blob::write_cloud(&out.join(CLOUD_FILE), &cloud).map_err(at(Stage::Write, CLOUD_FILE))?;
            let report = LiftReport {
                scene: scene.display().to_string(),
                via_depth_prediction: depth_prediction.is_some(),
                feature_dim: cloud.feature_dim(),
                image_size: cloud.image_size(),
                counts: counts(&cloud),
            };
            write_report(&out, &report, started)?;
        }
        Command::Filter { cloud, tuning, out } => {
            let cfg = tuning.resolve()?;
            let input = read_cloud(&cloud, Stage::Load)?;
            let (kept, stats) = if cfg.use_filter {
                filter_state(&input, &cfg.filter_config(), "input")?
            } else {
                (input.clone(), StateFilterStats { active: None, passive: None })
            };
            create_dir(&out)?;
            blob::write_cloud(&out.join(CLOUD_FILE), &kept).map_err(at(Stage::Write, CLOUD_FILE))?;
            let report = FilterReport { config: cfg, input: counts(&input), kept: counts(&kept), stats };
            write_report(&out, &report, started)?;
        }
        Command::Correspond { obs, edit, tuning, out } => {
            let cfg = tuning.resolve()?;
            let (o, e) = (read_cloud(&obs, Stage::Load)?, read_cloud(&edit, Stage::Load)?);
            let passive = correspond::passive_pairs(&o, &e).map_err(at(Stage::Correspond, "passive pixel overlap"))?;
            let active = correspond::active_pairs(&o, &e, &cfg.match_config())
                .map_err(at(Stage::Correspond, "active feature matching"))?;
            create_dir(&out)?;
            let report = CorrespondReport {
                config: cfg,
                passive_pairs: passive.len(),
                active_pairs: active.len(),
                active_mean_feat_dist: active.feat_dist.iter().sum::<f64>() / active.len() as f64,
            };
            io::write_json(&out.join(PAIRS_FILE), &PairsFile { passive, active }).map_err(at(Stage::Write, PAIRS_FILE))?;
            write_report(&out, &report, started)?;
        }
        Command::Register { obs, edit, pairs, scene, tuning, out } => {
            let cfg = tuning.resolve()?;
            let (o, e) = (read_cloud(&obs, Stage::Load)?, read_cloud(&edit, Stage::Load)?);
            let p: PairsFile = io::read_json(&pairs).map_err(at(Stage::Load, pairs.display().to_string()))?;
            let bundle = archive::load_scene(&scene).map_err(at(Stage::Load, scene.display().to_string()))?;
            let reg = register::register_pair(&o, &e, &p.passive, &p.active, &bundle.o2w, &cfg.register_options())
                .map_err(at(Stage::Register, format!("{} passive and {} active pairs", p.passive.len(), p.active.len())))?;
            create_dir(&out)?;
            write_report(&out, &RegisterReport { config: cfg, t_a_world: reg.t_a_world, registration: reg }, started)?;
        }
        Command::GraspFilter { scene, cloud, registration, tuning, out } => {
            let cfg = tuning.resolve()?;
            let bundle = archive::load_scene(&scene).map_err(at(Stage::Load, scene.display().to_string()))?;
            let filtered = read_cloud(&cloud, Stage::Load)?;
            let t_a = read_t_a_world(&registration)?;
            let records = bundle.grasps.as_deref().unwrap_or(&[]);
            let grasps = pipeline::grasp_stage(records, &filtered, &bundle.o2w, &t_a, cfg.margin)?;
            create_dir(&out)?;
            write_report(&out, &GraspReport { config: cfg, t_a_world: t_a, grasps }, started)?;
        }
        Command::Pipeline { obs, edit, tuning, dump, out } => {
            let cfg = tuning.resolve()?;
            let o = archive::load_scene(&obs).map_err(at(Stage::Load, obs.display().to_string()))?;
            let e = archive::load_scene(&edit).map_err(at(Stage::Load, edit.display().to_string()))?;
            let result = pipeline::run_scenes(&o, &e, &cfg)?;
            create_dir(&out)?;
            if dump {
                pipeline::write_dumps(&result, &out.join(DUMP_DIR))?;
            }
            io::write_json(&out.join(REPORT_FILE), &result.report.deterministic).map_err(at(Stage::Write, REPORT_FILE))?;
            io::write_json(&out.join(TIMING_FILE), &result.report.timing).map_err(at(Stage::Write, TIMING_FILE))?;
        }
        Command::Plot { obs, edit, tuning, out } => {
            let cfg = tuning.resolve()?;
            let o = archive::load_scene(&obs).map_err(at(Stage::Load, obs.display().to_string()))?;
            let e = archive::load_scene(&edit).map_err(at(Stage::Load, edit.display().to_string()))?;
            let result = pipeline::run_scenes(&o, &e, &cfg)?;
            create_dir(&out)?;
            let images = plot_stages(&result, &o.o2w, &out)?;
            write_report(&out, &PlotReport { config: cfg, images }, started)?;
        }
    }
    Ok(())
}

/// `t_a_world` from any report that carries one at the top level.
fn read_t_a_world(path: &Path) -> Result<RigidTransform, PipelineError> {
    let v: serde_json::Value = io::read_json(path).map_err(at(Stage::Load, path.display().to_string()))?;
    let t = v.get("t_a_world").cloned().unwrap_or(serde_json::Value::Null);
    serde_json::from_value(t)
        .map_err(|e| IoError::invariant(path, "t_a_world", e.to_string()))
        .map_err(at(Stage::Load, path.display().to_string()))
}

const ACTIVE_RGB: Rgb<u8> = Rgb([220, 60, 40]);
const PASSIVE_RGB: Rgb<u8> = Rgb([40, 90, 220]);
const REMOVED_RGB: Rgb<u8> = Rgb([250, 220, 0]);
const GOAL_RGB: Rgb<u8> = Rgb([30, 170, 60]);
const TOP_SIZE: u32 = 512;

fn save_png(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png).map_err(|e| CliError::Plot(e.to_string()))?;
    std::fs::write(path, bytes.into_inner()).map_err(|e| IoError::from_io(path, e))?;
    Ok(())
}

/// Image-plane overlay: kept points by label, filtered-out points in yellow.
fn overlay(lifted: &FeatureCloud, filtered: &FeatureCloud) -> (RgbImage, usize) {
    let (w, h) = lifted.image_size();
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([245, 245, 245]));
    for &(r, c) in lifted.pixel_index() {
        img.put_pixel(c, r, REMOVED_RGB);
    }
    for (&(r, c), &l) in filtered.pixel_index().iter().zip(filtered.labels()) {
        img.put_pixel(c, r, if l == Label::Active { ACTIVE_RGB } else { PASSIVE_RGB });
    }
    (img, lifted.len())
}

/// Top-down world view of the observed objects and the active object moved
/// by `t_a_world`.
fn top_down(obs: &FeatureCloud, o2w: &RigidTransform, t_a: &RigidTransform) -> (RgbImage, usize) {
    let mut layers: Vec<(Vec3, Rgb<u8>)> = Vec::new();
    for (p, &l) in obs.points().iter().zip(obs.labels()) {
        let w = o2w.apply_point(p);
        layers.push((w, if l == Label::Active { ACTIVE_RGB } else { PASSIVE_RGB }));
        if l == Label::Active {
            layers.push((t_a.apply_point(&w), GOAL_RGB));
        }
    }
    let mut img = RgbImage::from_pixel(TOP_SIZE, TOP_SIZE, Rgb([255, 255, 255]));
    if layers.is_empty() {
        return (img, 0);
    }
    let (mut lo, mut hi) = (layers[0].0, layers[0].0);
    for (p, _) in &layers {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let span = (hi.x - lo.x).max(hi.y - lo.y).max(1e-6) * 1.1;
    let mid = (lo + hi) / 2.0;
    let px = |v: f64, m: f64| (((v - m) / span + 0.5) * (TOP_SIZE - 1) as f64).round().clamp(0.0, (TOP_SIZE - 1) as f64) as u32;
    for (p, color) in &layers {
        img.put_pixel(px(p.x, mid.x), TOP_SIZE - 1 - px(p.y, mid.y), *color);
    }
    (img, layers.len())
}

fn plot_stages(result: &pipeline::PipelineOutput, o2w: &RigidTransform, out: &Path) -> Result<Vec<PlotImage>, CliError> {
    let t_a = result.report.deterministic.t_a_world;
    let views = [
        ("obs_filter.png", overlay(&result.obs_lifted, &result.obs_filtered)),
        ("edit_filter.png", overlay(&result.edit_lifted, &result.edit_filtered)),
        ("world_top.png", top_down(&result.obs_filtered, o2w, &t_a)),
    ];
    let mut images = Vec::new();
    for (name, (img, drawn)) in views {
        save_png(&img, &out.join(name))?;
        images.push(PlotImage { file: name.to_string(), width: img.width(), height: img.height(), drawn });
    }
    Ok(images)
}
