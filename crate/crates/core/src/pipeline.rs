//! End-to-end orchestration: lift, filter, correspond, register and
//! optionally filter grasps, with a JSON report.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspond::{self, CorrespondError, CorrespondenceSet, MatchConfig};
use crate::filter::{self, FilterConfig, FilterError, StageStats};
use crate::geometry::{FeatureCloud, GeometryError, Label, RigidTransform, Vec3};
use crate::grasp::{self, HullError};
use crate::io::{self, archive, blob, IoError};
use crate::lift::LiftError;
use crate::register::{self, RegisterError, RegisterOptions, RegistrationResult};
use crate::scene::SceneBundle;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Config,
    Lift,
    Filter,
    Correspond,
    Register,
    Grasp,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "load",
            Stage::Config => "config",
            Stage::Lift => "lift",
            Stage::Filter => "filter",
            Stage::Correspond => "correspond",
            Stage::Register => "register",
            Stage::Grasp => "grasp",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Correspond(#[from] CorrespondError),
    #[error(transparent)]
    Register(#[from] RegisterError),
    #[error(transparent)]
    Hull(#[from] HullError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Error)]
#[error("stage {stage} failed ({context}): {source}")]
pub struct PipelineError {
    pub stage: Stage,
    pub context: String,
    #[source]
    pub source: StageError,
}

pub(crate) fn at<E: Into<StageError>>(stage: Stage, context: impl Into<String>) -> impl FnOnce(E) -> PipelineError {
    let context = context.into();
    move |e| PipelineError { stage, context, source: e.into() }
}

/// Resolved pipeline parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub use_filter: bool,
    pub k_layers: usize,
    pub eps: f64,
    pub min_pts: usize,
    pub s_min: usize,
    pub d_thr: f64,
    pub min_pairs: usize,
    pub spatial_gate: Option<f64>,
    pub scale_align: bool,
    pub trim_fraction: Option<f64>,
    pub margin: f64,
    pub filter_grasps: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let f = FilterConfig::default();
        let m = MatchConfig::default();
        let r = RegisterOptions::default();
        Self {
            seed: f.seed,
            use_filter: true,
            k_layers: f.k_layers,
            eps: f.eps,
            min_pts: f.min_pts,
            s_min: f.s_min,
            d_thr: m.d_thr,
            min_pairs: m.min_pairs,
            spatial_gate: m.spatial_gate,
            scale_align: r.scale_align,
            trim_fraction: r.trim_fraction,
            margin: grasp::DEFAULT_MARGIN,
            filter_grasps: true,
        }
    }
}

/// Partial configuration, as read from a config file or collected from
/// command-line flags. Unset fields fall through to the next source.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub use_filter: Option<bool>,
    pub k_layers: Option<usize>,
    pub eps: Option<f64>,
    pub min_pts: Option<usize>,
    pub s_min: Option<usize>,
    pub d_thr: Option<f64>,
    pub min_pairs: Option<usize>,
    pub spatial_gate: Option<f64>,
    pub scale_align: Option<bool>,
    pub trim_fraction: Option<f64>,
    pub margin: Option<f64>,
    pub filter_grasps: Option<bool>,
}

impl ConfigOverrides {
    pub fn apply(&self, base: PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed.unwrap_or(base.seed),
            use_filter: self.use_filter.unwrap_or(base.use_filter),
            k_layers: self.k_layers.unwrap_or(base.k_layers),
            eps: self.eps.unwrap_or(base.eps),
            min_pts: self.min_pts.unwrap_or(base.min_pts),
            s_min: self.s_min.unwrap_or(base.s_min),
            d_thr: self.d_thr.unwrap_or(base.d_thr),
            min_pairs: self.min_pairs.unwrap_or(base.min_pairs),
            spatial_gate: self.spatial_gate.or(base.spatial_gate),
            scale_align: self.scale_align.unwrap_or(base.scale_align),
            trim_fraction: self.trim_fraction.or(base.trim_fraction),
            margin: self.margin.unwrap_or(base.margin),
            filter_grasps: self.filter_grasps.unwrap_or(base.filter_grasps),
        }
    }
}

impl PipelineConfig {
    /// Command-line flags over the config file over built-in defaults.
    pub fn resolve(file: Option<&ConfigOverrides>, flags: &ConfigOverrides) -> PipelineConfig {
        let base = file.map_or(PipelineConfig::default(), |f| f.apply(PipelineConfig::default()));
        flags.apply(base)
    }

    pub fn load_file(path: &Path) -> Result<ConfigOverrides, IoError> {
        io::read_json(path)
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig { k_layers: self.k_layers, eps: self.eps, min_pts: self.min_pts, s_min: self.s_min, seed: self.seed }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig { d_thr: self.d_thr, min_pairs: self.min_pairs, spatial_gate: self.spatial_gate }
    }

    pub fn register_options(&self) -> RegisterOptions {
        RegisterOptions { scale_align: self.scale_align, trim_fraction: self.trim_fraction }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.filter_config().validate().map_err(|e| e.to_string())?;
        self.match_config().validate().map_err(|e| e.to_string())?;
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(format!("margin {} must be non-negative", self.margin));
        }
        if let Some(f) = self.trim_fraction {
            if !(0.0..0.9).contains(&f) {
                return Err(format!("trim_fraction {f} outside [0, 0.9)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub active: usize,
    pub passive: usize,
}

impl ObjectCounts {
    fn of(cloud: &FeatureCloud) -> Self {
        let n = |l| cloud.labels().iter().filter(|&&x| x == l).count();
        Self { active: n(Label::Active), passive: n(Label::Passive) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFilterStats {
    pub active: Option<StageStats>,
    pub passive: Option<StageStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub obs_lifted: ObjectCounts,
    pub edit_lifted: ObjectCounts,
    pub obs_filtered: ObjectCounts,
    pub edit_filtered: ObjectCounts,
    pub passive_pairs: usize,
    pub active_pairs: usize,
    pub obs_filter: StateFilterStats,
    pub edit_filter: StateFilterStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspSummary {
    pub candidates: usize,
    pub kept: usize,
    /// Input-order indices of the kept candidates.
    pub kept_indices: Vec<usize>,
    pub hull_vertices: usize,
    pub margin: f64,
}

/// Everything that must be byte-identical across runs on identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicReport {
    pub report_version: u32,
    pub config: PipelineConfig,
    pub t_a_world: RigidTransform,
    pub registration: RegistrationResult,
    pub counts: StageCounts,
    pub grasps: Option<GraspSummary>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub lift_ms: f64,
    pub filter_ms: f64,
    pub correspond_ms: f64,
    pub register_ms: f64,
    pub grasp_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub deterministic: DeterministicReport,
    pub timing: Timing,
}

/// Intermediate clouds, kept for dumps and plots.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub obs_lifted: FeatureCloud,
    pub edit_lifted: FeatureCloud,
    pub obs_filtered: FeatureCloud,
    pub edit_filtered: FeatureCloud,
    pub passive_pairs: CorrespondenceSet,
    pub active_pairs: CorrespondenceSet,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the hierarchical filter on each object of one state separately and
/// re-assembles the survivors, active first.
pub fn filter_state(
    cloud: &FeatureCloud,
    cfg: &FilterConfig,
    state: &str,
) -> Result<(FeatureCloud, StateFilterStats), PipelineError> {
    let mut kept = Vec::new();
    let mut stats = StateFilterStats { active: None, passive: None };
    for (label, name) in [(Label::Active, "active"), (Label::Passive, "passive")] {
        let part = cloud.with_label(label);
        let r = filter::hierarchical_filter(&part, cfg).map_err(at(Stage::Filter, format!("{state} {name} object")))?;
        match label {
            Label::Active => stats.active = Some(r.stage_stats),
            _ => stats.passive = Some(r.stage_stats),
        }
        kept.push(r.kept);
    }
    let out = FeatureCloud::concat(&[&kept[0], &kept[1]]).map_err(at(Stage::Filter, format!("{state} reassembly")))?;
    Ok((out, stats))
}

/// Runs every stage on two in-memory scenes.
pub fn run_scenes(obs: &SceneBundle, edit: &SceneBundle, cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let total = Instant::now();
    cfg.validate().map_err(|m| PipelineError { stage: Stage::Config, context: "configuration".into(), source: StageError::Config(m) })?;
    let mut timing = Timing::default();

    let t = Instant::now();
    let obs_lifted = obs.lift_objects().map_err(at(Stage::Lift, "observed scene"))?;
    let edit_lifted = edit.lift_objects().map_err(at(Stage::Lift, "edited scene"))?;
    timing.lift_ms = ms(t);

    let t = Instant::now();
    let fcfg = cfg.filter_config();
    let (obs_filtered, obs_filter, edit_filtered, edit_filter) = if cfg.use_filter {
        let (o, os) = filter_state(&obs_lifted, &fcfg, "observed")?;
        let (e, es) = filter_state(&edit_lifted, &fcfg, "edited")?;
        (o, os, e, es)
    } else {
        let none = || StateFilterStats { active: None, passive: None };
        (obs_lifted.clone(), none(), edit_lifted.clone(), none())
    };
    timing.filter_ms = ms(t);

    let t = Instant::now();
    let c_p = correspond::passive_pairs(&obs_filtered, &edit_filtered).map_err(at(Stage::Correspond, "passive pixel overlap"))?;
    let c_a = correspond::active_pairs(&obs_filtered, &edit_filtered, &cfg.match_config())
        .map_err(at(Stage::Correspond, "active feature matching"))?;
    timing.correspond_ms = ms(t);

    let t = Instant::now();
    let reg = register::register_pair(&obs_filtered, &edit_filtered, &c_p, &c_a, &obs.o2w, &cfg.register_options())
        .map_err(at(Stage::Register, format!("{} passive and {} active pairs", c_p.len(), c_a.len())))?;
    timing.register_ms = ms(t);

    let t = Instant::now();
    let grasps = match (&obs.grasps, cfg.filter_grasps) {
        (Some(records), true) if !records.is_empty() => Some(grasp_stage(records, &obs_filtered, &obs.o2w, &reg.t_a_world, cfg.margin)?),
        _ => None,
    };
    timing.grasp_ms = ms(t);
    timing.total_ms = ms(total);

    let counts = StageCounts {
        obs_lifted: ObjectCounts::of(&obs_lifted),
        edit_lifted: ObjectCounts::of(&edit_lifted),
        obs_filtered: ObjectCounts::of(&obs_filtered),
        edit_filtered: ObjectCounts::of(&edit_filtered),
        passive_pairs: c_p.len(),
        active_pairs: c_a.len(),
        obs_filter,
        edit_filter,
    };
    Ok(PipelineOutput {
        report: PipelineReport {
            deterministic: DeterministicReport {
                report_version: REPORT_VERSION,
                config: *cfg,
                t_a_world: reg.t_a_world,
                registration: reg,
                counts,
                grasps,
            },
            timing,
        },
        obs_lifted,
        edit_lifted,
        obs_filtered,
        edit_filtered,
        passive_pairs: c_p,
        active_pairs: c_a,
    })
}

/// World-frame passive points of a camera-frame cloud.
pub fn passive_world_points(cloud: &FeatureCloud, o2w: &RigidTransform) -> Vec<Vec3> {
    cloud.indices_with_label(Label::Passive).into_iter().map(|i| o2w.apply_point(&cloud.points()[i])).collect()
}

pub fn grasp_stage(
    records: &[grasp::GraspRecord],
    obs_filtered: &FeatureCloud,
    o2w: &RigidTransform,
    t_a: &RigidTransform,
    margin: f64,
) -> Result<GraspSummary, PipelineError> {
    let hull = grasp::passive_hull(&passive_world_points(obs_filtered, o2w)).map_err(at(Stage::Grasp, "passive hull"))?;
    let gripper = grasp::default_gripper();
    let cands: Vec<_> = records.iter().map(|r| r.to_candidate(&gripper)).collect();
    let keep = grasp::classify_grasps(&cands, t_a, &hull, margin);
    let kept_indices: Vec<usize> = keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
    Ok(GraspSummary {
        candidates: cands.len(),
        kept: kept_indices.len(),
        kept_indices,
        hull_vertices: hull.vertices().len(),
        margin,
    })
}

/// Names of the per-stage cloud dumps.
pub const DUMP_FILES: [&str; 4] = ["obs_lifted.cloud", "edit_lifted.cloud", "obs_filtered.cloud", "edit_filtered.cloud"];

pub fn write_dumps(out: &PipelineOutput, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::from_io(dir, e)).map_err(at(Stage::Write, "dump directory"))?;
    let clouds = [&out.obs_lifted, &out.edit_lifted, &out.obs_filtered, &out.edit_filtered];
    for (name, cloud) in DUMP_FILES.iter().zip(clouds) {
        blob::write_cloud(&dir.join(name), cloud).map_err(at(Stage::Write, *name))?;
    }
    let pairs = serde_json::json!({ "passive": out.passive_pairs, "active": out.active_pairs });
    io::write_json(&dir.join("correspondences.json"), &pairs).map_err(at(Stage::Write, "correspondences"))
}

/// Loads both archives and an optional config file, then runs the pipeline.
/// `flags` take precedence over the file.
pub fn run_pipeline(
    obs_path: &Path,
    edit_path: &Path,
    config_path: Option<&Path>,
    flags: &ConfigOverrides,
) -> Result<PipelineOutput, PipelineError> {
    let file = config_path
        .map(|p| PipelineConfig::load_file(p).map_err(at(Stage::Config, p.display().to_string())))
        .transpose()?;
    let cfg = PipelineConfig::resolve(file.as_ref(), flags);
    let obs = archive::load_scene(obs_path).map_err(at(Stage::Load, display(obs_path)))?;
    let edit = archive::load_scene(edit_path).map_err(at(Stage::Load, display(edit_path)))?;
    run_scenes(&obs, &edit, &cfg)
}

fn display(p: &Path) -> String {
    PathBuf::from(p).display().to_string()
}
