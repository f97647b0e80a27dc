//! Deterministic synthetic scene pairs with exact ground truth.
//!
//! Each scene holds an active and a passive object on a table, rendered by
//! ray casting boxes, cylinders and rings from a pinhole camera. The edited
//! state is built by moving the observed active points with the true motion
//! and splatting them back into the image with a z-buffer, so in a
//! noise-free scene every edited active point is exactly the image of an
//! observed one. The passive object and the table do not move.
//!
//! Features are 32-D: an object embedding spread over eight dimensions plus
//! six smooth harmonics of the point's object-local coordinates.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, FeatureCloud, Mask, RigidTransform, Vec3};
use crate::grasp::GraspRecord;
use crate::io::{self, archive, IoError};
use crate::lift::{DepthMap, FeatureMap, ImageFrame, ObjectMasks, PointMap};
use crate::linalg::axis_angle;
use crate::scene::SceneBundle;

pub const FEATURE_DIM: usize = 32;
pub const DEFAULT_SIZE: usize = 256;
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// fx = fy = this times the image width (320 px at 256).
const FOCAL_PER_WIDTH: f64 = 1.25;
const CAMERA_DISTANCE: f64 = 0.6;
const CAMERA_ELEVATION_DEG: f64 = 40.0;

const EMBED_DIMS: usize = 8;
const HARMONIC_OFFSET: usize = 24;
const HARMONIC_WEIGHT: f64 = 0.5;
/// Half-width of the phase range used for Cartesian harmonics.
const PHASE_SPAN: f64 = 0.35;
/// Weight of the azimuth pair in the ring and cylinder harmonics.
const AZIMUTH_WEIGHT: f64 = 0.28;

/// A neighbour this much deeper marks a silhouette pixel.
const BAND_DEPTH_JUMP: f64 = 0.03;
const FLYING_PUSH: (f64, f64) = (0.004, 0.015);
const GRASPS_PER_SCENE: usize = 100;

const SLOT_ACTIVE: u8 = 0;
const SLOT_PASSIVE: u8 = 1;
const SLOT_TABLE: u8 = 2;
const NO_HIT: u8 = u8::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid noise specification: {0}")]
    InvalidNoiseSpec(String),
    #[error("invalid generator options: {0}")]
    InvalidOptions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Insertion,
    Covering,
    Stacking,
    Assembly,
    Articulated,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Insertion, Task::Covering, Task::Stacking, Task::Assembly, Task::Articulated];

    pub fn name(self) -> &'static str {
        match self {
            Task::Insertion => "insertion",
            Task::Covering => "covering",
            Task::Stacking => "stacking",
            Task::Assembly => "assembly",
            Task::Articulated => "articulated",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task '{s}' (expected one of insertion, covering, stacking, assembly, articulated)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of depth noise along each pixel ray (meters).
    pub depth_sigma: f64,
    /// Fraction of silhouette-band pixels turned into flying-edge points.
    pub flying_edge_fraction: f64,
    /// Norm of the additive feature noise relative to the unit feature.
    pub feature_noise: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidNoiseSpec(m));
        for (name, v) in [
            ("depth_sigma", self.depth_sigma),
            ("flying_edge_fraction", self.flying_edge_fraction),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.flying_edge_fraction > 1.0 {
            return bad(format!("flying_edge_fraction = {} exceeds 1", self.flying_edge_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Camera yaw about the world vertical through the scene centre (degrees).
    pub yaw_deg: f64,
    /// Scale applied to the edited active points about their centroid.
    pub active_scale: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { yaw_deg: 0.0, active_scale: 1.0, width: DEFAULT_SIZE, height: DEFAULT_SIZE }
    }
}

impl SynthOptions {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidOptions(m));
        if !(self.yaw_deg.is_finite() && self.yaw_deg.abs() <= 360.0) {
            return bad(format!("yaw {} outside [-360, 360]", self.yaw_deg));
        }
        if !(self.active_scale.is_finite() && self.active_scale > 0.0) {
            return bad(format!("active scale {} must be positive", self.active_scale));
        }
        if self.width < 32 || self.height < 32 {
            return bad(format!("image {}x{} is too small", self.width, self.height));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactLabel {
    Valid,
    FlyingEdge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub obs: SceneBundle,
    pub edit: SceneBundle,
    /// World-frame motion of the active object.
    pub gt_motion: RigidTransform,
    /// Pixels `(row, col)` that are passive in both states.
    pub gt_pixel_map: Vec<(u32, u32)>,
    /// Observed raster, row-major.
    pub artifact_labels: Vec<ArtifactLabel>,
    /// Number of observed silhouette-band pixels flying edges were drawn from.
    pub band_size: usize,
    /// Camera-frame point the edited active cloud is scaled about.
    pub active_scale_center: Vec3,
    pub seed: u64,
    pub task: Task,
    pub noise: NoiseSpec,
    pub options: SynthOptions,
}

impl SyntheticScene {
    /// Artifact label of each point of a cloud lifted from the observed state.
    pub fn artifact_labels_for(&self, cloud: &FeatureCloud) -> Vec<ArtifactLabel> {
        let w = self.obs.width();
        cloud.pixel_index().iter().map(|&(r, c)| self.artifact_labels[r as usize * w + c as usize]).collect()
    }

    pub fn flying_edge_count(&self) -> usize {
        self.artifact_labels.iter().filter(|&&l| l == ArtifactLabel::FlyingEdge).count()
    }

    /// The true active motion expressed in the observation camera frame.
    pub fn gt_motion_camera(&self) -> RigidTransform {
        let o2w = self.obs.o2w;
        o2w.inverse().compose(&self.gt_motion).compose(&o2w)
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let w = self.obs.width();
        GroundTruth {
            format_version: archive::FORMAT_VERSION,
            task: self.task,
            seed: self.seed,
            noise: self.noise,
            options: self.options,
            gt_motion: self.gt_motion,
            band_size: self.band_size,
            flying_edge_pixels: self
                .artifact_labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == ArtifactLabel::FlyingEdge)
                .map(|(i, _)| ((i / w) as u32, (i % w) as u32))
                .collect(),
            passive_pixels: self.gt_pixel_map.clone(),
            active_scale_center: self.active_scale_center.into(),
        }
    }

    /// Writes `obs/`, `edit/` and the ground-truth file under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), IoError> {
        archive::save_scene(&self.obs, &dir.join("obs"))?;
        archive::save_scene(&self.edit, &dir.join("edit"))?;
        io::write_json(&dir.join(GROUND_TRUTH_FILE), &self.ground_truth())
    }
}

/// Serialized ground truth of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub format_version: u32,
    pub task: Task,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub options: SynthOptions,
    pub gt_motion: RigidTransform,
    pub band_size: usize,
    pub flying_edge_pixels: Vec<(u32, u32)>,
    pub passive_pixels: Vec<(u32, u32)>,
    /// Edited-state camera-frame point the active object was scaled about.
    pub active_scale_center: [f64; 3],
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, IoError> {
    let gt: GroundTruth = io::read_json(path)?;
    if gt.format_version != archive::FORMAT_VERSION {
        return Err(IoError::FormatVersionMismatch {
            file: path.to_path_buf(),
            found: gt.format_version,
            expected: archive::FORMAT_VERSION,
        });
    }
    Ok(gt)
}

// ---------------------------------------------------------------------------
// Geometry primitives

#[derive(Debug, Clone, Copy)]
enum Shape {
    Box { half: Vec3 },
    /// Axis along local z.
    Cylinder { radius: f64, half_height: f64 },
    /// Thick annulus around local z.
    Ring { inner: f64, outer: f64, half_height: f64 },
    /// The plane z = 0.
    Plane,
}

const T_MIN: f64 = 1e-9;

fn side_roots(o: &Vec3, d: &Vec3, r: f64) -> Option<(f64, f64)> {
    let a = d.x * d.x + d.y * d.y;
    if a < 1e-18 {
        return None;
    }
    let b = 2.0 * (o.x * d.x + o.y * d.y);
    let c = o.x * o.x + o.y * o.y - r * r;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    Some(((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)))
}

impl Shape {
    /// Smallest positive ray parameter where `o + t d` meets the surface,
    /// with the outward surface normal there.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        let mut best: Option<(f64, Vec3)> = None;
        let mut offer = |t: f64, n: Vec3| {
            if t > T_MIN && best.is_none_or(|b| t < b.0) {
                best = Some((t, n));
            }
        };
        let radial = |t: f64, sign: f64| {
            let p = o + t * d;
            sign * Vec3::new(p.x, p.y, 0.0).normalize()
        };
        match *self {
            Shape::Box { half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut n0 = Vec3::zeros();
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[k] - o[k]) / d[k];
                    let b = (half[k] - o[k]) / d[k];
                    if a.min(b) > t0 {
                        t0 = a.min(b);
                        n0 = Vec3::zeros();
                        n0[k] = -d[k].signum();
                    }
                    t1 = t1.min(a.max(b));
                }
                if t0 <= t1 {
                    offer(t0, n0);
                }
            }
            Shape::Cylinder { radius, half_height } => {
                if let Some((a, b)) = side_roots(o, d, radius) {
                    for t in [a, b] {
                        if (o.z + t * d.z).abs() <= half_height {
                            offer(t, radial(t, 1.0));
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    for zc in [-half_height, half_height] {
                        let t = (zc - o.z) / d.z;
                        let (x, y) = (o.x + t * d.x, o.y + t * d.y);
                        if x * x + y * y <= radius * radius {
                            offer(t, Vec3::new(0.0, 0.0, zc.signum()));
                        }
                    }
                }
            }
            Shape::Ring { inner, outer, half_height } => {
                for (r, sign) in [(inner, -1.0), (outer, 1.0)] {
                    if let Some((a, b)) = side_roots(o, d, r) {
                        for t in [a, b] {
                            if (o.z + t * d.z).abs() <= half_height {
                                offer(t, radial(t, sign));
                            }
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    for zc in [-half_height, half_height] {
                        let t = (zc - o.z) / d.z;
                        let rho2 = (o.x + t * d.x).powi(2) + (o.y + t * d.y).powi(2);
                        if rho2 >= inner * inner && rho2 <= outer * outer {
                            offer(t, Vec3::new(0.0, 0.0, zc.signum()));
                        }
                    }
                }
            }
            Shape::Plane => {
                if d.z.abs() > 1e-15 {
                    offer(-o.z / d.z, Vec3::z());
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy)]
struct Primitive {
    shape: Shape,
    /// Primitive frame to object frame.
    pose: RigidTransform,
}

/// How object-local coordinates become feature harmonics.
#[derive(Debug, Clone, Copy)]
enum Scheme {
    /// Each coordinate normalized by the half extent about `center`.
    Cartesian { center: Vec3, half: Vec3 },
    /// Azimuth around local z, radius in `[inner, outer]`, height in `±half_height`.
    Azimuth { inner: f64, outer: f64, half_height: f64 },
}

fn phase_pair(u: f64) -> (f64, f64) {
    let th = FRAC_PI_4 + PHASE_SPAN * u.clamp(-1.0, 1.0);
    (th.sin(), th.cos())
}

impl Scheme {
    fn harmonics(&self, p: &Vec3) -> [f64; 6] {
        let k = 1.0 / 3f64.sqrt();
        let (pairs, weights) = match *self {
            Scheme::Cartesian { center, half } => {
                let q = p - center;
                ([phase_pair(q.x / half.x), phase_pair(q.y / half.y), phase_pair(q.z / half.z)], [k; 3])
            }
            Scheme::Azimuth { inner, outer, half_height } => {
                let phi = p.y.atan2(p.x);
                let rho = p.x.hypot(p.y);
                let ur = (2.0 * rho - inner - outer) / (outer - inner);
                // The full azimuth circle spans a much wider angle than a
                // phase pair, so it gets a smaller share of the weight.
                let rest = ((1.0 - AZIMUTH_WEIGHT * AZIMUTH_WEIGHT) / 2.0).sqrt();
                ([(phi.cos(), phi.sin()), phase_pair(ur), phase_pair(p.z / half_height)], [AZIMUTH_WEIGHT, rest, rest])
            }
        };
        let mut h = [0.0; 6];
        for (i, ((a, b), w)) in pairs.into_iter().zip(weights).enumerate() {
            h[2 * i] = w * a;
            h[2 * i + 1] = w * b;
        }
        h
    }
}

#[derive(Debug, Clone)]
struct Object {
    prims: Vec<Primitive>,
    /// Object frame to world.
    pose: RigidTransform,
    scheme: Scheme,
    color: [u8; 3],
}

impl Object {
    fn single(shape: Shape, pose: RigidTransform, scheme: Scheme, color: [u8; 3]) -> Self {
        Self { prims: vec![Primitive { shape, pose: RigidTransform::identity() }], pose, scheme, color }
    }

    /// Ray parameter, object-local hit point and world-frame normal.
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3, Vec3)> {
        let inv = self.pose.inverse();
        let (o, d) = (inv.apply_point(origin), inv.apply_vector(dir));
        let mut best: Option<(f64, Vec3)> = None;
        for prim in &self.prims {
            let pinv = prim.pose.inverse();
            if let Some((t, n)) = prim.shape.intersect(&pinv.apply_point(&o), &pinv.apply_vector(&d)) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, prim.pose.apply_vector(&n)));
                }
            }
        }
        best.map(|(t, n)| (t, o + t * d, self.pose.apply_vector(&n)))
    }
}

/// Unit-norm feature: object embedding plus harmonics.
fn feature(slot: u8, h: &[f64; 6]) -> [f32; FEATURE_DIM] {
    let mut f = [0.0f32; FEATURE_DIM];
    let a = (1.0 - HARMONIC_WEIGHT * HARMONIC_WEIGHT).sqrt() / (EMBED_DIMS as f64).sqrt();
    let base = slot as usize * EMBED_DIMS;
    for v in &mut f[base..base + EMBED_DIMS] {
        *v = a as f32;
    }
    // Passive harmonics are negated so the shared dims push the objects apart.
    let w = if slot == SLOT_PASSIVE { -HARMONIC_WEIGHT } else { HARMONIC_WEIGHT };
    for (k, hv) in h.iter().enumerate() {
        f[HARMONIC_OFFSET + k] = (w * hv) as f32;
    }
    f
}

fn shade(color: [u8; 3], h: &[f64; 6]) -> [u8; 3] {
    let s = 0.65 + 0.35 * (h[0] + h[3]).clamp(0.0, 1.0);
    color.map(|c| (c as f64 * s).round() as u8)
}

// ---------------------------------------------------------------------------
// Scene layouts

struct Layout {
    active: Object,
    passive: Object,
    goal: RigidTransform,
    center: Vec3,
    instruction: &'static str,
    /// Pencil axis half-length for the structured grasp set.
    pencil_half_length: Option<f64>,
}

fn rz(angle: f64) -> nalgebra::Matrix3<f64> {
    axis_angle(&Vec3::z(), angle)
}

fn pose(r: nalgebra::Matrix3<f64>, t: Vec3) -> RigidTransform {
    RigidTransform::new(crate::geometry::reorthonormalize(r), t).expect("layout pose is a rotation")
}

fn boxed(half: Vec3) -> Scheme {
    Scheme::Cartesian { center: Vec3::zeros(), half }
}

const ACTIVE_COLOR: [u8; 3] = [214, 96, 48];
const PASSIVE_COLOR: [u8; 3] = [64, 120, 200];
const TABLE_COLOR: [u8; 3] = [170, 160, 140];

fn layout(task: Task, rng: &mut ChaCha8Rng) -> Layout {
    let mut j = |a: f64| rng.random_range(-a..=a);
    let p = Vec3::new(j(0.02), j(0.02), 0.0);
    // The active object starts nearer to the camera for every orbit yaw in [0, 90].
    let start = p + Vec3::new(0.16 + j(0.01), -0.15 + j(0.01), 0.0);
    match task {
        Task::Insertion => {
            let (r_in, r_out, height, bottom) = (0.038, 0.045, 0.10, 0.006);
            let cup = Object {
                prims: vec![
                    Primitive {
                        shape: Shape::Ring { inner: r_in, outer: r_out, half_height: height / 2.0 },
                        pose: pose(rz(0.0), Vec3::new(0.0, 0.0, height / 2.0)),
                    },
                    Primitive {
                        shape: Shape::Cylinder { radius: r_in, half_height: bottom / 2.0 },
                        pose: pose(rz(0.0), Vec3::new(0.0, 0.0, bottom / 2.0)),
                    },
                ],
                pose: pose(rz(j(PI)), p),
                scheme: Scheme::Azimuth { inner: 0.0, outer: r_out, half_height: height },
                color: PASSIVE_COLOR,
            };
            let (radius, half_len) = (0.01, 0.08);
            let lying = rz(0.35 + j(0.35)) * axis_angle(&Vec3::y(), FRAC_PI_2) * rz(j(PI));
            let pencil = Object::single(
                Shape::Cylinder { radius, half_height: half_len },
                pose(lying, start + Vec3::new(0.0, 0.0, radius)),
                boxed(Vec3::new(radius, radius, half_len)),
                ACTIVE_COLOR,
            );
            let goal = pose(rz(j(PI)), p + Vec3::new(j(0.008), j(0.008), bottom + half_len + 0.0005));
            Layout {
                center: (p + start) / 2.0 + Vec3::new(0.0, 0.0, 0.05),
                active: pencil,
                passive: cup,
                goal,
                instruction: "put the marker into the cup",
                pencil_half_length: Some(half_len),
            }
        }
        Task::Covering => {
            let holder_half = Vec3::new(0.06, 0.05, 0.035);
            let lid_half = Vec3::new(0.065, 0.055, 0.01);
            let yaw = j(0.4);
            let holder = Object::single(
                Shape::Box { half: holder_half },
                pose(rz(yaw), p + Vec3::new(0.0, 0.0, holder_half.z)),
                boxed(holder_half),
                PASSIVE_COLOR,
            );
            let lid = Object::single(
                Shape::Box { half: lid_half },
                pose(rz(j(0.6)), start + Vec3::new(0.0, 0.0, lid_half.z)),
                boxed(lid_half),
                ACTIVE_COLOR,
            );
            let goal =
                pose(rz(yaw + j(0.05)), p + Vec3::new(j(0.004), j(0.004), 2.0 * holder_half.z + lid_half.z));
            Layout {
                center: (p + start) / 2.0 + Vec3::new(0.0, 0.0, 0.04),
                active: lid,
                passive: holder,
                goal,
                instruction: "cover the box with the lid",
                pencil_half_length: None,
            }
        }
        Task::Stacking => {
            let base_half = Vec3::new(0.06, 0.06, 0.045);
            let cube_half = Vec3::new(0.035, 0.035, 0.035);
            let base = Object::single(
                Shape::Box { half: base_half },
                pose(rz(j(0.5)), p + Vec3::new(0.0, 0.0, base_half.z)),
                boxed(base_half),
                PASSIVE_COLOR,
            );
            let cube = Object::single(
                Shape::Box { half: cube_half },
                pose(rz(j(0.8)), start + Vec3::new(0.0, 0.0, cube_half.z)),
                boxed(cube_half),
                ACTIVE_COLOR,
            );
            let goal = pose(rz(j(PI)), p + Vec3::new(j(0.015), j(0.015), 2.0 * base_half.z + cube_half.z));
            Layout {
                center: (p + start) / 2.0 + Vec3::new(0.0, 0.0, 0.05),
                active: cube,
                passive: base,
                goal,
                instruction: "stack the small cube on the large block",
                pencil_half_length: None,
            }
        }
        Task::Assembly => {
            let base_half = Vec3::new(0.06, 0.06, 0.01);
            let (peg_r, peg_h) = (0.012, 0.12);
            let holder = Object {
                prims: vec![
                    Primitive {
                        shape: Shape::Box { half: base_half },
                        pose: pose(rz(0.0), Vec3::new(0.0, 0.0, base_half.z)),
                    },
                    Primitive {
                        shape: Shape::Cylinder { radius: peg_r, half_height: peg_h / 2.0 },
                        pose: pose(rz(0.0), Vec3::new(0.0, 0.0, 2.0 * base_half.z + peg_h / 2.0)),
                    },
                ],
                pose: pose(rz(j(0.5)), p),
                scheme: Scheme::Cartesian {
                    center: Vec3::new(0.0, 0.0, (2.0 * base_half.z + peg_h) / 2.0),
                    half: Vec3::new(base_half.x, base_half.y, (2.0 * base_half.z + peg_h) / 2.0),
                },
                color: PASSIVE_COLOR,
            };
            let (inner, outer, half_t) = (0.028, 0.05, 0.01);
            // Standing upright, facing the camera at yaw 0.
            let upright = rz(j(0.15)) * axis_angle(&Vec3::x(), -FRAC_PI_2) * rz(j(PI));
            let ring = Object::single(
                Shape::Ring { inner, outer, half_height: half_t },
                pose(upright, start + Vec3::new(0.0, 0.0, outer)),
                Scheme::Azimuth { inner, outer, half_height: half_t },
                ACTIVE_COLOR,
            );
            let goal = pose(rz(j(PI)), p + Vec3::new(j(0.004), j(0.004), 2.0 * base_half.z + half_t + 0.0005));
            Layout {
                center: (p + start) / 2.0 + Vec3::new(0.0, 0.0, 0.05),
                active: ring,
                passive: holder,
                goal,
                instruction: "slide the ring onto the peg",
                pencil_half_length: None,
            }
        }
        Task::Articulated => {
            // Cabinet front (local -y) faces the camera at yaw 45.
            let yaw = FRAC_PI_4 + j(0.2);
            let cab_half = Vec3::new(0.15, 0.11, 0.10);
            let cab_pose = pose(rz(yaw), p + Vec3::new(0.0, 0.0, 0.0));
            let housing = Object::single(
                Shape::Box { half: cab_half },
                pose(rz(yaw), p + Vec3::new(0.0, 0.0, cab_half.z)),
                boxed(cab_half),
                PASSIVE_COLOR,
            );
            let panel_half = Vec3::new(0.12, 0.008, 0.07);
            let handle_half = Vec3::new(0.04, 0.006, 0.008);
            let panel_y = -cab_half.y - panel_half.y;
            let handle_y = panel_y - panel_half.y - handle_half.y;
            let drawer = Object {
                prims: vec![
                    Primitive {
                        shape: Shape::Box { half: panel_half },
                        pose: pose(rz(0.0), Vec3::new(0.0, panel_y, cab_half.z)),
                    },
                    Primitive {
                        shape: Shape::Box { half: handle_half },
                        pose: pose(rz(0.0), Vec3::new(0.0, handle_y, cab_half.z + 0.03)),
                    },
                ],
                pose: cab_pose,
                scheme: Scheme::Cartesian {
                    center: Vec3::new(0.0, panel_y - handle_half.y, cab_half.z),
                    half: Vec3::new(panel_half.x, panel_half.y + handle_half.y, panel_half.z),
                },
                color: ACTIVE_COLOR,
            };
            let pull = 0.10 + j(0.03);
            let goal = cab_pose.compose(&pose(rz(0.0), Vec3::new(0.0, -pull, 0.0)));
            Layout {
                center: p + Vec3::new(0.0, 0.0, cab_half.z),
                active: drawer,
                passive: housing,
                goal,
                instruction: "open the drawer",
                pencil_half_length: None,
            }
        }
    }
}

fn table() -> Object {
    Object::single(
        Shape::Plane,
        RigidTransform::identity(),
        Scheme::Cartesian { center: Vec3::zeros(), half: Vec3::new(0.5, 0.5, 0.5) },
        TABLE_COLOR,
    )
}

/// Camera looking at `center` from the given yaw, 40 degrees above the table.
fn camera(center: &Vec3, yaw_deg: f64) -> RigidTransform {
    let e = CAMERA_ELEVATION_DEG.to_radians();
    let back = rz(yaw_deg.to_radians()) * Vec3::new(0.0, -e.cos(), e.sin());
    let eye = center + CAMERA_DISTANCE * back;
    let fwd = (center - eye).normalize();
    let right = fwd.cross(&Vec3::z()).normalize();
    let down = fwd.cross(&right);
    pose(nalgebra::Matrix3::from_columns(&[right, down, fwd]), eye)
}

fn intrinsics(opts: &SynthOptions) -> CameraIntrinsics {
    let f = FOCAL_PER_WIDTH * opts.width as f64;
    CameraIntrinsics::new(f, f, opts.width as f64 / 2.0 - 0.5, opts.height as f64 / 2.0 - 0.5, opts.width, opts.height)
        .expect("synthetic intrinsics are valid")
}

// ---------------------------------------------------------------------------
// Rasters

/// One state before it is packed into a [`SceneBundle`].
#[derive(Clone)]
struct Raster {
    w: usize,
    h: usize,
    points: Vec<Vec3>,
    slot: Vec<u8>,
    feats: Vec<[f32; FEATURE_DIM]>,
    color: Vec<[u8; 3]>,
}

impl Raster {
    fn new(w: usize, h: usize) -> Self {
        let n = w * h;
        Self {
            w,
            h,
            points: vec![Vec3::repeat(f64::NAN); n],
            slot: vec![NO_HIT; n],
            feats: vec![[0.0; FEATURE_DIM]; n],
            color: vec![[0; 3]; n],
        }
    }

    fn depth(&self, i: usize) -> f64 {
        self.points[i].z
    }
}

/// Cosine of the steepest incidence angle that still yields a depth return.
const GRAZING_COS: f64 = 0.3;

fn render(objects: &[(u8, &Object)], intr: &CameraIntrinsics, o2w: &RigidTransform) -> Raster {
    let mut r = Raster::new(intr.width, intr.height);
    let origin = *o2w.translation();
    for row in 0..intr.height {
        for col in 0..intr.width {
            let ray = intr.ray(col as f64, row as f64);
            let dir = o2w.apply_vector(&ray);
            let mut best: Option<(f64, u8, Vec3, Vec3, &Object)> = None;
            for &(slot, obj) in objects {
                if let Some((t, local, n)) = obj.intersect(&origin, &dir) {
                    if best.is_none_or(|b| t < b.0) {
                        best = Some((t, slot, local, n, obj));
                    }
                }
            }
            if let Some((t, slot, local, n, obj)) = best {
                // Object surfaces return no depth at strongly grazing incidence.
                if slot != SLOT_TABLE && n.dot(&dir).abs() < GRAZING_COS * dir.norm() {
                    continue;
                }
                let i = row * intr.width + col;
                let h = obj.scheme.harmonics(&local);
                r.points[i] = t * ray;
                r.slot[i] = slot;
                r.feats[i] = feature(slot, &h);
                r.color[i] = shade(obj.color, &h);
            }
        }
    }
    r
}

/// Moves the observed active points into `base` with a z-buffer, scaling
/// them by `scale` about `center`. A scaled point covers its whole pixel
/// footprint so the enlarged surface has no holes; each covered pixel gets a
/// point on its own ray at the scaled point's depth. Returns the source index
/// behind every active pixel.
fn splat_active(
    obs: &Raster,
    base: &mut Raster,
    motion: &RigidTransform,
    scale: f64,
    center: &Vec3,
    intr: &CameraIntrinsics,
) -> Vec<usize> {
    let mut owner: Vec<Option<usize>> = vec![None; base.points.len()];
    let (w, h) = (base.w as i64, base.h as i64);
    let mut put = |base: &mut Raster, i: usize, src: usize, p: Vec3| {
        let occupied = base.depth(i);
        let nearer = occupied.is_nan() || p.z < occupied;
        if nearer && (owner[i].is_none() || p.z < base.points[i].z) {
            owner[i] = Some(src);
            base.points[i] = p;
            base.slot[i] = SLOT_ACTIVE;
            base.feats[i] = obs.feats[src];
            base.color[i] = obs.color[src];
        }
    };
    for src in (0..obs.points.len()).filter(|&i| obs.slot[i] == SLOT_ACTIVE) {
        let moved = motion.apply_point(&obs.points[src]);
        let p = if scale == 1.0 { moved } else { center + scale * (moved - center) };
        if p.z <= 0.0 {
            continue;
        }
        let (u, v) = intr.project(&p);
        let (col, row) = (u.round() as i64, v.round() as i64);
        if scale == 1.0 {
            if (0..w).contains(&col) && (0..h).contains(&row) {
                put(base, (row * w + col) as usize, src, p);
            }
            continue;
        }
        // Half-width in pixels of the patch this point stood for when observed.
        let half = 0.5 * scale * obs.points[src].z / p.z;
        let span = |x: f64| ((x - half).ceil() as i64, (x + half).ceil() as i64);
        let ((c0, c1), (r0, r1)) = (span(u), span(v));
        let cells: Vec<(i64, i64)> = if c1 > c0 && r1 > r0 {
            (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c))).collect()
        } else {
            vec![(row, col)]
        };
        for (r, c) in cells {
            if (0..w).contains(&c) && (0..h).contains(&r) {
                put(base, (r * w + c) as usize, src, intr.backproject(c as f64, r as f64, p.z));
            }
        }
    }
    owner.into_iter().flatten().collect()
}

const SCALE_CENTER_ITERS: usize = 20;

/// Centre for a rescaled edit: the centroid, over the active pixels of the
/// scaled splat, of the unscaled moved points behind them. Found by fixed
/// point iteration starting from the unscaled splat.
fn active_scale_center(obs: &Raster, base: &Raster, motion: &RigidTransform, scale: f64, intr: &CameraIntrinsics) -> Vec3 {
    let mean = |srcs: &[usize]| {
        srcs.iter().fold(Vec3::zeros(), |a, &i| a + motion.apply_point(&obs.points[i])) / srcs.len().max(1) as f64
    };
    let mut c = mean(&splat_active(obs, &mut base.clone(), motion, 1.0, &Vec3::zeros(), intr));
    if scale == 1.0 {
        return c;
    }
    for _ in 0..SCALE_CENTER_ITERS {
        let next = mean(&splat_active(obs, &mut base.clone(), motion, scale, &c, intr));
        let step = (next - c).norm();
        c = next;
        if step < 1e-12 {
            break;
        }
    }
    c
}

/// Object pixels with a 4-neighbour on another surface lying more than
/// `BAND_DEPTH_JUMP` deeper, each paired with its deepest such neighbour.
/// Self-occlusion steps are not silhouette edges and are left out.
fn silhouette_band(r: &Raster) -> Vec<(usize, usize)> {
    let mut band = Vec::new();
    for row in 0..r.h {
        for col in 0..r.w {
            let i = row * r.w + col;
            if r.slot[i] != SLOT_ACTIVE && r.slot[i] != SLOT_PASSIVE {
                continue;
            }
            let z = r.depth(i);
            let mut deepest: Option<(f64, usize)> = None;
            let nbrs = [
                (row > 0).then(|| i - r.w),
                (row + 1 < r.h).then(|| i + r.w),
                (col > 0).then(|| i - 1),
                (col + 1 < r.w).then(|| i + 1),
            ];
            for k in nbrs.into_iter().flatten() {
                let nz = r.depth(k);
                if r.slot[k] != r.slot[i] && nz.is_finite() && nz - z > BAND_DEPTH_JUMP && deepest.is_none_or(|(dz, _)| nz > dz) {
                    deepest = Some((nz, k));
                }
            }
            if let Some((_, k)) = deepest {
                band.push((i, k));
            }
        }
    }
    band
}

fn inject_flying_edges(r: &mut Raster, fraction: f64, rng: &mut ChaCha8Rng) -> (usize, Vec<ArtifactLabel>) {
    let mut labels = vec![ArtifactLabel::Valid; r.points.len()];
    let mut band = silhouette_band(r);
    let count = (fraction * band.len() as f64).round() as usize;
    band.shuffle(rng);
    let clean = r.clone();
    for &(i, k) in band.iter().take(count) {
        let z = clean.depth(i);
        let push = rng.random_range(FLYING_PUSH.0..=FLYING_PUSH.1);
        r.points[i] = clean.points[i] * ((z + push) / z);
        r.feats[i] = clean.feats[k];
        r.color[i] = clean.color[k];
        labels[i] = ArtifactLabel::FlyingEdge;
    }
    (band.len(), labels)
}

fn add_depth_noise(r: &mut Raster, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("sigma is finite");
    for p in r.points.iter_mut().filter(|p| p.z.is_finite()) {
        let z = p.z;
        let nz = (z + n.sample(rng)).max(0.05 * z);
        *p *= nz / z;
    }
}

fn add_feature_noise(r: &mut Raster, ratio: f64, rng: &mut ChaCha8Rng) {
    if ratio == 0.0 {
        return;
    }
    let n = Normal::new(0.0, ratio / (FEATURE_DIM as f64).sqrt()).expect("ratio is finite");
    for (f, &s) in r.feats.iter_mut().zip(&r.slot) {
        if s != NO_HIT {
            for v in f.iter_mut() {
                *v += n.sample(rng) as f32;
            }
        }
    }
}

fn bundle(r: &Raster, intr: CameraIntrinsics, o2w: RigidTransform, instruction: &str, grasps: Option<Vec<GraspRecord>>) -> SceneBundle {
    let (w, h) = (r.w, r.h);
    let mask = |slot: u8| Mask::new(w, h, r.slot.iter().map(|&s| s == slot).collect()).expect("raster size");
    let rgb = r.color.iter().flatten().copied().collect();
    let depth = r.points.iter().map(|p| p.z as f32).collect();
    let feats = r.feats.iter().flatten().copied().collect();
    SceneBundle {
        image: ImageFrame::new(w, h, rgb).expect("raster size"),
        depth: DepthMap::new(w, h, depth).expect("depth is finite or NaN"),
        intr,
        o2w,
        masks: ObjectMasks { active: mask(SLOT_ACTIVE), passive: mask(SLOT_PASSIVE) },
        features: FeatureMap::new(w, h, FEATURE_DIM, feats).expect("raster size"),
        instruction: instruction.to_string(),
        points: Some(PointMap::new(w, h, r.points.iter().map(|p| [p.x, p.y, p.z]).collect()).expect("raster size")),
        grasps,
    }
}

// ---------------------------------------------------------------------------
// Grasp candidates

fn gripper_pose(x_axis: Vec3, z_axis: Vec3, center: Vec3) -> RigidTransform {
    let y_axis = z_axis.cross(&x_axis);
    pose(nalgebra::Matrix3::from_columns(&[x_axis, y_axis, z_axis]), center)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    let q = Quaternion::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Top-down grasps along the marker axis, then random poses near the
/// visible active surface, in descending score order.
fn grasp_candidates(lay: &Layout, obs: &Raster, o2w: &RigidTransform, rng: &mut ChaCha8Rng) -> Vec<GraspRecord> {
    let mut poses = Vec::new();
    if let Some(half) = lay.pencil_half_length {
        let axis = lay.active.pose.apply_vector(&Vec3::z());
        let down = -Vec3::z();
        for k in 0..16 {
            let along = -half + 0.01 + (2.0 * half - 0.02) * k as f64 / 15.0;
            let c = lay.active.pose.apply_point(&Vec3::new(0.0, 0.0, along));
            poses.push(gripper_pose(axis, down, c));
            poses.push(gripper_pose(-axis, down, c));
        }
    }
    let surface: Vec<Vec3> =
        (0..obs.points.len()).filter(|&i| obs.slot[i] == SLOT_ACTIVE).map(|i| o2w.apply_point(&obs.points[i])).collect();
    let n = Normal::new(0.0, 0.01).unwrap();
    while poses.len() < GRASPS_PER_SCENE && !surface.is_empty() {
        let p = surface[rng.random_range(0..surface.len())] + Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        poses.push(pose(random_rotation(rng), p));
    }
    poses
        .into_iter()
        .enumerate()
        .map(|(i, pose)| GraspRecord { pose, score: 1.0 - i as f64 / GRASPS_PER_SCENE as f64, gripper_points: None })
        .collect()
}

/// Local coordinates along the marker axis used by the structured grasp set,
/// in candidate order (two candidates per position).
pub fn structured_grasp_positions(task: Task) -> Vec<f64> {
    if task != Task::Insertion {
        return Vec::new();
    }
    let half = 0.08;
    (0..16).flat_map(|k| {
        let a = -half + 0.01 + (2.0 * half - 0.02) * k as f64 / 15.0;
        [a, a]
    })
    .collect()
}

// ---------------------------------------------------------------------------
// Entry points

const STREAM_LAYOUT: u64 = 0;
const STREAM_FLYING: u64 = 1;
const STREAM_DEPTH_OBS: u64 = 2;
const STREAM_DEPTH_EDIT: u64 = 3;
const STREAM_FEAT_OBS: u64 = 4;
const STREAM_FEAT_EDIT: u64 = 5;
const STREAM_GRASPS: u64 = 6;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

pub fn generate(task: Task, noise: NoiseSpec, seed: u64) -> Result<SyntheticScene, SynthError> {
    generate_with(task, noise, seed, SynthOptions::default())
}

pub fn generate_with(task: Task, noise: NoiseSpec, seed: u64, options: SynthOptions) -> Result<SyntheticScene, SynthError> {
    noise.validate()?;
    options.validate()?;
    let lay = layout(task, &mut stream(seed, STREAM_LAYOUT));
    let intr = intrinsics(&options);
    let o2w = camera(&lay.center, options.yaw_deg);
    let table = table();

    let obs_clean = render(&[(SLOT_ACTIVE, &lay.active), (SLOT_PASSIVE, &lay.passive), (SLOT_TABLE, &table)], &intr, &o2w);
    let mut edit = render(&[(SLOT_PASSIVE, &lay.passive), (SLOT_TABLE, &table)], &intr, &o2w);
    let gt_motion = lay.goal.compose(&lay.active.pose.inverse());
    let motion_cam = o2w.inverse().compose(&gt_motion).compose(&o2w);
    let active_scale_center = active_scale_center(&obs_clean, &edit, &motion_cam, options.active_scale, &intr);
    splat_active(&obs_clean, &mut edit, &motion_cam, options.active_scale, &active_scale_center, &intr);

    let gt_pixel_map = (0..edit.points.len())
        .filter(|&i| obs_clean.slot[i] == SLOT_PASSIVE && edit.slot[i] == SLOT_PASSIVE)
        .map(|i| ((i / intr.width) as u32, (i % intr.width) as u32))
        .collect();
    let grasps = grasp_candidates(&lay, &obs_clean, &o2w, &mut stream(seed, STREAM_GRASPS));

    let mut obs = obs_clean;
    let (band_size, artifact_labels) =
        inject_flying_edges(&mut obs, noise.flying_edge_fraction, &mut stream(seed, STREAM_FLYING));
    add_depth_noise(&mut obs, noise.depth_sigma, &mut stream(seed, STREAM_DEPTH_OBS));
    add_depth_noise(&mut edit, noise.depth_sigma, &mut stream(seed, STREAM_DEPTH_EDIT));
    add_feature_noise(&mut obs, noise.feature_noise, &mut stream(seed, STREAM_FEAT_OBS));
    add_feature_noise(&mut edit, noise.feature_noise, &mut stream(seed, STREAM_FEAT_EDIT));

    Ok(SyntheticScene {
        obs: bundle(&obs, intr, o2w, lay.instruction, Some(grasps)),
        edit: bundle(&edit, intr, o2w, lay.instruction, None),
        gt_motion,
        gt_pixel_map,
        artifact_labels,
        band_size,
        active_scale_center,
        seed,
        task,
        noise,
        options,
    })
}

/// Re-renders both states with the camera orbited by `yaw` degrees about
/// the vertical axis through the scene centre. The world-frame motion is
/// unchanged.
pub fn camera_orbit(scene: &SyntheticScene, yaw: f64) -> Result<SyntheticScene, SynthError> {
    if !(yaw.is_finite() && yaw.abs() <= 180.0) {
        return Err(SynthError::InvalidOptions(format!("orbit yaw {yaw} outside [-180, 180]")));
    }
    let options = SynthOptions { yaw_deg: scene.options.yaw_deg + yaw, ..scene.options };
    generate_with(scene.task, scene.noise, scene.seed, options)
}
