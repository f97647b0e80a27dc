//! Geometric value types shared across the crate.
//!
//! Geometry is always `f64`; feature vectors are `f32`. All types are plain
//! immutable values once constructed.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;
/// Feature norms this close to 1 count as already normalised.
const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (orthonormality error {ortho:.3e}, det {det})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("mask raster has {got} cells, expected {width}x{height}")]
    MaskSize { width: usize, height: usize, got: usize },
    #[error("feature cloud arrays disagree: {0}")]
    CloudLength(String),
    #[error("feature vector {index} has zero norm")]
    ZeroFeature { index: usize },
    #[error("pixel index ({row}, {col}) of point {index} outside {width}x{height} image")]
    PixelOutOfBounds { index: usize, row: u32, col: u32, width: usize, height: usize },
}

fn check_rotation(r: &Mat3) -> Result<(), GeometryError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("rotation"));
    }
    let ortho = linalg::orthonormality_error(r);
    let det = r.determinant();
    if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
        return Err(GeometryError::NotARotation { ortho, det });
    }
    Ok(())
}

fn check_vec(v: &Vec3, what: &'static str) -> Result<(), GeometryError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GeometryError::NonFinite(what))
    }
}

/// Proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigidTransformRepr", into = "RigidTransformRepr")]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        check_vec(&translation, "translation")?;
        Ok(Self { rotation, translation })
    }

    /// Builds a transform from a rotation that may carry round-off drift,
    /// projecting it back onto SO(3) when the drift exceeds the tolerance.
    pub(crate) fn from_parts_reorthonormalized(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation: reorthonormalize(rotation), translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        Self::from_parts_reorthonormalized(linalg::axis_angle(axis, angle), translation)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self::from_parts_reorthonormalized(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Geodesic rotation distance (radians) and translation distance (meters).
    pub fn error_to(&self, other: &RigidTransform) -> (f64, f64) {
        (
            linalg::rotation_angle_between(&self.rotation, &other.rotation),
            (self.translation - other.translation).norm(),
        )
    }
}

/// Re-projects onto SO(3) only when drift exceeds [`ROTATION_TOL`].
pub fn reorthonormalize(r: Mat3) -> Mat3 {
    if linalg::orthonormality_error(&r) > ROTATION_TOL || (r.determinant() - 1.0).abs() > ROTATION_TOL {
        linalg::nearest_rotation(&r)
    } else {
        r
    }
}

#[derive(Serialize, Deserialize)]
struct RigidTransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<RigidTransform> for RigidTransformRepr {
    fn from(t: RigidTransform) -> Self {
        Self { rotation: mat_to_rows(&t.rotation), translation: [t.translation.x, t.translation.y, t.translation.z] }
    }
}

impl TryFrom<RigidTransformRepr> for RigidTransform {
    type Error = GeometryError;
    fn try_from(r: RigidTransformRepr) -> Result<Self, Self::Error> {
        RigidTransform::new(rows_to_mat(&r.rotation), Vec3::from(r.translation))
    }
}

pub fn mat_to_rows(m: &Mat3) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

pub fn rows_to_mat(r: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
}

/// Similarity `x -> s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SimilarityRepr", into = "SimilarityRepr")]
pub struct SimilarityTransform {
    scale: f64,
    rotation: Mat3,
    translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct SimilarityRepr {
    scale: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<SimilarityTransform> for SimilarityRepr {
    fn from(t: SimilarityTransform) -> Self {
        Self {
            scale: t.scale,
            rotation: mat_to_rows(&t.rotation),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<SimilarityRepr> for SimilarityTransform {
    type Error = GeometryError;
    fn try_from(r: SimilarityRepr) -> Result<Self, Self::Error> {
        SimilarityTransform::new(r.scale, rows_to_mat(&r.rotation), Vec3::from(r.translation))
    }
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::InvalidScale(scale));
        }
        check_rotation(&rotation)?;
        check_vec(&translation, "translation")?;
        Ok(Self { scale, rotation, translation })
    }

    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// `s' = 1/s`, `R' = R^T`, `t' = -(1/s) R^T t`.
    pub fn inverse(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        Self { scale: 1.0 / self.scale, rotation: rt, translation: -(rt * self.translation) / self.scale }
    }

    /// Maps every point of `cloud`; features, pixels and labels are carried over.
    pub fn apply(&self, cloud: &FeatureCloud) -> FeatureCloud {
        let mut out = cloud.clone();
        for p in out.points.iter_mut() {
            *p = self.apply_point(p);
        }
        out
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: String| Err(GeometryError::InvalidIntrinsics(m));
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Camera-frame point for pixel column `u`, row `v` at depth `z`.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new(z * (u - self.cx) / self.fx, z * (v - self.cy) / self.fy, z)
    }

    /// `(u, v)` pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Unit-depth ray through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        self.backproject(u, v, 1.0)
    }
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, GeometryError> {
        if bits.len() != width * height {
            return Err(GeometryError::MaskSize { width, height, got: bits.len() });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask size mismatch");
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Mask { width: self.width, height: self.height, bits }
    }

    pub fn intersection(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask size mismatch");
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Mask { width: self.width, height: self.height, bits }
    }

    /// Tight bounding box `(row0, col0, row1, col1)`, inclusive, of the set bits.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            let (r, c) = (i / self.width, i % self.width);
            bb = Some(match bb {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
        bb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Active,
    Passive,
    Background,
}

impl Label {
    pub fn code(self) -> u8 {
        match self {
            Label::Background => 0,
            Label::Active => 1,
            Label::Passive => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Background),
            1 => Some(Label::Active),
            2 => Some(Label::Passive),
            _ => None,
        }
    }
}

/// Pixel-aligned points with unit-norm features.
///
/// `pixel_index` entries are `(row, col)` in the source image, whose size is
/// kept alongside so masks can be rebuilt from any subset of the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud {
    points: Vec<Vec3>,
    feature_dim: usize,
    features: Vec<f32>,
    pixel_index: Vec<(u32, u32)>,
    labels: Vec<Label>,
    image_width: usize,
    image_height: usize,
}

impl FeatureCloud {
    /// Validates array lengths and pixel bounds, and L2-normalises every
    /// feature vector (`features` is row-major, `feature_dim` per point).
    pub fn new(
        points: Vec<Vec3>,
        feature_dim: usize,
        mut features: Vec<f32>,
        pixel_index: Vec<(u32, u32)>,
        labels: Vec<Label>,
        image_width: usize,
        image_height: usize,
    ) -> Result<Self, GeometryError> {
        let n = points.len();
        if feature_dim == 0 {
            return Err(GeometryError::CloudLength("feature dimension is zero".into()));
        }
        if features.len() != n * feature_dim || pixel_index.len() != n || labels.len() != n {
            return Err(GeometryError::CloudLength(format!(
                "{} points, {} feature values (dim {}), {} pixel indices, {} labels",
                n,
                features.len(),
                feature_dim,
                pixel_index.len(),
                labels.len()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite("points"));
        }
        for (index, &(row, col)) in pixel_index.iter().enumerate() {
            if row as usize >= image_height || col as usize >= image_width {
                return Err(GeometryError::PixelOutOfBounds {
                    index,
                    row,
                    col,
                    width: image_width,
                    height: image_height,
                });
            }
        }
        for (index, f) in features.chunks_mut(feature_dim).enumerate() {
            normalize_f32(f).ok_or(GeometryError::ZeroFeature { index })?;
        }
        Ok(Self { points, feature_dim, features, pixel_index, labels, image_width, image_height })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn pixel_index(&self) -> &[(u32, u32)] {
        &self.pixel_index
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_width, self.image_height)
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> FeatureCloud {
        let d = self.feature_dim;
        let mut features = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            features.extend_from_slice(self.feature(i));
        }
        FeatureCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            feature_dim: d,
            features,
            pixel_index: indices.iter().map(|&i| self.pixel_index[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            image_width: self.image_width,
            image_height: self.image_height,
        }
    }

    pub fn indices_with_label(&self, label: Label) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn with_label(&self, label: Label) -> FeatureCloud {
        self.select(&self.indices_with_label(label))
    }

    /// Mask of the pixels occupied by this cloud.
    pub fn pixel_mask(&self) -> Mask {
        let mut m = Mask::empty(self.image_width, self.image_height);
        for &(r, c) in &self.pixel_index {
            m.set(r as usize, c as usize, true);
        }
        m
    }

    /// Concatenates clouds that share an image grid and feature dimension.
    pub fn concat(parts: &[&FeatureCloud]) -> Result<FeatureCloud, GeometryError> {
        let first = parts.first().ok_or_else(|| GeometryError::CloudLength("nothing to concatenate".into()))?;
        let mut out = FeatureCloud {
            points: Vec::new(),
            feature_dim: first.feature_dim,
            features: Vec::new(),
            pixel_index: Vec::new(),
            labels: Vec::new(),
            image_width: first.image_width,
            image_height: first.image_height,
        };
        for p in parts {
            if p.feature_dim != out.feature_dim || p.image_size() != first.image_size() {
                return Err(GeometryError::CloudLength("concatenated clouds disagree on feature dim or image size".into()));
            }
            out.points.extend_from_slice(&p.points);
            out.features.extend_from_slice(&p.features);
            out.pixel_index.extend_from_slice(&p.pixel_index);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    /// Rigidly moves the points; used by tests and the viewpoint tooling.
    pub fn transformed(&self, t: &RigidTransform) -> FeatureCloud {
        let mut out = self.clone();
        for p in out.points.iter_mut() {
            *p = t.apply_point(p);
        }
        out
    }
}

/// Normalises in place; `None` when the vector has zero (or non-finite) norm.
/// Vectors already unit to f32 precision are left as they are, so a saved
/// and reloaded cloud keeps its exact features.
pub fn normalize_f32(f: &mut [f32]) -> Option<()> {
    let norm = f.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return None;
    }
    if (norm - 1.0).abs() <= UNIT_NORM_TOL {
        return Some(());
    }
    for v in f.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    Some(())
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}
