//! Turning depth (or point maps) plus per-pixel features into pixel-aligned
//! [`FeatureCloud`]s.
//!
//! The edited image goes through a monocular depth estimator whose input
//! resolution rarely matches the image. [`plan_crop`] cuts the region around
//! both object masks, either padding it with surrounding image content
//! (when it fits) or resizing it with letterboxing (when it does not), and
//! [`lift_edited`] maps the prediction back onto the original pixel grid so
//! every lifted point keeps its original pixel index.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, FeatureCloud, GeometryError, Label, Mask, Vec3};

/// Depth jumps larger than this (meters) are never interpolated across.
pub const DISCONTINUITY_THRESHOLD: f64 = 0.05;
pub const DEFAULT_MARGIN: usize = 8;
pub const DEFAULT_NATIVE_SIZE: (usize, usize) = (518, 518);

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no pixel with valid depth inside the requested region")]
    AllDepthInvalid,
    #[error("object mask union is empty")]
    EmptyMask,
    #[error("depth source failed: {0}")]
    DepthSourceFailure(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[inline]
pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Depth raster in meters. Invalid pixels are stored as NaN.
#[derive(Debug, Clone)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f32>,
}

impl PartialEq for DepthMap {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.depth.iter().zip(&other.depth).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl DepthMap {
    /// Non-positive and NaN values are canonicalised to NaN (invalid);
    /// infinities are rejected.
    pub fn new(width: usize, height: usize, mut depth: Vec<f32>) -> Result<Self, LiftError> {
        if depth.len() != width * height {
            return Err(LiftError::DimensionMismatch(format!(
                "depth raster has {} values, expected {}x{}",
                depth.len(),
                width,
                height
            )));
        }
        if depth.iter().any(|d| d.is_infinite()) {
            return Err(GeometryError::NonFinite("depth").into());
        }
        for d in depth.iter_mut() {
            if !is_valid_depth(*d as f64) {
                *d = f32::NAN;
            }
        }
        Ok(Self { width, height, depth })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, depth: vec![f32::NAN; width * height] }
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Result<Self, LiftError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.depth
    }

    /// Depth at `(row, col)` if valid.
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let d = self.depth[row * self.width + col] as f64;
        is_valid_depth(d).then_some(d)
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| is_valid_depth(**d as f64)).count()
    }
}

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFrame {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self, LiftError> {
        if rgb.len() != width * height * 3 {
            return Err(LiftError::DimensionMismatch(format!(
                "rgb raster has {} bytes, expected {}x{}x3",
                rgb.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![0; width * height * 3] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, px: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.rgb[i..i + 3].copy_from_slice(&px);
    }
}

/// Per-pixel feature raster (`height * width * dim`, row-major). Vectors are
/// stored as produced; normalisation happens when points are lifted.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f32>) -> Result<Self, LiftError> {
        if dim == 0 || data.len() != width * height * dim {
            return Err(LiftError::DimensionMismatch(format!(
                "feature raster has {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("features").into());
        }
        Ok(Self { width, height, dim, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Dense per-pixel camera-frame points (NaN = invalid), as produced by
/// point-map style estimators or by the synthetic renderer. Points need not
/// lie exactly on their pixel's ray, only project inside that pixel.
#[derive(Debug, Clone)]
pub struct PointMap {
    width: usize,
    height: usize,
    points: Vec<[f64; 3]>,
}

impl PartialEq for PointMap {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

impl PointMap {
    pub fn new(width: usize, height: usize, mut points: Vec<[f64; 3]>) -> Result<Self, LiftError> {
        if points.len() != width * height {
            return Err(LiftError::DimensionMismatch(format!(
                "point map has {} entries, expected {}x{}",
                points.len(),
                width,
                height
            )));
        }
        for p in points.iter_mut() {
            if !(p.iter().all(|v| v.is_finite()) && p[2] > 0.0) {
                *p = [f64::NAN; 3];
            }
        }
        Ok(Self { width, height, points })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn get(&self, row: usize, col: usize) -> Option<Vec3> {
        let p = self.points[row * self.width + col];
        p[2].is_finite().then(|| Vec3::from(p))
    }
}

/// The two object masks of one scene state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectMasks {
    pub active: Mask,
    pub passive: Mask,
}

impl ObjectMasks {
    pub fn union(&self) -> Mask {
        self.active.union(&self.passive)
    }

    pub fn label_at(&self, row: usize, col: usize) -> Label {
        if self.active.get(row, col) {
            Label::Active
        } else if self.passive.get(row, col) {
            Label::Passive
        } else {
            Label::Background
        }
    }
}

fn check_dims(what: &str, w: usize, h: usize, width: usize, height: usize) -> Result<(), LiftError> {
    if (w, h) != (width, height) {
        return Err(LiftError::DimensionMismatch(format!("{what} is {w}x{h}, expected {width}x{height}")));
    }
    Ok(())
}

fn lift_pixels<F>(
    width: usize,
    height: usize,
    point_at: F,
    features: &FeatureMap,
    masks: &ObjectMasks,
    restrict: Option<&Mask>,
) -> Result<FeatureCloud, LiftError>
where
    F: Fn(usize, usize) -> Option<Vec3>,
{
    check_dims("feature raster", features.width(), features.height(), width, height)?;
    check_dims("active mask", masks.active.width(), masks.active.height(), width, height)?;
    check_dims("passive mask", masks.passive.width(), masks.passive.height(), width, height)?;

    let mut points = Vec::new();
    let mut feats = Vec::new();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut conflicts = 0usize;
    for row in 0..height {
        for col in 0..width {
            if let Some(m) = restrict {
                if !m.get(row, col) {
                    continue;
                }
            }
            let Some(p) = point_at(row, col) else { continue };
            if masks.active.get(row, col) && masks.passive.get(row, col) {
                conflicts += 1;
            }
            points.push(p);
            feats.extend_from_slice(features.at(row, col));
            pixels.push((row as u32, col as u32));
            labels.push(masks.label_at(row, col));
        }
    }
    if conflicts > 0 {
        log::warn!("{conflicts} pixels are in both object masks; labelled active");
    }
    if points.is_empty() {
        return Err(LiftError::AllDepthInvalid);
    }
    Ok(FeatureCloud::new(points, features.dim(), feats, pixels, labels, width, height)?)
}

/// Pinhole back-projection of every valid-depth pixel.
///
/// Pixel `(u, v)` = `(col, row)` maps to `depth * ((u - cx)/fx, (v - cy)/fy, 1)`.
/// Labels come from the masks; pixels in both masks are labelled active.
pub fn backproject(
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    rgb: &ImageFrame,
    features: &FeatureMap,
    masks: &ObjectMasks,
) -> Result<FeatureCloud, LiftError> {
    backproject_region(depth, intr, rgb, features, masks, None)
}

pub fn backproject_region(
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    rgb: &ImageFrame,
    features: &FeatureMap,
    masks: &ObjectMasks,
    restrict: Option<&Mask>,
) -> Result<FeatureCloud, LiftError> {
    let (w, h) = (depth.width(), depth.height());
    check_dims("intrinsics", intr.width, intr.height, w, h)?;
    check_dims("rgb image", rgb.width(), rgb.height(), w, h)?;
    lift_pixels(
        w,
        h,
        |row, col| depth.get(row, col).map(|z| intr.backproject(col as f64, row as f64, z)),
        features,
        masks,
        restrict,
    )
}

/// Lifts a dense point map, optionally restricted to a pixel region.
pub fn lift_point_map(
    points: &PointMap,
    features: &FeatureMap,
    masks: &ObjectMasks,
    restrict: Option<&Mask>,
) -> Result<FeatureCloud, LiftError> {
    lift_pixels(points.width(), points.height(), |row, col| points.get(row, col), features, masks, restrict)
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// The box fits: a native-size window around it is cut from the image
    /// (black outside the image), scale 1.
    Pad,
    /// The box is shrunk with one aspect-preserving scale and letterboxed.
    Resize,
}

/// How the estimator input is cut from the full image.
///
/// Target pixel centre `xt + 0.5` corresponds to source pixel centre
/// `x0 + (xt + 0.5 - offset_x) / scale_x`, and likewise for rows.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropPlan {
    pub source_box: PixelRect,
    pub mode: CropMode,
    pub target_width: usize,
    pub target_height: usize,
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    /// Size of the resized content inside the letterbox (resize mode), or
    /// of the full target (pad mode).
    pub content_width: usize,
    pub content_height: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl CropPlan {
    pub fn target_to_source(&self, xt: f64, yt: f64) -> (f64, f64) {
        (
            self.source_box.x0 as f64 + (xt + 0.5 - self.offset_x) / self.scale_x - 0.5,
            self.source_box.y0 as f64 + (yt + 0.5 - self.offset_y) / self.scale_y - 0.5,
        )
    }

    pub fn source_to_target(&self, xs: f64, ys: f64) -> (f64, f64) {
        (
            (xs + 0.5 - self.source_box.x0 as f64) * self.scale_x + self.offset_x - 0.5,
            (ys + 0.5 - self.source_box.y0 as f64) * self.scale_y + self.offset_y - 0.5,
        )
    }

    /// Inclusive target-pixel range covered by image content.
    fn content_range(&self) -> (usize, usize, usize, usize) {
        let x0 = self.offset_x as usize;
        let y0 = self.offset_y as usize;
        (x0, y0, x0 + self.content_width - 1, y0 + self.content_height - 1)
    }
}

/// Plans the estimator input for the union of the object masks.
///
/// The tight box is grown by `margin` and clamped to the image. If it fits
/// the native size it is padded with surrounding image content (scale 1);
/// otherwise it is resized with a single aspect-preserving scale and
/// letterboxed, centred.
pub fn plan_crop(union_mask: &Mask, native_w: usize, native_h: usize, margin: usize) -> Result<CropPlan, LiftError> {
    let (r0, c0, r1, c1) = union_mask.bounding_box().ok_or(LiftError::EmptyMask)?;
    if native_w == 0 || native_h == 0 {
        return Err(LiftError::DimensionMismatch("native resolution must be nonzero".into()));
    }
    let (iw, ih) = (union_mask.width(), union_mask.height());
    let x0 = c0.saturating_sub(margin);
    let y0 = r0.saturating_sub(margin);
    let x1 = (c1 + margin).min(iw - 1);
    let y1 = (r1 + margin).min(ih - 1);
    let source_box = PixelRect { x0, y0, width: x1 - x0 + 1, height: y1 - y0 + 1 };
    let (bw, bh) = (source_box.width, source_box.height);

    if bw <= native_w && bh <= native_h {
        let origin = |box0: usize, bsize: usize, isize: usize, nsize: usize| -> i64 {
            if isize >= nsize {
                let centred = box0 as i64 + bsize as i64 / 2 - nsize as i64 / 2;
                centred.clamp(0, (isize - nsize) as i64)
            } else {
                -(((nsize - isize) / 2) as i64)
            }
        };
        let ox = origin(x0, bw, iw, native_w);
        let oy = origin(y0, bh, ih, native_h);
        return Ok(CropPlan {
            source_box,
            mode: CropMode::Pad,
            target_width: native_w,
            target_height: native_h,
            scale_x: 1.0,
            scale_y: 1.0,
            offset_x: (x0 as i64 - ox) as f64,
            offset_y: (y0 as i64 - oy) as f64,
            content_width: native_w,
            content_height: native_h,
            image_width: iw,
            image_height: ih,
        });
    }

    let s = (native_w as f64 / bw as f64).min(native_h as f64 / bh as f64);
    let cw = ((bw as f64 * s).round() as usize).clamp(1, native_w);
    let ch = ((bh as f64 * s).round() as usize).clamp(1, native_h);
    Ok(CropPlan {
        source_box,
        mode: CropMode::Resize,
        target_width: native_w,
        target_height: native_h,
        scale_x: s,
        scale_y: s,
        offset_x: ((native_w - cw) / 2) as f64,
        offset_y: ((native_h - ch) / 2) as f64,
        content_width: cw,
        content_height: ch,
        image_width: iw,
        image_height: ih,
    })
}

/// Cuts (pad mode) or bilinearly resamples (resize mode) the estimator input.
pub fn prepare_input(image: &ImageFrame, plan: &CropPlan) -> ImageFrame {
    let mut out = ImageFrame::black(plan.target_width, plan.target_height);
    match plan.mode {
        CropMode::Pad => {
            for yt in 0..plan.target_height {
                for xt in 0..plan.target_width {
                    let (xs, ys) = plan.target_to_source(xt as f64, yt as f64);
                    let (xs, ys) = (xs.round() as i64, ys.round() as i64);
                    if xs >= 0 && ys >= 0 && (xs as usize) < image.width() && (ys as usize) < image.height() {
                        out.set_pixel(yt, xt, image.pixel(ys as usize, xs as usize));
                    }
                }
            }
        }
        CropMode::Resize => {
            let b = plan.source_box;
            let (cx0, cy0, cx1, cy1) = plan.content_range();
            for yt in cy0..=cy1 {
                for xt in cx0..=cx1 {
                    let (xs, ys) = plan.target_to_source(xt as f64, yt as f64);
                    let xs = xs.clamp(b.x0 as f64, (b.x0 + b.width - 1) as f64);
                    let ys = ys.clamp(b.y0 as f64, (b.y0 + b.height - 1) as f64);
                    let (xa, ya) = (xs.floor() as usize, ys.floor() as usize);
                    let (xb, yb) = ((xa + 1).min(b.x0 + b.width - 1), (ya + 1).min(b.y0 + b.height - 1));
                    let (fx, fy) = (xs - xa as f64, ys - ya as f64);
                    let mut px = [0u8; 3];
                    for (ch, slot) in px.iter_mut().enumerate() {
                        let v = |r: usize, c: usize| image.pixel(r, c)[ch] as f64;
                        let top = v(ya, xa) * (1.0 - fx) + v(ya, xb) * fx;
                        let bot = v(yb, xa) * (1.0 - fx) + v(yb, xb) * fx;
                        *slot = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
                    }
                    out.set_pixel(yt, xt, px);
                }
            }
        }
    }
    out
}

/// Edge-aware bilinear sample of `depth` at continuous pixel coordinates,
/// restricted to the inclusive pixel window `(x0, y0, x1, y1)`.
///
/// Returns `None` if any contributing neighbour is invalid or the
/// contributing neighbours span more than [`DISCONTINUITY_THRESHOLD`].
pub fn sample_depth_bilinear(depth: &DepthMap, x: f64, y: f64, window: (usize, usize, usize, usize)) -> Option<f64> {
    let (wx0, wy0, wx1, wy1) = window;
    let x = x.clamp(wx0 as f64, wx1 as f64);
    let y = y.clamp(wy0 as f64, wy1 as f64);
    let xa = x.floor() as usize;
    let ya = y.floor() as usize;
    let fx = x - xa as f64;
    let fy = y - ya as f64;
    let xb = (xa + 1).min(wx1);
    let yb = (ya + 1).min(wy1);
    let taps = [
        (ya, xa, (1.0 - fx) * (1.0 - fy)),
        (ya, xb, fx * (1.0 - fy)),
        (yb, xa, (1.0 - fx) * fy),
        (yb, xb, fx * fy),
    ];
    let mut acc = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (r, c, w) in taps {
        if w <= 0.0 {
            continue;
        }
        let d = depth.get(r, c)?;
        lo = lo.min(d);
        hi = hi.max(d);
        acc += w * d;
    }
    if hi - lo > DISCONTINUITY_THRESHOLD {
        return None;
    }
    Some(acc)
}

/// Re-expresses an estimator prediction on the original image grid.
/// Only pixels inside the plan's source box receive depth.
pub fn depth_to_source_grid(pred: &DepthMap, plan: &CropPlan) -> Result<DepthMap, LiftError> {
    check_dims("prediction", pred.width(), pred.height(), plan.target_width, plan.target_height)?;
    let mut out = vec![f32::NAN; plan.image_width * plan.image_height];
    let b = plan.source_box;
    let window = match plan.mode {
        CropMode::Pad => (0, 0, plan.target_width - 1, plan.target_height - 1),
        CropMode::Resize => plan.content_range(),
    };
    for ys in b.y0..b.y0 + b.height {
        for xs in b.x0..b.x0 + b.width {
            let (xt, yt) = plan.source_to_target(xs as f64, ys as f64);
            let d = match plan.mode {
                CropMode::Pad => pred.get(yt.round() as usize, xt.round() as usize),
                CropMode::Resize => sample_depth_bilinear(pred, xt, yt, window),
            };
            if let Some(d) = d {
                out[ys * plan.image_width + xs] = d as f32;
            }
        }
    }
    DepthMap::new(plan.image_width, plan.image_height, out)
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct DepthSourceError(pub String);

/// A monocular depth estimator.
///
/// `estimate` receives the prepared estimator input and the plan that
/// produced it; estimators that work purely from pixels ignore the plan.
/// Output must have exactly the reported native size.
pub trait DepthSource {
    fn native_size(&self) -> (usize, usize);
    fn estimate(&mut self, input: &ImageFrame, plan: &CropPlan) -> Result<DepthMap, DepthSourceError>;
}

/// Returns the same depth everywhere.
#[derive(Debug, Clone)]
pub struct ConstantDepthSource {
    pub value: f32,
    pub native: (usize, usize),
}

impl DepthSource for ConstantDepthSource {
    fn native_size(&self) -> (usize, usize) {
        self.native
    }

    fn estimate(&mut self, _input: &ImageFrame, _plan: &CropPlan) -> Result<DepthMap, DepthSourceError> {
        DepthMap::constant(self.native.0, self.native.1, self.value).map_err(|e| DepthSourceError(e.to_string()))
    }
}

/// Mock estimator that answers with a known full-resolution depth map seen
/// through the crop plan, optionally with seeded Gaussian noise.
#[derive(Debug, Clone)]
pub struct GroundTruthDepthSource {
    truth: DepthMap,
    native: (usize, usize),
    noise_sigma: f64,
    seed: u64,
}

impl GroundTruthDepthSource {
    pub fn new(truth: DepthMap, native: (usize, usize)) -> Self {
        Self { truth, native, noise_sigma: 0.0, seed: 0 }
    }

    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.noise_sigma = sigma;
        self.seed = seed;
        self
    }
}

impl DepthSource for GroundTruthDepthSource {
    fn native_size(&self) -> (usize, usize) {
        self.native
    }

    fn estimate(&mut self, _input: &ImageFrame, plan: &CropPlan) -> Result<DepthMap, DepthSourceError> {
        if (plan.image_width, plan.image_height) != (self.truth.width(), self.truth.height()) {
            return Err(DepthSourceError(format!(
                "plan is for a {}x{} image, truth is {}x{}",
                plan.image_width,
                plan.image_height,
                self.truth.width(),
                self.truth.height()
            )));
        }
        let (nw, nh) = self.native;
        let mut out = vec![f32::NAN; nw * nh];
        let b = plan.source_box;
        let box_window = (b.x0, b.y0, b.x0 + b.width - 1, b.y0 + b.height - 1);
        let (cx0, cy0, cx1, cy1) = plan.content_range();
        for yt in cy0..=cy1.min(nh - 1) {
            for xt in cx0..=cx1.min(nw - 1) {
                let (xs, ys) = plan.target_to_source(xt as f64, yt as f64);
                let d = match plan.mode {
                    CropMode::Pad => {
                        let (xs, ys) = (xs.round() as i64, ys.round() as i64);
                        if xs < 0 || ys < 0 || xs as usize >= self.truth.width() || ys as usize >= self.truth.height() {
                            None
                        } else {
                            self.truth.get(ys as usize, xs as usize)
                        }
                    }
                    CropMode::Resize => sample_depth_bilinear(&self.truth, xs, ys, box_window),
                };
                if let Some(d) = d {
                    out[yt * nw + xt] = d as f32;
                }
            }
        }
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let normal = Normal::new(0.0, self.noise_sigma).map_err(|e| DepthSourceError(e.to_string()))?;
            for d in out.iter_mut().filter(|d| d.is_finite()) {
                *d = (*d as f64 + normal.sample(&mut rng)) as f32;
            }
        }
        DepthMap::new(nw, nh, out).map_err(|e| DepthSourceError(e.to_string()))
    }
}

/// Reads a precomputed prediction from a depth blob on disk. The blob's
/// dimensions are the native resolution.
#[derive(Debug, Clone)]
pub struct FileDepthSource {
    path: PathBuf,
    native: (usize, usize),
}

impl FileDepthSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DepthSourceError> {
        let path = path.as_ref().to_path_buf();
        let depth = crate::io::blob::read_depth(&path).map_err(|e| DepthSourceError(e.to_string()))?;
        Ok(Self { native: (depth.width(), depth.height()), path })
    }
}

impl DepthSource for FileDepthSource {
    fn native_size(&self) -> (usize, usize) {
        self.native
    }

    fn estimate(&mut self, _input: &ImageFrame, _plan: &CropPlan) -> Result<DepthMap, DepthSourceError> {
        crate::io::blob::read_depth(&self.path).map_err(|e| DepthSourceError(e.to_string()))
    }
}

/// Lifts the edited image through a depth estimator.
///
/// Plans the crop around both masks, runs `src` on the prepared input, maps
/// the prediction back to the original grid and back-projects only the
/// pixels of the mask union. Pixel indices refer to the original image.
pub fn lift_edited(
    edit: &ImageFrame,
    masks: &ObjectMasks,
    src: &mut dyn DepthSource,
    intr: &CameraIntrinsics,
    features: &FeatureMap,
    margin: usize,
) -> Result<FeatureCloud, LiftError> {
    let union = masks.union();
    check_dims("edited image", edit.width(), edit.height(), union.width(), union.height())?;
    let (nw, nh) = src.native_size();
    let plan = plan_crop(&union, nw, nh, margin)?;
    let input = prepare_input(edit, &plan);
    let pred = src.estimate(&input, &plan).map_err(|e| LiftError::DepthSourceFailure(e.0))?;
    if (pred.width(), pred.height()) != (nw, nh) {
        return Err(LiftError::DepthSourceFailure(format!(
            "estimator returned {}x{}, reported native size {}x{}",
            pred.width(),
            pred.height(),
            nw,
            nh
        )));
    }
    let grid = depth_to_source_grid(&pred, &plan)?;
    backproject_region(&grid, intr, edit, features, masks, Some(&union))
}
