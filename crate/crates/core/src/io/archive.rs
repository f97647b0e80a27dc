//! Scene archives: one directory per scene state.
//!
//! ```text
//! <scene>/
//!   meta.json          format_version, size, intrinsics, o2w, instruction, feature_dim, has_points, has_grasps
//!   image.ppm          8-bit RGB (binary PPM)
//!   depth.bin          depth blob, f32 meters, NaN = invalid
//!   features.bin       feature blob, f32, dimension from the header
//!   mask_active.pgm    8-bit PGM, 0 / 255
//!   mask_passive.pgm   8-bit PGM, 0 / 255
//!   points.bin         optional point-map blob, f64 xyz
//!   grasps.json        optional grasp candidates
//! ```
//!
//! Saving a loaded archive reproduces it byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{blob, pnm, read_json, write_json, IoError};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::grasp::GraspRecord;
use crate::lift::ObjectMasks;
use crate::scene::SceneBundle;

pub const FORMAT_VERSION: u32 = 1;

pub const META: &str = "meta.json";
pub const IMAGE: &str = "image.ppm";
pub const DEPTH: &str = "depth.bin";
pub const FEATURES: &str = "features.bin";
pub const MASK_ACTIVE: &str = "mask_active.pgm";
pub const MASK_PASSIVE: &str = "mask_passive.pgm";
pub const POINTS: &str = "points.bin";
pub const GRASPS: &str = "grasps.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub o2w: RigidTransform,
    pub instruction: String,
    pub feature_dim: usize,
    pub has_points: bool,
    pub has_grasps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspFile {
    pub format_version: u32,
    pub grasps: Vec<GraspRecord>,
}

/// Reads `meta.json` without checking `format_version` first, so a version
/// mismatch is reported as such even when the schema changed.
fn read_meta(path: &Path) -> Result<SceneMeta, IoError> {
    let raw: serde_json::Value = read_json(path)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(IoError::FormatVersionMismatch {
                file: path.to_path_buf(),
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(IoError::invariant(path, "format_version", "missing or not an integer".into())),
    }
    serde_json::from_value(raw).map_err(|e| IoError::invariant(path, "meta", e.to_string()))
}

pub fn load_scene(dir: &Path) -> Result<SceneBundle, IoError> {
    if !dir.is_dir() {
        return Err(IoError::MissingFile(dir.to_path_buf()));
    }
    let meta_path = dir.join(META);
    let meta = read_meta(&meta_path)?;
    if (meta.intrinsics.width, meta.intrinsics.height) != (meta.width, meta.height) {
        return Err(IoError::invariant(
            &meta_path,
            "intrinsics",
            format!("intrinsics are {}x{}, scene is {}x{}", meta.intrinsics.width, meta.intrinsics.height, meta.width, meta.height),
        ));
    }
    meta.intrinsics.validate().map_err(|e| IoError::invariant(&meta_path, "intrinsics", e.to_string()))?;

    let image = pnm::read_image(&dir.join(IMAGE))?;
    let depth = blob::read_depth(&dir.join(DEPTH))?;
    let features_path = dir.join(FEATURES);
    let features = blob::read_features(&features_path)?;
    if features.dim() != meta.feature_dim {
        return Err(IoError::invariant(
            &features_path,
            "dim",
            format!("blob header declares {}, meta.json declares {}", features.dim(), meta.feature_dim),
        ));
    }
    let masks = ObjectMasks {
        active: pnm::read_mask(&dir.join(MASK_ACTIVE))?,
        passive: pnm::read_mask(&dir.join(MASK_PASSIVE))?,
    };
    let points = if meta.has_points { Some(blob::read_points(&dir.join(POINTS))?) } else { None };
    let grasps = if meta.has_grasps {
        let gpath = dir.join(GRASPS);
        let file: GraspFile = read_json(&gpath)?;
        if file.format_version != FORMAT_VERSION {
            return Err(IoError::FormatVersionMismatch { file: gpath, found: file.format_version, expected: FORMAT_VERSION });
        }
        for (i, g) in file.grasps.iter().enumerate() {
            g.validate().map_err(|m| IoError::invariant(&gpath, "grasps", format!("grasp {i}: {m}")))?;
        }
        Some(file.grasps)
    } else {
        None
    };

    let bundle = SceneBundle {
        image,
        depth,
        intr: meta.intrinsics,
        o2w: meta.o2w,
        masks,
        features,
        instruction: meta.instruction,
        points,
        grasps,
    };
    bundle.validate().map_err(|(field, msg)| IoError::invariant(dir, field, msg))?;
    Ok(bundle)
}

pub fn save_scene(bundle: &SceneBundle, dir: &Path) -> Result<(), IoError> {
    bundle.validate().map_err(|(field, msg)| IoError::invariant(dir, field, msg))?;
    std::fs::create_dir_all(dir).map_err(|e| IoError::Io { path: dir.to_path_buf(), source: e })?;
    let meta = SceneMeta {
        format_version: FORMAT_VERSION,
        width: bundle.width(),
        height: bundle.height(),
        intrinsics: bundle.intr,
        o2w: bundle.o2w,
        instruction: bundle.instruction.clone(),
        feature_dim: bundle.features.dim(),
        has_points: bundle.points.is_some(),
        has_grasps: bundle.grasps.is_some(),
    };
    write_json(&dir.join(META), &meta)?;
    pnm::write_image(&dir.join(IMAGE), &bundle.image)?;
    blob::write_depth(&dir.join(DEPTH), &bundle.depth)?;
    blob::write_features(&dir.join(FEATURES), &bundle.features)?;
    pnm::write_mask(&dir.join(MASK_ACTIVE), &bundle.masks.active)?;
    pnm::write_mask(&dir.join(MASK_PASSIVE), &bundle.masks.passive)?;
    if let Some(p) = &bundle.points {
        blob::write_points(&dir.join(POINTS), p)?;
    }
    if let Some(g) = &bundle.grasps {
        write_json(&dir.join(GRASPS), &GraspFile { format_version: FORMAT_VERSION, grasps: g.clone() })?;
    }
    Ok(())
}
