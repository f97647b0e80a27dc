//! One captured or synthetic scene state.

use crate::geometry::{CameraIntrinsics, FeatureCloud, RigidTransform};
use crate::grasp::GraspRecord;
use crate::lift::{self, DepthMap, FeatureMap, ImageFrame, LiftError, ObjectMasks, PointMap};

/// Relative tolerance between a point map's z and the stored f32 depth.
const POINT_DEPTH_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub image: ImageFrame,
    pub depth: DepthMap,
    pub intr: CameraIntrinsics,
    pub o2w: RigidTransform,
    pub masks: ObjectMasks,
    pub features: FeatureMap,
    pub instruction: String,
    /// Optional dense point map. When present it is the authoritative
    /// geometry and `depth` holds its z component.
    pub points: Option<PointMap>,
    pub grasps: Option<Vec<GraspRecord>>,
}

/// `(field, message)` of the first violated invariant.
pub type Violation = (&'static str, String);

impl SceneBundle {
    pub fn width(&self) -> usize {
        self.intr.width
    }

    pub fn height(&self) -> usize {
        self.intr.height
    }

    /// Checks that every raster matches the intrinsics and that an optional
    /// point map agrees with the depth raster and with its pixel grid.
    pub fn validate(&self) -> Result<(), Violation> {
        self.intr.validate().map_err(|e| ("intrinsics", e.to_string()))?;
        let (w, h) = (self.width(), self.height());
        let dims = [
            ("image", self.image.width(), self.image.height()),
            ("depth", self.depth.width(), self.depth.height()),
            ("features", self.features.width(), self.features.height()),
            ("mask_active", self.masks.active.width(), self.masks.active.height()),
            ("mask_passive", self.masks.passive.width(), self.masks.passive.height()),
        ];
        for (field, fw, fh) in dims {
            if (fw, fh) != (w, h) {
                return Err((field, format!("raster is {fw}x{fh}, intrinsics say {w}x{h}")));
            }
        }
        let Some(pm) = &self.points else { return Ok(()) };
        if (pm.width(), pm.height()) != (w, h) {
            return Err(("points", format!("raster is {}x{}, intrinsics say {w}x{h}", pm.width(), pm.height())));
        }
        for row in 0..h {
            for col in 0..w {
                match (pm.get(row, col), self.depth.get(row, col)) {
                    (None, None) => {}
                    (Some(p), Some(d)) => {
                        if (p.z - d).abs() > POINT_DEPTH_REL_TOL * d {
                            return Err(("points", format!("pixel ({row}, {col}): z {} disagrees with depth {d}", p.z)));
                        }
                        let (u, v) = self.intr.project(&p);
                        if (u - col as f64).abs() > 0.5 + 1e-9 || (v - row as f64).abs() > 0.5 + 1e-9 {
                            return Err(("points", format!("pixel ({row}, {col}): point projects to ({u:.3}, {v:.3})")));
                        }
                    }
                    _ => return Err(("points", format!("pixel ({row}, {col}): validity differs from depth"))),
                }
            }
        }
        Ok(())
    }

    /// Lifts every valid pixel, from the point map when present and from
    /// the depth raster otherwise.
    pub fn lift(&self) -> Result<FeatureCloud, LiftError> {
        match &self.points {
            Some(pm) => lift::lift_point_map(pm, &self.features, &self.masks, None),
            None => lift::backproject(&self.depth, &self.intr, &self.image, &self.features, &self.masks),
        }
    }

    /// Like [`SceneBundle::lift`] but restricted to the two object masks.
    pub fn lift_objects(&self) -> Result<FeatureCloud, LiftError> {
        let union = self.masks.union();
        match &self.points {
            Some(pm) => lift::lift_point_map(pm, &self.features, &self.masks, Some(&union)),
            None => lift::backproject_region(&self.depth, &self.intr, &self.image, &self.features, &self.masks, Some(&union)),
        }
    }
}
