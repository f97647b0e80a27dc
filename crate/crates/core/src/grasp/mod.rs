//! Goal-state grasp filtering.
//!
//! Each candidate grasp is carried along with the active object by `T_a`
//! (gripper and object are assumed rigidly attached) and rejected when any
//! sampled gripper point ends up within `margin` of the passive object's
//! convex hull.

pub mod hull;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use hull::{ConvexHull, HullError};

use crate::geometry::{RigidTransform, Vec3};

pub const DEFAULT_MARGIN: f64 = 0.005;
/// Inflation of the bounding-box stand-in for planar passive clouds.
pub const OBB_INFLATION: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct GraspCandidate {
    /// Gripper frame to world.
    pub pose: RigidTransform,
    pub score: f64,
    /// Gripper-frame sample points.
    pub gripper_points: Vec<Vec3>,
}

/// Serialized form of a candidate; a missing point set means the default
/// parallel-jaw gripper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspRecord {
    pub pose: RigidTransform,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gripper_points: Option<Vec<[f64; 3]>>,
}

impl GraspRecord {
    pub fn validate(&self) -> Result<(), String> {
        if !self.score.is_finite() {
            return Err(format!("score {} is not finite", self.score));
        }
        if let Some(pts) = &self.gripper_points {
            if pts.is_empty() {
                return Err("gripper_points is empty".into());
            }
            if pts.iter().flatten().any(|v| !v.is_finite()) {
                return Err("gripper_points has non-finite entries".into());
            }
        }
        Ok(())
    }

    pub fn to_candidate(&self, default_gripper: &[Vec3]) -> GraspCandidate {
        GraspCandidate {
            pose: self.pose,
            score: self.score,
            gripper_points: match &self.gripper_points {
                Some(p) => p.iter().map(|&x| Vec3::from(x)).collect(),
                None => default_gripper.to_vec(),
            },
        }
    }
}

/// Parallel-jaw gripper sampled on a grid of at most 5 mm spacing.
///
/// Frame: origin midway between the fingertips' inner faces, approach
/// along +z, fingers opening along y. Fingers are 10 mm (x) by 10 mm (y)
/// by 50 mm (z, from -40 mm to +10 mm) with inner faces at y = ±40 mm; the
/// palm spans y in [-50, 50] mm at z in [-50, -40] mm.
pub fn default_gripper() -> Vec<Vec3> {
    fn grid(lo: Vec3, hi: Vec3, step: f64, out: &mut Vec<Vec3>) {
        let n = |a: f64, b: f64| ((b - a) / step).round() as usize;
        let (nx, ny, nz) = (n(lo.x, hi.x), n(lo.y, hi.y), n(lo.z, hi.z));
        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    out.push(Vec3::new(
                        lo.x + (hi.x - lo.x) * i as f64 / nx.max(1) as f64,
                        lo.y + (hi.y - lo.y) * j as f64 / ny.max(1) as f64,
                        lo.z + (hi.z - lo.z) * k as f64 / nz.max(1) as f64,
                    ));
                }
            }
        }
    }
    let mut pts = Vec::new();
    let step = 0.005;
    grid(Vec3::new(-0.005, 0.04, -0.04), Vec3::new(0.005, 0.05, 0.01), step, &mut pts);
    grid(Vec3::new(-0.005, -0.05, -0.04), Vec3::new(0.005, -0.04, 0.01), step, &mut pts);
    grid(Vec3::new(-0.005, -0.05, -0.05), Vec3::new(0.005, 0.05, -0.045), step, &mut pts);
    pts
}

/// Convex hull of the passive cloud, or an inflated oriented bounding box
/// when the cloud is planar, collinear or too small for a hull.
pub fn passive_hull(points: &[Vec3]) -> Result<ConvexHull, HullError> {
    match ConvexHull::new(points) {
        Ok(h) => Ok(h),
        Err(HullError::DegenerateInput(reason)) => {
            log::warn!("passive hull degenerate ({reason}); using inflated bounding box");
            ConvexHull::inflated_obb(points, OBB_INFLATION)
        }
    }
}

pub fn collides(hull: &ConvexHull, pts: &[Vec3], margin: f64) -> bool {
    pts.iter().any(|p| hull.signed_distance(p) < margin)
}

/// Goal-state world points of a candidate: `T_a ∘ pose` applied to the
/// gripper samples.
pub fn goal_points(cand: &GraspCandidate, t_a: &RigidTransform) -> Vec<Vec3> {
    let goal = t_a.compose(&cand.pose);
    cand.gripper_points.iter().map(|p| goal.apply_point(p)).collect()
}

/// Per-candidate keep flags, in input order.
pub fn classify_grasps(cands: &[GraspCandidate], t_a: &RigidTransform, hull: &ConvexHull, margin: f64) -> Vec<bool> {
    cands.par_iter().map(|c| !collides(hull, &goal_points(c, t_a), margin)).collect()
}

/// Keeps the candidates whose goal-state gripper stays clear of the hull,
/// preserving input order.
pub fn filter_grasps(cands: &[GraspCandidate], t_a: &RigidTransform, hull: &ConvexHull, margin: f64) -> Vec<GraspCandidate> {
    let keep = classify_grasps(cands, t_a, hull, margin);
    cands.iter().zip(keep).filter(|(_, k)| *k).map(|(c, _)| c.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(center: Vec3, half: f64) -> ConvexHull {
        let pts: Vec<Vec3> = (0..8)
            .map(|k| {
                center
                    + Vec3::new(
                        if k & 1 == 0 { -half } else { half },
                        if k & 2 == 0 { -half } else { half },
                        if k & 4 == 0 { -half } else { half },
                    )
            })
            .collect();
        ConvexHull::new(&pts).unwrap()
    }

    fn cand_at(t: Vec3, score: f64) -> GraspCandidate {
        GraspCandidate {
            pose: RigidTransform::new(crate::geometry::Mat3::identity(), t).unwrap(),
            score,
            gripper_points: default_gripper(),
        }
    }

    #[test]
    fn default_gripper_spacing() {
        let g = default_gripper();
        assert!(g.len() > 100);
        for p in &g {
            let nearest = g.iter().filter(|q| *q != p).map(|q| (q - p).norm()).fold(f64::INFINITY, f64::min);
            assert!(nearest <= 0.005 + 1e-12);
        }
    }

    #[test]
    fn far_hull_keeps_everything_in_order() {
        let hull = cube(Vec3::new(5.0, 5.0, 5.0), 0.1);
        let cands: Vec<_> = (0..5).map(|i| cand_at(Vec3::new(i as f64 * 0.2, 0.0, 0.0), 1.0 - i as f64 * 0.1)).collect();
        let kept = filter_grasps(&cands, &RigidTransform::identity(), &hull, DEFAULT_MARGIN);
        assert_eq!(kept, cands);
    }

    #[test]
    fn transported_grasp_inside_hull_is_rejected() {
        let hull = cube(Vec3::new(1.0, 0.0, 0.0), 0.05);
        let cands = vec![cand_at(Vec3::zeros(), 0.9), cand_at(Vec3::new(0.0, 0.0, 0.5), 0.8)];
        let t_a = RigidTransform::new(crate::geometry::Mat3::identity(), Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let kept = filter_grasps(&cands, &t_a, &hull, DEFAULT_MARGIN);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.8);
    }

    #[test]
    fn kept_set_shrinks_with_margin() {
        let hull = cube(Vec3::zeros(), 0.05);
        let cands: Vec<_> = (0..40).map(|i| cand_at(Vec3::new(0.0, 0.0, 0.04 + i as f64 * 0.004), 1.0)).collect();
        let mut prev = usize::MAX;
        for m in [0.0, 0.002, 0.005, 0.01, 0.03] {
            let keep = classify_grasps(&cands, &RigidTransform::identity(), &hull, m);
            let n = keep.iter().filter(|k| **k).count();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn planar_passive_falls_back_to_box() {
        let pts: Vec<Vec3> = (0..20).map(|i| Vec3::new((i % 5) as f64 * 0.01, (i / 5) as f64 * 0.01, 0.3)).collect();
        let h = passive_hull(&pts).unwrap();
        assert!(collides(&h, &[Vec3::new(0.02, 0.015, 0.303)], 0.0));
        assert!(!collides(&h, &[Vec3::new(0.02, 0.015, 0.31)], 0.0));
    }

    #[test]
    fn record_round_trip() {
        let r = GraspRecord { pose: RigidTransform::identity(), score: 0.5, gripper_points: None };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<GraspRecord>(&s).unwrap(), r);
        assert!(GraspRecord { gripper_points: Some(vec![]), ..r }.validate().is_err());
    }
}
