//! Cross-state correspondences.
//!
//! The passive object does not move between the observed and edited images,
//! so its pairs come from shared pixels. The active object moves, so each of
//! its edited points is paired with the observed point of most similar
//! feature.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FeatureCloud, Label};

/// Observed points are scanned in blocks of this many.
const OBS_BLOCK: usize = 256;
/// Edited points handled per parallel task.
const EDIT_BLOCK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrespondError {
    #[error("observed and edited passive masks do not overlap")]
    NoOverlap,
    #[error("only {found} active matches under the threshold, need {needed}")]
    TooFewMatches { found: usize, needed: usize },
    #[error("clouds live on different image grids ({0:?} vs {1:?})")]
    GridMismatch((usize, usize), (usize, usize)),
    #[error("feature dimensions differ ({0} vs {1})")]
    FeatureDimMismatch(usize, usize),
    #[error("invalid match configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceKind {
    PassiveDense,
    ActiveFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    /// `(obs_index, edit_index)` into the full clouds.
    pub pairs: Vec<(usize, usize)>,
    /// Cosine distance `1 - <f_obs, f_edit>` per pair.
    pub feat_dist: Vec<f64>,
    pub kind: CorrespondenceKind,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Cosine-distance threshold; pairs must be strictly below it.
    pub d_thr: f64,
    pub min_pairs: usize,
    /// Optional extra gate on the Euclidean distance between the paired
    /// points (meters). Only meaningful when both clouds share a frame.
    pub spatial_gate: Option<f64>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { d_thr: 0.3, min_pairs: 10, spatial_gate: None }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), CorrespondError> {
        if !(self.d_thr > 0.0 && self.d_thr <= 2.0) {
            return Err(CorrespondError::InvalidConfig(format!("d_thr {} outside (0, 2]", self.d_thr)));
        }
        if self.min_pairs < 3 {
            return Err(CorrespondError::InvalidConfig("min_pairs must be at least 3".into()));
        }
        if let Some(g) = self.spatial_gate {
            if !(g.is_finite() && g > 0.0) {
                return Err(CorrespondError::InvalidConfig("spatial gate must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Dot product accumulated in f64, in dimension order.
#[inline]
pub fn feature_dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn check_compatible(obs: &FeatureCloud, edit: &FeatureCloud) -> Result<(), CorrespondError> {
    if obs.feature_dim() != edit.feature_dim() {
        return Err(CorrespondError::FeatureDimMismatch(obs.feature_dim(), edit.feature_dim()));
    }
    Ok(())
}

/// Pairs passive points that occupy the same pixel in both states, in
/// observed-index order.
pub fn passive_pairs(obs: &FeatureCloud, edit: &FeatureCloud) -> Result<CorrespondenceSet, CorrespondError> {
    check_compatible(obs, edit)?;
    if obs.image_size() != edit.image_size() {
        return Err(CorrespondError::GridMismatch(obs.image_size(), edit.image_size()));
    }
    let by_pixel: HashMap<(u32, u32), usize> = edit
        .indices_with_label(Label::Passive)
        .into_iter()
        .map(|j| (edit.pixel_index()[j], j))
        .collect();
    let mut pairs = Vec::new();
    let mut feat_dist = Vec::new();
    for i in obs.indices_with_label(Label::Passive) {
        if let Some(&j) = by_pixel.get(&obs.pixel_index()[i]) {
            pairs.push((i, j));
            feat_dist.push(1.0 - feature_dot(obs.feature(i), edit.feature(j)));
        }
    }
    if pairs.is_empty() {
        return Err(CorrespondError::NoOverlap);
    }
    Ok(CorrespondenceSet { pairs, feat_dist, kind: CorrespondenceKind::PassiveDense })
}

/// Best observed match `(obs_index, dot)` for every edited query, by exact
/// blocked search. Ties go to the lowest observed index.
pub fn nearest_by_feature(obs: &FeatureCloud, obs_idx: &[usize], edit: &FeatureCloud, edit_idx: &[usize]) -> Vec<Option<(usize, f64)>> {
    // Dimensions that are zero for every observed point add only zero
    // products, so they are left out; the remaining sum keeps its order.
    let dims: Vec<usize> =
        (0..obs.feature_dim()).filter(|&d| obs_idx.iter().any(|&i| obs.feature(i)[d] != 0.0)).collect();
    let pack = |cloud: &FeatureCloud, idx: &[usize]| -> Vec<f64> {
        idx.iter().flat_map(|&i| dims.iter().map(move |&d| cloud.feature(i)[d] as f64)).collect()
    };
    if dims.is_empty() {
        return vec![obs_idx.first().map(|&i| (i, 0.0)); edit_idx.len()];
    }
    let m = dims.len();
    let obs_f = pack(obs, obs_idx);
    let edit_f = pack(edit, edit_idx);
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let queries: Vec<&[f64]> = edit_f.chunks_exact(m).collect();
    queries
        .par_chunks(EDIT_BLOCK)
        .flat_map_iter(|queries| {
            let mut best: Vec<Option<(usize, f64)>> = vec![None; queries.len()];
            for (block, feats) in obs_idx.chunks(OBS_BLOCK).zip(obs_f.chunks(OBS_BLOCK * m)) {
                for (fq, slot) in queries.iter().zip(best.iter_mut()) {
                    for (&i, fo) in block.iter().zip(feats.chunks_exact(m)) {
                        let d = dot(fo, fq);
                        if slot.is_none_or(|(_, bd)| d > bd) {
                            *slot = Some((i, d));
                        }
                    }
                }
            }
            best
        })
        .collect()
}

/// For every edited active point, the observed active point of highest
/// feature similarity; kept when the cosine distance is below `d_thr`.
/// Output is in edited-index order.
pub fn active_pairs(obs: &FeatureCloud, edit: &FeatureCloud, cfg: &MatchConfig) -> Result<CorrespondenceSet, CorrespondError> {
    cfg.validate()?;
    check_compatible(obs, edit)?;
    let obs_idx = obs.indices_with_label(Label::Active);
    let edit_idx = edit.indices_with_label(Label::Active);
    let best = nearest_by_feature(obs, &obs_idx, edit, &edit_idx);
    let mut pairs = Vec::new();
    let mut feat_dist = Vec::new();
    for (&j, b) in edit_idx.iter().zip(best) {
        let Some((i, dot)) = b else { continue };
        let dist = 1.0 - dot;
        if dist >= cfg.d_thr {
            continue;
        }
        if let Some(g) = cfg.spatial_gate {
            if (obs.points()[i] - edit.points()[j]).norm() >= g {
                continue;
            }
        }
        pairs.push((i, j));
        feat_dist.push(dist);
    }
    if pairs.len() < cfg.min_pairs {
        return Err(CorrespondError::TooFewMatches { found: pairs.len(), needed: cfg.min_pairs });
    }
    Ok(CorrespondenceSet { pairs, feat_dist, kind: CorrespondenceKind::ActiveFeature })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RigidTransform, Vec3};

    fn one_hot_cloud(order: &[usize], label: Label) -> FeatureCloud {
        let n = order.len();
        let mut feats = vec![0.0f32; n * n];
        for (row, &k) in order.iter().enumerate() {
            feats[row * n + k] = 1.0;
        }
        FeatureCloud::new(
            (0..n).map(|i| Vec3::new(i as f64, 0.0, 1.0)).collect(),
            n,
            feats,
            (0..n).map(|i| (0, i as u32)).collect(),
            vec![label; n],
            n,
            1,
        )
        .unwrap()
    }

    #[test]
    fn identical_clouds_self_pair() {
        let c = one_hot_cloud(&(0..12).collect::<Vec<_>>(), Label::Active);
        let s = active_pairs(&c, &c, &MatchConfig::default()).unwrap();
        assert_eq!(s.pairs, (0..12).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(s.feat_dist.iter().all(|&d| d == 0.0));
        let c = one_hot_cloud(&(0..12).collect::<Vec<_>>(), Label::Passive);
        let s = passive_pairs(&c, &c).unwrap();
        assert_eq!(s.pairs, (0..12).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn permutation_is_inverted() {
        let perm = [3, 7, 0, 11, 5, 1, 9, 2, 10, 4, 8, 6];
        let obs = one_hot_cloud(&perm, Label::Active);
        let edit = one_hot_cloud(&(0..12).collect::<Vec<_>>(), Label::Active);
        let s = active_pairs(&obs, &edit, &MatchConfig::default()).unwrap();
        for &(i, j) in &s.pairs {
            assert_eq!(perm[i], j);
        }
        assert_eq!(s.len(), 12);
    }

    #[test]
    fn orthogonal_features_are_rejected() {
        // Obs uses basis vectors 0..12, edit uses 12..24: every cosine distance is 1.
        let basis = |offset: usize| -> FeatureCloud {
            FeatureCloud::new(
                (0..12).map(|i| Vec3::new(i as f64, 0.0, 1.0)).collect(),
                24,
                (0..12).flat_map(|r| (0..24).map(move |k| if k == offset + r { 1.0 } else { 0.0 })).collect(),
                (0..12).map(|i| (0, i)).collect(),
                vec![Label::Active; 12],
                12,
                1,
            )
            .unwrap()
        };
        assert_eq!(
            active_pairs(&basis(0), &basis(12), &MatchConfig::default()),
            Err(CorrespondError::TooFewMatches { found: 0, needed: 10 })
        );
    }

    #[test]
    fn passive_intersection_and_disjoint() {
        let full = one_hot_cloud(&(0..10).collect::<Vec<_>>(), Label::Passive);
        let half = full.select(&[1, 3, 5, 7, 9]);
        let s = passive_pairs(&full, &half).unwrap();
        assert_eq!(s.pairs, vec![(1, 0), (3, 1), (5, 2), (7, 3), (9, 4)]);
        let swapped = passive_pairs(&half, &full).unwrap();
        let mut back: Vec<_> = swapped.pairs.iter().map(|&(a, b)| (b, a)).collect();
        back.sort();
        assert_eq!(back, s.pairs);
        let active = one_hot_cloud(&(0..10).collect::<Vec<_>>(), Label::Active);
        assert_eq!(passive_pairs(&full, &active), Err(CorrespondError::NoOverlap));
    }

    #[test]
    fn matching_ignores_rigid_motion() {
        let perm = [3, 7, 0, 11, 5, 1, 9, 2, 10, 4, 8, 6];
        let obs = one_hot_cloud(&perm, Label::Active);
        let edit = one_hot_cloud(&(0..12).collect::<Vec<_>>(), Label::Active);
        let t = RigidTransform::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 0.9, Vec3::new(0.3, -1.0, 2.0));
        let a = active_pairs(&obs, &edit, &MatchConfig::default()).unwrap();
        let b = active_pairs(&obs.transformed(&t), &edit, &MatchConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
