//! Hierarchical 2D-3D point cloud filtering.
//!
//! Flying-edge points sit right next to valid geometry, so spatial
//! clustering alone keeps them, but they carry the appearance features of
//! whatever lies behind the silhouette. The filter therefore:
//!
//! 1. standardises the features,
//! 2. splits the cloud into `k_layers` feature layers with k-means and runs
//!    DBSCAN inside each layer, keeping only a layer's dominant spatial
//!    cluster when it has at least `s_min` points (layers smaller than
//!    `min_pts` are dropped outright),
//! 3. runs DBSCAN once more over all survivors and keeps the dominant
//!    cluster.

pub mod dbscan;
pub mod kmeans;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FeatureCloud, Mask, Vec3};

pub use dbscan::{dbscan, dominant_cluster, NOISE};
pub use kmeans::{kmeans, standardize_features};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot filter an empty cloud")]
    EmptyCloud,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("every point was rejected")]
    AllPointsRejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub k_layers: usize,
    pub eps: f64,
    pub min_pts: usize,
    pub s_min: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { k_layers: 5, eps: 0.02, min_pts: 10, s_min: 30, seed: 0 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: &str| Err(FilterError::InvalidConfig(m.to_string()));
        if self.k_layers < 1 {
            return bad("k_layers must be at least 1");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.min_pts < 1 {
            return bad("min_pts must be at least 1");
        }
        if self.s_min < self.min_pts {
            return bad("s_min must be at least min_pts");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub size: usize,
    pub dbscan_clusters: usize,
    pub dominant_size: usize,
    /// Global id given to the layer's dominant cluster, if accepted.
    pub gid: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub input: usize,
    pub layers: Vec<LayerStats>,
    pub after_intra: usize,
    pub after_inter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub kept: FeatureCloud,
    /// Indices into the input cloud, ascending.
    pub kept_indices: Vec<usize>,
    pub kept_mask: Mask,
    /// Per input point: the global cluster id of its layer, or -1.
    pub cluster_labels: Vec<i32>,
    pub stage_stats: StageStats,
}

pub fn hierarchical_filter(cloud: &FeatureCloud, cfg: &FilterConfig) -> Result<FilterResult, FilterError> {
    cfg.validate()?;
    let n = cloud.len();
    if n == 0 {
        return Err(FilterError::EmptyCloud);
    }

    // Stage 1 and the layering of stage 2. With fewer points than layers,
    // every point becomes its own layer.
    let k = cfg.k_layers.min(n);
    let layer_of: Vec<usize> = if n == 1 {
        vec![0]
    } else {
        let z = standardize_features(cloud.features(), cloud.feature_dim())?;
        kmeans(&z, k, cfg.seed)?
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in layer_of.iter().enumerate() {
        members[l].push(i);
    }

    // Stage 2: intra-layer DBSCAN, independent per layer.
    let points = cloud.points();
    let per_layer: Vec<(usize, usize, Option<Vec<usize>>)> = members
        .par_iter()
        .map(|idx| {
            if idx.len() < cfg.min_pts {
                return (0, 0, None);
            }
            let local: Vec<Vec3> = idx.iter().map(|&i| points[i]).collect();
            let labels = dbscan(&local, cfg.eps, cfg.min_pts);
            let nclusters = dbscan::cluster_sizes(&labels).len();
            match dominant_cluster(&labels) {
                None => (nclusters, 0, None),
                Some((c, size)) => {
                    let chosen = (size >= cfg.s_min)
                        .then(|| idx.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(&i, _)| i).collect());
                    (nclusters, size, chosen)
                }
            }
        })
        .collect();

    let mut labels = vec![NOISE; n];
    let mut layers = Vec::with_capacity(k);
    let mut gid = 0usize;
    for (idx, (nclusters, dom, chosen)) in members.iter().zip(per_layer) {
        let mut stats = LayerStats { size: idx.len(), dbscan_clusters: nclusters, dominant_size: dom, gid: None };
        if let Some(chosen) = chosen {
            for i in chosen {
                labels[i] = gid as i32;
            }
            stats.gid = Some(gid);
            gid += 1;
        }
        layers.push(stats);
    }
    let intra: Vec<usize> = (0..n).filter(|&i| labels[i] >= 0).collect();
    if intra.is_empty() {
        return Err(FilterError::AllPointsRejected);
    }

    // Stage 3: one DBSCAN over every survivor.
    let survivors: Vec<Vec3> = intra.iter().map(|&i| points[i]).collect();
    let y = dbscan(&survivors, cfg.eps, cfg.min_pts);
    let (c_star, _) = dominant_cluster(&y).ok_or(FilterError::AllPointsRejected)?;
    let mut kept_indices = Vec::new();
    for (&i, &l) in intra.iter().zip(&y) {
        if l == c_star {
            kept_indices.push(i);
        } else {
            labels[i] = NOISE;
        }
    }

    let kept = cloud.select(&kept_indices);
    let kept_mask = kept.pixel_mask();
    Ok(FilterResult {
        stage_stats: StageStats { input: n, layers, after_intra: intra.len(), after_inter: kept_indices.len() },
        kept,
        kept_indices,
        kept_mask,
        cluster_labels: labels,
    })
}

/// Plain spatial DBSCAN keeping the dominant cluster; the baseline the
/// hierarchical filter is compared against.
pub fn spatial_dbscan_filter(cloud: &FeatureCloud, eps: f64, min_pts: usize) -> Result<Vec<usize>, FilterError> {
    if cloud.is_empty() {
        return Err(FilterError::EmptyCloud);
    }
    let y = dbscan(cloud.points(), eps, min_pts);
    let (c, _) = dominant_cluster(&y).ok_or(FilterError::AllPointsRejected)?;
    Ok((0..cloud.len()).filter(|&i| y[i] == c).collect())
}
