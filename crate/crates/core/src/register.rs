//! Per-object similarity estimation and the inter-object transform.
//!
//! Each object's correspondences are explained by a similarity
//! `q = s R p + t` from the observation frame to the (arbitrarily scaled)
//! edited frame. The passive object is static, so its similarity describes
//! the edited frame itself; forcing the active object onto the same scale
//! and factoring the passive similarity out leaves the active object's rigid
//! motion in the observation frame, which is then conjugated into the world
//! frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspond::CorrespondenceSet;
use crate::geometry::{centroid, reorthonormalize, FeatureCloud, GeometryError, Mat3, RigidTransform, SimilarityTransform, Vec3};
use crate::linalg::svd3;

/// Relative singular-value floor for the rank test.
const RANK_TOL: f64 = 1e-12;
pub const SCALE_GAP_WARNING: f64 = 0.5;
const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegisterError {
    #[error("need at least 3 point pairs, got {0}")]
    TooFewPoints(usize),
    #[error("point arrays differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("scales differ (active {active}, passive {passive}); unify them first")]
    ScaleMismatch { active: f64, passive: f64 },
    #[error("passive scale {0} is not usable as the unified scale")]
    UnifiedScaleNonPositive(f64),
    #[error("fixed scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

struct Centered {
    mu_p: Vec3,
    mu_q: Vec3,
    var_p: f64,
    rotation: Mat3,
    /// `tr(D S)`: sum of singular values with the reflection sign applied.
    trace_ds: f64,
}

fn solve_rotation(obs: &[Vec3], edit: &[Vec3]) -> Result<Centered, RegisterError> {
    if obs.len() != edit.len() {
        return Err(RegisterError::LengthMismatch(obs.len(), edit.len()));
    }
    let n = obs.len();
    if n < 3 {
        return Err(RegisterError::TooFewPoints(n));
    }
    if obs.iter().chain(edit).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(GeometryError::NonFinite("registration points").into());
    }
    let mu_p = centroid(obs);
    let mu_q = centroid(edit);
    let mut sigma = Mat3::zeros();
    let mut var_p = 0.0;
    for (p, q) in obs.iter().zip(edit) {
        let dp = p - mu_p;
        sigma += (q - mu_q) * dp.transpose();
        var_p += dp.norm_squared();
    }
    sigma /= n as f64;
    var_p /= n as f64;
    if !(var_p > 0.0) {
        return Err(RegisterError::DegenerateGeometry("observed points coincide".into()));
    }
    let svd = svd3(&sigma);
    let rank = svd.rank(RANK_TOL);
    if rank < 2 {
        return Err(RegisterError::DegenerateGeometry(format!("cross-covariance has rank {rank}")));
    }
    let mut s = Vec3::new(1.0, 1.0, 1.0);
    if svd.u.determinant() * svd.v.determinant() < 0.0 {
        s.z = -1.0;
    }
    let rotation = reorthonormalize(svd.u * Mat3::from_diagonal(&s) * svd.v.transpose());
    Ok(Centered { mu_p, mu_q, var_p, rotation, trace_ds: svd.singular.dot(&s) })
}

/// Least-squares similarity `(s, R, t)` minimising `sum |s R p_i + t - q_i|^2`.
pub fn umeyama(obs: &[Vec3], edit: &[Vec3]) -> Result<SimilarityTransform, RegisterError> {
    let c = solve_rotation(obs, edit)?;
    let scale = c.trace_ds / c.var_p;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(RegisterError::DegenerateGeometry(format!("estimated scale {scale}")));
    }
    let t = c.mu_q - scale * (c.rotation * c.mu_p);
    Ok(SimilarityTransform::new(scale, c.rotation, t)?)
}

/// Best rotation and translation for a prescribed scale. The rotation does
/// not depend on the scale, so it equals the Umeyama rotation.
pub fn fixed_scale_align(obs: &[Vec3], edit: &[Vec3], s: f64) -> Result<(Mat3, Vec3), RegisterError> {
    if !(s.is_finite() && s > 0.0) {
        return Err(RegisterError::InvalidScale(s));
    }
    let c = solve_rotation(obs, edit)?;
    Ok((c.rotation, c.mu_q - s * (c.rotation * c.mu_p)))
}

/// Active motion in the observation frame from two similarities that share
/// one scale: `R = R_p^T R_a`, `t = R_p^T (t_a / s_a - t_p / s_p)`.
pub fn relative_transform(res_p: &SimilarityTransform, res_a: &SimilarityTransform) -> Result<RigidTransform, RegisterError> {
    if res_a.scale() != res_p.scale() {
        return Err(RegisterError::ScaleMismatch { active: res_a.scale(), passive: res_p.scale() });
    }
    Ok(relative_transform_unchecked(res_p, res_a))
}

/// The same formula without the shared-scale requirement; used to measure
/// what happens when the scales are left decoupled.
pub fn relative_transform_unchecked(res_p: &SimilarityTransform, res_a: &SimilarityTransform) -> RigidTransform {
    let rpt = res_p.rotation().transpose();
    RigidTransform::from_parts_reorthonormalized(
        rpt * res_a.rotation(),
        rpt * (res_a.translation() / res_a.scale() - res_p.translation() / res_p.scale()),
    )
}

/// Conjugates an observation-frame motion into the world frame:
/// `R_w = R_o2w R R_o2w^T`, `t_w = R_o2w t + t_o2w - R_w t_o2w`.
pub fn to_world(rel: &RigidTransform, o2w: &RigidTransform) -> RigidTransform {
    let ro = o2w.rotation();
    let to = o2w.translation();
    let rw = ro * rel.rotation() * ro.transpose();
    let tw = ro * rel.translation() + to - rw * to;
    RigidTransform::from_parts_reorthonormalized(rw, tw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegisterOptions {
    /// Force the active scale to the passive one (the default). When off,
    /// the active object's own scale is used in the relative transform.
    pub scale_align: bool,
    /// Reserved outlier-rejection hook: refit each object once after
    /// dropping this fraction of its worst pairs. Off by default.
    pub trim_fraction: Option<f64>,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        Self { scale_align: true, trim_fraction: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub passive: f64,
    pub active: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub passive: SimilarityTransform,
    pub active_raw: SimilarityTransform,
    pub active_unified: SimilarityTransform,
    pub rel_obs: RigidTransform,
    #[serde(rename = "t_a_world")]
    pub t_a_world: RigidTransform,
    /// RMS point error in the edited frame.
    pub residuals: Residuals,
    pub scale_gap: f64,
    pub scale_aligned: bool,
    pub warnings: Vec<String>,
}

fn gather(obs: &FeatureCloud, edit: &FeatureCloud, c: &CorrespondenceSet) -> (Vec<Vec3>, Vec<Vec3>) {
    c.pairs.iter().map(|&(i, j)| (obs.points()[i], edit.points()[j])).unzip()
}

pub fn rms_residual(t: &SimilarityTransform, obs: &[Vec3], edit: &[Vec3]) -> f64 {
    if obs.is_empty() {
        return 0.0;
    }
    (obs.iter().zip(edit).map(|(p, q)| (t.apply_point(p) - q).norm_squared()).sum::<f64>() / obs.len() as f64).sqrt()
}

fn trimmed(obs: Vec<Vec3>, edit: Vec<Vec3>, frac: Option<f64>) -> Result<(Vec<Vec3>, Vec<Vec3>), RegisterError> {
    let Some(frac) = frac else { return Ok((obs, edit)) };
    let t = umeyama(&obs, &edit)?;
    let mut order: Vec<(f64, usize)> =
        obs.iter().zip(&edit).enumerate().map(|(i, (p, q))| ((t.apply_point(p) - q).norm_squared(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = ((obs.len() as f64) * (1.0 - frac.clamp(0.0, 0.9))).ceil().max(3.0) as usize;
    let mut idx: Vec<usize> = order.into_iter().take(keep).map(|(_, i)| i).collect();
    idx.sort_unstable();
    Ok((idx.iter().map(|&i| obs[i]).collect(), idx.iter().map(|&i| edit[i]).collect()))
}

/// End-to-end registration of one scene pair.
pub fn register_pair(
    obs: &FeatureCloud,
    edit: &FeatureCloud,
    c_p: &CorrespondenceSet,
    c_a: &CorrespondenceSet,
    o2w: &RigidTransform,
    opts: &RegisterOptions,
) -> Result<RegistrationResult, RegisterError> {
    let (pp, pq) = gather(obs, edit, c_p);
    let (ap, aq) = gather(obs, edit, c_a);
    let (pp, pq) = trimmed(pp, pq, opts.trim_fraction)?;
    let (ap, aq) = trimmed(ap, aq, opts.trim_fraction)?;

    let (passive, active_raw) = rayon::join(|| umeyama(&pp, &pq), || umeyama(&ap, &aq));
    let (passive, active_raw) = (passive?, active_raw?);
    let s_p = passive.scale();
    if !(s_p >= MIN_SCALE) {
        return Err(RegisterError::UnifiedScaleNonPositive(s_p));
    }
    let (r_u, t_u) = fixed_scale_align(&ap, &aq, s_p)?;
    let active_unified = SimilarityTransform::new(s_p, r_u, t_u)?;

    let scale_gap = (active_raw.scale() / s_p - 1.0).abs();
    let mut warnings = Vec::new();
    if scale_gap >= SCALE_GAP_WARNING {
        let msg = format!(
            "active/passive scale gap {scale_gap:.3} (s_a = {:.4}, s_p = {s_p:.4}) is unusually large",
            active_raw.scale()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let (rel_obs, active_used) = if opts.scale_align {
        (relative_transform(&passive, &active_unified)?, &active_unified)
    } else {
        (relative_transform_unchecked(&passive, &active_raw), &active_raw)
    };
    let t_a_world = to_world(&rel_obs, o2w);
    let residuals = Residuals { passive: rms_residual(&passive, &pp, &pq), active: rms_residual(active_used, &ap, &aq) };

    Ok(RegistrationResult {
        passive,
        active_raw,
        active_unified,
        rel_obs,
        t_a_world,
        residuals,
        scale_gap,
        scale_aligned: opts.scale_align,
        warnings,
    })
}
