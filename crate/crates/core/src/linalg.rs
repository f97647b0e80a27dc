//! Small dense linear algebra for 3x3 problems.
//!
//! Everything here is deterministic and self-contained: the registration
//! code needs a 3x3 SVD that behaves identically on every platform, so it is
//! computed with one-sided Jacobi rotations rather than delegated to a
//! general-purpose solver.

use crate::geometry::{Mat3, Vec3};

/// Off-diagonal tolerance for the Jacobi sweeps.
const JACOBI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 64;

/// Thin SVD of a 3x3 matrix: `a = u * diag(singular) * v^T`.
///
/// Singular values are sorted in descending order. `v` is always a proper
/// rotation; `u` is orthonormal, and columns belonging to (numerically) zero
/// singular values are completed with cross products so that `u` is a proper
/// rotation as well whenever `a` is rank deficient.
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Mat3,
    pub singular: Vec3,
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        self.u * Mat3::from_diagonal(&self.singular) * self.v.transpose()
    }

    /// Number of singular values above `rel_tol * largest`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let top = self.singular[0];
        if top <= 0.0 || !top.is_finite() {
            return 0;
        }
        self.singular.iter().filter(|&&s| s > rel_tol * top).count()
    }
}

/// One-sided Jacobi SVD.
///
/// Columns of `a * v` are orthogonalised pairwise until every normalised
/// inner product drops below `1e-14`.
pub fn svd3(a: &Mat3) -> Svd3 {
    let mut b = *a;
    let mut v = Mat3::identity();

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0_f64;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let bp = b.column(p).into_owned();
            let bq = b.column(q).into_owned();
            let alpha = bp.norm_squared();
            let beta = bq.norm_squared();
            let gamma = bp.dot(&bq);
            if alpha == 0.0 || beta == 0.0 {
                continue;
            }
            let rel = gamma.abs() / (alpha * beta).sqrt();
            off = off.max(rel);
            if rel < JACOBI_TOL {
                continue;
            }
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let t = if zeta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            rotate_columns(&mut b, p, q, c, s);
            rotate_columns(&mut v, p, q, c, s);
        }
        if off < JACOBI_TOL {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    let norms = [b.column(0).norm(), b.column(1).norm(), b.column(2).norm()];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u = Mat3::zeros();
    let mut vs = Mat3::zeros();
    let mut singular = Vec3::zeros();
    for (k, &src) in order.iter().enumerate() {
        singular[k] = norms[src];
        vs.set_column(k, &v.column(src));
        if norms[src] > 0.0 {
            u.set_column(k, &(b.column(src) / norms[src]));
        }
    }

    // Complete `u` for vanishing singular values.
    let tiny = f64::EPSILON * 16.0 * singular[0].max(f64::MIN_POSITIVE);
    if singular[0] <= tiny {
        u = Mat3::identity();
    } else if singular[1] <= tiny {
        let u0 = u.column(0).into_owned();
        let helper = if u0.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u1 = u0.cross(&helper).normalize();
        u.set_column(1, &u1);
        u.set_column(2, &u0.cross(&u1));
    } else if singular[2] <= tiny {
        let u2 = u.column(0).cross(&u.column(1)).normalize();
        u.set_column(2, &u2);
    }

    // Keep v a proper rotation; flip the matching column of u.
    if vs.determinant() < 0.0 {
        let c = -vs.column(2).into_owned();
        vs.set_column(2, &c);
        let c = -u.column(2).into_owned();
        u.set_column(2, &c);
    }

    Svd3 { u, singular, v: vs }
}

fn rotate_columns(m: &mut Mat3, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..3 {
        let mp = m[(r, p)];
        let mq = m[(r, q)];
        m[(r, p)] = c * mp - s * mq;
        m[(r, q)] = s * mp + c * mq;
    }
}

/// Closest rotation to `m` in the Frobenius sense (polar factor with the
/// determinant forced to +1).
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = svd3(m);
    let mut d = Mat3::identity();
    if (svd.u * svd.v.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    svd.u * d * svd.v.transpose()
}

/// Largest absolute entry of `R^T R - I`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).abs().max()
}

/// Eigen-decomposition of a symmetric positive semi-definite matrix,
/// eigenvalues descending, eigenvectors as columns of a proper rotation.
pub fn symmetric_eigen_psd(m: &Mat3) -> (Vec3, Mat3) {
    let svd = svd3(m);
    (svd.singular, svd.v)
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let k = axis.normalize();
    let (s, c) = angle.sin_cos();
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * s + kx * kx * (1.0 - c)
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let r = a.transpose() * b;
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near zero; use the skew part there.
    if cos > 0.99 {
        let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        (0.5 * w.norm()).asin()
    } else {
        cos.acos()
    }
}
