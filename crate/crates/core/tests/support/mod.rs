//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use editreg::geometry::{FeatureCloud, Label, RigidTransform, SimilarityTransform, Vec3};
use editreg::synth::Task;
use nalgebra::{Matrix3, Matrix4, Vector4};

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Seeds `0..per_task` for every task, task-major.
pub fn scene_ids(per_task: u64) -> Vec<(Task, u64)> {
    Task::ALL.into_iter().flat_map(|t| (0..per_task).map(move |s| (t, s))).collect()
}

// ---------------------------------------------------------------------------
// Point-in-hull by linear programming

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LpVerdict {
    Inside,
    /// Infeasible, with the phase-one dual direction when one was available.
    Outside(Option<Vec3>),
}

/// Is `q` a convex combination of `points`? Phase one of the simplex method
/// on `sum l_i (p_i - q) = 0`, `sum l_i = 1`, `l >= 0`, with artificial
/// variables. Entering columns follow Dantzig's rule, switching to Bland's
/// rule during runs of degenerate pivots. The basis is 4x4 so it is
/// refactored each iteration.
pub fn lp_in_hull(points: &[Vec3], q: &Vec3) -> LpVerdict {
    let n = points.len();
    let col = |k: usize| -> Vector4<f64> {
        if k < n {
            let d = points[k] - q;
            Vector4::new(d.x, d.y, d.z, 1.0)
        } else {
            let mut e = Vector4::zeros();
            e[k - n] = 1.0;
            e
        }
    };
    let rhs = Vector4::new(0.0, 0.0, 0.0, 1.0);
    let mut basis = [n, n + 1, n + 2, n + 3];
    let cost = |k: usize| if k >= n { 1.0 } else { 0.0 };
    const TOL: f64 = 1e-12;
    let mut degenerate_run = 0usize;
    for _ in 0..100_000 {
        let b = Matrix4::from_columns(&[col(basis[0]), col(basis[1]), col(basis[2]), col(basis[3])]);
        let Some(binv) = b.try_inverse() else { panic!("singular basis") };
        let x = binv * rhs;
        let cb = Vector4::new(cost(basis[0]), cost(basis[1]), cost(basis[2]), cost(basis[3]));
        let y = binv.transpose() * cb;
        let reduced = |k: usize| -y.dot(&col(k));
        let entering = if degenerate_run > 20 {
            (0..n).find(|&k| !basis.contains(&k) && reduced(k) < -TOL)
        } else {
            (0..n)
                .filter(|k| !basis.contains(k))
                .map(|k| (reduced(k), k))
                .filter(|&(d, _)| d < -TOL)
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, k)| k)
        };
        let Some(k) = entering else {
            let obj: f64 = (0..4).filter(|&r| basis[r] >= n).map(|r| x[r]).sum();
            if obj <= 1e-10 {
                return LpVerdict::Inside;
            }
            let a = Vec3::new(y[0], y[1], y[2]);
            return LpVerdict::Outside((a.norm() > 0.0).then_some(a));
        };
        let u = binv * col(k);
        let mut leave: Option<(f64, usize)> = None;
        for r in 0..4 {
            if u[r] > TOL {
                let ratio = x[r].max(0.0) / u[r];
                let better = match leave {
                    None => true,
                    Some((best, lr)) => ratio < best - 1e-15 || (ratio <= best + 1e-15 && basis[r] < basis[lr]),
                };
                if better {
                    leave = Some((ratio, r));
                }
            }
        }
        let (step, r) = leave.expect("phase one is bounded");
        degenerate_run = if step <= 1e-15 { degenerate_run + 1 } else { 0 };
        basis[r] = k;
    }
    panic!("simplex did not terminate");
}

/// Exact point-in-hull queries over a fixed point set. Every outside verdict
/// from the LP yields a supporting half-space `a.x <= max_i a.p_i`, checked
/// against all points, which later queries may use to reject early.
pub struct HullOracle<'a> {
    points: &'a [Vec3],
    lo: Vec3,
    hi: Vec3,
    cuts: Vec<(Vec3, f64)>,
    pub lp_calls: usize,
}

impl<'a> HullOracle<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Self { points, lo, hi, cuts: Vec::new(), lp_calls: 0 }
    }

    /// True when `q` lies in the closed hull.
    pub fn contains(&mut self, q: &Vec3) -> bool {
        if (0..3).any(|k| q[k] < self.lo[k] || q[k] > self.hi[k]) {
            return false;
        }
        if self.cuts.iter().any(|(a, b)| a.dot(q) > *b) {
            return false;
        }
        self.lp_calls += 1;
        match lp_in_hull(self.points, q) {
            LpVerdict::Inside => true,
            LpVerdict::Outside(dir) => {
                if let Some(a) = dir {
                    for a in [a, -a] {
                        let b = self.points.iter().map(|p| a.dot(p)).fold(f64::NEG_INFINITY, f64::max);
                        if a.dot(q) > b {
                            self.cuts.push((a, b));
                            break;
                        }
                    }
                }
                false
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Least squares

/// Similarity fit through nalgebra's SVD.
pub fn similarity_fit(p: &[Vec3], q: &[Vec3]) -> (f64, Matrix3<f64>, Vec3) {
    let n = p.len() as f64;
    let mp = p.iter().sum::<Vec3>() / n;
    let mq = q.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (a, b) in p.iter().zip(q) {
        cov += (b - mq) * (a - mp).transpose();
        var += (a - mp).norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let s = (svd.singular_values.component_mul(&d.diagonal())).sum() / var;
    (s, r, mq - s * r * mp)
}

/// Least trimmed squares by concentration steps: refit on the `keep`
/// fraction of pairs with the smallest residuals until the subset settles.
pub fn trimmed_fit(p: &[Vec3], q: &[Vec3], keep: f64) -> ((f64, Matrix3<f64>, Vec3), Vec<usize>) {
    let h = ((p.len() as f64 * keep).ceil() as usize).clamp(3.min(p.len()), p.len());
    let mut idx: Vec<usize> = (0..p.len()).collect();
    let mut fit = similarity_fit(p, q);
    for _ in 0..50 {
        let (s, r, t) = fit;
        let mut order: Vec<(f64, usize)> =
            p.iter().zip(q).enumerate().map(|(i, (a, b))| ((s * r * a + t - b).norm_squared(), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut next: Vec<usize> = order[..h].iter().map(|x| x.1).collect();
        next.sort_unstable();
        if next == idx {
            break;
        }
        idx = next;
        let (pp, qq): (Vec<Vec3>, Vec<Vec3>) = idx.iter().map(|&i| (p[i], q[i])).unzip();
        fit = similarity_fit(&pp, &qq);
    }
    (fit, idx)
}

/// World-frame active motion from passive and active correspondences, with
/// the active scale pinned to the passive one.
pub fn trimmed_world_motion(
    passive: (&[Vec3], &[Vec3]),
    active: (&[Vec3], &[Vec3]),
    o2w: &RigidTransform,
    keep: f64,
) -> RigidTransform {
    let ((s_p, r_p, t_p), _) = trimmed_fit(passive.0, passive.1, keep);
    let ((_, r_a, _), idx) = trimmed_fit(active.0, active.1, keep);
    // The rotation does not depend on the scale; refit the translation.
    let n = idx.len() as f64;
    let mp = idx.iter().map(|&i| active.0[i]).sum::<Vec3>() / n;
    let mq = idx.iter().map(|&i| active.1[i]).sum::<Vec3>() / n;
    let t_a = mq - s_p * r_a * mp;
    let r = r_p.transpose() * r_a;
    let t = r_p.transpose() * (t_a - t_p) / s_p;
    let rel = RigidTransform::new(r, t).unwrap();
    o2w.compose(&rel).compose(&o2w.inverse())
}

pub fn similarity(s: f64, r: Matrix3<f64>, t: Vec3) -> SimilarityTransform {
    SimilarityTransform::new(s, r, t).unwrap()
}

// ---------------------------------------------------------------------------
// Feature matching

/// Exhaustive active matching: every edited active point against every
/// observed active point, ties to the lowest observed index.
pub fn brute_active_pairs(obs: &FeatureCloud, edit: &FeatureCloud, d_thr: f64) -> (Vec<(usize, usize)>, Vec<f64>) {
    let mut pairs = Vec::new();
    let mut dists = Vec::new();
    for j in 0..edit.len() {
        if edit.labels()[j] != Label::Active {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..obs.len() {
            if obs.labels()[i] != Label::Active {
                continue;
            }
            let mut dot = 0.0f64;
            for (a, b) in obs.feature(i).iter().zip(edit.feature(j)) {
                dot += f64::from(*a) * f64::from(*b);
            }
            if best.map_or(true, |(_, d)| dot > d) {
                best = Some((i, dot));
            }
        }
        if let Some((i, dot)) = best {
            if 1.0 - dot < d_thr {
                pairs.push((i, j));
                dists.push(1.0 - dot);
            }
        }
    }
    (pairs, dists)
}

// ---------------------------------------------------------------------------
// Command line

/// Runs every subcommand once under `root` and returns each report's bytes,
/// keyed by subcommand.
pub fn run_cli_chain(root: &std::path::Path, seed: u64) -> Vec<(String, Vec<u8>)> {
    use clap::Parser;
    use editreg::cli::{run, Cli, REPORT_FILE};

    let p = |rel: &str| root.join(rel).display().to_string();
    let seed = seed.to_string();
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("synth", vec!["synth".into(), "--task".into(), "stacking".into(), "--seed".into(), seed.clone(),
            "--depth-sigma".into(), "0.002".into(), "--flying-edge-fraction".into(), "0.05".into(),
            "--feature-noise".into(), "0.05".into(), "--out".into(), p("scene")]),
        ("lift_obs", vec!["lift".into(), "--scene".into(), p("scene/obs"), "--out".into(), p("lift_obs")]),
        ("lift_edit", vec!["lift".into(), "--scene".into(), p("scene/edit"), "--out".into(), p("lift_edit")]),
        ("filter_obs", vec!["filter".into(), "--cloud".into(), p("lift_obs/cloud.bin"), "--out".into(), p("filter_obs")]),
        ("filter_edit", vec!["filter".into(), "--cloud".into(), p("lift_edit/cloud.bin"), "--out".into(), p("filter_edit")]),
        ("correspond", vec!["correspond".into(), "--obs".into(), p("filter_obs/cloud.bin"), "--edit".into(),
            p("filter_edit/cloud.bin"), "--out".into(), p("correspond")]),
        ("register", vec!["register".into(), "--obs".into(), p("filter_obs/cloud.bin"), "--edit".into(),
            p("filter_edit/cloud.bin"), "--pairs".into(), p("correspond/correspondences.json"), "--scene".into(),
            p("scene/obs"), "--out".into(), p("register")]),
        ("grasp_filter", vec!["grasp-filter".into(), "--scene".into(), p("scene/obs"), "--cloud".into(),
            p("filter_obs/cloud.bin"), "--registration".into(), p("register/report.json"), "--out".into(), p("grasp")]),
        ("pipeline", vec!["pipeline".into(), "--obs".into(), p("scene/obs"), "--edit".into(), p("scene/edit"),
            "--dump".into(), "--out".into(), p("pipeline")]),
        ("plot", vec!["plot".into(), "--obs".into(), p("scene/obs"), "--edit".into(), p("scene/edit"), "--out".into(), p("plot")]),
    ];
    let mut reports = Vec::new();
    for (name, args) in steps {
        let argv = std::iter::once("editreg".to_string()).chain(args);
        let cli = Cli::try_parse_from(argv).unwrap_or_else(|e| panic!("{name}: {e}"));
        run(cli).unwrap_or_else(|e| panic!("{name}: {e}"));
        let out_dir = match name {
            "synth" => root.join("scene"),
            "grasp_filter" => root.join("grasp"),
            other => root.join(other),
        };
        let bytes = std::fs::read(out_dir.join(REPORT_FILE)).unwrap_or_else(|e| panic!("{name}: {e}"));
        reports.push((name.to_string(), bytes));
    }
    reports
}
