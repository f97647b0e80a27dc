//! 3-D quickhull and half-space queries.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::geometry::{centroid, Mat3, Vec3};
use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HullError {
    #[error("convex hull needs at least 4 non-coplanar points: {0}")]
    DegenerateInput(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HullFace {
    /// Counter-clockwise seen from outside.
    pub vertices: [usize; 3],
    pub normal: Vec3,
    pub offset: f64,
}

impl HullFace {
    #[inline]
    pub fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Triangulated convex polytope with outward unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexHull {
    vertices: Vec<Vec3>,
    faces: Vec<HullFace>,
}

struct WorkFace {
    v: [usize; 3],
    normal: Vec3,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

fn make_face(pts: &[Vec3], v: [usize; 3]) -> WorkFace {
    let (a, b, c) = (pts[v[0]], pts[v[1]], pts[v[2]]);
    let normal = (b - a).cross(&(c - a)).normalize();
    WorkFace { v, normal, offset: normal.dot(&a), outside: Vec::new(), alive: true }
}

impl ConvexHull {
    /// Quickhull. Points within a small relative tolerance of a face are
    /// treated as lying on it.
    pub fn new(points: &[Vec3]) -> Result<ConvexHull, HullError> {
        if points.len() < 4 {
            return Err(HullError::DegenerateInput(format!("{} points", points.len())));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(HullError::DegenerateInput("non-finite point".into()));
        }
        let scale = points.iter().map(|p| p.amax()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let eps = 1e-11 * scale.max(1e-3);

        let simplex = initial_simplex(points, eps)?;
        let interior = simplex.iter().map(|&i| points[i]).sum::<Vec3>() / 4.0;
        let [a, b, c, d] = simplex;
        let mut faces: Vec<WorkFace> = Vec::new();
        for tri in [[a, b, c], [a, c, d], [a, d, b], [b, d, c]] {
            let mut f = make_face(points, tri);
            if f.distance_to(&interior) > 0.0 {
                f = make_face(points, [tri[0], tri[2], tri[1]]);
            }
            faces.push(f);
        }
        let simplex_set: HashSet<usize> = simplex.iter().copied().collect();
        for i in 0..points.len() {
            if !simplex_set.contains(&i) {
                assign_outside(&mut faces, 0..4, points, i, eps);
            }
        }

        loop {
            let Some(fi) = faces.iter().position(|f| f.alive && !f.outside.is_empty()) else { break };
            let eye = *faces[fi]
                .outside
                .iter()
                .max_by(|&&x, &&y| faces[fi].distance_to(&points[x]).total_cmp(&faces[fi].distance_to(&points[y])).then(y.cmp(&x)))
                .unwrap();
            let ep = points[eye];

            let visible: Vec<usize> =
                (0..faces.len()).filter(|&j| faces[j].alive && faces[j].distance_to(&ep) > eps).collect();
            let mut edges: HashSet<(usize, usize)> = HashSet::new();
            for &j in &visible {
                let v = faces[j].v;
                for k in 0..3 {
                    edges.insert((v[k], v[(k + 1) % 3]));
                }
            }
            let mut horizon: Vec<(usize, usize)> = Vec::new();
            for &j in &visible {
                let v = faces[j].v;
                for k in 0..3 {
                    let e = (v[k], v[(k + 1) % 3]);
                    if !edges.contains(&(e.1, e.0)) {
                        horizon.push(e);
                    }
                }
            }

            let mut orphans: Vec<usize> = Vec::new();
            for &j in &visible {
                faces[j].alive = false;
                orphans.append(&mut faces[j].outside);
            }
            let first_new = faces.len();
            for (u, w) in horizon {
                faces.push(make_face(points, [u, w, eye]));
            }
            let end = faces.len();
            for p in orphans {
                if p != eye {
                    assign_outside(&mut faces, first_new..end, points, p, eps);
                }
            }
        }

        let alive: Vec<&WorkFace> = faces.iter().filter(|f| f.alive).collect();
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut used: Vec<usize> = alive.iter().flat_map(|f| f.v).collect();
        used.sort_unstable();
        used.dedup();
        let vertices: Vec<Vec3> = used.iter().map(|&i| points[i]).collect();
        for (new, &old) in used.iter().enumerate() {
            remap.insert(old, new);
        }
        let faces = alive
            .iter()
            .map(|f| HullFace { vertices: f.v.map(|i| remap[&i]), normal: f.normal, offset: f.offset })
            .collect();
        Ok(ConvexHull { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[HullFace] {
        &self.faces
    }

    /// Max over faces of the plane distance: negative inside, zero on the
    /// boundary, and a lower bound of the Euclidean distance outside.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.faces.iter().map(|f| f.distance(p)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        self.faces.iter().all(|f| f.distance(p) <= tol)
    }

    pub fn volume(&self) -> f64 {
        let o = centroid(&self.vertices);
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.vertices.map(|i| self.vertices[i] - o);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Every directed edge appears once and its reverse appears once.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *count.entry((f.vertices[k], f.vertices[(k + 1) % 3])).or_default() += 1;
            }
        }
        count.iter().all(|(&(a, b), &n)| n == 1 && count.get(&(b, a)) == Some(&1))
    }

    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3) -> Result<ConvexHull, HullError> {
        ConvexHull::new(&self.vertices.iter().map(f).collect::<Vec<_>>())
    }

    /// Oriented bounding box (principal axes) grown by `inflate` on every
    /// side. Works for planar, collinear and single-point inputs.
    pub fn inflated_obb(points: &[Vec3], inflate: f64) -> Result<ConvexHull, HullError> {
        if points.is_empty() {
            return Err(HullError::DegenerateInput("no points".into()));
        }
        if !(inflate > 0.0) {
            return Err(HullError::DegenerateInput("bounding box inflation must be positive".into()));
        }
        let c = centroid(points);
        let cov = points.iter().fold(Mat3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose()) / points.len() as f64;
        let (_, axes) = linalg::symmetric_eigen_psd(&cov);
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            let q = axes.transpose() * (p - c);
            lo = lo.inf(&q);
            hi = hi.sup(&q);
        }
        lo -= Vec3::repeat(inflate);
        hi += Vec3::repeat(inflate);
        let mut corners = Vec::with_capacity(8);
        for k in 0..8 {
            let q = Vec3::new(
                if k & 1 == 0 { lo.x } else { hi.x },
                if k & 2 == 0 { lo.y } else { hi.y },
                if k & 4 == 0 { lo.z } else { hi.z },
            );
            corners.push(axes * q + c);
        }
        ConvexHull::new(&corners)
    }
}

impl WorkFace {
    #[inline]
    fn distance_to(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

fn assign_outside(faces: &mut [WorkFace], range: std::ops::Range<usize>, pts: &[Vec3], i: usize, eps: f64) {
    let mut best: Option<(usize, f64)> = None;
    for j in range {
        let d = faces[j].distance_to(&pts[i]);
        if d > eps && best.is_none_or(|(_, bd)| d > bd) {
            best = Some((j, d));
        }
    }
    if let Some((j, _)) = best {
        faces[j].outside.push(i);
    }
}

fn initial_simplex(pts: &[Vec3], eps: f64) -> Result<[usize; 4], HullError> {
    let mut extremes = [0usize; 6];
    for (i, p) in pts.iter().enumerate() {
        for axis in 0..3 {
            if p[axis] < pts[extremes[2 * axis]][axis] {
                extremes[2 * axis] = i;
            }
            if p[axis] > pts[extremes[2 * axis + 1]][axis] {
                extremes[2 * axis + 1] = i;
            }
        }
    }
    let mut best = (0, 0, 0.0);
    for &i in &extremes {
        for &j in &extremes {
            let d = (pts[i] - pts[j]).norm();
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    let (a, b, span) = best;
    if span <= eps {
        return Err(HullError::DegenerateInput("all points coincide".into()));
    }
    let dir = (pts[b] - pts[a]) / span;
    let (c, dc) = pts
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (p - pts[a]).cross(&dir).norm()))
        .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if dc <= eps {
        return Err(HullError::DegenerateInput("points are collinear".into()));
    }
    let n = (pts[b] - pts[a]).cross(&(pts[c] - pts[a])).normalize();
    let (d, dd) = pts
        .iter()
        .enumerate()
        .map(|(i, p)| (i, n.dot(&(p - pts[a])).abs()))
        .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if dd <= eps {
        return Err(HullError::DegenerateInput("points are coplanar".into()));
    }
    Ok([a, b, c, d])
}
