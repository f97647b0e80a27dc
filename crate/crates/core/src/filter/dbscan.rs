//! DBSCAN over 3-D points with a uniform voxel grid.

use std::collections::HashMap;

use crate::geometry::Vec3;

pub const NOISE: i32 = -1;
const UNVISITED: i32 = -2;

/// Uniform grid with cell size `eps`. Points are stored cell by cell so a
/// neighbourhood query walks contiguous memory.
pub struct VoxelGrid {
    eps: f64,
    /// Original index of each stored point, ascending within a cell.
    order: Vec<usize>,
    coords: Vec<Vec3>,
    cells: HashMap<(i64, i64, i64), (usize, usize)>,
    keys: Vec<(i64, i64, i64)>,
}

impl VoxelGrid {
    pub fn new(points: &[Vec3], eps: f64) -> Self {
        let keys: Vec<_> = points.iter().map(|p| Self::key(p, eps)).collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by_key(|&i| (keys[i], i));
        let coords = order.iter().map(|&i| points[i]).collect();
        let mut cells = HashMap::new();
        let mut start = 0;
        for end in 1..=order.len() {
            if end == order.len() || keys[order[end]] != keys[order[start]] {
                cells.insert(keys[order[start]], (start, end));
                start = end;
            }
        }
        Self { eps, order, coords, cells, keys }
    }

    fn key(p: &Vec3, eps: f64) -> (i64, i64, i64) {
        ((p.x / eps).floor() as i64, (p.y / eps).floor() as i64, (p.z / eps).floor() as i64)
    }

    /// Indices within `eps` of point `i` (including `i`), in no particular
    /// order.
    fn neighbors_unordered(&self, i: usize, p: &Vec3, out: &mut Vec<usize>) {
        out.clear();
        let (cx, cy, cz) = self.keys[i];
        let eps2 = self.eps * self.eps;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(&(a, b)) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for (q, &j) in self.coords[a..b].iter().zip(&self.order[a..b]) {
                            if (q - p).norm_squared() <= eps2 {
                                out.push(j);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Labels every point with a cluster id (0, 1, ... in discovery order) or
/// [`NOISE`]. A point is core when at least `min_pts` points, itself
/// included, lie within `eps`. Clusters are grown in index order of their
/// first core point, so a border point reachable from two clusters joins
/// the one discovered first.
pub fn dbscan(points: &[Vec3], eps: f64, min_pts: usize) -> Vec<i32> {
    let grid = VoxelGrid::new(points, eps);
    let mut labels = vec![UNVISITED; points.len()];
    let mut cluster = 0;
    let mut nbrs = Vec::new();
    let mut queue: Vec<usize> = Vec::new();
    for i in 0..points.len() {
        if labels[i] != UNVISITED {
            continue;
        }
        grid.neighbors_unordered(i, &points[i], &mut nbrs);
        if nbrs.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        queue.clear();
        let mut head = 0;
        loop {
            // Noise points already failed the core test, so only unvisited
            // ones are queued for expansion.
            for &k in &nbrs {
                match labels[k] {
                    UNVISITED => {
                        labels[k] = cluster;
                        queue.push(k);
                    }
                    NOISE => labels[k] = cluster,
                    _ => {}
                }
            }
            let Some(&j) = queue.get(head) else { break };
            head += 1;
            grid.neighbors_unordered(j, &points[j], &mut nbrs);
            if nbrs.len() < min_pts {
                nbrs.clear();
            }
        }
        cluster += 1;
    }
    labels
}

/// Sizes of clusters `0..max_label`, noise excluded.
pub fn cluster_sizes(labels: &[i32]) -> Vec<usize> {
    let n = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut sizes = vec![0; n];
    for &l in labels {
        if l >= 0 {
            sizes[l as usize] += 1;
        }
    }
    sizes
}

/// Largest cluster id and its size; ties go to the lowest id.
pub fn dominant_cluster(labels: &[i32]) -> Option<(i32, usize)> {
    let mut best: Option<(i32, usize)> = None;
    for (c, &s) in cluster_sizes(labels).iter().enumerate() {
        if s > 0 && best.is_none_or(|(_, bs)| s > bs) {
            best = Some((c as i32, s));
        }
    }
    best
}
