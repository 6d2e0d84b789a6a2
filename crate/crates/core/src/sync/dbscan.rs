//! DBSCAN over 2D plane points, used to drop stray backprojections before
//! building the synchronization signal.
//!
//! Deterministic for a given input order: points are visited in index
//! order and neighbor queues expand in ascending index order, so cluster
//! labels are reproducible.

use nalgebra::Point2;

use super::SyncError;
use crate::geometry::PlanePoint2;

/// Cluster label per point; `None` marks noise.
pub fn dbscan(points: &[PlanePoint2], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    assert!(eps > 0.0 && min_pts >= 1, "eps > 0 and min_pts >= 1");
    let n = points.len();
    let grid = Grid::build(points, eps);

    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Unvisited,
        Noise,
        Clustered(usize),
    }
    let mut state = vec![State::Unvisited; n];
    let mut next_cluster = 0usize;

    for i in 0..n {
        if state[i] != State::Unvisited {
            continue;
        }
        let neighbors = grid.neighbors(points, i, eps);
        if neighbors.len() < min_pts {
            state[i] = State::Noise;
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        state[i] = State::Clustered(cluster);
        let mut queue = neighbors;
        let mut head = 0;
        while head < queue.len() {
            let q = queue[head];
            head += 1;
            match state[q] {
                State::Clustered(_) => continue,
                State::Noise => {
                    state[q] = State::Clustered(cluster);
                    continue;
                }
                State::Unvisited => {
                    state[q] = State::Clustered(cluster);
                    let qn = grid.neighbors(points, q, eps);
                    if qn.len() >= min_pts {
                        queue.extend(qn);
                    }
                }
            }
        }
    }

    state
        .into_iter()
        .map(|s| match s {
            State::Clustered(c) => Some(c),
            _ => None,
        })
        .collect()
}

/// Keep only the members of the largest cluster (ties broken by the lowest
/// cluster label). Returns the inlier mask.
pub fn dbscan_filter(
    points: &[PlanePoint2],
    eps: f64,
    min_pts: usize,
) -> Result<Vec<bool>, SyncError> {
    if points.is_empty() {
        return Err(SyncError::EmptyInput);
    }
    let labels = dbscan(points, eps, min_pts);
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    if n_clusters == 0 {
        // No dense cluster at all: everything is noise.
        return Ok(vec![false; points.len()]);
    }
    let mut sizes = vec![0usize; n_clusters];
    for label in labels.iter().flatten() {
        sizes[*label] += 1;
    }
    let winner = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| (a.1, std::cmp::Reverse(a.0)).cmp(&(b.1, std::cmp::Reverse(b.0))))
        .map(|(i, _)| i)
        .expect("at least one cluster");
    Ok(labels.into_iter().map(|l| l == Some(winner)).collect())
}

/// Uniform grid with eps-sized cells for neighbor queries.
struct Grid {
    cells: std::collections::HashMap<(i64, i64), Vec<usize>>,
    inv_eps: f64,
}

impl Grid {
    fn build(points: &[PlanePoint2], eps: f64) -> Self {
        let inv_eps = 1.0 / eps;
        let mut cells: std::collections::HashMap<(i64, i64), Vec<usize>> =
            std::collections::HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, inv_eps)).or_default().push(i);
        }
        Self { cells, inv_eps }
    }

    fn key(p: &Point2<f64>, inv_eps: f64) -> (i64, i64) {
        (
            (p.x * inv_eps).floor() as i64,
            (p.y * inv_eps).floor() as i64,
        )
    }

    /// Indices within `eps` of point `i`, itself included, ascending.
    fn neighbors(&self, points: &[PlanePoint2], i: usize, eps: f64) -> Vec<usize> {
        let (cx, cy) = Self::key(&points[i], self.inv_eps);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy)) {
                    for &j in bucket {
                        if (points[j] - points[i]).norm() <= eps {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tie_tests {
    use super::*;
    use nalgebra::Point2;

    #[test]
    fn equal_size_clusters_pick_lowest_label() {
        // Two 6-point clusters far apart; the one seen first gets label 0
        // and wins the size tie.
        let mut points = Vec::new();
        for i in 0..6 {
            points.push(Point2::new(i as f64 * 0.1, 0.0));
        }
        for i in 0..6 {
            points.push(Point2::new(100.0 + i as f64 * 0.1, 0.0));
        }
        let mask = dbscan_filter(&points, 0.5, 3).unwrap();
        assert!(mask[..6].iter().all(|m| *m));
        assert!(mask[6..].iter().all(|m| !*m));
    }
}
