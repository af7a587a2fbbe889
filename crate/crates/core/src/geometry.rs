//! Non-differentiable point-cloud kernels: farthest point sampling,
//! k-nearest-neighbour queries and radius grouping.
//!
//! Everything is brute force over squared Euclidean distance; radii and
//! distances at the API boundary are true Euclidean. Ties always resolve to
//! the lowest point index.

use std::cmp::Ordering;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn sub3(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// One frame: `N ≥ 1` coordinates plus an optional `N×C` feature block.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    coords: Vec<Point3>,
    features: Option<Vec<f64>>,
    channels: usize,
}

impl PointCloudFrame {
    pub fn new(coords: Vec<Point3>) -> Result<Self> {
        Self::with_features(coords, None, 0)
    }

    pub fn with_features(coords: Vec<Point3>, features: Option<Vec<f64>>, channels: usize) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::contract("point cloud frame must have at least one point"));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Numeric {
                index: i,
                detail: "non-finite coordinate".into(),
            });
        }
        let channels = match &features {
            Some(f) => {
                if channels == 0 || f.len() != coords.len() * channels {
                    return Err(Error::contract(format!(
                        "feature block has {} values, expected {} rows × {channels}",
                        f.len(),
                        coords.len()
                    )));
                }
                channels
            }
            None => 0,
        };
        Ok(PointCloudFrame {
            coords,
            features,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn features(&self) -> Option<&[f64]> {
        self.features.as_deref()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        match &self.features {
            Some(f) => &f[i * self.channels..(i + 1) * self.channels],
            None => &[],
        }
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.coords)
    }

    /// Reorders points (and feature rows) by `perm`, where new point `i`
    /// is old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let coords = perm.iter().map(|&i| self.coords[i]).collect();
        let features = self
            .features
            .as_ref()
            .map(|_| perm.iter().flat_map(|&i| self.feature_row(i).to_vec()).collect());
        PointCloudFrame {
            coords,
            features,
            channels: self.channels,
        }
    }
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

/// Index of the point farthest from the centroid (lowest index on ties).
///
/// Used as an FPS start that does not depend on point order.
pub fn farthest_from_centroid(points: &[Point3]) -> usize {
    let c = centroid(points);
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &c);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Greedy max-min selection of `k` indices starting from `start`.
pub fn farthest_point_sample(points: &[Point3], k: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!("fps needs 1 ≤ k ≤ N, got k={k}, N={n}")));
    }
    if start >= n {
        return Err(Error::contract(format!("fps start {start} out of range for N={n}")));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = start;
    selected.push(current);
    taken[current] = true;
    while selected.len() < k {
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
        taken[current] = true;
        selected.push(current);
    }
    Ok(selected)
}

#[inline]
fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` nearest points to `query`, sorted ascending by (distance, index).
pub fn knn_single(points: &[Point3], query: &Point3, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(p, query), i)).collect();
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, by_dist_then_index);
        d.truncate(k);
    }
    d.sort_unstable_by(by_dist_then_index);
    d.into_iter().map(|(_, i)| i).collect()
}

/// Row-major `M×k` neighbour indices.
pub fn knn_query(points: &[Point3], queries: &[Point3], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::contract(format!("knn needs 1 ≤ k ≤ N, got k={k}, N={}", points.len())));
    }
    Ok(queries.iter().flat_map(|q| knn_single(points, q, k)).collect())
}

/// Fixed-width neighbourhoods around a set of centres.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodIndex {
    pub centers: Vec<Point3>,
    /// Set when the centres are themselves points of the grouped cloud.
    pub center_indices: Option<Vec<usize>>,
    pub k: usize,
    /// `M×k`, row-major
    pub neighbors: Vec<usize>,
    /// `coords[neighbor] − center`, aligned with `neighbors`
    pub offsets: Vec<Point3>,
    /// true where a slot repeats an earlier neighbour to keep rows full
    pub fill: Vec<bool>,
}

impl NeighborhoodIndex {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn row(&self, m: usize) -> &[usize] {
        &self.neighbors[m * self.k..(m + 1) * self.k]
    }
}

/// How neighbourhoods are chosen around each centre.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborMode {
    /// nearest points within a radius, repeated to fill
    Radius,
    /// plain k nearest neighbours, radius ignored
    Knn,
}

/// Up to `k` points within `radius` of each centre, nearest first.
///
/// Short rows repeat the nearest qualifying point; an empty ball falls back
/// to the globally nearest point in every slot.
pub fn ball_group(points: &[Point3], centers: &[Point3], radius: f64, k: usize) -> Result<NeighborhoodIndex> {
    if points.is_empty() {
        return Err(Error::contract("ball_group on an empty frame"));
    }
    if !(radius > 0.0) || k == 0 {
        return Err(Error::contract(format!("ball_group needs radius > 0 and k ≥ 1, got {radius}, {k}")));
    }
    let r2 = radius * radius;
    let mut neighbors = Vec::with_capacity(centers.len() * k);
    let mut offsets = Vec::with_capacity(centers.len() * k);
    let mut fill = Vec::with_capacity(centers.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for c in centers {
        scratch.clear();
        let mut nearest = (f64::INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, c);
            if d < nearest.0 {
                nearest = (d, i);
            }
            if d <= r2 {
                scratch.push((d, i));
            }
        }
        if scratch.len() > k {
            scratch.select_nth_unstable_by(k - 1, by_dist_then_index);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(by_dist_then_index);
        let found = scratch.len();
        for slot in 0..k {
            let (idx, is_fill) = match found {
                0 => (nearest.1, true),
                _ if slot < found => (scratch[slot].1, false),
                _ => (scratch[0].1, true),
            };
            neighbors.push(idx);
            offsets.push(sub3(&points[idx], c));
            fill.push(is_fill);
        }
    }
    Ok(NeighborhoodIndex {
        centers: centers.to_vec(),
        center_indices: None,
        k,
        neighbors,
        offsets,
        fill,
    })
}

/// Dispatches on [`NeighborMode`]; the kNN path never marks fill slots.
pub fn group(points: &[Point3], centers: &[Point3], mode: NeighborMode, radius: f64, k: usize) -> Result<NeighborhoodIndex> {
    match mode {
        NeighborMode::Radius => ball_group(points, centers, radius, k),
        NeighborMode::Knn => {
            let k = k.min(points.len());
            let neighbors = knn_query(points, centers, k)?;
            let offsets = neighbors
                .iter()
                .enumerate()
                .map(|(j, &i)| sub3(&points[i], &centers[j / k]))
                .collect();
            Ok(NeighborhoodIndex {
                centers: centers.to_vec(),
                center_indices: None,
                k,
                fill: vec![false; neighbors.len()],
                neighbors,
                offsets,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<Point3> {
        xs.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    #[test]
    fn fps_line_example() {
        let pts = line(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sample(&pts, 1, 2).unwrap(), vec![2]);
        let all = farthest_point_sample(&pts, 4, 0).unwrap();
        assert_eq!(all, vec![0, 3, 2, 1]);
        assert_eq!(all, farthest_point_sample(&pts, 4, 0).unwrap());
    }

    #[test]
    fn fps_contract() {
        let pts = line(&[0.0, 1.0]);
        assert!(matches!(farthest_point_sample(&pts, 3, 0), Err(Error::Contract(_))));
        assert!(matches!(farthest_point_sample(&pts, 1, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn knn_basic_and_ties() {
        let pts = line(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(knn_query(&pts, &[[2.0, 0.0, 0.0]], 1).unwrap(), vec![2]);
        // four corners of a square around the query: all equidistant
        let sq = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
        assert_eq!(knn_query(&sq, &[[0.0; 3]], 2).unwrap(), vec![0, 1]);
        assert!(matches!(knn_query(&sq, &[[0.0; 3]], 5), Err(Error::Contract(_))));
    }

    #[test]
    fn ball_fill_rules() {
        let pts = line(&[0.0, 5.0, 10.0]);
        let g = ball_group(&pts, &[[5.0, 0.0, 0.0]], 0.1, 3).unwrap();
        assert_eq!(g.neighbors, vec![1, 1, 1]);
        assert_eq!(g.fill, vec![false, true, true]);
        assert!(g.offsets.iter().all(|o| *o == [0.0; 3]));

        // nothing inside the ball: globally nearest everywhere
        let g = ball_group(&pts, &[[6.0, 0.0, 0.0]], 0.1, 2).unwrap();
        assert_eq!(g.neighbors, vec![1, 1]);
        assert_eq!(g.fill, vec![true, true]);

        assert!(matches!(ball_group(&[], &[[0.0; 3]], 1.0, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn huge_ball_equals_knn() {
        let pts: Vec<Point3> = (0..9).map(|i| [(i as f64 * 0.37).sin(), (i as f64).cos(), i as f64 * 0.1]).collect();
        let q = [[0.1, 0.2, 0.3]];
        let g = ball_group(&pts, &q, 100.0, 9).unwrap();
        assert_eq!(g.neighbors, knn_query(&pts, &q, 9).unwrap());
    }

    #[test]
    fn frame_validation() {
        assert!(PointCloudFrame::new(vec![]).is_err());
        assert!(PointCloudFrame::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(PointCloudFrame::with_features(vec![[0.0; 3]], Some(vec![1.0, 2.0, 3.0]), 2).is_err());
        let f = PointCloudFrame::with_features(vec![[0.0; 3], [1.0; 3]], Some(vec![1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(f.permuted(&[1, 0]).feature_row(0), &[3.0, 4.0]);
    }
}
