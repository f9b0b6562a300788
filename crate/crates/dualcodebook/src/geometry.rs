//! Point-cloud kernels: farthest point sampling, fixed-size region grouping,
//! Chamfer distances, F-score, and minimal matching distance.
//!
//! Everything here is plain `f64` and free of learned state. All selection
//! rules are deterministic: distance ties always resolve to the lowest index,
//! and no randomness is involved anywhere.

use crate::error::{Error, Result};

/// A 3-D point.
pub type Point = [f64; 3];

/// A point cloud: an ordered list of 3-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flat `n x 3` row-major copy of the coordinates, for tape interop.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// Builds a cloud from flat row-major `n x 3` data.
    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if data.len() % 3 != 0 {
            return Err(Error::shape(format!(
                "flat cloud length {} is not a multiple of 3",
                data.len()
            )));
        }
        Ok(PointCloud::new(
            data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        ))
    }
}

/// Region centers picked by farthest point sampling, kept alongside the
/// indices they came from.
#[derive(Debug, Clone)]
pub struct RegionCenters {
    pub indices: Vec<usize>,
    pub centers: Vec<Point>,
}

pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Greedy farthest point sampling of `m` centers, starting from
/// `start_index`. Each step picks the point with the largest distance to the
/// already-selected set; ties resolve to the lowest index.
pub fn farthest_point_sample(
    cloud: &PointCloud,
    m: usize,
    start_index: usize,
) -> Result<RegionCenters> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::data(format!(
            "cannot sample {m} centers from a cloud of {n} points"
        )));
    }
    if start_index >= n {
        return Err(Error::data(format!(
            "start index {start_index} out of range for {n} points"
        )));
    }
    let pts = cloud.points();
    let mut indices = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start_index;
    indices.push(current);
    for _ in 1..m {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for i in 0..n {
            let d2 = squared_distance(&pts[i], &pts[current]);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            // Strict comparison keeps the lowest index on ties.
            if min_d2[i] > best.0 {
                best = (min_d2[i], i);
            }
        }
        current = best.1;
        indices.push(current);
    }
    let centers = indices.iter().map(|&i| pts[i]).collect();
    Ok(RegionCenters { indices, centers })
}

/// For each center, the indices of its `k` nearest cloud points (the center
/// itself included when it belongs to the cloud). Rows are ordered by
/// increasing distance; ties resolve to the lowest index.
pub fn group_regions(
    cloud: &PointCloud,
    centers: &RegionCenters,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::data(format!(
            "cannot group {k} neighbors from a cloud of {n} points"
        )));
    }
    let pts = cloud.points();
    let mut groups = Vec::with_capacity(centers.centers.len());
    for c in &centers.centers {
        let mut order: Vec<(f64, usize)> =
            pts.iter().enumerate().map(|(i, p)| (squared_distance(p, c), i)).collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        groups.push(order.iter().take(k).map(|&(_, i)| i).collect());
    }
    Ok(groups)
}

fn check_nonempty(p: &PointCloud, q: &PointCloud, what: &str) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::data(format!(
            "{what} requires non-empty clouds, got {} and {} points",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

fn min_dist2_to(cloud: &PointCloud, p: &Point) -> f64 {
    cloud
        .points()
        .iter()
        .map(|q| squared_distance(p, q))
        .fold(f64::INFINITY, f64::min)
}

/// Chamfer distance with Euclidean point distances: the mean nearest-neighbor
/// distance from `p` to `q` plus the mean from `q` to `p`.
pub fn chamfer_l1(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    check_nonempty(p, q, "chamfer_l1")?;
    let pq: f64 =
        p.points().iter().map(|x| min_dist2_to(q, x).sqrt()).sum::<f64>() / p.len() as f64;
    let qp: f64 =
        q.points().iter().map(|x| min_dist2_to(p, x).sqrt()).sum::<f64>() / q.len() as f64;
    Ok(pq + qp)
}

/// Chamfer distance with squared point distances.
pub fn chamfer_l2(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    check_nonempty(p, q, "chamfer_l2")?;
    let pq: f64 = p.points().iter().map(|x| min_dist2_to(q, x)).sum::<f64>() / p.len() as f64;
    let qp: f64 = q.points().iter().map(|x| min_dist2_to(p, x)).sum::<f64>() / q.len() as f64;
    Ok(pq + qp)
}

/// F-score at threshold `tau`: harmonic mean of precision (fraction of `p`
/// within `tau` of `q`) and recall (fraction of `q` within `tau` of `p`).
/// Zero when precision and recall are both zero.
pub fn f_score(p: &PointCloud, q: &PointCloud, tau: f64) -> Result<f64> {
    check_nonempty(p, q, "f_score")?;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config(format!("f_score threshold must be positive, got {tau}")));
    }
    let tau2 = tau * tau;
    let precision = p.points().iter().filter(|x| min_dist2_to(q, x) <= tau2).count() as f64
        / p.len() as f64;
    let recall = q.points().iter().filter(|x| min_dist2_to(p, x) <= tau2).count() as f64
        / q.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Minimal matching distance: for each completion, the smallest `chamfer_l2`
/// to any reference cloud, averaged over completions.
pub fn mmd(completions: &[PointCloud], references: &[PointCloud]) -> Result<f64> {
    if completions.is_empty() || references.is_empty() {
        return Err(Error::data(format!(
            "mmd requires non-empty sets, got {} completions and {} references",
            completions.len(),
            references.len()
        )));
    }
    let mut total = 0.0;
    for c in completions {
        let mut best = f64::INFINITY;
        for r in references {
            best = best.min(chamfer_l2(c, r)?);
        }
        total += best;
    }
    Ok(total / completions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
        )
    }

    #[test]
    fn fps_on_collinear_points_picks_the_extremes() {
        let cloud = PointCloud::new((0..10).map(|i| [i as f64, 0.0, 0.0]).collect());
        let rc = farthest_point_sample(&cloud, 2, 0).unwrap();
        assert_eq!(rc.indices, vec![0, 9]);
    }

    #[test]
    fn fps_with_m_equal_n_returns_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 12);
        let rc = farthest_point_sample(&cloud, 12, 4).unwrap();
        let mut sorted = rc.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn fps_selected_distances_never_increase() {
        // The distance from each newly picked center to the already-picked
        // set is non-increasing over greedy iterations.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 40);
        let rc = farthest_point_sample(&cloud, 10, 0).unwrap();
        let pts = cloud.points();
        let mut last = f64::INFINITY;
        for step in 1..rc.indices.len() {
            let picked = &pts[rc.indices[step]];
            let d = rc.indices[..step]
                .iter()
                .map(|&i| squared_distance(&pts[i], picked))
                .fold(f64::INFINITY, f64::min);
            assert!(d <= last + 1e-12, "step {step}: {d} after {last}");
            last = d;
        }
    }

    #[test]
    fn fps_rejects_bad_arguments() {
        let cloud = PointCloud::new(vec![[0.0; 3]; 5]);
        assert!(farthest_point_sample(&cloud, 6, 0).is_err());
        assert!(farthest_point_sample(&cloud, 0, 0).is_err());
        assert!(farthest_point_sample(&cloud, 2, 5).is_err());
    }

    #[test]
    fn grouping_k1_with_cloud_centers_returns_self_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 20);
        let rc = farthest_point_sample(&cloud, 6, 0).unwrap();
        let groups = group_regions(&cloud, &rc, 1).unwrap();
        for (g, &ci) in groups.iter().zip(&rc.indices) {
            assert_eq!(g, &vec![ci], "zero self-distance wins");
        }
    }

    #[test]
    fn grouping_rejects_oversized_k() {
        let cloud = PointCloud::new(vec![[0.0; 3]; 4]);
        let rc = farthest_point_sample(&cloud, 2, 0).unwrap();
        assert!(group_regions(&cloud, &rc, 5).is_err());
    }

    #[test]
    fn chamfer_l1_single_points_at_unit_distance() {
        let p = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let q = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_l1(&p, &q).unwrap(), 2.0);
    }

    #[test]
    fn chamfer_l2_single_points_at_distance_two() {
        let p = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let q = PointCloud::new(vec![[2.0, 0.0, 0.0]]);
        assert_eq!(chamfer_l2(&p, &q).unwrap(), 8.0);
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_cloud(&mut rng, 15);
        let q = random_cloud(&mut rng, 9);
        assert_eq!(chamfer_l1(&p, &q).unwrap(), chamfer_l1(&q, &p).unwrap());
        assert_eq!(chamfer_l2(&p, &q).unwrap(), chamfer_l2(&q, &p).unwrap());
        assert_eq!(chamfer_l1(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn f_score_half_precision_full_recall() {
        // One of two predicted points sits on the target; the other is far.
        let p = PointCloud::new(vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let q = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let f = f_score(&p, &q, 0.01).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12, "precision 0.5, recall 1 -> {f}");
    }

    #[test]
    fn f_score_is_zero_when_nothing_matches() {
        let p = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let q = PointCloud::new(vec![[9.0, 0.0, 0.0]]);
        assert_eq!(f_score(&p, &q, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn mmd_with_reference_in_set_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_cloud(&mut rng, 8);
        let b = random_cloud(&mut rng, 8);
        let v = mmd(&[a.clone()], &[b, a]).unwrap();
        assert_eq!(v, 0.0);
    }
}
