//! Point-cloud containers, exact nearest-neighbor search, bounding-box grid
//! partition into local regions, region normalization, and Gaussian query
//! sampling.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

/// Distance σ interpretation for the query sampler: the k-th neighbor
/// distance is read as the Gaussian's variance (default) or as its stddev.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    Variance,
    Stddev,
}

impl Default for SigmaMode {
    fn default() -> Self {
        SigmaMode::Variance
    }
}

/// Ordered, dimension-tagged list of positions; coordinates packed row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    data: Vec<f64>,
    normals: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Config(format!("point dimension must be 2 or 3, got {dim}")));
        }
        if data.is_empty() {
            return Err(Error::EmptyInput { what: "point cloud" });
        }
        if data.len() % dim != 0 {
            return Err(Error::Config(format!(
                "coordinate buffer length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("point cloud contains non-finite coordinates".into()));
        }
        Ok(PointCloud { dim, data, normals: None })
    }

    pub fn with_normals(mut self, normals: Vec<f64>) -> Result<Self> {
        if normals.len() != self.data.len() {
            return Err(Error::Config("normal buffer length does not match points".into()));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.data
    }

    pub fn normals(&self) -> Option<&[f64]> {
        self.normals.as_deref()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Axis-aligned bounding box as (min, max) per axis.
    pub fn bbox(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = self.point(0).to_vec();
        let mut hi = lo.clone();
        for p in self.iter() {
            for a in 0..self.dim {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ----- exact nearest-neighbor index ------------------------------------------

const LEAF_SIZE: usize = 16;

enum KdNode {
    Split { axis: usize, value: f64, left: usize, right: usize },
    Leaf { start: usize, end: usize },
}

/// Exact kd-tree over a copy of the cloud. Ties in distance resolve to the
/// lowest point index, which keeps every consumer deterministic.
pub struct SpatialIndex {
    dim: usize,
    pts: Vec<f64>,
    order: Vec<u32>,
    nodes: Vec<KdNode>,
    root: usize,
}

/// Exact nearest-neighbor structure over a point cloud.
pub fn build_index(cloud: &PointCloud) -> Result<SpatialIndex> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput { what: "point cloud for indexing" });
    }
    let dim = cloud.dim();
    let mut idx = SpatialIndex {
        dim,
        pts: cloud.coords().to_vec(),
        order: (0..cloud.len() as u32).collect(),
        nodes: Vec::new(),
        root: 0,
    };
    idx.root = idx.build(0, cloud.len());
    Ok(idx)
}

impl SpatialIndex {
    fn coord(&self, point: u32, axis: usize) -> f64 {
        self.pts[point as usize * self.dim + axis]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        // split on the widest axis of this subset
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for &p in &self.order[start..end] {
            for a in 0..self.dim {
                let x = self.coord(p, a);
                lo[a] = lo[a].min(x);
                hi[a] = hi[a].max(x);
            }
        }
        let axis = (0..self.dim)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        let mid = (end - start) / 2;
        let median = {
            let dim = self.dim;
            let pts = &self.pts;
            let (_, median, _) = self.order[start..end].select_nth_unstable_by(mid, |&p, &q| {
                pts[p as usize * dim + axis]
                    .total_cmp(&pts[q as usize * dim + axis])
                    .then(p.cmp(&q))
            });
            *median
        };
        let value = self.coord(median, axis);
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes.push(KdNode::Split { axis, value, left, right });
        self.nodes.len() - 1
    }

    /// The k nearest neighbors of `q`, ascending by (distance, index).
    pub fn k_nearest(&self, q: &[f64], k: usize) -> Vec<(u32, f64)> {
        debug_assert_eq!(q.len(), self.dim);
        let k = k.min(self.order.len());
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.search(self.root, q, k, &mut best);
        best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    /// Nearest neighbor of `q` as (index, distance).
    pub fn nearest(&self, q: &[f64]) -> (u32, f64) {
        self.k_nearest(q, 1)[0]
    }

    fn search(&self, node: usize, q: &[f64], k: usize, best: &mut Vec<(f64, u32)>) {
        match &self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &p in &self.order[*start..*end] {
                    let d2 = dist2(q, &self.pts[p as usize * self.dim..(p as usize + 1) * self.dim]);
                    let cand = (d2, p);
                    let pos = best.partition_point(|x| *x < cand);
                    if pos < k {
                        best.insert(pos, cand);
                        best.truncate(k);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff <= 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, q, k, best);
                // non-strict bound so equal-distance candidates across the
                // plane are still found and the index tie-break stays exact
                if best.len() < k || diff * diff <= best[best.len() - 1].0 {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

/// Distance from `p` to its k-th nearest neighbor among the indexed points,
/// excluding one zero-distance hit when `p` coincides with a member. When
/// fewer than `k` neighbors exist the farthest available is returned with a
/// warning.
pub fn kth_nn_distance(index: &SpatialIndex, p: &[f64], k: usize) -> f64 {
    assert!(k >= 1, "k must be positive");
    let mut hits = index.k_nearest(p, k + 1);
    if let Some(pos) = hits.iter().position(|&(_, d)| d == 0.0) {
        hits.remove(pos);
    }
    if hits.is_empty() {
        log::warn!("kth_nn_distance: no neighbors besides the query itself");
        return 0.0;
    }
    if hits.len() < k {
        log::warn!(
            "kth_nn_distance: k={k} exceeds {} available neighbors; clamping",
            hits.len()
        );
    }
    hits[hits.len().min(k) - 1].1
}

// ----- local regions ----------------------------------------------------------

/// A grid cell's points mapped into the canonical local frame: bounding-box
/// center at the origin and the longest edge spanning exactly 1.
#[derive(Debug, Clone)]
pub struct LocalRegion {
    pub points: PointCloud,
    pub center: Vec<f64>,
    pub scale: f64,
    pub grid_index: Vec<usize>,
}

impl LocalRegion {
    /// Map a normalized-frame position back to world units.
    pub fn denormalize(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(&self.center)
            .map(|(x, c)| x * self.scale + c)
            .collect()
    }
}

/// Split the cloud's bounding box into `grid_n`^D equal cells and group the
/// point indices per non-empty cell (half-open intervals, topmost closed).
pub fn partition_cells(
    cloud: &PointCloud,
    grid_n: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    assert!(grid_n >= 1);
    let dim = cloud.dim();
    let (lo, hi) = cloud.bbox();
    let mut cells: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.iter().enumerate() {
        let mut key = Vec::with_capacity(dim);
        for a in 0..dim {
            let extent = hi[a] - lo[a];
            let cell = if extent == 0.0 {
                0
            } else {
                (((p[a] - lo[a]) / extent * grid_n as f64).floor() as usize).min(grid_n - 1)
            };
            key.push(cell);
        }
        cells.entry(key).or_default().push(i);
    }
    cells.into_iter().collect()
}

/// Normalize a set of positions into the canonical local frame.
pub fn normalize_region(points: PointCloud, grid_index: Vec<usize>) -> Result<LocalRegion> {
    if points.len() < 2 {
        return Err(Error::DegenerateRegion {
            reason: format!("{} point(s); need at least 2 distinct", points.len()),
        });
    }
    let dim = points.dim();
    let (lo, hi) = points.bbox();
    let scale = (0..dim).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Err(Error::DegenerateRegion {
            reason: "all points identical; scale undefined".into(),
        });
    }
    let center: Vec<f64> = (0..dim).map(|a| 0.5 * (lo[a] + hi[a])).collect();
    let data: Vec<f64> = points
        .iter()
        .flat_map(|p| {
            p.iter()
                .zip(&center)
                .map(|(x, c)| (x - c) / scale)
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(LocalRegion {
        points: PointCloud::new(dim, data)?,
        center,
        scale,
        grid_index,
    })
}

/// Partition and normalize in one step; degenerate cells (fewer than two
/// distinct points) are skipped with a warning.
pub fn partition_regions(cloud: &PointCloud, grid_n: usize) -> Result<Vec<LocalRegion>> {
    let mut regions = Vec::new();
    for (key, indices) in partition_cells(cloud, grid_n) {
        let data: Vec<f64> = indices
            .iter()
            .flat_map(|&i| cloud.point(i).to_vec())
            .collect();
        let sub = PointCloud::new(cloud.dim(), data)?;
        match normalize_region(sub, key.clone()) {
            Ok(r) => regions.push(r),
            Err(e) => log::warn!("skipping cell {key:?}: {e}"),
        }
    }
    Ok(regions)
}

// ----- query sampling ----------------------------------------------------------

/// Gaussian query samples around every surface point, each tagged with its
/// anchor point and exact nearest neighbor on the owning cloud.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub dim: usize,
    /// Sampled positions, dim-packed.
    pub queries: Vec<f64>,
    /// Index of the surface point each query was drawn around.
    pub anchors: Vec<u32>,
    /// Index of each query's nearest neighbor on the owning cloud.
    pub nn_indices: Vec<u32>,
    /// Positions of the nearest neighbors, dim-packed.
    pub nn_targets: Vec<f64>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn query(&self, i: usize) -> &[f64] {
        &self.queries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nn_target(&self, i: usize) -> &[f64] {
        &self.nn_targets[i * self.dim..(i + 1) * self.dim]
    }
}

/// Draw `per_point` queries around each point from an isotropic Gaussian
/// whose spread comes from the `k_sigma`-th neighbor distance, and record
/// each query's exact nearest neighbor. Fully determined by `seed`.
pub fn sample_queries(
    cloud: &PointCloud,
    index: &SpatialIndex,
    per_point: usize,
    k_sigma: usize,
    sigma_mode: SigmaMode,
    seed: u64,
) -> QueryBatch {
    let dim = cloud.dim();
    let n = cloud.len();
    let k_eff = k_sigma.min(n.saturating_sub(1));
    let mut rng = rng::substream(seed, rng::Stream::Sampling, 0, 0);
    let mut queries = Vec::with_capacity(n * per_point * dim);
    let mut anchors = Vec::with_capacity(n * per_point);
    let mut nn_indices = Vec::with_capacity(n * per_point);
    let mut nn_targets = Vec::with_capacity(n * per_point * dim);
    for i in 0..n {
        let p = cloud.point(i);
        let sigma = if k_eff == 0 {
            0.0
        } else {
            let d = kth_nn_distance(index, p, k_eff);
            match sigma_mode {
                SigmaMode::Variance => d.sqrt(),
                SigmaMode::Stddev => d,
            }
        };
        for _ in 0..per_point {
            let mut q = [0.0f64; 3];
            for (a, qa) in q[..dim].iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *qa = p[a] + sigma * z;
            }
            let (nn, _) = index.nearest(&q[..dim]);
            queries.extend_from_slice(&q[..dim]);
            anchors.push(i as u32);
            nn_indices.push(nn);
            nn_targets.extend_from_slice(cloud.point(nn as usize));
        }
    }
    QueryBatch { dim, queries, anchors, nn_indices, nn_targets }
}

/// Bounding box of the cloud inflated by `frac` of each axis extent.
pub fn inflated_bbox(cloud: &PointCloud, frac: f64) -> (Vec<f64>, Vec<f64>) {
    let (mut lo, mut hi) = cloud.bbox();
    for a in 0..cloud.dim() {
        let pad = (hi[a] - lo[a]) * frac;
        lo[a] -= pad;
        hi[a] += pad;
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud3(rows: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(3, rows.iter().flatten().copied().collect()).unwrap()
    }

    fn random_cloud(n: usize, dim: usize, seed: u64) -> PointCloud {
        let mut rng = rng::substream(seed, rng::Stream::Sampling, 9, 9);
        PointCloud::new(
            dim,
            (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn brute_nearest(cloud: &PointCloud, q: &[f64]) -> (u32, f64) {
        let mut best = (0u32, f64::INFINITY);
        for (i, p) in cloud.iter().enumerate() {
            let d = dist2(q, p);
            if d < best.1 {
                best = (i as u32, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    #[test]
    fn nearest_by_inspection() {
        let cloud = cloud3(&[[0., 0., 0.], [1., 0., 0.]]);
        let index = build_index(&cloud).unwrap();
        assert_eq!(index.nearest(&[0.9, 0., 0.]).0, 1);
    }

    #[test]
    fn query_on_data_point_returns_it_at_zero_distance() {
        let cloud = cloud3(&[[0., 0., 0.], [1., 0., 0.], [0., 2., 0.]]);
        let index = build_index(&cloud).unwrap();
        let (i, d) = index.nearest(&[0., 2., 0.]);
        assert_eq!((i, d), (2, 0.0));
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(PointCloud::new(3, vec![]).is_err());
    }

    #[test]
    fn nn_matches_brute_force_on_random_instances() {
        let cloud = random_cloud(500, 3, 1);
        let index = build_index(&cloud).unwrap();
        let mut rng = rng::substream(2, rng::Stream::Sampling, 0, 0);
        for _ in 0..500 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.2..1.2)).collect();
            let got = index.nearest(&q);
            let want = brute_nearest(&cloud, &q);
            assert_eq!(got.0, want.0);
            assert!((got.1 - want.1).abs() < 1e-12);
        }
    }

    #[test]
    fn nn_tie_break_lowest_index() {
        // two points equidistant from the query
        let cloud = cloud3(&[[1., 0., 0.], [-1., 0., 0.], [1., 0., 0.]]);
        let index = build_index(&cloud).unwrap();
        assert_eq!(index.nearest(&[0., 0., 0.]).0, 0);
        // duplicated coordinates: lowest of the duplicates wins
        assert_eq!(index.nearest(&[1., 0., 0.]).0, 0);
    }

    #[test]
    fn kth_distance_on_colinear_points() {
        let cloud = cloud3(&[[0., 0., 0.], [1., 0., 0.], [2., 0., 0.], [3., 0., 0.]]);
        let index = build_index(&cloud).unwrap();
        assert_eq!(kth_nn_distance(&index, &[0., 0., 0.], 2), 2.0);
    }

    #[test]
    fn kth_distance_at_duplicated_point_is_zero() {
        let cloud = cloud3(&[[1., 1., 1.], [1., 1., 1.], [5., 0., 0.]]);
        let index = build_index(&cloud).unwrap();
        assert_eq!(kth_nn_distance(&index, &[1., 1., 1.], 1), 0.0);
    }

    #[test]
    fn kth_distance_matches_brute_force() {
        let cloud = random_cloud(200, 3, 4);
        let index = build_index(&cloud).unwrap();
        for i in (0..200).step_by(17) {
            let p = cloud.point(i).to_vec();
            let mut ds: Vec<f64> = (0..200)
                .filter(|&j| j != i)
                .map(|j| dist2(&p, cloud.point(j)).sqrt())
                .collect();
            ds.sort_by(f64::total_cmp);
            assert!((kth_nn_distance(&index, &p, 50) - ds[49]).abs() < 1e-12);
        }
    }

    #[test]
    fn kth_distance_clamps_when_k_too_large() {
        let cloud = cloud3(&[[0., 0., 0.], [1., 0., 0.], [3., 0., 0.]]);
        let index = build_index(&cloud).unwrap();
        // only 2 neighbors besides the query itself
        assert_eq!(kth_nn_distance(&index, &[0., 0., 0.], 10), 3.0);
    }

    #[test]
    fn degenerate_grid_payload_is_one_region() {
        let cloud = random_cloud(64, 3, 5);
        let cells = partition_cells(&cloud, 1);
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].1.len(), 64);
    }

    #[test]
    fn cube_corners_split_into_eight_cells() {
        let mut rows = Vec::new();
        for x in [0., 1.] {
            for y in [0., 1.] {
                for z in [0., 1.] {
                    rows.push([x, y, z]);
                }
            }
        }
        let cloud = cloud3(&rows);
        let cells = partition_cells(&cloud, 2);
        assert_eq!(cells.len(), 8);
        assert!(cells.iter().all(|(_, pts)| pts.len() == 1));
    }

    #[test]
    fn partition_is_a_disjoint_cover() {
        let cloud = random_cloud(300, 3, 6);
        let cells = partition_cells(&cloud, 6);
        let mut seen = vec![false; cloud.len()];
        for (_, idxs) in &cells {
            for &i in idxs {
                assert!(!seen[i], "point {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn normalize_two_point_segment() {
        let cloud = cloud3(&[[1., 1., 1.], [3., 1., 1.]]);
        let r = normalize_region(cloud, vec![0, 0, 0]).unwrap();
        assert_eq!(r.center, vec![2., 1., 1.]);
        assert_eq!(r.scale, 2.0);
        assert_eq!(r.points.point(0), &[-0.5, 0., 0.]);
        assert_eq!(r.points.point(1), &[0.5, 0., 0.]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let cloud = cloud3(&[[-0.5, -0.2, 0.1], [0.5, 0.2, -0.1]]);
        let r = normalize_region(cloud.clone(), vec![0]).unwrap();
        for i in 0..cloud.len() {
            for (a, b) in r.points.point(i).iter().zip(cloud.point(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_denormalize_round_trip() {
        let cloud = random_cloud(40, 3, 7);
        let r = normalize_region(cloud.clone(), vec![0]).unwrap();
        // invariants of the normalized frame
        let (lo, hi) = r.points.bbox();
        let longest = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        assert!((longest - 1.0).abs() < 1e-6);
        for a in 0..3 {
            assert!((lo[a] + hi[a]).abs() < 1e-6 * 2.0);
        }
        for i in 0..cloud.len() {
            let back = r.denormalize(r.points.point(i));
            for (x, y) in back.iter().zip(cloud.point(i)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_points_rejected() {
        let cloud = cloud3(&[[1., 1., 1.], [1., 1., 1.]]);
        assert!(matches!(
            normalize_region(cloud, vec![0]),
            Err(Error::DegenerateRegion { .. })
        ));
    }

    #[test]
    fn query_count_is_per_point_times_cloud_size() {
        let cloud = random_cloud(25, 3, 8);
        let index = build_index(&cloud).unwrap();
        let batch = sample_queries(&cloud, &index, 40, 50, SigmaMode::Variance, 3);
        assert_eq!(batch.len(), 40 * 25);
    }

    #[test]
    fn sampling_is_reproducible() {
        let cloud = random_cloud(10, 2, 9);
        let index = build_index(&cloud).unwrap();
        let a = sample_queries(&cloud, &index, 7, 3, SigmaMode::Variance, 42);
        let b = sample_queries(&cloud, &index, 7, 3, SigmaMode::Variance, 42);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.nn_indices, b.nn_indices);
        let c = sample_queries(&cloud, &index, 7, 3, SigmaMode::Variance, 43);
        assert_ne!(a.queries, c.queries);
    }

    #[test]
    fn single_point_cloud_targets_itself() {
        let cloud = cloud3(&[[0.5, -0.5, 1.0]]);
        let index = build_index(&cloud).unwrap();
        let batch = sample_queries(&cloud, &index, 5, 50, SigmaMode::Variance, 1);
        assert!(batch.nn_indices.iter().all(|&i| i == 0));
        assert_eq!(batch.query(0), &[0.5, -0.5, 1.0]);
    }

    #[test]
    fn query_nn_matches_brute_force() {
        let cloud = random_cloud(60, 3, 10);
        let index = build_index(&cloud).unwrap();
        let batch = sample_queries(&cloud, &index, 4, 10, SigmaMode::Variance, 5);
        for i in (0..batch.len()).step_by(11) {
            let want = brute_nearest(&cloud, batch.query(i));
            assert_eq!(batch.nn_indices[i], want.0);
        }
    }
}
