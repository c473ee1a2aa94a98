//! Evaluation protocols: area-weighted mesh surface sampling, L1/L2 Chamfer
//! distance, normal consistency, and F-score.

use crate::error::{Error, Result};
use crate::geometry::{build_index, PointCloud};
use crate::mesher::TriangleMesh;
use crate::rng::{self, Stream};
use rand::Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub sample_count: usize,
    /// F-score threshold μ; the report also carries F at 2μ.
    pub fscore_threshold: f64,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { sample_count: 10_000, fscore_threshold: 0.002, seed: 0 }
    }
}

/// Scene-protocol F-score threshold in meters.
pub const SCENE_FSCORE_THRESHOLD: f64 = 0.025;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub chamfer_l1: f64,
    pub chamfer_l2: f64,
    pub normal_consistency: Option<f64>,
    pub fscore_mu: f64,
    pub fscore_2mu: f64,
    pub mu: f64,
}

impl MetricReport {
    /// Flat "name=value" text record, one metric per line.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("chamfer_l1={:.12e}\n", self.chamfer_l1));
        out.push_str(&format!("chamfer_l2={:.12e}\n", self.chamfer_l2));
        if let Some(nc) = self.normal_consistency {
            out.push_str(&format!("normal_consistency={nc:.12e}\n"));
        }
        out.push_str(&format!("fscore_mu={:.12e}\n", self.fscore_mu));
        out.push_str(&format!("fscore_2mu={:.12e}\n", self.fscore_2mu));
        out.push_str(&format!("mu={:.12e}\n", self.mu));
        out
    }
}

/// Area-weighted uniform surface samples: each triangle is chosen with
/// probability proportional to its area and the point is placed by uniform
/// barycentric coordinates. Returned normals are the (unit) face normals.
pub fn sample_mesh_surface(
    mesh: &TriangleMesh,
    n: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if mesh.is_empty() {
        return Err(Error::EmptyInput { what: "mesh for surface sampling" });
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::DegenerateRegion {
            reason: "mesh has zero total surface area".into(),
        });
    }
    let mut rng = rng::substream(seed, Stream::MeshSampling, 0, 0);
    let mut positions = Vec::with_capacity(n * 3);
    let mut normals = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let u: f64 = rng.random_range(0.0..total);
        let t = cumulative.partition_point(|&c| c < u).min(mesh.triangles.len() - 1);
        let [p, q, r] = mesh.triangle_corners(t);
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let sa = a.sqrt();
        let (w0, w1, w2) = (1.0 - sa, sa * (1.0 - b), sa * b);
        for k in 0..3 {
            positions.push(w0 * p[k] + w1 * q[k] + w2 * r[k]);
        }
        let nr = mesh.triangle_normal_raw(t);
        let len = (nr[0] * nr[0] + nr[1] * nr[1] + nr[2] * nr[2]).sqrt();
        for k in 0..3 {
            normals.push(nr[k] / len);
        }
    }
    Ok((positions, normals))
}

/// Chamfer distance: half the sum of both directed mean nearest-neighbor
/// distances, plain for `order` 1 and squared for `order` 2.
pub fn chamfer(x: &[f64], y: &[f64], dim: usize, order: u32) -> Result<f64> {
    assert!(order == 1 || order == 2, "order must be 1 or 2");
    let dir = |from: &[f64], to: &[f64]| -> Result<f64> {
        let cloud = PointCloud::new(dim, to.to_vec())?;
        let index = build_index(&cloud)?;
        let n = from.len() / dim;
        let mut acc = 0.0;
        for i in 0..n {
            let (_, d) = index.nearest(&from[i * dim..(i + 1) * dim]);
            acc += if order == 1 { d } else { d * d };
        }
        Ok(acc / n as f64)
    };
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput { what: "chamfer operand" });
    }
    Ok(0.5 * (dir(x, y)? + dir(y, x)?))
}

/// Mean absolute cosine between normals at mutually nearest points, over
/// both directions; 1.0 for perfectly aligned fields.
pub fn normal_consistency(
    x_pos: &[f64],
    x_norm: &[f64],
    y_pos: &[f64],
    y_norm: &[f64],
    dim: usize,
) -> Result<f64> {
    if x_pos.is_empty() || y_pos.is_empty() {
        return Err(Error::EmptyInput { what: "normal consistency operand" });
    }
    let unitize = |norms: &[f64]| -> Vec<f64> {
        let mut out = norms.to_vec();
        let mut warned = false;
        for chunk in out.chunks_mut(dim) {
            let len = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (len - 1.0).abs() > 1e-9 {
                if !warned {
                    log::warn!("normal_consistency: non-unit normals; normalizing");
                    warned = true;
                }
                if len > 0.0 {
                    chunk.iter_mut().for_each(|x| *x /= len);
                }
            }
        }
        out
    };
    let xn = unitize(x_norm);
    let yn = unitize(y_norm);
    let dir = |ap: &[f64], an: &[f64], bp: &[f64], bn: &[f64]| -> Result<f64> {
        let cloud = PointCloud::new(dim, bp.to_vec())?;
        let index = build_index(&cloud)?;
        let n = ap.len() / dim;
        let mut acc = 0.0;
        for i in 0..n {
            let (j, _) = index.nearest(&ap[i * dim..(i + 1) * dim]);
            let j = j as usize;
            let dot: f64 = (0..dim)
                .map(|k| an[i * dim + k] * bn[j * dim + k])
                .sum();
            acc += dot.abs();
        }
        Ok(acc / n as f64)
    };
    Ok(0.5 * (dir(x_pos, &xn, y_pos, &yn)? + dir(y_pos, &yn, x_pos, &xn)?))
}

/// Harmonic mean of precision (fraction of `x` within `tau` of `y`) and
/// recall (fraction of `y` within `tau` of `x`); zero when both vanish.
pub fn fscore(x: &[f64], y: &[f64], dim: usize, tau: f64) -> Result<f64> {
    assert!(tau > 0.0, "threshold must be positive");
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput { what: "fscore operand" });
    }
    let frac_within = |from: &[f64], to: &[f64]| -> Result<f64> {
        let cloud = PointCloud::new(dim, to.to_vec())?;
        let index = build_index(&cloud)?;
        let n = from.len() / dim;
        let hits = (0..n)
            .filter(|&i| index.nearest(&from[i * dim..(i + 1) * dim]).1 <= tau)
            .count();
        Ok(hits as f64 / n as f64)
    };
    let p = frac_within(x, y)?;
    let r = frac_within(y, x)?;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

/// Full report over two point sets; normal consistency only when both sides
/// carry normals.
pub fn evaluate_sets(
    x_pos: &[f64],
    x_norm: Option<&[f64]>,
    y_pos: &[f64],
    y_norm: Option<&[f64]>,
    dim: usize,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let nc = match (x_norm, y_norm) {
        (Some(xn), Some(yn)) => Some(normal_consistency(x_pos, xn, y_pos, yn, dim)?),
        _ => {
            log::info!("normals unavailable on one side; omitting normal consistency");
            None
        }
    };
    Ok(MetricReport {
        chamfer_l1: chamfer(x_pos, y_pos, dim, 1)?,
        chamfer_l2: chamfer(x_pos, y_pos, dim, 2)?,
        normal_consistency: nc,
        fscore_mu: fscore(x_pos, y_pos, dim, cfg.fscore_threshold)?,
        fscore_2mu: fscore(x_pos, y_pos, dim, 2.0 * cfg.fscore_threshold)?,
        mu: cfg.fscore_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesher::TriangleMesh;

    fn brute_chamfer(x: &[f64], y: &[f64], dim: usize, order: u32) -> f64 {
        let dir = |from: &[f64], to: &[f64]| {
            let n = from.len() / dim;
            let m = to.len() / dim;
            let mut acc = 0.0;
            for i in 0..n {
                let mut best = f64::INFINITY;
                for j in 0..m {
                    let d2: f64 = (0..dim)
                        .map(|k| (from[i * dim + k] - to[j * dim + k]).powi(2))
                        .sum();
                    best = best.min(d2);
                }
                acc += if order == 1 { best.sqrt() } else { best };
            }
            acc / n as f64
        };
        0.5 * (dir(x, y) + dir(y, x))
    }

    fn random_set(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::substream(seed, Stream::Metrics, 0, 0);
        (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn two_triangle_mesh() -> TriangleMesh {
        // areas 1 and 3
        TriangleMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [5.0, 0.0, 0.0],
                [8.0, 0.0, 0.0],
                [5.0, 2.0, 0.0],
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        }
    }

    #[test]
    fn samples_stay_inside_a_single_triangle() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let (pos, norm) = sample_mesh_surface(&mesh, 200, 3).unwrap();
        for p in pos.chunks(3) {
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12);
            assert_eq!(p[2], 0.0);
        }
        for n in norm.chunks(3) {
            assert!((n[2].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_respects_area_weights() {
        let mesh = two_triangle_mesh();
        let (pos, _) = sample_mesh_surface(&mesh, 100_000, 7).unwrap();
        let second = pos.chunks(3).filter(|p| p[0] >= 4.0).count();
        let frac = second as f64 / 100_000.0;
        assert!((frac - 0.75).abs() < 0.03, "fraction {frac}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let mesh = two_triangle_mesh();
        let a = sample_mesh_surface(&mesh, 50, 9).unwrap();
        let b = sample_mesh_surface(&mesh, 50, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn chamfer_identity_is_zero() {
        let x = random_set(100, 3, 1);
        assert_eq!(chamfer(&x, &x, 3, 1).unwrap(), 0.0);
        assert_eq!(chamfer(&x, &x, 3, 2).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_single_points_unit_distance() {
        let x = vec![0.0, 0.0, 0.0];
        let y = vec![1.0, 0.0, 0.0];
        assert_eq!(chamfer(&x, &y, 3, 1).unwrap(), 1.0);
        assert_eq!(chamfer(&x, &y, 3, 2).unwrap(), 1.0);
    }

    #[test]
    fn chamfer_matches_brute_force() {
        for seed in 0..5 {
            let x = random_set(100, 3, seed);
            let y = random_set(80, 3, seed + 100);
            for order in [1, 2] {
                let got = chamfer(&x, &y, 3, order).unwrap();
                let want = brute_chamfer(&x, &y, 3, order);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chamfer_is_symmetric() {
        let x = random_set(60, 3, 11);
        let y = random_set(70, 3, 12);
        assert_eq!(
            chamfer(&x, &y, 3, 2).unwrap(),
            chamfer(&y, &x, 3, 2).unwrap()
        );
    }

    #[test]
    fn normal_consistency_identities() {
        let pos = random_set(50, 3, 13);
        let mut norm = vec![0.0; 150];
        for c in norm.chunks_mut(3) {
            c[2] = 1.0;
        }
        assert_eq!(
            normal_consistency(&pos, &norm, &pos, &norm, 3).unwrap(),
            1.0
        );
        // flipped on one side: absolute value ignores sign
        let flipped: Vec<f64> = norm.iter().map(|x| -x).collect();
        assert_eq!(
            normal_consistency(&pos, &norm, &pos, &flipped, 3).unwrap(),
            1.0
        );
        // orthogonal fields
        let mut ortho = vec![0.0; 150];
        for c in ortho.chunks_mut(3) {
            c[0] = 1.0;
        }
        assert_eq!(
            normal_consistency(&pos, &norm, &pos, &ortho, 3).unwrap(),
            0.0
        );
    }

    #[test]
    fn fscore_identities_and_harmonic_mean() {
        let x = random_set(40, 3, 14);
        assert_eq!(fscore(&x, &x, 3, 0.001).unwrap(), 1.0);
        let far: Vec<f64> = x.iter().map(|v| v + 100.0).collect();
        assert_eq!(fscore(&x, &far, 3, 0.5).unwrap(), 0.0);
        // constructed instance with P=1, R=0.5
        let y = vec![0.0, 0.0, 0.0, 5.0, 0.0, 0.0];
        let x1 = vec![0.0, 0.0, 0.0];
        let f = fscore(&x1, &y, 3, 0.1).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fscore_monotone_in_threshold() {
        let x = random_set(60, 3, 15);
        let y = random_set(60, 3, 16);
        let mut prev = 0.0;
        for tau in [0.05, 0.1, 0.2, 0.4, 0.8, 1.6] {
            let f = fscore(&x, &y, 3, tau).unwrap();
            assert!(f >= prev);
            prev = f;
        }
    }

    #[test]
    fn report_serialization_roundtrip() {
        let x = random_set(30, 3, 17);
        let y = random_set(30, 3, 18);
        let rep = evaluate_sets(&x, None, &y, None, 3, &MetricConfig::default()).unwrap();
        assert!(rep.fscore_2mu >= rep.fscore_mu);
        let text = rep.to_kv_text();
        assert!(text.contains("chamfer_l2="));
        assert!(!text.contains("normal_consistency="));
        let json = serde_json::to_string(&rep).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.chamfer_l1, rep.chamfer_l1);
    }
}
