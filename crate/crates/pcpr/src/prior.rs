//! Training phase: learn the local context prior by minimizing the pulling
//! cost over normalized local regions, jointly optimizing the region encoder
//! and the implicit SDF network.

use crate::autodiff::{AdamConfig, NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::{build_index, sample_queries, LocalRegion, QueryBatch, SigmaMode};
use crate::nets::{ArchConfig, ImplicitNet, RegionEncoder};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

/// Whether the pulled-point residual enters the cost as a plain norm or as
/// its square. The squared form is smoother around zero and is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Squared,
    Plain,
}

impl Default for LossMode {
    fn default() -> Self {
        LossMode::Squared
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub queries_per_region: usize,
    pub per_point: usize,
    pub k_sigma: usize,
    pub sigma_mode: SigmaMode,
    pub loss_mode: LossMode,
    pub adam: AdamConfig,
    pub seed: u64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            queries_per_region: 2000,
            per_point: 40,
            k_sigma: 50,
            sigma_mode: SigmaMode::default(),
            loss_mode: LossMode::default(),
            adam: AdamConfig::default(),
            seed: 0,
            arch: ArchConfig::default(),
        }
    }
}

/// Trained prior: encoder and implicit-net weights plus the configuration
/// they were produced under and the per-step loss record.
#[derive(Debug, Clone)]
pub struct PriorCheckpoint {
    pub encoder: RegionEncoder,
    pub implicit: ImplicitNet,
    pub config: TrainConfig,
    pub loss_history: Vec<(u64, f64)>,
}

const PULL_EPS: f64 = 1e-12;

/// Residual between `nn_q` and the query pulled by its predicted distance
/// along the normalized SDF gradient: ‖nn − (q − s·∇s/(‖∇s‖+ε))‖, squared
/// by default.
pub fn pulling_loss(
    tape: &mut Tape,
    q: NodeId,
    nn_q: NodeId,
    s: NodeId,
    grad_s: NodeId,
    mode: LossMode,
) -> Result<NodeId> {
    let n = tape.norm(grad_s)?;
    let eps = tape.scalar_const(PULL_EPS);
    let denom = tape.add(n, eps)?;
    let dir = tape.div(grad_s, denom)?;
    let step = tape.mul(dir, s)?;
    let pulled = tape.sub(q, step)?;
    let r = tape.sub(nn_q, pulled)?;
    match mode {
        LossMode::Squared => tape.dot(r, r),
        LossMode::Plain => tape.norm(r),
    }
}

/// Batched mean pulling cost over a query matrix: q, nn, grad_s are [dim, n]
/// and s is [n].
pub fn pulling_loss_batch(
    tape: &mut Tape,
    q: NodeId,
    nn_q: NodeId,
    s: NodeId,
    grad_s: NodeId,
    mode: LossMode,
) -> Result<NodeId> {
    let dim = tape.value(q).rows();
    let norms = tape.col_norms(grad_s)?;
    let eps = tape.scalar_const(PULL_EPS);
    let denom = tape.add(norms, eps)?;
    let coef = tape.div(s, denom)?;
    let coef_b = tape.row_broadcast(coef, dim)?;
    let step = tape.mul(grad_s, coef_b)?;
    let pulled = tape.sub(q, step)?;
    let r = tape.sub(nn_q, pulled)?;
    let per_query = match mode {
        LossMode::Squared => tape.col_dots(r, r)?,
        LossMode::Plain => tape.col_norms(r)?,
    };
    tape.mean(per_query)
}

/// Column-packed [dim, k] tensor of the selected batch entries.
fn gather_cols(dim: usize, flat: &[f64], picks: &[usize]) -> Tensor {
    let mut data = vec![0.0; dim * picks.len()];
    for (col, &i) in picks.iter().enumerate() {
        for a in 0..dim {
            data[a * picks.len() + col] = flat[i * dim + a];
        }
    }
    Tensor::matrix(dim, picks.len(), data)
}

/// Choose up to `count` distinct queries from the pool; the whole pool when
/// it is not larger than `count`.
fn select_queries(pool: &QueryBatch, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = pool.len();
    if n <= count {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.partial_shuffle(rng, count);
    idx.truncate(count);
    idx
}

pub(crate) struct StepBatch {
    pub queries: Tensor,
    pub nn_targets: Tensor,
}

/// Sample a fresh query pool and select this step's mini-batch. The encoder
/// input is exactly the selected queries' nearest-neighbor set, duplicates
/// retained.
pub(crate) fn prepare_batch(
    cloud: &crate::geometry::PointCloud,
    index: &crate::geometry::SpatialIndex,
    per_point: usize,
    k_sigma: usize,
    sigma_mode: SigmaMode,
    count: usize,
    sample_seed: u64,
    select_seed: u64,
) -> StepBatch {
    let pool = sample_queries(cloud, index, per_point, k_sigma, sigma_mode, sample_seed);
    let mut rng = rng::substream(select_seed, Stream::Selection, 0, 0);
    let picks = select_queries(&pool, count, &mut rng);
    let queries = gather_cols(pool.dim, &pool.queries, &picks);
    let nn_targets = gather_cols(pool.dim, &pool.nn_targets, &picks);
    debug_assert_eq!(queries.cols(), nn_targets.cols());
    StepBatch { queries, nn_targets }
}

/// Learn the local context prior over a set of normalized regions.
///
/// Per epoch and per region: draw a fresh Gaussian query pool, select a
/// mini-batch, feed the batch's nearest-neighbor set to the encoder, predict
/// signed distances and their query gradients, and take one Adam step on the
/// mean pulling cost for encoder and implicit net jointly.
pub fn train_local_prior(
    regions: &[LocalRegion],
    cfg: &TrainConfig,
) -> Result<PriorCheckpoint> {
    if regions.is_empty() {
        return Err(Error::EmptyInput { what: "region list" });
    }
    let dim = cfg.arch.dim;
    for (i, r) in regions.iter().enumerate() {
        if r.points.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: r.points.dim(),
                context: format!("region {i}"),
            });
        }
    }

    let mut init_rng = rng::substream(cfg.seed, Stream::Init, 0, 0);
    let mut encoder = RegionEncoder::new(&cfg.arch, &mut init_rng);
    let mut implicit = ImplicitNet::new(&cfg.arch, &mut init_rng);

    let indices: Vec<_> = regions
        .iter()
        .map(|r| build_index(&r.points))
        .collect::<Result<_>>()?;

    let mut loss_history = Vec::new();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..regions.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, Stream::Shuffle, epoch as u64, 0));
        for &ri in &order {
            let region = &regions[ri];
            let batch = prepare_batch(
                &region.points,
                &indices[ri],
                cfg.per_point,
                cfg.k_sigma,
                cfg.sigma_mode,
                cfg.queries_per_region,
                rng::derive_seed(cfg.seed, Stream::Sampling, epoch as u64, ri as u64),
                rng::derive_seed(cfg.seed, Stream::Selection, epoch as u64, ri as u64),
            );
            let k = batch.queries.cols();

            let mut tape = Tape::new();
            let enc_ids = encoder.bind(&mut tape, true);
            let imp_ids = implicit.bind(&mut tape, true);
            let x_nn = tape.leaf(batch.nn_targets.clone());
            let q = tape.leaf(batch.queries.clone());
            let nn = tape.leaf(batch.nn_targets);
            let f = encoder.forward(&mut tape, &enc_ids, x_nn)?;
            let f_b = tape.col_broadcast(f, k)?;
            let s = implicit.forward(&mut tape, &imp_ids, q, f_b)?;
            let s_sum = tape.sum(s)?;
            let grad_s = tape.input_gradient(s_sum, q)?;
            let loss = pulling_loss_batch(&mut tape, q, nn, s, grad_s, cfg.loss_mode)?;
            let loss_v = tape.value(loss).scalar_value();
            if !loss_v.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite pulling loss at step {step} (epoch {epoch}, region {ri})"
                )));
            }

            let wrt: Vec<NodeId> = enc_ids.iter().chain(&imp_ids).copied().collect();
            let grads = tape.grad_values(loss, &wrt)?;
            let n_enc = enc_ids.len();
            encoder.group.set_grads(&grads[..n_enc])?;
            implicit.group.set_grads(&grads[n_enc..])?;
            encoder.group.adam_step(&cfg.adam)?;
            implicit.group.adam_step(&cfg.adam)?;

            loss_history.push((step, loss_v));
            step += 1;
        }
    }

    Ok(PriorCheckpoint {
        encoder,
        implicit,
        config: cfg.clone(),
        loss_history,
    })
}

/// Write the loss record as one "step,loss" pair per line.
pub fn write_loss_history(history: &[(u64, f64)], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (step, loss) in history {
        writeln!(out, "{step},{loss:.9e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{normalize_region, PointCloud};

    fn circle_cloud(n: usize, radius: f64) -> PointCloud {
        let pts: Vec<f64> = (0..n)
            .flat_map(|i| {
                let t = (i as f64) / (n as f64) * std::f64::consts::TAU;
                vec![radius * t.cos(), radius * t.sin()]
            })
            .collect();
        PointCloud::new(2, pts).unwrap()
    }

    fn desk_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 0,
            queries_per_region: 128,
            per_point: 10,
            k_sigma: 10,
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            seed: 7,
            arch: ArchConfig::desk(2, 24),
            ..Default::default()
        }
    }

    #[test]
    fn pulling_loss_exact_pull_is_zero() {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::vector(vec![0.0, 0.0, 2.0]));
        let nn = t.leaf(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let s = t.leaf(Tensor::scalar(1.0));
        let g = t.leaf(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let l = pulling_loss(&mut t, q, nn, s, g, LossMode::Squared).unwrap();
        assert!(t.value(l).scalar_value().abs() < 1e-18);
    }

    #[test]
    fn pulling_loss_on_surface_point_is_zero_for_any_gradient() {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::vector(vec![0.3, -0.4, 0.1]));
        let nn = t.leaf(Tensor::vector(vec![0.3, -0.4, 0.1]));
        let s = t.leaf(Tensor::scalar(0.0));
        for g_dir in [[1.0, 0.0, 0.0], [0.4, -2.0, 0.3], [0.0, 0.0, 0.0]] {
            let g = t.leaf(Tensor::vector(g_dir.to_vec()));
            let l = pulling_loss(&mut t, q, nn, s, g, LossMode::Squared).unwrap();
            assert_eq!(t.value(l).scalar_value(), 0.0);
        }
    }

    #[test]
    fn pulling_loss_hand_case() {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::vector(vec![0.0, 0.0, 2.0]));
        let nn = t.leaf(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let s = t.leaf(Tensor::scalar(0.5));
        let g = t.leaf(Tensor::vector(vec![0.0, 0.0, 2.0]));
        let l = pulling_loss(&mut t, q, nn, s, g, LossMode::Squared).unwrap();
        assert!((t.value(l).scalar_value() - 0.25).abs() < 1e-12);
        let l = pulling_loss(&mut t, q, nn, s, g, LossMode::Plain).unwrap();
        assert!((t.value(l).scalar_value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batched_loss_matches_single_query_loss() {
        let mut t = Tape::new();
        let q2 = t.leaf(Tensor::matrix(3, 2, vec![0., 1., 0., 2., 2., 0.]));
        let nn2 = t.leaf(Tensor::matrix(3, 2, vec![0., 1., 0., 1., 1., 0.]));
        let s2 = t.leaf(Tensor::vector(vec![0.5, 1.0]));
        let g2 = t.leaf(Tensor::matrix(3, 2, vec![0., 0., 0., 1., 2., 0.]));
        let lb = pulling_loss_batch(&mut t, q2, nn2, s2, g2, LossMode::Squared).unwrap();
        let mut want = 0.0;
        for col in 0..2 {
            let mut t1 = Tape::new();
            let pick = |m: &Tensor, c: usize| {
                Tensor::vector((0..3).map(|r| m.at2(r, c)).collect())
            };
            let q = t1.leaf(pick(t.value(q2), col));
            let nn = t1.leaf(pick(t.value(nn2), col));
            let s = t1.leaf(Tensor::scalar(t.value(s2).data()[col]));
            let g = t1.leaf(pick(t.value(g2), col));
            let l = pulling_loss(&mut t1, q, nn, s, g, LossMode::Squared).unwrap();
            want += t1.value(l).scalar_value();
        }
        want /= 2.0;
        assert!((t.value(lb).scalar_value() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let region = normalize_region(circle_cloud(64, 0.4), vec![0]).unwrap();
        let cfg = desk_cfg();
        let ck = train_local_prior(&[region], &cfg).unwrap();
        assert!(ck.loss_history.is_empty());
        let mut init_rng = rng::substream(cfg.seed, Stream::Init, 0, 0);
        let enc0 = RegionEncoder::new(&cfg.arch, &mut init_rng);
        let imp0 = ImplicitNet::new(&cfg.arch, &mut init_rng);
        assert_eq!(ck.encoder.group.digest(), enc0.group.digest());
        assert_eq!(ck.implicit.group.digest(), imp0.group.digest());
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let region = normalize_region(circle_cloud(48, 0.4), vec![0]).unwrap();
        let cfg = TrainConfig { epochs: 3, ..desk_cfg() };
        let a = train_local_prior(std::slice::from_ref(&region), &cfg).unwrap();
        let b = train_local_prior(&[region], &cfg).unwrap();
        assert_eq!(a.implicit.group.digest(), b.implicit.group.digest());
        assert_eq!(a.encoder.group.digest(), b.encoder.group.digest());
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn selection_never_exceeds_pool_and_is_reproducible() {
        let cloud = circle_cloud(20, 0.4);
        let index = build_index(&cloud).unwrap();
        let pool = sample_queries(&cloud, &index, 5, 5, SigmaMode::Variance, 3);
        let mut r1 = rng::substream(9, Stream::Selection, 0, 0);
        let picks = select_queries(&pool, 1000, &mut r1);
        assert_eq!(picks.len(), pool.len());
        let mut r2 = rng::substream(11, Stream::Selection, 0, 0);
        let mut r3 = rng::substream(11, Stream::Selection, 0, 0);
        let p2 = select_queries(&pool, 32, &mut r2);
        let p3 = select_queries(&pool, 32, &mut r3);
        assert_eq!(p2, p3);
        assert_eq!(p2.len(), 32);
        let unique: std::collections::BTreeSet<_> = p2.iter().collect();
        assert_eq!(unique.len(), 32);
    }

    #[test]
    fn encoder_input_matches_selected_batch() {
        let cloud = circle_cloud(30, 0.4);
        let index = build_index(&cloud).unwrap();
        let batch = prepare_batch(&cloud, &index, 4, 5, SigmaMode::Variance, 50, 1, 2);
        assert_eq!(batch.queries.dims(), &[2, 50]);
        assert_eq!(batch.nn_targets.dims(), &[2, 50]);
        // every encoder input column is a cloud member (the query's NN)
        for c in 0..50 {
            let p = [batch.nn_targets.at2(0, c), batch.nn_targets.at2(1, c)];
            let found = cloud
                .iter()
                .any(|q| q[0] == p[0] && q[1] == p[1]);
            assert!(found);
        }
    }

    #[test]
    fn circle_smoke_training_reduces_loss() {
        let region = normalize_region(circle_cloud(200, 0.4), vec![0]).unwrap();
        let cfg = TrainConfig {
            epochs: 2000,
            queries_per_region: 256,
            per_point: 40,
            k_sigma: 50,
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            seed: 5,
            arch: ArchConfig::desk(2, 32),
            ..Default::default()
        };
        let ck = train_local_prior(&[region], &cfg).unwrap();
        let first = ck.loss_history[0].1;
        let last = ck.loss_history.last().unwrap().1;
        assert!(
            last < 0.1 * first,
            "loss did not drop: first {first}, last {last}"
        );
        assert!(ck.loss_history.iter().all(|(_, l)| l.is_finite()));
    }
}
