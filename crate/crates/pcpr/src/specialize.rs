//! Inference phase: freeze the implicit prior and train the query network on
//! one specific cloud, yielding a global SDF for that cloud.

use crate::autodiff::{AdamConfig, NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::{build_index, PointCloud, SigmaMode};
use crate::nets::{ArchConfig, ImplicitNet, QueryMode, QueryNet};
use crate::prior::{prepare_batch, pulling_loss_batch, LossMode, PriorCheckpoint};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Specialization variants. Besides the main residual-query mode, these are
/// the runtime ablations: bypassed or direct query heads, an externally
/// fixed condition, training from scratch, and joint tuning of the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecializeMode {
    Full,
    NoShift,
    DirectQ,
    FixedCond,
    NoPrior,
    JointTune,
}

impl SpecializeMode {
    pub fn query_mode(self) -> QueryMode {
        match self {
            SpecializeMode::NoShift => QueryMode::NoShift,
            SpecializeMode::DirectQ => QueryMode::DirectQ,
            SpecializeMode::FixedCond => QueryMode::FixedCond,
            _ => QueryMode::Full,
        }
    }

    /// Whether the implicit net is optimized alongside the query net.
    pub fn trains_implicit(self) -> bool {
        matches!(self, SpecializeMode::NoPrior | SpecializeMode::JointTune)
    }

    /// Whether a trained prior checkpoint is required.
    pub fn needs_prior(self) -> bool {
        !matches!(self, SpecializeMode::NoPrior)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpecializeMode::Full => "full",
            SpecializeMode::NoShift => "no-shift",
            SpecializeMode::DirectQ => "direct-q",
            SpecializeMode::FixedCond => "fixed-cond",
            SpecializeMode::NoPrior => "no-prior",
            SpecializeMode::JointTune => "joint-tune",
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SpecializeConfig {
    pub steps: usize,
    pub queries_per_step: usize,
    pub per_point: usize,
    pub k_sigma: usize,
    pub sigma_mode: SigmaMode,
    pub loss_mode: LossMode,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mode: SpecializeMode,
    /// Architecture for `no_prior` runs without a checkpoint.
    pub arch: Option<ArchConfig>,
}

impl Default for SpecializeConfig {
    fn default() -> Self {
        SpecializeConfig {
            steps: 2000,
            queries_per_step: 2000,
            per_point: 40,
            k_sigma: 50,
            sigma_mode: SigmaMode::default(),
            loss_mode: LossMode::default(),
            adam: AdamConfig::default(),
            seed: 0,
            mode: SpecializeMode::Full,
            arch: None,
        }
    }
}

/// The specialized global SDF: frozen (or tuned) implicit net, trained query
/// net, the mode they were wired under, and the fixed condition when one was
/// supplied.
#[derive(Debug, Clone)]
pub struct GlobalSdf {
    pub implicit: ImplicitNet,
    pub qnet: QueryNet,
    pub mode: SpecializeMode,
    pub fixed_cond: Option<Tensor>,
    pub config: SpecializeConfig,
    pub loss_history: Vec<(u64, f64)>,
}

/// Per-query transport record: where each global query was relocated to,
/// its predicted distance, and where the pull lands it.
#[derive(Debug, Clone)]
pub struct Transport {
    pub dim: usize,
    pub qg: Vec<f64>,
    pub ql: Vec<f64>,
    pub s: Vec<f64>,
    pub pulled: Vec<f64>,
}

const EVAL_CHUNK: usize = 4096;

impl GlobalSdf {
    pub fn dim(&self) -> usize {
        self.implicit.cfg().dim
    }

    /// Signed distances at dim-packed query positions.
    pub fn eval_batch(&self, queries: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if queries.len() % dim != 0 {
            return Err(Error::DimMismatch {
                expected: dim,
                found: queries.len() % dim,
                context: "query buffer length".into(),
            });
        }
        use rayon::prelude::*;
        let chunks: Vec<&[f64]> = queries.chunks(EVAL_CHUNK * dim).collect();
        let results: Vec<Result<Vec<f64>>> = chunks
            .par_iter()
            .map(|chunk| self.forward_chunk(chunk).map(|(_, _, s)| s))
            .collect();
        let mut out = Vec::with_capacity(queries.len() / dim);
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    pub fn eval_one(&self, q: &[f64]) -> Result<f64> {
        if q.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: q.len(),
                context: "query width".into(),
            });
        }
        Ok(self.eval_batch(q)?[0])
    }

    /// (q_l', f') and s for one chunk; the tape is local to the call.
    fn forward_chunk(&self, chunk: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let dim = self.dim();
        let k = chunk.len() / dim;
        let mut tape = Tape::new();
        let imp_ids = self.implicit.bind(&mut tape, false);
        let q3_ids = self.qnet.bind(&mut tape, false);
        let qg = tape.leaf(Tensor::matrix(k, dim, chunk.to_vec()).transposed());
        let (ql, f) = self.qnet.predict(
            &mut tape,
            &q3_ids,
            qg,
            self.mode.query_mode(),
            self.fixed_cond.as_ref(),
        )?;
        let s = self.implicit.forward(&mut tape, &imp_ids, ql, f)?;
        let ql_rowmajor = tape.value(ql).transposed().into_data();
        Ok((
            ql_rowmajor,
            Vec::new(),
            tape.value(s).data().to_vec(),
        ))
    }

    /// Relocations and pulled points for a set of global queries, computed
    /// with the same gradient convention as the specialization loss
    /// (∂F/∂q at the relocated query).
    pub fn transport(&self, queries: &[f64]) -> Result<Transport> {
        let dim = self.dim();
        let n = queries.len() / dim;
        let mut rec = Transport {
            dim,
            qg: queries.to_vec(),
            ql: Vec::with_capacity(n * dim),
            s: Vec::with_capacity(n),
            pulled: Vec::with_capacity(n * dim),
        };
        for chunk in queries.chunks(EVAL_CHUNK * dim) {
            let k = chunk.len() / dim;
            let mut tape = Tape::new();
            let imp_ids = self.implicit.bind(&mut tape, false);
            let q3_ids = self.qnet.bind(&mut tape, false);
            let qg = tape.leaf(Tensor::matrix(k, dim, chunk.to_vec()).transposed());
            let (ql, f) = self.qnet.predict(
                &mut tape,
                &q3_ids,
                qg,
                self.mode.query_mode(),
                self.fixed_cond.as_ref(),
            )?;
            let s = self.implicit.forward(&mut tape, &imp_ids, ql, f)?;
            let s_sum = tape.sum(s)?;
            let grad = tape.input_gradient(s_sum, ql)?;
            // pulled = qg - s * grad / (|grad| + eps), straight from the loss
            let norms = tape.col_norms(grad)?;
            let eps = tape.scalar_const(1e-12);
            let denom = tape.add(norms, eps)?;
            let coef = tape.div(s, denom)?;
            let coef_b = tape.row_broadcast(coef, dim)?;
            let step = tape.mul(grad, coef_b)?;
            let pulled = tape.sub(qg, step)?;
            rec.ql.extend(tape.value(ql).transposed().into_data());
            rec.s.extend(tape.value(s).data());
            rec.pulled.extend(tape.value(pulled).transposed().into_data());
        }
        Ok(rec)
    }
}

/// Optimize the query network (and, in `no_prior`/`joint_tune`, the implicit
/// net) to minimize the mean pulling cost over queries sampled around `g`.
/// The cloud is consumed as-is, in its own global coordinate system.
pub fn specialize(
    g: &PointCloud,
    prior: Option<&PriorCheckpoint>,
    fixed_cond: Option<Tensor>,
    cfg: &SpecializeConfig,
) -> Result<GlobalSdf> {
    if cfg.mode.needs_prior() && prior.is_none() {
        return Err(Error::Config(format!(
            "mode {} requires a prior checkpoint",
            cfg.mode.as_str()
        )));
    }
    if cfg.mode == SpecializeMode::FixedCond && fixed_cond.is_none() {
        return Err(Error::Config(
            "fixed-cond mode requires a supplied condition".into(),
        ));
    }
    let arch = match (prior, &cfg.arch) {
        (Some(p), _) => p.config.arch.clone(),
        (None, Some(a)) => a.clone(),
        (None, None) => {
            return Err(Error::Config(
                "no-prior specialization without a checkpoint needs an architecture".into(),
            ))
        }
    };
    if arch.dim != g.dim() {
        return Err(Error::DimMismatch {
            expected: arch.dim,
            found: g.dim(),
            context: "prior architecture vs input cloud".into(),
        });
    }
    if let Some(fc) = &fixed_cond {
        if fc.dims() != [arch.feature] {
            return Err(Error::DimMismatch {
                expected: arch.feature,
                found: fc.len(),
                context: "fixed condition width".into(),
            });
        }
    }

    let mut init_rng = rng::substream(cfg.seed, Stream::Init, 1, 0);
    let mut implicit = match (cfg.mode, prior) {
        (SpecializeMode::NoPrior, _) => ImplicitNet::new(&arch, &mut init_rng),
        (_, Some(p)) => p.implicit.clone(),
        _ => unreachable!("needs_prior checked above"),
    };
    let mut qnet = QueryNet::new(&arch, &mut init_rng);

    let index = build_index(g)?;
    let trains_implicit = cfg.mode.trains_implicit();
    let mut loss_history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps as u64 {
        let batch = prepare_batch(
            g,
            &index,
            cfg.per_point,
            cfg.k_sigma,
            cfg.sigma_mode,
            cfg.queries_per_step,
            rng::derive_seed(cfg.seed, Stream::Sampling, 1, step),
            rng::derive_seed(cfg.seed, Stream::Selection, 1, step),
        );
        let k = batch.queries.cols();

        let mut tape = Tape::new();
        let imp_ids = implicit.bind(&mut tape, trains_implicit);
        let q3_ids = qnet.bind(&mut tape, true);
        let qg = tape.leaf(batch.queries);
        let nn = tape.leaf(batch.nn_targets);
        let (ql, f) = qnet.predict(
            &mut tape,
            &q3_ids,
            qg,
            cfg.mode.query_mode(),
            fixed_cond.as_ref(),
        )?;
        let s = implicit.forward(&mut tape, &imp_ids, ql, f)?;
        let s_sum = tape.sum(s)?;
        // the pull direction is the implicit net's gradient at the relocated
        // query, not at the global one
        let grad_s = tape.input_gradient(s_sum, ql)?;
        let loss = pulling_loss_batch(&mut tape, qg, nn, s, grad_s, cfg.loss_mode)?;
        let loss_v = tape.value(loss).scalar_value();
        if !loss_v.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite specialization loss at step {step} (batch of {k})"
            )));
        }

        let mut wrt: Vec<NodeId> = q3_ids.clone();
        if trains_implicit {
            wrt.extend(&imp_ids);
        }
        let grads = tape.grad_values(loss, &wrt)?;
        let n_q3 = q3_ids.len();
        qnet.group.set_grads(&grads[..n_q3])?;
        qnet.group.adam_step(&cfg.adam)?;
        if trains_implicit {
            implicit.group.set_grads(&grads[n_q3..])?;
            implicit.group.adam_step(&cfg.adam)?;
        }
        loss_history.push((step, loss_v));
    }

    Ok(GlobalSdf {
        implicit,
        qnet,
        mode: cfg.mode,
        fixed_cond,
        config: cfg.clone(),
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::RegionEncoder;
    use crate::prior::TrainConfig;
    use crate::tensor::Tensor;

    fn sphere_cloud(n: usize, r: f64) -> PointCloud {
        // deterministic spiral covering of the sphere
        let mut pts = Vec::with_capacity(n * 3);
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        for i in 0..n {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rad = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            pts.extend([r * rad * t.cos(), r * y, r * rad * t.sin()]);
        }
        PointCloud::new(3, pts).unwrap()
    }

    fn tiny_prior(dim: usize) -> PriorCheckpoint {
        let arch = ArchConfig::desk(dim, 16);
        let mut rng = rng::substream(3, Stream::Init, 0, 0);
        PriorCheckpoint {
            encoder: RegionEncoder::new(&arch, &mut rng),
            implicit: ImplicitNet::new(&arch, &mut rng),
            config: TrainConfig { arch, ..Default::default() },
            loss_history: vec![],
        }
    }

    fn tiny_cfg(mode: SpecializeMode) -> SpecializeConfig {
        SpecializeConfig {
            steps: 4,
            queries_per_step: 64,
            per_point: 8,
            k_sigma: 8,
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            seed: 11,
            mode,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_modes_leave_implicit_net_bit_identical() {
        let g = sphere_cloud(40, 1.0);
        let prior = tiny_prior(3);
        let before = prior.implicit.group.digest();
        for mode in [
            SpecializeMode::Full,
            SpecializeMode::NoShift,
            SpecializeMode::DirectQ,
        ] {
            let sdf = specialize(&g, Some(&prior), None, &tiny_cfg(mode)).unwrap();
            assert_eq!(sdf.implicit.group.digest(), before, "mode {mode:?}");
        }
        let fc = Tensor::vector(vec![0.1; 16]);
        let sdf = specialize(
            &g,
            Some(&prior),
            Some(fc),
            &tiny_cfg(SpecializeMode::FixedCond),
        )
        .unwrap();
        assert_eq!(sdf.implicit.group.digest(), before);
        // tuning modes do move it
        let sdf = specialize(&g, Some(&prior), None, &tiny_cfg(SpecializeMode::JointTune)).unwrap();
        assert_ne!(sdf.implicit.group.digest(), before);
    }

    #[test]
    fn zero_steps_is_initialization() {
        let g = sphere_cloud(30, 1.0);
        let prior = tiny_prior(3);
        let cfg = SpecializeConfig { steps: 0, ..tiny_cfg(SpecializeMode::Full) };
        let sdf = specialize(&g, Some(&prior), None, &cfg).unwrap();
        assert!(sdf.loss_history.is_empty());
        assert_eq!(sdf.implicit.group.digest(), prior.implicit.group.digest());
        let mut init_rng = rng::substream(cfg.seed, Stream::Init, 1, 0);
        let q0 = QueryNet::new(&prior.config.arch, &mut init_rng);
        assert_eq!(sdf.qnet.group.digest(), q0.group.digest());
    }

    #[test]
    fn specialization_is_deterministic() {
        let g = sphere_cloud(30, 1.0);
        let prior = tiny_prior(3);
        let a = specialize(&g, Some(&prior), None, &tiny_cfg(SpecializeMode::Full)).unwrap();
        let b = specialize(&g, Some(&prior), None, &tiny_cfg(SpecializeMode::Full)).unwrap();
        assert_eq!(a.qnet.group.digest(), b.qnet.group.digest());
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn eval_is_deterministic_and_mode_checks_hold() {
        let g = sphere_cloud(30, 1.0);
        let prior = tiny_prior(3);
        let sdf = specialize(&g, Some(&prior), None, &tiny_cfg(SpecializeMode::Full)).unwrap();
        let q = [0.3, -0.2, 0.9];
        let a = sdf.eval_one(&q).unwrap();
        let b = sdf.eval_one(&q).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(sdf.eval_one(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn missing_prior_and_missing_condition_are_rejected() {
        let g = sphere_cloud(20, 1.0);
        assert!(specialize(&g, None, None, &tiny_cfg(SpecializeMode::Full)).is_err());
        let prior = tiny_prior(3);
        assert!(specialize(
            &g,
            Some(&prior),
            None,
            &tiny_cfg(SpecializeMode::FixedCond)
        )
        .is_err());
        // no-prior without checkpoint needs an arch
        let mut cfg = tiny_cfg(SpecializeMode::NoPrior);
        assert!(specialize(&g, None, None, &cfg).is_err());
        cfg.arch = Some(ArchConfig::desk(3, 16));
        assert!(specialize(&g, None, None, &cfg).is_ok());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let g = sphere_cloud(20, 1.0);
        let prior = tiny_prior(2);
        assert!(matches!(
            specialize(&g, Some(&prior), None, &tiny_cfg(SpecializeMode::Full)),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn pulled_point_matches_hand_computation_under_fixed_translation() {
        // query net: all weights zero, final bias sets Δq = c and f' = f0;
        // implicit net: single linear layer s = w·[q;f] + b. Everything in
        // the pull is then analytic.
        let arch = ArchConfig {
            dim: 3,
            feature: 4,
            enc_hidden: vec![4],
            imp_hidden: 8,
            imp_layers: 1,
            qnet_hidden: 6,
            qnet_layers: 2,
        };
        let mut rng = rng::substream(5, Stream::Init, 0, 0);
        let implicit = ImplicitNet::new(&arch, &mut rng);
        let mut qnet = QueryNet::new(&arch, &mut rng);
        for l in 1..=2 {
            for suffix in ["w", "b"] {
                let name = format!("qnet.l{l}.{suffix}");
                let dims = qnet.group.get(&name).unwrap().value.dims().to_vec();
                qnet.group.get_mut(&name).unwrap().value = Tensor::zeros(&dims);
            }
        }
        let shift = [0.25, -0.5, 0.125];
        let f0 = [0.2, -0.1, 0.3, 0.05];
        {
            let b = qnet.group.get_mut("qnet.l2.b").unwrap();
            let data = b.value.data_mut();
            data[..4].copy_from_slice(&f0);
            data[4..].copy_from_slice(&shift);
        }
        let sdf = GlobalSdf {
            implicit: implicit.clone(),
            qnet,
            mode: SpecializeMode::Full,
            fixed_cond: None,
            config: SpecializeConfig::default(),
            loss_history: vec![],
        };

        let qg = [0.4, 0.3, -0.2];
        let rec = sdf.transport(&qg).unwrap();
        let ql: Vec<f64> = qg.iter().zip(&shift).map(|(a, b)| a + b).collect();
        for (got, want) in rec.ql.iter().zip(&ql) {
            assert!((got - want).abs() < 1e-12);
        }
        // s = w·[ql; f0] + b, grad = w[..3]
        let w = implicit.group.get("imp.l1.w").unwrap().value.clone();
        let b = implicit.group.get("imp.l1.b").unwrap().value.data()[0];
        let mut s = b;
        for (k, x) in ql.iter().chain(f0.iter()).enumerate() {
            s += w.at2(0, k) * x;
        }
        assert!((rec.s[0] - s).abs() < 1e-12);
        let gnorm = (0..3).map(|a| w.at2(0, a) * w.at2(0, a)).sum::<f64>().sqrt();
        for a in 0..3 {
            let want = qg[a] - s * w.at2(0, a) / (gnorm + 1e-12);
            assert!((rec.pulled[a] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn no_shift_reduces_to_condition_only_evaluation() {
        let g = sphere_cloud(25, 1.0);
        let prior = tiny_prior(3);
        let sdf = specialize(&g, Some(&prior), None, &tiny_cfg(SpecializeMode::NoShift)).unwrap();
        let q = [0.5, -0.1, 0.2];
        let rec = sdf.transport(&q).unwrap();
        assert_eq!(rec.ql, q.to_vec());
    }
}
