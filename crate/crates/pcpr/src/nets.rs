//! The three networks of the pipeline: a permutation-invariant region
//! encoder, a conditioned implicit SDF network, and the inference-time query
//! network, all expressed over the autodiff tape.

use crate::autodiff::{NodeId, ParamGroup, Parameter, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Network shapes. Defaults follow the full-scale setup (512-wide condition,
/// 8-layer implicit and query networks); small desk configurations shrink the
/// widths but keep the wiring.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Point dimension, 2 or 3.
    pub dim: usize,
    /// Condition feature width.
    pub feature: usize,
    /// Hidden widths of the per-point encoder MLP (before the feature layer).
    pub enc_hidden: Vec<usize>,
    /// Hidden width of the implicit SDF network.
    pub imp_hidden: usize,
    /// Layer count of the implicit SDF network.
    pub imp_layers: usize,
    /// Hidden width of the query network.
    pub qnet_hidden: usize,
    /// Layer count of the query network.
    pub qnet_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            dim: 3,
            feature: 512,
            enc_hidden: vec![64, 128],
            imp_hidden: 512,
            imp_layers: 8,
            qnet_hidden: 512,
            qnet_layers: 8,
        }
    }
}

impl ArchConfig {
    /// Compact desk-scale shape used by demos and tests.
    pub fn desk(dim: usize, width: usize) -> Self {
        ArchConfig {
            dim,
            feature: width,
            enc_hidden: vec![width / 2, width],
            imp_hidden: width,
            imp_layers: 8,
            qnet_hidden: width,
            qnet_layers: 8,
        }
    }

    fn imp_input(&self) -> usize {
        self.dim + self.feature
    }

    /// The implicit net re-concatenates its input at this 1-based layer,
    /// when deep enough to have one.
    fn imp_skip_layer(&self) -> Option<usize> {
        (self.imp_layers >= 5).then_some(4)
    }
}

/// Glorot-uniform weight matrix [fan_out, fan_in].
fn glorot(rng: &mut impl Rng, fan_out: usize, fan_in: usize, scale: f64) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() * scale;
    Tensor::matrix(
        fan_out,
        fan_in,
        (0..fan_out * fan_in).map(|_| rng.random_range(-a..a)).collect(),
    )
}

fn layer_params(
    group: &mut ParamGroup,
    prefix: &str,
    idx: usize,
    fan_out: usize,
    fan_in: usize,
    scale: f64,
    rng: &mut impl Rng,
) {
    group.push(Parameter::new(
        format!("{prefix}.l{idx}.w"),
        glorot(rng, fan_out, fan_in, scale),
    ));
    group.push(Parameter::new(
        format!("{prefix}.l{idx}.b"),
        Tensor::zeros(&[fan_out]),
    ));
}

/// Linear layer on a column-batched matrix: W·X + b broadcast over columns.
fn linear(tape: &mut Tape, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
    let z = tape.matmul(w, x, false, false)?;
    let n = tape.value(z).cols();
    let bb = tape.col_broadcast(b, n)?;
    tape.add(z, bb)
}

// ----- region encoder (θ1) ----------------------------------------------------

/// PointNet-style encoder: shared per-point MLP followed by a max-pool over
/// the points, so the feature is invariant to input permutation.
#[derive(Debug, Clone)]
pub struct RegionEncoder {
    pub group: ParamGroup,
    cfg: ArchConfig,
}

impl RegionEncoder {
    pub fn new(cfg: &ArchConfig, rng: &mut impl Rng) -> Self {
        let mut group = ParamGroup::new();
        let mut widths = vec![cfg.dim];
        widths.extend(&cfg.enc_hidden);
        widths.push(cfg.feature);
        for (i, win) in widths.windows(2).enumerate() {
            layer_params(&mut group, "enc", i + 1, win[1], win[0], 1.0, rng);
        }
        RegionEncoder { group, cfg: cfg.clone() }
    }

    pub fn cfg(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.group.bind(tape, trainable)
    }

    /// Feature of a point batch [dim, n] -> [feature].
    pub fn forward(&self, tape: &mut Tape, ids: &[NodeId], points: NodeId) -> Result<NodeId> {
        let v = tape.value(points);
        if v.rank() != 2 || v.rows() != self.cfg.dim {
            return Err(Error::ShapeMismatch {
                op: "encode_region",
                lhs: v.dims().to_vec(),
                rhs: vec![self.cfg.dim, 0],
            });
        }
        let mut h = points;
        let layers = ids.len() / 2;
        for l in 0..layers {
            h = linear(tape, ids[2 * l], ids[2 * l + 1], h)?;
            h = tape.relu(h)?;
        }
        tape.max_cols(h)
    }

    /// Evaluate the feature of a normalized point set.
    pub fn encode(&self, points: &[f64]) -> Result<Tensor> {
        if points.is_empty() {
            return Err(Error::EmptyInput { what: "encoder input" });
        }
        let n = points.len() / self.cfg.dim;
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let x = tape.leaf(Tensor::matrix(n, self.cfg.dim, points.to_vec()).transposed());
        let f = self.forward(&mut tape, &ids, x)?;
        Ok(tape.value(f).clone())
    }
}

// ----- implicit SDF network (θ2) -----------------------------------------------

/// Conditioned signed-distance network: query and condition are concatenated
/// at the input, re-concatenated at the skip layer, and the last layer is
/// linear so the output is an unbounded scalar.
#[derive(Debug, Clone)]
pub struct ImplicitNet {
    pub group: ParamGroup,
    cfg: ArchConfig,
}

impl ImplicitNet {
    pub fn new(cfg: &ArchConfig, rng: &mut impl Rng) -> Self {
        let mut group = ParamGroup::new();
        let input = cfg.imp_input();
        let h = cfg.imp_hidden;
        for l in 1..=cfg.imp_layers {
            let fan_in = if l == 1 {
                input
            } else if Some(l) == cfg.imp_skip_layer() {
                h + input
            } else {
                h
            };
            let fan_out = if l == cfg.imp_layers { 1 } else { h };
            layer_params(&mut group, "imp", l, fan_out, fan_in, 1.0, rng);
        }
        ImplicitNet { group, cfg: cfg.clone() }
    }

    pub fn cfg(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.group.bind(tape, trainable)
    }

    /// Signed distances of a query batch: q [dim, n], f [feature, n] -> [n].
    pub fn forward(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        q: NodeId,
        f: NodeId,
    ) -> Result<NodeId> {
        let (vq, vf) = (tape.value(q), tape.value(f));
        if vq.rank() != 2 || vq.rows() != self.cfg.dim {
            return Err(Error::ShapeMismatch {
                op: "sdf_eval",
                lhs: vq.dims().to_vec(),
                rhs: vec![self.cfg.dim, 0],
            });
        }
        if vf.rank() != 2 || vf.rows() != self.cfg.feature || vf.cols() != vq.cols() {
            return Err(Error::ShapeMismatch {
                op: "sdf_eval",
                lhs: vf.dims().to_vec(),
                rhs: vec![self.cfg.feature, vq.cols()],
            });
        }
        let input = tape.concat(&[q, f])?;
        let mut h = input;
        for l in 1..=self.cfg.imp_layers {
            if Some(l) == self.cfg.imp_skip_layer() {
                h = tape.concat(&[h, input])?;
            }
            h = linear(tape, ids[2 * (l - 1)], ids[2 * l - 1], h)?;
            if l < self.cfg.imp_layers {
                h = tape.relu(h)?;
            }
        }
        let n = tape.value(h).cols();
        tape.reshape(h, vec![n])
    }

    /// Scalar signed distance at one query under one condition.
    pub fn sdf_eval(&self, q: &[f64], f: &Tensor) -> Result<f64> {
        let (s, _) = self.eval_inner(q, f, false)?;
        Ok(s)
    }

    /// Signed distance and its gradient with respect to the query.
    pub fn sdf_eval_with_grad(&self, q: &[f64], f: &Tensor) -> Result<(f64, Vec<f64>)> {
        let (s, g) = self.eval_inner(q, f, true)?;
        Ok((s, g.unwrap()))
    }

    fn eval_inner(&self, q: &[f64], f: &Tensor, grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        if q.len() != self.cfg.dim {
            return Err(Error::DimMismatch {
                expected: self.cfg.dim,
                found: q.len(),
                context: "sdf_eval query".into(),
            });
        }
        if f.dims() != [self.cfg.feature] {
            return Err(Error::DimMismatch {
                expected: self.cfg.feature,
                found: f.len(),
                context: "sdf_eval condition".into(),
            });
        }
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let qn = tape.leaf(Tensor::matrix(self.cfg.dim, 1, q.to_vec()));
        let fn_ = tape.leaf(Tensor::matrix(self.cfg.feature, 1, f.data().to_vec()));
        let s = self.forward(&mut tape, &ids, qn, fn_)?;
        let sv = tape.value(s).data()[0];
        if !grad {
            return Ok((sv, None));
        }
        let ssum = tape.sum(s)?;
        let g = tape.input_gradient(ssum, qn)?;
        Ok((sv, Some(tape.value(g).data().to_vec())))
    }
}

// ----- query network (θ3) -------------------------------------------------------

/// How the query network's outputs are wired into the frozen prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Residual shift plus predicted condition.
    Full,
    /// Shift head bypassed; the global query is used as-is.
    NoShift,
    /// The last `dim` outputs are the relocated query directly.
    DirectQ,
    /// Predicted condition replaced by an externally supplied feature.
    FixedCond,
}

/// Feed-forward network producing, per query, a condition vector and a
/// residual shift. The final layer starts near zero so training begins close
/// to the identity relocation.
#[derive(Debug, Clone)]
pub struct QueryNet {
    pub group: ParamGroup,
    cfg: ArchConfig,
}

impl QueryNet {
    pub fn new(cfg: &ArchConfig, rng: &mut impl Rng) -> Self {
        let mut group = ParamGroup::new();
        let h = cfg.qnet_hidden;
        for l in 1..=cfg.qnet_layers {
            let fan_in = if l == 1 { cfg.dim } else { h };
            let (fan_out, scale) = if l == cfg.qnet_layers {
                (cfg.feature + cfg.dim, 0.01)
            } else {
                (h, 1.0)
            };
            layer_params(&mut group, "qnet", l, fan_out, fan_in, scale, rng);
        }
        QueryNet { group, cfg: cfg.clone() }
    }

    pub fn cfg(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.group.bind(tape, trainable)
    }

    fn raw_forward(&self, tape: &mut Tape, ids: &[NodeId], qg: NodeId) -> Result<NodeId> {
        let v = tape.value(qg);
        if v.rank() != 2 || v.rows() != self.cfg.dim {
            return Err(Error::ShapeMismatch {
                op: "predict_query",
                lhs: v.dims().to_vec(),
                rhs: vec![self.cfg.dim, 0],
            });
        }
        let mut h = qg;
        for l in 1..=self.cfg.qnet_layers {
            h = linear(tape, ids[2 * (l - 1)], ids[2 * l - 1], h)?;
            if l < self.cfg.qnet_layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Relocated queries and their conditions: qg [dim, n] ->
    /// (q_l' [dim, n], f_l' [feature, n]).
    pub fn predict(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        qg: NodeId,
        mode: QueryMode,
        fixed_cond: Option<&Tensor>,
    ) -> Result<(NodeId, NodeId)> {
        let out = self.raw_forward(tape, ids, qg)?;
        let fdim = self.cfg.feature;
        let ddim = self.cfg.dim;
        let n = tape.value(out).cols();
        let f_raw = tape.slice_rows(out, 0, fdim)?;
        let dq = tape.slice_rows(out, fdim, fdim + ddim)?;
        let f = match mode {
            QueryMode::FixedCond => {
                let fc = fixed_cond.ok_or_else(|| {
                    Error::Config("fixed_cond mode requires a supplied condition".into())
                })?;
                if fc.dims() != [fdim] {
                    return Err(Error::DimMismatch {
                        expected: fdim,
                        found: fc.len(),
                        context: "fixed condition".into(),
                    });
                }
                let leaf = tape.leaf(fc.clone());
                tape.col_broadcast(leaf, n)?
            }
            _ => f_raw,
        };
        let q = match mode {
            QueryMode::Full | QueryMode::FixedCond => tape.add(qg, dq)?,
            QueryMode::NoShift => qg,
            QueryMode::DirectQ => dq,
        };
        Ok((q, f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rng0() -> rand_chacha::ChaCha12Rng {
        rng::substream(1234, rng::Stream::Init, 0, 0)
    }

    fn small_cfg(dim: usize) -> ArchConfig {
        ArchConfig {
            dim,
            feature: 12,
            enc_hidden: vec![8, 10],
            imp_hidden: 14,
            imp_layers: 8,
            qnet_hidden: 10,
            qnet_layers: 8,
        }
    }

    fn pack_cols(dim: usize, pts: &[f64]) -> Tensor {
        let n = pts.len() / dim;
        Tensor::matrix(n, dim, pts.to_vec()).transposed()
    }

    #[test]
    fn encoder_feature_has_configured_width() {
        let mut r = rng0();
        let enc = RegionEncoder::new(&ArchConfig::default(), &mut r);
        let pts: Vec<f64> = (0..30).map(|i| (i as f64) * 0.01).collect();
        let f = enc.encode(&pts).unwrap();
        assert_eq!(f.dims(), &[512]);
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let mut r = rng0();
        let enc = RegionEncoder::new(&small_cfg(3), &mut r);
        let pts: Vec<f64> = (0..36).map(|i| ((i * 37 % 19) as f64) * 0.05 - 0.45).collect();
        let f1 = enc.encode(&pts).unwrap();
        // rotate the point order
        let mut perm = pts[9..].to_vec();
        perm.extend_from_slice(&pts[..9]);
        let f2 = enc.encode(&perm).unwrap();
        for (a, b) in f1.data().iter().zip(f2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn encoder_ignores_duplicated_points() {
        let mut r = rng0();
        let enc = RegionEncoder::new(&small_cfg(2), &mut r);
        let pts = vec![0.1, -0.2, 0.4, 0.3, -0.5, 0.0];
        let mut doubled = pts.clone();
        doubled.extend_from_slice(&pts);
        let f1 = enc.encode(&pts).unwrap();
        let f2 = enc.encode(&doubled).unwrap();
        assert_eq!(f1.data(), f2.data());
    }

    #[test]
    fn encoder_rejects_empty_input() {
        let mut r = rng0();
        let enc = RegionEncoder::new(&small_cfg(3), &mut r);
        assert!(enc.encode(&[]).is_err());
    }

    #[test]
    fn zero_implicit_net_outputs_zero() {
        let mut r = rng0();
        let cfg = small_cfg(3);
        let mut net = ImplicitNet::new(&cfg, &mut r);
        for p in 0..net.group.len() {
            let name = net.group.params()[p].name.clone();
            let dims = net.group.params()[p].value.dims().to_vec();
            net.group.get_mut(&name).unwrap().value = Tensor::zeros(&dims);
        }
        let f = Tensor::vector(vec![0.3; cfg.feature]);
        let (s, g) = net.sdf_eval_with_grad(&[0.1, 0.2, 0.3], &f).unwrap();
        assert_eq!(s, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sdf_eval_is_deterministic() {
        let mut r = rng0();
        let cfg = small_cfg(3);
        let net = ImplicitNet::new(&cfg, &mut r);
        let f = Tensor::vector((0..cfg.feature).map(|i| (i as f64) * 0.01).collect());
        let a = net.sdf_eval(&[0.1, -0.2, 0.05], &f).unwrap();
        let b = net.sdf_eval(&[0.1, -0.2, 0.05], &f).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn sdf_eval_rejects_width_mismatch() {
        let mut r = rng0();
        let net = ImplicitNet::new(&small_cfg(3), &mut r);
        let f = Tensor::vector(vec![0.0; 5]);
        assert!(net.sdf_eval(&[0.1, 0.2, 0.3], &f).is_err());
        let f = Tensor::vector(vec![0.0; 12]);
        assert!(net.sdf_eval(&[0.1, 0.2], &f).is_err());
    }

    #[test]
    fn sdf_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut r = rng0();
        let cfg = small_cfg(3);
        let net = ImplicitNet::new(&cfg, &mut r);
        let mut worst: f64 = 0.0;
        let mut checked = 0usize;
        for _ in 0..100 {
            let f = Tensor::vector(
                (0..cfg.feature).map(|_| r.random_range(-0.5..0.5)).collect(),
            );
            let q = [
                r.random_range(-0.5..0.5),
                r.random_range(-0.5..0.5),
                r.random_range(-0.5..0.5),
            ];
            let (_, g) = net.sdf_eval_with_grad(&q, &f).unwrap();
            let h = 1e-4;
            for a in 0..3 {
                let fd_at = |step: f64| {
                    let mut qp = q;
                    qp[a] += step;
                    let mut qm = q;
                    qm[a] -= step;
                    (net.sdf_eval(&qp, &f).unwrap() - net.sdf_eval(&qm, &f).unwrap())
                        / (2.0 * step)
                };
                let fd = fd_at(h);
                // a ReLU kink inside the stencil makes the FD oracle itself
                // invalid; detect it by step-halving disagreement and skip
                let scale = fd.abs().max(g[a].abs()).max(1.0);
                if (fd - fd_at(h / 2.0)).abs() > 1e-6 * scale {
                    continue;
                }
                checked += 1;
                let rel = (g[a] - fd).abs() / scale;
                worst = worst.max(rel);
            }
        }
        assert!(checked > 250, "only {checked} FD components were checkable");
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn linear_implicit_net_gradient_is_exact() {
        let mut r = rng0();
        let cfg = ArchConfig { imp_layers: 1, ..small_cfg(3) };
        let net = ImplicitNet::new(&cfg, &mut r);
        let w = net.group.get("imp.l1.w").unwrap().value.clone();
        let f = Tensor::vector(vec![0.2; cfg.feature]);
        let (_, g) = net.sdf_eval_with_grad(&[0.4, -0.1, 0.7], &f).unwrap();
        for a in 0..3 {
            assert!((g[a] - w.at2(0, a)).abs() < 1e-15);
        }
    }

    #[test]
    fn query_net_default_head_widths() {
        let mut r = rng0();
        let qnet = QueryNet::new(&ArchConfig::default(), &mut r);
        let last = qnet.group.get("qnet.l8.w").unwrap();
        assert_eq!(last.value.dims(), &[515, 512]);
        let mut tape = Tape::new();
        let ids = qnet.bind(&mut tape, false);
        let qg = tape.leaf(Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let (q, f) = qnet.predict(&mut tape, &ids, qg, QueryMode::Full, None).unwrap();
        assert_eq!(tape.value(f).dims(), &[512, 2]);
        assert_eq!(tape.value(q).dims(), &[3, 2]);
    }

    #[test]
    fn zero_final_layer_gives_identity_relocation() {
        let mut r = rng0();
        let cfg = small_cfg(2);
        let mut qnet = QueryNet::new(&cfg, &mut r);
        let last_w = qnet.group.get("qnet.l8.w").unwrap().value.dims().to_vec();
        qnet.group.get_mut("qnet.l8.w").unwrap().value = Tensor::zeros(&last_w);
        let mut tape = Tape::new();
        let ids = qnet.bind(&mut tape, false);
        let qg = tape.leaf(pack_cols(2, &[0.3, -0.4, 0.9, 0.1]));
        let (q, _) = qnet.predict(&mut tape, &ids, qg, QueryMode::Full, None).unwrap();
        assert_eq!(tape.value(q).data(), tape.value(qg).data());
    }

    #[test]
    fn no_shift_mode_returns_query_unchanged() {
        let mut r = rng0();
        let cfg = small_cfg(2);
        let qnet = QueryNet::new(&cfg, &mut r);
        let mut tape = Tape::new();
        let ids = qnet.bind(&mut tape, false);
        let qg = tape.leaf(pack_cols(2, &[0.3, -0.4, 0.9, 0.1]));
        let (q, _) = qnet.predict(&mut tape, &ids, qg, QueryMode::NoShift, None).unwrap();
        assert_eq!(q, qg);
    }

    #[test]
    fn full_mode_is_residual() {
        let mut r = rng0();
        let cfg = small_cfg(2);
        let qnet = QueryNet::new(&cfg, &mut r);
        let mut tape = Tape::new();
        let ids = qnet.bind(&mut tape, false);
        let qg = tape.leaf(pack_cols(2, &[0.3, -0.4, 0.9, 0.1]));
        let (q, _) = qnet.predict(&mut tape, &ids, qg, QueryMode::Full, None).unwrap();
        let out = qnet.raw_forward(&mut tape, &ids, qg).unwrap();
        let dq = tape.slice_rows(out, cfg.feature, cfg.feature + 2).unwrap();
        for i in 0..4 {
            let want = tape.value(qg).data()[i] + tape.value(dq).data()[i];
            assert_eq!(tape.value(q).data()[i], want);
        }
    }

    #[test]
    fn fixed_cond_requires_condition() {
        let mut r = rng0();
        let cfg = small_cfg(2);
        let qnet = QueryNet::new(&cfg, &mut r);
        let mut tape = Tape::new();
        let ids = qnet.bind(&mut tape, false);
        let qg = tape.leaf(pack_cols(2, &[0.3, -0.4]));
        assert!(qnet
            .predict(&mut tape, &ids, qg, QueryMode::FixedCond, None)
            .is_err());
        let fc = Tensor::vector(vec![0.5; cfg.feature]);
        let (_, f) = qnet
            .predict(&mut tape, &ids, qg, QueryMode::FixedCond, Some(&fc))
            .unwrap();
        assert_eq!(tape.value(f).at2(3, 0), 0.5);
    }
}
