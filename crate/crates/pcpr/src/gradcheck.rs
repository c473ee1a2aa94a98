//! Randomized finite-difference validation of the autodiff engine: a
//! first-order suite over random MLPs and a double-backprop suite over
//! losses built from the input-gradient (the pulled-point residual shape).
//!
//! Finite differences are only a valid oracle away from ReLU kinks, so every
//! component is cross-checked with a half-step estimate and skipped when the
//! two disagree; the skip count is reported.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::prior::{pulling_loss, LossMode};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, serde::Serialize)]
pub struct SuiteResult {
    pub instances: usize,
    pub components_checked: usize,
    pub components_skipped: usize,
    pub max_rel_err: f64,
}

struct MlpSpec {
    widths: Vec<usize>,
    params: Vec<Tensor>,
    input: Tensor,
}

fn random_mlp(rng: &mut impl Rng, max_layers: usize, max_width: usize) -> MlpSpec {
    let layers = rng.random_range(1..=max_layers);
    let mut widths = vec![rng.random_range(2..=max_width)];
    for _ in 0..layers {
        widths.push(rng.random_range(2..=max_width));
    }
    let mut params = Vec::new();
    for win in widths.windows(2) {
        let (n_in, n_out) = (win[0], win[1]);
        let scale = (2.0 / (n_in + n_out) as f64).sqrt();
        params.push(Tensor::matrix(
            n_out,
            n_in,
            (0..n_in * n_out).map(|_| rng.random_range(-scale..scale)).collect(),
        ));
        params.push(Tensor::vector(
            (0..n_out).map(|_| rng.random_range(-0.1..0.1)).collect(),
        ));
    }
    let input = Tensor::vector((0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect());
    MlpSpec { widths, params, input }
}

fn mlp_forward(tape: &mut Tape, spec: &MlpSpec, params: &[Tensor], trainable: bool) -> (NodeId, Vec<NodeId>) {
    let mut ids = Vec::new();
    let mut h = tape.leaf(spec.input.clone());
    let hidden_layers = spec.widths.len() - 1;
    for (li, pair) in params.chunks(2).enumerate() {
        let w = if trainable {
            tape.param_leaf(pair[0].clone())
        } else {
            tape.leaf(pair[0].clone())
        };
        let b = if trainable {
            tape.param_leaf(pair[1].clone())
        } else {
            tape.leaf(pair[1].clone())
        };
        ids.push(w);
        ids.push(b);
        let z = tape.matvec(w, h).expect("shapes are constructed to agree");
        h = tape.add(z, b).expect("bias shape agrees");
        if li + 1 < hidden_layers {
            h = tape.relu(h).expect("relu");
        }
    }
    (h, ids)
}

/// scalar loss = ‖mlp(x)‖₂
fn first_order_loss(spec: &MlpSpec, params: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let (h, _) = mlp_forward(&mut tape, spec, params, false);
    let l = tape.norm(h).expect("norm");
    tape.value(l).scalar_value()
}

/// Pulled-point-residual loss built from the input-gradient of the net's
/// scalar output; exercises the double-backprop path.
fn double_backprop_loss(spec: &MlpSpec, params: &[Tensor], nn: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = double_backprop_graph(&mut tape, spec, params, nn, false);
    tape.value(loss).scalar_value()
}

fn double_backprop_graph(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: &[Tensor],
    nn: &Tensor,
    trainable: bool,
) -> (NodeId, Vec<NodeId>) {
    let q = tape.leaf(spec.input.clone());
    let mut ids = Vec::new();
    let mut h = q;
    let hidden_layers = spec.widths.len() - 1;
    for (li, pair) in params.chunks(2).enumerate() {
        let w = if trainable {
            tape.param_leaf(pair[0].clone())
        } else {
            tape.leaf(pair[0].clone())
        };
        let b = if trainable {
            tape.param_leaf(pair[1].clone())
        } else {
            tape.leaf(pair[1].clone())
        };
        ids.push(w);
        ids.push(b);
        let z = tape.matvec(w, h).expect("matvec");
        h = tape.add(z, b).expect("add");
        if li + 1 < hidden_layers {
            h = tape.relu(h).expect("relu");
        }
    }
    let s = tape.sum(h).expect("sum");
    let grad = tape.input_gradient(s, q).expect("input gradient");
    let nn_node = tape.leaf(nn.clone());
    let loss = pulling_loss(tape, q, nn_node, s, grad, LossMode::Squared).expect("loss");
    (loss, ids)
}

/// Run one FD comparison over a random subset of parameter components.
fn fd_compare(
    rng: &mut impl Rng,
    params: &[Tensor],
    adjoints: &[Tensor],
    loss: &dyn Fn(&[Tensor]) -> f64,
    step: f64,
    samples_per_instance: usize,
    result: &mut SuiteResult,
) {
    let total: usize = params.iter().map(|p| p.len()).sum();
    for _ in 0..samples_per_instance {
        let mut flat = rng.random_range(0..total);
        let mut pi = 0;
        while flat >= params[pi].len() {
            flat -= params[pi].len();
            pi += 1;
        }
        let fd_at = |h: f64| {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[flat] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[flat] -= h;
            (loss(&plus) - loss(&minus)) / (2.0 * h)
        };
        let fd = fd_at(step);
        let ad = adjoints[pi].data()[flat];
        let scale = fd.abs().max(ad.abs()).max(1.0);
        if (fd - fd_at(step / 2.0)).abs() > 1e-6 * scale {
            result.components_skipped += 1;
            continue;
        }
        result.components_checked += 1;
        let rel = (ad - fd).abs() / scale;
        if rel > result.max_rel_err {
            result.max_rel_err = rel;
        }
    }
}

/// Reverse-mode adjoints vs central finite differences (step 1e-4) on random
/// MLP losses; errors above `tol` fail.
pub fn first_order_suite(
    instances: usize,
    max_layers: usize,
    max_width: usize,
    seed: u64,
    tol: f64,
) -> Result<SuiteResult> {
    let mut rng = rng::substream(seed, Stream::GradCheck, 0, 0);
    let mut result = SuiteResult {
        instances,
        components_checked: 0,
        components_skipped: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..instances {
        let spec = random_mlp(&mut rng, max_layers, max_width);
        let mut tape = Tape::new();
        let (h, ids) = mlp_forward(&mut tape, &spec, &spec.params, true);
        let l = tape.norm(h)?;
        let adjoints = tape.grad_values(l, &ids)?;
        let loss = |p: &[Tensor]| first_order_loss(&spec, p);
        fd_compare(&mut rng, &spec.params, &adjoints, &loss, 1e-4, 30, &mut result);
    }
    if result.max_rel_err >= tol {
        return Err(Error::Numerical(format!(
            "first-order gradient check failed: max relative error {} >= {tol}",
            result.max_rel_err
        )));
    }
    Ok(result)
}

/// Weight gradients of a loss containing `input_gradient` vs central finite
/// differences; exercises second-order flow through the pulled-point
/// residual.
pub fn double_backprop_suite(
    instances: usize,
    max_layers: usize,
    max_width: usize,
    seed: u64,
    tol: f64,
) -> Result<SuiteResult> {
    let mut rng = rng::substream(seed, Stream::GradCheck, 1, 0);
    let mut result = SuiteResult {
        instances,
        components_checked: 0,
        components_skipped: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..instances {
        let spec = random_mlp(&mut rng, max_layers, max_width);
        let nn = Tensor::vector(
            (0..spec.widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let mut tape = Tape::new();
        let (loss_node, ids) = double_backprop_graph(&mut tape, &spec, &spec.params, &nn, true);
        let adjoints = tape.grad_values(loss_node, &ids)?;
        let loss = |p: &[Tensor]| double_backprop_loss(&spec, p, &nn);
        fd_compare(&mut rng, &spec.params, &adjoints, &loss, 1e-5, 20, &mut result);
    }
    if result.max_rel_err >= tol {
        return Err(Error::Numerical(format!(
            "double-backprop gradient check failed: max relative error {} >= {tol}",
            result.max_rel_err
        )));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_order_suite_passes_default_budget() {
        let r = first_order_suite(20, 5, 32, 99, 1e-4).unwrap();
        assert!(r.components_checked > 400);
        assert!(r.max_rel_err < 1e-4);
    }

    #[test]
    fn double_backprop_suite_passes_default_budget() {
        let r = double_backprop_suite(10, 3, 16, 7, 1e-3).unwrap();
        assert!(r.components_checked > 100);
        assert!(r.max_rel_err < 1e-3);
    }

    #[test]
    fn single_linear_layer_errors_are_tiny() {
        // a 1-layer net has no ReLU at all; FD of the norm loss is smooth
        let r = first_order_suite(5, 1, 8, 3, 1e-4).unwrap();
        assert_eq!(r.components_skipped, 0);
        assert!(r.max_rel_err < 1e-7, "max {}", r.max_rel_err);
    }
}
