//! Central finite-difference oracle for checking analytic gradients.
//!
//! Works on plain tensors and a closure that evaluates the loss from
//! scratch, so it shares no code with the backward pass it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{NoiseMode, NoiseSource};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::model::{init_params, model_forward, ModelConfig, ModelParams};
use crate::parallel::Execution;
use crate::tensor::Tensor;

/// Step used by every gradient check in the crate.
pub const FD_STEP: f64 = 1e-6;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively; central differences at `FD_STEP` carry roughly
/// `1e-16 * |loss| / FD_STEP` of rounding noise.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (tensor index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences `(f(p + h) - f(p - h)) / 2h` for every scalar of
/// every tensor in `params`.
pub fn numeric_gradients(
    params: &[Tensor<f64>],
    step: f64,
    mut loss: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Vec<Tensor<f64>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for k in 0..params[p].numel() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + step;
            let up = loss(&work);
            work[p].data_mut()[k] = orig - step;
            let down = loss(&work);
            work[p].data_mut()[k] = orig;
            grad.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

pub fn compare(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (k, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(av, nv);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((p, k));
            }
        }
    }
    report
}

/// Checks every parameter gradient of a freshly initialised model on `n`
/// random points, with loss `sum(out * probe)` for a random probe. Noise
/// (in `TrainNoise` mode) is a fixed draw, so the loss is a deterministic
/// function of the parameters.
pub fn model_gradient_check(config: &ModelConfig, n: usize, mode: NoiseMode) -> Result<GradCheckReport> {
    let params = init_params::<f64>(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9c4e);
    let features = Tensor::from_fn(&[n, config.d_in], |_| rng.gen_range(-1.0..1.0));
    let probe = Tensor::from_fn(&[n, config.d_out], |_| rng.gen_range(-1.0..1.0));
    let noise = NoiseSource::new(config.seed).at_step(3);

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(features.clone());
    let fwd = model_forward(&mut g, &bound, config, x, mode, &noise, &Execution::Serial)?;
    let p = g.constant(probe.clone());
    let prod = g.mul(fwd.out, p)?;
    let loss = g.sum(prod)?;
    g.backward(loss)?;
    let mut analytic = Vec::new();
    bound.visit(&mut |&v: &Var| analytic.push(g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)))));

    let flat: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    let mut failure = None;
    let numeric = numeric_gradients(&flat, FD_STEP, |ps| {
        let mut it = ps.iter();
        let trial: ModelParams<Tensor<f64>> = params.map(&mut |_| it.next().expect("tensor count").clone());
        let mut g = Graph::new();
        let bound = trial.map(&mut |t| g.constant(t.clone()));
        let x = g.constant(features.clone());
        let out = model_forward(&mut g, &bound, config, x, mode, &noise, &Execution::Serial)
            .map(|f| g.value(f.out).clone());
        match out {
            Ok(o) => o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum(),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(compare(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let p = vec![Tensor::new(vec![2], vec![1.5, -0.5]).unwrap()];
        let num = numeric_gradients(&p, FD_STEP, |ps| ps[0].data().iter().map(|x| x * x * x).sum());
        let analytic = vec![p[0].map(|x| 3.0 * x * x)];
        assert!(compare(&analytic, &num).passes(1e-6));
    }
}
