//! AdamW with decoupled weight decay, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimState<T> {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, weight_decay: f64) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn for_model(params: &ModelParams<Tensor<T>>, weight_decay: f64) -> Self {
        Self::new(params.tensors(), weight_decay)
    }
}

/// Checks shapes and advances the step counter; returns the bias
/// corrections `(1 - b1^t, 1 - b2^t)`.
fn begin_step<T: Scalar>(shapes: &[&[usize]], grads: &[Tensor<T>], state: &mut OptimState<T>) -> Result<(f64, f64)> {
    if shapes.len() != grads.len() || shapes.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} parameters, {} gradients, {} moment slots",
            shapes.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (s, g)) in shapes.iter().zip(grads).enumerate() {
        if *s != g.shape() || *s != state.m[i].shape() {
            return Err(Error::Contract(format!("adamw_step: tensor {i} has shape {s:?}, gradient {:?}", g.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    Ok((1.0 - state.beta1.powi(t), 1.0 - state.beta2.powi(t)))
}

fn update_tensor<T: Scalar>(p: &mut Tensor<T>, i: usize, grads: &[Tensor<T>], state: &mut OptimState<T>, lr_t: f64, c: (f64, f64)) {
    let (b1, b2) = (state.beta1, state.beta2);
    let decay = 1.0 - lr_t * state.weight_decay;
    let g = grads[i].data();
    let m = state.m[i].data_mut();
    let v = state.v[i].data_mut();
    for (k, theta) in p.data_mut().iter_mut().enumerate() {
        let gk = g[k].as_f64();
        let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
        let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
        m[k] = T::lit(mk);
        v[k] = T::lit(vk);
        let mut th = theta.as_f64();
        if state.weight_decay != 0.0 {
            th *= decay;
        }
        th -= lr_t * (mk / c.0) / ((vk / c.1).sqrt() + state.eps);
        *theta = T::lit(th);
    }
}

/// One AdamW step over `params` (in a fixed order matching `grads` and the
/// state). Decay `theta -= lr * wd * theta` comes first, then the
/// bias-corrected Adam update `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
/// On a shape error nothing is modified.
pub fn adamw_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut OptimState<T>, lr_t: f64) -> Result<()> {
    let shapes: Vec<&[usize]> = params.iter().map(Tensor::shape).collect();
    let c = begin_step(&shapes, grads, state)?;
    for (i, p) in params.iter_mut().enumerate() {
        update_tensor(p, i, grads, state, lr_t, c);
    }
    Ok(())
}

/// [`adamw_step`] over a model's tensors in canonical order.
pub fn adamw_step_model<T: Scalar>(
    params: &mut ModelParams<Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr_t: f64,
) -> Result<()> {
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let c = begin_step(&shape_refs, grads, state)?;
    let mut i = 0;
    params.visit_mut(&mut |p| {
        update_tensor(p, i, grads, state, lr_t, c);
        i += 1;
    });
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

impl Schedule {
    /// Learning rate for optimizer step `step` of `total` (0-based).
    /// Cosine decays from `base` at step 0 towards zero at step `total`.
    pub fn lr(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = vec![Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5)];
        let before = p.clone();
        let mut s = OptimState::new(&p, 0.0);
        adamw_step(&mut p, &[Tensor::zeros(&[2, 3])], &mut s, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_grad_decay_scales() {
        let mut p = vec![Tensor::from_fn(&[4], |i| i as f64 + 1.0)];
        let before = p[0].clone();
        let mut s = OptimState::new(&p, 0.01);
        adamw_step(&mut p, &[Tensor::zeros(&[4])], &mut s, 0.1).unwrap();
        for (a, b) in p[0].data().iter().zip(before.data()) {
            assert!((a - 0.999 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_size() {
        let mut p = vec![one(0.0)];
        let mut s = OptimState::new(&p, 0.0);
        adamw_step(&mut p, &[one(1.0)], &mut s, 1e-3).unwrap();
        assert!((p[0].data()[0] - (-9.99999990e-4)).abs() < 1e-15);
    }

    #[test]
    fn ten_step_trace_matches_reference_adam() {
        // Reference written out independently as textbook Adam on a scalar.
        let grads = [0.5, -1.0, 2.0, 0.0, 0.25, -0.75, 1.5, -2.0, 0.1, 3.0];
        let lr = 0.01;
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 1.0f64);
        let mut trace = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(i as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(i as i32 + 1));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
            trace.push(theta);
        }
        let mut p = vec![one(1.0)];
        let mut s = OptimState::new(&p, 0.0);
        for (g, want) in grads.iter().zip(&trace) {
            adamw_step(&mut p, &[one(*g)], &mut s, lr).unwrap();
            assert!((p[0].data()[0] - want).abs() < 1e-15, "{} vs {want}", p[0].data()[0]);
        }
        for t in s.v.iter() {
            assert!(t.data().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = vec![one(0.0)];
        let mut s = OptimState::new(&p, 0.0);
        let r = adamw_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.1);
        assert!(matches!(r, Err(Error::Contract(_))));
        assert_eq!(s.t, 0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(Schedule::Cosine.lr(1e-3, 0, 100), 1e-3);
        assert!((Schedule::Cosine.lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(Schedule::Cosine.lr(1e-3, 100, 100).abs() < 1e-18);
        assert_eq!(Schedule::Constant.lr(1e-3, 70, 100), 1e-3);
    }
}
