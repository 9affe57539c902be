//! Fast invariant suite exposed by the command-line `selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{rep_slice, Linear, NoiseMode, SliceConfig};
use crate::autograd::Graph;
use crate::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::dataio::{decode_sample, encode_sample, gen_sphere_dataset};
use crate::error::Result;
use crate::gradcheck::model_gradient_check;
use crate::metrics::{kl_uniform, r_squared, relative_l2};
use crate::model::{init_params, ModelConfig};
use crate::optim::{adamw_step, OptimState};
use crate::parallel::{comm_volume_report, layer_comm_scalars, serial_parallel_check};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((pass, detail)) => CheckResult { name, pass, detail },
        Err(e) => CheckResult { name, pass: false, detail: format!("error: {e}") },
    }
}

pub fn run_selftest() -> Vec<CheckResult> {
    vec![
        check("softmax_rows_sum_to_one", || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut g = Graph::<f64>::new();
            let logits = g.constant(Tensor::from_fn(&[64, 8], |_| rng.gen_range(-50.0..50.0)));
            let w = g.softmax(logits)?;
            let worst = (0..64)
                .map(|i| (g.value(w).row(i).iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            Ok((worst <= 1e-12, format!("max |row sum - 1| = {worst:.2e}")))
        }),
        check("rep_slice_without_noise_is_temperature_softmax", || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut g = Graph::<f64>::new();
            let lin = Linear::<Tensor<f64>>::init(4, 3, &mut rng);
            let lin = lin.map(&mut |t| g.constant(t.clone()));
            let x = g.constant(Tensor::from_fn(&[5, 4], |_| rng.gen_range(-1.0..1.0)));
            let tau = g.constant(Tensor::from_fn(&[5, 1], |_| rng.gen_range(0.2..1.0)));
            let a = rep_slice(&mut g, x, tau, &lin, None)?;
            let logits = lin.apply(&mut g, x)?;
            let b = g.softmax_temp(logits, tau)?;
            Ok((g.value(a) == g.value(b), "bitwise comparison".into()))
        }),
        check("model_gradients_match_finite_differences", || {
            let cfg = ModelConfig::new(1, 2, 4, 2, 3, 1);
            let mut worst: f64 = 0.0;
            for mode in [NoiseMode::NoNoise, NoiseMode::TrainNoise] {
                worst = worst.max(model_gradient_check(&cfg, 4, mode)?.max_rel_err);
            }
            Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
        }),
        check("serial_parallel_equivalence", || {
            let cfg = ModelConfig::new(1, 2, 8, 4, 3, 1);
            let rows = serial_parallel_check(&cfg, 16, &[1, 2, 4], NoiseMode::TrainNoise, true)?;
            let worst = rows.iter().map(|r| r.forward_deviation).fold(0.0, f64::max);
            Ok((rows.iter().all(|r| r.pass), format!("max forward deviation {worst:.2e}")))
        }),
        check("communication_independent_of_points", || {
            let slice = SliceConfig::new(32, 8, 256);
            let rows = comm_volume_report(&slice, 4, &[1_000, 10_000, 100_000, 1_000_000]);
            let expect = 4 * 32 * (256 + 8) * 8;
            let ok = rows.iter().all(|r| r.bytes_per_layer == expect)
                && layer_comm_scalars(&slice, 8) == 2 * layer_comm_scalars(&slice, 4);
            Ok((ok, format!("{expect} bytes per layer")))
        }),
        check("sample_and_checkpoint_round_trip", || {
            let s = gen_sphere_dataset(1, 16, 3)?.remove(0);
            let buf = encode_sample(&s)?;
            let sample_ok = decode_sample(&buf)? == s;
            let cfg = ModelConfig::new(1, 2, 4, 2, 6, 1);
            let p = init_params::<f64>(&cfg)?;
            let (c2, p2) = decode_checkpoint(&encode_checkpoint(&cfg, &p)?)?;
            Ok((sample_ok && c2 == cfg && p2 == p, "bitwise comparison".into()))
        }),
        check("kl_within_bounds", || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let m = 6;
            let mut ok = true;
            for _ in 0..1000 {
                let raw: Vec<f64> = (0..m).map(|_| rng.gen::<f64>().powi(3)).collect();
                let s: f64 = raw.iter().sum();
                let w = Tensor::new(vec![1, m], raw.iter().map(|v| v / s).collect())?;
                let kl = kl_uniform(&w)?;
                ok &= (-1e-12..=(m as f64).ln() + 1e-12).contains(&kl);
            }
            Ok((ok, format!("1000 rows, M = {m}")))
        }),
        check("adamw_first_step", || {
            let mut p = vec![Tensor::<f64>::new(vec![1], vec![0.0])?];
            let mut st = OptimState::new(&p, 0.0);
            adamw_step(&mut p, &[Tensor::new(vec![1], vec![1.0])?], &mut st, 1e-3)?;
            let v: f64 = p[0].data()[0];
            Ok(((v + 9.99999990e-4).abs() < 1e-15, format!("update {v:.10e}")))
        }),
        check("metric_examples", || {
            let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0])?;
            let ok = relative_l2(&t, &t)? == 0.0
                && relative_l2(&t.map(|v| 2.0 * v), &t)? == 1.0
                && r_squared(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0])? == 0.5;
            Ok((ok, "relative L2 and R^2".into()))
        }),
    ]
}
