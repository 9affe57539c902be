use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eidetic::autograd::{Graph, Var};
use eidetic::gradcheck::{compare, numeric_gradients, FD_STEP};
use eidetic::tensor::Tensor;
use eidetic::Result;

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Loss `sum(f(inputs) * probe)`; returns the loss and input gradients.
fn eval(build: Build, inputs: &[Tensor<f64>], probe: &Tensor<f64>) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let p = g.constant(probe.clone());
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    let value = g.value(loss).data()[0];
    g.backward(loss).unwrap();
    let grads = vars.iter().map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)))).collect();
    (value, grads)
}

fn output_shape(build: Build, inputs: &[Tensor<f64>]) -> Vec<usize> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    g.shape(out).to_vec()
}

fn check(name: &str, build: Build, inputs: Vec<Tensor<f64>>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = uniform(&output_shape(build, &inputs), -1.0, 1.0, &mut rng);
    let (_, analytic) = eval(build, &inputs, &probe);
    let numeric = numeric_gradients(&inputs, FD_STEP, |ps| eval(build, ps, &probe).0);
    let report = compare(&analytic, &numeric);
    assert!(report.max_rel_err < 1e-4, "{name}: {report:?}");
}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = &mut rng;
    let a34 = uniform(&[3, 4], -1.0, 1.0, r);
    let b34 = uniform(&[3, 4], -1.0, 1.0, r);
    let b45 = uniform(&[4, 5], -1.0, 1.0, r);
    let row4 = uniform(&[4], -1.0, 1.0, r);
    let col3 = uniform(&[3, 1], -1.0, 1.0, r);
    let pos34 = uniform(&[3, 4], 0.5, 2.0, r);
    let tau = uniform(&[3, 1], 0.3, 1.5, r);

    let cases: Vec<(&str, Build, Vec<Tensor<f64>>)> = vec![
        ("matmul", |g, v| g.matmul(v[0], v[1]), vec![a34.clone(), b45.clone()]),
        ("add", |g, v| g.add(v[0], v[1]), vec![a34.clone(), b34.clone()]),
        ("add row broadcast", |g, v| g.add(v[0], v[1]), vec![a34.clone(), row4.clone()]),
        ("sub column broadcast", |g, v| g.sub(v[0], v[1]), vec![a34.clone(), col3.clone()]),
        ("mul", |g, v| g.mul(v[0], v[1]), vec![a34.clone(), b34.clone()]),
        ("mul column broadcast", |g, v| g.mul(v[0], v[1]), vec![a34.clone(), col3.clone()]),
        ("div", |g, v| g.div(v[0], v[1]), vec![a34.clone(), pos34.clone()]),
        ("div column broadcast", |g, v| g.div(v[0], v[1]), vec![a34.clone(), tau.clone()]),
        ("scale", |g, v| g.scale(v[0], -1.7), vec![a34.clone()]),
        ("add_scalar", |g, v| g.add_scalar(v[0], 0.3), vec![a34.clone()]),
        ("gelu", |g, v| g.gelu(v[0]), vec![a34.clone()]),
        ("sqrt", |g, v| g.sqrt(v[0]), vec![pos34.clone()]),
        ("transpose", |g, v| g.transpose(v[0]), vec![a34.clone()]),
        ("sum", |g, v| g.sum(v[0]), vec![a34.clone()]),
        ("mean", |g, v| g.mean(v[0]), vec![a34.clone()]),
        ("sum_rows", |g, v| g.sum_rows(v[0]), vec![a34.clone()]),
        ("slice_cols", |g, v| g.slice_cols(v[0], 1, 3), vec![a34.clone()]),
        ("slice_rows", |g, v| g.slice_rows(v[0], 1, 3), vec![a34.clone()]),
        ("concat_cols", |g, v| g.concat_cols(&[v[0], v[1]]), vec![a34.clone(), col3.clone()]),
        ("concat_rows", |g, v| g.concat_rows(&[v[0], v[1]]), vec![a34.clone(), b34.clone()]),
        ("permute_rows", |g, v| g.permute_rows(v[0], &[2, 0, 1]), vec![a34.clone()]),
        ("linear", |g, v| g.linear(v[0], v[1], v[2]), vec![a34.clone(), b45.clone(), uniform(&[5], -1.0, 1.0, r)]),
        (
            "layer_norm",
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            vec![a34.clone(), uniform(&[4], 0.5, 1.5, r), row4.clone()],
        ),
        ("softmax", |g, v| g.softmax(v[0]), vec![a34.clone()]),
        ("softmax_temp", |g, v| g.softmax_temp(v[0], v[1]), vec![a34.clone(), tau.clone()]),
        ("clamp_min away from the kink", |g, v| g.clamp_min(v[0], 0.0), vec![pos34.clone()]),
        ("sum_n", |g, v| g.sum_n(&[v[0], v[1], v[0]]), vec![a34.clone(), b34.clone()]),
    ];
    for (i, (name, build, inputs)) in cases.into_iter().enumerate() {
        check(name, build, inputs, 100 + i as u64);
    }
}

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_temp_rows_sum_to_one(
        logits in prop::collection::vec(-50.0f64..50.0, 6 * 7),
        tau in prop::collection::vec(0.01f64..5.0, 6),
    ) {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![6, 7], logits).unwrap());
        let t = g.constant(Tensor::new(vec![6, 1], tau).unwrap());
        let w = g.softmax_temp(l, t).unwrap();
        for i in 0..6 {
            let s: f64 = g.value(w).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    /// Backward through `gelu(a @ b)` equals the hand composition of the
    /// two per-op backwards.
    #[test]
    fn two_op_chain_matches_composed_backwards(a in small_matrix(3, 4), b in small_matrix(4, 2)) {
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let bv = g.param(b.clone());
        let z = g.matmul(av, bv).unwrap();
        let y = g.gelu(z).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();

        let zval = a.matmul(&b).unwrap();
        let dgelu = |x: f64| {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let u = c * (x + 0.044715 * x.powi(3));
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
        };
        let dz = zval.map(dgelu);
        let da = dz.matmul(&b.transpose().unwrap()).unwrap();
        let db = a.transpose().unwrap().matmul(&dz).unwrap();
        prop_assert!(g.grad(av).unwrap().max_abs_diff(&da) <= 1e-12);
        prop_assert!(g.grad(bv).unwrap().max_abs_diff(&db) <= 1e-12);
    }
}
