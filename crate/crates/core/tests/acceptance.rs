//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eidetic::attention::{
    rep_slice, AttentionParams, AttentionVariant, Linear, NoiseMode, NoiseSource, SliceConfig,
};
use eidetic::autograd::Graph;
use eidetic::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use eidetic::dataio::{decode_sample, encode_sample, gen_sphere_dataset, read_sample, write_sample, Ellipsoid, MeshSample};
use eidetic::diagnostics::{ablation_matrix, activation_accounting, AblationRow, ABLATION_VARIANTS};
use eidetic::gradcheck::model_gradient_check;
use eidetic::metrics::{aero_coefficient, r_squared, relative_l2, FlowConditions};
use eidetic::model::{collect_slice_weights, init_params, predict, ModelConfig};
use eidetic::parallel::{
    comm_volume_report, layer_comm_scalars, parallel_physics_attention, partition_points, serial_parallel_check,
    Collective, BYTES_PER_SCALAR,
};
use eidetic::tensor::Tensor;
use eidetic::train::{evaluate, train, CoefficientOptions, TrainConfig};
use eidetic::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn within(t: Duration, limit_s: f64) -> bool {
    t.as_secs_f64() < limit_s
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn serial_parallel() -> Result<Outcome> {
    let t = Instant::now();
    let cfg = ModelConfig::new(2, 4, 32, 8, 6, 1);
    let rows = serial_parallel_check(&cfg, 64, &[1, 2, 4, 8], NoiseMode::TrainNoise, true)?;
    let el = t.elapsed();
    let fwd = rows.iter().map(|r| r.forward_deviation).fold(0.0, f64::max);
    let grad = rows.iter().filter_map(|r| r.gradient_deviation).fold(0.0, f64::max);
    let ok = rows.iter().all(|r| r.pass && r.blocked_exact) && rows.len() == 4 && within(el, 10.0);
    outcome(ok, format!("ranks 1,2,4,8 forward {fwd:.1e} grads {grad:.1e} blocked exact, {:.2}s", el.as_secs_f64()))
}

fn comm_invariance() -> Result<Outcome> {
    let t = Instant::now();
    let slice = SliceConfig::new(8, 4, 32);
    let ranks = 4;
    let expect = ranks * 8 * (32 + 4) * 8;
    let rows = comm_volume_report(&slice, ranks, &[1_000, 10_000, 100_000, 1_000_000]);
    let formula_ok = rows.len() == 4 && rows.iter().all(|r| r.bytes_per_layer == expect);

    // One materialised layer at N = 1e5.
    let n = 100_000;
    let mut small = SliceConfig::new(4, 2, 8);
    small.noise_mode = NoiseMode::TrainNoise;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = AttentionParams::<Tensor<f64>>::init(&small, &mut rng);
    let x = random(&[n, 8], 4);
    let part = partition_points(n, ranks)?;
    let collective = Collective::new(ranks);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let parts: Vec<_> = part.ranges().iter().map(|r| g.constant(x.slice_rows(r.start, r.end).unwrap())).collect();
    parallel_physics_attention(&mut g, &parts, &small, &bound, &NoiseSource::new(1), 0, &part, &collective)?;
    let measured = collective.ledger().layer_bytes(0);
    let small_expect = layer_comm_scalars(&small, ranks) * BYTES_PER_SCALAR;
    let el = t.elapsed();
    let ok = formula_ok && measured == small_expect && small_expect == ranks * 4 * (8 + 2) * 8 && within(el, 5.0);
    outcome(
        ok,
        format!(
            "{expect} bytes/layer for N=1e3..1e6; materialised N=1e5 ledger {measured} bytes (expected {small_expect}), {:.2}s",
            el.as_secs_f64()
        ),
    )
}

fn gradients() -> Result<Outcome> {
    let t = Instant::now();
    let cfg = ModelConfig::new(2, 2, 8, 4, 6, 1);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for mode in [NoiseMode::NoNoise, NoiseMode::TrainNoise] {
        let r = model_gradient_check(&cfg, 6, mode)?;
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
    }
    let el = t.elapsed();
    let ok = worst < 1e-4 && checked == 2 * cfg.param_count() && within(el, 60.0);
    outcome(ok, format!("{checked} scalars, max relative error {worst:.2e}, {:.2}s", el.as_secs_f64()))
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
}

fn mechanism() -> Result<Outcome> {
    let rows = 10_000;
    let m = 8;
    let ids: Vec<usize> = (0..rows).collect();
    let logits = random(&[rows, m], 11);
    let noise = NoiseSource::new(5).at_step(2);
    let gumbel: Tensor<f64> = noise.gumbel(0, 0, &ids, m);

    let mut g = Graph::new();
    let ident = Linear { weight: g.constant(Tensor::identity(m)), bias: g.constant(Tensor::zeros(&[m])) };
    let x = g.constant(logits.clone());
    let gv = g.constant(gumbel.clone());

    // Row sums with noise at tau = 1.
    let one = g.constant(Tensor::full(&[rows, 1], 1.0));
    let w = rep_slice(&mut g, x, one, &ident, Some(gv))?;
    let mut row_err: f64 = 0.0;
    for i in 0..rows {
        row_err = row_err.max((g.value(w).row(i).iter().sum::<f64>() - 1.0).abs());
    }
    let model = ModelConfig::new(2, 4, 32, 8, 6, 1);
    let params = init_params::<f64>(&model)?;
    let feats = random(&[64, 6], 12);
    for layer in collect_slice_weights(&params, &model, &feats)? {
        for t in layer {
            for i in 0..t.rows() {
                row_err = row_err.max((t.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    // No noise: bit-identical to the temperature softmax.
    let tau = g.constant(random(&[rows, 1], 13).map(|v| 0.3 + 0.5 * v.abs()));
    let a = rep_slice(&mut g, x, tau, &ident, None)?;
    let lin = ident.apply(&mut g, x)?;
    let b = g.softmax_temp(lin, tau)?;
    let bit_exact = g.value(a) == g.value(b);

    // tau -> 0: argmax of the weights is the argmax of the perturbed logits.
    let tiny = g.constant(Tensor::full(&[rows, 1], 1e-3));
    let hard = rep_slice(&mut g, x, tiny, &ident, Some(gv))?;
    let agree = (0..rows)
        .filter(|&i| {
            let perturbed: Vec<f64> = logits.row(i).iter().zip(gumbel.row(i)).map(|(l, e)| l + e).collect();
            argmax(g.value(hard).row(i)) == argmax(&perturbed)
        })
        .count();

    // Permutation equivariance of the full model without noise.
    let mut equivariant = true;
    for (n, seed) in [(7usize, 21u64), (64, 22)] {
        let x = random(&[n, 6], seed);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let src = NoiseSource::new(0);
        let y = predict(&params, &model, &x, NoiseMode::NoNoise, &src)?;
        let yp = predict(&params, &model, &x.permute_rows(&perm)?, NoiseMode::NoNoise, &src)?;
        equivariant &= yp == y.permute_rows(&perm)?;
    }

    let ok = row_err <= 1e-12 && bit_exact && agree == rows && equivariant;
    outcome(
        ok,
        format!(
            "max |row sum - 1| {row_err:.1e}; no-noise bit-exact {bit_exact}; argmax agreement {agree}/{rows}; permutation equivariant {equivariant}"
        ),
    )
}

fn speedup_accounting() -> Result<Outcome> {
    let rows = activation_accounting(&ModelConfig::new(2, 4, 32, 8, 6, 1), 512)?;
    let two = rows[1].projection_scalars;
    let one = rows[2].projection_scalars;
    let ok = two == 2 * one && rows[0].projection_scalars == two && rows[3].projection_scalars == one;
    outcome(ok, format!("two projections {two} scalars, single projection {one} scalars (N=512)"))
}

fn unit_sphere(n: usize) -> MeshSample {
    let body = Ellipsoid { axes: [1.0; 3], rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };
    let (p, nr, a) = body.sample_surface(n);
    MeshSample {
        coords: Tensor::new(vec![n, 3], p.concat()).unwrap(),
        normals: Some(Tensor::new(vec![n, 3], nr.concat()).unwrap()),
        extra: None,
        targets: Tensor::zeros(&[n, 1]),
        areas: Some(Tensor::new(vec![n], a).unwrap()),
    }
}

fn sphere_lift(n: usize) -> Result<f64> {
    let s = unit_sphere(n);
    let normals = s.normals.as_ref().unwrap();
    let p: Vec<f64> = (0..n).map(|i| -normals.at(i, 2)).collect();
    aero_coefficient(&s, &p, None, [0.0, 0.0, 1.0], FlowConditions { rho: 1.0, v_inf: 1.0, ref_area: 1.0 })
}

fn metric_oracles() -> Result<Outcome> {
    let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0])?;
    let l2_ok = relative_l2(&t, &t)? == 0.0
        && relative_l2(&Tensor::zeros(&[3]), &t)? == 1.0
        && relative_l2(&t.map(|v| 2.0 * v), &t)? == 1.0
        && relative_l2(&t, &Tensor::zeros(&[3])).is_err();
    let y = [1.0, 2.0, 3.0];
    let r2_ok = r_squared(&y, &y)? == 1.0
        && r_squared(&[2.0; 3], &y)? == 0.0
        && r_squared(&[1.0, 2.0, 4.0], &y)? == 0.5
        && r_squared(&[1.0, 1.0], &[3.0, 3.0]).is_err();
    let coarse = sphere_lift(10_000)?;
    let dense = sphere_lift(100_000)?;
    let rel = ((coarse - dense) / dense).abs();
    let ok = l2_ok && r2_ok && rel < 0.01;
    outcome(
        ok,
        format!("relative L2 examples {l2_ok}, R^2 examples {r2_ok}; sphere coefficient {coarse:.6} vs dense {dense:.6} ({:.2e} relative)", rel),
    )
}

fn sphere_data() -> Result<(Vec<MeshSample>, Vec<MeshSample>)> {
    let mut all = gen_sphere_dataset(12, 512, 7)?;
    let test = all.split_off(8);
    Ok((all, test))
}

fn training_descent() -> Result<Outcome> {
    let (tr, te) = sphere_data()?;
    let model = ModelConfig::new(2, 4, 32, 8, 6, 1);
    let mut tc = TrainConfig::new(200);
    tc.seed = 1;
    tc.record_time = false;
    let t = Instant::now();
    let out = train(&model, &tr, &tc)?;
    let el = t.elapsed();
    let first = out.log[0].loss;
    let last = out.log.last().unwrap().loss;
    let report = evaluate(&out.params, &model, &out.stats, &te, &CoefficientOptions::default())?;
    let again = train(&model, &tr, &tc)?;
    let deterministic = again.log == out.log && again.params == out.params;
    let ok = last < 0.5 * first && report.relative_l2_mean < 0.25 && deterministic && within(el, 600.0);
    outcome(
        ok,
        format!(
            "loss {first:.4} -> {last:.4}, test relative L2 {:.4}, rerun identical {deterministic}, {:.1}s per run",
            report.relative_l2_mean,
            el.as_secs_f64()
        ),
    )
}

/// Reference experiment for the ablation: the training data of the
/// descent run, 100 epochs, averaged over seeds 1, 2 and 3.
fn ablation() -> Result<Outcome> {
    let (tr, te) = sphere_data()?;
    let base = ModelConfig::new(2, 4, 32, 8, 6, 1);
    let mut tc = TrainConfig::new(100);
    tc.record_time = false;
    let t = Instant::now();
    let rows: Vec<AblationRow> = ablation_matrix(&base, &tc, &tr, &te, &[1, 2, 3])?;
    let el = t.elapsed();
    let labels_ok = rows.len() == 4 && rows.iter().zip(ABLATION_VARIANTS).all(|(r, (l, _))| r.variant == l);
    let finite = rows
        .iter()
        .all(|r| [r.first_train_loss, r.final_train_loss, r.test_relative_l2, r.kl_mean].iter().all(|v| v.is_finite()));
    let (baseline, full) = (&rows[0], &rows[3]);
    let kl_ok = full.kl_mean >= baseline.kl_mean;
    let summary: Vec<String> =
        rows.iter().map(|r| format!("{}: KL {:.4} test L2 {:.4}", r.variant, r.kl_mean, r.test_relative_l2)).collect();
    outcome(labels_ok && finite && kl_ok, format!("{}; {:.0}s", summary.join("; "), el.as_secs_f64()))
}

fn sample_with(pattern: u8, seed: u64) -> MeshSample {
    let n = 13;
    let mut s = gen_sphere_dataset(1, n, seed).unwrap().remove(0);
    if pattern & 1 == 0 {
        s.normals = None;
    }
    if pattern & 2 != 0 {
        s.extra = Some(random(&[n, 2], seed + 100));
    }
    if pattern & 4 == 0 {
        s.areas = None;
    }
    s
}

fn round_trips() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut samples_ok = 0;
    for pattern in 0..8u8 {
        let s = sample_with(pattern, pattern as u64);
        let path = dir.path().join(format!("s{pattern}.tpp1"));
        write_sample(&path, &s)?;
        if decode_sample(&encode_sample(&s)?)? == s && read_sample(&path)? == s {
            samples_ok += 1;
        }
    }
    let mut ckpt_ok = 0;
    for bits in 0..8u8 {
        let mut cfg = ModelConfig::new(2, 2, 8, 4, 6, 2);
        cfg.variant = AttentionVariant { ada_temp: bits & 1 != 0, reparam: bits & 2 != 0, f_projection: bits & 4 != 0 };
        cfg.seed = bits as u64 + 40;
        let p = init_params::<f64>(&cfg)?;
        let path = dir.path().join(format!("c{bits}.tppc"));
        save_checkpoint(&path, &cfg, &p)?;
        let (c1, p1) = decode_checkpoint(&encode_checkpoint(&cfg, &p)?)?;
        let (c2, p2) = load_checkpoint(&path)?;
        let bits_equal = p1.tensors().iter().zip(p.tensors()).all(|(a, b)| {
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if c1 == cfg && p1 == p && c2 == cfg && p2 == p && bits_equal {
            ckpt_ok += 1;
        }
    }
    outcome(samples_ok == 8 && ckpt_ok == 8, format!("TPP1 {samples_ok}/8 presence patterns, TPPC {ckpt_ok}/8 variants"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 9] = [
        ("serial/parallel equivalence", serial_parallel),
        ("communication invariance", comm_invariance),
        ("gradient correctness", gradients),
        ("eidetic-state invariants", mechanism),
        ("speedup accounting", speedup_accounting),
        ("metric oracles", metric_oracles),
        ("desk-scale training descent", training_descent),
        ("ablation and KL direction", ablation),
        ("format round-trips", round_trips),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} criterion {}: {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
