//! Training loop and evaluation protocol.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{NoiseMode, NoiseSource};
use crate::autograd::{Graph, Var};
use crate::dataio::{normalize, MeshSample, NormStats, NormalizedSample, FLOW_DIR};
use crate::error::{Error, Result};
use crate::metrics::{aero_coefficient, kl_uniform, r_squared, relative_l2_per_field, FlowConditions};
use crate::model::{collect_slice_weights, init_params, model_forward, predict, ModelConfig, ModelParams};
use crate::optim::{adamw_step_model, OptimState, Schedule};
use crate::parallel::{partition_points, Collective, Execution};
use crate::tensor::Tensor;

/// A set of output channels whose relative L2 forms one loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossGroup {
    pub name: String,
    pub channels: Vec<usize>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
    /// Samples whose gradients are accumulated per optimizer step.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Loss terms; empty means a single group over every output channel.
    #[serde(default)]
    pub loss_groups: Vec<LossGroup>,
    #[serde(default)]
    pub seed: u64,
    /// Simulated ranks for the forward pass; 1 runs serially.
    #[serde(default = "default_ranks")]
    pub ranks: usize,
    /// Write wall-clock seconds to the log; off gives byte-stable logs.
    #[serde(default = "default_true")]
    pub record_time: bool,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_batch() -> usize {
    1
}
fn default_ranks() -> usize {
    1
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            schedule: Schedule::Cosine,
            batch_size: 1,
            loss_groups: Vec::new(),
            seed: 0,
            ranks: 1,
            record_time: true,
        }
    }

    pub fn validate(&self, d_out: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.ranks == 0 {
            return Err(Error::Config("batch_size and ranks must be >= 1".into()));
        }
        for g in &self.loss_groups {
            if g.channels.is_empty() || g.channels.iter().any(|&c| c >= d_out) {
                return Err(Error::Config(format!("loss group {:?} has channels outside 0..{d_out}", g.name)));
            }
            if !(g.weight >= 0.0) {
                return Err(Error::Config(format!("loss group {:?} has a negative weight", g.name)));
            }
        }
        Ok(())
    }

    fn groups(&self, d_out: usize) -> Vec<LossGroup> {
        if self.loss_groups.is_empty() {
            vec![LossGroup { name: "field".into(), channels: (0..d_out).collect(), weight: 1.0 }]
        } else {
            self.loss_groups.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch's forward passes.
    pub loss: f64,
    /// Learning rate of the epoch's first optimizer step.
    pub lr: f64,
    pub seconds: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss,lr,seconds";

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for e in log {
        s.push_str(&format!("{},{:.12e},{:.12e},{:.3}\n", e.epoch, e.loss, e.lr, e.seconds));
    }
    s
}

pub struct TrainOutcome {
    pub params: ModelParams<Tensor<f64>>,
    pub log: Vec<EpochLog>,
    pub stats: NormStats,
}

/// Weighted sum over loss groups of `|pred_g - truth_g| / |truth_g|`.
fn loss_terms(g: &mut Graph<f64>, pred: Var, truth: Var, groups: &[LossGroup]) -> Result<Var> {
    let mut terms = Vec::with_capacity(groups.len());
    for grp in groups {
        let pick = |g: &mut Graph<f64>, v: Var| -> Result<Var> {
            let cols =
                grp.channels.iter().map(|&c| g.slice_cols(v, c, c + 1)).collect::<Result<Vec<_>>>()?;
            if cols.len() == 1 {
                Ok(cols[0])
            } else {
                g.concat_cols(&cols)
            }
        };
        let p = pick(g, pred)?;
        let t = pick(g, truth)?;
        let t_norm = g.value(t).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if t_norm == 0.0 {
            return Err(Error::Domain(format!("loss group {:?}: target has zero norm", grp.name)));
        }
        let diff = g.sub(p, t)?;
        let sq = g.mul(diff, diff)?;
        let ss = g.sum(sq)?;
        let norm = g.sqrt(ss)?;
        terms.push(g.scale(norm, grp.weight / t_norm)?);
    }
    g.sum_n(&terms)
}

/// Loss and canonical-order gradients for one sample.
pub fn sample_loss_and_grads(
    params: &ModelParams<Tensor<f64>>,
    config: &ModelConfig,
    sample: &NormalizedSample,
    groups: &[LossGroup],
    noise: &NoiseSource,
    ranks: usize,
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(sample.features.clone());
    let truth = g.constant(sample.targets.clone());
    let n = sample.features.rows();
    let part;
    let coll;
    let exec = if ranks > 1 {
        part = partition_points(n, ranks)?;
        coll = Collective::new(ranks);
        Execution::Parallel(&part, &coll)
    } else {
        Execution::Serial
    };
    let fwd = model_forward(&mut g, &bound, config, x, NoiseMode::TrainNoise, noise, &exec)?;
    let loss = loss_terms(&mut g, fwd.out, truth, groups)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        let where_ = g
            .first_non_finite()
            .map(|(i, op)| format!("node {i} ({op})"))
            .unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite(format!("loss is {value}; first non-finite tensor: {where_}")));
    }
    g.backward(loss)?;
    let mut vars = Vec::new();
    bound.visit(&mut |v: &Var| vars.push(*v));
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter tensor {i} is not finite")));
    }
    Ok((value, grads))
}

/// Trains from a fresh initialisation of `model`.
pub fn train(model: &ModelConfig, train_set: &[MeshSample], config: &TrainConfig) -> Result<TrainOutcome> {
    let params = init_params::<f64>(model)?;
    train_from(model, params, train_set, config)
}

/// Trains starting from `params`. Normalisation statistics are fitted on
/// `train_set`. Noise draws are keyed by `(seed, forward index)`, and the
/// sample order is reshuffled each epoch from `seed`, so a fixed config
/// reproduces the log exactly.
pub fn train_from(
    model: &ModelConfig,
    mut params: ModelParams<Tensor<f64>>,
    train_set: &[MeshSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    model.validate()?;
    config.validate(model.d_out)?;
    for s in train_set {
        if s.d_in() != model.d_in || s.d_out() != model.d_out {
            return Err(Error::Validation(format!(
                "sample has {} inputs / {} outputs, model expects {} / {}",
                s.d_in(),
                s.d_out(),
                model.d_in,
                model.d_out
            )));
        }
    }
    let stats = NormStats::fit(train_set)?;
    let data = normalize(&stats, train_set);
    let groups = config.groups(model.d_out);
    let mut state = OptimState::for_model(&params, config.weight_decay);
    let steps_per_epoch = data.len().div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut forward_index = 0u64;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut first_lr = None;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Vec<Tensor<f64>>> = None;
            for &i in batch {
                let noise = NoiseSource::new(config.seed).at_step(forward_index);
                forward_index += 1;
                let (loss, grads) = sample_loss_and_grads(&params, model, &data[i], &groups, &noise, config.ranks)
                    .map_err(|e| match e {
                        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, sample {i}: {m}")),
                        other => other,
                    })?;
                loss_sum += loss;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
            let lr_t = config.schedule.lr(config.lr, state.t, total_steps);
            first_lr.get_or_insert(lr_t);
            adamw_step_model(&mut params, &grads, &mut state, lr_t)?;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: parameters became non-finite")));
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / data.len() as f64,
            lr: first_lr.unwrap_or(0.0),
            seconds: if config.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
        });
    }
    Ok(TrainOutcome { params, log, stats })
}

/// Drag along the flow direction, lift along `+z`.
pub const DRAG_DIR: [f64; 3] = FLOW_DIR;
pub const LIFT_DIR: [f64; 3] = [0.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub relative_l2: Vec<f64>,
    pub c_d_pred: Option<f64>,
    pub c_d_true: Option<f64>,
    pub c_l_pred: Option<f64>,
    pub c_l_true: Option<f64>,
}

/// Evaluation report, serialised as JSON.
///
/// Keys: `relative_l2` (per output field, mean over samples),
/// `relative_l2_mean` (mean over fields), `samples` (per-sample values),
/// `c_d_pred_mean`, `c_d_true_mean`, `c_l_pred_mean`, `c_l_true_mean`,
/// `r2_drag`, `r2_lift` (absent without normals/areas or with fewer than
/// two samples or constant truth), `kl_per_layer` (mean over heads and
/// samples of the slice-weight KL from uniform; empty for stub
/// predictors).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub relative_l2: Vec<f64>,
    pub relative_l2_mean: f64,
    pub samples: Vec<SampleMetrics>,
    pub c_d_pred_mean: Option<f64>,
    pub c_d_true_mean: Option<f64>,
    pub c_l_pred_mean: Option<f64>,
    pub c_l_true_mean: Option<f64>,
    pub r2_drag: Option<f64>,
    pub r2_lift: Option<f64>,
    pub kl_per_layer: Vec<f64>,
}

/// Options for coefficient evaluation: which output channel is the
/// pressure, and the free-stream state. The reference area defaults to a
/// quarter of each sample's wetted area (the frontal disc of a sphere).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientOptions {
    #[serde(default)]
    pub pressure_channel: usize,
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default = "one")]
    pub v_inf: f64,
    #[serde(default)]
    pub ref_area: Option<f64>,
}

impl Default for CoefficientOptions {
    fn default() -> Self {
        Self { pressure_channel: 0, rho: 1.0, v_inf: 1.0, ref_area: None }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn r2_opt(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    match r_squared(pred, truth) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Domain(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Metrics for any predictor returning de-normalised `[N, d_out]` fields.
pub fn evaluate_with(
    test_set: &[MeshSample],
    coeff: &CoefficientOptions,
    mut predictor: impl FnMut(usize, &MeshSample) -> Result<Tensor<f64>>,
) -> Result<MetricsReport> {
    if test_set.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    let d_out = test_set[0].d_out();
    let mut samples = Vec::with_capacity(test_set.len());
    let (mut cdp, mut cdt, mut clp, mut clt) = (vec![], vec![], vec![], vec![]);
    for (i, s) in test_set.iter().enumerate() {
        if s.d_out() != d_out {
            return Err(Error::Validation("output widths differ across test samples".into()));
        }
        let pred = predictor(i, s)?;
        let rel = relative_l2_per_field(&pred, &s.targets)?;
        let mut m = SampleMetrics { index: i, relative_l2: rel, c_d_pred: None, c_d_true: None, c_l_pred: None, c_l_true: None };
        if let (Some(_), Some(areas)) = (&s.normals, &s.areas) {
            if coeff.pressure_channel >= d_out {
                return Err(Error::Config(format!("pressure_channel {} >= d_out {d_out}", coeff.pressure_channel)));
            }
            let flow = FlowConditions {
                rho: coeff.rho,
                v_inf: coeff.v_inf,
                ref_area: coeff.ref_area.unwrap_or_else(|| areas.data().iter().sum::<f64>() / 4.0),
            };
            let col = |t: &Tensor<f64>| (0..t.rows()).map(|r| t.at(r, coeff.pressure_channel)).collect::<Vec<_>>();
            let (pp, pt) = (col(&pred), col(&s.targets));
            let v = [
                aero_coefficient(s, &pp, None, DRAG_DIR, flow)?,
                aero_coefficient(s, &pt, None, DRAG_DIR, flow)?,
                aero_coefficient(s, &pp, None, LIFT_DIR, flow)?,
                aero_coefficient(s, &pt, None, LIFT_DIR, flow)?,
            ];
            cdp.push(v[0]);
            cdt.push(v[1]);
            clp.push(v[2]);
            clt.push(v[3]);
            (m.c_d_pred, m.c_d_true, m.c_l_pred, m.c_l_true) = (Some(v[0]), Some(v[1]), Some(v[2]), Some(v[3]));
        }
        samples.push(m);
    }
    let relative_l2: Vec<f64> =
        (0..d_out).map(|j| samples.iter().map(|m| m.relative_l2[j]).sum::<f64>() / samples.len() as f64).collect();
    let coeffs_complete = cdp.len() == test_set.len();
    Ok(MetricsReport {
        relative_l2_mean: relative_l2.iter().sum::<f64>() / d_out as f64,
        relative_l2,
        samples,
        c_d_pred_mean: mean(&cdp),
        c_d_true_mean: mean(&cdt),
        c_l_pred_mean: mean(&clp),
        c_l_true_mean: mean(&clt),
        r2_drag: if coeffs_complete { r2_opt(&cdp, &cdt)? } else { None },
        r2_lift: if coeffs_complete { r2_opt(&clp, &clt)? } else { None },
        kl_per_layer: Vec::new(),
    })
}

/// Noise-free evaluation of a trained model on raw samples, using the
/// training statistics for (de)normalisation.
pub fn evaluate(
    params: &ModelParams<Tensor<f64>>,
    model: &ModelConfig,
    stats: &NormStats,
    test_set: &[MeshSample],
    coeff: &CoefficientOptions,
) -> Result<MetricsReport> {
    let noise = NoiseSource::new(0);
    let mut kl_sums = vec![0.0; model.layers];
    let mut report = evaluate_with(test_set, coeff, |_, s| {
        if s.d_in() != model.d_in {
            return Err(Error::Validation(format!("sample has {} inputs, model expects {}", s.d_in(), model.d_in)));
        }
        let feats = stats.input.normalize(&s.features());
        let out = predict(params, model, &feats, NoiseMode::NoNoise, &noise)?;
        for (l, layer) in collect_slice_weights(params, model, &feats)?.iter().enumerate() {
            for w in layer {
                kl_sums[l] += kl_uniform(w)? / layer.len() as f64;
            }
        }
        Ok(stats.output.denormalize(&out))
    })?;
    report.kl_per_layer = kl_sums.iter().map(|s| s / test_set.len() as f64).collect();
    Ok(report)
}
