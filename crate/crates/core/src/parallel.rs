//! Simulated multi-rank execution of Physics-Attention.
//!
//! Points are split into contiguous shards, one per rank. Everything
//! pointwise runs on the shard; the only cross-rank traffic per attention
//! layer is two AllReduce calls:
//!
//! * `norms`: per-slice weight totals, `H x M` scalars per rank;
//! * `states`: per-slice state contributions, `M x C` scalars per rank.
//!
//! Ranks live in one process and share one [`Graph`], so the backward pass
//! through an AllReduce is the identity onto every contribution and needs
//! no extra bookkeeping.

use std::ops::Range;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    deslice, head_weights, normalize_states, project, slice_norms, state_attention, weighted_sums, AttentionOutput,
    AttentionParams, NoiseMode, NoiseSource, SliceConfig,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{init_params, model_forward, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bytes per transferred scalar (64-bit floats).
pub const BYTES_PER_SCALAR: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankPartition {
    n: usize,
    ranges: Vec<Range<usize>>,
}

impl RankPartition {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank_count(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }
}

/// Contiguous near-equal split; the first `n % ranks` ranks get one extra point.
pub fn partition_points(n: usize, rank_count: usize) -> Result<RankPartition> {
    if rank_count == 0 {
        return Err(Error::Partition("rank count must be >= 1".into()));
    }
    if n < rank_count {
        return Err(Error::Partition(format!("{n} points cannot be split over {rank_count} ranks")));
    }
    let (base, extra) = (n / rank_count, n % rank_count);
    let mut start = 0;
    let ranges = (0..rank_count)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect();
    Ok(RankPartition { n, ranges })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallTag {
    States,
    Norms,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub layer: usize,
    pub tag: CallTag,
    /// Scalars sent, summed over ranks.
    pub scalars: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub records: Vec<CommRecord>,
}

impl CommLedger {
    pub fn layer_scalars(&self, layer: usize) -> usize {
        self.records.iter().filter(|r| r.layer == layer).map(|r| r.scalars).sum()
    }

    pub fn layer_bytes(&self, layer: usize) -> usize {
        self.records.iter().filter(|r| r.layer == layer).map(|r| r.bytes).sum()
    }

    pub fn calls(&self, layer: usize, tag: CallTag) -> Vec<&CommRecord> {
        self.records.iter().filter(|r| r.layer == layer && r.tag == tag).collect()
    }
}

/// Deterministic AllReduce: contributions are summed in ascending rank
/// order, left fold, and every call is recorded in the ledger.
#[derive(Debug)]
pub struct Collective {
    rank_count: usize,
    ledger: Mutex<CommLedger>,
}

impl Collective {
    pub fn new(rank_count: usize) -> Self {
        Self { rank_count, ledger: Mutex::new(CommLedger::default()) }
    }

    pub fn rank_count(&self) -> usize {
        self.rank_count
    }

    pub fn ledger(&self) -> CommLedger {
        self.ledger.lock().expect("ledger poisoned").clone()
    }

    fn record(&self, layer: usize, tag: CallTag, per_rank: usize) {
        let scalars = per_rank * self.rank_count;
        self.ledger
            .lock()
            .expect("ledger poisoned")
            .records
            .push(CommRecord { layer, tag, scalars, bytes: scalars * BYTES_PER_SCALAR });
    }

    fn check_contributions(&self, shapes: &[&[usize]]) -> Result<()> {
        if shapes.len() != self.rank_count {
            return Err(Error::Collective(format!(
                "expected {} contributions, got {}",
                self.rank_count,
                shapes.len()
            )));
        }
        if let Some(bad) = shapes.iter().find(|s| **s != shapes[0]) {
            return Err(Error::Collective(format!("rank shapes diverge: {:?} vs {:?}", shapes[0], bad)));
        }
        Ok(())
    }

    /// AllReduce-sum on plain tensors; returns one replica per rank.
    pub fn all_reduce_sum<T: Scalar>(&self, per_rank: &[Tensor<T>], layer: usize, tag: CallTag) -> Result<Vec<Tensor<T>>> {
        self.check_contributions(&per_rank.iter().map(|t| t.shape()).collect::<Vec<_>>())?;
        let mut acc = per_rank[0].clone();
        for t in &per_rank[1..] {
            for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        self.record(layer, tag, acc.numel());
        Ok(vec![acc; self.rank_count])
    }

    /// AllReduce-sum recorded on a graph. The returned node is the
    /// replicated result every rank reads.
    pub fn all_reduce_var<T: Scalar>(&self, g: &mut Graph<T>, per_rank: &[Var], layer: usize, tag: CallTag) -> Result<Var> {
        self.check_contributions(&per_rank.iter().map(|&v| g.shape(v)).collect::<Vec<_>>())?;
        let out = g.sum_n(per_rank)?;
        self.record(layer, tag, g.value(out).numel());
        Ok(out)
    }
}

/// How a forward pass distributes its points.
pub enum Execution<'a> {
    /// One context, plain reductions over all points.
    Serial,
    /// One context, but slice sums are formed per block of the partition
    /// and folded in rank order: the arithmetic of [`Execution::Parallel`]
    /// without the collective.
    RankBlocked(&'a RankPartition),
    Parallel(&'a RankPartition, &'a Collective),
}

pub struct ParallelAttentionOutput {
    /// Per-rank `[N_k, C]` outputs.
    pub outs: Vec<Var>,
    /// Slice weights, `[rank][head]`, each `[N_k, M]`.
    pub weights: Vec<Vec<Var>>,
    pub projection_scalars: usize,
}

/// Physics-Attention over sharded points with two AllReduce calls.
#[allow(clippy::too_many_arguments)]
pub fn parallel_physics_attention<T: Scalar>(
    g: &mut Graph<T>,
    x_parts: &[Var],
    config: &SliceConfig,
    params: &AttentionParams<Var>,
    noise: &NoiseSource,
    layer: usize,
    partition: &RankPartition,
    collective: &Collective,
) -> Result<ParallelAttentionOutput> {
    config.validate()?;
    if x_parts.len() != partition.rank_count() || collective.rank_count() != partition.rank_count() {
        return Err(Error::Collective(format!(
            "{} shards for a {}-rank partition and a {}-rank collective",
            x_parts.len(),
            partition.rank_count(),
            collective.rank_count()
        )));
    }
    let (ch, heads) = (config.head_dim(), config.heads);

    struct RankState {
        weights: Vec<Var>,
        sums: Vec<Var>,
    }
    let mut ranks = Vec::with_capacity(x_parts.len());
    let mut norm_parts = Vec::with_capacity(x_parts.len());
    let mut projection_scalars = 0;
    for (k, (&x, range)) in x_parts.iter().zip(partition.ranges()).enumerate() {
        let rows = g.shape(x)[0];
        if rows != range.len() {
            return Err(Error::Partition(format!("rank {k} holds {rows} rows, partition says {}", range.len())));
        }
        let ids: Vec<usize> = range.clone().collect();
        let proj = project(g, x, params)?;
        projection_scalars += proj.scalars;
        let mut weights = Vec::with_capacity(heads);
        let mut sums = Vec::with_capacity(heads);
        let mut norms = Vec::with_capacity(heads);
        for (h, head) in params.heads.iter().enumerate() {
            let xh = g.slice_cols(proj.x, h * ch, (h + 1) * ch)?;
            let vh = if proj.values == proj.x { xh } else { g.slice_cols(proj.values, h * ch, (h + 1) * ch)? };
            let w = head_weights(g, xh, head, config, noise, layer, h, &ids)?;
            norms.push(slice_norms(g, w)?);
            sums.push(weighted_sums(g, w, vh)?);
            weights.push(w);
        }
        norm_parts.push(g.concat_cols(&norms)?);
        ranks.push(RankState { weights, sums });
    }

    let m = config.slices;
    let norms = collective.all_reduce_var(g, &norm_parts, layer, CallTag::Norms)?;

    let mut state_parts = Vec::with_capacity(ranks.len());
    for rank in &ranks {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let norm_h = g.slice_cols(norms, h * m, (h + 1) * m)?;
            per_head.push(normalize_states(g, rank.sums[h], norm_h, config.eps_denom)?);
        }
        state_parts.push(g.concat_cols(&per_head)?);
    }
    let states = collective.all_reduce_var(g, &state_parts, layer, CallTag::States)?;

    let mut outs = Vec::with_capacity(ranks.len());
    for rank in &ranks {
        let mut per_head = Vec::with_capacity(heads);
        for (h, head) in params.heads.iter().enumerate() {
            let s = g.slice_cols(states, h * ch, (h + 1) * ch)?;
            let s_prime = state_attention(g, s, head)?;
            per_head.push(deslice(g, s_prime, rank.weights[h])?);
        }
        let merged = g.concat_cols(&per_head)?;
        outs.push(params.out_proj.apply(g, merged)?);
    }
    Ok(ParallelAttentionOutput {
        outs,
        weights: ranks.into_iter().map(|r| r.weights).collect(),
        projection_scalars,
    })
}

/// Single-context reference reproducing the parallel summation order:
/// slice sums are formed per partition block and folded in rank order.
pub fn blocked_physics_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    config: &SliceConfig,
    params: &AttentionParams<Var>,
    noise: &NoiseSource,
    layer: usize,
    partition: &RankPartition,
) -> Result<AttentionOutput> {
    config.validate()?;
    let n = g.shape(x)[0];
    if partition.n() != n {
        return Err(Error::Partition(format!("partition covers {} points, input has {n}", partition.n())));
    }
    let ch = config.head_dim();
    let ids: Vec<usize> = (0..n).collect();
    let proj = project(g, x, params)?;
    let mut outs = Vec::with_capacity(config.heads);
    let mut weights = Vec::with_capacity(config.heads);
    for (h, head) in params.heads.iter().enumerate() {
        let xh = g.slice_cols(proj.x, h * ch, (h + 1) * ch)?;
        let vh = if proj.values == proj.x { xh } else { g.slice_cols(proj.values, h * ch, (h + 1) * ch)? };
        let w = head_weights(g, xh, head, config, noise, layer, h, &ids)?;
        let mut block_w = Vec::new();
        let mut block_v = Vec::new();
        let mut block_norms = Vec::new();
        for r in partition.ranges() {
            let wk = g.slice_rows(w, r.start, r.end)?;
            let vk = g.slice_rows(vh, r.start, r.end)?;
            block_norms.push(slice_norms(g, wk)?);
            block_w.push(wk);
            block_v.push(vk);
        }
        let norms = g.sum_n(&block_norms)?;
        let mut partial = Vec::with_capacity(block_w.len());
        for (&wk, &vk) in block_w.iter().zip(&block_v) {
            let sums = weighted_sums(g, wk, vk)?;
            partial.push(normalize_states(g, sums, norms, config.eps_denom)?);
        }
        let s = g.sum_n(&partial)?;
        let s_prime = state_attention(g, s, head)?;
        outs.push(deslice(g, s_prime, w)?);
        weights.push(w);
    }
    let merged = g.concat_cols(&outs)?;
    let out = params.out_proj.apply(g, merged)?;
    Ok(AttentionOutput { out, weights, projection_scalars: proj.scalars })
}

/// Scalars moved per Physics-Attention layer: `ranks * M * (C + H)`.
pub fn layer_comm_scalars(config: &SliceConfig, rank_count: usize) -> usize {
    rank_count * config.slices * (config.channels + config.heads)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRow {
    pub n_points: usize,
    pub rank_count: usize,
    pub slices: usize,
    pub channels: usize,
    pub heads: usize,
    pub scalars_per_layer: usize,
    pub bytes_per_layer: usize,
}

pub const COMM_CSV_HEADER: &str = "n_points,rank_count,M,C,H,scalars_per_layer,bytes_per_layer";

/// Per-layer communication volume for each requested point count.
pub fn comm_volume_report(config: &SliceConfig, rank_count: usize, n_points: &[usize]) -> Vec<CommRow> {
    let scalars = layer_comm_scalars(config, rank_count);
    n_points
        .iter()
        .map(|&n| CommRow {
            n_points: n,
            rank_count,
            slices: config.slices,
            channels: config.channels,
            heads: config.heads,
            scalars_per_layer: scalars,
            bytes_per_layer: scalars * BYTES_PER_SCALAR,
        })
        .collect()
}

pub fn comm_rows_to_csv(rows: &[CommRow]) -> String {
    let mut s = String::from(COMM_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.n_points, r.rank_count, r.slices, r.channels, r.heads, r.scalars_per_layer, r.bytes_per_layer
        ));
    }
    s
}

/// Scale-relative deviation `max|a - b| / max|b|`.
pub fn relative_deviation<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let scale = b.max_abs().as_f64();
    let diff = a.max_abs_diff(b).as_f64();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub const FORWARD_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParallelCheckRow {
    pub rank_count: usize,
    pub forward_deviation: f64,
    pub gradient_deviation: Option<f64>,
    /// Parallel output and gradients equal the rank-blocked reference bit for bit.
    pub blocked_exact: bool,
    /// Ledger bytes of every layer equal the closed form.
    pub ledger_ok: bool,
    pub pass: bool,
}

/// One forward (and optionally backward) pass with a loss `sum(out * probe)`.
struct Pass {
    out: Tensor<f64>,
    grads: Option<Vec<Tensor<f64>>>,
}

fn run_pass(
    config: &ModelConfig,
    params: &crate::model::ModelParams<Tensor<f64>>,
    features: &Tensor<f64>,
    probe: &Tensor<f64>,
    mode: NoiseMode,
    noise: &NoiseSource,
    exec: &Execution<'_>,
    with_grads: bool,
) -> Result<Pass> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(features.clone());
    let fwd = model_forward(&mut g, &bound, config, x, mode, noise, exec)?;
    let out = g.value(fwd.out).clone();
    let grads = if with_grads {
        let p = g.constant(probe.clone());
        let prod = g.mul(fwd.out, p)?;
        let loss = g.sum(prod)?;
        g.backward(loss)?;
        let mut grads = Vec::new();
        bound.visit(&mut |&v| grads.push(g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)))));
        Some(grads)
    } else {
        None
    };
    Ok(Pass { out, grads })
}

/// Largest per-tensor deviation. Each tensor is scaled by its own largest
/// magnitude, floored at `1e-6` of the largest magnitude over all tensors:
/// some gradients vanish identically (a key bias under a row softmax) and
/// carry only rounding noise.
pub fn gradient_deviation(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let global = b.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let floor = 1e-6 * global;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = y.max_abs().max(floor);
            let diff = x.max_abs_diff(y);
            if scale == 0.0 {
                diff
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Compares serial and simulated-parallel execution of a randomly
/// initialised model on random inputs, for each rank count.
pub fn serial_parallel_check(
    config: &ModelConfig,
    n: usize,
    rank_counts: &[usize],
    mode: NoiseMode,
    with_grads: bool,
) -> Result<Vec<ParallelCheckRow>> {
    let params = init_params::<f64>(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let features = Tensor::from_fn(&[n, config.d_in], |_| rng.gen_range(-1.0..1.0));
    let probe = Tensor::from_fn(&[n, config.d_out], |_| rng.gen_range(-1.0..1.0));
    let noise = NoiseSource::new(config.seed).at_step(1);
    let serial = run_pass(config, &params, &features, &probe, mode, &noise, &Execution::Serial, with_grads)?;
    let slice = config.slice_config(mode);

    let mut rows = Vec::with_capacity(rank_counts.len());
    for &ranks in rank_counts {
        let part = partition_points(n, ranks)?;
        let collective = Collective::new(ranks);
        let par = run_pass(config, &params, &features, &probe, mode, &noise, &Execution::Parallel(&part, &collective), with_grads)?;
        let blocked = run_pass(config, &params, &features, &probe, mode, &noise, &Execution::RankBlocked(&part), with_grads)?;

        let forward_deviation = relative_deviation(&par.out, &serial.out);
        let gradient_deviation = match (&par.grads, &serial.grads) {
            (Some(a), Some(b)) => Some(gradient_deviation(a, b)),
            _ => None,
        };
        let blocked_exact = par.out == blocked.out
            && match (&par.grads, &blocked.grads) {
                (Some(a), Some(b)) => self::gradient_deviation(a, b) <= GRADIENT_TOL,
                _ => true,
            };
        let ledger = collective.ledger();
        let expect = layer_comm_scalars(&slice, ranks) * BYTES_PER_SCALAR;
        let ledger_ok = (0..config.layers).all(|l| ledger.layer_bytes(l) == expect && ledger.records.iter().filter(|r| r.layer == l).count() == 2);
        let pass = forward_deviation <= FORWARD_TOL
            && gradient_deviation.is_none_or(|d| d <= GRADIENT_TOL)
            && blocked_exact
            && ledger_ok;
        rows.push(ParallelCheckRow { rank_count: ranks, forward_deviation, gradient_deviation, blocked_exact, ledger_ok, pass });
    }
    Ok(rows)
}
