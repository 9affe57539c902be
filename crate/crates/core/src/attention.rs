//! Physics-Attention with eidetic states.
//!
//! Per head, points are softly assigned to `M` slices, each slice is
//! aggregated into a state token, the `M` states attend to each other, and
//! the updated states are scattered back to points with the same weights:
//!
//! ```text
//! x --proj--> xh --ada_temp--> tau
//!              \--rep_slice(tau, noise)--> w [N x M]
//!              w, xh --compute_eidetic_states--> s [M x Ch]
//!              s --state_attention--> s' --deslice(w)--> x'
//! ```
//!
//! The single input projection feeds both the slice logits and the state
//! values. The two-projection layout (a second `f` projection carrying the
//! state values) is kept only as an ablation variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower/upper clamp applied to uniform noise before the double log.
pub const NOISE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    TrainNoise,
    NoNoise,
}

/// Which slice-weight mechanisms are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionVariant {
    /// Per-point learned temperature; otherwise the fixed `tau0`.
    pub ada_temp: bool,
    /// Gumbel reparameterised slice weights (training mode only).
    pub reparam: bool,
    /// Separate `f` projection for state values.
    pub f_projection: bool,
}

impl AttentionVariant {
    pub const EIDETIC: Self = Self { ada_temp: true, reparam: true, f_projection: false };
    pub const BASELINE: Self = Self { ada_temp: false, reparam: false, f_projection: true };
    pub const ADA_TEMP: Self = Self { ada_temp: true, reparam: false, f_projection: true };
    pub const ADA_TEMP_SPEEDUP: Self = Self { ada_temp: true, reparam: false, f_projection: false };
}

impl Default for AttentionVariant {
    fn default() -> Self {
        Self::EIDETIC
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    pub slices: usize,
    pub heads: usize,
    pub channels: usize,
    pub tau0: f64,
    pub tau_min: f64,
    pub eps_denom: f64,
    pub noise_mode: NoiseMode,
    #[serde(default)]
    pub variant: AttentionVariant,
}

impl SliceConfig {
    pub fn new(slices: usize, heads: usize, channels: usize) -> Self {
        Self {
            slices,
            heads,
            channels,
            tau0: 0.5,
            tau_min: 0.1,
            eps_denom: 1e-8,
            noise_mode: NoiseMode::NoNoise,
            variant: AttentionVariant::EIDETIC,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 || self.heads == 0 || self.channels == 0 {
            return Err(Error::Config("slices, heads and channels must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            )));
        }
        if !(self.tau0 > 0.0) || !(self.tau_min > 0.0) || !(self.eps_denom > 0.0) {
            return Err(Error::Config("tau0, tau_min and eps_denom must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Gumbel noise is drawn only when both the mode and the variant ask for it.
    pub fn noisy(&self) -> bool {
        self.noise_mode == NoiseMode::TrainNoise && self.variant.reparam
    }
}

/// Counter-based uniform noise keyed by `(seed, step, layer, head, point, slice)`.
///
/// The draw for a point depends only on its global id, never on which
/// rank holds it or in what order points are visited.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSource {
    seed: u64,
    step: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, step: 0 }
    }

    pub fn at_step(self, step: u64) -> Self {
        Self { step, ..self }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn rng(&self, layer: usize, head: usize, point: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.step.to_le_bytes());
        key[16..20].copy_from_slice(&(layer as u32).to_le_bytes());
        key[20..24].copy_from_slice(&(head as u32).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(point as u64);
        rng
    }

    /// Uniform samples in `[1e-12, 1 - 1e-12]`, `ids.len() x slices`, row-major.
    pub fn uniforms(&self, layer: usize, head: usize, ids: &[usize], slices: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(ids.len() * slices);
        for &id in ids {
            let mut rng = self.rng(layer, head, id);
            for _ in 0..slices {
                let u: f64 = rng.gen();
                out.push(u.clamp(NOISE_CLAMP, 1.0 - NOISE_CLAMP));
            }
        }
        out
    }

    /// Gumbel perturbation `-log(-log eps)` for each `(point, slice)`.
    pub fn gumbel<T: Scalar>(&self, layer: usize, head: usize, ids: &[usize], slices: usize) -> Tensor<T> {
        let data = self
            .uniforms(layer, head, ids, slices)
            .into_iter()
            .map(|u| T::lit(-(-u.ln()).ln()))
            .collect();
        Tensor::new(vec![ids.len(), slices], data).expect("noise shape")
    }
}

/// `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> Linear<P> {
    pub fn map<Q, F: FnMut(&P) -> Q>(&self, f: &mut F) -> Linear<Q> {
        Linear { weight: f(&self.weight), bias: f(&self.bias) }
    }

    pub fn visit<'a, F: FnMut(&'a P)>(&'a self, f: &mut F) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T: Scalar> Linear<Tensor<T>> {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(rng.gen_range(-bound..bound))),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

impl Linear<Var> {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    /// `Ch -> M` slice logits.
    pub slice: Linear<P>,
    /// `Ch -> 1` temperature offset.
    pub temperature: Linear<P>,
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
}

impl<P> HeadParams<P> {
    pub fn map<Q, F: FnMut(&P) -> Q>(&self, f: &mut F) -> HeadParams<Q> {
        HeadParams {
            slice: self.slice.map(f),
            temperature: self.temperature.map(f),
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
        }
    }

    pub fn visit<'a, F: FnMut(&'a P)>(&'a self, f: &mut F) {
        self.slice.visit(f);
        self.temperature.visit(f);
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
    }

    pub fn visit_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        self.slice.visit_mut(f);
        self.temperature.visit_mut(f);
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub in_proj: Linear<P>,
    pub f_proj: Option<Linear<P>>,
    pub heads: Vec<HeadParams<P>>,
    pub out_proj: Linear<P>,
}

impl<P> AttentionParams<P> {
    pub fn map<Q, F: FnMut(&P) -> Q>(&self, f: &mut F) -> AttentionParams<Q> {
        AttentionParams {
            in_proj: self.in_proj.map(f),
            f_proj: self.f_proj.as_ref().map(|l| l.map(f)),
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
            out_proj: self.out_proj.map(f),
        }
    }

    pub fn visit<'a, F: FnMut(&'a P)>(&'a self, f: &mut F) {
        self.in_proj.visit(f);
        if let Some(l) = &self.f_proj {
            l.visit(f);
        }
        for h in &self.heads {
            h.visit(f);
        }
        self.out_proj.visit(f);
    }

    pub fn visit_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        self.in_proj.visit_mut(f);
        if let Some(l) = &mut self.f_proj {
            l.visit_mut(f);
        }
        for h in &mut self.heads {
            h.visit_mut(f);
        }
        self.out_proj.visit_mut(f);
    }
}

impl<T: Scalar> AttentionParams<Tensor<T>> {
    pub fn init<R: Rng>(config: &SliceConfig, rng: &mut R) -> Self {
        let (c, ch, m) = (config.channels, config.head_dim(), config.slices);
        let in_proj = Linear::init(c, c, rng);
        let f_proj = config.variant.f_projection.then(|| Linear::init(c, c, rng));
        let heads = (0..config.heads)
            .map(|_| HeadParams {
                slice: Linear::init(ch, m, rng),
                temperature: Linear::init(ch, 1, rng),
                query: Linear::init(ch, ch, rng),
                key: Linear::init(ch, ch, rng),
                value: Linear::init(ch, ch, rng),
            })
            .collect();
        let out_proj = Linear::init(c, c, rng);
        Self { in_proj, f_proj, heads, out_proj }
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> AttentionParams<Var> {
        self.map(&mut |t| g.param(t.clone()))
    }

    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.numel());
        n
    }
}

/// Per-point temperature `max(tau0 + linear(x), tau_min)`, shape `[N, 1]`.
pub fn ada_temp<T: Scalar>(g: &mut Graph<T>, x: Var, temperature: &Linear<Var>, tau0: f64, tau_min: f64) -> Result<Var> {
    let lin = temperature.apply(g, x)?;
    let shifted = g.add_scalar(lin, T::lit(tau0))?;
    g.clamp_min(shifted, T::lit(tau_min))
}

/// Slice weights `softmax((linear(x) + gumbel) / tau)`; with `gumbel = None`
/// the perturbation is exactly zero and no add is recorded.
pub fn rep_slice<T: Scalar>(g: &mut Graph<T>, x: Var, tau: Var, slice: &Linear<Var>, gumbel: Option<Var>) -> Result<Var> {
    let mut logits = slice.apply(g, x)?;
    if let Some(noise) = gumbel {
        logits = g.add(logits, noise)?;
    }
    g.softmax_temp(logits, tau)
}

/// Point order used by every reduction over points: rows sorted
/// lexicographically by their values in `keys` (compared in turn).
/// Reductions that follow this order give bit-identical results for any
/// permutation of the input points.
pub fn canonical_order<T: Scalar>(keys: &[&Tensor<T>]) -> Vec<usize> {
    let n = keys.first().map_or(0, |k| k.rows());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        for k in keys {
            for (x, y) in k.row(a).iter().zip(k.row(b)) {
                match x.as_f64().total_cmp(&y.as_f64()) {
                    std::cmp::Ordering::Equal => {}
                    o => return o,
                }
            }
        }
        std::cmp::Ordering::Equal
    });
    order
}

/// `sum_i w_ij` as a `[1, M]` row, accumulated in [`canonical_order`].
pub fn slice_norms<T: Scalar>(g: &mut Graph<T>, w: Var) -> Result<Var> {
    let order = canonical_order(&[g.value(w)]);
    let ws = g.permute_rows(w, &order)?;
    g.sum_rows(ws)
}

/// `sum_i w_ij x_i` as `[M, Ch]`, accumulated in [`canonical_order`].
pub fn weighted_sums<T: Scalar>(g: &mut Graph<T>, w: Var, x: Var) -> Result<Var> {
    let order = canonical_order(&[g.value(x), g.value(w)]);
    let ws = g.permute_rows(w, &order)?;
    let xs = g.permute_rows(x, &order)?;
    let wt = g.transpose(ws)?;
    g.matmul(wt, xs)
}

/// `sums_j / (norms_j + eps)`, with `norms` a `[1, M]` row.
pub fn normalize_states<T: Scalar>(g: &mut Graph<T>, sums: Var, norms: Var, eps_denom: f64) -> Result<Var> {
    let col = g.transpose(norms)?;
    let den = g.add_scalar(col, T::lit(eps_denom))?;
    g.div(sums, den)
}

/// States `s_j = sum_i w_ij x_i / (sum_i w_ij + eps)`.
pub fn compute_eidetic_states<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, eps_denom: f64) -> Result<Var> {
    let sums = weighted_sums(g, w, x)?;
    let norms = slice_norms(g, w)?;
    normalize_states(g, sums, norms, eps_denom)
}

/// Scaled dot-product attention among the `M` states of one head.
pub fn state_attention<T: Scalar>(g: &mut Graph<T>, s: Var, head: &HeadParams<Var>) -> Result<Var> {
    let ch = g.shape(s)[1];
    let q = head.query.apply(g, s)?;
    let k = head.key.apply(g, s)?;
    let v = head.value.apply(g, s)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::lit(1.0 / (ch as f64).sqrt()))?;
    let attn = g.softmax(scores)?;
    g.matmul(attn, v)
}

/// `x'_i = sum_j w_ij s'_j`.
pub fn deslice<T: Scalar>(g: &mut Graph<T>, s_prime: Var, w: Var) -> Result<Var> {
    g.matmul(w, s_prime)
}

/// Projected inputs of one attention layer, shared by the serial and
/// parallel code paths.
pub(crate) struct Projected {
    /// `[N, C]`, source of slice logits and temperatures.
    pub x: Var,
    /// `[N, C]`, source of state values; equals `x` unless `f_projection`.
    pub values: Var,
    pub scalars: usize,
}

pub(crate) fn project<T: Scalar>(g: &mut Graph<T>, x: Var, params: &AttentionParams<Var>) -> Result<Projected> {
    let px = params.in_proj.apply(g, x)?;
    let mut scalars = g.value(px).numel();
    let values = match &params.f_proj {
        Some(f) => {
            let pf = f.apply(g, x)?;
            scalars += g.value(pf).numel();
            pf
        }
        None => px,
    };
    Ok(Projected { x: px, values, scalars })
}

/// Head `h` slice weights for the points `ids` whose projected features
/// are `xh`.
pub(crate) fn head_weights<T: Scalar>(
    g: &mut Graph<T>,
    xh: Var,
    head: &HeadParams<Var>,
    config: &SliceConfig,
    noise: &NoiseSource,
    layer: usize,
    h: usize,
    ids: &[usize],
) -> Result<Var> {
    let tau = if config.variant.ada_temp {
        ada_temp(g, xh, &head.temperature, config.tau0, config.tau_min)?
    } else {
        g.constant(Tensor::scalar(T::lit(config.tau0)))
    };
    let gumbel = if config.noisy() {
        Some(g.constant(noise.gumbel(layer, h, ids, config.slices)))
    } else {
        None
    };
    rep_slice(g, xh, tau, &head.slice, gumbel)
}

/// Output of one Physics-Attention layer.
pub struct AttentionOutput {
    /// `[N, C]`.
    pub out: Var,
    /// Slice weights per head, each `[N, M]`.
    pub weights: Vec<Var>,
    /// Scalars materialised by the input projection(s).
    pub projection_scalars: usize,
}

/// Single-rank Physics-Attention. Noise for row `i` is keyed by
/// `ids[i]`, or by `i` when `ids` is `None`.
pub fn physics_attention_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    config: &SliceConfig,
    params: &AttentionParams<Var>,
    noise: &NoiseSource,
    layer: usize,
    ids: Option<&[usize]>,
) -> Result<AttentionOutput> {
    config.validate()?;
    let (n, c) = g.value(x).dims2("physics_attention")?;
    if c != config.channels {
        return Err(Error::Dimension { op: "physics_attention", lhs: vec![n, c], rhs: vec![config.channels] });
    }
    let default_ids: Vec<usize>;
    let ids = match ids {
        Some(ids) if ids.len() == n => ids,
        Some(ids) => {
            return Err(Error::Dimension { op: "physics_attention ids", lhs: vec![n], rhs: vec![ids.len()] })
        }
        None => {
            default_ids = (0..n).collect();
            &default_ids
        }
    };
    let ch = config.head_dim();
    let proj = project(g, x, params)?;
    let mut outs = Vec::with_capacity(config.heads);
    let mut weights = Vec::with_capacity(config.heads);
    for (h, head) in params.heads.iter().enumerate() {
        let xh = g.slice_cols(proj.x, h * ch, (h + 1) * ch)?;
        let vh = if proj.values == proj.x { xh } else { g.slice_cols(proj.values, h * ch, (h + 1) * ch)? };
        let w = head_weights(g, xh, head, config, noise, layer, h, ids)?;
        let s = compute_eidetic_states(g, vh, w, config.eps_denom)?;
        let s_prime = state_attention(g, s, head)?;
        outs.push(deslice(g, s_prime, w)?);
        weights.push(w);
    }
    let merged = g.concat_cols(&outs)?;
    let out = params.out_proj.apply(g, merged)?;
    Ok(AttentionOutput { out, weights, projection_scalars: proj.scalars })
}
