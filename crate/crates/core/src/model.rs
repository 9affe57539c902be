//! Field-prediction model: point embedding, a stack of pre-norm blocks
//! (Physics-Attention and a pointwise feedforward, each residual), and a
//! linear output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    physics_attention_forward, AttentionParams, AttentionVariant, Linear, NoiseMode, NoiseSource, SliceConfig,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::parallel::{blocked_physics_attention, parallel_physics_attention, Execution};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub channels: usize,
    pub slices: usize,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    #[serde(default = "default_eps_denom")]
    pub eps_denom: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub variant: AttentionVariant,
}

fn default_mlp_ratio() -> f64 {
    2.0
}
fn default_tau0() -> f64 {
    0.5
}
fn default_tau_min() -> f64 {
    0.1
}
fn default_eps_denom() -> f64 {
    1e-8
}

impl ModelConfig {
    pub fn new(layers: usize, heads: usize, channels: usize, slices: usize, d_in: usize, d_out: usize) -> Self {
        Self {
            layers,
            heads,
            channels,
            slices,
            d_in,
            d_out,
            mlp_ratio: default_mlp_ratio(),
            tau0: default_tau0(),
            tau_min: default_tau_min(),
            eps_denom: default_eps_denom(),
            seed: 0,
            variant: AttentionVariant::EIDETIC,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Config("d_in and d_out must be >= 1".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return Err(Error::Config(format!("mlp_ratio {} gives an empty feedforward", self.mlp_ratio)));
        }
        self.slice_config(NoiseMode::NoNoise).validate()
    }

    pub fn hidden(&self) -> usize {
        (self.mlp_ratio * self.channels as f64).round() as usize
    }

    pub fn slice_config(&self, mode: NoiseMode) -> SliceConfig {
        SliceConfig {
            slices: self.slices,
            heads: self.heads,
            channels: self.channels,
            tau0: self.tau0,
            tau_min: self.tau_min,
            eps_denom: self.eps_denom,
            noise_mode: mode,
            variant: self.variant,
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (c, h, m) = (self.channels, self.heads, self.slices);
        let ch = c / h;
        let hid = self.hidden();
        let proj = c * c + c;
        let per_head = (ch * m + m) + (ch + 1) + 3 * (ch * ch + ch);
        let n_proj = if self.variant.f_projection { 2 } else { 1 };
        let attention = n_proj * proj + h * per_head + proj;
        let ffn = (c * hid + hid) + (hid * c + c);
        let block = 4 * c + attention + ffn;
        let embed = (self.d_in * c + c) + (c * c + c);
        let head = c * self.d_out + self.d_out;
        embed + self.layers * block + head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub norm1: LayerNormParams<P>,
    pub attention: AttentionParams<P>,
    pub norm2: LayerNormParams<P>,
    pub ffn_in: Linear<P>,
    pub ffn_out: Linear<P>,
}

/// All model parameters. [`ModelParams::visit`] defines the canonical
/// order used by checkpoints and the optimizer:
///
/// 1. embedding `in` (weight, bias), embedding `out` (weight, bias)
/// 2. per block: norm1 (gamma, beta); attention in_proj, f_proj when
///    present, per head (slice, temperature, query, key, value), out_proj;
///    norm2; ffn_in; ffn_out
/// 3. output head (weight, bias)
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub embed_in: Linear<P>,
    pub embed_out: Linear<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub head: Linear<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q, F: FnMut(&P) -> Q>(&self, f: &mut F) -> ModelParams<Q> {
        ModelParams {
            embed_in: self.embed_in.map(f),
            embed_out: self.embed_out.map(f),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    norm1: LayerNormParams { gamma: f(&b.norm1.gamma), beta: f(&b.norm1.beta) },
                    attention: b.attention.map(f),
                    norm2: LayerNormParams { gamma: f(&b.norm2.gamma), beta: f(&b.norm2.beta) },
                    ffn_in: b.ffn_in.map(f),
                    ffn_out: b.ffn_out.map(f),
                })
                .collect(),
            head: self.head.map(f),
        }
    }

    pub fn visit<'a, F: FnMut(&'a P)>(&'a self, f: &mut F) {
        self.embed_in.visit(f);
        self.embed_out.visit(f);
        for b in &self.blocks {
            f(&b.norm1.gamma);
            f(&b.norm1.beta);
            b.attention.visit(f);
            f(&b.norm2.gamma);
            f(&b.norm2.beta);
            b.ffn_in.visit(f);
            b.ffn_out.visit(f);
        }
        self.head.visit(f);
    }

    pub fn visit_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        self.embed_in.visit_mut(f);
        self.embed_out.visit_mut(f);
        for b in &mut self.blocks {
            f(&mut b.norm1.gamma);
            f(&mut b.norm1.beta);
            b.attention.visit_mut(f);
            f(&mut b.norm2.gamma);
            f(&mut b.norm2.beta);
            b.ffn_in.visit_mut(f);
            b.ffn_out.visit_mut(f);
        }
        self.head.visit_mut(f);
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.numel());
        n
    }

    /// Registers every tensor as a trainable leaf, in canonical order.
    pub fn bind(&self, g: &mut Graph<T>) -> ModelParams<Var> {
        self.map(&mut |t| g.param(t.clone()))
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t));
        out
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |t| ok &= t.is_finite());
        ok
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<Tensor<U>> {
        self.map(&mut |t| t.cast())
    }
}

/// Seeded initialisation: weights uniform in `±1/sqrt(fan_in)`, biases
/// zero, layer-norm gains one.
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<Tensor<T>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.channels;
    let slice = config.slice_config(NoiseMode::NoNoise);
    let embed_in = Linear::init(config.d_in, c, &mut rng);
    let embed_out = Linear::init(c, c, &mut rng);
    let norm = || LayerNormParams { gamma: Tensor::ones(&[c]), beta: Tensor::zeros(&[c]) };
    let blocks = (0..config.layers)
        .map(|_| BlockParams {
            norm1: norm(),
            attention: AttentionParams::init(&slice, &mut rng),
            norm2: norm(),
            ffn_in: Linear::init(c, config.hidden(), &mut rng),
            ffn_out: Linear::init(config.hidden(), c, &mut rng),
        })
        .collect();
    let head = Linear::init(c, config.d_out, &mut rng);
    Ok(ModelParams { embed_in, embed_out, blocks, head })
}

pub struct ForwardOutput {
    /// `[N, d_out]`.
    pub out: Var,
    /// Slice weights, indexed `[layer][head]`; each `[N, M]`. Under
    /// parallel execution the per-rank weights are concatenated back into
    /// global point order.
    pub weights: Vec<Vec<Var>>,
    pub projection_scalars: usize,
}

/// Pointwise part of the model applied to one shard of rows.
fn embed<T: Scalar>(g: &mut Graph<T>, p: &ModelParams<Var>, x: Var) -> Result<Var> {
    let h = p.embed_in.apply(g, x)?;
    let h = g.gelu(h)?;
    p.embed_out.apply(g, h)
}

fn feedforward<T: Scalar>(g: &mut Graph<T>, b: &BlockParams<Var>, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, b.norm2.gamma, b.norm2.beta, T::lit(LAYER_NORM_EPS))?;
    let h = b.ffn_in.apply(g, n)?;
    let h = g.gelu(h)?;
    let h = b.ffn_out.apply(g, h)?;
    g.add(x, h)
}

/// Full forward pass recorded on `g`.
pub fn model_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    features: Var,
    mode: NoiseMode,
    noise: &NoiseSource,
    exec: &Execution<'_>,
) -> Result<ForwardOutput> {
    let (n, d) = g.value(features).dims2("model_forward")?;
    if d != config.d_in {
        return Err(Error::Dimension { op: "model_forward features", lhs: vec![n, d], rhs: vec![config.d_in] });
    }
    let slice = config.slice_config(mode);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut projection_scalars = 0;
    let mut weights = Vec::with_capacity(config.layers);

    match exec {
        Execution::Serial | Execution::RankBlocked(_) => {
            let mut x = embed(g, params, features)?;
            for (l, b) in params.blocks.iter().enumerate() {
                let normed = g.layer_norm(x, b.norm1.gamma, b.norm1.beta, eps)?;
                let attn = match exec {
                    Execution::RankBlocked(part) => {
                        blocked_physics_attention(g, normed, &slice, &b.attention, noise, l, part)?
                    }
                    _ => physics_attention_forward(g, normed, &slice, &b.attention, noise, l, None)?,
                };
                projection_scalars += attn.projection_scalars;
                weights.push(attn.weights);
                x = g.add(x, attn.out)?;
                x = feedforward(g, b, x)?;
            }
            let out = params.head.apply(g, x)?;
            Ok(ForwardOutput { out, weights, projection_scalars })
        }
        Execution::Parallel(part, collective) => {
            if part.n() != n {
                return Err(Error::Partition(format!("partition covers {} points, input has {n}", part.n())));
            }
            let mut xs = Vec::with_capacity(part.rank_count());
            for r in part.ranges() {
                let shard = g.slice_rows(features, r.start, r.end)?;
                xs.push(embed(g, params, shard)?);
            }
            for (l, b) in params.blocks.iter().enumerate() {
                let normed = xs
                    .iter()
                    .map(|&x| g.layer_norm(x, b.norm1.gamma, b.norm1.beta, eps))
                    .collect::<Result<Vec<_>>>()?;
                let attn = parallel_physics_attention(g, &normed, &slice, &b.attention, noise, l, part, collective)?;
                projection_scalars += attn.projection_scalars;
                let mut layer_w = Vec::with_capacity(config.heads);
                for h in 0..config.heads {
                    let per_rank: Vec<Var> = attn.weights.iter().map(|w| w[h]).collect();
                    layer_w.push(g.concat_rows(&per_rank)?);
                }
                weights.push(layer_w);
                for (x, o) in xs.iter_mut().zip(&attn.outs) {
                    let r = g.add(*x, *o)?;
                    *x = feedforward(g, b, r)?;
                }
            }
            let outs = xs.iter().map(|&x| params.head.apply(g, x)).collect::<Result<Vec<_>>>()?;
            let out = g.concat_rows(&outs)?;
            Ok(ForwardOutput { out, weights, projection_scalars })
        }
    }
}

/// Convenience forward without gradients: returns `[N, d_out]`.
pub fn predict<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    config: &ModelConfig,
    features: &Tensor<T>,
    mode: NoiseMode,
    noise: &NoiseSource,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.map(&mut |t| g.constant(t.clone()));
    let x = g.constant(features.clone());
    let fwd = model_forward(&mut g, &bound, config, x, mode, noise, &Execution::Serial)?;
    Ok(g.value(fwd.out).clone())
}

/// Slice weights of every layer and head from a noise-free forward,
/// indexed `[layer][head]`.
pub fn collect_slice_weights<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    config: &ModelConfig,
    features: &Tensor<T>,
) -> Result<Vec<Vec<Tensor<T>>>> {
    let mut g = Graph::new();
    let bound = params.map(&mut |t| g.constant(t.clone()));
    let x = g.constant(features.clone());
    let fwd = model_forward(&mut g, &bound, config, x, NoiseMode::NoNoise, &NoiseSource::new(0), &Execution::Serial)?;
    Ok(fwd
        .weights
        .iter()
        .map(|layer| layer.iter().map(|&w| g.value(w).clone()).collect())
        .collect())
}
