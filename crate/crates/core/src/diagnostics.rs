//! Slice-weight KL diagnostics, the variant ablation, and activation
//! accounting.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionVariant, NoiseMode, NoiseSource};
use crate::dataio::{MeshSample, NormStats};
use crate::error::{Error, Result};
use crate::metrics::kl_uniform;
use crate::model::{collect_slice_weights, init_params, model_forward, ModelConfig, ModelParams};
use crate::autograd::Graph;
use crate::parallel::Execution;
use crate::tensor::Tensor;
use crate::train::{evaluate, train, CoefficientOptions, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEntry {
    pub layer: usize,
    pub head: usize,
    pub kl_mean: f64,
}

/// Mean KL of slice weights from uniform, per layer and head, averaged
/// over points and then over samples. Layers are 0-based.
///
/// `aggregate_mean` is the plain arithmetic mean of all entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub layers: Vec<usize>,
    pub heads: usize,
    pub slices: usize,
    pub entries: Vec<KlEntry>,
    pub aggregate_mean: f64,
}

pub const KL_CSV_HEADER: &str = "layer,head,kl_mean";

impl KlReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{KL_CSV_HEADER}\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{:.12e}\n", e.layer, e.head, e.kl_mean));
        }
        s
    }

    /// Mean over heads for one layer.
    pub fn layer_mean(&self, layer: usize) -> Option<f64> {
        let v: Vec<f64> = self.entries.iter().filter(|e| e.layer == layer).map(|e| e.kl_mean).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs a noise-free forward on every sample and reports KL per selected
/// layer (all layers when `layers` is `None`).
pub fn diagnose_kl(
    params: &ModelParams<Tensor<f64>>,
    model: &ModelConfig,
    stats: &NormStats,
    samples: &[MeshSample],
    layers: Option<&[usize]>,
) -> Result<KlReport> {
    if samples.is_empty() {
        return Err(Error::Validation("diagnose_kl needs at least one sample".into()));
    }
    let layers: Vec<usize> = match layers {
        Some(ls) => {
            if let Some(bad) = ls.iter().find(|&&l| l >= model.layers) {
                return Err(Error::Validation(format!("layer {bad} out of range 0..{}", model.layers)));
            }
            let mut v = ls.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        }
        None => (0..model.layers).collect(),
    };
    let mut sums = vec![vec![0.0; model.heads]; layers.len()];
    for s in samples {
        let feats = stats.input.normalize(&s.features());
        let w = collect_slice_weights(params, model, &feats)?;
        for (slot, &l) in layers.iter().enumerate() {
            for (h, wh) in w[l].iter().enumerate() {
                sums[slot][h] += kl_uniform(wh)?;
            }
        }
    }
    let mut entries = Vec::new();
    for (slot, &l) in layers.iter().enumerate() {
        for h in 0..model.heads {
            entries.push(KlEntry { layer: l, head: h, kl_mean: sums[slot][h] / samples.len() as f64 });
        }
    }
    let aggregate_mean = entries.iter().map(|e| e.kl_mean).sum::<f64>() / entries.len() as f64;
    Ok(KlReport { layers, heads: model.heads, slices: model.slices, entries, aggregate_mean })
}

/// The ablation ladder, from the baseline to the full model.
pub const ABLATION_VARIANTS: [(&str, AttentionVariant); 4] = [
    ("Transolver", AttentionVariant::BASELINE),
    ("+ Ada-Temp", AttentionVariant::ADA_TEMP),
    ("+ Ada-Temp, Speedup", AttentionVariant::ADA_TEMP_SPEEDUP),
    ("Transolver++", AttentionVariant::EIDETIC),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub first_train_loss: f64,
    pub final_train_loss: f64,
    pub test_relative_l2: f64,
    pub kl_mean: f64,
}

pub const ABLATION_CSV_HEADER: &str = "variant,first_train_loss,final_train_loss,test_relative_l2,kl_mean";

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "\"{}\",{:.12e},{:.12e},{:.12e},{:.12e}\n",
            r.variant, r.first_train_loss, r.final_train_loss, r.test_relative_l2, r.kl_mean
        ));
    }
    s
}

/// Trains each variant of [`ABLATION_VARIANTS`] on the same data once
/// per seed (the seed sets both initialisation and training noise) and
/// reports the mean over seeds of the first and final training loss,
/// test relative L2 and test KL.
pub fn ablation_matrix(
    base: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[MeshSample],
    test_set: &[MeshSample],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Validation("ablation needs at least one seed".into()));
    }
    ABLATION_VARIANTS
        .iter()
        .map(|&(label, variant)| {
            let mut acc = [0.0; 4];
            for &seed in seeds {
                let model = ModelConfig { variant, seed, ..base.clone() };
                let tc = TrainConfig { seed, ..train_config.clone() };
                let out = train(&model, train_set, &tc)?;
                let report = evaluate(&out.params, &model, &out.stats, test_set, &CoefficientOptions::default())?;
                let kl = diagnose_kl(&out.params, &model, &out.stats, test_set, None)?;
                let vals = [
                    out.log[0].loss,
                    out.log.last().expect("epochs >= 1").loss,
                    report.relative_l2_mean,
                    kl.aggregate_mean,
                ];
                acc.iter_mut().zip(vals).for_each(|(a, v)| *a += v / seeds.len() as f64);
            }
            Ok(AblationRow {
                variant: label.to_string(),
                first_train_loss: acc[0],
                final_train_loss: acc[1],
                test_relative_l2: acc[2],
                kl_mean: acc[3],
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRow {
    pub variant: String,
    pub n_points: usize,
    pub projection_scalars: usize,
}

/// Scalars materialised by the attention input projections of a full
/// forward over `n_points`, for every ablation variant at `base` width.
pub fn activation_accounting(base: &ModelConfig, n_points: usize) -> Result<Vec<ActivationRow>> {
    ABLATION_VARIANTS
        .iter()
        .map(|&(label, variant)| {
            let model = ModelConfig { variant, ..base.clone() };
            let params = init_params::<f64>(&model)?;
            let mut g = Graph::new();
            let bound = params.map(&mut |t| g.constant(t.clone()));
            let x = g.constant(Tensor::zeros(&[n_points, model.d_in]));
            let fwd =
                model_forward(&mut g, &bound, &model, x, NoiseMode::NoNoise, &NoiseSource::new(0), &Execution::Serial)?;
            Ok(ActivationRow { variant: label.to_string(), n_points, projection_scalars: fwd.projection_scalars })
        })
        .collect()
}
