//! `TPPC` checkpoint files: model configuration plus every parameter.
//!
//! Layout (little-endian):
//!
//! | field | type |
//! |-------|------|
//! | magic `b"TPPC"` | 4 bytes |
//! | version (1) | u32 |
//! | layers, heads, channels, slices, d_in, d_out | u32 each |
//! | mlp_ratio, tau0, tau_min, eps_denom | f64 each |
//! | seed | u64 |
//! | variant bits: 1 = ada_temp, 2 = reparam, 4 = f_projection | u32 |
//! | scalar count | u64 |
//! | parameters in [`ModelParams::visit`] order | f64 each |
//!
//! Parameter order: embedding (in, out), then per block: norm1 (gamma,
//! beta), attention (in_proj, f_proj if present, per head: slice,
//! temperature, query, key, value, then out_proj), norm2, ffn_in, ffn_out;
//! then the head. Every linear layer stores weight before bias.

use std::fs;
use std::path::Path;

use crate::attention::AttentionVariant;
use crate::dataio::Reader;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPPC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn variant_bits(v: AttentionVariant) -> u32 {
    u32::from(v.ada_temp) | u32::from(v.reparam) << 1 | u32::from(v.f_projection) << 2
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams<Tensor<f64>>) -> Result<Vec<u8>> {
    config.validate()?;
    if params.scalar_count() != config.param_count() {
        return Err(Error::Contract(format!(
            "parameters hold {} scalars, config implies {}",
            params.scalar_count(),
            config.param_count()
        )));
    }
    let mut buf = Vec::with_capacity(96 + 8 * params.scalar_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [config.layers, config.heads, config.channels, config.slices, config.d_in, config.d_out] {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("dimension {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [config.mlp_ratio, config.tau0, config.tau_min, config.eps_denom] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&config.seed.to_le_bytes());
    buf.extend_from_slice(&variant_bits(config.variant).to_le_bytes());
    buf.extend_from_slice(&(params.scalar_count() as u64).to_le_bytes());
    params.visit(&mut |t: &Tensor<f64>| {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    Ok(buf)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(ModelConfig, ModelParams<Tensor<f64>>)> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected TPPC".into() });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported checkpoint version {version}") });
    }
    let mut dims = [0usize; 6];
    for (d, name) in dims.iter_mut().zip(["layers", "heads", "channels", "slices", "d_in", "d_out"]) {
        *d = r.u32(name)? as usize;
    }
    let mut reals = [0f64; 4];
    for (v, name) in reals.iter_mut().zip(["mlp_ratio", "tau0", "tau_min", "eps_denom"]) {
        *v = r.f64(name)?;
    }
    let seed = r.u64("seed")?;
    let off = r.offset();
    let bits = r.u32("variant")?;
    if bits > 7 {
        return Err(Error::Format { offset: off, msg: format!("unknown variant bits {bits:#x}") });
    }
    let config = ModelConfig {
        layers: dims[0],
        heads: dims[1],
        channels: dims[2],
        slices: dims[3],
        d_in: dims[4],
        d_out: dims[5],
        mlp_ratio: reals[0],
        tau0: reals[1],
        tau_min: reals[2],
        eps_denom: reals[3],
        seed,
        variant: AttentionVariant { ada_temp: bits & 1 != 0, reparam: bits & 2 != 0, f_projection: bits & 4 != 0 },
    };
    config.validate()?;
    let off = r.offset();
    let count = r.u64("scalar count")?;
    if count != config.param_count() as u64 {
        return Err(Error::Format {
            offset: off,
            msg: format!("scalar count {count} does not match configuration ({})", config.param_count()),
        });
    }
    let values = r.f64s(count as usize, "parameters")?;
    r.finish()?;
    let mut params = init_params::<f64>(&config)?;
    let mut pos = 0;
    params.visit_mut(&mut |t: &mut Tensor<f64>| {
        let n = t.numel();
        t.data_mut().copy_from_slice(&values[pos..pos + n]);
        pos += n;
    });
    Ok((config, params))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams<Tensor<f64>>) -> Result<()> {
    fs::write(path, encode_checkpoint(config, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<Tensor<f64>>)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_every_variant() {
        for bits in 0..8u32 {
            let mut cfg = ModelConfig::new(2, 2, 8, 4, 6, 2);
            cfg.seed = 17;
            cfg.tau0 = 0.7;
            cfg.variant =
                AttentionVariant { ada_temp: bits & 1 != 0, reparam: bits & 2 != 0, f_projection: bits & 4 != 0 };
            let params = init_params::<f64>(&cfg).unwrap();
            let buf = encode_checkpoint(&cfg, &params).unwrap();
            let (c2, p2) = decode_checkpoint(&buf).unwrap();
            assert_eq!(c2, cfg);
            assert_eq!(p2, params);
            assert_eq!(encode_checkpoint(&c2, &p2).unwrap(), buf);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let cfg = ModelConfig::new(1, 1, 4, 2, 3, 1);
        let buf = encode_checkpoint(&cfg, &init_params(&cfg).unwrap()).unwrap();
        match decode_checkpoint(&buf[..buf.len() - 3]) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("parameters"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut bad = buf.clone();
        bad[3] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
