//! T5.1.1-flavoured encoder and decoder stacks shared by every encoder mode.
//!
//! Blocks are pre-norm residual with RMS norm, gated-GELU feed-forward
//! layers and no biases. Input and output embeddings are tied, with logits
//! scaled by `1/sqrt(d_model)`. Self-attention carries a learned relative
//! position bias (one table for the encoder, one for the decoder), computed
//! from caller-supplied position indices so latent rows can sit at arbitrary
//! positions.

mod bucket;
mod config;
mod transformer;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use bucket::{bucket_matrix, relative_position_bucket};
pub use config::{EncoderMode, ModelConfig};
pub use transformer::{
    cross_entropy_and_accuracy, decoder_forward, encoder_forward, target_mask, token_weights, Forward,
};
pub(crate) use transformer::argmax;

use crate::tensor::{Float, Params, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("every position is masked")]
    AllMasked,
    #[error("no unmasked targets")]
    NoTargets,
    #[error("parameters do not match the config: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameter names and shapes implied by a config.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let inner = cfg.n_heads * cfg.d_kv;
    let mut out = vec![
        ("shared.embedding".to_string(), vec![cfg.vocab_size, d]),
        ("encoder.rel_bias".to_string(), vec![cfg.num_buckets, cfg.n_heads]),
        ("encoder.final_norm".to_string(), vec![d]),
        ("decoder.rel_bias".to_string(), vec![cfg.num_buckets, cfg.n_heads]),
        ("decoder.final_norm".to_string(), vec![d]),
    ];
    let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.q"), vec![d, inner]));
        out.push((format!("{p}.k"), vec![d, inner]));
        out.push((format!("{p}.v"), vec![d, inner]));
        out.push((format!("{p}.o"), vec![inner, d]));
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.wi0"), vec![d, cfg.d_ff]));
        out.push((format!("{p}.wi1"), vec![d, cfg.d_ff]));
        out.push((format!("{p}.wo"), vec![cfg.d_ff, d]));
    };
    for i in 0..cfg.n_enc_layers {
        let p = format!("encoder.layer.{i}");
        attn(&mut out, &format!("{p}.self_attn"));
        out.push((format!("{p}.self_attn_norm"), vec![d]));
        ffn(&mut out, &format!("{p}.ffn"));
        out.push((format!("{p}.ffn_norm"), vec![d]));
    }
    for i in 0..cfg.n_dec_layers {
        let p = format!("decoder.layer.{i}");
        attn(&mut out, &format!("{p}.self_attn"));
        out.push((format!("{p}.self_attn_norm"), vec![d]));
        attn(&mut out, &format!("{p}.cross_attn"));
        out.push((format!("{p}.cross_attn_norm"), vec![d]));
        ffn(&mut out, &format!("{p}.ffn"));
        out.push((format!("{p}.ffn_norm"), vec![d]));
    }
    match cfg.encoder_mode {
        EncoderMode::Baseline => {}
        EncoderMode::Decal => out.extend(decal_param_shapes(cfg)),
        EncoderMode::Attnpool => {
            attn(&mut out, "attnpool");
            out.push(("attnpool.norm".to_string(), vec![d]));
        }
    }
    out.sort();
    out
}

/// The two tensors DeCAL adds on top of a plain encoder-decoder.
pub fn decal_param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    vec![
        ("decal.latent_norm".to_string(), vec![cfg.d_model]),
        ("decal.v".to_string(), vec![cfg.d_model]),
    ]
}

fn init_std(cfg: &ModelConfig, name: &str) -> Option<f64> {
    let d = cfg.d_model as f64;
    let inner = (cfg.n_heads * cfg.d_kv) as f64;
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if name.ends_with("norm") || name == "decal.v" {
        return None;
    }
    Some(match leaf {
        "embedding" => 1.0,
        "rel_bias" => d.powf(-0.5),
        "q" => (d * cfg.d_kv as f64).powf(-0.5),
        "k" | "v" | "wi0" | "wi1" => d.powf(-0.5),
        "o" => inner.powf(-0.5),
        "wo" => (cfg.d_ff as f64).powf(-0.5),
        _ => d.powf(-0.5),
    })
}

fn init_tensor<T: Float>(cfg: &ModelConfig, name: &str, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    match init_std(cfg, name) {
        Some(std) => {
            let normal = Normal::new(0.0, std).expect("finite std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
            Tensor::new(shape.to_vec(), data).expect("shape product")
        }
        // norm scales start at one, the latent offset v at zero
        None if name == "decal.v" => Tensor::zeros(shape),
        None => Tensor::full(shape, T::one()),
    }
}

/// Fresh parameters: normal weights with T5 fan-in scaling, unit norm
/// scales, and `decal.v = 0`.
pub fn init_params<T: Float>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Params<T>, ModelError> {
    cfg.validate()?;
    let mut p = Params::new();
    for (name, shape) in param_shapes(cfg) {
        let t = init_tensor(cfg, &name, &shape, rng);
        p.insert(name, t);
    }
    Ok(p)
}

/// Adds freshly initialized DeCAL tensors to parameters of a baseline model.
pub fn graft_decal_params<T: Float>(cfg: &ModelConfig, params: &mut Params<T>, rng: &mut impl Rng) {
    for (name, shape) in decal_param_shapes(cfg) {
        let t = init_tensor(cfg, &name, &shape, rng);
        params.insert(name, t);
    }
}

/// Checks that `params` holds exactly the tensors `cfg` implies.
pub fn check_params<T: Float>(cfg: &ModelConfig, params: &Params<T>) -> Result<(), ModelError> {
    let expected = param_shapes(cfg);
    for (name, shape) in &expected {
        match params.get(name) {
            None => return Err(ModelError::Incompatible(format!("missing tensor `{name}`"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(ModelError::Incompatible(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if params.len() != expected.len() {
        let extra: Vec<&str> = params
            .names()
            .filter(|n| !expected.iter().any(|(e, _)| e == n))
            .collect();
        return Err(ModelError::Incompatible(format!("unexpected tensors {extra:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_matches_declared_shapes() {
        for mode in [EncoderMode::Baseline, EncoderMode::Decal, EncoderMode::Attnpool] {
            let c = if mode == EncoderMode::Baseline { 1 } else { 2 };
            let cfg = ModelConfig::tiny().with_mode(mode, c);
            let p: Params<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            check_params(&cfg, &p).unwrap();
            assert!(p.first_non_finite().is_none());
        }
    }

    #[test]
    fn decal_adds_two_vectors_and_starts_v_at_zero() {
        let base = ModelConfig::tiny().with_mode(EncoderMode::Baseline, 1);
        let decal = ModelConfig::tiny().with_mode(EncoderMode::Decal, 4);
        let pb: Params<f32> = init_params(&base, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let pd: Params<f32> = init_params(&decal, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pd.count() - pb.count(), 2 * base.d_model);
        assert!(pd.get("decal.v").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(pd.get("decal.latent_norm").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::tiny();
        c.d_kv = 4;
        assert!(c.validate().is_err());
        assert!(ModelConfig::tiny().with_mode(EncoderMode::Attnpool, 4).validate().is_err());
        assert!(ModelConfig::tiny().with_mode(EncoderMode::Baseline, 2).validate().is_err());
        let mut c = ModelConfig::tiny();
        c.num_buckets = 31;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.max_distance = c.num_buckets;
        assert!(c.validate().is_err());
    }

    #[test]
    fn check_params_reports_mismatch() {
        let cfg = ModelConfig::tiny();
        let mut p: Params<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        p.remove("decal.v");
        assert!(matches!(check_params(&cfg, &p), Err(ModelError::Incompatible(_))));
    }
}
