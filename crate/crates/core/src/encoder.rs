//! Compressing encoders: DeCAL latents, the AttnPool comparison and the
//! uncompressed baseline, all returning one representation type.
//!
//! DeCAL builds `l = RMSNorm(v + meanpool(x, C))`, runs the ordinary encoder
//! over `l ⊕ x` with full bidirectional attention, and keeps only the `m`
//! latent rows.

use std::ops::Range;

use crate::model::{EncoderMode, Forward, ModelConfig, ModelError};
use crate::tensor::{layer_norm, Float, Graph, Params, Tensor, Var};
use crate::tokenizer::{TokenId, PAD_ID};

type Result<T> = std::result::Result<T, ModelError>;

/// `ceil(n / c)`.
pub fn latent_len(n: usize, c: usize) -> usize {
    n.div_ceil(c.max(1))
}

/// Input index ranges pooled into each latent; the last may be short.
pub fn windows(n: usize, c: usize) -> Vec<Range<usize>> {
    let c = c.max(1);
    (0..latent_len(n, c)).map(|i| i * c..((i + 1) * c).min(n)).collect()
}

/// Floor of the mean position index in each window.
pub fn latent_positions(n: usize, c: usize, positions: &[usize]) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(ModelError::EmptyInput);
    }
    if c == 0 {
        return Err(ModelError::Config("compression ratio must be at least 1".into()));
    }
    if positions.len() != n {
        return Err(ModelError::Incompatible(format!("{} positions for {n} tokens", positions.len())));
    }
    Ok(windows(n, c)
        .into_iter()
        .map(|w| positions[w.clone()].iter().sum::<usize>() / w.len())
        .collect())
}

/// Window layout for one input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentSpec {
    pub n: usize,
    pub c: usize,
    pub m: usize,
    pub windows: Vec<Range<usize>>,
    pub latent_positions: Vec<usize>,
    /// True where the window holds at least one real token.
    pub latent_mask: Vec<bool>,
}

impl LatentSpec {
    /// `mask[i]` is true for real tokens; `None` means no padding.
    pub fn new(n: usize, c: usize, mask: Option<&[bool]>) -> Result<Self> {
        let positions: Vec<usize> = (0..n).collect();
        let latent_positions = latent_positions(n, c, &positions)?;
        if let Some(mk) = mask {
            if mk.len() != n {
                return Err(ModelError::Incompatible(format!("{} mask entries for {n} tokens", mk.len())));
            }
        }
        let windows = windows(n, c);
        let latent_mask = windows
            .iter()
            .map(|w| mask.map_or(true, |mk| mk[w.clone()].iter().any(|&b| b)))
            .collect();
        Ok(Self {
            n,
            c,
            m: windows.len(),
            windows,
            latent_positions,
            latent_mask,
        })
    }

    /// Mean-pool weights per window, pads excluded.
    fn pool_weights<T: Float>(&self, mask: Option<&[bool]>) -> Vec<Vec<(usize, T)>> {
        self.windows
            .iter()
            .map(|w| {
                let members: Vec<usize> = w.clone().filter(|&j| mask.map_or(true, |mk| mk[j])).collect();
                let wt = T::lit(1.0 / members.len().max(1) as f64);
                members.into_iter().map(|j| (j, wt)).collect()
            })
            .collect()
    }
}

/// Strided mean pool with window `c`. Pad rows (mask false) are left out of
/// the mean; an all-pad window pools to zero.
pub fn pool_inputs<T: Float>(x: &Tensor<T>, c: usize, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let spec = LatentSpec::new(x.rows(), c, mask)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let out = g.pool(xv, spec.pool_weights(mask))?;
    Ok(g.value(out).clone())
}

/// `RMSNorm(v + pool_inputs(x, c))` with the given norm scale.
pub fn build_latent<T: Float>(x: &Tensor<T>, c: usize, v: &Tensor<T>, norm_scale: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let pooled = pool_inputs(x, c, mask)?;
    let d = pooled.last_dim();
    if v.numel() != d {
        return Err(ModelError::Incompatible(format!("v has {} entries, expected {d}", v.numel())));
    }
    let mut shifted = pooled;
    for row in shifted.data_mut().chunks_mut(d) {
        for (a, &b) in row.iter_mut().zip(v.data()) {
            *a += b;
        }
    }
    Ok(layer_norm(&shifted, norm_scale)?)
}

/// Encoder output inside a graph, before it is copied out.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub out: Var,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
    pub source_length: usize,
    pub compression: usize,
}

/// Compressed encoder output for one input.
#[derive(Clone, PartialEq)]
pub struct CompressedRepresentation<T> {
    pub vectors: Tensor<T>,
    pub latent_positions: Vec<usize>,
    pub mask: Vec<bool>,
    pub source_length: usize,
    pub compression: usize,
}

impl<T: Float> std::fmt::Debug for CompressedRepresentation<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompressedRepresentation")
            .field("vectors", &self.vectors)
            .field("latent_positions", &self.latent_positions)
            .field("mask", &self.mask)
            .field("source_length", &self.source_length)
            .field("compression", &self.compression)
            .finish()
    }
}

impl<T: Float> CompressedRepresentation<T> {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_input(ids: &[TokenId], mask: &[bool]) -> Result<()> {
    if ids.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if mask.len() != ids.len() {
        return Err(ModelError::Incompatible(format!("{} mask entries for {} tokens", mask.len(), ids.len())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::AllMasked);
    }
    Ok(())
}

/// Real-token mask derived from pad ids.
pub fn pad_mask(ids: &[TokenId]) -> Vec<bool> {
    ids.iter().map(|&t| t != PAD_ID).collect()
}

/// DeCAL with the pooled embeddings and the appended token rows supplied as
/// separate nodes; normally both are the same embedding lookup.
pub fn decal_graph<T: Float>(fwd: &mut Forward, g: &mut Graph<T>, x_pool: Var, x_seq: Var, mask: &[bool]) -> Result<Encoded> {
    let n = g.value(x_seq).rows();
    let c = fwd.cfg.compression_ratio;
    let spec = LatentSpec::new(n, c, Some(mask))?;
    let pooled = g.pool(x_pool, spec.pool_weights(Some(mask)))?;
    let shifted = g.add_row(pooled, fwd.p("decal.v")?)?;
    let latents = g.rms_norm(shifted, fwd.p("decal.latent_norm")?)?;
    let joint = g.concat_rows(&[latents, x_seq])?;
    let positions: Vec<usize> = spec.latent_positions.iter().copied().chain(0..n).collect();
    let joint_mask: Vec<bool> = spec.latent_mask.iter().chain(mask).copied().collect();
    let h = fwd.encoder(g, joint, &positions, &joint_mask)?;
    let out = g.slice_rows(h, 0, spec.m)?;
    Ok(Encoded {
        out,
        positions: spec.latent_positions,
        mask: spec.latent_mask,
        source_length: n,
        compression: c,
    })
}

fn baseline_graph<T: Float>(fwd: &mut Forward, g: &mut Graph<T>, x: Var, mask: &[bool]) -> Result<Encoded> {
    let n = g.value(x).rows();
    let positions: Vec<usize> = (0..n).collect();
    let out = fwd.encoder(g, x, &positions, mask)?;
    Ok(Encoded {
        out,
        positions,
        mask: mask.to_vec(),
        source_length: n,
        compression: 1,
    })
}

fn attnpool_graph<T: Float>(fwd: &mut Forward, g: &mut Graph<T>, x: Var, mask: &[bool]) -> Result<Encoded> {
    let h = baseline_graph(fwd, g, x, mask)?;
    let spec = LatentSpec::new(h.source_length, 2, Some(mask))?;
    let q = g.pool(h.out, spec.pool_weights(Some(mask)))?;
    let a = fwd.multi_head(g, "attnpool", q, h.out, None, mask, false)?;
    let r = g.add(q, a)?;
    let out = g.rms_norm(r, fwd.p("attnpool.norm")?)?;
    Ok(Encoded {
        out,
        positions: spec.latent_positions,
        mask: spec.latent_mask,
        source_length: h.source_length,
        compression: 2,
    })
}

/// Embeds `ids` and runs whichever encoder the config selects.
pub fn encode_graph<T: Float>(fwd: &mut Forward, g: &mut Graph<T>, ids: &[TokenId], mask: &[bool]) -> Result<Encoded> {
    check_input(ids, mask)?;
    let x = fwd.embed(g, ids)?;
    match fwd.cfg.encoder_mode {
        EncoderMode::Baseline => baseline_graph(fwd, g, x, mask),
        EncoderMode::Decal => decal_graph(fwd, g, x, x, mask),
        EncoderMode::Attnpool => attnpool_graph(fwd, g, x, mask),
    }
}

fn run<T: Float>(cfg: &ModelConfig, params: &Params<T>, ids: &[TokenId], mask: &[bool]) -> Result<(CompressedRepresentation<T>, u64)> {
    cfg.validate()?;
    let mut g = Graph::new();
    let b = g.bind(params)?;
    let enc = encode_graph(&mut Forward::new(cfg, &b), &mut g, ids, mask)?;
    let rep = CompressedRepresentation {
        vectors: g.value(enc.out).clone(),
        latent_positions: enc.positions,
        mask: enc.mask,
        source_length: enc.source_length,
        compression: enc.compression,
    };
    Ok((rep, g.matmul_flops()))
}

fn expect_mode(cfg: &ModelConfig, mode: EncoderMode) -> Result<()> {
    if cfg.encoder_mode != mode {
        return Err(ModelError::Config(format!("encoder mode is {}, expected {mode}", cfg.encoder_mode)));
    }
    Ok(())
}

pub fn decal_encode<T: Float>(cfg: &ModelConfig, params: &Params<T>, ids: &[TokenId], mask: &[bool]) -> Result<CompressedRepresentation<T>> {
    expect_mode(cfg, EncoderMode::Decal)?;
    Ok(run(cfg, params, ids, mask)?.0)
}

pub fn attnpool_encode<T: Float>(cfg: &ModelConfig, params: &Params<T>, ids: &[TokenId], mask: &[bool]) -> Result<CompressedRepresentation<T>> {
    expect_mode(cfg, EncoderMode::Attnpool)?;
    Ok(run(cfg, params, ids, mask)?.0)
}

pub fn baseline_encode<T: Float>(cfg: &ModelConfig, params: &Params<T>, ids: &[TokenId], mask: &[bool]) -> Result<CompressedRepresentation<T>> {
    expect_mode(cfg, EncoderMode::Baseline)?;
    Ok(run(cfg, params, ids, mask)?.0)
}

/// Dispatches on `cfg.encoder_mode`.
pub fn encode<T: Float>(cfg: &ModelConfig, params: &Params<T>, ids: &[TokenId], mask: &[bool]) -> Result<CompressedRepresentation<T>> {
    Ok(run(cfg, params, ids, mask)?.0)
}

/// Multiply-add FLOPs (2 per MAC) of one encoder forward over `ids`.
pub fn encoder_flops<T: Float>(cfg: &ModelConfig, params: &Params<T>, ids: &[TokenId]) -> Result<u64> {
    let mask = pad_mask(ids);
    Ok(run(cfg, params, ids, &mask)?.1)
}
