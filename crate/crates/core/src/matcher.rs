//! Category-aware, spatial-aware and base matchers, and matcher stacks.
//!
//! One matcher layer runs a self-attention per stream, gates the residual
//! sums, lets the search stream query the template through a
//! cross-attention, gates again and finishes both streams with a
//! feed-forward block. The gate decides the matcher flavour: channel
//! attention (classification), spatial attention (regression) or none.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    channel_attention, feed_forward, multi_head_attention, positional_encoding,
    spatial_attention, ChannelAttnParams, Dropout, FfnParams, LayerNorm, Linear,
    MultiHeadParams, SpatialAttnParams,
};
use crate::error::{config_err, contract, Result};
use crate::params::{path, ParamGroup, ParamStore};
use crate::types::{GridShape, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Channel,
    Spatial,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Residual sums feed the gates directly.
    Literal,
    /// Layer normalization after every residual sum.
    PostNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatcherStackConfig {
    pub depth: usize,
    pub gate_kind: GateKind,
    pub normalization_mode: NormalizationMode,
}

impl MatcherStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(config_err!("matcher depth must be at least 1"));
        }
        Ok(())
    }
}

/// Widths shared by every attention block of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
}

/// A residual gate built for one kind of matcher.
#[derive(Debug, Clone)]
pub enum Gate {
    Channel(ChannelAttnParams),
    Spatial(SpatialAttnParams),
    Identity,
}

impl Gate {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        kind: GateKind,
        dims: &BlockDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match kind {
            GateKind::Channel => Gate::Channel(ChannelAttnParams::build(
                store,
                prefix,
                dims.d_model,
                dims.reduction,
                rng,
            )?),
            GateKind::Spatial => {
                Gate::Spatial(SpatialAttnParams::build(store, prefix, dims.spatial_kernel, rng)?)
            }
            GateKind::None => Gate::Identity,
        })
    }

    pub fn kind(&self) -> GateKind {
        match self {
            Gate::Channel(_) => GateKind::Channel,
            Gate::Spatial(_) => GateKind::Spatial,
            Gate::Identity => GateKind::None,
        }
    }

    /// Unflattens to the token grid, gates, and flattens back.
    pub fn apply(&self, tokens: &TokenSequence) -> Result<TokenSequence> {
        let gated = match self {
            Gate::Identity => return Ok(tokens.clone()),
            Gate::Channel(p) => channel_attention(&tokens.unflatten_square()?, p)?,
            Gate::Spatial(p) => spatial_attention(&tokens.unflatten_square()?, p)?,
        };
        gated.flatten()
    }
}

/// Stream-specific query/key/value projections feeding one attention.
#[derive(Debug, Clone)]
pub struct QkvProjection {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl QkvProjection {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::build(store, &path(prefix, "q"), d, d, ParamGroup::Other, rng)?,
            k: Linear::build(store, &path(prefix, "k"), d, d, ParamGroup::Other, rng)?,
            v: Linear::build(store, &path(prefix, "v"), d, d, ParamGroup::Other, rng)?,
        })
    }
}

/// Projections plus multi-head attention.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub proj: QkvProjection,
    pub mha: MultiHeadParams,
}

impl AttentionBlock {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        dims: &BlockDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            proj: QkvProjection::build(store, &path(prefix, "proj"), dims.d_model, rng)?,
            mha: MultiHeadParams::build(store, &path(prefix, "mha"), dims.d_model, dims.heads, rng)?,
        })
    }

    /// `MultiHead(Q, K, V)` with positional encodings added to `Q` and `K`.
    pub fn attend(
        &self,
        query_src: &TokenSequence,
        kv_src: &TokenSequence,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> Result<TokenSequence> {
        let q = self.proj.q.forward(query_src.tensor())?.broadcast_add(query_pe)?;
        let k = self.proj.k.forward(kv_src.tensor())?.broadcast_add(key_pe)?;
        let v = self.proj.v.forward(kv_src.tensor())?;
        let out = multi_head_attention(
            &query_src.map_tensor(q)?,
            &TokenSequence::new(k)?,
            &TokenSequence::new(v)?,
            &self.mha,
        )?;
        query_src.map_tensor(out.into_tensor())
    }
}

#[derive(Debug, Clone)]
pub struct MatcherNorms {
    pub self_z: LayerNorm,
    pub self_x: LayerNorm,
    pub cross: LayerNorm,
    pub ffn_z: LayerNorm,
    pub ffn_x: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct MatcherParams {
    pub self_attn_z: AttentionBlock,
    pub self_attn_x: AttentionBlock,
    pub cross_attn: AttentionBlock,
    pub gate_z: Gate,
    pub gate_x: Gate,
    pub gate_cross: Gate,
    pub ffn_z: FfnParams,
    pub ffn_x: FfnParams,
    /// Present only in post-norm mode.
    pub norms: Option<MatcherNorms>,
}

impl MatcherParams {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        kind: GateKind,
        mode: NormalizationMode,
        dims: &BlockDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = dims.d_model;
        let norms = match mode {
            NormalizationMode::Literal => None,
            NormalizationMode::PostNorm => Some(MatcherNorms {
                self_z: LayerNorm::build(store, &path(prefix, "norm_self_z"), d, rng)?,
                self_x: LayerNorm::build(store, &path(prefix, "norm_self_x"), d, rng)?,
                cross: LayerNorm::build(store, &path(prefix, "norm_cross"), d, rng)?,
                ffn_z: LayerNorm::build(store, &path(prefix, "norm_ffn_z"), d, rng)?,
                ffn_x: LayerNorm::build(store, &path(prefix, "norm_ffn_x"), d, rng)?,
            }),
        };
        Ok(Self {
            self_attn_z: AttentionBlock::build(store, &path(prefix, "self_z"), dims, rng)?,
            self_attn_x: AttentionBlock::build(store, &path(prefix, "self_x"), dims, rng)?,
            cross_attn: AttentionBlock::build(store, &path(prefix, "cross"), dims, rng)?,
            gate_z: Gate::build(store, &path(prefix, "gate_z"), kind, dims, rng)?,
            gate_x: Gate::build(store, &path(prefix, "gate_x"), kind, dims, rng)?,
            gate_cross: Gate::build(store, &path(prefix, "gate_cross"), kind, dims, rng)?,
            ffn_z: FfnParams::build(store, &path(prefix, "ffn_z"), d, dims.d_ff, rng)?,
            ffn_x: FfnParams::build(store, &path(prefix, "ffn_x"), d, dims.d_ff, rng)?,
            norms,
        })
    }

    pub fn kind(&self) -> GateKind {
        self.gate_x.kind()
    }

    pub fn mode(&self) -> NormalizationMode {
        if self.norms.is_some() {
            NormalizationMode::PostNorm
        } else {
            NormalizationMode::Literal
        }
    }
}

/// Builds `cfg.depth` matcher layers named `prefix.0`, `prefix.1`, ...
pub fn build_stack(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &MatcherStackConfig,
    dims: &BlockDims,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MatcherParams>> {
    cfg.validate()?;
    (0..cfg.depth)
        .map(|i| {
            MatcherParams::build(
                store,
                &path(prefix, &i.to_string()),
                cfg.gate_kind,
                cfg.normalization_mode,
                dims,
                rng,
            )
        })
        .collect()
}

type PeKey = (usize, usize, usize, DType, String);

/// Cached positional encoding for a grid, shaped `(1, H*W, d)`.
pub fn grid_encoding(grid: GridShape, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    static CACHE: OnceLock<Mutex<HashMap<PeKey, Tensor>>> = OnceLock::new();
    let key = (grid.h, grid.w, d, dtype, format!("{device:?}"));
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = cache.lock().unwrap().get(&key) {
        return Ok(t.clone());
    }
    let t = positional_encoding(grid.h, grid.w, d, dtype, device)?.into_tensor();
    cache.lock().unwrap().insert(key, t.clone());
    Ok(t)
}

pub(crate) fn encoding_for(tokens: &TokenSequence) -> Result<Tensor> {
    let grid = tokens
        .grid()
        .ok_or_else(|| contract!("positional encoding needs grid provenance"))?;
    grid_encoding(
        grid,
        tokens.width(),
        tokens.tensor().dtype(),
        tokens.tensor().device(),
    )
}

pub(crate) fn residual(
    base: &TokenSequence,
    update: &TokenSequence,
    norm: Option<&LayerNorm>,
) -> Result<TokenSequence> {
    let mut sum = (base.tensor() + update.tensor())?;
    if let Some(n) = norm {
        sum = n.forward(&sum)?;
    }
    base.map_tensor(sum)
}

fn ffn_step(
    x: &TokenSequence,
    p: &FfnParams,
    norm: Option<&LayerNorm>,
    dropout: Option<&mut Dropout>,
) -> Result<TokenSequence> {
    let out = feed_forward(x, p, dropout)?;
    match norm {
        Some(n) => out.map_tensor(n.forward(out.tensor())?),
        None => Ok(out),
    }
}

/// One matcher layer; returns the updated template and search streams.
pub fn matcher_layer(
    v_z: &TokenSequence,
    v_x: &TokenSequence,
    p: &MatcherParams,
    kind: GateKind,
    mut dropout: Option<&mut Dropout>,
) -> Result<(TokenSequence, TokenSequence)> {
    if p.kind() != kind {
        return Err(contract!(
            "matcher parameters are {:?}-gated, {:?} requested",
            p.kind(),
            kind
        ));
    }
    if v_z.width() != v_x.width() || v_z.width() != p.self_attn_z.mha.d_model {
        return Err(contract!(
            "stream widths {} / {} do not match model width {}",
            v_z.width(),
            v_x.width(),
            p.self_attn_z.mha.d_model
        ));
    }
    if kind != GateKind::None {
        for s in [v_z, v_x] {
            if !s.grid().is_some_and(|g| g.is_square()) {
                return Err(contract!(
                    "gated matcher needs square token grids, got {} tokens with grid {:?}",
                    s.len(),
                    s.grid()
                ));
            }
        }
    }
    let pe_z = encoding_for(v_z)?;
    let pe_x = encoding_for(v_x)?;
    let norms = p.norms.as_ref();

    let sa_z = p.self_attn_z.attend(v_z, v_z, &pe_z, &pe_z)?;
    let z1 = p.gate_z.apply(&residual(v_z, &sa_z, norms.map(|n| &n.self_z))?)?;
    let sa_x = p.self_attn_x.attend(v_x, v_x, &pe_x, &pe_x)?;
    let x1 = p.gate_x.apply(&residual(v_x, &sa_x, norms.map(|n| &n.self_x))?)?;

    let ca = p.cross_attn.attend(&x1, &z1, &pe_x, &pe_z)?;
    let x2 = p.gate_cross.apply(&residual(&x1, &ca, norms.map(|n| &n.cross))?)?;

    let z_out = ffn_step(&z1, &p.ffn_z, norms.map(|n| &n.ffn_z), dropout.as_deref_mut())?;
    let x_out = ffn_step(&x2, &p.ffn_x, norms.map(|n| &n.ffn_x), dropout.as_deref_mut())?;
    Ok((z_out, x_out))
}

/// Threads both streams through the stack and returns the final search
/// stream as the raw similarity tokens.
pub fn run_matcher_stack(
    v_z: &TokenSequence,
    v_x: &TokenSequence,
    cfg: &MatcherStackConfig,
    params: &[MatcherParams],
    mut dropout: Option<&mut Dropout>,
) -> Result<TokenSequence> {
    cfg.validate()?;
    if params.len() != cfg.depth {
        return Err(config_err!(
            "stack depth {} but {} matcher layers supplied",
            cfg.depth,
            params.len()
        ));
    }
    if let Some(p) = params.iter().find(|p| p.mode() != cfg.normalization_mode) {
        return Err(config_err!(
            "matcher built for {:?} normalization, stack configured for {:?}",
            p.mode(),
            cfg.normalization_mode
        ));
    }
    let mut z = v_z.clone();
    let mut x = v_x.clone();
    for p in params {
        let (nz, nx) = matcher_layer(&z, &x, p, cfg.gate_kind, dropout.as_deref_mut())?;
        z = nz;
        x = nx;
    }
    Ok(x)
}
