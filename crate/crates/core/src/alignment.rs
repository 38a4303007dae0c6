//! Dual alignment of classification and regression similarity tokens.
//!
//! Stage one lets the classification tokens attend over the stacked
//! `[s_c; s_p]` sequence and applies a channel gate. Stage two restacks
//! with the *updated* classification tokens and lets the regression tokens
//! attend over it before a spatial gate.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    channel_attention, spatial_attention, ChannelAttnParams, LayerNorm, SpatialAttnParams,
};
use crate::error::{contract, Result};
use crate::matcher::{encoding_for, residual, AttentionBlock, BlockDims, NormalizationMode};
use crate::params::{path, ParamStore};
use crate::types::TokenSequence;

#[derive(Debug, Clone)]
pub struct AlignmentParams {
    pub cross_attn_c: AttentionBlock,
    pub cross_attn_p: AttentionBlock,
    pub gate_c: ChannelAttnParams,
    pub gate_p: SpatialAttnParams,
    /// Post-norm mode only: one per residual sum.
    pub norms: Option<(LayerNorm, LayerNorm)>,
}

impl AlignmentParams {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        mode: NormalizationMode,
        dims: &BlockDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = dims.d_model;
        let norms = match mode {
            NormalizationMode::Literal => None,
            NormalizationMode::PostNorm => Some((
                LayerNorm::build(store, &path(prefix, "norm_c"), d, rng)?,
                LayerNorm::build(store, &path(prefix, "norm_p"), d, rng)?,
            )),
        };
        Ok(Self {
            cross_attn_c: AttentionBlock::build(store, &path(prefix, "cross_c"), dims, rng)?,
            cross_attn_p: AttentionBlock::build(store, &path(prefix, "cross_p"), dims, rng)?,
            gate_c: ChannelAttnParams::build(store, &path(prefix, "gate_c"), d, dims.reduction, rng)?,
            gate_p: SpatialAttnParams::build(store, &path(prefix, "gate_p"), dims.spatial_kernel, rng)?,
            norms,
        })
    }
}

fn stack_rows(a: &TokenSequence, b: &TokenSequence) -> Result<TokenSequence> {
    TokenSequence::new(Tensor::cat(&[a.tensor(), b.tensor()], 1)?)
}

/// Returns the aligned `(s_c', s_p')`.
pub fn dual_align(
    s_c: &TokenSequence,
    s_p: &TokenSequence,
    p: &AlignmentParams,
) -> Result<(TokenSequence, TokenSequence)> {
    if s_c.len() != s_p.len() {
        return Err(contract!(
            "classification and regression token counts differ: {} vs {}",
            s_c.len(),
            s_p.len()
        ));
    }
    if s_c.width() != s_p.width() {
        return Err(contract!(
            "classification and regression widths differ: {} vs {}",
            s_c.width(),
            s_p.width()
        ));
    }
    if s_c.grid() != s_p.grid() {
        return Err(contract!("similarity tokens come from different grids"));
    }
    let pe = encoding_for(s_c)?;
    let pe_stacked = Tensor::cat(&[&pe, &pe], 1)?;
    let (norm_c, norm_p) = match &p.norms {
        Some((c, q)) => (Some(c), Some(q)),
        None => (None, None),
    };

    let s_m = stack_rows(s_c, s_p)?;
    let upd_c = p.cross_attn_c.attend(s_c, &s_m, &pe, &pe_stacked)?;
    let sum_c = residual(s_c, &upd_c, norm_c)?;
    let s_c_out = channel_attention(&sum_c.unflatten_square()?, &p.gate_c)?.flatten()?;

    let s_m2 = stack_rows(&s_c_out, s_p)?;
    let upd_p = p.cross_attn_p.attend(s_p, &s_m2, &pe, &pe_stacked)?;
    let sum_p = residual(s_p, &upd_p, norm_p)?;
    let s_p_out = spatial_attention(&sum_p.unflatten_square()?, &p.gate_p)?.flatten()?;
    Ok((s_c_out, s_p_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FeatureGrid;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};

    fn dims() -> BlockDims {
        BlockDims {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            reduction: 2,
            spatial_kernel: 3,
        }
    }

    fn tokens(side: usize, seed: u64) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..side * side * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureGrid::from_hwc(&data, side, side, 8, DType::F64, &Device::Cpu)
            .unwrap()
            .flatten()
            .unwrap()
    }

    #[test]
    fn zero_weights_halve_both_streams() {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AlignmentParams::build(&mut store, "a", NormalizationMode::Literal, &dims(), &mut rng).unwrap();
        for (_, var, _) in store.iter() {
            var.set(&var.zeros_like().unwrap()).unwrap();
        }
        let (c, s) = (tokens(3, 1), tokens(3, 2));
        let (co, so) = dual_align(&c, &s, &p).unwrap();
        for (a, b) in co.to_rows(0).unwrap().iter().zip(c.to_rows(0).unwrap()) {
            assert_eq!(*a, 0.5 * b);
        }
        for (a, b) in so.to_rows(0).unwrap().iter().zip(s.to_rows(0).unwrap()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn shapes_preserved() {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AlignmentParams::build(&mut store, "a", NormalizationMode::PostNorm, &dims(), &mut rng).unwrap();
        for side in [3, 4, 8] {
            let (co, so) = dual_align(&tokens(side, 1), &tokens(side, 2), &p).unwrap();
            assert_eq!(co.tensor().dims(), &[1, side * side, 8]);
            assert_eq!(so.tensor().dims(), &[1, side * side, 8]);
        }
    }

    #[test]
    fn row_count_mismatch_rejected() {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AlignmentParams::build(&mut store, "a", NormalizationMode::Literal, &dims(), &mut rng).unwrap();
        assert!(matches!(
            dual_align(&tokens(3, 1), &tokens(4, 2), &p),
            Err(crate::Error::Contract(_))
        ));
    }
}
