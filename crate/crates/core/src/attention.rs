//! Attention building blocks: channel and spatial gates, multi-head
//! scaled dot-product attention, 2-D sinusoidal positional encoding and the
//! residual feed-forward block used inside the matchers.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, contract, Result};
use crate::params::{path, Init, ParamGroup, ParamStore};
use crate::types::{FeatureGrid, GridShape, TokenSequence};

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;
pub const PE_TEMPERATURE: f64 = 10000.0;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shared MLP of the channel gate: `C -> C/r -> C` with a ReLU between.
#[derive(Debug, Clone)]
pub struct ChannelAttnParams {
    pub mlp_w1: Var,
    pub mlp_w2: Var,
    pub reduction: usize,
}

impl ChannelAttnParams {
    /// The output layer starts at zero so the gate opens at exactly 0.5.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(config_err!(
                "channel reduction {reduction} must divide {channels} channels"
            ));
        }
        let hidden = channels / reduction;
        let mlp_w1 = store.create(
            path(prefix, "mlp_w1"),
            (channels, hidden),
            Init::FanIn(channels),
            ParamGroup::Other,
            rng,
        )?;
        let mlp_w2 = store.create(
            path(prefix, "mlp_w2"),
            (hidden, channels),
            Init::Zeros,
            ParamGroup::Other,
            rng,
        )?;
        Ok(Self {
            mlp_w1,
            mlp_w2,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.mlp_w1.dims()[0]
    }

    fn mlp(&self, pooled: &Tensor) -> Result<Tensor> {
        Ok(pooled
            .matmul(self.mlp_w1.as_tensor())?
            .relu()?
            .matmul(self.mlp_w2.as_tensor())?)
    }
}

/// Single-output convolution shared by the max- and mean-pooled maps.
#[derive(Debug, Clone)]
pub struct SpatialAttnParams {
    /// `(1, 1, k, k)`
    pub conv_kernel: Var,
    /// `(1,)`
    pub conv_bias: Var,
    pub kernel_size: usize,
}

impl SpatialAttnParams {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        kernel_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        check_odd_kernel(kernel_size)?;
        let conv_kernel = store.create(
            path(prefix, "conv_kernel"),
            (1, 1, kernel_size, kernel_size),
            Init::Zeros,
            ParamGroup::Other,
            rng,
        )?;
        let conv_bias = store.create(
            path(prefix, "conv_bias"),
            1,
            Init::Zeros,
            ParamGroup::Other,
            rng,
        )?;
        Ok(Self {
            conv_kernel,
            conv_bias,
            kernel_size,
        })
    }

    fn conv(&self, map: &Tensor) -> Result<Tensor> {
        let pad = self.kernel_size / 2;
        let out = map.conv2d(self.conv_kernel.as_tensor(), pad, 1, 1, 1)?;
        Ok(out.broadcast_add(&self.conv_bias.as_tensor().reshape((1, 1, 1, 1))?)?)
    }
}

fn check_odd_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(config_err!("spatial attention kernel must be odd, got {k}"));
    }
    Ok(())
}

/// Per-head projections stored concatenated along the output axis:
/// columns `i*d_k .. (i+1)*d_k` of `w_q` are head `i`'s `W_i^Q`.
#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_model: usize,
}

impl MultiHeadParams {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(config_err!(
                "{heads} heads do not divide model width {d_model}"
            ));
        }
        let d_k = d_model / heads;
        let mut mk = |name: &str, rows: usize, cols: usize| {
            store.create(
                path(prefix, name),
                (rows, cols),
                Init::FanIn(rows),
                ParamGroup::Other,
                rng,
            )
        };
        Ok(Self {
            w_q: mk("w_q", d_model, heads * d_k)?,
            w_k: mk("w_k", d_model, heads * d_k)?,
            w_v: mk("w_v", d_model, heads * d_k)?,
            w_o: mk("w_o", heads * d_k, d_model)?,
            heads,
            d_k,
            d_v: d_k,
            d_model,
        })
    }
}

/// Fully connected layer `x W + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `(d_in, d_out)`
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::build_with(store, prefix, d_in, d_out, Init::FanIn(d_in), group, rng)
    }

    pub fn build_with(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.create(path(prefix, "weight"), (d_in, d_out), init, group, rng)?;
        let bias = store.create(path(prefix, "bias"), d_out, Init::Zeros, group, rng)?;
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies to the last axis of an arbitrary-rank tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d_in = self.d_in();
        let dims = x.dims().to_vec();
        if dims.last() != Some(&d_in) {
            return Err(contract!(
                "linear layer expects width {d_in}, got shape {dims:?}"
            ));
        }
        let rows = x.elem_count() / d_in;
        let y = x
            .reshape((rows, d_in))?
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dims()[1];
        Ok(y.reshape(out_dims)?)
    }
}

/// Residual feed-forward block `x + W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub inner: Linear,
    pub outer: Linear,
}

impl FfnParams {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_ff == 0 {
            return Err(config_err!("feed-forward width must be positive"));
        }
        Ok(Self {
            inner: Linear::build(store, &path(prefix, "w1"), d, d_ff, ParamGroup::Other, rng)?,
            outer: Linear::build(store, &path(prefix, "w2"), d_ff, d, ParamGroup::Other, rng)?,
        })
    }
}

/// Layer normalization over the token width with a learned affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.create(path(prefix, "gamma"), d, Init::Ones, ParamGroup::Other, rng)?,
            beta: store.create(path(prefix, "beta"), d, Init::Zeros, ParamGroup::Other, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Inverted dropout driven by a seeded generator.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.rate <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    scale as f32
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // the shift cancels analytically, so it carries no gradient
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// The channel gate values `sigmoid(MLP(maxpool) + MLP(avgpool))`, `(batch, C)`.
pub fn channel_gate(x: &FeatureGrid, p: &ChannelAttnParams) -> Result<Tensor> {
    if x.channels() != p.channels() {
        return Err(contract!(
            "channel attention built for {} channels, input has {}",
            p.channels(),
            x.channels()
        ));
    }
    let (b, c, h, w) = x.tensor().dims4()?;
    let flat = x.tensor().reshape((b, c, h * w))?;
    let max_pool = flat.max(D::Minus1)?;
    let avg_pool = flat.mean(D::Minus1)?;
    let logits = (p.mlp(&max_pool)? + p.mlp(&avg_pool)?)?;
    Ok(candle_nn::ops::sigmoid(&logits)?)
}

/// Channel-wise gating of a feature grid.
pub fn channel_attention(x: &FeatureGrid, p: &ChannelAttnParams) -> Result<FeatureGrid> {
    let gate = channel_gate(x, p)?;
    let (b, c) = gate.dims2()?;
    let out = x.tensor().broadcast_mul(&gate.reshape((b, c, 1, 1))?)?;
    FeatureGrid::new(out)
}

/// The spatial gate `sigmoid(Conv(maxpool_c) + Conv(avgpool_c))`, `(batch, 1, H, W)`.
pub fn spatial_gate(x: &FeatureGrid, p: &SpatialAttnParams) -> Result<Tensor> {
    check_odd_kernel(p.kernel_size)?;
    if p.kernel_size > x.height().min(x.width()) {
        return Err(contract!(
            "spatial kernel {} exceeds the {}x{} grid",
            p.kernel_size,
            x.height(),
            x.width()
        ));
    }
    let max_map = x.tensor().max_keepdim(1)?;
    let avg_map = x.tensor().mean_keepdim(1)?;
    let logits = (p.conv(&max_map)? + p.conv(&avg_map)?)?;
    Ok(candle_nn::ops::sigmoid(&logits)?)
}

/// Pixel-wise gating of a feature grid, broadcast over channels.
pub fn spatial_attention(x: &FeatureGrid, p: &SpatialAttnParams) -> Result<FeatureGrid> {
    let gate = spatial_gate(x, p)?;
    FeatureGrid::new(x.tensor().broadcast_mul(&gate)?)
}

/// Output of [`multi_head_attention_with_weights`].
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: TokenSequence,
    /// `(batch, heads, n_q, n_k)`, rows sum to one.
    pub weights: Tensor,
}

/// Multi-head scaled dot-product attention.
pub fn multi_head_attention(
    q: &TokenSequence,
    k: &TokenSequence,
    v: &TokenSequence,
    p: &MultiHeadParams,
) -> Result<TokenSequence> {
    Ok(multi_head_attention_with_weights(q, k, v, p)?.output)
}

pub fn multi_head_attention_with_weights(
    q: &TokenSequence,
    k: &TokenSequence,
    v: &TokenSequence,
    p: &MultiHeadParams,
) -> Result<AttentionOutput> {
    if k.len() != v.len() {
        return Err(contract!(
            "key and value lengths differ: {} vs {}",
            k.len(),
            v.len()
        ));
    }
    for (name, s) in [("query", q), ("key", k), ("value", v)] {
        if s.width() != p.d_model {
            return Err(contract!(
                "{name} width {} does not match model width {}",
                s.width(),
                p.d_model
            ));
        }
    }
    if q.batch() != k.batch() || k.batch() != v.batch() {
        return Err(contract!("query, key and value batch sizes differ"));
    }
    let b = q.batch();
    let (nq, nk, h) = (q.len(), k.len(), p.heads);
    let split = |x: &Tensor, w: &Var, n: usize, dh: usize| -> Result<Tensor> {
        Ok(x
            .reshape((b * n, p.d_model))?
            .matmul(w.as_tensor())?
            .reshape((b, n, h, dh))?
            .transpose(1, 2)?
            .contiguous()?)
    };
    let qh = split(q.tensor(), &p.w_q, nq, p.d_k)?;
    let kh = split(k.tensor(), &p.w_k, nk, p.d_k)?;
    let vh = split(v.tensor(), &p.w_v, nk, p.d_v)?;
    let scale = 1.0 / (p.d_k as f64).sqrt();
    let scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
    let weights = softmax_last(&scores)?;
    let heads = weights
        .matmul(&vh)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * nq, h * p.d_v))?;
    let out = heads.matmul(p.w_o.as_tensor())?.reshape((b, nq, p.d_model))?;
    Ok(AttentionOutput {
        output: q.map_tensor(out)?,
        weights,
    })
}

/// Raw 2-D sinusoidal encoding values, row-major over the grid.
///
/// The first `d/2` channels encode the row index and the last `d/2` the
/// column index; within each half, channel `2j` is `sin(pos / T^(4j/d))`
/// and channel `2j+1` the matching cosine.
pub fn positional_encoding_values(grid_h: usize, grid_w: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(config_err!(
            "positional encoding width must be a positive multiple of 4, got {d}"
        ));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(config_err!("positional encoding grid must be non-empty"));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|j| PE_TEMPERATURE.powf(2.0 * j as f64 / half as f64))
        .collect();
    let mut out = Vec::with_capacity(grid_h * grid_w * d);
    for row in 0..grid_h {
        for col in 0..grid_w {
            for pos in [row as f64, col as f64] {
                for f in &freqs {
                    let a = pos / f;
                    out.push(a.sin());
                    out.push(a.cos());
                }
            }
        }
    }
    Ok(out)
}

/// Positional encoding as a one-element batch of `(H*W, d)` tokens.
pub fn positional_encoding(
    grid_h: usize,
    grid_w: usize,
    d: usize,
    dtype: DType,
    device: &Device,
) -> Result<TokenSequence> {
    let values = positional_encoding_values(grid_h, grid_w, d)?;
    let t = Tensor::from_vec(values, (1, grid_h * grid_w, d), device)?.to_dtype(dtype)?;
    TokenSequence::with_grid(t, GridShape::new(grid_h, grid_w))
}

/// Residual feed-forward block; `dropout` applies to the hidden layer.
pub fn feed_forward(
    x: &TokenSequence,
    p: &FfnParams,
    dropout: Option<&mut Dropout>,
) -> Result<TokenSequence> {
    if x.width() != p.inner.d_in() {
        return Err(contract!(
            "feed-forward expects width {}, got {}",
            p.inner.d_in(),
            x.width()
        ));
    }
    let mut hidden = p.inner.forward(x.tensor())?.relu()?;
    if let Some(d) = dropout {
        hidden = d.apply(&hidden)?;
    }
    let out = (x.tensor() + p.outer.forward(&hidden)?)?;
    x.map_tensor(out)
}
