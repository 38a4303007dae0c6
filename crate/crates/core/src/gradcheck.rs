//! Central finite differences against backpropagated gradients, in f64.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{dual_align, AlignmentParams};
use crate::attention::{
    channel_attention, multi_head_attention, spatial_attention, ChannelAttnParams, MultiHeadParams,
    SpatialAttnParams,
};
use crate::backbone::BackboneConfig;
use crate::error::{contract, Result};
use crate::losses::{
    assign_labels, cg_reg_loss_with, cls_guidance, pg_cls_loss_with, reg_guidance, ClsLossKind, LabelAssignment,
    LossWeights, RegLossKind,
};
use crate::matcher::{matcher_layer, BlockDims, GateKind, MatcherParams, NormalizationMode};
use crate::model::{MapNet, MatcherConfig, ModelConfig};
use crate::params::ParamStore;
use crate::types::{BBox, BoxFrame, FeatureGrid, GridShape, TokenSequence};

pub const STEP: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;
const PARAM_BOUND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Channel,
    Spatial,
    Mha,
    Matcher,
    Alignment,
    PgCls,
    CgReg,
    Full,
}

impl Block {
    pub const ALL: [Block; 8] = [
        Block::Channel,
        Block::Spatial,
        Block::Mha,
        Block::Matcher,
        Block::Alignment,
        Block::PgCls,
        Block::CgReg,
        Block::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Block::Channel => "channel",
            Block::Spatial => "spatial",
            Block::Mha => "mha",
            Block::Matcher => "matcher",
            Block::Alignment => "alignment",
            Block::PgCls => "pg_cls",
            Block::CgReg => "cg_reg",
            Block::Full => "full",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Block {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Block::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Block::ALL.iter().map(|b| b.name()).collect();
                format!("unknown block {s:?}; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: Block,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn read(v: &Var) -> Result<Vec<f64>> {
    Ok(v.as_tensor().flatten_all()?.to_vec1::<f64>()?)
}

fn write(v: &Var, vals: Vec<f64>) -> Result<()> {
    v.set(&Tensor::from_vec(vals, v.shape(), v.device())?)?;
    Ok(())
}

fn scalar(f: &dyn Fn() -> Result<Tensor>) -> Result<f64> {
    Ok(f()?.to_scalar::<f64>()?)
}

/// Compares gradients of `f` with respect to up to `per_var` sampled
/// coordinates of every variable.
pub fn compare(vars: &[Var], f: &dyn Fn() -> Result<Tensor>, per_var: usize, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let grads = f()?.backward()?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for v in vars {
        let base = read(v)?;
        let analytic = match grads.get(v) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let mut idx: Vec<usize> = (0..base.len()).collect();
        if idx.len() > per_var {
            for i in 0..per_var {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(per_var);
        }
        for i in idx {
            let mut p = base.clone();
            p[i] = base[i] + STEP;
            write(v, p.clone())?;
            let up = scalar(f)?;
            p[i] = base[i] - STEP;
            write(v, p)?;
            let down = scalar(f)?;
            write(v, base.clone())?;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i], numeric));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn random_var(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu)?)?)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// `sum(out * R)` for a fixed random `R`, so every output coordinate matters.
fn project(out: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok((out * r)?.sum_all()?)
}

fn tokens(v: &Var, side: usize) -> Result<TokenSequence> {
    TokenSequence::with_grid(v.as_tensor().clone(), GridShape::square(side))
}

fn dims() -> BlockDims {
    BlockDims {
        d_model: 8,
        heads: 2,
        d_ff: 12,
        reduction: 2,
        spatial_kernel: 3,
    }
}

fn with_inputs(inputs: &[&Var], s: &ParamStore) -> Vec<Var> {
    inputs.iter().map(|v| (*v).clone()).chain(s.vars()).collect()
}

fn unit_gt() -> BBox {
    BBox::from_corners(0.15, 0.2, 0.8, 0.7, BoxFrame::NormalizedSearch)
}

/// Sorted corner boxes in (0, 1) as a `(1, n, 4)` variable.
fn box_var(n: usize, rng: &mut ChaCha8Rng) -> Result<Var> {
    let mut v = Vec::with_capacity(n * 4);
    for _ in 0..n {
        let x1 = rng.random_range(0.05..0.45);
        let y1 = rng.random_range(0.05..0.45);
        v.extend([x1, y1, x1 + rng.random_range(0.2..0.5), y1 + rng.random_range(0.2..0.5)]);
    }
    Ok(Var::from_tensor(&Tensor::from_vec(v, (1, n, 4), &Device::Cpu)?)?)
}

fn log_probs(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(logits, D::Minus1)?)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        d_ff: 12,
        channel_reduction: 2,
        spatial_kernel: 1,
        head_hidden: 6,
        dropout: 0.0,
        template_size: 16,
        search_size: 16,
        alignment: true,
        matcher: MatcherConfig {
            depth: 1,
            ..MatcherConfig::default()
        },
        backbone: BackboneConfig {
            stage_channels: vec![2, 3, 4],
            output_dim: 8,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Runs one block's check.
pub fn check_block(block: Block, seed: u64) -> Result<BlockReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new(DType::F64, &Device::Cpu);
    let (worst, checked) = match block {
        Block::Channel => {
            let p = ChannelAttnParams::build(&mut s, "g", 8, 2, &mut rng)?;
            s.randomize(PARAM_BOUND, &mut rng)?;
            let x = random_var(&[2, 8, 3, 3], 1.0, &mut rng)?;
            let r = random_tensor(&[2, 8, 3, 3], &mut rng)?;
            let f = || project(channel_attention(&FeatureGrid::new(x.as_tensor().clone())?, &p)?.tensor(), &r);
            compare(&with_inputs(&[&x], &s), &f, 12, &mut rng)?
        }
        Block::Spatial => {
            let p = SpatialAttnParams::build(&mut s, "g", 3, &mut rng)?;
            s.randomize(PARAM_BOUND, &mut rng)?;
            let x = random_var(&[2, 4, 4, 4], 1.0, &mut rng)?;
            let r = random_tensor(&[2, 4, 4, 4], &mut rng)?;
            let f = || project(spatial_attention(&FeatureGrid::new(x.as_tensor().clone())?, &p)?.tensor(), &r);
            compare(&with_inputs(&[&x], &s), &f, 12, &mut rng)?
        }
        Block::Mha => {
            let p = MultiHeadParams::build(&mut s, "m", 8, 2, &mut rng)?;
            s.randomize(PARAM_BOUND, &mut rng)?;
            let q = random_var(&[1, 3, 8], 1.0, &mut rng)?;
            let k = random_var(&[1, 5, 8], 1.0, &mut rng)?;
            let v = random_var(&[1, 5, 8], 1.0, &mut rng)?;
            let r = random_tensor(&[1, 3, 8], &mut rng)?;
            let f = || {
                let out = multi_head_attention(
                    &TokenSequence::new(q.as_tensor().clone())?,
                    &TokenSequence::new(k.as_tensor().clone())?,
                    &TokenSequence::new(v.as_tensor().clone())?,
                    &p,
                )?;
                project(out.tensor(), &r)
            };
            compare(&with_inputs(&[&q, &k, &v], &s), &f, 12, &mut rng)?
        }
        Block::Matcher => {
            let mut worst = 0.0f64;
            let mut checked = 0;
            for (i, kind) in [GateKind::Channel, GateKind::Spatial, GateKind::None].into_iter().enumerate() {
                let p = MatcherParams::build(&mut s, &format!("m{i}"), kind, NormalizationMode::PostNorm, &dims(), &mut rng)?;
                s.randomize(PARAM_BOUND, &mut rng)?;
                let z = random_var(&[1, 9, 8], 1.0, &mut rng)?;
                let x = random_var(&[1, 16, 8], 1.0, &mut rng)?;
                let (rz, rx) = (random_tensor(&[1, 9, 8], &mut rng)?, random_tensor(&[1, 16, 8], &mut rng)?);
                let f = || {
                    let (zo, xo) = matcher_layer(&tokens(&z, 3)?, &tokens(&x, 4)?, &p, kind, None)?;
                    Ok((project(zo.tensor(), &rz)? + project(xo.tensor(), &rx)?)?)
                };
                let (w, c) = compare(&with_inputs(&[&z, &x], &s), &f, 4, &mut rng)?;
                worst = worst.max(w);
                checked += c;
            }
            (worst, checked)
        }
        Block::Alignment => {
            let p = AlignmentParams::build(&mut s, "a", NormalizationMode::PostNorm, &dims(), &mut rng)?;
            s.randomize(PARAM_BOUND, &mut rng)?;
            let c = random_var(&[1, 9, 8], 1.0, &mut rng)?;
            let q = random_var(&[1, 9, 8], 1.0, &mut rng)?;
            let (rc, rq) = (random_tensor(&[1, 9, 8], &mut rng)?, random_tensor(&[1, 9, 8], &mut rng)?);
            let f = || {
                let (co, qo) = dual_align(&tokens(&c, 3)?, &tokens(&q, 3)?, &p)?;
                Ok((project(co.tensor(), &rc)? + project(qo.tensor(), &rq)?)?)
            };
            compare(&with_inputs(&[&c, &q], &s), &f, 6, &mut rng)?
        }
        Block::PgCls | Block::CgReg => {
            let labels = vec![assign_labels(3, &unit_gt())];
            let gts = vec![unit_gt()];
            let logits = random_var(&[1, 9, 2], 2.0, &mut rng)?;
            let boxes = box_var(9, &mut rng)?;
            let w = LossWeights::default();
            let lp0 = log_probs(logits.as_tensor())?;
            let cls_w = cls_guidance(&lp0, boxes.as_tensor(), &gts, &labels, ClsLossKind::PrecisionGuided)?;
            let reg_w = reg_guidance(&lp0, boxes.as_tensor(), &gts, &labels, RegLossKind::ConfidenceGuided)?;
            let f = || {
                let lp = log_probs(logits.as_tensor())?;
                if block == Block::PgCls {
                    pg_cls_loss_with(&lp, boxes.as_tensor(), &gts, &labels, &w, &cls_w)
                } else {
                    cg_reg_loss_with(&lp, boxes.as_tensor(), &gts, &labels, &w, &reg_w)
                }
            };
            compare(&[logits.clone(), boxes.clone()], &f, 36, &mut rng)?
        }
        Block::Full => check_full(seed, &mut rng)?,
    };
    Ok(BlockReport {
        block,
        max_rel_error: worst,
        checked,
    })
}

/// Whole network plus total loss on 2x2 template and search grids.
fn check_full(seed: u64, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let cfg = tiny_model_config();
    let net = MapNet::new(&cfg, DType::F64, &Device::Cpu, seed)?;
    net.params().randomize(PARAM_BOUND, rng)?;
    let t = random_var(&[1, 3, 16, 16], 0.5, rng)?;
    let x = random_var(&[1, 3, 16, 16], 0.5, rng)?;
    let t = Var::from_tensor(&(t.as_tensor() + 0.5)?)?;
    let x = Var::from_tensor(&(x.as_tensor() + 0.5)?)?;
    let gts = vec![unit_gt()];
    let labels: Vec<LabelAssignment> = vec![assign_labels(cfg.search_grid().h, &unit_gt())];
    if labels[0].n_pos() == 0 {
        return Err(contract!("gradient check ground truth covers no cell"));
    }
    let w = LossWeights::default();
    let out = net.forward(t.as_tensor(), x.as_tensor(), None)?;
    if out.logits.dims() != [1, 4, 2] {
        return Err(contract!("toy model should emit 4 candidates"));
    }
    let lp0 = log_probs(&out.logits)?;
    let cls_w = cls_guidance(&lp0, &out.boxes, &gts, &labels, ClsLossKind::PrecisionGuided)?;
    let reg_w = reg_guidance(&lp0, &out.boxes, &gts, &labels, RegLossKind::ConfidenceGuided)?;
    let f = || {
        let out = net.forward(t.as_tensor(), x.as_tensor(), None)?;
        let lp = log_probs(&out.logits)?;
        let cls = pg_cls_loss_with(&lp, &out.boxes, &gts, &labels, &w, &cls_w)?;
        let reg = cg_reg_loss_with(&lp, &out.boxes, &gts, &labels, &w, &reg_w)?;
        Ok((cls + reg)?)
    };
    let vars: Vec<Var> = [t.clone(), x.clone()].into_iter().chain(net.params().vars()).collect();
    compare(&vars, &f, 2, rng)
}

pub fn run_suite(blocks: &[Block], seed: u64) -> Result<Vec<BlockReport>> {
    blocks.iter().map(|&b| check_block(b, seed)).collect()
}
