//! The full prediction network: shared backbone, classification and
//! regression matcher stacks, dual alignment, and the two heads.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{dual_align, AlignmentParams};
use crate::attention::{Dropout, DEFAULT_REDUCTION, DEFAULT_SPATIAL_KERNEL};
use crate::backbone::{Backbone, BackboneConfig, OUTPUT_STRIDE};
use crate::error::{config_err, Result};
use crate::heads::{classify, regress, HeadParams, HEAD_HIDDEN};
use crate::matcher::{
    build_stack, run_matcher_stack, BlockDims, GateKind, MatcherParams, MatcherStackConfig,
    NormalizationMode,
};
use crate::params::ParamStore;
use crate::types::{GridShape, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub depth: usize,
    pub cls_gate: GateKind,
    pub reg_gate: GateKind,
    /// One stack feeds both heads (requires equal gate kinds).
    pub shared: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            cls_gate: GateKind::Channel,
            reg_gate: GateKind::Spatial,
            shared: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub channel_reduction: usize,
    pub spatial_kernel: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub normalization_mode: NormalizationMode,
    pub template_size: usize,
    pub search_size: usize,
    pub alignment: bool,
    pub matcher: MatcherConfig,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 8,
            d_ff: 1024,
            channel_reduction: DEFAULT_REDUCTION,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
            head_hidden: HEAD_HIDDEN,
            dropout: 0.1,
            normalization_mode: NormalizationMode::PostNorm,
            template_size: 128,
            search_size: 256,
            alignment: true,
            matcher: MatcherConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

/// Ablation layouts: 1 shared base stack, 2 base/base, 3 base/spatial,
/// 4 channel/spatial, 5 channel/spatial plus alignment.
pub fn component_variant(cfg: &ModelConfig, variant: u8) -> Result<ModelConfig> {
    let (cls, reg, shared, align) = match variant {
        1 => (GateKind::None, GateKind::None, true, false),
        2 => (GateKind::None, GateKind::None, false, false),
        3 => (GateKind::None, GateKind::Spatial, false, false),
        4 => (GateKind::Channel, GateKind::Spatial, false, false),
        5 => (GateKind::Channel, GateKind::Spatial, false, true),
        v => return Err(config_err!("unknown component variant {v}")),
    };
    let mut out = cfg.clone();
    out.matcher.cls_gate = cls;
    out.matcher.reg_gate = reg;
    out.matcher.shared = shared;
    out.alignment = align;
    Ok(out)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return Err(config_err!(
                "model.d_model must be a positive multiple of 4, got {}",
                self.d_model
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(config_err!(
                "model.heads ({}) must divide model.d_model ({})",
                self.heads,
                self.d_model
            ));
        }
        if self.d_ff == 0 || self.head_hidden == 0 {
            return Err(config_err!("model.d_ff and model.head_hidden must be positive"));
        }
        if self.channel_reduction == 0 || self.d_model % self.channel_reduction != 0 {
            return Err(config_err!(
                "model.channel_reduction ({}) must divide model.d_model ({})",
                self.channel_reduction,
                self.d_model
            ));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(config_err!("model.spatial_kernel must be odd"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("model.dropout must lie in [0, 1)"));
        }
        if self.matcher.depth == 0 {
            return Err(config_err!("matcher.depth must be at least 1"));
        }
        if self.matcher.shared && self.matcher.cls_gate != self.matcher.reg_gate {
            return Err(config_err!(
                "a shared matcher stack needs matcher.cls_gate == matcher.reg_gate"
            ));
        }
        for (k, s) in [
            ("template_size", self.template_size),
            ("search_size", self.search_size),
        ] {
            if s == 0 || s % OUTPUT_STRIDE != 0 {
                return Err(config_err!(
                    "model.{k} must be a positive multiple of {OUTPUT_STRIDE}, got {s}"
                ));
            }
        }
        let gated = self.alignment
            || self.matcher.cls_gate == GateKind::Spatial
            || self.matcher.reg_gate == GateKind::Spatial;
        let smallest = self.template_size.min(self.search_size) / OUTPUT_STRIDE;
        if gated && self.spatial_kernel > smallest {
            return Err(config_err!(
                "model.spatial_kernel {} exceeds the {}-cell feature grid",
                self.spatial_kernel,
                smallest
            ));
        }
        self.backbone_config().validate()
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            output_dim: self.d_model,
            ..self.backbone.clone()
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            reduction: self.channel_reduction,
            spatial_kernel: self.spatial_kernel,
        }
    }

    pub fn template_grid(&self) -> GridShape {
        GridShape::square(self.template_size / OUTPUT_STRIDE)
    }

    pub fn search_grid(&self) -> GridShape {
        GridShape::square(self.search_size / OUTPUT_STRIDE)
    }

    pub fn stack_config(&self, gate_kind: GateKind) -> MatcherStackConfig {
        MatcherStackConfig {
            depth: self.matcher.depth,
            gate_kind,
            normalization_mode: self.normalization_mode,
        }
    }
}

/// Raw per-candidate predictions.
#[derive(Debug, Clone)]
pub struct NetOutput {
    /// `(batch, n_x, 2)`, foreground first.
    pub logits: Tensor,
    /// `(batch, n_x, 4)` unit-frame corners.
    pub boxes: Tensor,
    pub grid: GridShape,
}

#[derive(Debug, Clone)]
pub struct MapNet {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    cls_stack: Vec<MatcherParams>,
    /// `None` when the classification stack is shared.
    reg_stack: Option<Vec<MatcherParams>>,
    alignment: Option<AlignmentParams>,
    cls_head: HeadParams,
    reg_head: HeadParams,
}

impl MapNet {
    pub fn new(cfg: &ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype, device);
        let dims = cfg.block_dims();
        let backbone = Backbone::build(&mut store, "backbone", &cfg.backbone_config(), &mut rng)?;
        let cls_stack = build_stack(
            &mut store,
            "cls_stack",
            &cfg.stack_config(cfg.matcher.cls_gate),
            &dims,
            &mut rng,
        )?;
        let reg_stack = if cfg.matcher.shared {
            None
        } else {
            Some(build_stack(
                &mut store,
                "reg_stack",
                &cfg.stack_config(cfg.matcher.reg_gate),
                &dims,
                &mut rng,
            )?)
        };
        let alignment = if cfg.alignment {
            Some(AlignmentParams::build(
                &mut store,
                "alignment",
                cfg.normalization_mode,
                &dims,
                &mut rng,
            )?)
        } else {
            None
        };
        let cls_head = HeadParams::build(&mut store, "cls_head", cfg.d_model, cfg.head_hidden, 2, &mut rng)?;
        let reg_head = HeadParams::build(&mut store, "reg_head", cfg.d_model, cfg.head_hidden, 4, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            cls_stack,
            reg_stack,
            alignment,
            cls_head,
            reg_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Backbone tokens for `(batch, 3, H, W)` pixels in `[0, 1]`.
    pub fn embed(&self, pixels: &Tensor) -> Result<TokenSequence> {
        self.backbone.forward(pixels)?.flatten()
    }

    /// Matching, alignment and heads on already-embedded tokens.
    pub fn predict(
        &self,
        v_z: &TokenSequence,
        v_x: &TokenSequence,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<NetOutput> {
        let cls_cfg = self.cfg.stack_config(self.cfg.matcher.cls_gate);
        let s_c = run_matcher_stack(v_z, v_x, &cls_cfg, &self.cls_stack, dropout.as_deref_mut())?;
        let s_p = match &self.reg_stack {
            Some(stack) => {
                let reg_cfg = self.cfg.stack_config(self.cfg.matcher.reg_gate);
                run_matcher_stack(v_z, v_x, &reg_cfg, stack, dropout.as_deref_mut())?
            }
            None => s_c.clone(),
        };
        let (s_c, s_p) = match &self.alignment {
            Some(p) => dual_align(&s_c, &s_p, p)?,
            None => (s_c, s_p),
        };
        let grid = s_c.grid().unwrap_or(GridShape::new(1, s_c.len()));
        Ok(NetOutput {
            logits: classify(&s_c, &self.cls_head)?,
            boxes: regress(&s_p, &self.reg_head)?,
            grid,
        })
    }

    /// Full forward pass from template and search pixels.
    pub fn forward(
        &self,
        template: &Tensor,
        search: &Tensor,
        dropout: Option<&mut Dropout>,
    ) -> Result<NetOutput> {
        let v_z = self.embed(template)?;
        let v_x = self.embed(search)?;
        self.predict(&v_z, &v_x, dropout)
    }

    /// Tokens with the template batch broadcast to `batch` copies.
    pub fn expand_template(&self, v_z: &TokenSequence, batch: usize) -> Result<TokenSequence> {
        if v_z.batch() == batch {
            return Ok(v_z.clone());
        }
        let (_, n, d) = v_z.tensor().dims3()?;
        v_z.map_tensor(v_z.tensor().broadcast_as((batch, n, d))?.contiguous()?)
    }
}
