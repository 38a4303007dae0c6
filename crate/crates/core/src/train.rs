//! The optimization loop: two learning-rate groups, step decay, and a
//! line-per-step loss log.

use std::fs;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::backbone::{patches_to_tensor, ImagePatch};
use crate::data::{sample_training_pair, AugmentConfig, PairGeometry, Sequence, TrainingPair};
use crate::error::{config_err, Error, Result};
use crate::losses::{assign_labels, total_loss, LabelAssignment, LossConfig};
use crate::model::MapNet;
use crate::params::ParamGroup;
use crate::types::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    /// Fraction of training after which both learning rates drop.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            iterations_per_epoch: 100,
            batch_size: 8,
            lr_backbone: 1e-5,
            lr_other: 1e-4,
            weight_decay: 1e-4,
            lr_drop_at: 2.0 / 3.0,
            lr_drop_factor: 0.1,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.iterations_per_epoch == 0 || self.batch_size == 0 {
            return Err(config_err!("train.epochs, iterations_per_epoch and batch_size must be positive"));
        }
        for (k, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_other", self.lr_other),
            ("weight_decay", self.weight_decay),
            ("lr_drop_factor", self.lr_drop_factor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("train.{k} must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) {
            return Err(config_err!("train.lr_drop_at must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }

    /// First step run at the dropped learning rate.
    pub fn drop_step(&self) -> usize {
        (self.total_steps() as f64 * self.lr_drop_at).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub lr_backbone: f64,
    pub lr_other: f64,
}

/// A stacked batch ready for the network.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<TrainingPair>,
    pub labels: Vec<LabelAssignment>,
}

impl Batch {
    pub fn gts(&self) -> Vec<BBox> {
        self.pairs.iter().map(|p| p.gt).collect()
    }
}

/// Draws `size` pairs, replacing any whose ground truth covers no
/// candidate cell.
pub fn sample_batch(
    data: &[Sequence],
    size: usize,
    aug: &AugmentConfig,
    geo: &PairGeometry,
    grid_side: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::Data("no training sequences".into()));
    }
    let mut pairs = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    let mut skipped = 0;
    while pairs.len() < size {
        let seq = &data[rng.random_range(0..data.len())];
        let p = sample_training_pair(seq, aug, geo, rng)?;
        let l = assign_labels(grid_side, &p.gt);
        if l.n_pos() == 0 {
            skipped += 1;
            log::warn!("skipping a training pair with no positive cells (gt {:?})", p.gt.as_array());
            if skipped > 100 * size {
                return Err(Error::Data("no training pair produced positive cells".into()));
            }
            continue;
        }
        pairs.push(p);
        labels.push(l);
    }
    Ok(Batch { pairs, labels })
}

fn patch_image(p: &ImagePatch) -> RgbImage {
    let n = p.size as u32;
    RgbImage::from_fn(n, n, |x, y| {
        let i = (y as usize * p.size + x as usize) * 3;
        Rgb([0, 1, 2].map(|c| (p.pixels[i + c].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn dump_batch(dir: &Path, step: usize, batch: &Batch, cls: f64, reg: f64) -> Result<()> {
    let d = dir.join(format!("nonfinite_step_{step}"));
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    let info = serde_json::json!({
        "step": step,
        "cls": cls.to_string(),
        "reg": reg.to_string(),
        "gts": batch.pairs.iter().map(|p| p.gt.as_array()).collect::<Vec<_>>(),
        "positives": batch.labels.iter().map(|l| l.n_pos()).collect::<Vec<_>>(),
    });
    let f = d.join("batch.json");
    fs::write(&f, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&f, e))?;
    for (i, p) in batch.pairs.iter().enumerate() {
        patch_image(&p.template).save(d.join(format!("template_{i}.png")))?;
        patch_image(&p.search).save(d.join(format!("search_{i}.png")))?;
    }
    Ok(())
}

/// Owns the two optimizers and the dropout stream for one training run.
pub struct Trainer<'a> {
    net: &'a MapNet,
    cfg: TrainConfig,
    loss: LossConfig,
    opt_backbone: AdamW,
    opt_other: AdamW,
    dropout: Dropout,
    rng: ChaCha8Rng,
    step: usize,
    dump_dir: Option<std::path::PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a MapNet, cfg: &TrainConfig, loss: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        loss.weights().validate()?;
        let mk = |group, lr| {
            AdamW::new(
                net.params().group_vars(group),
                ParamsAdamW {
                    lr,
                    weight_decay: cfg.weight_decay,
                    ..ParamsAdamW::default()
                },
            )
        };
        Ok(Self {
            net,
            cfg: cfg.clone(),
            loss: *loss,
            opt_backbone: mk(ParamGroup::Backbone, cfg.lr_backbone)?,
            opt_other: mk(ParamGroup::Other, cfg.lr_other)?,
            dropout: Dropout::new(net.config().dropout, ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f)),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            dump_dir: None,
        })
    }

    /// Where to write the offending batch if a loss turns non-finite.
    pub fn with_dump_dir(mut self, dir: &Path) -> Self {
        self.dump_dir = Some(dir.to_path_buf());
        self
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn pair_geometry(&self) -> PairGeometry {
        let c = self.net.config();
        PairGeometry {
            template_size: c.template_size,
            search_size: c.search_size,
            pad_fill: c.backbone.pixel_mean.map(|v| v as f32),
        }
    }

    pub fn sample(&mut self, data: &[Sequence]) -> Result<Batch> {
        let geo = self.pair_geometry();
        let side = self.net.config().search_grid().h;
        sample_batch(data, self.cfg.batch_size, &self.cfg.augment, &geo, side, &mut self.rng)
    }

    fn learning_rates(&self) -> (f64, f64) {
        let f = if self.step >= self.cfg.drop_step() { self.cfg.lr_drop_factor } else { 1.0 };
        (self.cfg.lr_backbone * f, self.cfg.lr_other * f)
    }

    /// Loss and gradients for a batch, without updating anything.
    pub fn loss_and_grads(&mut self, batch: &Batch) -> Result<(LogRecord, Tensor, GradStore)> {
        let (dt, dev) = (self.net.dtype(), self.net.device().clone());
        let t: Vec<&ImagePatch> = batch.pairs.iter().map(|p| &p.template).collect();
        let s: Vec<&ImagePatch> = batch.pairs.iter().map(|p| &p.search).collect();
        let t = patches_to_tensor(&t, dt, &dev)?;
        let s = patches_to_tensor(&s, dt, &dev)?;
        let out = self.net.forward(&t, &s, Some(&mut self.dropout))?;
        let lb = total_loss(&out.logits, &out.boxes, &batch.gts(), &batch.labels, &self.loss.weights(), self.loss.kinds())?;
        let loss = lb.total.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        let (lr_b, lr_o) = self.learning_rates();
        let rec = LogRecord {
            step: self.step,
            loss,
            cls: lb.cls,
            reg: lb.reg,
            lr_backbone: lr_b,
            lr_other: lr_o,
        };
        if !loss.is_finite() {
            if let Some(d) = &self.dump_dir {
                dump_batch(d, self.step, batch, lb.cls, lb.reg)?;
            }
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} (cls {}, reg {})",
                self.step, lb.cls, lb.reg
            )));
        }
        let grads = lb.total.backward()?;
        Ok((rec, lb.total, grads))
    }

    /// One optimization step on `batch`.
    pub fn step_on(&mut self, batch: &Batch) -> Result<LogRecord> {
        let (lr_b, lr_o) = self.learning_rates();
        self.opt_backbone.set_learning_rate(lr_b);
        self.opt_other.set_learning_rate(lr_o);
        let (rec, _, grads) = self.loss_and_grads(batch)?;
        self.opt_backbone.step(&grads)?;
        self.opt_other.step(&grads)?;
        self.step += 1;
        Ok(rec)
    }

    /// Samples a batch and steps.
    pub fn step(&mut self, data: &[Sequence]) -> Result<LogRecord> {
        let batch = self.sample(data)?;
        self.step_on(&batch)
    }

    /// Runs the remaining schedule, handing each record to `sink`.
    pub fn run(&mut self, data: &[Sequence], mut sink: impl FnMut(&LogRecord) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.total_steps() {
            let rec = self.step(data)?;
            sink(&rec)?;
        }
        Ok(())
    }
}

/// Trains `net` in place over the full schedule and returns the log.
pub fn train(net: &MapNet, cfg: &TrainConfig, loss: &LossConfig, data: &[Sequence]) -> Result<Vec<LogRecord>> {
    let mut log = Vec::with_capacity(cfg.total_steps());
    let mut t = Trainer::new(net, cfg, loss)?;
    t.run(data, |r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok(log)
}

/// One JSON object per line.
pub fn log_line(r: &LogRecord) -> Result<String> {
    Ok(serde_json::to_string(r)?)
}
