//! Frame-by-frame inference: fixed template, search crop around the last
//! box, window-penalized re-ranking and decoding.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use candle_core::D;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::{patches_to_tensor, ImagePatch, PatchRole};
use crate::error::{config_err, contract, Error, Result};
use crate::heads::decode_box;
use crate::model::MapNet;
use crate::types::{BBox, BoxFrame, TokenSequence};

pub const WINDOW_PENALTY: f64 = 0.57;
pub const TEMPLATE_FACTOR: f64 = 2.0;
pub const SEARCH_FACTOR: f64 = 4.0;
/// Smallest box side the tracker will carry forward.
pub const MIN_BOX_SIDE: f64 = 1.0;

/// Square crop placement in frame pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CropGeometry {
    pub center: (f64, f64),
    pub side: f64,
    pub out_size: usize,
    pub pad_fill: [f32; 3],
}

impl CropGeometry {
    /// Top-left corner of the crop in frame pixels.
    pub fn origin(&self) -> (f64, f64) {
        (self.center.0 - self.side / 2.0, self.center.1 - self.side / 2.0)
    }

    /// Frame pixels per output pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.out_size as f64
    }
}

/// Crop side for a box: `factor * sqrt(w * h)`.
pub fn crop_side(b: &BBox, area_factor: f64) -> f64 {
    area_factor * (b.width() * b.height()).sqrt()
}

fn sample(frame: &RgbImage, x: f64, y: f64, fill: [f32; 3]) -> [f32; 3] {
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    if x < 0.0 || y < 0.0 || x >= w || y >= h {
        return fill;
    }
    // pixel i covers [i, i + 1); interpolate between pixel centres
    let fx = (x - 0.5).clamp(0.0, w - 1.0);
    let fy = (y - 0.5).clamp(0.0, h - 1.0);
    let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
    let x1 = (x0 + 1).min(frame.width() - 1);
    let y1 = (y0 + 1).min(frame.height() - 1);
    let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
    let p = |xx: u32, yy: u32, c: usize| frame.get_pixel(xx, yy).0[c] as f32 / 255.0;
    let mut out = [0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = p(x0, y0, c) * (1.0 - ax) + p(x1, y0, c) * ax;
        let bot = p(x0, y1, c) * (1.0 - ax) + p(x1, y1, c) * ax;
        *o = top * (1.0 - ay) + bot * ay;
    }
    out
}

/// Resamples the square `geometry` region of `frame` to an
/// `out_size x out_size` patch with values in `[0, 1]`.
pub fn resample(frame: &RgbImage, geometry: &CropGeometry, role: PatchRole) -> Result<ImagePatch> {
    if frame.width() == 0 || frame.height() == 0 {
        return Err(Error::Data("empty frame".into()));
    }
    if !(geometry.side > 0.0 && geometry.side.is_finite()) || geometry.out_size == 0 {
        return Err(contract!("invalid crop geometry {geometry:?}"));
    }
    let n = geometry.out_size;
    let (ox, oy) = geometry.origin();
    let s = geometry.scale();
    let mut pixels = Vec::with_capacity(n * n * 3);
    for i in 0..n {
        let y = oy + (i as f64 + 0.5) * s;
        for j in 0..n {
            let x = ox + (j as f64 + 0.5) * s;
            pixels.extend(sample(frame, x, y, geometry.pad_fill));
        }
    }
    ImagePatch::new(pixels, n, role)
}

/// Square crop centred on `b` with side `area_factor * sqrt(w * h)`.
pub fn crop_patch(
    frame: &RgbImage,
    b: &BBox,
    area_factor: f64,
    out_size: usize,
    pad_fill: [f32; 3],
    role: PatchRole,
) -> Result<(ImagePatch, CropGeometry)> {
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(Error::Data(format!("cannot crop around zero-area box {b:?}")));
    }
    if !(area_factor > 0.0) {
        return Err(config_err!("crop area factor must be positive"));
    }
    let geometry = CropGeometry {
        center: b.center(),
        side: crop_side(b, area_factor),
        out_size,
        pad_fill,
    };
    let patch = resample(frame, &geometry, role)?;
    Ok((patch, geometry))
}

/// Outer product of two `g`-point Hann windows, scaled so its peak is 1.
pub fn hanning_window(g: usize) -> Vec<f64> {
    let hann: Vec<f64> = if g == 1 {
        vec![1.0]
    } else {
        (0..g)
            .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (g - 1) as f64).cos())
            .collect()
    };
    let mut w: Vec<f64> = hann.iter().flat_map(|a| hann.iter().map(move |b| a * b)).collect();
    let peak = w.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        w.iter_mut().for_each(|v| *v /= peak);
    }
    w
}

/// `(1 - lambda) * score + lambda * window`.
pub fn apply_window_penalty(scores: &[f64], window: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if scores.len() != window.len() {
        return Err(contract!(
            "{} scores against a {}-cell window",
            scores.len(),
            window.len()
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract!("window penalty {lambda} outside [0, 1]"));
    }
    Ok(scores
        .iter()
        .zip(window)
        .map(|(s, w)| (1.0 - lambda) * s + lambda * w)
        .collect())
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub window_penalty: f64,
    pub template_factor: f64,
    pub search_factor: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            window_penalty: WINDOW_PENALTY,
            template_factor: TEMPLATE_FACTOR,
            search_factor: SEARCH_FACTOR,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.window_penalty) {
            return Err(config_err!("tracker.window_penalty must lie in [0, 1]"));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return Err(config_err!("tracker crop factors must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    template_tokens: TokenSequence,
    pub prev_box: BBox,
    pub hanning: Vec<f64>,
    pub penalty: f64,
    pub pad_fill: [f32; 3],
}

impl TrackerState {
    pub fn template_tokens(&self) -> &TokenSequence {
        &self.template_tokens
    }

    /// Hash of the template token values.
    pub fn template_fingerprint(&self) -> Result<u64> {
        let v = self
            .template_tokens
            .tensor()
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?;
        let mut h = DefaultHasher::new();
        for x in v {
            x.to_bits().hash(&mut h);
        }
        Ok(h.finish())
    }
}

/// One tracking decision.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub bbox: BBox,
    pub score: f64,
    pub index: usize,
}

impl StepResult {
    pub fn to_line(&self) -> String {
        format_result_line(&self.bbox, self.score)
    }
}

/// `x,y,w,h,score`.
pub fn format_result_line(b: &BBox, score: f64) -> String {
    let [x, y, w, h] = b.to_xywh();
    format!("{x:.4},{y:.4},{w:.4},{h:.4},{score:.6}")
}

/// Inference wrapper around an immutable network.
#[derive(Debug, Clone)]
pub struct Tracker<'a> {
    net: &'a MapNet,
    cfg: TrackerConfig,
}

impl<'a> Tracker<'a> {
    pub fn new(net: &'a MapNet, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { net, cfg })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn pad_fill(&self) -> [f32; 3] {
        self.net.config().backbone.pixel_mean.map(|v| v as f32)
    }

    pub fn init(&self, frame: &RgbImage, b: &BBox) -> Result<TrackerState> {
        if b.frame != BoxFrame::ImagePixels || !b.is_ordered() || b.area() <= 0.0 {
            return Err(Error::Data(format!("degenerate initial box {b:?}")));
        }
        let mc = self.net.config();
        let fill = self.pad_fill();
        let (patch, _) = crop_patch(
            frame,
            b,
            self.cfg.template_factor,
            mc.template_size,
            fill,
            PatchRole::Template,
        )?;
        let t = patches_to_tensor(&[&patch], self.net.dtype(), self.net.device())?;
        let template_tokens = self.net.embed(&t)?;
        Ok(TrackerState {
            template_tokens,
            prev_box: *b,
            hanning: hanning_window(mc.search_grid().h),
            penalty: self.cfg.window_penalty,
            pad_fill: fill,
        })
    }

    pub fn track_step(&self, state: &mut TrackerState, frame: &RgbImage) -> Result<StepResult> {
        let (patch, geometry) = crop_patch(
            frame,
            &state.prev_box,
            self.cfg.search_factor,
            self.net.config().search_size,
            state.pad_fill,
            PatchRole::Search,
        )?;
        let s = patches_to_tensor(&[&patch], self.net.dtype(), self.net.device())?;
        let v_x = self.net.embed(&s)?;
        let out = self.net.predict(&state.template_tokens, &v_x, None)?;
        let probs = candle_nn::ops::softmax_last_dim(&out.logits)?;
        let fg: Vec<f64> = probs
            .narrow(D::Minus1, 0, 1)?
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1()?;
        let ranked = apply_window_penalty(&fg, &state.hanning, state.penalty)?;
        let index = argmax(&ranked);
        let bx: Vec<f64> = out
            .boxes
            .get(0)?
            .get(index)?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1()?;
        let unit = BBox::from_corners(bx[0], bx[1], bx[2], bx[3], BoxFrame::NormalizedSearch);
        let decoded = floor_box_size(&decode_box(&unit, &geometry));
        state.prev_box = decoded;
        Ok(StepResult {
            bbox: decoded,
            score: fg[index],
            index,
        })
    }

    /// Runs one-pass tracking over `frames`, initialised on `init_box`.
    /// The first result is the initial box with score 1.
    pub fn run_sequence(&self, frames: &[RgbImage], init_box: &BBox) -> Result<Vec<StepResult>> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Data("sequence has no frames".into()))?;
        let mut state = self.init(first, init_box)?;
        let mut out = vec![StepResult {
            bbox: *init_box,
            score: 1.0,
            index: 0,
        }];
        for f in &frames[1..] {
            out.push(self.track_step(&mut state, f)?);
        }
        Ok(out)
    }
}

/// Widens a box about its centre so both sides are at least one pixel.
pub fn floor_box_size(b: &BBox) -> BBox {
    let (cx, cy) = b.center();
    let w = (b.x2 - b.x1).max(MIN_BOX_SIDE);
    let h = (b.y2 - b.y1).max(MIN_BOX_SIDE);
    BBox::from_corners(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, b.frame)
}
