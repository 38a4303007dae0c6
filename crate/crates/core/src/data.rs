//! Synthetic sequences, the on-disk sequence format, and training-pair
//! sampling with augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ImagePatch, PatchRole};
use crate::error::{config_err, Error, Result};
use crate::heads::encode_box;
use crate::tracker::{crop_patch, crop_side, resample, CropGeometry, SEARCH_FACTOR, TEMPLATE_FACTOR};
use crate::types::{BBox, BoxFrame};

pub const MIN_OBJECT_SIDE: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSequenceConfig {
    pub frame_width: u32,
    pub frame_height: u32,
    pub length: usize,
    pub shape: ObjectShape,
    /// Inclusive range of the initial object side lengths.
    pub object_size: [u32; 2],
    /// Largest initial speed in pixels per frame.
    pub max_speed: f64,
    /// Per-frame positional jitter amplitude in pixels.
    pub jitter: f64,
    /// Allowed size multipliers relative to the initial size.
    pub scale_range: [f64; 2],
    /// Largest per-frame relative size change.
    pub scale_drift: f64,
    pub texture_seed: u64,
    pub background_seed: u64,
}

impl Default for SyntheticSequenceConfig {
    fn default() -> Self {
        Self {
            frame_width: 160,
            frame_height: 160,
            length: 60,
            shape: ObjectShape::Rectangle,
            object_size: [20, 36],
            max_speed: 2.5,
            jitter: 0.5,
            scale_range: [0.8, 1.25],
            scale_drift: 0.01,
            texture_seed: 0,
            background_seed: 0,
        }
    }
}

impl SyntheticSequenceConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.object_size;
        if self.length == 0 {
            return Err(config_err!("synthetic length must be positive"));
        }
        if lo > hi || !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return Err(config_err!("synthetic size ranges must be ordered and positive"));
        }
        if (lo as f64 * self.scale_range[0]).floor() < MIN_OBJECT_SIDE as f64 {
            return Err(config_err!(
                "objects may shrink below {MIN_OBJECT_SIDE} px: size {lo} x scale {}",
                self.scale_range[0]
            ));
        }
        let largest = (hi as f64 * self.scale_range[1]).ceil() + 2.0 * self.jitter.abs() + 2.0;
        if largest >= self.frame_width.min(self.frame_height) as f64 {
            return Err(config_err!(
                "objects up to {largest} px cannot stay inside a {}x{} frame",
                self.frame_width,
                self.frame_height
            ));
        }
        if !(self.max_speed >= 0.0 && self.jitter >= 0.0 && self.scale_drift >= 0.0) {
            return Err(config_err!("synthetic motion amplitudes must be non-negative"));
        }
        Ok(())
    }
}

/// An annotated frame sequence.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub boxes: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Generated sequence together with the per-frame object masks.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub sequence: Sequence,
    /// Row-major `frame_height x frame_width` coverage.
    pub masks: Vec<Vec<bool>>,
}

/// Smooth value noise: random lattice every `cell` pixels, bilinearly
/// interpolated.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<[f32; 3]>,
}

impl ValueNoise {
    fn new(w: u32, h: u32, cell: f64, base: [f32; 3], amp: f32, rng: &mut ChaCha8Rng) -> Self {
        let cols = (w as f64 / cell).ceil() as usize + 2;
        let rows = (h as f64 / cell).ceil() as usize + 2;
        let lattice = (0..cols * rows)
            .map(|_| base.map(|b| (b + rng.random_range(-amp..=amp)).clamp(0.0, 1.0)))
            .collect();
        Self { cell, cols, lattice }
    }

    fn at(&self, x: f64, y: f64) -> [f32; 3] {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
        let l = |c: usize, r: usize| self.lattice[r * self.cols + c];
        let (a, b, c, d) = (l(x0, y0), l(x0 + 1, y0), l(x0, y0 + 1), l(x0 + 1, y0 + 1));
        let mut out = [0f32; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - ax) + b[k] * ax;
            let bot = c[k] * (1.0 - ax) + d[k] * ax;
            out[k] = top * (1.0 - ay) + bot * ay;
        }
        out
    }
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
    ]
}

fn to_u8(c: [f32; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// Striped object texture in object-local coordinates.
struct ObjectTexture {
    a: [f32; 3],
    b: [f32; 3],
    dir: (f64, f64),
    period: f64,
}

impl ObjectTexture {
    fn new(rng: &mut ChaCha8Rng, background: [f32; 3]) -> Self {
        // keep the object visibly apart from the background mean
        let mut a = random_colour(rng);
        while a.iter().zip(background).map(|(x, y)| (x - y).abs()).sum::<f32>() < 0.6 {
            a = random_colour(rng);
        }
        let b = a.map(|v| if v > 0.5 { v - 0.35 } else { v + 0.35 });
        let t = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            a,
            b,
            dir: (t.cos(), t.sin()),
            period: rng.random_range(5.0..12.0),
        }
    }

    fn at(&self, u: f64, v: f64) -> [f32; 3] {
        let phase = (u * self.dir.0 + v * self.dir.1) / self.period;
        if phase.rem_euclid(1.0) < 0.5 {
            self.a
        } else {
            self.b
        }
    }
}

fn covers(shape: ObjectShape, rect: (i64, i64, i64, i64), px: i64, py: i64) -> bool {
    let (x, y, w, h) = rect;
    if px < x || py < y || px >= x + w || py >= y + h {
        return false;
    }
    match shape {
        ObjectShape::Rectangle => true,
        ObjectShape::Ellipse => {
            let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
            let dx = (px as f64 + 0.5 - (x as f64 + rx)) / rx;
            let dy = (py as f64 + 0.5 - (y as f64 + ry)) / ry;
            dx * dx + dy * dy <= 1.0
        }
    }
}

/// Tight bounding box of a mask, or `None` when it is empty.
pub fn mask_bbox(mask: &[bool], width: u32) -> Option<BBox> {
    let w = width as usize;
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let (x, y) = (i % w, i / w);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
        }
    }
    (x1 != usize::MAX).then(|| {
        BBox::from_corners(x1 as f64, y1 as f64, x2 as f64, y2 as f64, BoxFrame::ImagePixels)
    })
}

/// Renders a seeded sequence of one textured object moving over a
/// textured background; boxes are the tight bounds of the object mask.
pub fn generate_synthetic_sequence(
    cfg: &SyntheticSequenceConfig,
    seed: u64,
) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bg_rng = ChaCha8Rng::seed_from_u64(seed ^ cfg.background_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 1);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(seed ^ cfg.texture_seed.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ 2);
    let (fw, fh) = (cfg.frame_width, cfg.frame_height);

    let bg_base = random_colour(&mut bg_rng);
    let coarse = ValueNoise::new(fw, fh, 24.0, bg_base, 0.25, &mut bg_rng);
    let fine = ValueNoise::new(fw, fh, 6.0, [0.0; 3], 0.08, &mut bg_rng);
    let texture = ObjectTexture::new(&mut tex_rng, bg_base);

    let base_w = rng.random_range(cfg.object_size[0]..=cfg.object_size[1]) as f64;
    let base_h = rng.random_range(cfg.object_size[0]..=cfg.object_size[1]) as f64;
    let margin = base_w.max(base_h) * cfg.scale_range[1] / 2.0 + 1.0;
    let mut c = (
        rng.random_range(margin..fw as f64 - margin),
        rng.random_range(margin..fh as f64 - margin),
    );
    let angle = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let speed = if cfg.max_speed > 0.0 {
        rng.random_range(0.0..=cfg.max_speed)
    } else {
        0.0
    };
    let mut v = (speed * angle.cos(), speed * angle.sin());
    let mut scale = 1.0f64;

    let mut frames = Vec::with_capacity(cfg.length);
    let mut boxes = Vec::with_capacity(cfg.length);
    let mut masks = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        if t > 0 {
            if cfg.scale_drift > 0.0 {
                scale *= 1.0 + rng.random_range(-cfg.scale_drift..=cfg.scale_drift);
                scale = scale.clamp(cfg.scale_range[0], cfg.scale_range[1]);
            }
            let jx = if cfg.jitter > 0.0 { rng.random_range(-cfg.jitter..=cfg.jitter) } else { 0.0 };
            let jy = if cfg.jitter > 0.0 { rng.random_range(-cfg.jitter..=cfg.jitter) } else { 0.0 };
            c.0 += v.0 + jx;
            c.1 += v.1 + jy;
        }
        let w = (base_w * scale).round().max(MIN_OBJECT_SIDE as f64);
        let h = (base_h * scale).round().max(MIN_OBJECT_SIDE as f64);
        // bounce off the frame edges
        let (lo_x, hi_x) = (w / 2.0, fw as f64 - w / 2.0);
        let (lo_y, hi_y) = (h / 2.0, fh as f64 - h / 2.0);
        if c.0 < lo_x || c.0 > hi_x {
            v.0 = -v.0;
            c.0 = c.0.clamp(lo_x, hi_x);
        }
        if c.1 < lo_y || c.1 > hi_y {
            v.1 = -v.1;
            c.1 = c.1.clamp(lo_y, hi_y);
        }
        let rect = (
            (c.0 - w / 2.0).round() as i64,
            (c.1 - h / 2.0).round() as i64,
            w as i64,
            h as i64,
        );
        let rect = (
            rect.0.clamp(0, fw as i64 - rect.2),
            rect.1.clamp(0, fh as i64 - rect.3),
            rect.2,
            rect.3,
        );

        let mut img = RgbImage::new(fw, fh);
        let mut mask = vec![false; (fw * fh) as usize];
        for py in 0..fh {
            for px in 0..fw {
                let inside = covers(cfg.shape, rect, px as i64, py as i64);
                let col = if inside {
                    mask[(py * fw + px) as usize] = true;
                    texture.at((px as i64 - rect.0) as f64, (py as i64 - rect.1) as f64)
                } else {
                    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                    let a = coarse.at(x, y);
                    let b = fine.at(x, y);
                    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
                };
                img.put_pixel(px, py, to_u8(col));
            }
        }
        let b = mask_bbox(&mask, fw).ok_or_else(|| Error::Data(format!("object vanished at frame {t}")))?;
        if b.width() < MIN_OBJECT_SIDE as f64 || b.height() < MIN_OBJECT_SIDE as f64 {
            return Err(Error::Data(format!("object smaller than {MIN_OBJECT_SIDE} px at frame {t}")));
        }
        frames.push(img);
        boxes.push(b);
        masks.push(mask);
    }
    Ok(SyntheticSequence {
        sequence: Sequence {
            name: format!("synthetic_{seed}"),
            frames,
            boxes,
        },
        masks,
    })
}

/// Seed of the `k`-th sequence in a generated dataset.
pub fn sequence_seed(base: u64, k: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(k as u64)
}

/// Generates `count` sequences; shapes alternate rectangle / ellipse.
pub fn generate_dataset(cfg: &SyntheticSequenceConfig, seed: u64, count: usize) -> Result<Vec<Sequence>> {
    (0..count)
        .map(|k| {
            let mut c = cfg.clone();
            c.shape = if k % 2 == 0 { ObjectShape::Rectangle } else { ObjectShape::Ellipse };
            let mut s = generate_synthetic_sequence(&c, sequence_seed(seed, k))?.sequence;
            s.name = format!("seq_{k:03}");
            Ok(s)
        })
        .collect()
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("frames").join(format!("{:08}.png", index + 1))
}

/// Writes `frames/%08d.png` (1-based) and `groundtruth.txt`.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    io(dir, fs::create_dir_all(dir.join("frames")))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save(frame_path(dir, i))?;
    }
    let gt: String = seq
        .boxes
        .iter()
        .map(|b| {
            let [x, y, w, h] = b.to_xywh();
            format!("{x},{y},{w},{h}\n")
        })
        .collect();
    let p = dir.join("groundtruth.txt");
    io(&p, fs::write(&p, gt))
}

pub fn write_dataset(root: &Path, seqs: &[Sequence]) -> Result<()> {
    for s in seqs {
        write_sequence(&root.join(&s.name), s)?;
    }
    Ok(())
}

/// Parses one `x,y,w,h` line (commas, tabs or spaces).
pub fn parse_box_line(line: &str) -> Result<BBox> {
    let v: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("bad annotation line {line:?}: {e}")))?;
    if v.len() < 4 {
        return Err(Error::Data(format!("annotation line {line:?} needs 4 values")));
    }
    if v[2] < 0.0 || v[3] < 0.0 {
        return Err(Error::Data(format!("negative box size in {line:?}")));
    }
    BBox::pixels_xywh(v[0], v[1], v[2], v[3])
}

pub fn read_groundtruth(path: &Path) -> Result<Vec<BBox>> {
    let text = io(path, fs::read_to_string(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_box_line)
        .collect()
}

/// Loads a sequence directory. Frames beyond the annotation count are
/// ignored; missing frames are an error.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let gt_path = dir.join("groundtruth.txt");
    if !gt_path.is_file() {
        return Err(Error::Data(format!("{} has no groundtruth.txt", dir.display())));
    }
    let boxes = read_groundtruth(&gt_path)?;
    let frames = (0..boxes.len())
        .map(|i| {
            let p = frame_path(dir, i);
            if !p.is_file() {
                return Err(Error::Data(format!("missing frame {}", p.display())));
            }
            Ok(image::open(&p)?.to_rgb8())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        name: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        frames,
        boxes,
    })
}

/// Sorted sequence directories under `root`.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = io(root, fs::read_dir(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Loads every readable sequence, skipping ones without annotations.
pub fn read_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for d in list_sequences(root)? {
        if !d.join("groundtruth.txt").is_file() {
            log::warn!("skipping {}: no groundtruth.txt", d.display());
            continue;
        }
        out.push(read_sequence(&d)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no sequences found under {}", root.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Largest search-centre shift as a fraction of the object size.
    pub shift: f64,
    /// Largest log-scale change of the search crop.
    pub scale: f64,
    /// Largest relative brightness change.
    pub brightness: f64,
    /// Largest frame gap between template and search.
    pub max_gap: usize,
    /// Probability of mirroring both patches left to right.
    pub flip: f64,
    /// Apply one random RGB channel permutation to both patches.
    pub channel_shuffle: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift: 0.6,
            scale: 0.2,
            brightness: 0.1,
            max_gap: 30,
            flip: 0.0,
            channel_shuffle: false,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            shift: 0.0,
            scale: 0.0,
            brightness: 0.0,
            max_gap: 0,
            flip: 0.0,
            channel_shuffle: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub template: ImagePatch,
    pub search: ImagePatch,
    /// Ground truth in the normalized search frame.
    pub gt: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    pub template_size: usize,
    pub search_size: usize,
    pub pad_fill: [f32; 3],
}

/// Search crop around `gt` moved by `shift` (frame pixels) and with its
/// side multiplied by `scale`.
pub fn search_geometry(gt: &BBox, shift: (f64, f64), scale: f64, out_size: usize, pad_fill: [f32; 3]) -> CropGeometry {
    let (cx, cy) = gt.center();
    CropGeometry {
        center: (cx + shift.0, cy + shift.1),
        side: crop_side(gt, SEARCH_FACTOR) * scale,
        out_size,
        pad_fill,
    }
}

fn intersects_unit(b: &BBox) -> bool {
    b.x1 < 1.0 && b.x2 > 0.0 && b.y1 < 1.0 && b.y2 > 0.0
}

fn brighten(p: &mut ImagePatch, factor: f32) {
    for v in &mut p.pixels {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

fn mirror(p: &mut ImagePatch) {
    let n = p.size;
    for row in p.pixels.chunks_mut(n * 3) {
        for x in 0..n / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (n - 1 - x) * 3 + c);
            }
        }
    }
}

fn permute_channels(p: &mut ImagePatch, order: [usize; 3]) {
    for px in p.pixels.chunks_mut(3) {
        let v = [px[0], px[1], px[2]];
        for c in 0..3 {
            px[c] = v[order[c]];
        }
    }
}

/// Draws a template/search pair from one sequence. A single-frame source
/// pairs the frame with itself.
pub fn sample_training_pair(
    seq: &Sequence,
    aug: &AugmentConfig,
    geo: &PairGeometry,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair> {
    if seq.is_empty() || seq.boxes.len() != seq.frames.len() {
        return Err(Error::Data(format!("sequence {} is empty or unannotated", seq.name)));
    }
    let n = seq.len();
    let i = rng.random_range(0..n);
    let lo = i.saturating_sub(aug.max_gap);
    let hi = (i + aug.max_gap).min(n - 1);
    let j = rng.random_range(lo..=hi);
    let (tb, sb) = (&seq.boxes[i], &seq.boxes[j]);

    let (mut template, _) = crop_patch(
        &seq.frames[i],
        tb,
        TEMPLATE_FACTOR,
        geo.template_size,
        geo.pad_fill,
        PatchRole::Template,
    )?;
    let (sw, sh) = (sb.width(), sb.height());
    let mut geometry = search_geometry(sb, (0.0, 0.0), 1.0, geo.search_size, geo.pad_fill);
    let mut gt = encode_box(sb, &geometry);
    for _ in 0..100 {
        let dx = if aug.shift > 0.0 { rng.random_range(-aug.shift..=aug.shift) * sw } else { 0.0 };
        let dy = if aug.shift > 0.0 { rng.random_range(-aug.shift..=aug.shift) * sh } else { 0.0 };
        let s = if aug.scale > 0.0 { rng.random_range(-aug.scale..=aug.scale).exp() } else { 1.0 };
        let g = search_geometry(sb, (dx, dy), s, geo.search_size, geo.pad_fill);
        let cand = encode_box(sb, &g);
        if intersects_unit(&cand) {
            geometry = g;
            gt = cand;
            break;
        }
    }
    let mut search = resample(&seq.frames[j], &geometry, PatchRole::Search)?;
    if aug.brightness > 0.0 {
        let f = 1.0 + rng.random_range(-aug.brightness..=aug.brightness) as f32;
        brighten(&mut template, f);
        let f = 1.0 + rng.random_range(-aug.brightness..=aug.brightness) as f32;
        brighten(&mut search, f);
    }
    if aug.flip > 0.0 && rng.random_bool(aug.flip.min(1.0)) {
        mirror(&mut template);
        mirror(&mut search);
        gt = BBox::from_corners(1.0 - gt.x2, gt.y1, 1.0 - gt.x1, gt.y2, gt.frame);
    }
    if aug.channel_shuffle {
        let mut order = [0, 1, 2];
        order.shuffle(rng);
        permute_channels(&mut template, order);
        permute_channels(&mut search, order);
    }
    Ok(TrainingPair { template, search, gt })
}
