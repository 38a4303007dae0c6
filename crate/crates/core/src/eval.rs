//! One-pass evaluation: per-frame errors, success and precision curves,
//! and dataset reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{list_sequences, read_sequence, Sequence};
use crate::error::{Error, Result};
use crate::tracker::format_result_line;
use crate::types::BBox;

pub const SUCCESS_THRESHOLDS: usize = 21;
pub const NORM_PRECISION_THRESHOLDS: usize = 101;
pub const PRECISION_THRESHOLDS: usize = 51;
pub const PRECISION_PX: f64 = 20.0;

/// IoU threshold `k` of the success curve.
pub fn success_threshold(k: usize) -> f64 {
    k as f64 / 20.0
}

pub fn norm_precision_threshold(k: usize) -> f64 {
    k as f64 / 200.0
}

pub fn precision_threshold(k: usize) -> f64 {
    k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub pred: BBox,
    pub gt: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub iou: f64,
    pub center_error: f64,
    pub normalized_error: f64,
}

/// `None` for a zero-area ground truth (the frame is excluded).
pub fn frame_metrics(r: &FrameResult) -> Option<FrameMetrics> {
    let (gw, gh) = (r.gt.width(), r.gt.height());
    if !(gw > 0.0 && gh > 0.0) {
        log::warn!("excluding a frame with zero-area ground truth {:?}", r.gt.as_array());
        return None;
    }
    let (pc, gc) = (r.pred.center(), r.gt.center());
    let (dx, dy) = (pc.0 - gc.0, pc.1 - gc.1);
    Some(FrameMetrics {
        iou: r.pred.iou(&r.gt).clamp(0.0, 1.0),
        center_error: dx.hypot(dy),
        normalized_error: (dx / gw).hypot(dy / gh),
    })
}

fn nonempty(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Data(format!("{what} of an empty frame list")));
    }
    Ok(())
}

fn fraction(v: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    v.iter().filter(|&&x| pred(x)).count() as f64 / v.len() as f64
}

/// Fraction of frames with IoU strictly above each threshold.
pub fn success_curve(ious: &[f64]) -> Result<Vec<f64>> {
    nonempty(ious, "success curve")?;
    Ok((0..SUCCESS_THRESHOLDS)
        .map(|k| fraction(ious, |x| x > success_threshold(k)))
        .collect())
}

pub fn success_auc(ious: &[f64]) -> Result<f64> {
    let c = success_curve(ious)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

/// Fraction of frames with centre error at most `tau` pixels.
pub fn precision_at(errors_px: &[f64], tau: f64) -> Result<f64> {
    nonempty(errors_px, "precision")?;
    Ok(fraction(errors_px, |e| e <= tau))
}

pub fn precision_curve(errors_px: &[f64]) -> Result<Vec<f64>> {
    nonempty(errors_px, "precision curve")?;
    Ok((0..PRECISION_THRESHOLDS)
        .map(|k| fraction(errors_px, |e| e <= precision_threshold(k)))
        .collect())
}

pub fn norm_precision_curve(norm_errors: &[f64]) -> Result<Vec<f64>> {
    nonempty(norm_errors, "normalized precision curve")?;
    Ok((0..NORM_PRECISION_THRESHOLDS)
        .map(|k| fraction(norm_errors, |e| e <= norm_precision_threshold(k)))
        .collect())
}

pub fn norm_precision_auc(norm_errors: &[f64]) -> Result<f64> {
    let c = norm_precision_curve(norm_errors)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

/// `(AO, SR@0.5, SR@0.75)`.
pub fn ao_sr(ious: &[f64]) -> Result<(f64, f64, f64)> {
    nonempty(ious, "average overlap")?;
    let ao = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok((ao, fraction(ious, |x| x > 0.5), fraction(ious, |x| x > 0.75)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub success_auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub success_curve: Vec<f64>,
    pub precision_curve: Vec<f64>,
    pub norm_precision_curve: Vec<f64>,
}

impl Summary {
    pub fn from_metrics(m: &[FrameMetrics]) -> Result<Self> {
        let ious: Vec<f64> = m.iter().map(|f| f.iou).collect();
        let ce: Vec<f64> = m.iter().map(|f| f.center_error).collect();
        let ne: Vec<f64> = m.iter().map(|f| f.normalized_error).collect();
        let (ao, sr50, sr75) = ao_sr(&ious)?;
        Ok(Self {
            frames: m.len(),
            success_auc: success_auc(&ious)?,
            precision: precision_at(&ce, PRECISION_PX)?,
            norm_precision: norm_precision_auc(&ne)?,
            ao,
            sr50,
            sr75,
            success_curve: success_curve(&ious)?,
            precision_curve: precision_curve(&ce)?,
            norm_precision_curve: norm_precision_curve(&ne)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceReport>,
    pub overall: Summary,
}

impl EvalReport {
    /// Per-sequence summaries plus the summary over all frames pooled.
    pub fn from_results(results: &[(String, Vec<FrameResult>)]) -> Result<Self> {
        let mut sequences = Vec::new();
        let mut pooled = Vec::new();
        for (name, frames) in results {
            let m: Vec<FrameMetrics> = frames.iter().filter_map(frame_metrics).collect();
            if m.is_empty() {
                log::warn!("sequence {name} has no scorable frames; skipped");
                continue;
            }
            sequences.push(SequenceReport {
                name: name.clone(),
                summary: Summary::from_metrics(&m)?,
            });
            pooled.extend(m);
        }
        if pooled.is_empty() {
            return Err(Error::Data("no scorable frames in the dataset".into()));
        }
        Ok(Self {
            sequences,
            overall: Summary::from_metrics(&pooled)?,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes one `x,y,w,h,score` line per frame.
pub fn write_results(path: &Path, preds: &[(BBox, f64)]) -> Result<()> {
    let text: String = preds
        .iter()
        .map(|(b, s)| format_result_line(b, *s) + "\n")
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One-pass evaluation over every sequence directory under `dataset`.
/// `track` returns one `(box, score)` per frame, the first being the
/// initialization. Raw results go to `out/results/<name>.txt` and the
/// report to `out/report.json`.
pub fn run_ope_with(
    dataset: &Path,
    out: &Path,
    mut track: impl FnMut(&Sequence) -> Result<Vec<(BBox, f64)>>,
) -> Result<EvalReport> {
    let res_dir = out.join("results");
    fs::create_dir_all(&res_dir).map_err(|e| Error::io(&res_dir, e))?;
    let mut all = Vec::new();
    for dir in list_sequences(dataset)? {
        if !dir.join("groundtruth.txt").is_file() {
            log::warn!("skipping {}: no ground truth", dir.display());
            continue;
        }
        let seq = read_sequence(&dir)?;
        if seq.is_empty() {
            log::warn!("skipping {}: empty ground truth", dir.display());
            continue;
        }
        let preds = track(&seq)?;
        if preds.len() != seq.len() {
            return Err(Error::Data(format!(
                "tracker produced {} boxes for {} frames of {}",
                preds.len(),
                seq.len(),
                seq.name
            )));
        }
        write_results(&res_dir.join(format!("{}.txt", seq.name)), &preds)?;
        let frames = preds
            .iter()
            .zip(&seq.boxes)
            .map(|((p, s), g)| FrameResult {
                pred: *p,
                gt: *g,
                score: *s,
            })
            .collect();
        all.push((seq.name.clone(), frames));
    }
    let report = EvalReport::from_results(&all)?;
    report.write_json(&out.join("report.json"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BoxFrame;

    fn px(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corners(x1, y1, x2, y2, BoxFrame::ImagePixels)
    }

    #[test]
    fn overlapping_squares() {
        let r = FrameResult {
            pred: px(0.0, 0.0, 2.0, 2.0),
            gt: px(1.0, 1.0, 3.0, 3.0),
            score: 1.0,
        };
        let m = frame_metrics(&r).unwrap();
        assert!((m.iou - 1.0 / 7.0).abs() < 1e-15);
        assert!((m.center_error - 2f64.sqrt()).abs() < 1e-15);
        assert!((m.normalized_error - (0.5f64).hypot(0.5)).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint() {
        let b = px(3.0, 4.0, 10.0, 12.0);
        let m = frame_metrics(&FrameResult { pred: b, gt: b, score: 0.0 }).unwrap();
        assert_eq!((m.iou, m.center_error, m.normalized_error), (1.0, 0.0, 0.0));
        let m = frame_metrics(&FrameResult { pred: px(20.0, 20.0, 30.0, 30.0), gt: b, score: 0.0 }).unwrap();
        assert_eq!(m.iou, 0.0);
    }

    #[test]
    fn zero_area_gt_excluded() {
        let r = FrameResult {
            pred: px(0.0, 0.0, 1.0, 1.0),
            gt: px(1.0, 1.0, 1.0, 3.0),
            score: 1.0,
        };
        assert!(frame_metrics(&r).is_none());
    }

    #[test]
    fn perfect_ious_score_twenty_of_twenty_one() {
        assert_eq!(success_auc(&[1.0; 7]).unwrap(), 20.0 / 21.0);
        assert_eq!(success_auc(&[0.0; 7]).unwrap(), 0.0);
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at(&[10.0, 30.0], 20.0).unwrap(), 0.5);
        assert_eq!(precision_at(&[0.0, 0.0], 20.0).unwrap(), 1.0);
        assert_eq!(norm_precision_auc(&[0.0; 3]).unwrap(), 1.0);
    }

    #[test]
    fn ao_sr_examples() {
        assert_eq!(ao_sr(&[1.0, 1.0]).unwrap(), (1.0, 1.0, 1.0));
        let (ao, s5, s75) = ao_sr(&[0.6, 0.8]).unwrap();
        assert!((ao - 0.7).abs() < 1e-15);
        assert_eq!((s5, s75), (1.0, 0.5));
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(success_auc(&[]).is_err());
        assert!(precision_at(&[], 20.0).is_err());
        assert!(norm_precision_auc(&[]).is_err());
        assert!(ao_sr(&[]).is_err());
    }
}
