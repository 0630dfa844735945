//! Per-image IoU, MAE and balanced error rate, averaged over a dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_len(pred: &[f64], gt: &[bool]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} pixels, mask has {}", pred.len(), gt.len())));
    }
    Ok(())
}

/// Binarizes `pred` at `threshold` (inclusive) and tallies against `gt`.
pub fn confusion(pred: &[f64], gt: &[bool], threshold: f64) -> Result<ConfusionCounts> {
    check_len(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= threshold, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `tp / (tp + fp + fn)`, or 1 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Mean absolute difference between soft prediction and mask.
pub fn mae(pred: &[f64], gt: &[bool]) -> Result<f64> {
    check_len(pred, gt)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(gt).map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Balanced error rate in percent. Classes absent from the mask are left out
/// of the average.
pub fn ber(c: &ConfusionCounts) -> f64 {
    let np = c.tp + c.fn_;
    let nn = c.tn + c.fp;
    let mut rates = Vec::with_capacity(2);
    if np > 0 {
        rates.push(c.tp as f64 / np as f64);
    }
    if nn > 0 {
        rates.push(c.tn as f64 / nn as f64);
    }
    if rates.is_empty() {
        return 0.0;
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    100.0 * (1.0 - mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub mae: f64,
    pub ber: f64,
}

impl ImageMetrics {
    pub fn compute(id: &str, pred: &[f64], gt: &[bool], threshold: f64) -> Result<Self> {
        let c = confusion(pred, gt, threshold)?;
        Ok(Self { id: id.to_string(), iou: iou(&c), mae: mae(pred, gt)?, ber: ber(&c) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    /// Mean IoU in percent.
    pub miou: f64,
    pub mae: f64,
    /// Mean BER in percent.
    pub mber: f64,
    pub n_images: usize,
}

impl MetricReport {
    /// Sorts by id and recomputes the aggregates.
    pub fn from_images(mut per_image: Vec<ImageMetrics>) -> Self {
        per_image.sort_by(|a, b| a.id.cmp(&b.id));
        let n = per_image.len();
        let mean = |f: fn(&ImageMetrics) -> f64| if n == 0 { 0.0 } else { per_image.iter().map(f).sum::<f64>() / n as f64 };
        let miou = 100.0 * mean(|m| m.iou);
        let mae = mean(|m| m.mae);
        let mber = mean(|m| m.ber);
        Self { per_image, miou, mae, mber, n_images: n }
    }

    pub fn merge(self, other: MetricReport) -> Self {
        let mut all = self.per_image;
        all.extend(other.per_image);
        Self::from_images(all)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for m in &self.per_image {
            w.serialize(m).map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
        write_file(path, &bytes)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One prediction/ground-truth pair.
pub struct EvalPair<'a> {
    pub id: &'a str,
    pub pred: &'a [f64],
    pub gt: &'a [bool],
}

pub fn evaluate_dataset<'a>(pairs: impl IntoIterator<Item = EvalPair<'a>>, threshold: f64) -> Result<MetricReport> {
    let per_image = pairs
        .into_iter()
        .map(|p| ImageMetrics::compute(p.id, p.pred, p.gt, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_images(per_image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ber_worked_example() {
        let c = ConfusionCounts { tp: 8, fn_: 2, tn: 6, fp: 4 };
        assert!((ber(&c) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn iou_cases() {
        let gt = [true, true, true, true, false, false, false, false];
        let pred = [1.0; 8];
        assert_eq!(iou(&confusion(&pred, &gt, 0.5).unwrap()), 0.5);
        assert_eq!(iou(&ConfusionCounts { tn: 5, ..Default::default() }), 1.0);
        assert_eq!(iou(&ConfusionCounts { fp: 3, tn: 5, ..Default::default() }), 0.0);
    }

    #[test]
    fn extremes() {
        let gt = [true, false, true, false];
        let hard: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
        let inv: Vec<f64> = hard.iter().map(|v| 1.0 - v).collect();
        let c = confusion(&hard, &gt, 0.5).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(ber(&c), 0.0);
        let c = confusion(&inv, &gt, 0.5).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(ber(&c), 100.0);
        assert_eq!(mae(&[0.5; 4], &gt).unwrap(), 0.5);
    }

    #[test]
    fn report_means() {
        let r = MetricReport::from_images(vec![
            ImageMetrics { id: "b".into(), iou: 0.5, mae: 0.2, ber: 10.0 },
            ImageMetrics { id: "a".into(), iou: 1.0, mae: 0.0, ber: 0.0 },
        ]);
        assert_eq!(r.miou, 75.0);
        assert_eq!(r.per_image[0].id, "a");
        assert_eq!(r.n_images, 2);
    }

    #[test]
    fn length_mismatch() {
        assert!(confusion(&[0.1], &[true, false], 0.5).is_err());
    }
}
