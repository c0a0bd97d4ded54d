//! One-pass-evaluation metrics: center-error precision and overlap success.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};

/// Largest center-error threshold, in pixels.
pub const PRECISION_MAX_PX: usize = 50;
/// Center-error threshold reported as the headline precision.
pub const PRECISION_AT: usize = 20;
/// Success thresholds are `k / SUCCESS_STEPS` for `k = 0..=SUCCESS_STEPS`.
pub const SUCCESS_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

fn check_aligned(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Argument(format!("{} predictions vs {} ground-truth boxes", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Argument("no frames to evaluate".into()));
    }
    Ok(())
}

/// Fraction of frames whose center error is at most `tau`, for
/// `tau = 0, 1, ..., 50` px, plus the value at 20 px.
pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<(Curve, f64)> {
    check_aligned(pred, gt)?;
    let errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect();
    let n = errors.len() as f64;
    let thresholds: Vec<f64> = (0..=PRECISION_MAX_PX).map(|t| t as f64).collect();
    let values = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect::<Vec<_>>();
    let at = values[PRECISION_AT];
    Ok((Curve { thresholds, values }, at))
}

/// Fraction of frames whose IoU strictly exceeds `theta`, for
/// `theta = 0, 0.02, ..., 1`, plus the mean of those 51 values.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<(Curve, f64)> {
    check_aligned(pred, gt)?;
    let overlaps: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let n = overlaps.len() as f64;
    let thresholds: Vec<f64> = (0..=SUCCESS_STEPS).map(|k| k as f64 / SUCCESS_STEPS as f64).collect();
    let values: Vec<f64> = thresholds
        .iter()
        .map(|&t| overlaps.iter().filter(|&&o| o > t).count() as f64 / n)
        .collect();
    let auc = values.iter().sum::<f64>() / values.len() as f64;
    Ok((Curve { thresholds, values }, auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub sequences: usize,
    pub frames: usize,
    pub precision: Curve,
    pub precision_at_20: f64,
    pub success: Curve,
    pub auc: f64,
}

impl MetricSummary {
    /// Pools every frame of every `(predictions, ground truth)` pair.
    pub fn pooled(runs: &[(&[BBox], &[BBox])]) -> Result<Self> {
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for (p, g) in runs {
            check_aligned(p, g)?;
            pred.extend_from_slice(p);
            gt.extend_from_slice(g);
        }
        let (precision, precision_at_20) = precision_curve(&pred, &gt)?;
        let (success, auc) = success_auc(&pred, &gt)?;
        Ok(Self { sequences: runs.len(), frames: pred.len(), precision, precision_at_20, success, auc })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub attributes: Vec<String>,
    pub frames: usize,
    pub precision_at_20: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: MetricSummary,
    pub sequences: Vec<SequenceMetrics>,
    /// Pooled metrics over the sequences carrying each attribute tag.
    pub attributes: BTreeMap<String, MetricSummary>,
}

/// One evaluated sequence.
pub struct EvalInput<'a> {
    pub name: &'a str,
    pub attributes: &'a [String],
    pub predictions: &'a [BBox],
    pub ground_truth: &'a [BBox],
}

pub fn metric_report(inputs: &[EvalInput<'_>]) -> Result<MetricReport> {
    if inputs.is_empty() {
        return Err(Error::Argument("no sequences to evaluate".into()));
    }
    let mut sequences = Vec::with_capacity(inputs.len());
    for i in inputs {
        check_aligned(i.predictions, i.ground_truth).map_err(|e| Error::Argument(format!("{}: {}", i.name, e)))?;
        let (_, p20) = precision_curve(i.predictions, i.ground_truth)?;
        let (_, auc) = success_auc(i.predictions, i.ground_truth)?;
        sequences.push(SequenceMetrics {
            name: i.name.into(),
            attributes: i.attributes.to_vec(),
            frames: i.predictions.len(),
            precision_at_20: p20,
            auc,
        });
    }
    let all: Vec<(&[BBox], &[BBox])> = inputs.iter().map(|i| (i.predictions, i.ground_truth)).collect();
    let overall = MetricSummary::pooled(&all)?;
    let mut tags: Vec<&String> = inputs.iter().flat_map(|i| i.attributes.iter()).collect();
    tags.sort();
    tags.dedup();
    let mut attributes = BTreeMap::new();
    for tag in tags {
        let runs: Vec<(&[BBox], &[BBox])> = inputs
            .iter()
            .filter(|i| i.attributes.contains(tag))
            .map(|i| (i.predictions, i.ground_truth))
            .collect();
        attributes.insert(tag.clone(), MetricSummary::pooled(&runs)?);
    }
    Ok(MetricReport { overall, sequences, attributes })
}
