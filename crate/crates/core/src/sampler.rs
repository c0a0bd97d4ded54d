//! Training samples for the online classifier: Gaussian jitter around the
//! estimated box, and hard negatives read off the score maps.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::matcher::{ScoreMapSet, SiameseMatcher};
use crate::proposals::{crop_features, ranked_cells};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub pos_iou_min: f64,
    pub neg_iou_max: f64,
    /// Positive translation spread, as a fraction of box width/height.
    pub sigma_xy: f64,
    /// Negative translation spread, as a fraction of box width/height.
    pub sigma_xy_negative: f64,
    /// Spread of the log scale factor.
    pub sigma_scale: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Hard negatives mined from the score maps on top of the Gaussian ones.
    pub hard_negatives: usize,
    /// Draws allowed per requested sample before giving up.
    pub attempts_per_sample: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            pos_iou_min: 0.7,
            neg_iou_max: 0.3,
            sigma_xy: 0.1,
            sigma_xy_negative: 1.0,
            sigma_scale: 0.2,
            positives: 32,
            negatives: 96,
            hard_negatives: 16,
            attempts_per_sample: 50,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.pos_iou_min)
            && (0.0..=1.0).contains(&self.neg_iou_max)
            && self.neg_iou_max < self.pos_iou_min
            && self.sigma_xy >= 0.0
            && self.sigma_xy_negative >= 0.0
            && self.sigma_scale >= 0.0
            && self.sigma_scale.is_finite()
            && self.positives > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid sampler settings {:?}", self)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Gaussian,
    HardMined,
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Exemplar-sized image patch.
    pub patch: Tensor,
    pub bbox: BBox,
    pub provenance: Provenance,
    /// Embedded features when they came for free (hard negatives).
    pub features: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SamplePatchSet {
    pub positives: Vec<Sample>,
    pub negatives: Vec<Sample>,
}

impl SamplePatchSet {
    /// True when every sample's IoU with `center` agrees with its label.
    /// Generated positives carry the nominal center box and are skipped.
    pub fn labels_consistent(&self, center: &BBox, cfg: &SamplerConfig) -> bool {
        self.positives
            .iter()
            .filter(|s| s.provenance != Provenance::Generated)
            .all(|s| iou(&s.bbox, center) >= cfg.pos_iou_min)
            && self.negatives.iter().all(|s| iou(&s.bbox, center) <= cfg.neg_iou_max)
    }
}

fn jitter<R: Rng + ?Sized>(center: &BBox, sigma_xy: f64, sigma_scale: f64, rng: &mut R) -> BBox {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (cx, cy) = center.center();
    let dx = sigma_xy * center.w * unit.sample(rng);
    let dy = sigma_xy * center.h * unit.sample(rng);
    let s = libm::exp(sigma_scale * unit.sample(rng));
    BBox::from_center(cx + dx, cy + dy, center.w * s, center.h * s)
}

fn draw<R, F>(center: &BBox, sigma_xy: f64, count: usize, cfg: &SamplerConfig, frame: (f64, f64), accept: F, rng: &mut R) -> Vec<BBox>
where
    R: Rng + ?Sized,
    F: Fn(f64) -> bool,
{
    let mut out = Vec::with_capacity(count);
    let budget = count.saturating_mul(cfg.attempts_per_sample);
    for _ in 0..budget {
        if out.len() == count {
            break;
        }
        let b = jitter(center, sigma_xy, cfg.sigma_scale, rng);
        let (cx, cy) = b.center();
        if !(0.0..=frame.0).contains(&cx) || !(0.0..=frame.1).contains(&cy) {
            continue;
        }
        if accept(iou(&b, center)) {
            out.push(b);
        }
    }
    out
}

/// Candidate boxes jittered around `center_box`, labelled by IoU and cropped
/// to exemplar-sized patches. Fewer than the requested counts are returned
/// when the attempt budget runs out; zero positives is an error.
pub fn draw_gaussian_samples<R: Rng + ?Sized>(
    frame: &Tensor,
    center_box: &BBox,
    cfg: &SamplerConfig,
    matcher: &SiameseMatcher,
    rng: &mut R,
) -> Result<SamplePatchSet> {
    cfg.validate()?;
    let (_, h, w) = frame.chw("draw_gaussian_samples")?;
    let size = (w as f64, h as f64);
    let (cx, cy) = center_box.center();
    if center_box.is_degenerate() || !(0.0..=size.0).contains(&cx) || !(0.0..=size.1).contains(&cy) {
        return Err(Error::Sampling(format!("center box {:?} is not inside the frame", center_box)));
    }
    let pos = draw(center_box, cfg.sigma_xy, cfg.positives, cfg, size, |v| v >= cfg.pos_iou_min, rng);
    if pos.is_empty() {
        return Err(Error::Sampling(format!(
            "no positive sample with IoU >= {} after {} draws",
            cfg.pos_iou_min,
            cfg.positives * cfg.attempts_per_sample
        )));
    }
    let neg = draw(center_box, cfg.sigma_xy_negative, cfg.negatives, cfg, size, |v| v <= cfg.neg_iou_max, rng);
    let frame = matcher.prepare_frame(frame)?;
    let to_samples = |boxes: Vec<BBox>| {
        boxes
            .into_iter()
            .map(|b| {
                Ok(Sample {
                    patch: matcher.exemplar_patch(&frame, &b, 1.0)?,
                    bbox: b,
                    provenance: Provenance::Gaussian,
                    features: None,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(SamplePatchSet { positives: to_samples(pos)?, negatives: to_samples(neg)? })
}

/// The `k` highest-ranked score cells whose boxes overlap `estimated_box` by
/// at most `neg_iou_max`, best first. Patches and features are read out of
/// the search images and feature maps already held by `maps`.
pub fn hard_negative_mine(maps: &ScoreMapSet, estimated_box: &BBox, k: usize, neg_iou_max: f64) -> Result<Vec<Sample>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(k);
    for cell in ranked_cells(maps) {
        let b = maps.box_for(cell.scale_index, cell.row, cell.col);
        if iou(&b, estimated_box) > neg_iou_max {
            continue;
        }
        let features = crop_features(&maps.levels[cell.scale_index].features, cell.row, cell.col, maps.extents.template)?;
        out.push(Sample {
            patch: maps.subwindow(cell.scale_index, cell.row, cell.col)?,
            bbox: b,
            provenance: Provenance::HardMined,
            features: Some(features),
        });
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}
