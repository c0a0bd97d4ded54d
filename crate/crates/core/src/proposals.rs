//! Top-N proposal selection over score maps, with proposal features cropped
//! straight out of the search-region feature map instead of re-embedding
//! each candidate window.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::matcher::{EmbeddingArch, ScoreMapSet, SearchGeometry, SiameseMatcher};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub scale_index: usize,
    pub row: usize,
    pub col: usize,
    /// Ranking value: the score after the scale penalty.
    pub confidence: f64,
    pub raw_score: f64,
    pub bbox: BBox,
    /// `[C, F, F]` features of the candidate window.
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
    pub requested: usize,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    /// Flattened channel-major feature vectors, one per proposal.
    pub fn flattened_features(&self) -> Vec<&[f64]> {
        self.proposals.iter().map(|p| p.features.data()).collect()
    }
}

/// How proposal features are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMode {
    /// Embed each proposal's image window separately.
    PerProposal,
    /// Slice each proposal out of the already computed search features.
    Cropped,
}

/// A scored cell, ordered by descending rank then `(scale, row, col)`.
#[derive(Debug, Clone, Copy)]
pub struct ScoredCell {
    pub rank: f64,
    pub raw: f64,
    pub scale_index: usize,
    pub row: usize,
    pub col: usize,
}

pub(crate) fn cell_order(a: &ScoredCell, b: &ScoredCell) -> Ordering {
    b.rank
        .total_cmp(&a.rank)
        .then(a.scale_index.cmp(&b.scale_index))
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

/// Every score cell across all scales, best first.
pub fn ranked_cells(maps: &ScoreMapSet) -> Vec<ScoredCell> {
    let mut cells = Vec::with_capacity(maps.cell_count());
    for (si, level) in maps.levels.iter().enumerate() {
        let cols = level.scores.shape()[1];
        for (i, &raw) in level.scores.data().iter().enumerate() {
            cells.push(ScoredCell {
                rank: maps.penalized(si, raw),
                raw,
                scale_index: si,
                row: i / cols,
                col: i % cols,
            });
        }
    }
    cells.sort_unstable_by(cell_order);
    cells
}

/// The `n` best cells across all scales, ties broken by `(scale, row, col)`,
/// each carrying features cropped from its scale's search feature map.
pub fn select_top(maps: &ScoreMapSet, n: usize) -> Result<ProposalSet> {
    if n == 0 {
        return Err(Error::Argument("select_top: n must be at least 1".into()));
    }
    if maps.cell_count() == 0 {
        return Err(Error::Argument("select_top: empty score maps".into()));
    }
    let mut cells = ranked_cells(maps);
    cells.truncate(n);
    let extent = maps.extents.template;
    let proposals = cells
        .into_iter()
        .map(|c| {
            Ok(Proposal {
                scale_index: c.scale_index,
                row: c.row,
                col: c.col,
                confidence: c.rank,
                raw_score: c.raw,
                bbox: maps.box_for(c.scale_index, c.row, c.col),
                features: crop_features(&maps.levels[c.scale_index].features, c.row, c.col, extent)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProposalSet { proposals, requested: n })
}

/// `extent x extent` spatial block of `search_features` at `(row, col)`.
pub fn crop_features(search_features: &Tensor, row: usize, col: usize, extent: usize) -> Result<Tensor> {
    search_features.spatial_crop(row, col, extent, extent).map_err(|e| match e {
        Error::Geometry(msg) => Error::Geometry(format!("proposal feature crop: {}", msg)),
        other => other,
    })
}

/// Replaces every proposal's features with an independent embedding of its
/// search-image window.
pub fn reembed(set: &mut ProposalSet, maps: &ScoreMapSet, matcher: &SiameseMatcher) -> Result<()> {
    for p in &mut set.proposals {
        let window = maps.subwindow(p.scale_index, p.row, p.col)?;
        p.features = matcher.embed(&window)?;
    }
    Ok(())
}

/// Largest absolute difference between each proposal's cropped features and
/// a fresh embedding of its image window.
pub fn max_crop_discrepancy(set: &ProposalSet, maps: &ScoreMapSet, matcher: &SiameseMatcher) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in &set.proposals {
        let window = maps.subwindow(p.scale_index, p.row, p.col)?;
        let direct = matcher.embed(&window)?;
        if direct.shape() != p.features.shape() {
            return Err(Error::Geometry(format!(
                "cropped features {:?} vs re-embedded {:?}",
                p.features.shape(),
                direct.shape()
            )));
        }
        worst = worst.max(direct.max_abs_diff(&p.features));
    }
    Ok(worst)
}

/// Multiply-accumulates spent extracting features for `n` proposals.
///
/// Cropping costs one search-region embedding however many proposals are
/// taken; embedding each proposal costs `n` exemplar-sized embeddings.
pub fn count_embed_flops(arch: &EmbeddingArch, geometry: &SearchGeometry, mode: ExtractionMode, n: usize) -> u64 {
    match mode {
        ExtractionMode::Cropped => arch.macs(geometry.search_size, geometry.search_size).unwrap_or(0),
        ExtractionMode::PerProposal => {
            n as u64 * arch.macs(geometry.exemplar_size, geometry.exemplar_size).unwrap_or(0)
        }
    }
}
