//! Offline training of the matching embedding on synthetic exemplar/search
//! pairs with a balanced logistic loss over the score map.
//!
//! The target sits near the search center, shifted by a random whole number
//! of feature strides. Score cells within `positive_radius` cells of the
//! target are labelled +1, all others -1.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamSet, Parameters};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::crop_resize;
use crate::matcher::{Embedding, SearchGeometry};
use crate::ops;
use crate::sequence::Sequence;
use crate::synth::{synth_sequence, Distractor, SynthSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Score-map side used during training; odd, so the map has a center.
    pub score_extent: usize,
    pub positive_radius: f64,
    /// Largest random target shift, in feature strides.
    pub max_shift: usize,
    /// Largest frame gap between exemplar and search.
    pub max_gap: usize,
    /// Multiplier applied to raw correlations before the logistic loss.
    pub score_scale: f64,
    pub adam: AdamConfig,
    /// Synthetic training sequences rendered up front.
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub seed: u64,
}

impl Default for PairTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            score_extent: 25,
            positive_radius: 1.5,
            max_shift: 8,
            max_gap: 5,
            score_scale: 1e-2,
            adam: AdamConfig { learning_rate: 3e-3, ..AdamConfig::default() },
            sequences: 32,
            frames_per_sequence: 6,
            seed: 0,
        }
    }
}

/// Loss trajectory of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTrainLog {
    pub losses: Vec<f64>,
    /// Fraction of pairs in each step whose score argmax is a positive cell.
    pub hit_rates: Vec<f64>,
}

/// A random but valid synthetic sequence for embedding training.
pub fn random_training_spec<R: Rng + ?Sized>(rng: &mut R, frames: usize) -> SynthSpec {
    let size = 192.0;
    let side: f64 = rng.random_range(20.0..48.0);
    let aspect: f64 = rng.random_range(0.75..1.33);
    let (w, h) = (side * aspect, side);
    let frames_f = frames.max(1) as f64;
    let max_v = 4.0;
    let margin = max_v * frames_f + 2.0 + 1.1 * w.max(h) * 0.3;
    let x = rng.random_range(margin..(size - w - margin).max(margin + 1.0));
    let y = rng.random_range(margin..(size - h - margin).max(margin + 1.0));
    let distractors = (0..rng.random_range(0..3usize))
        .map(|_| Distractor {
            x: rng.random_range(0.0..size - w),
            y: rng.random_range(0.0..size - h),
            velocity: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            same_texture: false,
        })
        .collect();
    SynthSpec {
        name: "train".into(),
        seed: rng.random(),
        frames,
        width: size as usize,
        height: size as usize,
        object: BBox::new(x, y, w, h),
        velocity: [rng.random_range(-max_v..max_v), rng.random_range(-max_v..max_v)],
        scale_drift: rng.random_range(0.98..1.02),
        deformation: rng.random_range(0.0..0.5),
        illumination: rng.random_range(0.8..1.2),
        object_cells: rng.random_range(2..6),
        background_cell: rng.random_range(8.0..32.0),
        background_contrast: rng.random_range(0.2..0.9),
        pixel_noise: rng.random_range(0.0..0.03),
        distractors,
        ..SynthSpec::default()
    }
}

/// Renders `count` random training sequences; specs that leave the frame are redrawn.
pub fn training_sequences<R: Rng + ?Sized>(rng: &mut R, count: usize, frames: usize) -> Result<Vec<Sequence>> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count.max(1) {
            return Err(Error::Spec("could not draw valid training sequences".into()));
        }
        match synth_sequence(&random_training_spec(rng, frames)) {
            Ok(s) => out.push(s),
            Err(Error::Spec(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// One labelled exemplar/search pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub exemplar: Tensor,
    pub search: Tensor,
    /// Score cell `(row, col)` the target center falls on.
    pub target_cell: (usize, usize),
}

/// Search-image side that yields a `score_extent` map for `geometry`.
pub fn training_search_size(geometry: &SearchGeometry, stride: usize, score_extent: usize) -> usize {
    geometry.exemplar_size + stride * (score_extent - 1)
}

/// Crops a pair from frames `i` (exemplar) and `j` (search) of `seq`, with the
/// search window displaced by `shift` strides.
pub fn make_pair(
    seq: &Sequence,
    geometry: &SearchGeometry,
    stride: usize,
    score_extent: usize,
    (i, j): (usize, usize),
    shift: (i64, i64),
) -> Result<TrainingPair> {
    let n = geometry.exemplar_size;
    let a = &seq.ground_truth[i];
    let b = &seq.ground_truth[j];
    let exemplar = crop_resize(&seq.frames[i], &geometry.exemplar_region(a, 1.0), n, n)?;
    let side = training_search_size(geometry, stride, score_extent);
    let ratio = side as f64 / n as f64;
    let ex = geometry.exemplar_region(b, 1.0);
    let (px, py) = (ex.w * ratio / side as f64, ex.h * ratio / side as f64);
    let (cx, cy) = ex.center();
    let region = BBox::from_center(
        cx + shift.1 as f64 * stride as f64 * px,
        cy + shift.0 as f64 * stride as f64 * py,
        ex.w * ratio,
        ex.h * ratio,
    );
    let search = crop_resize(&seq.frames[j], &region, side, side)?;
    let c = (score_extent / 2) as i64;
    let cell = |s: i64| -> Result<usize> {
        usize::try_from(c - s).ok().filter(|&v| v < score_extent).ok_or_else(|| {
            Error::Argument(format!("shift {} leaves the {}-cell score map", s, score_extent))
        })
    };
    Ok(TrainingPair { exemplar, search, target_cell: (cell(shift.0)?, cell(shift.1)?) })
}

/// Balanced logistic loss over a score map and its gradient with respect to
/// the raw correlations. Returns `(loss, grad, bias_grad, argmax_is_positive)`.
pub fn logistic_map_loss(
    raw: &Tensor,
    target_cell: (usize, usize),
    radius: f64,
    scale: f64,
    bias: f64,
) -> Result<(f64, Tensor, f64, bool)> {
    let s = raw.shape();
    if s.len() != 2 {
        return Err(Error::Dimension { op: "logistic_map_loss", detail: format!("score map shape {:?}", s) });
    }
    let (h, w) = (s[0], s[1]);
    let label = |r: usize, c: usize| {
        let dr = r as f64 - target_cell.0 as f64;
        let dc = c as f64 - target_cell.1 as f64;
        libm::sqrt(dr * dr + dc * dc) <= radius
    };
    let pos = (0..h * w).filter(|&k| label(k / w, k % w)).count();
    let neg = h * w - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument("score map needs both positive and negative cells".into()));
    }
    let mut grad = Tensor::zeros(&[h, w]);
    let mut loss = 0.0;
    let mut grad_bias = 0.0;
    let mut best = (f64::NEG_INFINITY, false);
    for (k, (&x, g)) in raw.data().iter().zip(grad.data_mut()).enumerate() {
        let p = label(k / w, k % w);
        let (y, weight) = if p { (1.0, 0.5 / pos as f64) } else { (-1.0, 0.5 / neg as f64) };
        let v = scale * x + bias;
        // log(1 + exp(-y v)) without overflow.
        let m = -y * v;
        loss += weight * (m.max(0.0) + libm::log1p(libm::exp(-libm::fabs(m))));
        let d = -y * ops::sigmoid(m) * weight;
        *g = d * scale;
        grad_bias += d;
        if x > best.0 {
            best = (x, p);
        }
    }
    Ok((loss, grad, grad_bias, best.1))
}

fn accumulate(dst: &mut Embedding, src: &Embedding) {
    for ((_, d), (_, s)) in dst.named_mut().into_iter().zip(src.named()) {
        d.add_assign(s).expect("same architecture");
    }
}

/// Loss, parameter gradient, bias gradient and hit flag for one pair.
pub fn pair_loss_and_grads(
    emb: &Embedding,
    pair: &TrainingPair,
    cfg: &PairTrainConfig,
    bias: f64,
) -> Result<(f64, Embedding, f64, bool)> {
    let ex_trace = emb.embed_traced(&pair.exemplar)?;
    let se_trace = emb.embed_traced(&pair.search)?;
    let z = ex_trace.last().expect("embedding has layers");
    let x = se_trace.last().expect("embedding has layers");
    let raw = ops::cross_correlate(z, x, 0.0)?;
    let (loss, g, gb, hit) = logistic_map_loss(&raw, pair.target_cell, cfg.positive_radius, cfg.score_scale, bias)?;
    let (gz, gx) = ops::cross_correlate_backward(z, x, &g)?;
    let (mut grads, _) = emb.backward(&pair.exemplar, &ex_trace, &gz)?;
    let (gs, _) = emb.backward(&pair.search, &se_trace, &gx)?;
    accumulate(&mut grads, &gs);
    Ok((loss, grads, gb, hit))
}

/// Trains `embedding` in place and returns the per-step log.
pub fn train_embedding(embedding: &mut Embedding, geometry: &SearchGeometry, cfg: &PairTrainConfig) -> Result<PairTrainLog> {
    if cfg.score_extent % 2 == 0 || cfg.score_extent < 3 || cfg.batch_size == 0 || cfg.sequences == 0 {
        return Err(Error::Argument("score_extent must be odd and >= 3; batch_size and sequences positive".into()));
    }
    if cfg.max_shift > cfg.score_extent / 2 || cfg.frames_per_sequence == 0 {
        return Err(Error::Argument("max_shift must fit inside the score map".into()));
    }
    let stride = embedding.arch().total_stride();
    geometry.extents(embedding.arch())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = training_sequences(&mut rng, cfg.sequences, cfg.frames_per_sequence)?;
    let mut adam = AdamSet::for_params(embedding, cfg.adam);
    let mut bias = 0.0;
    let mut bias_state = crate::adam::AdamState::new(&[1], cfg.adam);
    let mut log = PairTrainLog { losses: Vec::with_capacity(cfg.steps), hit_rates: Vec::with_capacity(cfg.steps) };
    let ms = cfg.max_shift as i64;
    for _ in 0..cfg.steps {
        let mut total = Embedding::zeros(embedding.arch().clone())?;
        let mut loss = 0.0;
        let mut gb = 0.0;
        let mut hits = 0usize;
        for _ in 0..cfg.batch_size {
            let seq = &pool[rng.random_range(0..pool.len())];
            let n = seq.frames.len();
            let i = rng.random_range(0..n);
            let lo = i.saturating_sub(cfg.max_gap);
            let j = rng.random_range(lo..(i + cfg.max_gap + 1).min(n));
            let shift = (rng.random_range(-ms..=ms), rng.random_range(-ms..=ms));
            let pair = make_pair(seq, geometry, stride, cfg.score_extent, (i, j), shift)?;
            let (l, g, b, hit) = pair_loss_and_grads(embedding, &pair, cfg, bias)?;
            loss += l;
            gb += b;
            hits += hit as usize;
            accumulate(&mut total, &g);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for (_, t) in total.named_mut() {
            t.scale(inv);
        }
        adam.step(embedding, &total)?;
        let mut b = Tensor::filled(&[1], bias);
        crate::adam::adam_step("bias", &mut b, &Tensor::filled(&[1], gb * inv), &mut bias_state)?;
        bias = b.data()[0];
        log.losses.push(loss * inv);
        log.hit_rates.push(hits as f64 * inv);
    }
    Ok(log)
}
