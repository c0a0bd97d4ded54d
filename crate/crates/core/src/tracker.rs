//! The online tracking loop: match, select, classify, choose, and update
//! the classifier (and the sample generator) when the winner is confident.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{load_named, lookup_named, AdamConfig, AdamSet, Parameters};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::gan::{self, GanConfig, GanParams, GanTrainer, PositiveBank};
use crate::image::resize;
use crate::lstm::{self, LstmConfig, LstmParams, LstmState, NEGATIVE, POSITIVE};
use crate::matcher::{Embedding, EmbeddingArch, ScoreMapSet, SearchGeometry, SiameseMatcher, Template};
use crate::proposals::{count_embed_flops, reembed, select_top, ExtractionMode};
use crate::sampler::{draw_gaussian_samples, hard_negative_mine, Provenance, Sample, SamplerConfig};
use crate::sequence::FrameSource;
use crate::tensor::Tensor;
use crate::weights::bundled_embedding;

/// Pipeline variants used for internal comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Matching only: the best score-map cell wins, nothing is learned online.
    LstmOff,
    /// No generated positives.
    GanOff,
    /// Gaussian negatives only.
    HardnegOff,
    /// Embed every proposal window instead of cropping search features.
    PerProposalEmbed,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::LstmOff, Ablation::GanOff, Ablation::HardnegOff, Ablation::PerProposalEmbed];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::LstmOff => "lstm-off",
            Ablation::GanOff => "gan-off",
            Ablation::HardnegOff => "hardneg-off",
            Ablation::PerProposalEmbed => "per-proposal-embed",
        }
    }
}

impl core::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown ablation {:?}", s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub n_proposals: usize,
    /// Positive-score gate for online updates.
    pub update_threshold: f64,
    pub embedding: EmbeddingArch,
    /// Seed of random embedding weights, used when none are supplied and the
    /// architecture is not the default one.
    pub embedding_seed: u64,
    pub geometry: SearchGeometry,
    pub lstm: LstmConfig,
    pub lstm_adam: AdamConfig,
    /// Training iterations on the first frame's samples.
    pub lstm_init_steps: usize,
    /// Training iterations per online update.
    pub lstm_update_steps: usize,
    /// Minibatch size; 0 trains on the whole sample set.
    pub lstm_batch_size: usize,
    pub sampler: SamplerConfig,
    pub gan: GanConfig,
    pub gan_init_steps: usize,
    pub gan_update_steps: usize,
    /// Generated positives added to each online update.
    pub generated_positives: usize,
    /// More positives are generated when needed so that positives make up
    /// at least this fraction of an update's training set.
    pub min_positive_fraction: f64,
    /// Weight of the previous box when smoothing the estimate; 0 disables.
    pub box_smoothing: f64,
    /// Extra weight of the previous size only, damping scale changes.
    pub size_smoothing: f64,
    pub seed: u64,
    pub ablations: Vec<Ablation>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            n_proposals: 64,
            update_threshold: 0.6,
            embedding: EmbeddingArch::default(),
            embedding_seed: 0,
            geometry: SearchGeometry::default(),
            lstm: LstmConfig::default(),
            lstm_adam: AdamConfig::default(),
            lstm_init_steps: 100,
            lstm_update_steps: 1,
            lstm_batch_size: 0,
            sampler: SamplerConfig::default(),
            gan: GanConfig::default(),
            gan_init_steps: 200,
            gan_update_steps: 20,
            generated_positives: 64,
            min_positive_fraction: 1.0 / 3.0,
            box_smoothing: 0.0,
            size_smoothing: 0.0,
            seed: 0,
            ablations: Vec::new(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.update_threshold > 0.0 && self.update_threshold < 1.0) {
            return Err(Error::Argument(format!("update_threshold {} must lie in (0, 1)", self.update_threshold)));
        }
        if self.n_proposals == 0 {
            return Err(Error::Argument("n_proposals must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_positive_fraction) {
            return Err(Error::Argument("min_positive_fraction must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.box_smoothing) || !(0.0..1.0).contains(&self.size_smoothing) {
            return Err(Error::Argument("box_smoothing and size_smoothing must lie in [0, 1)".into()));
        }
        self.sampler.validate()?;
        self.geometry.validate()?;
        self.embedding.validate()
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    fn extraction_mode(&self) -> ExtractionMode {
        if self.has(Ablation::PerProposalEmbed) {
            ExtractionMode::PerProposal
        } else {
            ExtractionMode::Cropped
        }
    }

    fn gan_enabled(&self) -> bool {
        !self.has(Ablation::GanOff) && !self.has(Ablation::LstmOff)
    }
}

/// Source of wall-clock readings for stage timings.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// A clock that never advances; timings read as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Multiply-accumulate counts per stage of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameMacs {
    pub matching: u64,
    pub proposal_features: u64,
    pub classification: u64,
    pub update: u64,
}

impl FrameMacs {
    pub fn total(&self) -> u64 {
        self.matching + self.proposal_features + self.classification + self.update
    }

    fn add(&mut self, o: &FrameMacs) {
        self.matching += o.matching;
        self.proposal_features += o.proposal_features;
        self.classification += o.classification;
        self.update += o.update;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub wall_clock_matching_s: f64,
    pub wall_clock_selection_s: f64,
    pub wall_clock_classification_s: f64,
    pub wall_clock_update_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub frame: usize,
    pub bbox: BBox,
    /// Normalized positive score of the winner; absent when the classifier is off.
    pub positive_score: Option<f64>,
    pub updated: bool,
    /// Why this frame produced no estimate (the previous box is carried forward).
    pub failure: Option<String>,
    /// Why a gated update was attempted but skipped.
    pub update_skipped: Option<String>,
    pub macs: FrameMacs,
    pub timing: StageTiming,
}

/// Everything a tracker carries between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerSession {
    config: TrackerConfig,
    matcher: SiameseMatcher,
    template: Template,
    lstm: LstmParams,
    state: LstmState,
    lstm_adam: AdamSet,
    gan: Option<GanTrainer>,
    bank: PositiveBank,
    sample_rng: ChaCha8Rng,
    gan_rng: ChaCha8Rng,
    previous: BBox,
    frame_size: (usize, usize),
    frames_seen: usize,
    state_transitions: usize,
}

/// Learned pieces that an update replaces atomically.
struct Learner {
    lstm: LstmParams,
    lstm_adam: AdamSet,
    gan: Option<GanTrainer>,
    bank: PositiveBank,
    sample_rng: ChaCha8Rng,
    gan_rng: ChaCha8Rng,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn flatten(features: &Tensor) -> Vec<f64> {
    features.data().to_vec()
}

/// The bundled trained weights for the default architecture, random
/// weights from `embedding_seed` otherwise.
pub fn default_embedding(config: &TrackerConfig) -> Result<Embedding> {
    match bundled_embedding(&config.embedding) {
        Some(e) => Ok(e),
        None => Embedding::seeded(config.embedding.clone(), config.embedding_seed),
    }
}

impl TrackerSession {
    /// Uses [`default_embedding`] for the frozen matcher.
    pub fn initialize(first_frame: &Tensor, annotation: &BBox, config: &TrackerConfig) -> Result<Self> {
        Self::initialize_with(first_frame, annotation, config, default_embedding(config)?)
    }

    /// Template, first state, and first-frame training of the classifier and
    /// the generator.
    pub fn initialize_with(
        first_frame: &Tensor,
        annotation: &BBox,
        config: &TrackerConfig,
        embedding: Embedding,
    ) -> Result<Self> {
        config.validate()?;
        if embedding.arch() != &config.embedding {
            return Err(Error::Argument("supplied embedding does not match the configured architecture".into()));
        }
        let (_, h, w) = first_frame.chw("initialize")?;
        let matcher = SiameseMatcher::new(embedding, config.geometry.clone())?;
        let template = matcher.make_template(first_frame, annotation)?;
        let mut init_rng = rng_stream(config.seed, 0);
        let lstm = LstmParams::init(matcher.feature_len(), &config.lstm, &mut init_rng)?;
        let state = lstm::init_state(&lstm, template.features.data())?;
        let gan = if config.gan_enabled() {
            Some(GanTrainer::new(GanParams::init(&config.gan, &mut init_rng)?))
        } else {
            None
        };
        let mut session = Self {
            lstm_adam: AdamSet::for_params(&lstm, config.lstm_adam),
            config: config.clone(),
            matcher,
            template,
            lstm,
            state,
            gan,
            bank: PositiveBank::new(config.gan.bank_capacity),
            sample_rng: rng_stream(config.seed, 1),
            gan_rng: rng_stream(config.seed, 2),
            previous: *annotation,
            frame_size: (w, h),
            frames_seen: 1,
            state_transitions: 1,
        };
        if !config.has(Ablation::LstmOff) {
            let mut learner = session.learner();
            session.train(&mut learner, first_frame, annotation, None, config.lstm_init_steps, config.gan_init_steps, false)?;
            session.commit(learner);
        }
        Ok(session)
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn matcher(&self) -> &SiameseMatcher {
        &self.matcher
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn lstm(&self) -> &LstmParams {
        &self.lstm
    }

    pub fn state(&self) -> &LstmState {
        &self.state
    }

    pub fn gan(&self) -> Option<&GanParams> {
        self.gan.as_ref().map(|g| &g.params)
    }

    pub fn bank(&self) -> &PositiveBank {
        &self.bank
    }

    pub fn previous_box(&self) -> BBox {
        self.previous
    }

    /// Frames consumed so far, the first one included.
    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Number of state transitions so far (one per frame, including the first).
    pub fn state_transitions(&self) -> usize {
        self.state_transitions
    }

    /// Fingerprint of every learned parameter.
    pub fn parameter_checksum(&self) -> u64 {
        let g = self.gan.as_ref().map_or(0, |g| g.params.checksum());
        self.lstm.checksum() ^ g.rotate_left(7)
    }

    pub fn track_frame(&mut self, frame: &Tensor) -> TrackResult {
        self.track_frame_timed(frame, &NoClock)
    }

    /// Processes the next frame. Errors never escape: a frame that cannot be
    /// scored carries the previous box forward and leaves the session as it was.
    pub fn track_frame_timed(&mut self, frame: &Tensor, clock: &dyn Clock) -> TrackResult {
        let index = self.frames_seen;
        self.frames_seen += 1;
        match self.step(frame, clock, index) {
            Ok(r) => r,
            Err(e) => self.failed(index, e.to_string()),
        }
    }

    /// Consumes a frame that could not be read, carrying the previous box forward.
    pub fn skip_frame(&mut self, reason: String) -> TrackResult {
        let index = self.frames_seen;
        self.frames_seen += 1;
        self.failed(index, reason)
    }

    fn failed(&self, index: usize, reason: String) -> TrackResult {
        TrackResult {
            frame: index,
            bbox: self.previous,
            positive_score: None,
            updated: false,
            failure: Some(reason),
            update_skipped: None,
            macs: FrameMacs::default(),
            timing: StageTiming::default(),
        }
    }

    fn step(&mut self, frame: &Tensor, clock: &dyn Clock, index: usize) -> Result<TrackResult> {
        let (_, h, w) = frame.chw("track_frame")?;
        if (w, h) != self.frame_size {
            return Err(Error::Geometry(format!(
                "frame {} is {}x{}, sequence frames are {}x{}",
                index, w, h, self.frame_size.0, self.frame_size.1
            )));
        }
        let cfg = &self.config;
        let mut macs = FrameMacs::default();
        let mut timing = StageTiming::default();
        let t0 = clock.seconds();
        let maps = self.matcher.score_search(&self.template.features, frame, &self.previous)?;
        macs.matching = self.matcher.scoring_macs();
        let t1 = clock.seconds();
        timing.wall_clock_matching_s = t1 - t0;

        if cfg.has(Ablation::LstmOff) {
            let set = select_top(&maps, 1)?;
            let bbox = self.finish_box(&set.proposals[0].bbox);
            timing.wall_clock_selection_s = clock.seconds() - t1;
            self.previous = bbox;
            self.state_transitions += 1;
            return Ok(TrackResult {
                frame: index,
                bbox,
                positive_score: None,
                updated: false,
                failure: None,
                update_skipped: None,
                macs,
                timing,
            });
        }

        let mut set = select_top(&maps, cfg.n_proposals)?;
        let mode = cfg.extraction_mode();
        if mode == ExtractionMode::PerProposal {
            reembed(&mut set, &maps, &self.matcher)?;
        }
        macs.proposal_features = count_embed_flops(&cfg.embedding, &cfg.geometry, mode, set.len());
        let t2 = clock.seconds();
        timing.wall_clock_selection_s = t2 - t1;

        let scores = lstm::forward(&self.lstm, &self.state, &set.flattened_features())?;
        let (best, next_state) = lstm::choose_target(&scores)?;
        macs.classification = set.len() as u64 * self.lstm.forward_macs();
        let p_pos = scores[best].positive;
        let bbox = self.finish_box(&set.proposals[best].bbox);
        let t3 = clock.seconds();
        timing.wall_clock_classification_s = t3 - t2;

        self.state = next_state;
        self.state_transitions += 1;
        self.previous = bbox;

        let mut updated = false;
        let mut update_skipped = None;
        if p_pos > cfg.update_threshold {
            let mut learner = self.learner();
            let (steps, gan_steps) = (cfg.lstm_update_steps, cfg.gan_update_steps);
            match self.train(&mut learner, frame, &bbox, Some(&maps), steps, gan_steps, true) {
                Ok(m) => {
                    macs.update = m;
                    self.commit(learner);
                    updated = true;
                }
                Err(e) => update_skipped = Some(e.to_string()),
            }
        }
        timing.wall_clock_update_s = clock.seconds() - t3;
        Ok(TrackResult {
            frame: index,
            bbox,
            positive_score: Some(p_pos),
            updated,
            failure: None,
            update_skipped,
            macs,
            timing,
        })
    }

    fn finish_box(&self, winner: &BBox) -> BBox {
        let k = self.config.box_smoothing;
        let ks = 1.0 - (1.0 - k) * (1.0 - self.config.size_smoothing);
        let p = &self.previous;
        let ((pcx, pcy), (wcx, wcy)) = (p.center(), winner.center());
        let b = BBox::from_center(
            k * pcx + (1.0 - k) * wcx,
            k * pcy + (1.0 - k) * wcy,
            ks * p.w + (1.0 - ks) * winner.w,
            ks * p.h + (1.0 - ks) * winner.h,
        );
        b.clamped_to(self.frame_size.0 as f64, self.frame_size.1 as f64)
    }

    fn learner(&self) -> Learner {
        Learner {
            lstm: self.lstm.clone(),
            lstm_adam: self.lstm_adam.clone(),
            gan: self.gan.clone(),
            bank: self.bank.clone(),
            sample_rng: self.sample_rng.clone(),
            gan_rng: self.gan_rng.clone(),
        }
    }

    fn commit(&mut self, l: Learner) {
        self.lstm = l.lstm;
        self.lstm_adam = l.lstm_adam;
        self.gan = l.gan;
        self.bank = l.bank;
        self.sample_rng = l.sample_rng;
        self.gan_rng = l.gan_rng;
    }

    /// Samples around `center`, refreshes the generator, and trains the
    /// classifier against the current state. Returns the MACs spent.
    #[allow(clippy::too_many_arguments)]
    fn train(
        &self,
        l: &mut Learner,
        frame: &Tensor,
        center: &BBox,
        maps: Option<&ScoreMapSet>,
        lstm_steps: usize,
        gan_steps: usize,
        add_generated: bool,
    ) -> Result<u64> {
        let cfg = &self.config;
        let mut samples = draw_gaussian_samples(frame, center, &cfg.sampler, &self.matcher, &mut l.sample_rng)?;
        if let (Some(maps), false) = (maps, cfg.has(Ablation::HardnegOff)) {
            samples
                .negatives
                .extend(hard_negative_mine(maps, center, cfg.sampler.hard_negatives, cfg.sampler.neg_iou_max)?);
        }
        let exemplar_macs = cfg.embedding.macs(cfg.geometry.exemplar_size, cfg.geometry.exemplar_size).unwrap_or(0);
        let mut macs = 0u64;

        let mut generated = Vec::new();
        if let Some(trainer) = l.gan.as_mut() {
            let p = cfg.gan.patch_size;
            for s in &samples.positives {
                l.bank.push(resize(&crate::image::with_channels(&s.patch, cfg.gan.channels)?, p, p)?);
            }
            trainer.train(&l.bank, gan_steps, &mut l.gan_rng)?;
            let count = generated_count(cfg, samples.positives.len(), samples.negatives.len());
            if add_generated && count > 0 {
                generated = gan::generate_positives(&trainer.params, count, &mut l.gan_rng)?;
            }
        }

        let generated_features = gan::features_for_generated(&generated, &self.matcher)?;
        macs += exemplar_macs * generated.len() as u64;
        for (patch, f) in generated.into_iter().zip(generated_features) {
            let features = Tensor::new(alloc::vec![f.len()], f)?;
            samples.positives.push(Sample { patch, bbox: *center, provenance: Provenance::Generated, features: Some(features) });
        }

        let mut features: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<u8> = Vec::new();
        let mut push = |s: &Sample, label: u8, macs: &mut u64| -> Result<()> {
            let f = match &s.features {
                Some(f) => flatten(f),
                None => {
                    *macs += exemplar_macs;
                    flatten(&self.matcher.embed(&s.patch)?)
                }
            };
            features.push(f);
            labels.push(label);
            Ok(())
        };
        for s in &samples.positives {
            push(s, POSITIVE, &mut macs)?;
        }
        for s in &samples.negatives {
            push(s, NEGATIVE, &mut macs)?;
        }

        let total = features.len();
        let batch = if cfg.lstm_batch_size == 0 { total } else { cfg.lstm_batch_size.min(total) };
        for _ in 0..lstm_steps {
            let (fs, ls): (Vec<&[f64]>, Vec<u8>) = if batch == total {
                (features.iter().map(|f| f.as_slice()).collect(), labels.clone())
            } else {
                let mut idx = sample_indices(&mut l.sample_rng, total, batch).into_vec();
                idx.sort_unstable();
                (idx.iter().map(|&i| features[i].as_slice()).collect(), idx.iter().map(|&i| labels[i]).collect())
            };
            lstm::train_step(&mut l.lstm, &self.state, &fs, &ls, &mut l.lstm_adam)?;
            macs += 3 * fs.len() as u64 * l.lstm.forward_macs();
        }
        Ok(macs)
    }

    /// Named tensors of every learned and frozen parameter plus the current
    /// state, for checkpoints.
    pub fn checkpoint(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        let mut add = |v: Vec<(String, &Tensor)>| out.extend(v.into_iter().map(|(n, t)| (n, t.clone())));
        add(self.matcher.embedding().named());
        add(self.lstm.named());
        if let Some(g) = &self.gan {
            add(g.params.generator.named());
            add(g.params.discriminator.named());
        }
        out.push(("template.features".into(), self.template.features.clone()));
        for (i, l) in self.state.layers.iter().enumerate() {
            out.push((format!("state.layer{}.c", i), Tensor::new(alloc::vec![l.c.len()], l.c.clone()).expect("len")));
            out.push((format!("state.layer{}.h", i), Tensor::new(alloc::vec![l.h.len()], l.h.clone()).expect("len")));
        }
        out
    }

    /// Overwrites parameters, template features and state from checkpoint
    /// entries produced by [`checkpoint`](Self::checkpoint). Optimizer
    /// moments and the positive bank are not part of a checkpoint.
    pub fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut next = self.clone();
        let mut emb = next.matcher.embedding().clone();
        load_named(&mut emb, entries)?;
        next.matcher = SiameseMatcher::new(emb, next.config.geometry.clone())?;
        load_named(&mut next.lstm, entries)?;
        if let Some(g) = next.gan.as_mut() {
            load_named(&mut g.params.generator, entries)?;
            load_named(&mut g.params.discriminator, entries)?;
        }
        let tf = lookup_named(entries, "template.features")?;
        if tf.shape() != next.template.features.shape() {
            return Err(Error::Dimension { op: "restore", detail: "template features".into() });
        }
        next.template.features = tf.clone();
        let units = next.lstm.units();
        for (i, l) in next.state.layers.iter_mut().enumerate() {
            for (field, v) in [("c", &mut l.c), ("h", &mut l.h)] {
                let t = lookup_named(entries, &format!("state.layer{}.{}", i, field))?;
                if t.len() != units {
                    return Err(Error::Dimension { op: "restore", detail: format!("state layer {} {}", i, field) });
                }
                *v = t.data().to_vec();
            }
        }
        next.lstm_adam = AdamSet::for_params(&next.lstm, next.config.lstm_adam);
        if let Some(g) = next.gan.take() {
            next.gan = Some(GanTrainer::new(g.params));
        }
        *self = next;
        Ok(())
    }
}

/// Aggregates over one sequence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub frames: usize,
    pub tracked_frames: usize,
    pub updates: usize,
    pub update_rate: f64,
    pub failed_frames: Vec<usize>,
    pub macs: FrameMacs,
    pub state_transitions: usize,
    pub wall_clock_initialize_s: f64,
    pub wall_clock_total_s: f64,
    pub wall_clock_fps: f64,
}

/// One-pass evaluation: initialize on the first annotated frame, then track
/// every remaining frame. Only initialization failures are errors.
pub fn run_sequence(
    config: &TrackerConfig,
    source: &dyn FrameSource,
    embedding: Option<Embedding>,
    clock: &dyn Clock,
) -> Result<(Vec<TrackResult>, RunReport)> {
    run_session(config, source, embedding, clock).map(|(_, r, rep)| (r, rep))
}

/// [`run_sequence`] that also hands back the final session.
pub fn run_session(
    config: &TrackerConfig,
    source: &dyn FrameSource,
    embedding: Option<Embedding>,
    clock: &dyn Clock,
) -> Result<(TrackerSession, Vec<TrackResult>, RunReport)> {
    let start = clock.seconds();
    let n = source.frame_count();
    let first_box = *source
        .ground_truth()
        .first()
        .ok_or_else(|| Error::Source("sequence has no annotated first frame".into()))?;
    let first = source.frame(0)?;
    let mut session = match embedding {
        Some(e) => TrackerSession::initialize_with(&first, &first_box, config, e)?,
        None => TrackerSession::initialize(&first, &first_box, config)?,
    };
    drop(first);
    let init_done = clock.seconds();
    let mut results = Vec::with_capacity(n.saturating_sub(1));
    let mut report = RunReport { frames: n, ..Default::default() };
    for i in 1..n {
        let r = match source.frame(i) {
            Ok(frame) => session.track_frame_timed(&frame, clock),
            Err(e) => session.skip_frame(e.to_string()),
        };
        report.macs.add(&r.macs);
        if r.updated {
            report.updates += 1;
        }
        if r.failure.is_some() {
            report.failed_frames.push(r.frame);
        }
        results.push(r);
    }
    let end = clock.seconds();
    report.tracked_frames = results.len();
    report.update_rate = if results.is_empty() { 0.0 } else { report.updates as f64 / results.len() as f64 };
    report.state_transitions = session.state_transitions();
    report.wall_clock_initialize_s = init_done - start;
    report.wall_clock_total_s = end - start;
    report.wall_clock_fps = if end > init_done { results.len() as f64 / (end - init_done) } else { 0.0 };
    Ok((session, results, report))
}

/// Generated positives for one update: the configured count, raised until
/// positives reach `min_positive_fraction` of the training set.
pub fn generated_count(cfg: &TrackerConfig, positives: usize, negatives: usize) -> usize {
    let f = cfg.min_positive_fraction;
    let mut g = cfg.generated_positives;
    while ((positives + g) as f64) < f * (positives + g + negatives) as f64 - 1e-9 {
        g += 1;
    }
    g
}
