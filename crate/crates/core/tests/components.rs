use oatrack_core::embedtrain::{self, PairTrainConfig};
use oatrack_core::gan::{self, gan_losses};
use oatrack_core::lstm::{self, NEGATIVE, POSITIVE};
use oatrack_core::sampler::{draw_gaussian_samples, hard_negative_mine, SamplerConfig};
use oatrack_core::synth::Distractor;
use oatrack_core::weights::bundled_embedding;
use oatrack_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained_matcher() -> SiameseMatcher {
    let e = bundled_embedding(&EmbeddingArch::default()).unwrap();
    SiameseMatcher::new(e, SearchGeometry::default()).unwrap()
}

#[test]
fn gan_learns_a_constant_patch() {
    let cfg = GanConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut trainer = GanTrainer::new(GanParams::init(&cfg, &mut rng).unwrap());
    let mut bank = PositiveBank::new(cfg.bank_capacity);
    bank.push(Tensor::filled(&[3, 32, 32], 0.25));
    trainer.train(&bank, 500, &mut rng).unwrap();
    let samples = gan::generate_positives(&trainer.params, 16, &mut rng).unwrap();
    let mae = samples.iter().flat_map(|s| s.data()).map(|v| (v - 0.25).abs()).sum::<f64>() / (16.0 * 3.0 * 1024.0);
    assert!(mae < 0.15, "mae {}", mae);
}

#[test]
fn gan_losses_match_a_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let r: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..0.99)).collect();
        let f: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..0.99)).collect();
        let (d, g) = gan_losses(&r, &f).unwrap();
        let mut want_d = 0.0;
        for p in &r {
            want_d -= p.ln() / 5.0;
        }
        for p in &f {
            want_d -= (1.0 - p).ln() / 3.0;
        }
        let want_g = -f.iter().map(|p| p.ln()).sum::<f64>() / 3.0;
        assert!((d - want_d).abs() < 1e-12);
        assert!((g - want_g).abs() < 1e-12);
    }
    let (d, g) = gan_losses(&[0.5; 4], &[0.5; 4]).unwrap();
    assert_eq!(d, 2.0 * std::f64::consts::LN_2);
    assert_eq!(g, std::f64::consts::LN_2);
}

#[test]
fn planted_template_patch_embeds_to_template_features() {
    let m = trained_matcher();
    let seq = synth_sequence(&SynthSpec { frames: 1, ..Default::default() }).unwrap();
    let t = m.make_template(&seq.frames[0], &seq.ground_truth[0]).unwrap();
    let f = gan::features_for_generated(&[t.patch.clone(), t.patch.clone()], &m).unwrap();
    assert_eq!(f.len(), 2);
    assert_eq!(f[0].len(), 16 * 17 * 17);
    assert_eq!(f[0], t.features.data());
    assert_eq!(f[0], f[1]);
}

#[test]
fn lstm_separates_two_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = 20;
    let cfg = LstmConfig { units: 8, layers: 2, forget_bias: 1.0 };
    let mut p = LstmParams::init(m, &cfg, &mut rng).unwrap();
    let centre: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..40 {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        xs.push(centre.iter().map(|c| sign * c + rng.random_range(-0.2..0.2)).collect::<Vec<f64>>());
        ys.push(if sign > 0.0 { POSITIVE } else { NEGATIVE });
    }
    let state = lstm::init_state(&p, &centre).unwrap();
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let mut adam = AdamSet::for_params(&p, AdamConfig { learning_rate: 1e-2, ..Default::default() });
    let first = lstm::train_step(&mut p, &state, &refs, &ys, &mut adam).unwrap();
    let mut last = first;
    for _ in 0..200 {
        last = lstm::train_step(&mut p, &state, &refs, &ys, &mut adam).unwrap();
    }
    assert!(last < 0.05 && last < first, "{} -> {}", first, last);
    let scores = lstm::forward(&p, &state, &refs).unwrap();
    for (s, y) in scores.iter().zip(&ys) {
        assert_eq!(s.positive > 0.5, *y == POSITIVE);
    }
}

fn distractor_frame() -> Sequence {
    synth_sequence(&SynthSpec {
        frames: 1,
        width: 240,
        height: 160,
        object: BBox::new(60.0, 60.0, 32.0, 32.0),
        distractors: vec![Distractor { x: 86.0, y: 86.0, ..Default::default() }],
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn identical_distractor_gives_a_second_peak_and_the_first_hard_negative() {
    let m = trained_matcher();
    let seq = distractor_frame();
    let gt = seq.ground_truth[0];
    let t = m.make_template(&seq.frames[0], &gt).unwrap();
    let maps = m.score_search(&t.features, &seq.frames[0], &gt).unwrap();
    let level = &maps.levels[1];
    let n = maps.extents.score;
    let s = |r: usize, c: usize| level.scores.data()[r * n + c];
    let distractor = BBox::new(86.0, 86.0, 32.0, 32.0);
    let is_peak = |(r, c): (usize, usize)| {
        let v = s(r, c);
        (r.saturating_sub(1)..=(r + 1).min(n - 1))
            .all(|rr| (c.saturating_sub(1)..=(c + 1).min(n - 1)).all(|cc| s(rr, cc) <= v))
    };
    let own = maps.coordinate_for(1, &gt).unwrap();
    let other = maps.coordinate_for(1, &distractor).unwrap();
    assert!(is_peak(own), "target cell {:?} is not a local maximum", own);
    assert!(is_peak(other), "distractor cell {:?} is not a local maximum", other);
    let mut sorted = level.scores.data().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    assert!(s(other.0, other.1) >= sorted[n * n / 20], "distractor peak is not in the top 5%");

    let hard = hard_negative_mine(&maps, &gt, 4, 0.3).unwrap();
    assert_eq!(hard.len(), 4);
    assert!(iou(&hard[0].bbox, &distractor) > 0.5, "{:?}", hard[0].bbox);
    for h in &hard {
        assert!(iou(&h.bbox, &gt) <= 0.3);
        assert_eq!(h.features.as_ref().unwrap(), &m.embed(&h.patch).unwrap());
    }
}

#[test]
fn pair_trainer_reduces_its_loss() {
    let mut emb = Embedding::seeded(EmbeddingArch::default(), 5).unwrap();
    let cfg = PairTrainConfig { steps: 12, batch_size: 2, sequences: 3, frames_per_sequence: 3, ..Default::default() };
    let log = embedtrain::train_embedding(&mut emb, &SearchGeometry::default(), &cfg).unwrap();
    assert_eq!(log.losses.len(), 12);
    assert!(log.losses.iter().all(|l| l.is_finite()));
    let head: f64 = log.losses[..4].iter().sum();
    let tail: f64 = log.losses[8..].iter().sum();
    assert!(tail < head, "{:?}", log.losses);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn sampled_labels_agree_with_overlap(
            seed in 0u64..1000,
            x in 10.0f64..100.0,
            y in 10.0f64..60.0,
            w in 16.0f64..48.0,
            h in 16.0f64..48.0,
        ) {
            let m = SiameseMatcher::new(Embedding::seeded(EmbeddingArch::default(), 0).unwrap(), SearchGeometry::default()).unwrap();
            let frame = Tensor::filled(&[3, 120, 160], 0.5);
            let cfg = SamplerConfig { positives: 8, negatives: 16, ..Default::default() };
            let center = BBox::new(x, y, w, h);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = draw_gaussian_samples(&frame, &center, &cfg, &m, &mut rng).unwrap();
            prop_assert!(set.labels_consistent(&center, &cfg));
            prop_assert!(!set.positives.is_empty() && set.positives.len() <= 8);
            prop_assert!(set.negatives.len() <= 16);
            for s in set.positives.iter().chain(&set.negatives) {
                prop_assert_eq!(s.patch.shape(), &[3, 71, 71][..]);
            }
        }
    }
}
