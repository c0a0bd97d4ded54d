// Direct-summation references for the fast kernels.

use oatrack_core::lstm::{self, ClassScores};
use oatrack_core::matcher::LayerSpec;
use oatrack_core::ops::{self, Activation};
use oatrack_core::proposals::{max_crop_discrepancy, ranked_cells};
use oatrack_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_conv(input: &Tensor, kernels: &Tensor, stride: usize) -> Tensor {
    let [c, h, w] = *input.shape() else { panic!() };
    let [o, _, kh, kw] = *kernels.shape() else { panic!() };
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let x = |ch: usize, y: usize, xx: usize| input.data()[(ch * h + y) * w + xx];
    let k = |oc: usize, ch: usize, u: usize, v: usize| kernels.data()[((oc * c + ch) * kh + u) * kw + v];
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for ch in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            acc += k(oc, ch, u, v) * x(ch, y * stride + u, xx * stride + v);
                        }
                    }
                }
                out[(oc * oh + y) * ow + xx] = acc;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out).unwrap()
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (c, o, h, w, k, s) in [(1, 1, 5, 5, 3, 1), (3, 4, 11, 9, 3, 2), (2, 5, 8, 8, 1, 1), (4, 2, 13, 10, 4, 3)] {
        let x = random_tensor(&[c, h, w], &mut rng);
        let kern = random_tensor(&[o, c, k, k], &mut rng);
        let fast = ops::conv2d_valid(&x, &kern, s).unwrap();
        let slow = naive_conv(&x, &kern, s);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-10);
    }
}

#[test]
fn cross_correlation_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = random_tensor(&[3, 4, 4], &mut rng);
    let s = random_tensor(&[3, 10, 9], &mut rng);
    let fast = ops::cross_correlate(&t, &s, 0.25).unwrap();
    assert_eq!(fast.shape(), &[7, 6]);
    for r in 0..7 {
        for c in 0..6 {
            let mut acc = 0.25;
            for ch in 0..3 {
                for u in 0..4 {
                    for v in 0..4 {
                        acc += t.data()[(ch * 4 + u) * 4 + v] * s.data()[(ch * 10 + r + u) * 9 + c + v];
                    }
                }
            }
            assert!((fast.data()[r * 6 + c] - acc).abs() < 1e-10);
        }
    }
}

#[test]
fn shifting_the_search_shifts_the_score_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_tensor(&[2, 3, 3], &mut rng);
    let s = random_tensor(&[2, 12, 12], &mut rng);
    let full = ops::cross_correlate(&t, &s, 0.0).unwrap();
    let shifted = s.spatial_crop(2, 3, 9, 9).unwrap();
    let part = ops::cross_correlate(&t, &shifted, 0.0).unwrap();
    for r in 0..7 {
        for c in 0..7 {
            assert!((part.data()[r * 7 + c] - full.data()[(r + 2) * 10 + c + 3]).abs() < 1e-12);
        }
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One scalar-loop step of the stacked LSTM classifier.
fn naive_step(p: &LstmParams, prev: &LstmState, x: &[f64]) -> (f64, LstmState) {
    let m = p.feature_len();
    let n = p.units();
    let mut input: Vec<f64> = (0..n)
        .map(|j| p.b_in.data()[j] + (0..m).map(|i| p.w_in.data()[i * n + j] * x[i]).sum::<f64>())
        .collect();
    let mut state = prev.clone();
    for (l, layer) in p.layers.iter().enumerate() {
        let hp = &prev.layers[l].h;
        let pre = |k: usize, j: usize| {
            let mut a = layer.b[k].data()[j];
            for q in 0..n {
                a += layer.u[k].data()[j * n + q] * input[q] + layer.v[k].data()[j * n + q] * hp[q];
            }
            a
        };
        let mut h = vec![0.0; n];
        let mut c = vec![0.0; n];
        for j in 0..n {
            let (i, f, o, g) = (sig(pre(0, j)), sig(pre(1, j)), sig(pre(2, j)), pre(3, j).tanh());
            c[j] = f * prev.layers[l].c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        state.layers[l].c = c;
        state.layers[l].h = h.clone();
        input = h;
    }
    let l0 = p.b_out.data()[0] + (0..n).map(|j| p.w_out.data()[j * 2] * input[j]).sum::<f64>();
    let l1 = p.b_out.data()[1] + (0..n).map(|j| p.w_out.data()[j * 2 + 1] * input[j]).sum::<f64>();
    let pos = 1.0 / (1.0 + (l0 - l1).exp());
    (pos, state)
}

#[test]
fn lstm_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (m, n, layers) in [(5, 3, 1), (12, 4, 2), (7, 6, 3)] {
        let cfg = LstmConfig { units: n, layers, forget_bias: 1.0 };
        let mut p = LstmParams::init(m, &cfg, &mut rng).unwrap();
        for b in p.layers.iter_mut().flat_map(|l| l.b.iter_mut()) {
            for v in b.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        for v in p.b_in.data_mut().iter_mut().chain(p.b_out.data_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
        let x0: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let state = lstm::init_state(&p, &x0).unwrap();
        let (_, expect_init) = naive_step(&p, &LstmState::zeros(n, layers), &x0);
        for (a, b) in state.layers.iter().zip(&expect_init.layers) {
            for (u, v) in a.h.iter().chain(&a.c).zip(b.h.iter().chain(&b.c)) {
                assert!((u - v).abs() < 1e-10);
            }
        }
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let scores = lstm::forward(&p, &state, &refs).unwrap();
        for (s, x) in scores.iter().zip(&xs) {
            let (pos, next) = naive_step(&p, &state, x);
            assert!((s.positive - pos).abs() < 1e-10);
            assert!((s.positive + s.negative - 1.0).abs() < 1e-12);
            for (a, b) in s.state.layers.iter().zip(&next.layers) {
                for (u, v) in a.h.iter().chain(&a.c).zip(b.h.iter().chain(&b.c)) {
                    assert!((u - v).abs() < 1e-10);
                }
            }
        }
    }
}

fn scores_of(ps: &[f64]) -> Vec<ClassScores> {
    ps.iter()
        .map(|&p| ClassScores { positive: p, negative: 1.0 - p, state: LstmState::zeros(1, 1) })
        .collect()
}

#[test]
fn choose_target_is_first_argmax() {
    let cases: [(&[f64], usize); 4] =
        [(&[0.2, 0.9, 0.4], 1), (&[0.5, 0.5, 0.5], 0), (&[0.1, 0.7, 0.7, 0.3], 1), (&[0.3], 0)];
    for (ps, want) in cases {
        assert_eq!(lstm::choose_target(&scores_of(ps)).unwrap().0, want);
    }
    assert!(lstm::choose_target(&[]).is_err());
}

#[test]
fn crop_equivalence_on_synthetic_frames() {
    let geometry = SearchGeometry::default();
    let matcher = SiameseMatcher::new(Embedding::seeded(EmbeddingArch::default(), 9).unwrap(), geometry).unwrap();
    let spec = SynthSpec { frames: 3, width: 160, height: 120, object: BBox::new(50.0, 40.0, 30.0, 26.0), ..Default::default() };
    let seq = synth_sequence(&spec).unwrap();
    let template = matcher.make_template(&seq.frames[0], &seq.ground_truth[0]).unwrap();
    for t in 1..3 {
        let maps = matcher.score_search(&template.features, &seq.frames[t], &seq.ground_truth[t - 1]).unwrap();
        let set = select_top(&maps, 12).unwrap();
        assert!(max_crop_discrepancy(&set, &maps, &matcher).unwrap() < 1e-9);
    }
}

#[test]
fn select_top_agrees_with_full_sort() {
    let geometry = SearchGeometry::default();
    let matcher = SiameseMatcher::new(Embedding::seeded(EmbeddingArch::default(), 2).unwrap(), geometry).unwrap();
    let spec = SynthSpec { frames: 2, width: 128, height: 128, object: BBox::new(40.0, 40.0, 24.0, 24.0), ..Default::default() };
    let seq = synth_sequence(&spec).unwrap();
    let template = matcher.make_template(&seq.frames[0], &seq.ground_truth[0]).unwrap();
    let maps = matcher.score_search(&template.features, &seq.frames[1], &seq.ground_truth[0]).unwrap();
    let mut all = Vec::new();
    for (si, level) in maps.levels.iter().enumerate() {
        let cols = level.scores.shape()[1];
        for (i, &v) in level.scores.data().iter().enumerate() {
            all.push((v, si, i / cols, i % cols));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    let set = select_top(&maps, 64).unwrap();
    for (p, want) in set.proposals.iter().zip(&all) {
        assert_eq!((p.raw_score, p.scale_index, p.row, p.col), *want);
    }
    assert_eq!(ranked_cells(&maps).len(), all.len());
}

#[test]
fn default_geometry_extents() {
    let arch = EmbeddingArch::default();
    assert_eq!(arch.total_stride(), 4);
    assert_eq!(arch.receptive_field(), 7);
    let e = SearchGeometry::default().extents(&arch).unwrap();
    assert_eq!((e.template, e.search, e.score), (17, 49, 33));
}

#[test]
fn cropped_mode_costs_under_a_quarter_at_64() {
    let arch = EmbeddingArch::default();
    let g = SearchGeometry::default();
    let crop = proposals::count_embed_flops(&arch, &g, ExtractionMode::Cropped, 64);
    let per = proposals::count_embed_flops(&arch, &g, ExtractionMode::PerProposal, 64);
    assert_eq!(crop, arch.macs(199, 199).unwrap());
    assert_eq!(per, 64 * arch.macs(71, 71).unwrap());
    assert!((crop as f64) < 0.25 * per as f64);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn arch_strategy() -> impl Strategy<Value = EmbeddingArch> {
        prop::collection::vec((1usize..4, 1usize..4), 1..4).prop_map(|ks| EmbeddingArch {
            in_channels: 1,
            layers: ks
                .into_iter()
                .map(|(k, s)| LayerSpec { out_channels: 2, kernel: k, stride: s.min(k.max(1)), activation: Activation::Relu })
                .collect(),
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn score_extent_is_search_minus_template_plus_one(
            arch in arch_strategy(),
            ex in 8usize..30,
            extra in 0usize..6,
            seed in 0u64..1000,
        ) {
            let stride = arch.total_stride();
            let search = ex + stride * extra;
            let g = SearchGeometry { exemplar_size: ex, search_size: search, ..Default::default() };
            if let Ok(e) = g.extents(&arch) {
                prop_assert_eq!(e.score, e.search - e.template + 1);
                let emb = Embedding::seeded(arch.clone(), seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = emb.embed(&random_tensor(&[1, ex, ex], &mut rng)).unwrap();
                let s = emb.embed(&random_tensor(&[1, search, search], &mut rng)).unwrap();
                prop_assert_eq!(t.shape()[1], e.template);
                prop_assert_eq!(s.shape()[1], e.search);
                let m = ops::cross_correlate(&t, &s, 0.0).unwrap();
                prop_assert_eq!(m.shape(), &[e.score, e.score][..]);
            }
        }

        #[test]
        fn choose_target_ignores_monotone_rescaling(ps in prop::collection::vec(0.0f64..1.0, 1..20)) {
            let a = lstm::choose_target(&scores_of(&ps)).unwrap().0;
            let squashed: Vec<f64> = ps.iter().map(|p| p * p * 0.5 + 0.1).collect();
            prop_assert_eq!(lstm::choose_target(&scores_of(&squashed)).unwrap().0, a);
            prop_assert!(ps.iter().all(|&p| p <= ps[a]));
            prop_assert!(ps[..a].iter().all(|&p| p < ps[a]));
        }

        #[test]
        fn cropped_features_equal_window_embedding(seed in 0u64..200, n in 1usize..20) {
            let arch = EmbeddingArch {
                in_channels: 1,
                layers: vec![
                    LayerSpec { out_channels: 3, kernel: 3, stride: 2, activation: Activation::Relu },
                    LayerSpec { out_channels: 2, kernel: 2, stride: 1, activation: Activation::Identity },
                ],
            };
            let g = SearchGeometry { exemplar_size: 15, search_size: 27, scales: vec![1.0], ..Default::default() };
            let matcher = SiameseMatcher::new(Embedding::seeded(arch, seed).unwrap(), g).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frame = Tensor::from_fn(&[1, 40, 40], |_| rng.random_range(0.0..1.0));
            let target = BBox::new(rng.random_range(5.0..20.0), rng.random_range(5.0..20.0), 10.0, 10.0);
            let template = matcher.make_template(&frame, &target).unwrap();
            let maps = matcher.score_search(&template.features, &frame, &target).unwrap();
            let set = select_top(&maps, n).unwrap();
            prop_assert!(max_crop_discrepancy(&set, &maps, &matcher).unwrap() < 1e-9);
        }
    }
}
