//! Central finite-difference checking of analytic gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::Parameters;
use crate::error::{dim, Result};
use crate::gan::{self, GanConfig, GanParams};
use crate::lstm::{self, LstmConfig, LstmParams, LstmState};
use crate::matcher::{Embedding, EmbeddingArch, LayerSpec};
use crate::ops::{self, Activation};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is zero are compared absolutely.
    pub floor: f64,
    /// At most this many evenly spaced entries per tensor are probed.
    pub max_entries_per_tensor: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, floor: 1e-6, max_entries_per_tensor: usize::MAX }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let entries_checked = self.entries_checked + other.entries_checked;
        let (max_relative_error, worst) = if other.max_relative_error > self.max_relative_error {
            (other.max_relative_error, other.worst)
        } else {
            (self.max_relative_error, self.worst)
        };
        GradCheckReport { max_relative_error, worst, entries_checked }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` (laid out like `params`) against central differences
/// of `loss` around `params`.
pub fn check_gradients<P, F>(params: &P, analytic: &P, mut loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let shapes_match = params.named().len() == analytic.named().len()
        && params.named().iter().zip(analytic.named()).all(|((_, a), (_, b))| a.shape() == b.shape());
    if !shapes_match {
        return Err(dim("check_gradients", "gradient layout differs from parameters".into()));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: String::new(), entries_checked: 0 };
    let names: alloc::vec::Vec<_> = params.named().into_iter().map(|(n, t)| (n, t.len())).collect();
    let grads = analytic.named();
    for (ti, (name, len)) in names.iter().enumerate() {
        let stride = len.div_ceil(opts.max_entries_per_tensor.max(1)).max(1);
        for e in (0..*len).step_by(stride) {
            let original = probe.named()[ti].1.data()[e];
            probe.named_mut()[ti].1.data_mut()[e] = original + opts.step;
            let up = loss(&probe)?;
            probe.named_mut()[ti].1.data_mut()[e] = original - opts.step;
            let down = loss(&probe)?;
            probe.named_mut()[ti].1.data_mut()[e] = original;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(grads[ti].1.data()[e], numeric, opts.floor);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = err;
                report.worst = format!("{}[{}]", name, e);
            }
        }
    }
    Ok(report)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn probe(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn conv_cases(rng: &mut ChaCha8Rng, opts: GradCheckOptions, out: &mut Vec<(String, GradCheckReport)>) -> Result<()> {
    for stride in [1, 2] {
        let x = random(&[2, 7, 7], rng);
        let k = random(&[3, 2, 3, 3], rng);
        let y = ops::conv2d_valid(&x, &k, stride)?;
        let r = random(y.shape(), rng);
        let gx = ops::conv2d_grad_input(&k, &r, stride, 7, 7)?;
        let gk = ops::conv2d_grad_kernels(&x, &r, stride, 3, 3)?;
        let a = check_gradients(&x, &gx, |x| Ok(probe(&ops::conv2d_valid(x, &k, stride)?, &r)), opts)?;
        let b = check_gradients(&k, &gk, |k| Ok(probe(&ops::conv2d_valid(&x, k, stride)?, &r)), opts)?;
        out.push((format!("conv2d_valid stride {}", stride), a.merge(b)));
    }
    let x = random(&[3, 4, 4], rng);
    let k = random(&[3, 2, 2, 2], rng);
    let y = ops::conv_transpose2d(&x, &k, 2)?;
    let r = random(y.shape(), rng);
    let (gx, gk) = ops::conv_transpose2d_backward(&x, &k, 2, &r)?;
    let a = check_gradients(&x, &gx, |x| Ok(probe(&ops::conv_transpose2d(x, &k, 2)?, &r)), opts)?;
    let b = check_gradients(&k, &gk, |k| Ok(probe(&ops::conv_transpose2d(&x, k, 2)?, &r)), opts)?;
    out.push(("conv_transpose2d".into(), a.merge(b)));

    let t = random(&[2, 3, 3], rng);
    let s = random(&[2, 7, 7], rng);
    let r = random(&[5, 5], rng);
    let (gt, gs) = ops::cross_correlate_backward(&t, &s, &r)?;
    let a = check_gradients(&t, &gt, |t| Ok(probe(&ops::cross_correlate(t, &s, 0.3)?, &r)), opts)?;
    let b = check_gradients(&s, &gs, |s| Ok(probe(&ops::cross_correlate(&t, s, 0.3)?, &r)), opts)?;
    out.push(("cross_correlate".into(), a.merge(b)));

    let logits = random(&[4, 2], rng);
    let labels = [1, 0, 0, 1];
    let (_, g) = ops::softmax_xent(&logits, &labels)?;
    let a = check_gradients(&logits, &g, |l| Ok(ops::softmax_xent(l, &labels)?.0), opts)?;
    out.push(("softmax_xent".into(), a));
    Ok(())
}

fn embedding_case(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let layer = |out_channels, kernel, stride, activation| LayerSpec { out_channels, kernel, stride, activation };
    let arch = EmbeddingArch {
        in_channels: 2,
        layers: vec![
            layer(3, 3, 2, Activation::Relu),
            layer(3, 2, 1, Activation::LeakyRelu(0.2)),
            layer(2, 1, 1, Activation::Tanh),
            layer(2, 1, 1, Activation::Sigmoid),
        ],
    };
    let mut emb = Embedding::seeded(arch, rng.random())?;
    for (_, t) in emb.named_mut() {
        if t.rank() == 1 {
            *t = random(t.shape(), rng);
        }
    }
    let patch = random(&[2, 11, 11], rng);
    let trace = emb.embed_traced(&patch)?;
    let r = random(trace.last().expect("layers").shape(), rng);
    let (gp, gx) = emb.backward(&patch, &trace, &r)?;
    let a = check_gradients(&emb, &gp, |e| Ok(probe(&e.embed(&patch)?, &r)), opts)?;
    let b = check_gradients(&patch, &gx, |x| Ok(probe(&emb.embed(x)?, &r)), opts)?;
    Ok(a.merge(b))
}

/// Batch-mean cross-entropy computed from the forward pass alone.
fn lstm_loss(params: &LstmParams, prev: &LstmState, features: &[&[f64]], labels: &[u8]) -> Result<f64> {
    let scores = lstm::forward(params, prev, features)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, &l)| -libm::log(if l == lstm::POSITIVE { s.positive } else { s.negative }))
        .sum();
    Ok(total / labels.len() as f64)
}

fn lstm_case(units: usize, feature_len: usize, rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = LstmConfig { units, layers: 2, forget_bias: 1.0 };
    let mut params = LstmParams::init(feature_len, &cfg, rng)?;
    for (_, t) in params.named_mut() {
        if t.rank() == 1 {
            *t = random(t.shape(), rng);
        }
    }
    let mut prev = LstmState::zeros(units, 2);
    for l in &mut prev.layers {
        l.c = (0..units).map(|_| rng.random_range(-1.0..1.0)).collect();
        l.h = (0..units).map(|_| rng.random_range(-0.9..0.9)).collect();
    }
    let xs: Vec<Vec<f64>> = (0..4).map(|_| random(&[feature_len], rng).into_data()).collect();
    let features: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let labels = [1, 0, 1, 0];
    let (_, grads) = lstm::backward(&params, &prev, &features, &labels)?;
    check_gradients(&params, &grads, |p| lstm_loss(p, &prev, &features, &labels), opts)
}

fn gan_cases(rng: &mut ChaCha8Rng, opts: GradCheckOptions, out: &mut Vec<(String, GradCheckReport)>) -> Result<()> {
    let cfg = GanConfig {
        patch_size: 8,
        channels: 2,
        noise_dim: 3,
        generator_channels: [3, 2],
        discriminator_channels: [2, 3],
        batch_size: 2,
        init_std: 0.5,
        ..Default::default()
    };
    let mut params = GanParams::init(&cfg, rng)?;
    for (_, t) in params.generator.named_mut().into_iter().chain(params.discriminator.named_mut()) {
        if t.rank() == 1 {
            *t = random(t.shape(), rng);
            t.scale(0.3);
        }
    }
    let z = random(&[cfg.noise_dim], rng).into_data();
    let trace = params.generator.forward(&z, &cfg)?;
    let r = random(trace.image.shape(), rng);
    let mut gg = params.generator.clone();
    for (_, t) in gg.named_mut() {
        *t = Tensor::zeros_like(t);
    }
    params.generator.backward(&trace, &r, &mut gg)?;
    let a = check_gradients(&params.generator, &gg, |g| Ok(probe(&g.forward(&z, &cfg)?.image, &r)), opts)?;
    out.push(("generator".into(), a));

    let x = Tensor::from_fn(&[2, 8, 8], |_| rng.random_range(0.0..1.0));
    let disc = &params.discriminator;
    let t = disc.forward(&x)?;
    let mut gd = disc.clone();
    for (_, t) in gd.named_mut() {
        *t = Tensor::zeros_like(t);
    }
    let gx = disc.backward(&x, &t, 1.0, Some(&mut gd))?;
    let a = check_gradients(disc, &gd, |d| Ok(d.forward(&x)?.logit), opts)?;
    let b = check_gradients(&x, &gx, |x| Ok(disc.forward(x)?.logit), opts)?;
    out.push(("discriminator".into(), a.merge(b)));

    let real: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[2, 8, 8], |_| rng.random_range(0.0..1.0))).collect();
    let fake: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[2, 8, 8], |_| rng.random_range(0.0..1.0))).collect();
    let (_, gd) = gan::discriminator_loss_and_grads(disc, &real, &fake)?;
    let a = check_gradients(disc, &gd, |d| Ok(gan::discriminator_loss_and_grads(d, &real, &fake)?.0), opts)?;
    out.push(("discriminator loss".into(), a));

    let noise: Vec<Vec<f64>> = (0..3).map(|_| random(&[cfg.noise_dim], rng).into_data()).collect();
    let (_, gg) = gan::generator_loss_and_grads(&params, &noise)?;
    let mut probe_params = params.clone();
    let a = check_gradients(
        &params.generator,
        &gg,
        |g| {
            probe_params.generator = g.clone();
            Ok(gan::generator_loss_and_grads(&probe_params, &noise)?.0)
        },
        opts,
    )?;
    out.push(("generator loss".into(), a));
    Ok(())
}

/// Every hand-written backward pass of the crate at toy sizes, one report
/// per case.
pub fn standard_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    conv_cases(&mut rng, opts, &mut out)?;
    out.push(("embedding".into(), embedding_case(&mut rng, opts)?));
    for (n, m) in [(4, 6), (4, 12), (8, 6), (8, 12)] {
        out.push((format!("lstm n={} m={}", n, m), lstm_case(n, m, &mut rng, opts)?));
    }
    gan_cases(&mut rng, opts, &mut out)?;
    Ok(out)
}
