//! Small DCGAN-style generator/discriminator pair trained online on real
//! positive patches, used to synthesize extra positives for the classifier.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamSet, Parameters};
use crate::error::{dim, Error, Result};
use crate::image::{resize, with_channels};
use crate::matcher::SiameseMatcher;
use crate::ops::{self, sigmoid, Activation};
use crate::tensor::Tensor;

const LEAK: Activation = Activation::LeakyRelu(0.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    /// Side of the square image patches; must be a multiple of 4.
    pub patch_size: usize,
    pub channels: usize,
    pub noise_dim: usize,
    /// Channels after the generator's dense layer and its first upsampling.
    pub generator_channels: [usize; 2],
    pub discriminator_channels: [usize; 2],
    pub batch_size: usize,
    pub bank_capacity: usize,
    pub generator_adam: AdamConfig,
    pub discriminator_adam: AdamConfig,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        let adam = AdamConfig { learning_rate: 2e-3, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 };
        Self {
            patch_size: 32,
            channels: 3,
            noise_dim: 16,
            generator_channels: [16, 8],
            discriminator_channels: [8, 16],
            batch_size: 8,
            bank_capacity: 256,
            generator_adam: adam,
            discriminator_adam: adam,
            init_std: 0.02,
        }
    }
}

impl GanConfig {
    fn validate(&self) -> Result<()> {
        if self.patch_size < 8 || self.patch_size % 4 != 0 {
            return Err(Error::Argument(format!("GAN patch size {} must be a multiple of 4, >= 8", self.patch_size)));
        }
        if self.channels == 0 || self.noise_dim == 0 || self.batch_size == 0 || self.bank_capacity == 0 {
            return Err(Error::Argument("GAN channels, noise_dim, batch_size and bank_capacity must be positive".into()));
        }
        if self.generator_channels.contains(&0) || self.discriminator_channels.contains(&0) {
            return Err(Error::Argument("GAN layer widths must be positive".into()));
        }
        Ok(())
    }

    fn disc_extent(&self) -> usize {
        let a = ops::valid_extent(self.patch_size, 4, 2).expect("patch >= 8");
        ops::valid_extent(a, 3, 2).expect("patch >= 8")
    }
}

/// Noise vector -> dense -> two stride-2 transposed convolutions -> sigmoid image.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub up1_k: Tensor,
    pub up1_b: Tensor,
    pub up2_k: Tensor,
    pub up2_b: Tensor,
}

/// Image -> two stride-2 valid convolutions -> dense logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub c1_k: Tensor,
    pub c1_b: Tensor,
    pub c2_k: Tensor,
    pub c2_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

macro_rules! named_params {
    ($ty:ty, $prefix:literal, [$($field:ident),*]) => {
        impl Parameters for $ty {
            fn named(&self) -> Vec<(String, &Tensor)> {
                vec![$((format!("{}.{}", $prefix, stringify!($field)), &self.$field)),*]
            }
            fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
                vec![$((format!("{}.{}", $prefix, stringify!($field)), &mut self.$field)),*]
            }
        }
    };
}

named_params!(Generator, "generator", [fc_w, fc_b, up1_k, up1_b, up2_k, up2_b]);
named_params!(Discriminator, "discriminator", [c1_k, c1_b, c2_k, c2_b, fc_w, fc_b]);

#[derive(Debug, Clone, PartialEq)]
pub struct GanParams {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub config: GanConfig,
}

impl GanParams {
    pub fn zeros(config: &GanConfig) -> Result<Self> {
        config.validate()?;
        let base = config.patch_size / 4;
        let [g0, g1] = config.generator_channels;
        let [d1, d2] = config.discriminator_channels;
        let e = config.disc_extent();
        let c = config.channels;
        Ok(Self {
            generator: Generator {
                fc_w: Tensor::zeros(&[config.noise_dim, g0 * base * base]),
                fc_b: Tensor::zeros(&[g0 * base * base]),
                up1_k: Tensor::zeros(&[g0, g1, 2, 2]),
                up1_b: Tensor::zeros(&[g1]),
                up2_k: Tensor::zeros(&[g1, c, 2, 2]),
                up2_b: Tensor::zeros(&[c]),
            },
            discriminator: Discriminator {
                c1_k: Tensor::zeros(&[d1, c, 4, 4]),
                c1_b: Tensor::zeros(&[d1]),
                c2_k: Tensor::zeros(&[d2, d1, 3, 3]),
                c2_b: Tensor::zeros(&[d2]),
                fc_w: Tensor::zeros(&[d2 * e * e]),
                fc_b: Tensor::zeros(&[1]),
            },
            config: config.clone(),
        })
    }

    /// Normal(0, init_std) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &GanConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|_| Error::Argument("GAN init_std must be finite and >= 0".into()))?;
        let mut fill = |t: &mut Tensor| {
            for v in t.data_mut() {
                *v = normal.sample(rng);
            }
        };
        let g = &mut p.generator;
        fill(&mut g.fc_w);
        fill(&mut g.up1_k);
        fill(&mut g.up2_k);
        let d = &mut p.discriminator;
        fill(&mut d.c1_k);
        fill(&mut d.c2_k);
        fill(&mut d.fc_w);
        Ok(p)
    }

    pub fn checksum(&self) -> u64 {
        self.generator.checksum() ^ self.discriminator.checksum().rotate_left(1)
    }
}

pub struct GeneratorTrace {
    noise: Vec<f64>,
    dense: Tensor,
    up1: Tensor,
    pub image: Tensor,
}

impl Generator {
    pub fn forward(&self, noise: &[f64], config: &GanConfig) -> Result<GeneratorTrace> {
        if noise.len() != self.fc_w.shape()[0] {
            return Err(dim("generator", format!("noise length {} vs {}", noise.len(), self.fc_w.shape()[0])));
        }
        let base = config.patch_size / 4;
        let width = self.fc_w.shape()[1];
        let mut dense = self.fc_b.data().to_vec();
        for (zi, row) in noise.iter().zip(self.fc_w.data().chunks_exact(width)) {
            for (d, w) in dense.iter_mut().zip(row) {
                *d += zi * w;
            }
        }
        let mut dense = Tensor::new(vec![config.generator_channels[0], base, base], dense)?;
        Activation::Relu.apply(&mut dense);
        let mut up1 = ops::conv_transpose2d(&dense, &self.up1_k, 2)?;
        ops::add_channel_bias(&mut up1, &self.up1_b)?;
        Activation::Relu.apply(&mut up1);
        let mut image = ops::conv_transpose2d(&up1, &self.up2_k, 2)?;
        ops::add_channel_bias(&mut image, &self.up2_b)?;
        Activation::Sigmoid.apply(&mut image);
        image.ensure_finite("generator output")?;
        Ok(GeneratorTrace { noise: noise.to_vec(), dense, up1, image })
    }

    /// Accumulates parameter gradients for upstream `grad_image` into `grads`.
    pub fn backward(&self, trace: &GeneratorTrace, grad_image: &Tensor, grads: &mut Generator) -> Result<()> {
        let mut g = grad_image.clone();
        Activation::Sigmoid.backward(&trace.image, &mut g);
        grads.up2_b.add_assign(&ops::channel_bias_grad(&g)?)?;
        let (mut g_up1, gk2) = ops::conv_transpose2d_backward(&trace.up1, &self.up2_k, 2, &g)?;
        grads.up2_k.add_assign(&gk2)?;
        Activation::Relu.backward(&trace.up1, &mut g_up1);
        grads.up1_b.add_assign(&ops::channel_bias_grad(&g_up1)?)?;
        let (mut g_dense, gk1) = ops::conv_transpose2d_backward(&trace.dense, &self.up1_k, 2, &g_up1)?;
        grads.up1_k.add_assign(&gk1)?;
        Activation::Relu.backward(&trace.dense, &mut g_dense);
        let width = g_dense.len();
        for (gb, d) in grads.fc_b.data_mut().iter_mut().zip(g_dense.data()) {
            *gb += d;
        }
        for (zi, row) in trace.noise.iter().zip(grads.fc_w.data_mut().chunks_exact_mut(width)) {
            for (gw, d) in row.iter_mut().zip(g_dense.data()) {
                *gw += zi * d;
            }
        }
        Ok(())
    }
}

pub struct DiscriminatorTrace {
    y1: Tensor,
    y2: Tensor,
    pub logit: f64,
}

impl Discriminator {
    pub fn forward(&self, image: &Tensor) -> Result<DiscriminatorTrace> {
        let mut y1 = ops::conv2d_valid(image, &self.c1_k, 2)?;
        ops::add_channel_bias(&mut y1, &self.c1_b)?;
        LEAK.apply(&mut y1);
        let mut y2 = ops::conv2d_valid(&y1, &self.c2_k, 2)?;
        ops::add_channel_bias(&mut y2, &self.c2_b)?;
        LEAK.apply(&mut y2);
        if y2.len() != self.fc_w.len() {
            return Err(dim("discriminator", format!("{} features vs {} weights", y2.len(), self.fc_w.len())));
        }
        let logit = self.fc_b.data()[0] + y2.data().iter().zip(self.fc_w.data()).map(|(a, b)| a * b).sum::<f64>();
        if !logit.is_finite() {
            return Err(Error::NonFinite("discriminator logit".into()));
        }
        Ok(DiscriminatorTrace { y1, y2, logit })
    }

    /// Accumulates parameter gradients for upstream `grad_logit` into `grads`
    /// and returns the gradient with respect to the input image.
    pub fn backward(
        &self,
        image: &Tensor,
        trace: &DiscriminatorTrace,
        grad_logit: f64,
        grads: Option<&mut Discriminator>,
    ) -> Result<Tensor> {
        let mut g2 = self.fc_w.clone().reshape(trace.y2.shape())?;
        g2.scale(grad_logit);
        LEAK.backward(&trace.y2, &mut g2);
        let (_, h1, w1) = trace.y1.chw("discriminator backward")?;
        let mut g1 = ops::conv2d_grad_input(&self.c2_k, &g2, 2, h1, w1)?;
        LEAK.backward(&trace.y1, &mut g1);
        let (_, h0, w0) = image.chw("discriminator backward")?;
        let g_image = ops::conv2d_grad_input(&self.c1_k, &g1, 2, h0, w0)?;
        if let Some(grads) = grads {
            grads.fc_b.data_mut()[0] += grad_logit;
            for (gw, y) in grads.fc_w.data_mut().iter_mut().zip(trace.y2.data()) {
                *gw += grad_logit * y;
            }
            grads.c2_b.add_assign(&ops::channel_bias_grad(&g2)?)?;
            grads.c2_k.add_assign(&ops::conv2d_grad_kernels(&trace.y1, &g2, 2, 3, 3)?)?;
            grads.c1_b.add_assign(&ops::channel_bias_grad(&g1)?)?;
            grads.c1_k.add_assign(&ops::conv2d_grad_kernels(image, &g1, 2, 4, 4)?)?;
        }
        Ok(g_image)
    }
}

const PROB_FLOOR: f64 = 1e-7;

/// Discriminator and (non-saturating) generator losses from discriminator
/// probabilities on real and generated batches.
pub fn gan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Argument("gan_losses: empty batch".into()));
    }
    let clamp = |p: f64| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&p| f(clamp(p))).sum::<f64>() / v.len() as f64;
    let loss_d = -mean(d_real, &|p| libm::log(p)) - mean(d_fake, &|p| libm::log(1.0 - p));
    let loss_g = -mean(d_fake, &|p| libm::log(p));
    Ok((loss_d, loss_g))
}

/// `-log(sigmoid(x))` without overflow.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        libm::log1p(libm::exp(-x))
    } else {
        -x + libm::log1p(libm::exp(x))
    }
}

/// Discriminator loss on logits and its parameter gradients (fakes are constants).
pub fn discriminator_loss_and_grads(
    disc: &Discriminator,
    real: &[Tensor],
    fake: &[Tensor],
) -> Result<(f64, Discriminator)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Argument("discriminator step: empty batch".into()));
    }
    let mut grads = zeros_like_disc(disc);
    let mut loss = 0.0;
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    for x in real {
        let t = disc.forward(x)?;
        loss += softplus_neg(t.logit) / nr;
        disc.backward(x, &t, (sigmoid(t.logit) - 1.0) / nr, Some(&mut grads))?;
    }
    for x in fake {
        let t = disc.forward(x)?;
        loss += softplus_neg(-t.logit) / nf;
        disc.backward(x, &t, sigmoid(t.logit) / nf, Some(&mut grads))?;
    }
    Ok((loss, grads))
}

/// Non-saturating generator loss on the given noise batch and the
/// generator's parameter gradients.
pub fn generator_loss_and_grads(params: &GanParams, noise: &[Vec<f64>]) -> Result<(f64, Generator)> {
    if noise.is_empty() {
        return Err(Error::Argument("generator step: empty batch".into()));
    }
    let gen = &params.generator;
    let mut grads = zeros_like_gen(gen);
    let mut loss = 0.0;
    let n = noise.len() as f64;
    for z in noise {
        let gt = gen.forward(z, &params.config)?;
        let dt = params.discriminator.forward(&gt.image)?;
        loss += softplus_neg(dt.logit) / n;
        let g_img = params.discriminator.backward(&gt.image, &dt, (sigmoid(dt.logit) - 1.0) / n, None)?;
        gen.backward(&gt, &g_img, &mut grads)?;
    }
    Ok((loss, grads))
}

fn zeros_like_gen(g: &Generator) -> Generator {
    Generator {
        fc_w: Tensor::zeros_like(&g.fc_w),
        fc_b: Tensor::zeros_like(&g.fc_b),
        up1_k: Tensor::zeros_like(&g.up1_k),
        up1_b: Tensor::zeros_like(&g.up1_b),
        up2_k: Tensor::zeros_like(&g.up2_k),
        up2_b: Tensor::zeros_like(&g.up2_b),
    }
}

fn zeros_like_disc(d: &Discriminator) -> Discriminator {
    Discriminator {
        c1_k: Tensor::zeros_like(&d.c1_k),
        c1_b: Tensor::zeros_like(&d.c1_b),
        c2_k: Tensor::zeros_like(&d.c2_k),
        c2_b: Tensor::zeros_like(&d.c2_b),
        fc_w: Tensor::zeros_like(&d.fc_w),
        fc_b: Tensor::zeros_like(&d.fc_b),
    }
}

/// FIFO store of real positive patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveBank {
    capacity: usize,
    patches: VecDeque<Tensor>,
}

impl PositiveBank {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), patches: VecDeque::new() }
    }

    pub fn push(&mut self, patch: Tensor) {
        if self.patches.len() == self.capacity {
            self.patches.pop_front();
        }
        self.patches.push_back(patch);
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.patches.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.patches.iter()
    }
}

/// GAN parameters together with their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct GanTrainer {
    pub params: GanParams,
    adam_generator: AdamSet,
    adam_discriminator: AdamSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GanLosses {
    pub discriminator: f64,
    pub generator: f64,
}

fn sample_noise<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

impl GanTrainer {
    pub fn new(params: GanParams) -> Self {
        let adam_generator = AdamSet::for_params(&params.generator, params.config.generator_adam);
        let adam_discriminator = AdamSet::for_params(&params.discriminator, params.config.discriminator_adam);
        Self { params, adam_generator, adam_discriminator }
    }

    /// Alternating discriminator / generator ADAM steps on minibatches drawn
    /// from `bank`. Returns the losses of the last step (zeros when `steps == 0`).
    pub fn train<R: Rng + ?Sized>(&mut self, bank: &PositiveBank, steps: usize, rng: &mut R) -> Result<GanLosses> {
        if bank.is_empty() {
            return Err(Error::Argument("train_gan: positive bank is empty".into()));
        }
        let cfg = self.params.config.clone();
        let size = cfg.patch_size;
        for p in bank.iter() {
            if p.shape() != [cfg.channels, size, size] {
                return Err(dim("train_gan", format!("bank patch {:?} vs [{}, {}, {}]", p.shape(), cfg.channels, size, size)));
            }
        }
        let mut last = GanLosses::default();
        for step in 0..steps {
            let real: Vec<Tensor> = (0..cfg.batch_size)
                .map(|_| bank.get(rng.random_range(0..bank.len())).expect("in range").clone())
                .collect();
            let fake = (0..cfg.batch_size)
                .map(|_| Ok(self.params.generator.forward(&sample_noise(cfg.noise_dim, rng), &cfg)?.image))
                .collect::<Result<Vec<_>>>()?;
            let (loss_d, grads_d) = discriminator_loss_and_grads(&self.params.discriminator, &real, &fake)?;
            self.adam_discriminator.step(&mut self.params.discriminator, &grads_d)?;

            let noise: Vec<Vec<f64>> = (0..cfg.batch_size).map(|_| sample_noise(cfg.noise_dim, rng)).collect();
            let (loss_g, grads_g) = generator_loss_and_grads(&self.params, &noise)?;
            self.adam_generator.step(&mut self.params.generator, &grads_g)?;

            if !loss_d.is_finite() || !loss_g.is_finite() {
                return Err(Error::NonFinite(format!("GAN loss at step {}", step)));
            }
            last = GanLosses { discriminator: loss_d, generator: loss_g };
        }
        Ok(last)
    }
}

/// `count` generator samples in `[0, 1]`.
pub fn generate_positives<R: Rng + ?Sized>(params: &GanParams, count: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|_| Ok(params.generator.forward(&sample_noise(params.config.noise_dim, rng), &params.config)?.image))
        .collect()
}

/// Resizes each patch to exemplar size, embeds it with the frozen matcher
/// and flattens the features channel-major.
pub fn features_for_generated(patches: &[Tensor], matcher: &SiameseMatcher) -> Result<Vec<Vec<f64>>> {
    let n = matcher.geometry().exemplar_size;
    let channels = matcher.embedding().arch().in_channels;
    patches
        .iter()
        .map(|p| {
            let p = with_channels(p, channels)?;
            let (_, h, w) = p.chw("features_for_generated")?;
            let p = if h == n && w == n { p } else { resize(&p, n, n)? };
            Ok(matcher.embed(&p)?.into_data())
        })
        .collect()
}
