//! Siamese template matching: a valid-padded convolutional embedding shared
//! by the exemplar and the search region, followed by dense
//! cross-correlation.

use alloc::borrow::Cow;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Parameters;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::{crop_resize, with_channels};
use crate::ops::{self, Activation};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingArch {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl Default for EmbeddingArch {
    /// Three valid layers with total stride 4 and a 7-pixel receptive field:
    /// 71 px exemplars embed to 17x17, 199 px search regions to 49x49.
    fn default() -> Self {
        Self {
            in_channels: 3,
            layers: vec![
                LayerSpec { out_channels: 16, kernel: 3, stride: 2, activation: Activation::Relu },
                LayerSpec { out_channels: 32, kernel: 3, stride: 2, activation: Activation::Relu },
                LayerSpec { out_channels: 16, kernel: 1, stride: 1, activation: Activation::Identity },
            ],
        }
    }
}

impl EmbeddingArch {
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.layers {
            rf += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        rf
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.out_channels)
    }

    /// Spatial output extent for an input of `input` pixels per side.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        self.layers
            .iter()
            .try_fold(input, |n, l| ops::valid_extent(n, l.kernel, l.stride))
    }

    /// Multiply-accumulates for one `h x w` input, biases excluded.
    pub fn macs(&self, h: usize, w: usize) -> Option<u64> {
        let (mut h, mut w, mut c) = (h, w, self.in_channels);
        let mut total = 0u64;
        for l in &self.layers {
            h = ops::valid_extent(h, l.kernel, l.stride)?;
            w = ops::valid_extent(w, l.kernel, l.stride)?;
            total += ops::conv_macs(c, l.out_channels, l.kernel, l.kernel, h, w);
            c = l.out_channels;
        }
        Some(total)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.layers.is_empty() {
            return Err(Error::Argument("embedding needs input channels and at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::Argument(format!("embedding layer {} has a zero extent", i)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub activation: Activation,
}

/// The shared feature extractor applied to exemplars and search regions.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    arch: EmbeddingArch,
    layers: Vec<ConvLayer>,
}

impl Embedding {
    pub fn zeros(arch: EmbeddingArch) -> Result<Self> {
        arch.validate()?;
        let mut c = arch.in_channels;
        let layers = arch
            .layers
            .iter()
            .map(|l| {
                let layer = ConvLayer {
                    kernels: Tensor::zeros(&[l.out_channels, c, l.kernel, l.kernel]),
                    bias: Tensor::zeros(&[l.out_channels]),
                    stride: l.stride,
                    activation: l.activation,
                };
                c = l.out_channels;
                layer
            })
            .collect();
        Ok(Self { arch, layers })
    }

    /// He-uniform kernels, zero biases.
    pub fn seeded(arch: EmbeddingArch, seed: u64) -> Result<Self> {
        let mut emb = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut emb.layers {
            let s = layer.kernels.shape();
            let fan_in = (s[1] * s[2] * s[3]) as f64;
            let bound = libm::sqrt(6.0 / fan_in);
            for v in layer.kernels.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(emb)
    }

    pub fn arch(&self) -> &EmbeddingArch {
        &self.arch
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn embed(&self, patch: &Tensor) -> Result<Tensor> {
        Ok(self.embed_traced(patch)?.pop().expect("embedding has layers"))
    }

    /// Every layer's activated output, last entry being the features.
    pub fn embed_traced(&self, patch: &Tensor) -> Result<Vec<Tensor>> {
        let (c, h, w) = patch.chw("embed")?;
        if c != self.arch.in_channels {
            return Err(Error::Dimension {
                op: "embed",
                detail: format!("patch has {} channels, embedding expects {}", c, self.arch.in_channels),
            });
        }
        let rf = self.arch.receptive_field();
        if h < rf || w < rf {
            return Err(Error::Geometry(format!(
                "patch {}x{} is smaller than the {} px receptive field",
                h, w, rf
            )));
        }
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outs.last().unwrap_or(patch);
            let mut y = ops::conv2d_valid(input, &layer.kernels, layer.stride)?;
            ops::add_channel_bias(&mut y, &layer.bias)?;
            layer.activation.apply(&mut y);
            y.ensure_finite("embed")?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// Backpropagates `grad_features` through a traced forward pass, returning
    /// parameter gradients (same layout as `self`) and the input gradient.
    pub fn backward(&self, patch: &Tensor, trace: &[Tensor], grad_features: &Tensor) -> Result<(Embedding, Tensor)> {
        let mut grads = Embedding::zeros(self.arch.clone())?;
        let mut g = grad_features.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backward(&trace[i], &mut g);
            let input = if i == 0 { patch } else { &trace[i - 1] };
            let (_, ih, iw) = input.chw("embed backward")?;
            let k = layer.kernels.shape();
            grads.layers[i].kernels = ops::conv2d_grad_kernels(input, &g, layer.stride, k[2], k[3])?;
            grads.layers[i].bias = ops::channel_bias_grad(&g)?;
            g = ops::conv2d_grad_input(&layer.kernels, &g, layer.stride, ih, iw)?;
        }
        Ok((grads, g))
    }
}

impl Parameters for Embedding {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("embedding.layer{}.kernels", i), &l.kernels));
            v.push((format!("embedding.layer{}.bias", i), &l.bias));
        }
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.push((format!("embedding.layer{}.kernels", i), &mut l.kernels));
            v.push((format!("embedding.layer{}.bias", i), &mut l.bias));
        }
        v
    }
}

/// Pixel sizes and scale search settings shared by matching and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchGeometry {
    pub exemplar_size: usize,
    pub search_size: usize,
    /// Relative margin added around the target on each axis before cropping.
    pub context: f64,
    pub scales: Vec<f64>,
    /// Multiplicative penalty on scores of non-unit scales; 1.0 disables it.
    pub scale_penalty: f64,
    /// Constant added to every cross-correlation value.
    pub score_offset: f64,
}

impl Default for SearchGeometry {
    fn default() -> Self {
        Self {
            exemplar_size: 71,
            search_size: 199,
            context: 0.2,
            scales: vec![0.964, 1.0, 1.0375],
            scale_penalty: 1.0,
            score_offset: 0.0,
        }
    }
}

/// Feature-space extents implied by a geometry and an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extents {
    pub template: usize,
    pub search: usize,
    pub score: usize,
    pub stride: usize,
}

impl SearchGeometry {
    pub fn extents(&self, arch: &EmbeddingArch) -> Result<Extents> {
        let template = arch.output_extent(self.exemplar_size).ok_or_else(|| {
            Error::Geometry(format!("exemplar size {} below receptive field", self.exemplar_size))
        })?;
        let search = arch.output_extent(self.search_size).ok_or_else(|| {
            Error::Geometry(format!("search size {} below receptive field", self.search_size))
        })?;
        if search < template {
            return Err(Error::Geometry("search features smaller than template features".into()));
        }
        let stride = arch.total_stride();
        let score = search - template + 1;
        if self.search_size != self.exemplar_size + stride * (score - 1) {
            return Err(Error::Geometry(format!(
                "search size {} is not exemplar size {} plus a whole number of {} px strides",
                self.search_size, self.exemplar_size, stride
            )));
        }
        Ok(Extents { template, search, score, stride })
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Argument("scales must be a non-empty list of positive factors".into()));
        }
        if !(self.context >= 0.0) || !(self.scale_penalty > 0.0) || !self.score_offset.is_finite() {
            return Err(Error::Argument("context must be >= 0 and scale_penalty > 0".into()));
        }
        Ok(())
    }

    /// Frame region whose resampling yields the exemplar for `target`.
    pub fn exemplar_region(&self, target: &BBox, scale: f64) -> BBox {
        let (cx, cy) = target.center();
        let f = (1.0 + self.context) * scale;
        BBox::from_center(cx, cy, target.w * f, target.h * f)
    }

    /// Frame region covered by the search image around `target`.
    pub fn search_region(&self, target: &BBox, scale: f64) -> BBox {
        let ratio = self.search_size as f64 / self.exemplar_size as f64;
        let ex = self.exemplar_region(target, scale);
        let (cx, cy) = ex.center();
        BBox::from_center(cx, cy, ex.w * ratio, ex.h * ratio)
    }
}

/// One scale's worth of matching output.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLevel {
    pub scale: f64,
    /// `[S, S]` cross-correlation scores.
    pub scores: Tensor,
    /// `[C, F, F]` embedding of the search image.
    pub features: Tensor,
    /// `[C_in, search_size, search_size]` resampled search region.
    pub search_image: Tensor,
    /// Frame region the search image was resampled from.
    pub region: BBox,
    /// Target extent at this scale, in frame pixels.
    pub target_w: f64,
    pub target_h: f64,
}

/// Score maps for every scale plus the bookkeeping that maps score cells to
/// feature crops and frame boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMapSet {
    pub levels: Vec<ScaleLevel>,
    pub extents: Extents,
    pub exemplar_size: usize,
    pub search_size: usize,
    pub scale_penalty: f64,
}

impl ScoreMapSet {
    fn frame_per_search_px(&self, level: &ScaleLevel) -> (f64, f64) {
        let n = self.search_size as f64;
        (level.region.w / n, level.region.h / n)
    }

    /// Frame-space target box for score cell `(row, col)` at `scale_index`.
    pub fn box_for(&self, scale_index: usize, row: usize, col: usize) -> BBox {
        let level = &self.levels[scale_index];
        let (kx, ky) = self.frame_per_search_px(level);
        let half = self.exemplar_size as f64 / 2.0;
        let s = self.extents.stride as f64;
        let cx = level.region.x + (col as f64 * s + half) * kx;
        let cy = level.region.y + (row as f64 * s + half) * ky;
        BBox::from_center(cx, cy, level.target_w, level.target_h)
    }

    /// Inverse of [`box_for`](Self::box_for): nearest score cell to the
    /// center of `b`, if it lies on the map.
    pub fn coordinate_for(&self, scale_index: usize, b: &BBox) -> Option<(usize, usize)> {
        let level = self.levels.get(scale_index)?;
        let (kx, ky) = self.frame_per_search_px(level);
        let half = self.exemplar_size as f64 / 2.0;
        let s = self.extents.stride as f64;
        let (cx, cy) = b.center();
        let col = libm::round(((cx - level.region.x) / kx - half) / s);
        let row = libm::round(((cy - level.region.y) / ky - half) / s);
        let n = self.extents.score as f64;
        if row < 0.0 || col < 0.0 || row >= n || col >= n {
            return None;
        }
        Some((row as usize, col as usize))
    }

    /// The exemplar-sized window of the search image behind score cell `(row, col)`.
    pub fn subwindow(&self, scale_index: usize, row: usize, col: usize) -> Result<Tensor> {
        let s = self.extents.stride;
        self.levels[scale_index]
            .search_image
            .spatial_crop(row * s, col * s, self.exemplar_size, self.exemplar_size)
    }

    /// Ranking value of a raw score at a scale, after the scale penalty.
    pub fn penalized(&self, scale_index: usize, score: f64) -> f64 {
        let p = self.scale_penalty;
        if p == 1.0 || self.levels[scale_index].scale == 1.0 {
            score
        } else if score >= 0.0 {
            score * p
        } else {
            score / p
        }
    }

    pub fn cell_count(&self) -> usize {
        self.levels.iter().map(|l| l.scores.len()).sum()
    }
}

/// First-frame exemplar features; never updated afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub features: Tensor,
    pub patch: Tensor,
    pub region: BBox,
}

/// The frozen embedding plus its search geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseMatcher {
    embedding: Embedding,
    geometry: SearchGeometry,
    extents: Extents,
}

impl SiameseMatcher {
    pub fn new(embedding: Embedding, geometry: SearchGeometry) -> Result<Self> {
        geometry.validate()?;
        let extents = geometry.extents(embedding.arch())?;
        Ok(Self { embedding, geometry, extents })
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn geometry(&self) -> &SearchGeometry {
        &self.geometry
    }

    pub fn extents(&self) -> Extents {
        self.extents
    }

    /// Flattened feature length `C x F x F` of one exemplar.
    pub fn feature_len(&self) -> usize {
        self.embedding.arch().out_channels() * self.extents.template * self.extents.template
    }

    pub fn embed(&self, patch: &Tensor) -> Result<Tensor> {
        self.embedding.embed(patch)
    }

    /// The frame in the embedding's channel layout, borrowed when it already matches.
    pub fn prepare_frame<'a>(&self, frame: &'a Tensor) -> Result<Cow<'a, Tensor>> {
        let (c, _, _) = frame.chw("prepare_frame")?;
        if c == self.embedding.arch().in_channels {
            Ok(Cow::Borrowed(frame))
        } else {
            with_channels(frame, self.embedding.arch().in_channels).map(Cow::Owned)
        }
    }

    /// Resamples the exemplar region around `target` (at `scale`) to exemplar size.
    pub fn exemplar_patch(&self, frame: &Tensor, target: &BBox, scale: f64) -> Result<Tensor> {
        let frame = self.prepare_frame(frame)?;
        let n = self.geometry.exemplar_size;
        crop_resize(&frame, &self.geometry.exemplar_region(target, scale), n, n)
    }

    pub fn make_template(&self, first_frame: &Tensor, annotation: &BBox) -> Result<Template> {
        let (_, h, w) = first_frame.chw("make_template")?;
        if annotation.is_degenerate() {
            return Err(Error::Annotation(format!("degenerate box {:?}", annotation)));
        }
        let (cx, cy) = annotation.center();
        if !(0.0..=w as f64).contains(&cx) || !(0.0..=h as f64).contains(&cy) {
            return Err(Error::Annotation(format!(
                "box {:?} is centered outside the {}x{} frame",
                annotation, w, h
            )));
        }
        let patch = self.exemplar_patch(first_frame, annotation, 1.0)?;
        let features = self.embed(&patch)?;
        Ok(Template { features, patch, region: self.geometry.exemplar_region(annotation, 1.0) })
    }

    /// Scores every candidate sub-window of the search region around
    /// `previous` at each configured scale.
    pub fn score_search(&self, template: &Tensor, frame: &Tensor, previous: &BBox) -> Result<ScoreMapSet> {
        let (_, h, w) = frame.chw("score_search")?;
        let rf = self.embedding.arch().receptive_field();
        if h < rf || w < rf {
            return Err(Error::Geometry(format!("frame {}x{} smaller than the {} px minimum", w, h, rf)));
        }
        if previous.is_degenerate() {
            return Err(Error::Geometry(format!("previous box {:?} is degenerate", previous)));
        }
        let (cx, cy) = previous.center();
        let center = BBox::from_center(
            cx.clamp(0.0, w as f64),
            cy.clamp(0.0, h as f64),
            previous.w,
            previous.h,
        );
        let frame = self.prepare_frame(frame)?;
        let n = self.geometry.search_size;
        let mut levels = Vec::with_capacity(self.geometry.scales.len());
        for &scale in &self.geometry.scales {
            let region = self.geometry.search_region(&center, scale);
            let search_image = crop_resize(&frame, &region, n, n)?;
            let features = self.embed(&search_image)?;
            let scores = ops::cross_correlate(template, &features, self.geometry.score_offset)?;
            levels.push(ScaleLevel {
                scale,
                scores,
                features,
                search_image,
                region,
                target_w: center.w * scale,
                target_h: center.h * scale,
            });
        }
        Ok(ScoreMapSet {
            levels,
            extents: self.extents,
            exemplar_size: self.geometry.exemplar_size,
            search_size: n,
            scale_penalty: self.geometry.scale_penalty,
        })
    }

    /// Multiply-accumulates of scoring one frame: one search embedding and one
    /// cross-correlation per scale.
    pub fn scoring_macs(&self) -> u64 {
        let n = self.geometry.search_size;
        let emb = self.embedding.arch().macs(n, n).unwrap_or(0);
        let e = self.extents;
        let xcorr = ops::conv_macs(self.embedding.arch().out_channels(), 1, e.template, e.template, e.score, e.score);
        (emb + xcorr) * self.geometry.scales.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matcher(seed: u64) -> SiameseMatcher {
        SiameseMatcher::new(Embedding::seeded(EmbeddingArch::default(), seed).unwrap(), SearchGeometry::default())
            .unwrap()
    }

    #[test]
    fn default_geometry_extents() {
        let e = SearchGeometry::default().extents(&EmbeddingArch::default()).unwrap();
        assert_eq!(e, Extents { template: 17, search: 49, score: 33, stride: 4 });
        assert_eq!(EmbeddingArch::default().receptive_field(), 7);
    }

    #[test]
    fn embed_shapes() {
        let m = matcher(1);
        assert_eq!(m.embed(&Tensor::zeros(&[3, 71, 71])).unwrap().shape(), &[16, 17, 17]);
        assert_eq!(m.embed(&Tensor::zeros(&[3, 199, 199])).unwrap().shape(), &[16, 49, 49]);
    }

    #[test]
    fn zero_network_gives_zero_features() {
        let e = Embedding::zeros(EmbeddingArch::default()).unwrap();
        let patch = Tensor::from_fn(&[3, 71, 71], |i| (i % 7) as f64);
        assert!(e.embed(&patch).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_patch_is_a_geometry_error() {
        let m = matcher(1);
        assert!(matches!(m.embed(&Tensor::zeros(&[3, 6, 40])), Err(Error::Geometry(_))));
    }

    #[test]
    fn template_is_deterministic_and_degenerate_boxes_fail() {
        let m = matcher(3);
        let frame = Tensor::from_fn(&[3, 120, 140], |i| ((i * 37) % 101) as f64 / 100.0);
        let b = BBox::new(40.0, 30.0, 30.0, 24.0);
        let a = m.make_template(&frame, &b).unwrap();
        let c = m.make_template(&frame, &b).unwrap();
        assert_eq!(a.features.checksum(), c.features.checksum());
        assert_eq!(a.region.w, 36.0);
        assert!(matches!(
            m.make_template(&frame, &BBox::new(10.0, 10.0, 0.0, 5.0)),
            Err(Error::Annotation(_))
        ));
        assert!(matches!(
            m.make_template(&frame, &BBox::new(400.0, 10.0, 5.0, 5.0)),
            Err(Error::Annotation(_))
        ));
    }

    #[test]
    fn full_frame_annotation_without_context_crops_the_frame() {
        let geometry = SearchGeometry { context: 0.0, ..Default::default() };
        let m = SiameseMatcher::new(Embedding::seeded(EmbeddingArch::default(), 0).unwrap(), geometry).unwrap();
        let frame = Tensor::from_fn(&[3, 71, 71], |i| (i % 13) as f64);
        let t = m.make_template(&frame, &BBox::new(0.0, 0.0, 71.0, 71.0)).unwrap();
        assert_eq!(t.patch, frame);
    }

    #[test]
    fn three_scales_give_three_33x33_maps() {
        let m = matcher(2);
        let frame = Tensor::from_fn(&[3, 200, 220], |i| ((i * 7919) % 255) as f64 / 255.0);
        let b = BBox::new(80.0, 70.0, 40.0, 36.0);
        let t = m.make_template(&frame, &b).unwrap();
        let set = m.score_search(&t.features, &frame, &b).unwrap();
        assert_eq!(set.levels.len(), 3);
        for l in &set.levels {
            assert_eq!(l.scores.shape(), &[33, 33]);
            assert_eq!(l.features.shape(), &[16, 49, 49]);
        }
    }

    #[test]
    fn center_cell_maps_back_to_previous_box() {
        let m = matcher(2);
        let frame = Tensor::zeros(&[3, 200, 220]);
        let b = BBox::new(80.0, 70.0, 40.0, 36.0);
        let t = m.make_template(&frame, &b).unwrap();
        let set = m.score_search(&t.features, &frame, &b).unwrap();
        let c = set.box_for(1, 16, 16);
        assert!((c.x - b.x).abs() < 1e-9 && (c.y - b.y).abs() < 1e-9);
        assert_eq!(set.coordinate_for(1, &c), Some((16, 16)));
    }

    #[test]
    fn geometry_rejects_misaligned_search_size() {
        let g = SearchGeometry { search_size: 200, ..Default::default() };
        assert!(g.extents(&EmbeddingArch::default()).is_err());
    }
}
