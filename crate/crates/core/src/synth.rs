//! Scripted synthetic sequences with exact ground truth.
//!
//! A value-noise textured object moves over a value-noise background.
//! Optional effects: scale drift, a gradual change of the object's texture,
//! a global gain ramp, occluding rectangles and distractor objects. Pixel
//! values are multiples of 1/255 and box coordinates multiples of 1/256, so
//! both survive 8-bit image files and decimal text unchanged.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::sequence::Sequence;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Occluder {
    /// First frame covered.
    pub start: usize,
    /// One past the last frame covered.
    pub end: usize,
    pub bbox: BBox,
    pub value: f64,
}

impl Default for Occluder {
    fn default() -> Self {
        Self { start: 0, end: 0, bbox: BBox::new(0.0, 0.0, 1.0, 1.0), value: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Distractor {
    /// Top-left corner in the first frame; the size follows the target's.
    pub x: f64,
    pub y: f64,
    pub velocity: [f64; 2],
    /// Wear the target's first-frame texture instead of a texture of its own.
    pub same_texture: bool,
}

impl Default for Distractor {
    fn default() -> Self {
        Self { x: 0.0, y: 0.0, velocity: [0.0, 0.0], same_texture: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub name: String,
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Target box in the first frame.
    pub object: BBox,
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Per-frame multiplicative size change.
    pub scale_drift: f64,
    /// Blend weight of the second texture reached at the last frame.
    pub deformation: f64,
    /// Global gain reached at the last frame (linear ramp from 1).
    pub illumination: f64,
    /// Texture cells across the object.
    pub object_cells: usize,
    /// Background texture cell size in pixels.
    pub background_cell: f64,
    /// Background values span `[0.5 - c/2, 0.5 + c/2]`.
    pub background_contrast: f64,
    /// Amplitude of independent per-pixel uniform noise.
    pub pixel_noise: f64,
    pub occluders: Vec<Occluder>,
    pub distractors: Vec<Distractor>,
    /// Extra tags on top of the ones implied by the script.
    pub attributes: Vec<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            seed: 0,
            frames: 30,
            width: 256,
            height: 256,
            channels: 3,
            object: BBox::new(100.0, 100.0, 40.0, 40.0),
            velocity: [0.0, 0.0],
            scale_drift: 1.0,
            deformation: 0.0,
            illumination: 1.0,
            object_cells: 4,
            background_cell: 24.0,
            background_contrast: 0.5,
            pixel_noise: 0.0,
            occluders: Vec::new(),
            distractors: Vec::new(),
            attributes: Vec::new(),
        }
    }
}

fn quantize(v: f64) -> f64 {
    libm::round(v * 256.0) / 256.0
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Spec("frames, width and height must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Spec(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.object.is_degenerate() || !self.object.is_finite() {
            return Err(Error::Spec(format!("object box {:?} is degenerate", self.object)));
        }
        if !(self.scale_drift > 0.0) || !(0.0..=1.0).contains(&self.deformation) || !(self.illumination >= 0.0) {
            return Err(Error::Spec("scale_drift must be > 0, deformation in [0, 1], illumination >= 0".into()));
        }
        if self.object_cells == 0 || !(self.background_cell > 0.0) {
            return Err(Error::Spec("texture cell sizes must be positive".into()));
        }
        Ok(())
    }

    /// Scripted target box at frame `t`, before any validity check.
    pub fn box_at(&self, t: usize) -> BBox {
        let s = libm::pow(self.scale_drift, t as f64);
        let (cx, cy) = self.object.center();
        let cx = cx + self.velocity[0] * t as f64;
        let cy = cy + self.velocity[1] * t as f64;
        let (w, h) = (quantize(self.object.w * s), quantize(self.object.h * s));
        BBox::new(quantize(cx - w / 2.0), quantize(cy - h / 2.0), w, h)
    }

    /// Tags implied by the script plus the explicit ones, sorted and unique.
    pub fn derived_attributes(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.attributes.clone();
        let mut add = |cond: bool, tag: &str| {
            if cond {
                tags.push(tag.to_string());
            }
        };
        add(self.scale_drift != 1.0, "scale_variation");
        add(self.deformation > 0.0, "deformation");
        add(self.illumination != 1.0, "illumination_variation");
        add(!self.occluders.is_empty(), "occlusion");
        add(!self.distractors.is_empty(), "background_clutter");
        let speed = libm::hypot(self.velocity[0], self.velocity[1]);
        add(speed >= 0.5 * self.object.w.min(self.object.h), "fast_motion");
        tags.sort();
        tags.dedup();
        tags
    }
}

/// Bilinearly interpolated random lattice, per channel.
#[derive(Debug, Clone)]
struct ValueNoise {
    cols: usize,
    rows: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new<R: Rng + ?Sized>(cols: usize, rows: usize, channels: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let values = (0..cols * rows * channels).map(|_| rng.random_range(lo..=hi)).collect();
        Self { cols, rows, values }
    }

    /// `(u, v)` in lattice units.
    fn sample(&self, c: usize, u: f64, v: f64) -> f64 {
        let u = u.clamp(0.0, (self.cols - 1) as f64);
        let v = v.clamp(0.0, (self.rows - 1) as f64);
        let (x0, y0) = (libm::floor(u) as usize, libm::floor(v) as usize);
        let (x1, y1) = ((x0 + 1).min(self.cols - 1), (y0 + 1).min(self.rows - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let at = |x: usize, y: usize| self.values[(c * self.rows + y) * self.cols + x];
        let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
        let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Paints `tex` (spanning the unit square) into `b`, blending with `other` by `mix`.
fn paint(img: &mut [f64], size: (usize, usize, usize), b: &BBox, tex: &ValueNoise, other: Option<(&ValueNoise, f64)>) {
    let (c_n, h, w) = size;
    let x0 = libm::floor(b.x).max(0.0) as usize;
    let y0 = libm::floor(b.y).max(0.0) as usize;
    let x1 = (libm::ceil(b.x + b.w).max(0.0) as usize).min(w);
    let y1 = (libm::ceil(b.y + b.h).max(0.0) as usize).min(h);
    let span_u = (tex.cols - 1) as f64;
    let span_v = (tex.rows - 1) as f64;
    for y in y0..y1 {
        let py = y as f64 + 0.5;
        if py < b.y || py >= b.y + b.h {
            continue;
        }
        let v = (py - b.y) / b.h;
        for x in x0..x1 {
            let px = x as f64 + 0.5;
            if px < b.x || px >= b.x + b.w {
                continue;
            }
            let u = (px - b.x) / b.w;
            for c in 0..c_n {
                let mut val = tex.sample(c, u * span_u, v * span_v);
                if let Some((o, mix)) = other {
                    val = (1.0 - mix) * val + mix * o.sample(c, u * span_u, v * span_v);
                }
                img[(c * h + y) * w + x] = val;
            }
        }
    }
}

/// Renders the sequence described by `spec`, seeded by `spec.seed`.
pub fn synth_sequence(spec: &SynthSpec) -> Result<Sequence> {
    spec.validate()?;
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let mut boxes = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let b = spec.box_at(t);
        if b.is_degenerate() || !b.lies_within(w as f64, h as f64) {
            return Err(Error::Spec(format!("object box {:?} leaves the {}x{} frame at frame {}", b, w, h, t)));
        }
        boxes.push(b);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = spec.background_contrast.clamp(0.0, 1.0) / 2.0;
    let bg_cols = libm::ceil(w as f64 / spec.background_cell) as usize + 1;
    let bg_rows = libm::ceil(h as f64 / spec.background_cell) as usize + 1;
    let background = ValueNoise::new(bg_cols, bg_rows, c, 0.5 - half, 0.5 + half, &mut rng);
    let n = spec.object_cells + 1;
    let tex_a = ValueNoise::new(n, n, c, 0.0, 1.0, &mut rng);
    let tex_b = ValueNoise::new(n, n, c, 0.0, 1.0, &mut rng);
    let distractor_tex: Vec<ValueNoise> = spec
        .distractors
        .iter()
        .map(|d| if d.same_texture { tex_a.clone() } else { ValueNoise::new(n, n, c, 0.0, 1.0, &mut rng) })
        .collect();

    let mut base = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / spec.background_cell;
                let v = (y as f64 + 0.5) / spec.background_cell;
                base[(ch * h + y) * w + x] = background.sample(ch, u, v);
            }
        }
    }

    let last = (spec.frames.max(2) - 1) as f64;
    let mut frames = Vec::with_capacity(spec.frames);
    for (t, b) in boxes.iter().enumerate() {
        let progress = t as f64 / last;
        let mut img = base.clone();
        for (d, tex) in spec.distractors.iter().zip(&distractor_tex) {
            let db = BBox::new(d.x + d.velocity[0] * t as f64, d.y + d.velocity[1] * t as f64, b.w, b.h);
            paint(&mut img, (c, h, w), &db, tex, None);
        }
        let mix = spec.deformation * progress;
        paint(&mut img, (c, h, w), b, &tex_a, (mix > 0.0).then_some((&tex_b, mix)));
        for o in spec.occluders.iter().filter(|o| (o.start..o.end).contains(&t)) {
            let flat = ValueNoise { cols: 2, rows: 2, values: vec![o.value; 4 * c] };
            paint(&mut img, (c, h, w), &o.bbox, &flat, None);
        }
        let gain = 1.0 + (spec.illumination - 1.0) * progress;
        for v in &mut img {
            let mut x = *v * gain;
            if spec.pixel_noise > 0.0 {
                x += rng.random_range(-spec.pixel_noise..=spec.pixel_noise);
            }
            *v = libm::round(x.clamp(0.0, 1.0) * 255.0) / 255.0;
        }
        frames.push(Tensor::new(vec![c, h, w], img)?);
    }
    Sequence::new(spec.name.clone(), frames, boxes, spec.derived_attributes())
}
