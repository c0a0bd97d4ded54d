//! Resampling of `[C, H, W]` image tensors with edge replication.

use alloc::format;
use alloc::vec;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples `region` of `frame` onto an `out_h x out_w` grid with bilinear
/// interpolation. Pixel centers sit at half-integer coordinates; samples that
/// fall outside the frame take the nearest edge value.
pub fn crop_resize(frame: &Tensor, region: &BBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = frame.chw("crop_resize")?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Geometry("crop_resize: empty frame or output".into()));
    }
    if region.is_degenerate() {
        return Err(Error::Geometry(format!("crop_resize: degenerate region {:?}", region)));
    }
    let sy = region.h / out_h as f64;
    let sx = region.w / out_w as f64;
    let src = frame.data();
    let plane = h * w;

    // Precompute the two source taps and weight along each axis.
    let taps = |n_out: usize, origin: f64, step: f64, limit: usize| {
        let mut v = vec![(0usize, 0usize, 0.0f64); n_out];
        let max = (limit - 1) as f64;
        for (i, t) in v.iter_mut().enumerate() {
            let pos = (origin + (i as f64 + 0.5) * step - 0.5).clamp(0.0, max);
            let lo = libm::floor(pos);
            let frac = pos - lo;
            let lo = lo as usize;
            let hi = (lo + 1).min(limit - 1);
            *t = (lo, hi, frac);
        }
        v
    };
    let ys = taps(out_h, region.y, sy, h);
    let xs = taps(out_w, region.x, sx, w);

    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src_plane = &src[ch * plane..(ch + 1) * plane];
        let dst_plane = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &src_plane[y0 * w..(y0 + 1) * w];
            let r1 = &src_plane[y1 * w..(y1 + 1) * w];
            let dst = &mut dst_plane[oy * out_w..(oy + 1) * out_w];
            for (d, &(x0, x1, fx)) in dst.iter_mut().zip(&xs) {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                *d = top + (bottom - top) * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn resize(frame: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = frame.chw("resize")?;
    crop_resize(frame, &BBox::new(0.0, 0.0, w as f64, h as f64), out_h, out_w)
}

/// Converts between grayscale and RGB layouts; other channel counts must match.
pub fn with_channels(frame: &Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = frame.chw("with_channels")?;
    if c == channels {
        return Ok(frame.clone());
    }
    let plane = h * w;
    let d = frame.data();
    match (c, channels) {
        (1, 3) => {
            let mut out = vec![0.0; 3 * plane];
            for ch in 0..3 {
                out[ch * plane..(ch + 1) * plane].copy_from_slice(d);
            }
            Tensor::new(vec![3, h, w], out)
        }
        (3, 1) => {
            let out = (0..plane)
                .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
                .collect();
            Tensor::new(vec![1, h, w], out)
        }
        _ => Err(Error::Argument(format!("cannot convert {} channels to {}", c, channels))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| i as f64)
    }

    #[test]
    fn full_frame_at_native_size_is_identity() {
        let f = ramp(2, 5, 7);
        let out = crop_resize(&f, &BBox::new(0.0, 0.0, 7.0, 5.0), 5, 7).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn integer_aligned_crop_copies_pixels() {
        let f = ramp(1, 6, 6);
        let out = crop_resize(&f, &BBox::new(2.0, 1.0, 3.0, 2.0), 2, 3).unwrap();
        assert_eq!(out, f.spatial_crop(1, 2, 2, 3).unwrap());
    }

    #[test]
    fn outside_samples_replicate_edges() {
        let f = ramp(1, 4, 4);
        let out = crop_resize(&f, &BBox::new(-4.0, -4.0, 4.0, 4.0), 4, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let out = crop_resize(&f, &BBox::new(10.0, 0.0, 2.0, 1.0), 1, 2).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0]);
    }

    #[test]
    fn constant_frames_stay_constant() {
        let f = Tensor::filled(&[3, 9, 13], 0.25);
        let out = crop_resize(&f, &BBox::new(-3.3, 2.7, 20.1, 4.4), 11, 8).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gray_rgb_round_trip() {
        let g = ramp(1, 3, 3);
        let rgb = with_channels(&g, 3).unwrap();
        let back = with_channels(&rgb, 1).unwrap();
        let diff: Vec<f64> = back.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).collect();
        assert!(diff.iter().all(|d| *d < 1e-12));
    }

    #[test]
    fn degenerate_region_is_an_error() {
        assert!(crop_resize(&ramp(1, 4, 4), &BBox::new(0.0, 0.0, 0.0, 2.0), 2, 2).is_err());
    }
}
