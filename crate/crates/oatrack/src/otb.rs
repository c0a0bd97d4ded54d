//! OTB-style sequence directories:
//!
//! ```text
//! <name>/img/0001.png ...         frames, sorted by file name
//! <name>/groundtruth_rect.txt     one "x,y,w,h" per frame, 1-indexed origin
//! <name>/attributes.txt           optional tags, comma or whitespace separated
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use oatrack_core::{BBox, FrameSource, Sequence, Tensor};

use crate::error::{io_err, Error, Result};

pub const IMAGE_DIR: &str = "img";
pub const GROUND_TRUTH: &str = "groundtruth_rect.txt";
pub const ATTRIBUTES: &str = "attributes.txt";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Parses ground-truth text. Fields may be separated by commas, tabs or
/// spaces; blank lines are skipped. Boxes come back 0-indexed.
pub fn parse_ground_truth(text: &str) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        if fields.len() != 4 {
            return Err(Error::Ingest(format!("line {}: expected 4 fields, found {}: {:?}", i + 1, fields.len(), line)));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Ingest(format!("line {}: {:?} is not a number", i + 1, f)))?;
        }
        if v[2] < 0.0 || v[3] < 0.0 {
            return Err(Error::Ingest(format!("line {}: negative width or height", i + 1)));
        }
        boxes.push(BBox::new(v[0] - 1.0, v[1] - 1.0, v[2], v[3]));
    }
    Ok(boxes)
}

/// Inverse of [`parse_ground_truth`]; values print in shortest round-trip form.
pub fn format_ground_truth(boxes: &[BBox]) -> String {
    boxes.iter().map(|b| format!("{},{},{},{}\n", b.x + 1.0, b.y + 1.0, b.w, b.h)).collect()
}

pub fn parse_attributes(text: &str) -> Vec<String> {
    let mut tags: Vec<String> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect();
    tags.sort();
    tags.dedup();
    tags
}

/// Decodes an image file to `[C, H, W]` in `[0, 1]`: grayscale files give one
/// channel, everything else three.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    Ok(image_to_tensor(&img))
}

pub fn image_to_tensor(img: &DynamicImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(img, DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_));
    if gray {
        let g = img.to_luma8();
        let data = g.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new(vec![1, h, w], data).expect("shape")
    } else {
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        let mut data = vec![0.0; 3 * h * w];
        for (p, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + p] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![3, h, w], data).expect("shape")
    }
}

/// Encodes a `[1|3, H, W]` tensor in `[0, 1]` as 8-bit pixels.
pub fn tensor_to_image(t: &Tensor) -> Result<DynamicImage> {
    let (c, h, w) = t.chw("tensor_to_image")?;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let d = t.data();
    match c {
        1 => Ok(DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| q(v)).collect()).expect("size"),
        )),
        3 => {
            let mut raw = Vec::with_capacity(3 * h * w);
            for p in 0..h * w {
                for ch in 0..3 {
                    raw.push(q(d[ch * h * w + p]));
                }
            }
            Ok(DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("size")))
        }
        _ => Err(Error::Ingest(format!("cannot encode a {}-channel image", c))),
    }
}

pub fn write_frame(path: &Path, t: &Tensor) -> Result<()> {
    tensor_to_image(t)?
        .save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
}

/// A sequence on disk whose frames are decoded on demand.
#[derive(Debug, Clone)]
pub struct OtbSequence {
    pub name: String,
    pub dir: PathBuf,
    pub frame_paths: Vec<PathBuf>,
    pub ground_truth: Vec<BBox>,
    pub attributes: Vec<String>,
}

pub fn load_sequence(dir: &Path) -> Result<OtbSequence> {
    let gt_path = dir.join(GROUND_TRUTH);
    if !gt_path.is_file() {
        return Err(Error::Ingest(format!("missing ground truth {}", gt_path.display())));
    }
    let text = fs::read_to_string(&gt_path).map_err(io_err(&gt_path))?;
    let ground_truth = parse_ground_truth(&text).map_err(|e| Error::Ingest(format!("{}: {}", gt_path.display(), e)))?;
    let img_dir = dir.join(IMAGE_DIR);
    let mut frame_paths: Vec<PathBuf> = fs::read_dir(&img_dir)
        .map_err(io_err(&img_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    frame_paths.sort();
    if frame_paths.len() != ground_truth.len() {
        return Err(Error::Ingest(format!(
            "{}: {} frames but {} ground-truth lines",
            dir.display(),
            frame_paths.len(),
            ground_truth.len()
        )));
    }
    match ground_truth.first() {
        None => return Err(Error::Ingest(format!("{}: empty sequence", dir.display()))),
        Some(b) if b.is_degenerate() => {
            return Err(Error::Ingest(format!("{}: first box {:?} is degenerate", dir.display(), b)))
        }
        Some(_) => {}
    }
    let attr_path = dir.join(ATTRIBUTES);
    let attributes = if attr_path.is_file() {
        parse_attributes(&fs::read_to_string(&attr_path).map_err(io_err(&attr_path))?)
    } else {
        Vec::new()
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Ok(OtbSequence { name, dir: dir.to_path_buf(), frame_paths, ground_truth, attributes })
}

/// Reads every frame into memory.
pub fn load_in_memory(seq: &OtbSequence) -> Result<Sequence> {
    let frames = seq.frame_paths.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>>>()?;
    Ok(Sequence::new(seq.name.clone(), frames, seq.ground_truth.clone(), seq.attributes.clone())?)
}

/// Writes `seq` as an OTB directory at `dir` (created if needed).
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    for (i, f) in seq.frames.iter().enumerate() {
        write_frame(&img_dir.join(format!("{:04}.png", i + 1)), f)?;
    }
    let gt = dir.join(GROUND_TRUTH);
    fs::write(&gt, format_ground_truth(&seq.ground_truth)).map_err(io_err(&gt))?;
    if !seq.attributes.is_empty() {
        let a = dir.join(ATTRIBUTES);
        fs::write(&a, seq.attributes.join(",") + "\n").map_err(io_err(&a))?;
    }
    Ok(())
}

impl FrameSource for OtbSequence {
    fn name(&self) -> &str {
        &self.name
    }

    fn frame_count(&self) -> usize {
        self.frame_paths.len()
    }

    fn frame(&self, index: usize) -> oatrack_core::Result<Tensor> {
        let p = self
            .frame_paths
            .get(index)
            .ok_or_else(|| oatrack_core::Error::Source(format!("{}: no frame {}", self.name, index)))?;
        read_frame(p).map_err(|e| oatrack_core::Error::Source(e.to_string()))
    }

    fn ground_truth(&self) -> &[BBox] {
        &self.ground_truth
    }

    fn attributes(&self) -> &[String] {
        &self.attributes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_indexed_origin_is_shifted() {
        assert_eq!(parse_ground_truth("10,20,30,40\n").unwrap(), vec![BBox::new(9.0, 19.0, 30.0, 40.0)]);
    }

    #[test]
    fn tab_and_comma_forms_agree() {
        let a = parse_ground_truth("1,2,3,4\n5,6,7,8\n").unwrap();
        let b = parse_ground_truth("1\t2\t3\t4\n5 6  7\t8\n\n").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_lines_are_reported_by_number() {
        let e = parse_ground_truth("1,2,3,4\n1,2,3\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{}", e);
        let e = parse_ground_truth("1,2,3,4\n\n1,x,3,4\n").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{}", e);
    }

    #[test]
    fn format_round_trips_quarter_pixel_boxes() {
        let boxes = vec![BBox::new(0.25, 10.5, 33.125, 7.0), BBox::new(-0.5, 0.0, 1.0, 1.0 / 256.0)];
        assert_eq!(parse_ground_truth(&format_ground_truth(&boxes)).unwrap(), boxes);
    }

    #[test]
    fn attributes_split_on_commas_and_space() {
        assert_eq!(parse_attributes("OCC, SV\nIV,OCC"), vec!["IV", "OCC", "SV"]);
    }

    #[test]
    fn eight_bit_tensors_survive_png() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| (i * 7 % 256) as f64 / 255.0);
        let back = image_to_tensor(&tensor_to_image(&t).unwrap());
        assert_eq!(back, t);
        let g = Tensor::from_fn(&[1, 2, 3], |i| i as f64 / 255.0);
        assert_eq!(image_to_tensor(&tensor_to_image(&g).unwrap()), g);
    }
}
