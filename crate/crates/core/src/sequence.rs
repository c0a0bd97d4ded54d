//! Annotated frame sequences.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random access to the frames and annotations of one sequence.
pub trait FrameSource {
    fn name(&self) -> &str;
    fn frame_count(&self) -> usize;
    /// Frame `index` as `[C, H, W]` with values in `[0, 1]`.
    fn frame(&self, index: usize) -> Result<Tensor>;
    /// One box per frame.
    fn ground_truth(&self) -> &[BBox];
    fn attributes(&self) -> &[String];
}

/// A fully in-memory sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub ground_truth: Vec<BBox>,
    pub attributes: Vec<String>,
}

impl Sequence {
    pub fn new(name: String, frames: Vec<Tensor>, ground_truth: Vec<BBox>, attributes: Vec<String>) -> Result<Self> {
        if frames.len() != ground_truth.len() {
            return Err(Error::Source(format!(
                "{}: {} frames but {} ground-truth boxes",
                name,
                frames.len(),
                ground_truth.len()
            )));
        }
        match ground_truth.first() {
            Some(b) if !b.is_degenerate() => {}
            Some(b) => return Err(Error::Annotation(format!("{}: first box {:?} is degenerate", name, b))),
            None => return Err(Error::Source(format!("{}: empty sequence", name))),
        }
        Ok(Self { name, frames, ground_truth, attributes })
    }
}

impl FrameSource for Sequence {
    fn name(&self) -> &str {
        &self.name
    }

    fn frame_count(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<Tensor> {
        self.frames
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Source(format!("{}: no frame {}", self.name, index)))
    }

    fn ground_truth(&self) -> &[BBox] {
        &self.ground_truth
    }

    fn attributes(&self) -> &[String] {
        &self.attributes
    }
}
