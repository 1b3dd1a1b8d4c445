//! Frame sequences: the unit the editing pipeline consumes and produces.

use crate::error::{ensure, Error, Result};
use crate::numkit::Tensor;

/// Ordered RGB frames, each `[H, W, 3]` with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Tensor>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        ensure!(!frames.is_empty(), Contract, "empty frame sequence");
        let shape = frames[0].shape().to_vec();
        ensure!(
            shape.len() == 3 && shape[2] == 3,
            Dimension,
            "frames must be [H, W, 3], got {shape:?}"
        );
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "frame {i} has shape {:?}, frame 0 has {shape:?}",
                    f.shape()
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn frame(&self, i: usize) -> &Tensor {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Tensor> {
        self.frames
    }

    /// Sub-sequence `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        ensure!(start < end && end <= self.len(), Range, "slice {start}..{end} of {} frames", self.len());
        Self::new(self.frames[start..end].to_vec())
    }

    /// Fails unless every value lies in `[0, 1]`.
    pub fn ensure_unit_range(&self, what: &str) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            if let Some(v) = f.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Range(format!("{what}: frame {i} has value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn clamped(&self) -> Self {
        Self {
            frames: self.frames.iter().map(|f| f.map(|v| v.clamp(0.0, 1.0))).collect(),
        }
    }
}
