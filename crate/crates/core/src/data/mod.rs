//! Training data: synchronized (frame, action) sequences, the two built-in
//! generators, and the portable binary dataset format.

pub(crate) mod format;
pub mod minworld;
pub mod tracer;

pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use minworld::{gen_minworld, Direction};
pub use tracer::{render, sim_linetracer, simulate, TrackSpec, TracerConfig, TracerRun, TracerState};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Frames (each C×H×W, values in [0, 1]) paired with the action applied
/// between the previous frame and this one.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Tensor<f32>>,
    pub actions: Vec<Vec<f32>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames and actions as tensors of the requested precision.
    pub fn tensors<T: Real>(&self) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let frames = self.frames.iter().map(|f| f.cast()).collect();
        let actions = self
            .actions
            .iter()
            .map(|a| Tensor::new(&[a.len()], a.iter().map(|&v| T::of(v as f64)).collect()))
            .collect::<Result<_>>()?;
        Ok((frames, actions))
    }

    /// Copy with every action replaced by `action`.
    pub fn with_action(&self, action: &[f32]) -> Sequence {
        Sequence { frames: self.frames.clone(), actions: vec![action.to_vec(); self.frames.len()] }
    }

    /// The first `len` steps.
    pub fn prefix(&self, len: usize) -> Sequence {
        Sequence { frames: self.frames[..len].to_vec(), actions: self.actions[..len].to_vec() }
    }
}

/// Global dimensions plus a list of conforming sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub action_dim: usize,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, channels: usize, action_dim: usize, sequences: Vec<Sequence>) -> Result<Self> {
        let ds = Dataset { height, width, channels, action_dim, sequences };
        ds.validate()?;
        Ok(ds)
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn total_steps(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.action_dim == 0 {
            return Err(Error::invalid("dataset dimensions must be positive"));
        }
        let shape = self.frame_shape();
        for (i, s) in self.sequences.iter().enumerate() {
            if s.frames.is_empty() {
                return Err(Error::invalid(format!("sequence {i} is empty")));
            }
            if s.frames.len() != s.actions.len() {
                return Err(Error::invalid(format!(
                    "sequence {i}: {} frames but {} actions",
                    s.frames.len(),
                    s.actions.len()
                )));
            }
            for f in &s.frames {
                if f.shape() != shape {
                    return Err(Error::invalid(format!("sequence {i}: frame shape {:?}, expected {shape:?}", f.shape())));
                }
                if !f.is_finite() {
                    return Err(Error::invalid(format!("sequence {i}: non-finite frame value")));
                }
            }
            for a in &s.actions {
                if a.len() != self.action_dim {
                    return Err(Error::invalid(format!(
                        "sequence {i}: action of length {}, expected {}",
                        a.len(),
                        self.action_dim
                    )));
                }
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("sequence {i}: non-finite action value")));
                }
            }
        }
        Ok(())
    }
}
