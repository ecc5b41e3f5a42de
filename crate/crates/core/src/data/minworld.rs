//! A single bright pixel moving one cell per step on a toroidal grid, its
//! direction set by a two-neuron action vector.

use super::{Dataset, Sequence};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Right,
    Down,
}

impl Direction {
    pub fn action(self) -> [f32; 2] {
        match self {
            Direction::Right => [1.0, 0.0],
            Direction::Down => [0.0, 1.0],
        }
    }

    /// (row, column) step.
    pub fn delta(self) -> (usize, usize) {
        match self {
            Direction::Right => (0, 1),
            Direction::Down => (1, 0),
        }
    }

    /// Cell reached from (row, col) by one step on an `h`×`w` torus.
    pub fn advance(self, (row, col): (usize, usize), h: usize, w: usize) -> (usize, usize) {
        let (dr, dc) = self.delta();
        ((row + dr) % h, (col + dc) % w)
    }
}

pub fn frame_with_pixel(h: usize, w: usize, (row, col): (usize, usize)) -> Tensor<f32> {
    let mut f = Tensor::zeros(&[1, h, w]);
    f.data_mut()[row * w + col] = 1.0;
    f
}

/// One sequence per (direction, starting cell), directions outermost, then
/// rows, then columns. Deterministic.
///
/// # Panics
/// If `h` or `w` is zero or `steps` is zero.
pub fn gen_minworld(h: usize, w: usize, steps: usize, directions: &[Direction]) -> Dataset {
    assert!(h > 0 && w > 0 && steps > 0, "minworld dimensions must be positive");
    let mut sequences = Vec::with_capacity(directions.len() * h * w);
    for &dir in directions {
        for row in 0..h {
            for col in 0..w {
                let mut pos = (row, col);
                let mut frames = Vec::with_capacity(steps);
                for _ in 0..steps {
                    frames.push(frame_with_pixel(h, w, pos));
                    pos = dir.advance(pos, h, w);
                }
                sequences.push(Sequence { frames, actions: vec![dir.action().to_vec(); steps] });
            }
        }
    }
    Dataset { height: h, width: w, channels: 1, action_dim: 2, sequences }
}
