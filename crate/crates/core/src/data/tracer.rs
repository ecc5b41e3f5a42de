//! Differential-drive line-following robot with a downward-looking camera.
//!
//! The track is a rounded rectangle: every point at distance `corner_radius`
//! from a solid inner rectangle of half extents `half_length`×`half_width`.
//! The robot drives it counter-clockwise. A proportional controller on the
//! lateral offset of a look-ahead point sets the turn rate; optional seeded
//! Gaussian jitter perturbs it. Each step renders the ground window in front
//! of the robot at 4×4 supersampling.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WHEEL_RADIUS: f64 = 0.03;
pub const AXLE_WIDTH: f64 = 0.1;
pub const TIMESTEP: f64 = 0.02;

/// Rounded-rectangle circuit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSpec {
    pub half_length: f64,
    pub half_width: f64,
    pub corner_radius: f64,
    pub line_width: f64,
}

impl Default for TrackSpec {
    fn default() -> Self {
        TrackSpec { half_length: 0.5, half_width: 0.25, corner_radius: 0.125, line_width: 0.02 }
    }
}

impl TrackSpec {
    pub fn length(&self) -> f64 {
        4.0 * self.half_length + 4.0 * self.half_width + 2.0 * PI * self.corner_radius
    }

    fn validate(&self) -> Result<()> {
        let vals = [self.half_length, self.half_width, self.corner_radius, self.line_width];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("track dimensions must be finite and non-negative"));
        }
        if self.length() <= 0.0 {
            return Err(Error::invalid("degenerate track: zero length"));
        }
        if self.line_width <= 0.0 {
            return Err(Error::invalid("line width must be positive"));
        }
        Ok(())
    }

    /// Signed distance from the centre line: positive outside the circuit.
    pub fn offset(&self, x: f64, y: f64) -> f64 {
        let dx = (x.abs() - self.half_length).max(0.0);
        let dy = (y.abs() - self.half_width).max(0.0);
        (dx * dx + dy * dy).sqrt() - self.corner_radius
    }

    pub fn on_line(&self, x: f64, y: f64) -> bool {
        self.offset(x, y).abs() <= self.line_width / 2.0
    }

    /// Start pose: middle of the lower straight, heading along +x.
    pub fn start(&self) -> (f64, f64, f64) {
        (0.0, -(self.half_width + self.corner_radius), 0.0)
    }
}

/// Pose and wheel speeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracerState {
    pub x: f64,
    pub y: f64,
    /// Heading, wrapped to (−π, π].
    pub theta: f64,
    pub omega_left: f64,
    pub omega_right: f64,
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl TracerState {
    pub fn at(x: f64, y: f64, theta: f64) -> Self {
        TracerState { x, y, theta: wrap_angle(theta), omega_left: 0.0, omega_right: 0.0 }
    }

    /// Forward speed `r(ω_l + ω_r)/2`.
    pub fn linear_velocity(&self) -> f64 {
        WHEEL_RADIUS * (self.omega_left + self.omega_right) / 2.0
    }

    /// Turn rate `r(ω_r − ω_l)/axle`.
    pub fn angular_velocity(&self) -> f64 {
        WHEEL_RADIUS * (self.omega_right - self.omega_left) / AXLE_WIDTH
    }

    /// Integrates one fixed timestep using the midpoint heading.
    pub fn advance(&mut self) {
        let v = self.linear_velocity();
        let w = self.angular_velocity();
        let mid = self.theta + w * TIMESTEP / 2.0;
        self.x += v * mid.cos() * TIMESTEP;
        self.y += v * mid.sin() * TIMESTEP;
        self.theta = wrap_angle(self.theta + w * TIMESTEP);
    }

    /// Sets wheel speeds from a forward speed and turn rate.
    pub fn command(&mut self, v: f64, w: f64) {
        self.omega_right = (v + w * AXLE_WIDTH / 2.0) / WHEEL_RADIUS;
        self.omega_left = (v - w * AXLE_WIDTH / 2.0) / WHEEL_RADIUS;
    }
}

/// Simulation and camera settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TracerConfig {
    pub track: TrackSpec,
    pub steps: usize,
    pub seed: u64,
    /// Forward speed, m/s.
    pub speed: f64,
    /// Turn rate per metre of look-ahead offset, rad/s/m.
    pub gain: f64,
    /// Distance of the look-ahead point in front of the axle, m.
    pub lookahead: f64,
    /// Standard deviation of the turn-rate jitter, rad/s. Zero disables it.
    pub noise: f64,
    pub rows: usize,
    pub cols: usize,
    /// Ground size of one pixel, m.
    pub pixel: f64,
    /// Distance from the axle to the near edge of the camera window, m.
    pub near: f64,
    /// Steps per emitted sequence.
    pub sequence_len: usize,
}

impl Default for TracerConfig {
    fn default() -> Self {
        TracerConfig {
            track: TrackSpec::default(),
            steps: 5000,
            seed: 0,
            speed: 0.25,
            gain: 200.0,
            lookahead: 0.04,
            noise: 4.0,
            rows: 8,
            cols: 12,
            pixel: 0.006,
            near: 0.03,
            sequence_len: 20,
        }
    }
}

/// Renders the camera window for `state`: row 0 is farthest ahead, column 0
/// leftmost. Each pixel holds the fraction of its 4×4 subsamples on the line.
pub fn render(cfg: &TracerConfig, state: &TracerState) -> Tensor<f32> {
    const SUB: usize = 4;
    let (s, c) = state.theta.sin_cos();
    let half = cfg.cols as f64 / 2.0;
    let mut frame = Tensor::zeros(&[1, cfg.rows, cfg.cols]);
    for row in 0..cfg.rows {
        for col in 0..cfg.cols {
            let mut hits = 0;
            for si in 0..SUB {
                for sj in 0..SUB {
                    let fwd = cfg.near + ((cfg.rows - 1 - row) as f64 + (si as f64 + 0.5) / SUB as f64) * cfg.pixel;
                    let lat = (half - col as f64 - (sj as f64 + 0.5) / SUB as f64) * cfg.pixel;
                    let x = state.x + fwd * c - lat * s;
                    let y = state.y + fwd * s + lat * c;
                    if cfg.track.on_line(x, y) {
                        hits += 1;
                    }
                }
            }
            frame.data_mut()[row * cfg.cols + col] = hits as f32 / (SUB * SUB) as f32;
        }
    }
    frame
}

/// Raw simulation output: states after each step and the rendered frames.
#[derive(Debug, Clone)]
pub struct TracerRun {
    pub states: Vec<TracerState>,
    pub frames: Vec<Tensor<f32>>,
}

pub fn simulate(cfg: &TracerConfig) -> Result<TracerRun> {
    cfg.track.validate()?;
    if cfg.steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if cfg.rows == 0 || cfg.cols == 0 || cfg.pixel <= 0.0 || cfg.sequence_len == 0 {
        return Err(Error::invalid("camera window and sequence length must be positive"));
    }
    let noise = if cfg.noise > 0.0 {
        Some(Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (x, y, theta) = cfg.track.start();
    let mut state = TracerState::at(x, y, theta);
    let mut run = TracerRun { states: Vec::with_capacity(cfg.steps), frames: Vec::with_capacity(cfg.steps) };
    for _ in 0..cfg.steps {
        let (s, c) = state.theta.sin_cos();
        let offset = cfg.track.offset(state.x + cfg.lookahead * c, state.y + cfg.lookahead * s);
        let mut turn = cfg.gain * offset;
        if let Some(n) = &noise {
            turn += n.sample(&mut rng);
        }
        state.command(cfg.speed, turn);
        state.advance();
        run.frames.push(render(cfg, &state));
        run.states.push(state);
    }
    Ok(run)
}

/// Simulates a run and cuts it into sequences. Actions are the wheel speeds
/// `(ω_l, ω_r)` that produced each frame, min-max scaled to [0, 1] with one
/// range shared by both wheels over the whole run.
pub fn sim_linetracer(cfg: &TracerConfig) -> Result<Dataset> {
    let run = simulate(cfg)?;
    let (lo, hi) = run
        .states
        .iter()
        .flat_map(|s| [s.omega_left, s.omega_right])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let norm = |v: f64| if hi > lo { ((v - lo) / (hi - lo)) as f32 } else { 0.5 };
    let actions: Vec<Vec<f32>> = run.states.iter().map(|s| vec![norm(s.omega_left), norm(s.omega_right)]).collect();
    let sequences = run
        .frames
        .chunks(cfg.sequence_len)
        .zip(actions.chunks(cfg.sequence_len))
        .map(|(f, a)| Sequence { frames: f.to_vec(), actions: a.to_vec() })
        .collect();
    Dataset::new(cfg.rows, cfg.cols, 1, 2, sequences)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_rotation_keeps_position() {
        let mut s = TracerState::at(0.3, -0.2, 0.1);
        s.omega_right = 2.0;
        s.omega_left = -2.0;
        let before = s;
        s.advance();
        assert_eq!((s.x, s.y), (before.x, before.y));
        let expect = WHEEL_RADIUS * 2.0 * TIMESTEP * 2.0 / AXLE_WIDTH;
        assert!((s.theta - before.theta - expect).abs() < 1e-15);
    }

    #[test]
    fn straight_motion_advances_v_dt() {
        let mut s = TracerState::at(0.0, 0.0, 0.7);
        s.omega_left = 5.0;
        s.omega_right = 5.0;
        let v = s.linear_velocity();
        for _ in 0..100 {
            let (x0, y0) = (s.x, s.y);
            s.advance();
            let d = ((s.x - x0).powi(2) + (s.y - y0).powi(2)).sqrt();
            assert!((d - v * TIMESTEP).abs() <= 1e-12 * v * TIMESTEP);
        }
        assert_eq!(s.theta, 0.7);
    }

    #[test]
    fn zero_velocity_holds_position() {
        let mut s = TracerState::at(1.0, 2.0, -3.0);
        for _ in 0..10 {
            s.advance();
        }
        assert_eq!((s.x, s.y, s.theta), (1.0, 2.0, wrap_angle(-3.0)));
    }

    #[test]
    fn centred_on_straight_is_symmetric() {
        let cfg = TracerConfig { noise: 0.0, ..TracerConfig::default() };
        let (x, y, th) = cfg.track.start();
        let mut s = TracerState::at(x, y, th);
        let offset = cfg.track.offset(x + cfg.lookahead, y);
        assert!(offset.abs() < 1e-12);
        s.command(cfg.speed, cfg.gain * offset);
        assert_eq!(s.omega_left, s.omega_right);
        let f = render(&cfg, &s);
        let (rows, cols) = (cfg.rows, cfg.cols);
        for r in 0..rows {
            for c in 0..cols {
                assert_eq!(f.data()[r * cols + c], f.data()[r * cols + cols - 1 - c]);
            }
        }
        assert!(f.sum() > 0.0);
    }

    #[test]
    fn dataset_shape_and_range() {
        let cfg = TracerConfig { steps: 300, ..TracerConfig::default() };
        let ds = sim_linetracer(&cfg).unwrap();
        assert_eq!(ds.total_steps(), 300);
        assert_eq!(ds.frame_shape(), [1, 8, 12]);
        for s in &ds.sequences {
            for f in &s.frames {
                assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            for a in &s.actions {
                assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn robot_stays_on_track() {
        let cfg = TracerConfig { steps: 3000, ..TracerConfig::default() };
        let run = simulate(&cfg).unwrap();
        let worst = run.states.iter().map(|s| cfg.track.offset(s.x, s.y).abs()).fold(0.0, f64::max);
        assert!(worst < 0.02, "max offset {worst}");
        // a full lap was driven
        let travelled = cfg.speed * TIMESTEP * cfg.steps as f64;
        assert!(travelled > cfg.track.length());
        // the line is visible in almost every frame
        let seen = run.frames.iter().filter(|f| f.sum() > 0.0).count();
        assert!(seen as f64 > 0.95 * run.frames.len() as f64);
    }

    #[test]
    fn degenerate_track_rejected() {
        let cfg = TracerConfig {
            track: TrackSpec { half_length: 0.0, half_width: 0.0, corner_radius: 0.0, line_width: 0.02 },
            ..TracerConfig::default()
        };
        assert!(matches!(sim_linetracer(&cfg), Err(Error::InvalidArgument(_))));
        assert!(sim_linetracer(&TracerConfig { steps: 0, ..TracerConfig::default() }).is_err());
    }

    #[test]
    fn seeded_runs_repeat() {
        let cfg = TracerConfig { steps: 200, seed: 9, ..TracerConfig::default() };
        assert_eq!(sim_linetracer(&cfg).unwrap(), sim_linetracer(&cfg).unwrap());
        let other = TracerConfig { seed: 10, ..cfg.clone() };
        assert_ne!(sim_linetracer(&cfg).unwrap(), sim_linetracer(&other).unwrap());
    }
}
