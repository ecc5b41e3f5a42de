//! Objective, gradients through time, the optimizer loop, gradient checking
//! and checkpoint files.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckOptions, GradCheckReport, TensorCheck};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::ParamTree;
use crate::data::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::network::{record_rollout, Network, NetworkConfig, Parameters};
use crate::tensor::{Real, Tensor};

/// How each error population is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorNorm {
    /// `mean(E)`.
    #[default]
    Mean,
    /// `mean(E²)`.
    MeanSquare,
}

impl ErrorNorm {
    pub fn name(self) -> &'static str {
        match self {
            ErrorNorm::Mean => "mean",
            ErrorNorm::MeanSquare => "mean_square",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(ErrorNorm::Mean),
            "mean_square" => Some(ErrorNorm::MeanSquare),
            _ => None,
        }
    }
}

/// Optimizer and objective settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once an iteration's loss is at or below this value.
    pub threshold: Option<f64>,
    /// `λ_l`. Layers past the end of the list use the last entry.
    pub layer_weights: Vec<f64>,
    /// Weight of step `t`. Steps past the end of the list weigh 1.
    pub time_weights: Vec<f64>,
    pub error_norm: ErrorNorm,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Backward slope of the prediction ReLU where its input is negative.
    /// The forward pass is unchanged; 0 gives the exact gradient.
    pub prediction_slope: f64,
    /// Drives parameter initialisation and the sequence order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            max_iters: 100_000,
            threshold: None,
            layer_weights: vec![1.0, 0.1],
            time_weights: vec![0.0],
            error_norm: ErrorNorm::Mean,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            prediction_slope: 0.0,
            seed: 0,
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::config(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn layer_weight(&self, l: usize) -> f64 {
        self.layer_weights.get(l).or(self.layer_weights.last()).copied().unwrap_or(1.0)
    }

    pub fn time_weight(&self, t: usize) -> f64 {
        self.time_weights.get(t).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.layer_weights.is_empty() || !(self.layer_weights[0] > 0.0) {
            return Err(Error::config("layer weight 0 must be positive"));
        }
        let all = self.layer_weights.iter().chain(&self.time_weights);
        if all.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::config("moment decays must lie in [0, 1) and epsilon must be positive"));
        }
        if !(0.0..=1.0).contains(&self.prediction_slope) {
            return Err(Error::config(format!("prediction slope must lie in [0, 1], got {}", self.prediction_slope)));
        }
        if let Some(t) = self.threshold {
            if t.is_nan() {
                return Err(Error::config("threshold is NaN"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "lr={}\niters={}\nlayer_weights={}\ntime_weights={}\nerror_norm={}\nbeta1={}\nbeta2={}\nepsilon={}\nprediction_slope={}\nseed={}\n",
            self.learning_rate,
            self.max_iters,
            join(&self.layer_weights),
            join(&self.time_weights),
            self.error_norm.name(),
            self.beta1,
            self.beta2,
            self.epsilon,
            self.prediction_slope,
            self.seed
        );
        if let Some(t) = self.threshold {
            s.push_str(&format!("threshold={t}\n"));
        }
        s
    }

    /// Applies one `key=value` setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")));
        match key {
            "lr" => self.learning_rate = num(value)?,
            "iters" => {
                self.max_iters = value.trim().parse().map_err(|_| Error::config(format!("iters: cannot parse {value:?}")))?
            }
            "threshold" => self.threshold = Some(num(value)?),
            "layer_weights" => self.layer_weights = parse_list(key, value)?,
            "time_weights" => self.time_weights = parse_list(key, value)?,
            "error_norm" => {
                self.error_norm = ErrorNorm::parse(value.trim())
                    .ok_or_else(|| Error::config(format!("error_norm: expected mean or mean_square, got {value:?}")))?
            }
            "beta1" => self.beta1 = num(value)?,
            "beta2" => self.beta2 = num(value)?,
            "epsilon" => self.epsilon = num(value)?,
            "prediction_slope" => self.prediction_slope = num(value)?,
            "seed" => self.seed = value.trim().parse().map_err(|_| Error::config(format!("seed: cannot parse {value:?}")))?,
            _ => return Err(Error::config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }
}

/// Weighted loss `Σ_t w_t Σ_l λ_l ‖E_l(t)‖` from error tensors indexed
/// `[t][l]`, with the contribution of each layer alongside.
pub fn compute_loss<T: Real>(errors: &[Vec<Tensor<T>>], cfg: &TrainConfig) -> Result<(T, Vec<T>)> {
    if errors.len() < 2 {
        return Err(Error::invalid(format!("loss needs at least 2 timesteps, got {}", errors.len())));
    }
    let layers = errors[0].len();
    let mut per_layer = vec![T::zero(); layers];
    for (t, es) in errors.iter().enumerate() {
        let wt = cfg.time_weight(t);
        for (l, e) in es.iter().enumerate() {
            let w = wt * cfg.layer_weight(l);
            if w != 0.0 {
                let norm = match cfg.error_norm {
                    ErrorNorm::Mean => e.mean(),
                    ErrorNorm::MeanSquare => e.data().iter().map(|&v| v * v).sum::<T>() / T::of(e.len() as f64),
                };
                per_layer[l] += T::of(w) * norm;
            }
        }
    }
    Ok((per_layer.iter().copied().sum(), per_layer))
}

/// Records the loss on `tape`, returning the total and the per-layer terms.
pub fn loss_on<T: Real>(tape: &mut Tape<T>, errors: &[Vec<Var>], cfg: &TrainConfig) -> Result<(Var, Vec<Var>)> {
    if errors.len() < 2 {
        return Err(Error::invalid(format!("loss needs at least 2 timesteps, got {}", errors.len())));
    }
    let layers = errors[0].len();
    let mut per_layer: Vec<Option<Var>> = vec![None; layers];
    for (t, es) in errors.iter().enumerate() {
        let wt = cfg.time_weight(t);
        for (l, &e) in es.iter().enumerate() {
            let w = wt * cfg.layer_weight(l);
            if w == 0.0 {
                continue;
            }
            let m = match cfg.error_norm {
                ErrorNorm::Mean => tape.mean(e),
                ErrorNorm::MeanSquare => {
                    let sq = tape.mul(e, e)?;
                    tape.mean(sq)
                }
            };
            let term = tape.scale(m, T::of(w));
            per_layer[l] = Some(match per_layer[l] {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    let per_layer: Vec<Var> = per_layer.into_iter().map(|v| v.unwrap_or_else(|| tape.leaf(Tensor::scalar(T::zero())))).collect();
    let mut total = per_layer[0];
    for &v in &per_layer[1..] {
        total = tape.add(total, v)?;
    }
    Ok((total, per_layer))
}

/// Loss and full-sequence gradients for one sequence.
#[derive(Debug, Clone)]
pub struct LossGrad<T: Real> {
    pub loss: T,
    pub layer_losses: Vec<T>,
    pub grads: Parameters<Tensor<T>>,
}

/// Forward rollout from a zero state followed by backpropagation through
/// the whole sequence.
pub fn loss_and_grads<T: Real>(
    config: &NetworkConfig,
    params: &Parameters<Tensor<T>>,
    frames: &[Tensor<T>],
    actions: &[Tensor<T>],
    cfg: &TrainConfig,
) -> Result<LossGrad<T>> {
    let mut tape = Tape::with_prediction_slope(T::of(cfg.prediction_slope));
    let pv = params.map_ref(&mut |t| tape.leaf(t.clone()));
    let rec = record_rollout(&mut tape, config, &pv, frames, actions)?;
    let (loss, per_layer) = loss_on(&mut tape, &rec.errors, cfg)?;
    let layer_losses = per_layer.iter().map(|v| tape.value(*v).data()[0]).collect();
    let value = tape.value(loss).data()[0];
    let g = tape.backward(loss);
    let grads = pv.map_ref(&mut |v| g.get_or_zeros(&tape, *v));
    Ok(LossGrad { loss: value, layer_losses, grads })
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    /// First and second moments, one pair per parameter tensor in visiting order.
    moments: Vec<(Tensor<f32>, Tensor<f32>)>,
    steps: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(config: &NetworkConfig, cfg: &TrainConfig) -> Self {
        let zeros = Parameters::<Tensor<f32>>::zeros(config);
        Adam {
            moments: zeros.named().into_iter().map(|(_, t)| (t.clone(), t.clone())).collect(),
            steps: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut Parameters<Tensor<f32>>, grads: &Parameters<Tensor<f32>>) {
        self.steps += 1;
        let c2 = (1.0 - self.beta2.powi(self.steps)).sqrt();
        let step = (self.lr * c2 / (1.0 - self.beta1.powi(self.steps))) as f32;
        let eps_hat = (self.epsilon * c2) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let grads = grads.named();
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let (m, v) = &mut self.moments[i];
            let g = grads[i].1;
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= step * *mi / (vi.sqrt() + eps_hat);
            }
            i += 1;
        });
    }
}

/// Why [`Trainer::run`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Threshold,
    MaxIterations,
}

/// Final model and loss history of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of every iteration, in order.
    pub losses: Vec<f32>,
    pub stop: StopReason,
}

/// Stateful optimisation loop: one iteration is one full-sequence rollout
/// and one optimizer update. Sequences are visited in a freshly shuffled
/// order every epoch.
pub struct Trainer {
    network: Network<f32>,
    cfg: TrainConfig,
    adam: Adam,
    data: Vec<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    iteration: usize,
    losses: Vec<f32>,
}

impl Trainer {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(dataset: &Dataset, netcfg: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        let network = Network::init(netcfg, cfg.seed)?;
        Self::resume(dataset, network, cfg)
    }

    /// Continues from existing weights with a fresh optimizer state.
    pub fn resume(dataset: &Dataset, network: Network<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        network.config.validate()?;
        dataset.validate()?;
        check_dims(&network.config, dataset)?;
        if dataset.sequences.is_empty() {
            return Err(Error::invalid("dataset has no sequences"));
        }
        if let Some(s) = dataset.sequences.iter().find(|s| s.len() < 2) {
            return Err(Error::invalid(format!("training sequences need at least 2 steps, found {}", s.len())));
        }
        let data = dataset.sequences.iter().map(Sequence::tensors::<f32>).collect::<Result<_>>()?;
        let adam = Adam::new(&network.config, &cfg);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x006f_7264_6572);
        Ok(Trainer {
            network,
            adam,
            data,
            order: Vec::new(),
            cursor: 0,
            rng,
            iteration: 0,
            losses: Vec::new(),
            cfg,
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    /// Direct access to the weights being optimised; the optimizer state is kept.
    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.network
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn losses(&self) -> &[f32] {
        &self.losses
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One iteration. Returns its loss.
    pub fn step(&mut self) -> Result<f32> {
        let idx = self.next_index();
        self.iteration += 1;
        let (frames, actions) = &self.data[idx];
        let lg = loss_and_grads(&self.network.config, &self.network.params, frames, actions, &self.cfg)?;
        if !lg.loss.is_finite() {
            let layer = lg.layer_losses.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::NonFinite { iteration: self.iteration, layer });
        }
        self.adam.step(&mut self.network.params, &lg.grads);
        self.losses.push(lg.loss);
        Ok(lg.loss)
    }

    /// Iterates until the loss reaches the threshold or the iteration budget
    /// is spent. `progress` sees the 1-based iteration and its loss.
    pub fn run(&mut self, mut progress: impl FnMut(usize, f32)) -> Result<StopReason> {
        while self.iteration < self.cfg.max_iters {
            let loss = self.step()?;
            progress(self.iteration, loss);
            if let Some(t) = self.cfg.threshold {
                if (loss as f64) <= t {
                    return Ok(StopReason::Threshold);
                }
            }
        }
        Ok(StopReason::MaxIterations)
    }

    pub fn finish(self, stop: StopReason) -> TrainOutcome {
        TrainOutcome { checkpoint: self.network, losses: self.losses, stop }
    }
}

pub(crate) fn check_dims(config: &NetworkConfig, ds: &Dataset) -> Result<()> {
    let want = (config.height, config.width, config.channels, config.action_dim);
    let got = (ds.height, ds.width, ds.channels, ds.action_dim);
    if want != got {
        return Err(Error::config(format!(
            "model expects H×W×C, A = {}×{}×{}, {} but dataset has {}×{}×{}, {}",
            want.0, want.1, want.2, want.3, got.0, got.1, got.2, got.3
        )));
    }
    Ok(())
}

/// Trains a fresh network on `dataset`.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    netcfg: &NetworkConfig,
    progress: impl FnMut(usize, f32),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, netcfg.clone(), cfg.clone())?;
    let stop = trainer.run(progress)?;
    Ok(trainer.finish(stop))
}
