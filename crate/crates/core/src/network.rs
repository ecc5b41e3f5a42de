//! Stacked layers of generative units, motor modulation, discriminative
//! convolutions and rectified error populations.
//!
//! One timestep runs two sweeps. The top-down sweep visits layers from the
//! top down: each unit of layer `l` reads the layer's previous error
//! `E_l(t-1)` (channel-concatenated with the upsampled `R_{l+1}(t)` below the
//! top), recurs on the combined representation `R_l(t-1)`, and the action MLP
//! mixes the bank: `R_l(t) = Σ_d w_d(a) · h_l^d(t)`. The bottom-up sweep then
//! predicts `X̂_l = relu(conv(R_l))`, forms
//! `E_l = [relu(X_l − X̂_l); relu(X̂_l − X_l)]`, and derives the next target
//! `X_{l+1} = maxpool(relu(conv(E_l)))`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::{self, ConvLstmParams, ConvLstmState, ConvParams, LstmVars, MlpParams, ParamTree};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{Padding, PaddingMode, Real, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub layers: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub action_dim: usize,
    /// Generative units per layer.
    pub gu_units: Vec<usize>,
    /// Channels of each layer's representation `R_l` (and of every unit's state).
    pub r_channels: Vec<usize>,
    /// Channels of each layer's target `X_l`; entry 0 equals `channels`.
    pub target_channels: Vec<usize>,
    pub mlp_hidden: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl NetworkConfig {
    /// Defaults: two units per layer, `R` channels 8, 16, 32, …, target
    /// channels `channels`, 8, 16, …, MLP hidden size 4, 3×3 kernels with
    /// zero padding 1.
    pub fn new(layers: usize, height: usize, width: usize, channels: usize, action_dim: usize) -> Self {
        NetworkConfig {
            layers,
            height,
            width,
            channels,
            action_dim,
            gu_units: vec![2; layers],
            r_channels: (0..layers).map(|l| 8 << l).collect(),
            target_channels: (0..layers).map(|l| if l == 0 { channels } else { 8 << (l - 1) }).collect(),
            mlp_hidden: 4,
            kernel: 3,
            padding: Padding::zeros(1),
        }
    }

    pub fn with_units(mut self, units: usize) -> Self {
        self.gu_units = vec![units; self.layers];
        self
    }

    pub fn with_padding_mode(mut self, mode: PaddingMode) -> Self {
        self.padding.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad(format!("image dims must be positive, got {}×{}×{}", self.channels, self.height, self.width));
        }
        if self.action_dim == 0 || self.mlp_hidden == 0 {
            return bad("action_dim and mlp_hidden must be positive".into());
        }
        for (name, v) in [("gu_units", &self.gu_units), ("r_channels", &self.r_channels), ("target_channels", &self.target_channels)] {
            if v.len() != self.layers {
                return bad(format!("{name} has {} entries for {} layers", v.len(), self.layers));
            }
            if v.contains(&0) {
                return bad(format!("{name} entries must be positive"));
            }
        }
        if self.target_channels[0] != self.channels {
            return bad("target_channels[0] must equal the image channel count".into());
        }
        if self.kernel.is_multiple_of(2) || self.kernel != 2 * self.padding.width + 1 {
            return bad(format!(
                "kernel {} with padding {} does not preserve spatial extents",
                self.kernel, self.padding.width
            ));
        }
        Ok(())
    }

    /// Spatial extents of every layer: each layer halves (rounding up) the one below.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.height, self.width)];
        for _ in 1..self.layers {
            let (h, w) = *dims.last().unwrap();
            dims.push((h.div_ceil(2), w.div_ceil(2)));
        }
        dims
    }

    /// Channels of `E_l`.
    pub fn error_channels(&self, l: usize) -> usize {
        2 * self.target_channels[l]
    }

    /// Channels fed to every unit of layer `l`.
    pub fn unit_input_channels(&self, l: usize) -> usize {
        if l + 1 < self.layers {
            self.error_channels(l) + self.r_channels[l]
        } else {
            self.error_channels(l)
        }
    }

    fn join(v: &[usize]) -> String {
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("layers", self.layers.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", self.channels.to_string()),
            ("action_dim", self.action_dim.to_string()),
            ("gu_units", Self::join(&self.gu_units)),
            ("r_channels", Self::join(&self.r_channels)),
            ("target_channels", Self::join(&self.target_channels)),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("kernel", self.kernel.to_string()),
            ("padding", self.padding.width.to_string()),
            ("padding_mode", self.padding.mode.name().to_string()),
        ] {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line without '=': {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::config(format!("config missing key {k:?}")));
        let num = |k: &str, v: String| v.parse::<usize>().map_err(|_| Error::config(format!("{k}: not an integer: {v:?}")));
        let list = |k: &str, v: String| v.split(',').map(|x| num(k, x.trim().to_string())).collect::<Result<Vec<_>>>();

        let cfg = NetworkConfig {
            layers: num("layers", take("layers")?)?,
            height: num("height", take("height")?)?,
            width: num("width", take("width")?)?,
            channels: num("channels", take("channels")?)?,
            action_dim: num("action_dim", take("action_dim")?)?,
            gu_units: list("gu_units", take("gu_units")?)?,
            r_channels: list("r_channels", take("r_channels")?)?,
            target_channels: list("target_channels", take("target_channels")?)?,
            mlp_hidden: num("mlp_hidden", take("mlp_hidden")?)?,
            kernel: num("kernel", take("kernel")?)?,
            padding: Padding {
                width: num("padding", take("padding")?)?,
                mode: {
                    let v = take("padding_mode")?;
                    PaddingMode::parse(&v).ok_or_else(|| Error::config(format!("unknown padding_mode {v:?}")))?
                },
            },
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::config(format!("unknown config key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learnable weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<P> {
    /// The generative-unit bank.
    pub units: Vec<ConvLstmParams<P>>,
    /// Motor modulation: action → attention over `units`.
    pub mlp: MlpParams<P>,
    /// `R_l → X̂_l`.
    pub prediction: ConvParams<P>,
    /// `E_{l-1} → X_l`; absent on layer 0.
    pub discriminative: Option<ConvParams<P>>,
    /// Upsampled `R_{l+1}` → unit input; absent on the top layer.
    pub topdown: Option<ConvParams<P>>,
}

impl<P> ParamTree<P> for LayerParams<P> {
    type With<Q> = LayerParams<Q>;

    fn map_ref<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> LayerParams<Q> {
        LayerParams {
            units: self.units.iter().map(|u| u.map_ref(f)).collect(),
            mlp: self.mlp.map_ref(f),
            prediction: self.prediction.map_ref(f),
            discriminative: self.discriminative.as_ref().map(|c| c.map_ref(f)),
            topdown: self.topdown.as_ref().map(|c| c.map_ref(f)),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (d, u) in self.units.iter().enumerate() {
            u.visit(&format!("{prefix}.unit{d}"), f);
        }
        self.mlp.visit(&format!("{prefix}.mlp"), f);
        self.prediction.visit(&format!("{prefix}.prediction"), f);
        if let Some(c) = &self.discriminative {
            c.visit(&format!("{prefix}.discriminative"), f);
        }
        if let Some(c) = &self.topdown {
            c.visit(&format!("{prefix}.topdown"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        for (d, u) in self.units.iter_mut().enumerate() {
            u.visit_mut(&format!("{prefix}.unit{d}"), f);
        }
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
        self.prediction.visit_mut(&format!("{prefix}.prediction"), f);
        if let Some(c) = &mut self.discriminative {
            c.visit_mut(&format!("{prefix}.discriminative"), f);
        }
        if let Some(c) = &mut self.topdown {
            c.visit_mut(&format!("{prefix}.topdown"), f);
        }
    }
}

/// All learnable weights of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<P> {
    pub layers: Vec<LayerParams<P>>,
}

impl<P> ParamTree<P> for Parameters<P> {
    type With<Q> = Parameters<Q>;

    fn map_ref<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Parameters<Q> {
        Parameters { layers: self.layers.iter().map(|l| l.map_ref(f)).collect() }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (l, layer) in self.layers.iter().enumerate() {
            let p = if prefix.is_empty() { format!("layer{l}") } else { format!("{prefix}.layer{l}") };
            layer.visit(&p, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = if prefix.is_empty() { format!("layer{l}") } else { format!("{prefix}.layer{l}") };
            layer.visit_mut(&p, f);
        }
    }
}

impl<P> Parameters<P> {
    /// Leaves with their names, in visiting order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n, p)));
        out
    }
}

impl<T: Real> Parameters<Tensor<T>> {
    fn build(config: &NetworkConfig, mut make: impl FnMut(Kind, &[usize]) -> Tensor<T>) -> Self {
        let k = config.kernel;
        let a = config.action_dim;
        let layers = (0..config.layers)
            .map(|l| {
                let hid = config.r_channels[l];
                let cin = config.unit_input_channels(l);
                let units = (0..config.gu_units[l])
                    .map(|_| {
                        let mut gate = |forget: bool| cells::GateParams {
                            input_kernels: make(Kind::Kernel { fan_in: cin * k * k, fan_out: hid * k * k }, &[hid, cin, k, k]),
                            hidden_kernels: make(Kind::Kernel { fan_in: hid * k * k, fan_out: hid * k * k }, &[hid, hid, k, k]),
                            bias: make(if forget { Kind::ForgetBias } else { Kind::Bias }, &[hid]),
                        };
                        ConvLstmParams { input: gate(false), forget: gate(true), output: gate(false), candidate: gate(false) }
                    })
                    .collect();
                let d = config.gu_units[l];
                let mh = config.mlp_hidden;
                let mlp = MlpParams {
                    w1: make(Kind::Kernel { fan_in: a, fan_out: mh }, &[mh, a]),
                    b1: make(Kind::Bias, &[mh]),
                    w2: make(Kind::Kernel { fan_in: mh, fan_out: d }, &[d, mh]),
                    b2: make(Kind::Bias, &[d]),
                };
                let mut conv = |cout: usize, cin: usize| ConvParams {
                    kernels: make(Kind::Kernel { fan_in: cin * k * k, fan_out: cout * k * k }, &[cout, cin, k, k]),
                    bias: make(Kind::Bias, &[cout]),
                };
                let prediction = conv(config.target_channels[l], hid);
                let discriminative = (l > 0).then(|| conv(config.target_channels[l], config.error_channels(l - 1)));
                let topdown = (l + 1 < config.layers).then(|| conv(hid, config.r_channels[l + 1]));
                LayerParams { units, mlp, prediction, discriminative, topdown }
            })
            .collect();
        Parameters { layers }
    }

    /// Glorot-uniform weights, zero biases, forget-gate biases 1. Fully
    /// determined by `seed`.
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |kind, shape| match kind {
            Kind::Kernel { fan_in, fan_out } => cells::glorot(shape, fan_in, fan_out, &mut rng),
            Kind::Bias => Tensor::zeros(shape),
            Kind::ForgetBias => Tensor::full(shape, T::one()),
        })
    }

    pub fn zeros(config: &NetworkConfig) -> Self {
        Self::build(config, |_, shape| Tensor::zeros(shape))
    }

    pub fn cast<U: Real>(&self) -> Parameters<Tensor<U>> {
        self.map_ref(&mut |t| t.cast())
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks that names and shapes match what `config` requires and that
    /// every value is finite.
    pub fn validate(&self, config: &NetworkConfig) -> Result<()> {
        let want = Parameters::<Tensor<T>>::zeros(config);
        let (a, b) = (self.named(), want.named());
        if a.len() != b.len() {
            return Err(Error::config(format!("parameter count {} does not match config ({})", a.len(), b.len())));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::config(format!(
                    "parameter {na} {:?} does not match config ({nb} {:?})",
                    ta.shape(),
                    tb.shape()
                )));
            }
            if !ta.is_finite() {
                return Err(Error::config(format!("parameter {na} has non-finite values")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Kernel { fan_in: usize, fan_out: usize },
    Bias,
    ForgetBias,
}

/// Runtime state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    /// Per-unit state: `h` is the unit's own output `h_l^d(t)`, `c` its cell.
    pub units: Vec<ConvLstmState<T>>,
    /// Attention weights `w(t)` most recently applied to the bank.
    pub attention: Tensor<T>,
    /// Combined representation `R_l`.
    pub r: Tensor<T>,
    /// `X̂_l`.
    pub prediction: Tensor<T>,
    /// `E_l`, twice the channels of the target.
    pub error: Tensor<T>,
    /// `X_l`.
    pub target: Tensor<T>,
}

/// Tape handles mirroring [`LayerState`].
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub units: Vec<LstmVars>,
    pub attention: Var,
    pub r: Var,
    pub prediction: Var,
    pub error: Var,
    pub target: Var,
}

/// Zero-filled state for every layer.
pub fn init_state<T: Real>(config: &NetworkConfig) -> Vec<LayerState<T>> {
    config
        .layer_dims()
        .into_iter()
        .enumerate()
        .map(|(l, (h, w))| {
            let r = config.r_channels[l];
            let c = config.target_channels[l];
            LayerState {
                units: (0..config.gu_units[l]).map(|_| ConvLstmState::zeros(r, h, w)).collect(),
                attention: Tensor::zeros(&[config.gu_units[l]]),
                r: Tensor::zeros(&[r, h, w]),
                prediction: Tensor::zeros(&[c, h, w]),
                error: Tensor::zeros(&[2 * c, h, w]),
                target: Tensor::zeros(&[c, h, w]),
            }
        })
        .collect()
}

pub fn load_states<T: Real>(tape: &mut Tape<T>, states: &[LayerState<T>]) -> Vec<LayerVars> {
    states
        .iter()
        .map(|s| LayerVars {
            units: s.units.iter().map(|u| LstmVars { h: tape.leaf(u.h.clone()), c: tape.leaf(u.c.clone()) }).collect(),
            attention: tape.leaf(s.attention.clone()),
            r: tape.leaf(s.r.clone()),
            prediction: tape.leaf(s.prediction.clone()),
            error: tape.leaf(s.error.clone()),
            target: tape.leaf(s.target.clone()),
        })
        .collect()
}

pub fn read_states<T: Real>(tape: &Tape<T>, vars: &[LayerVars]) -> Vec<LayerState<T>> {
    vars.iter()
        .map(|v| LayerState {
            units: v
                .units
                .iter()
                .map(|u| ConvLstmState { h: tape.value(u.h).clone(), c: tape.value(u.c).clone() })
                .collect(),
            attention: tape.value(v.attention).clone(),
            r: tape.value(v.r).clone(),
            prediction: tape.value(v.prediction).clone(),
            error: tape.value(v.error).clone(),
            target: tape.value(v.target).clone(),
        })
        .collect()
}

/// Recorded top-down sweep: updates unit states, attention and `R` of every layer.
pub fn topdown_on<T: Real>(
    tape: &mut Tape<T>,
    config: &NetworkConfig,
    params: &Parameters<Var>,
    states: &mut [LayerVars],
    action: Var,
) -> Result<()> {
    if tape.value(action).shape() != [config.action_dim] {
        return Err(Error::invalid(format!(
            "action vector shape {:?}, network expects [{}]",
            tape.value(action).shape(),
            config.action_dim
        )));
    }
    let dims = config.layer_dims();
    for l in (0..config.layers).rev() {
        let lp = &params.layers[l];
        let mut input = states[l].error;
        if let Some(td) = &lp.topdown {
            let down = tape.upsample2x_conv(states[l + 1].r, td.kernels, Some(td.bias), config.padding, dims[l])?;
            input = tape.concat_channels(input, down)?;
        }
        let recurrent = states[l].r;
        let mut units = Vec::with_capacity(lp.units.len());
        for (unit, prev) in lp.units.iter().zip(&states[l].units) {
            let s = LstmVars { h: recurrent, c: prev.c };
            units.push(cells::convlstm_step_on(tape, unit, s, input, config.padding)?);
        }
        let weights = cells::action_mlp_on(tape, &lp.mlp, action)?;
        let mut r = tape.scale_by_element(units[0].h, weights, 0);
        for (d, u) in units.iter().enumerate().skip(1) {
            let term = tape.scale_by_element(u.h, weights, d);
            r = tape.add(r, term)?;
        }
        states[l].units = units;
        states[l].attention = weights;
        states[l].r = r;
    }
    Ok(())
}

/// Recorded bottom-up sweep: predictions, errors and higher-layer targets.
pub fn bottomup_on<T: Real>(
    tape: &mut Tape<T>,
    config: &NetworkConfig,
    params: &Parameters<Var>,
    states: &mut [LayerVars],
    frame: Var,
) -> Result<()> {
    let want = [config.channels, config.height, config.width];
    if tape.value(frame).shape() != want {
        return Err(Error::invalid(format!("frame shape {:?}, network expects {want:?}", tape.value(frame).shape())));
    }
    states[0].target = frame;
    for l in 0..config.layers {
        let lp = &params.layers[l];
        let z = tape.conv2d(states[l].r, lp.prediction.kernels, Some(lp.prediction.bias), config.padding)?;
        let pred = tape.prediction_relu(z);
        let target = states[l].target;
        let up = tape.sub(target, pred)?;
        let down = tape.sub(pred, target)?;
        let pos = tape.relu(up);
        let neg = tape.relu(down);
        let error = tape.concat_channels(pos, neg)?;
        states[l].prediction = pred;
        states[l].error = error;
        if l + 1 < config.layers {
            let du = params.layers[l + 1].discriminative.as_ref().expect("layers above 0 have a discriminative conv");
            let z = tape.conv2d(error, du.kernels, Some(du.bias), config.padding)?;
            let a = tape.relu(z);
            states[l + 1].target = tape.maxpool2x2(a)?;
        }
    }
    Ok(())
}

/// Handles recorded by [`record_rollout`].
pub struct RecordedRollout {
    /// `X̂_0(t)` for every step.
    pub predictions: Vec<Var>,
    /// `E_l(t)`, indexed `[t][l]`.
    pub errors: Vec<Vec<Var>>,
    pub final_states: Vec<LayerVars>,
}

/// Records a full sequence from a fresh zero state.
pub fn record_rollout<T: Real>(
    tape: &mut Tape<T>,
    config: &NetworkConfig,
    params: &Parameters<Var>,
    frames: &[Tensor<T>],
    actions: &[Tensor<T>],
) -> Result<RecordedRollout> {
    if frames.is_empty() {
        return Err(Error::invalid("rollout needs at least one frame"));
    }
    if frames.len() != actions.len() {
        return Err(Error::invalid(format!("{} frames but {} actions", frames.len(), actions.len())));
    }
    let zero = init_state::<T>(config);
    let mut states = load_states(tape, &zero);
    let mut predictions = Vec::with_capacity(frames.len());
    let mut errors = Vec::with_capacity(frames.len());
    for (frame, action) in frames.iter().zip(actions) {
        let a = tape.leaf(action.clone());
        topdown_on(tape, config, params, &mut states, a)?;
        let f = tape.leaf(frame.clone());
        bottomup_on(tape, config, params, &mut states, f)?;
        predictions.push(states[0].prediction);
        errors.push(states.iter().map(|s| s.error).collect());
    }
    Ok(RecordedRollout { predictions, errors, final_states: states })
}

/// Values collected by [`Network::rollout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T> {
    /// One-step-ahead predictions `X̂_0(t)`.
    pub predictions: Vec<Tensor<T>>,
    /// Mean of `E_l(t)`, indexed `[t][l]`.
    pub layer_errors: Vec<Vec<T>>,
    /// Full error tensors `E_l(t)`, indexed `[t][l]`.
    pub errors: Vec<Vec<Tensor<T>>>,
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    pub config: NetworkConfig,
    pub params: Parameters<Tensor<T>>,
}

impl<T: Real> Network<T> {
    pub fn new(config: NetworkConfig, params: Parameters<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        Ok(Network { config, params })
    }

    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Ok(Network { config, params })
    }

    pub fn init_state(&self) -> Vec<LayerState<T>> {
        init_state(&self.config)
    }

    fn with_tape<R>(
        &self,
        states: &mut [LayerState<T>],
        f: impl FnOnce(&mut Tape<T>, &Parameters<Var>, &mut Vec<LayerVars>) -> Result<R>,
    ) -> Result<R> {
        if states.len() != self.config.layers {
            return Err(Error::invalid(format!("{} layer states for {} layers", states.len(), self.config.layers)));
        }
        let mut tape = Tape::new();
        let p = self.params.map_ref(&mut |t| tape.leaf(t.clone()));
        let mut vars = load_states(&mut tape, states);
        let out = f(&mut tape, &p, &mut vars)?;
        for (s, v) in states.iter_mut().zip(read_states(&tape, &vars)) {
            *s = v;
        }
        Ok(out)
    }

    pub fn topdown_pass(&self, states: &mut [LayerState<T>], action: &[T]) -> Result<()> {
        if action.len() != self.config.action_dim {
            return Err(Error::invalid(format!("action has {} entries, network expects {}", action.len(), self.config.action_dim)));
        }
        let a = Tensor::new(&[action.len()], action.to_vec())?;
        self.with_tape(states, |tape, p, vars| {
            let a = tape.leaf(a);
            topdown_on(tape, &self.config, p, vars, a)
        })
    }

    pub fn bottomup_pass(&self, states: &mut [LayerState<T>], frame: &Tensor<T>) -> Result<()> {
        self.with_tape(states, |tape, p, vars| {
            let f = tape.leaf(frame.clone());
            bottomup_on(tape, &self.config, p, vars, f)
        })
    }

    /// One full timestep. Returns `X̂_0(t)`, which depends only on earlier
    /// frames and on actions up to `t`.
    pub fn step(&self, states: &mut [LayerState<T>], frame: &Tensor<T>, action: &[T]) -> Result<Tensor<T>> {
        self.topdown_pass(states, action)?;
        self.bottomup_pass(states, frame)?;
        Ok(states[0].prediction.clone())
    }

    /// Runs a whole sequence from a fresh state.
    pub fn rollout(&self, seq: &Sequence) -> Result<Rollout<T>> {
        let (frames, actions) = seq.tensors::<T>()?;
        let mut tape = Tape::new();
        let p = self.params.map_ref(&mut |t| tape.leaf(t.clone()));
        let rec = record_rollout(&mut tape, &self.config, &p, &frames, &actions)?;
        let errors: Vec<Vec<Tensor<T>>> =
            rec.errors.iter().map(|es| es.iter().map(|e| tape.value(*e).clone()).collect()).collect();
        Ok(Rollout {
            predictions: rec.predictions.iter().map(|v| tape.value(*v).clone()).collect(),
            layer_errors: errors.iter().map(|es| es.iter().map(|e| e.mean()).collect()).collect(),
            errors,
        })
    }
}
