//! The two learned building blocks: a convolutional LSTM cell and the small
//! action MLP whose softmax output weights a bank of such cells.
//!
//! Parameter containers are generic over their leaf type `P`, so the same
//! structure holds plain tensors (`P = Tensor<T>`), tape handles while a
//! forward pass is being recorded (`P = Var`), or gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{Padding, Real, Tensor};

/// Uniform structural traversal of a parameter container.
pub trait ParamTree<P> {
    type With<Q>;

    fn map_ref<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::With<Q>;

    /// Visits every leaf with its dotted name, in a fixed order.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot-uniform tensor: ±√(6 / (fan_in + fan_out)).
pub(crate) fn glorot<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-limit..=limit)))
}

/// Kernels and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<P> {
    pub kernels: P,
    pub bias: P,
}

impl<T: Real> ConvParams<Tensor<T>> {
    pub fn init(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Self {
        ConvParams {
            kernels: glorot(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

impl<P> ParamTree<P> for ConvParams<P> {
    type With<Q> = ConvParams<Q>;

    fn map_ref<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ConvParams<Q> {
        ConvParams { kernels: f(&self.kernels), bias: f(&self.bias) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "kernels"), &self.kernels);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "kernels"), &mut self.kernels);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// One LSTM gate: a convolution of the input, a convolution of the hidden
/// state, and a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<P> {
    pub input_kernels: P,
    pub hidden_kernels: P,
    pub bias: P,
}

impl<P> ParamTree<P> for GateParams<P> {
    type With<Q> = GateParams<Q>;

    fn map_ref<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> GateParams<Q> {
        GateParams { input_kernels: f(&self.input_kernels), hidden_kernels: f(&self.hidden_kernels), bias: f(&self.bias) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "input_kernels"), &self.input_kernels);
        f(join(prefix, "hidden_kernels"), &self.hidden_kernels);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "input_kernels"), &mut self.input_kernels);
        f(join(prefix, "hidden_kernels"), &mut self.hidden_kernels);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Weights of a convolutional LSTM cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams<P> {
    pub input: GateParams<P>,
    pub forget: GateParams<P>,
    pub output: GateParams<P>,
    pub candidate: GateParams<P>,
}

impl<T: Real> ConvLstmParams<Tensor<T>> {
    /// Glorot-uniform kernels, zero biases, forget-gate bias 1.
    pub fn init(c_in: usize, c_hid: usize, k: usize, rng: &mut impl Rng) -> Self {
        let mut gate = |bias: f64| GateParams {
            input_kernels: glorot(&[c_hid, c_in, k, k], c_in * k * k, c_hid * k * k, rng),
            hidden_kernels: glorot(&[c_hid, c_hid, k, k], c_hid * k * k, c_hid * k * k, rng),
            bias: Tensor::full(&[c_hid], T::of(bias)),
        };
        ConvLstmParams { input: gate(0.0), forget: gate(1.0), output: gate(0.0), candidate: gate(0.0) }
    }

    /// All-zero weights and biases.
    pub fn zeros(c_in: usize, c_hid: usize, k: usize) -> Self {
        let gate = || GateParams {
            input_kernels: Tensor::zeros(&[c_hid, c_in, k, k]),
            hidden_kernels: Tensor::zeros(&[c_hid, c_hid, k, k]),
            bias: Tensor::zeros(&[c_hid]),
        };
        ConvLstmParams { input: gate(), forget: gate(), output: gate(), candidate: gate() }
    }

    pub fn hidden_channels(&self) -> usize {
        self.input.bias.shape()[0]
    }
}

impl<P> ParamTree<P> for ConvLstmParams<P> {
    type With<Q> = ConvLstmParams<Q>;

    fn map_ref<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ConvLstmParams<Q> {
        ConvLstmParams {
            input: self.input.map_ref(f),
            forget: self.forget.map_ref(f),
            output: self.output.map_ref(f),
            candidate: self.candidate.map_ref(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.input.visit(&join(prefix, "input_gate"), f);
        self.forget.visit(&join(prefix, "forget_gate"), f);
        self.output.visit(&join(prefix, "output_gate"), f);
        self.candidate.visit(&join(prefix, "candidate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.input.visit_mut(&join(prefix, "input_gate"), f);
        self.forget.visit_mut(&join(prefix, "forget_gate"), f);
        self.output.visit_mut(&join(prefix, "output_gate"), f);
        self.candidate.visit_mut(&join(prefix, "candidate"), f);
    }
}

/// Hidden and cell state of a convolutional LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> ConvLstmState<T> {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        ConvLstmState { h: Tensor::zeros(&[channels, h, w]), c: Tensor::zeros(&[channels, h, w]) }
    }
}

/// Tape handles of a recorded LSTM state.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

fn gate<T: Real>(tape: &mut Tape<T>, p: &GateParams<Var>, input: Var, h: Var, padding: Padding) -> Result<Var> {
    let zx = tape.conv2d(input, p.input_kernels, Some(p.bias), padding)?;
    let zh = tape.conv2d(h, p.hidden_kernels, None, padding)?;
    tape.add(zx, zh)
}

/// One recorded ConvLSTM step:
/// `i,f,o = σ(conv(x)+conv(h)+b)`, `g = tanh(…)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn convlstm_step_on<T: Real>(
    tape: &mut Tape<T>,
    params: &ConvLstmParams<Var>,
    state: LstmVars,
    input: Var,
    padding: Padding,
) -> Result<LstmVars> {
    let (_, ih, iw) = tape.value(input).chw()?;
    let (_, sh, sw) = tape.value(state.h).chw()?;
    if (ih, iw) != (sh, sw) {
        return Err(Error::invalid(format!("convlstm: input is {ih}×{iw}, state is {sh}×{sw}")));
    }
    let zi = gate(tape, &params.input, input, state.h, padding)?;
    let zf = gate(tape, &params.forget, input, state.h, padding)?;
    let zo = gate(tape, &params.output, input, state.h, padding)?;
    let zg = gate(tape, &params.candidate, input, state.h, padding)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let o = tape.sigmoid(zo);
    let g = tape.tanh(zg);
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmVars { h, c })
}

/// Pure ConvLSTM step on plain tensors.
pub fn convlstm_step<T: Real>(
    params: &ConvLstmParams<Tensor<T>>,
    state: &ConvLstmState<T>,
    input: &Tensor<T>,
    padding: Padding,
) -> Result<ConvLstmState<T>> {
    let mut tape = Tape::new();
    let p = params.map_ref(&mut |t| tape.leaf(t.clone()));
    let s = LstmVars { h: tape.leaf(state.h.clone()), c: tape.leaf(state.c.clone()) };
    let x = tape.leaf(input.clone());
    let out = convlstm_step_on(&mut tape, &p, s, x, padding)?;
    Ok(ConvLstmState { h: tape.value(out.h).clone(), c: tape.value(out.c).clone() })
}

/// Two-layer perceptron mapping an action vector to attention weights over a
/// bank of units: `softmax(W2 · tanh(W1 · a + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

impl<T: Real> MlpParams<Tensor<T>> {
    pub fn init(action_dim: usize, hidden: usize, units: usize, rng: &mut impl Rng) -> Self {
        MlpParams {
            w1: glorot(&[hidden, action_dim], action_dim, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: glorot(&[units, hidden], hidden, units, rng),
            b2: Tensor::zeros(&[units]),
        }
    }

    pub fn zeros(action_dim: usize, hidden: usize, units: usize) -> Self {
        MlpParams {
            w1: Tensor::zeros(&[hidden, action_dim]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[units, hidden]),
            b2: Tensor::zeros(&[units]),
        }
    }

    pub fn action_dim(&self) -> usize {
        self.w1.shape()[1]
    }
}

impl<P> ParamTree<P> for MlpParams<P> {
    type With<Q> = MlpParams<Q>;

    fn map_ref<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> MlpParams<Q> {
        MlpParams { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "w1"), &self.w1);
        f(join(prefix, "b1"), &self.b1);
        f(join(prefix, "w2"), &self.w2);
        f(join(prefix, "b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "w1"), &mut self.w1);
        f(join(prefix, "b1"), &mut self.b1);
        f(join(prefix, "w2"), &mut self.w2);
        f(join(prefix, "b2"), &mut self.b2);
    }
}

/// Recorded MLP forward pass up to the pre-softmax logits.
pub fn action_logits_on<T: Real>(tape: &mut Tape<T>, params: &MlpParams<Var>, action: Var) -> Result<Var> {
    let expected = tape.value(params.w1).shape()[1];
    let got = tape.value(action).shape();
    if got != [expected] {
        return Err(Error::invalid(format!("action vector shape {got:?}, network expects [{expected}]")));
    }
    let z1 = tape.matvec(params.w1, action)?;
    let z1 = tape.add(z1, params.b1)?;
    let hidden = tape.tanh(z1);
    let z2 = tape.matvec(params.w2, hidden)?;
    tape.add(z2, params.b2)
}

pub fn action_mlp_on<T: Real>(tape: &mut Tape<T>, params: &MlpParams<Var>, action: Var) -> Result<Var> {
    let logits = action_logits_on(tape, params, action)?;
    Ok(tape.softmax(logits))
}

/// Attention weights for `action`: non-negative, summing to one.
pub fn action_mlp<T: Real>(params: &MlpParams<Tensor<T>>, action: &[T]) -> Result<Tensor<T>> {
    if action.is_empty() {
        return Err(Error::invalid("empty action vector"));
    }
    let mut tape = Tape::new();
    let p = params.map_ref(&mut |t| tape.leaf(t.clone()));
    let a = tape.leaf(Tensor::new(&[action.len()], action.to_vec())?);
    let w = action_mlp_on(&mut tape, &p, a)?;
    Ok(tape.value(w).clone())
}
