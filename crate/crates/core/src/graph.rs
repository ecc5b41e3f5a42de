//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its operands. [`Tape::backward`] walks the tape once in reverse order, so
//! a whole sequence rollout recorded on one tape is differentiated through
//! time in a single sweep.

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::Result;
use crate::tensor::{self, Padding, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { input: Var, kernels: Var, bias: Option<Var>, padding: Padding },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample(Var),
    Crop(Var),
    /// `slope` is the backward slope used where the input is not positive.
    Relu { x: Var, slope: T },
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    Scale(Var, T),
    ScaleByElement { x: Var, weights: Var, index: usize },
    MatVec { w: Var, x: Var },
    Softmax(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    prediction_slope: T,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), prediction_slope: T::zero() }
    }

    /// A tape whose [`Tape::prediction_relu`] nodes pass `slope · g` backward
    /// where their input is not positive. Forward values are unaffected.
    pub fn with_prediction_slope(slope: T) -> Self {
        Tape { nodes: Vec::new(), prediction_slope: slope }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter, frame, or carried-in state).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let out = tensor::conv2d(self.value(input), self.value(kernels), bias.map(|b| self.value(b)), padding)?;
        Ok(self.push(out, Op::Conv { input, kernels, bias, padding }))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = tensor::maxpool2x2(self.value(input))?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = tensor::upsample2x(self.value(input))?;
        Ok(self.push(out, Op::Upsample(input)))
    }

    pub fn crop(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let out = tensor::crop(self.value(input), h, w)?;
        Ok(self.push(out, Op::Crop(input)))
    }

    /// Nearest-neighbour 2× upsample, cropped to `h`×`w`, then convolved.
    pub fn upsample2x_conv(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        padding: Padding,
        (h, w): (usize, usize),
    ) -> Result<Var> {
        let mut up = self.upsample2x(input)?;
        let (_, uh, uw) = self.value(up).chw()?;
        if (uh, uw) != (h, w) {
            up = self.crop(up, h, w)?;
        }
        self.conv2d(up, kernels, bias, padding)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        self.push(out, Op::Relu { x, slope: T::zero() })
    }

    /// `relu` whose backward slope below zero is the tape's prediction slope
    /// (zero unless set with [`Tape::with_prediction_slope`]).
    pub fn prediction_relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        let slope = self.prediction_slope;
        self.push(out, Op::Relu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = tensor::tanh(self.value(x));
        self.push(out, Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = tensor::scale(self.value(x), s);
        self.push(out, Op::Scale(x, s))
    }

    /// `x · weights[index]`, differentiable in both operands.
    pub fn scale_by_element(&mut self, x: Var, weights: Var, index: usize) -> Var {
        let w = self.value(weights).data()[index];
        let out = tensor::scale(self.value(x), w);
        self.push(out, Op::ScaleByElement { x, weights, index })
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let out = tensor::matvec(self.value(w), self.value(x))?;
        Ok(self.push(out, Op::MatVec { w, x }))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = tensor::softmax(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x))
    }

    /// Fingerprint of every non-smooth choice on the tape: the sign of each
    /// rectifier input and each pooling winner. Two recordings with equal
    /// fingerprints lie in the same piecewise-smooth region.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x, .. } => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv { input, kernels, bias, padding } => {
                let cg = tensor::conv2d_backward(val(*input), val(*kernels), *padding, &g)
                    .expect("shapes validated on the forward pass");
                accumulate(grads, *input, cg.input);
                accumulate(grads, *kernels, cg.kernels);
                if let Some(b) = bias {
                    accumulate(grads, *b, cg.bias);
                }
            }
            Op::MaxPool { input, argmax } => {
                let gi = tensor::maxpool2x2_backward(val(*input).shape(), argmax, &g);
                accumulate(grads, *input, gi);
            }
            Op::Upsample(x) => {
                accumulate(grads, *x, tensor::upsample2x_backward(&g).expect("order-3 gradient"));
            }
            Op::Crop(x) => {
                let (_, h, w) = val(*x).chw().expect("order-3 input");
                accumulate(grads, *x, tensor::crop_backward(&g, h, w).expect("order-3 gradient"));
            }
            Op::Relu { x, slope } => {
                let xv = val(*x);
                let gi = zip_map(&g, xv, |gv, v| if v > T::zero() { gv } else { gv * *slope });
                accumulate(grads, *x, gi);
            }
            Op::Sigmoid(x) => {
                let gi = zip_map(&g, &node.value, |gv, y| gv * y * (T::one() - y));
                accumulate(grads, *x, gi);
            }
            Op::Tanh(x) => {
                let gi = zip_map(&g, &node.value, |gv, y| gv * (T::one() - y * y));
                accumulate(grads, *x, gi);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *b, g.map(|v| -v));
                accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, zip_map(&g, val(*b), |gv, v| gv * v));
                accumulate(grads, *b, zip_map(&g, val(*a), |gv, v| gv * v));
            }
            Op::Concat(a, b) => {
                let (ga, gb) = tensor::split_channels(&g, val(*a).shape()[0]);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::ScaleByElement { x, weights, index } => {
                let wv = val(*weights);
                let w = wv.data()[*index];
                let dot: T = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                let mut gw = Tensor::zeros(wv.shape());
                gw.data_mut()[*index] = dot;
                accumulate(grads, *weights, gw);
                accumulate(grads, *x, g.map(|v| v * w));
            }
            Op::MatVec { w, x } => {
                let (wv, xv) = (val(*w), val(*x));
                let n = xv.len();
                let gw = Tensor::from_fn(wv.shape(), |i| g.data()[i / n] * xv.data()[i % n]);
                let gx = Tensor::from_fn(xv.shape(), |j| {
                    g.data().iter().enumerate().map(|(i, &gi)| wv.data()[i * n + j] * gi).sum()
                });
                accumulate(grads, *w, gw);
                accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let dot: T = g.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
                accumulate(grads, *x, zip_map(&g, y, |gv, yv| yv * (gv - dot)));
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let each = g.data()[0] / T::of(xv.len() as f64);
                accumulate(grads, *x, Tensor::full(xv.shape(), each));
            }
        }
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`]: gradients of the seed with respect to leaves.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materialising zeros shaped like the recorded value.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` at every element of the leaf inputs.
    fn numeric_grads(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> Vec<Tensor<f64>> {
        let eps = 1e-5;
        let eval = |inputs: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).sum()
        };
        inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                Tensor::from_fn(t.shape(), |i| {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[i] += eps;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[i] -= eps;
                    (eval(&plus) - eval(&minus)) / (2.0 * eps)
                })
            })
            .collect()
    }

    fn check(inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let numeric = numeric_grads(&inputs, f);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        for (k, v) in vars.iter().enumerate() {
            let a = grads.get_or_zeros(&tape, *v);
            for (x, y) in a.data().iter().zip(numeric[k].data()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-7);
                assert!(rel < 1e-4, "input {k}: analytic {x} vs numeric {y}");
            }
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
        Tensor::from_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    #[test]
    fn grad_conv2d() {
        for mode in [tensor::PaddingMode::Zeros, tensor::PaddingMode::Circular] {
            let p = Padding { width: 1, mode };
            check(
                vec![rand_tensor(&[2, 4, 5], 1), rand_tensor(&[3, 2, 3, 3], 2), rand_tensor(&[3], 3)],
                &|t, v| t.conv2d(v[0], v[1], Some(v[2]), p).unwrap(),
            );
        }
    }

    #[test]
    fn prediction_relu_slope() {
        let x = Tensor::new(&[4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap();
        for (slope, want) in [(0.0, [0.0, 0.0, 1.0, 1.0]), (0.25, [0.25, 0.25, 1.0, 1.0])] {
            let mut t = Tape::<f64>::with_prediction_slope(slope);
            let v = t.leaf(x.clone());
            let r = t.prediction_relu(v);
            assert_eq!(t.value(r).data(), &[0.0, 0.0, 0.5, 3.0]);
            let s = t.scale(r, 4.0);
            let m = t.mean(s);
            assert_eq!(t.backward(m).get(v).unwrap().data(), &want);
        }
    }

    #[test]
    fn grad_maxpool_odd() {
        check(vec![rand_tensor(&[2, 5, 3], 4)], &|t, v| t.maxpool2x2(v[0]).unwrap());
    }

    #[test]
    fn grad_upsample_conv_with_crop() {
        check(vec![rand_tensor(&[2, 2, 3], 5), rand_tensor(&[1, 2, 3, 3], 6)], &|t, v| {
            t.upsample2x_conv(v[0], v[1], None, Padding::zeros(1), (3, 5)).unwrap()
        });
    }

    #[test]
    fn grad_pointwise_and_activations() {
        check(vec![rand_tensor(&[2, 3, 3], 7), rand_tensor(&[2, 3, 3], 8)], &|t, v| {
            let s = t.sigmoid(v[0]);
            let h = t.tanh(v[1]);
            let m = t.mul(s, h).unwrap();
            let d = t.sub(m, v[1]).unwrap();
            let r = t.relu(d);
            let c = t.concat_channels(r, v[0]).unwrap();
            let a = t.add(c, c).unwrap();
            t.scale(a, 0.3)
        });
    }

    #[test]
    fn grad_mlp_softmax_mix() {
        check(
            vec![rand_tensor(&[3, 2], 9), rand_tensor(&[2], 10), rand_tensor(&[2, 4, 4], 11), rand_tensor(&[2, 4, 4], 12)],
            &|t, v| {
                let z = t.matvec(v[0], v[1]).unwrap();
                let z = t.tanh(z);
                let w = t.softmax(z);
                let a = t.scale_by_element(v[2], w, 0);
                let b = t.scale_by_element(v[3], w, 2);
                let s = t.add(a, b).unwrap();
                let s = t.mul(s, s).unwrap();
                t.mean(s)
            },
        );
    }
}
