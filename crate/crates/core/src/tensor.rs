//! Dense tensors and the differentiable primitives the network is built from.
//!
//! Images are stored channels × height × width, row-major. Convolution uses
//! cross-correlation semantics: the kernel is applied as stored, never flipped,
//! so `out[co][y][x] = b[co] + Σ k[co][ci][ky][kx] · in[ci][y+ky-p][x+kx-p]`.
//!
//! Every primitive here is a pure function. The matching `*_backward`
//! functions return vector-Jacobian products and are used by [`crate::graph`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element type. `f32` is the working precision; `f64` exists for
/// gradient checking.
pub trait Real:
    Float + Default + Debug + Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b` (or `c += a · b` when `accumulate`), with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, (n as isize, 1));
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every operand extent was bounds-checked above and
                // `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense real array of order 1 to 4.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::invalid(format!("tensor order must be 1..=4, got {shape:?}")));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(format!("tensor extents must be positive, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Panics on an invalid shape; for internal construction from known-good extents.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = validate_shape(shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = validate_shape(shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same values reinterpreted under a new shape of equal size.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extents as (channels, height, width) for an order-3 image tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!("expected C×H×W tensor, got {:?}", self.shape))),
        }
    }

    /// Index of the largest element; the first one wins on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::invalid(format!("{op}: shape {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    same_shape(a, b, op)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// Elementwise binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Add,
    Sub,
    Mul,
}

pub fn pointwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: Pointwise) -> Result<Tensor<T>> {
    match op {
        Pointwise::Add => zip_with(a, b, "add", |x, y| x + y),
        Pointwise::Sub => zip_with(a, b, "sub", |x, y| x - y),
        Pointwise::Mul => zip_with(a, b, "mul", |x, y| x * y),
    }
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    pointwise(a, b, Pointwise::Add)
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    pointwise(a, b, Pointwise::Sub)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    pointwise(a, b, Pointwise::Mul)
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

/// `max(x, 0)`; NaN passes through so that divergence stays visible.
pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Stacks two tensors along the leading (channel) axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != b.shape.len() || a.shape[1..] != b.shape[1..] {
        return Err(Error::invalid(format!(
            "concat_channels: trailing extents differ, {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut shape = a.shape.clone();
    shape[0] += b.shape[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor { shape, data })
}

/// Inverse of [`concat_channels`]: the first `first` channels, then the rest.
pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let per: usize = x.shape[1..].iter().product();
    let mut sa = x.shape.clone();
    let mut sb = x.shape.clone();
    sa[0] = first;
    sb[0] = x.shape[0] - first;
    let (da, db) = x.data.split_at(first * per);
    (Tensor { shape: sa, data: da.to_vec() }, Tensor { shape: sb, data: db.to_vec() })
}

/// How out-of-range taps are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaddingMode {
    #[default]
    Zeros,
    /// Wrap around, treating the image as a torus.
    Circular,
}

impl PaddingMode {
    pub fn name(self) -> &'static str {
        match self {
            PaddingMode::Zeros => "zeros",
            PaddingMode::Circular => "circular",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zeros" | "zero" => Some(PaddingMode::Zeros),
            "circular" => Some(PaddingMode::Circular),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub width: usize,
    pub mode: PaddingMode,
}

impl Padding {
    pub const fn zeros(width: usize) -> Self {
        Padding { width, mode: PaddingMode::Zeros }
    }
}

impl Default for Padding {
    fn default() -> Self {
        Padding::zeros(1)
    }
}

fn pad<T: Real>(x: &[T], c: usize, h: usize, w: usize, p: Padding) -> Vec<T> {
    let pw = p.width;
    let (hp, wp) = (h + 2 * pw, w + 2 * pw);
    let mut out = vec![T::zero(); c * hp * wp];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * hp * wp..(ch + 1) * hp * wp];
        match p.mode {
            PaddingMode::Zeros => {
                for y in 0..h {
                    dst[(y + pw) * wp + pw..(y + pw) * wp + pw + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
            PaddingMode::Circular => {
                for py in 0..hp {
                    let sy = (py as isize - pw as isize).rem_euclid(h as isize) as usize;
                    for px in 0..wp {
                        let sx = (px as isize - pw as isize).rem_euclid(w as isize) as usize;
                        dst[py * wp + px] = src[sy * w + sx];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad`]: folds a padded gradient back onto the unpadded grid.
fn unpad<T: Real>(g: &[T], c: usize, h: usize, w: usize, p: Padding) -> Vec<T> {
    let pw = p.width;
    let (hp, wp) = (h + 2 * pw, w + 2 * pw);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &g[ch * hp * wp..(ch + 1) * hp * wp];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        match p.mode {
            PaddingMode::Zeros => {
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[(y + pw) * wp + pw..(y + pw) * wp + pw + w]);
                }
            }
            PaddingMode::Circular => {
                for py in 0..hp {
                    let sy = (py as isize - pw as isize).rem_euclid(h as isize) as usize;
                    for px in 0..wp {
                        let sx = (px as isize - pw as isize).rem_euclid(w as isize) as usize;
                        dst[sy * w + sx] += src[py * wp + px];
                    }
                }
            }
        }
    }
    out
}

struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, padding: Padding) -> Result<Self> {
        let (c_in, h, w) = input.chw()?;
        let [c_out, kc, kh, kw] = kernels.shape[..] else {
            return Err(Error::invalid(format!("conv2d: kernels must be order 4, got {:?}", kernels.shape)));
        };
        if kc != c_in {
            return Err(Error::invalid(format!("conv2d: input has {c_in} channels, kernels expect {kc}")));
        }
        if kh != kw {
            return Err(Error::invalid(format!("conv2d: kernels must be square, got {kh}×{kw}")));
        }
        let (hp, wp) = (h + 2 * padding.width, w + 2 * padding.width);
        if kh > hp || kw > wp {
            return Err(Error::invalid(format!("conv2d: kernel {kh}×{kw} larger than padded input {hp}×{wp}")));
        }
        Ok(ConvGeometry { c_in, c_out, h, w, k: kh, ho: hp - kh + 1, wo: wp - kw + 1 })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(padded: &[T], g: &ConvGeometry, pw: usize) -> Vec<T> {
    let (hp, wp) = (g.h + 2 * pw, g.w + 2 * pw);
    let n = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * n];
    for ci in 0..g.c_in {
        let plane = &padded[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for y in 0..g.ho {
                    let s = (y + ky) * wp + kx;
                    dst[y * g.wo..(y + 1) * g.wo].copy_from_slice(&plane[s..s + g.wo]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, pw: usize) -> Vec<T> {
    let (hp, wp) = (g.h + 2 * pw, g.w + 2 * pw);
    let n = g.col_cols();
    let mut padded = vec![T::zero(); g.c_in * hp * wp];
    for ci in 0..g.c_in {
        let plane = &mut padded[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for y in 0..g.ho {
                    let s = (y + ky) * wp + kx;
                    for (d, v) in plane[s..s + g.wo].iter_mut().zip(&src[y * g.wo..(y + 1) * g.wo]) {
                        *d += *v;
                    }
                }
            }
        }
    }
    padded
}

/// 2-D cross-correlation, stride 1. With a 3×3 kernel and padding width 1 the
/// spatial extents are preserved.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernels, padding)?;
    if let Some(b) = bias {
        if b.shape != [g.c_out] {
            return Err(Error::invalid(format!("conv2d: bias shape {:?}, expected [{}]", b.shape, g.c_out)));
        }
    }
    let padded = pad(&input.data, g.c_in, g.h, g.w, padding);
    let cols = im2col(&padded, &g, padding.width);
    let n = g.col_cols();
    let mut out = vec![T::zero(); g.c_out * n];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b.data[co]);
        }
    }
    let kr = g.col_rows();
    T::gemm(g.c_out, kr, n, &kernels.data, (kr as isize, 1), &cols, (n as isize, 1), &mut out, bias.is_some());
    Ok(Tensor { shape: vec![g.c_out, g.ho, g.wo], data: out })
}

/// Gradients of [`conv2d`] with respect to its three operands.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input, kernels, padding)?;
    if grad_out.shape != [g.c_out, g.ho, g.wo] {
        return Err(Error::invalid(format!("conv2d_backward: grad shape {:?}", grad_out.shape)));
    }
    let padded = pad(&input.data, g.c_in, g.h, g.w, padding);
    let cols = im2col(&padded, &g, padding.width);
    let n = g.col_cols();
    let kr = g.col_rows();

    let mut gk = vec![T::zero(); g.c_out * kr];
    // gK = gout · colsᵀ
    T::gemm(g.c_out, n, kr, &grad_out.data, (n as isize, 1), &cols, (1, n as isize), &mut gk, false);

    let mut gcols = vec![T::zero(); kr * n];
    // gcols = Kᵀ · gout
    T::gemm(kr, g.c_out, n, &kernels.data, (1, kr as isize), &grad_out.data, (n as isize, 1), &mut gcols, false);
    let gpad = col2im(&gcols, &g, padding.width);
    let gin = unpad(&gpad, g.c_in, g.h, g.w, padding);

    let gb = grad_out.data.chunks(n).map(|c| c.iter().copied().sum()).collect();
    Ok(ConvGrads {
        input: Tensor { shape: input.shape.clone(), data: gin },
        kernels: Tensor { shape: kernels.shape.clone(), data: gk },
        bias: Tensor { shape: vec![g.c_out], data: gb },
    })
}

/// 2×2 max pooling, stride 2. Trailing odd rows/columns form partial blocks
/// whose maximum is taken over the cells that exist. Returns the pooled tensor
/// and, per output cell, the flat input index of the winning element (first
/// in row-major order on ties).
pub fn maxpool2x2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        let i = ch * h * w + y * w + x;
                        if input.data[i] > input.data[best] {
                            best = i;
                        }
                    }
                }
                out.push(input.data[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor { shape: vec![c, ho, wo], data: out }, idx))
}

pub fn maxpool2x2_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    for (&i, &v) in argmax.iter().zip(&grad_out.data) {
        g.data[i] += v;
    }
    g
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample2x<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[(ch * h2 + y) * w2 + x] = input.data[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    Ok(Tensor { shape: vec![c, h2, w2], data: out })
}

pub fn upsample2x_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h2, w2) = grad_out.chw()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                g.data[(ch * h + y / 2) * w + x / 2] += grad_out.data[(ch * h2 + y) * w2 + x];
            }
        }
    }
    Ok(g)
}

/// Learned 2× upsampling: nearest-neighbour upsample followed by a
/// same-size convolution.
pub fn upsample2x_conv<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let up = upsample2x(input)?;
    conv2d(&up, kernels, bias, padding)
}

/// Crops a C×H×W tensor to its top-left `h`×`w` window.
pub fn crop<T: Real>(input: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (c, ih, iw) = input.chw()?;
    if h > ih || w > iw {
        return Err(Error::invalid(format!("crop: {h}×{w} exceeds {ih}×{iw}")));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * ih + y) * iw;
            out.extend_from_slice(&input.data[s..s + w]);
        }
    }
    Ok(Tensor { shape: vec![c, h, w], data: out })
}

/// Adjoint of [`crop`]: zero-extends back to `ih`×`iw`.
pub fn crop_backward<T: Real>(grad_out: &Tensor<T>, ih: usize, iw: usize) -> Result<Tensor<T>> {
    let (c, h, w) = grad_out.chw()?;
    let mut g = Tensor::zeros(&[c, ih, iw]);
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * ih + y) * iw;
            g.data[s..s + w].copy_from_slice(&grad_out.data[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    Ok(g)
}

/// Matrix–vector product `W · x` for `W` of shape [m, n] and `x` of shape [n].
pub fn matvec<T: Real>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, n] = w.shape[..] else {
        return Err(Error::invalid(format!("matvec: matrix must be order 2, got {:?}", w.shape)));
    };
    if x.shape != [n] {
        return Err(Error::invalid(format!("matvec: vector shape {:?}, expected [{n}]", x.shape)));
    }
    let data = w.data.chunks(n).map(|row| row.iter().zip(&x.data).map(|(&a, &b)| a * b).sum()).collect();
    Ok(Tensor { shape: vec![m], data })
}

/// Numerically stable softmax over a vector.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let max = x.data.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.data.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Tensor { shape: x.shape.clone(), data: exps.into_iter().map(|e| e / total).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation with zero padding.
    fn conv_oracle(input: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], p: usize) -> Tensor<f64> {
        let (ci, h, w) = input.chw().unwrap();
        let co = k.shape()[0];
        let ks = k.shape()[2];
        let ho = h + 2 * p - ks + 1;
        let wo = w + 2 * p - ks + 1;
        Tensor::from_fn(&[co, ho, wo], |i| {
            let (o, y, x) = (i / (ho * wo), (i / wo) % ho, i % wo);
            let mut acc = b[o];
            for c in 0..ci {
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = y as isize + ky as isize - p as isize;
                        let ix = x as isize + kx as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += k.data()[((o * ci + c) * ks + ky) * ks + kx]
                                * input.data()[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
            acc
        })
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn conv_ones_kernel_counts_neighbours() {
        let input = Tensor::<f32>::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let out = conv2d(&input, &k, Some(&b), Padding::zeros(1)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let input = Tensor::<f32>::zeros(&[2, 4, 5]);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| i as f32 * 0.1);
        let out = conv2d(&input, &k, Some(&Tensor::zeros(&[3])), Padding::zeros(1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_preserves_minworld_extent() {
        let input = Tensor::<f32>::zeros(&[1, 8, 12]);
        let k = Tensor::zeros(&[4, 1, 3, 3]);
        let out = conv2d(&input, &k, None, Padding::zeros(1)).unwrap();
        assert_eq!(out.shape(), &[4, 8, 12]);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let input = Tensor::from_fn(&[3, 5, 7], lcg(1));
        let k = Tensor::from_fn(&[4, 3, 3, 3], lcg(2));
        let b: Vec<f64> = (0..4).map(|i| i as f64 * 0.25 - 0.3).collect();
        let got = conv2d(&input, &k, Some(&Tensor::new(&[4], b.clone()).unwrap()), Padding::zeros(1)).unwrap();
        let want = conv_oracle(&input, &k, &b, 1);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_circular_wraps_taps() {
        // A single 1 at the right border, kernel picking the left neighbour:
        // out[y][x] = in[y][x-1], so with wrap-around the 1 appears at column 0.
        let mut input = Tensor::<f32>::zeros(&[1, 2, 4]);
        input.data_mut()[3] = 1.0;
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[3] = 1.0;
        let p = Padding { width: 1, mode: PaddingMode::Circular };
        let out = conv2d(&input, &k, None, p).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::<f32>::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&input, &k, None, Padding::zeros(1)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn maxpool_cases() {
        let t = Tensor::<f32>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (p, idx) = maxpool2x2(&t).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert_eq!(idx, vec![3]);

        let c = Tensor::<f32>::full(&[2, 8, 12], 0.7);
        let (p, _) = maxpool2x2(&c).unwrap();
        assert_eq!(p.shape(), &[2, 4, 6]);
        assert!(p.data().iter().all(|&v| v == 0.7));

        // odd extents: partial blocks
        let t = Tensor::<f32>::from_fn(&[1, 3, 3], |i| i as f32);
        let (p, _) = maxpool2x2(&t).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2]);
        assert_eq!(p.data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn relu_cases() {
        let t = Tensor::<f32>::new(&[3], vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(relu(&Tensor::<f32>::scalar(-1.0)).data(), &[0.0]);
        let pos = Tensor::<f32>::new(&[2], vec![0.5, 2.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn upsample_conv_cases() {
        let up = upsample2x_conv(
            &Tensor::<f32>::zeros(&[3, 4, 6]),
            &Tensor::zeros(&[2, 3, 3, 3]),
            Some(&Tensor::zeros(&[2])),
            Padding::zeros(1),
        )
        .unwrap();
        assert_eq!(up.shape(), &[2, 8, 12]);
        assert!(up.data().iter().all(|&v| v == 0.0));

        let mut input = Tensor::<f32>::zeros(&[1, 2, 3]);
        input.data_mut()[4] = 2.5; // row 1, col 1
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let out = upsample2x_conv(&input, &k, None, Padding::zeros(1)).unwrap();
        let (_, h, w) = out.chw().unwrap();
        for y in 0..h {
            for x in 0..w {
                let v = out.data()[y * w + x];
                let inside = (2..4).contains(&y) && (2..4).contains(&x);
                assert_eq!(v, if inside { 2.5 } else { 0.0 }, "({y},{x})");
            }
        }
    }

    #[test]
    fn small_pointwise_cases() {
        assert_eq!(sigmoid(&Tensor::<f32>::scalar(0.0)).data(), &[0.5]);
        assert_eq!(tanh(&Tensor::<f32>::scalar(0.0)).data(), &[0.0]);
        let a = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[5, 3, 4], |i| -(i as f32));
        assert_eq!(concat_channels(&a, &b).unwrap().shape(), &[7, 3, 4]);
        assert_eq!(scale(&a, 1.0), a);
        assert!(concat_channels(&a, &Tensor::zeros(&[1, 3, 5])).is_err());
        assert!(add(&a, &b).is_err());
        let (x, y) = split_channels(&concat_channels(&a, &b).unwrap(), 2);
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn softmax_extremes_are_finite() {
        let s = softmax(&Tensor::<f32>::new(&[2], vec![1e4, -1e4]).unwrap());
        assert_eq!(s.data(), &[1.0, 0.0]);
        assert_eq!(sigmoid(&Tensor::<f32>::scalar(-1e4)).data(), &[0.0]);
    }

    #[test]
    fn shape_validation() {
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
