//! Minimal dense layers with hand-written backward passes.
//!
//! Tensors are NCHW and contiguous. Convolutions lower to im2col plus a
//! single-threaded GEMM, so results are bit-reproducible for a fixed input.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Scalar type the network can run in. `f32` for training, `f64` for
/// finite-difference checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe matrices of the stated shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `c (+)= op(a) * op(b)` where `op` optionally
/// transposes. `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Real>(
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub data: Vec<F>,
    /// `[n, c, h, w]`
    pub shape: [usize; 4],
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            data: vec![F::zero(); shape.iter().product()],
            shape,
        }
    }

    pub fn from_vec(data: Vec<F>, shape: [usize; 4]) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "tensor shape mismatch");
        Self { data, shape }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per image.
    pub fn image_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn image(&self, n: usize) -> &[F] {
        let len = self.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [F] {
        let len = self.image_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            data: self.data.iter().map(|v| G::from_f64_lossy(v.as_f64())).collect(),
            shape: self.shape,
        }
    }
}

/// A trainable array together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub shape: Vec<usize>,
}

impl<F: Real> Param<F> {
    pub fn new(value: Vec<F>, shape: Vec<usize>) -> Self {
        assert_eq!(value.len(), shape.iter().product::<usize>());
        let grad = vec![F::zero(); value.len()];
        Self { value, grad, shape }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Something that owns named parameters.
pub trait Parameterized<F: Real> {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>);
    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>);

    fn named_params(&self) -> Vec<(String, &Param<F>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out = Vec::new();
        self.visit_params_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    /// `[out, in, k, k]`
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Saved im2col buffers for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    input: Vec<F>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let wlen = out_channels * in_channels * kernel * kernel;
        Self {
            weight: Param::new(vec![F::zero(); wlen], vec![out_channels, in_channels, kernel, kernel]),
            bias: Param::new(vec![F::zero(); out_channels], vec![out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Normal weights with the given standard deviation and a constant bias.
    pub fn init_normal<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64, bias: f64) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in &mut self.weight.value {
            *w = F::from_f64_lossy(normal.sample(rng));
        }
        for b in &mut self.bias.value {
            *b = F::from_f64_lossy(bias);
        }
    }

    /// He initialisation for a layer followed by ReLU.
    pub fn init_kaiming<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        self.init_normal(rng, (2.0 / fan_in).sqrt(), 0.0);
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[F], h: usize, w: usize, cols: &mut [F]) {
        let (ho, wo) = self.output_hw(h, w);
        let p = ho * wo;
        let k = self.kernel;
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                F::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[F], h: usize, w: usize, x: &mut [F]) {
        let (ho, wo) = self.output_hw(h, w);
        let p = ho * wo;
        let k = self.kernel;
        for ci in 0..self.in_channels {
            let plane = &mut x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Forward pass; returns a cache only when `keep_cache` is set. The cache
    /// holds the input, and columns are rebuilt in the backward pass.
    pub fn forward(&self, x: &Tensor<F>, keep_cache: bool) -> (Tensor<F>, Option<ConvCache<F>>) {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (ho, wo) = self.output_hw(h, w);
        let p = ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, self.out_channels, ho, wo]);
        let direct = self.is_direct();
        let mut scratch = if direct { Vec::new() } else { vec![F::zero(); kdim * p] };
        for i in 0..n {
            let col: &[F] = if direct {
                x.image(i)
            } else {
                self.im2col(x.image(i), h, w, &mut scratch);
                &scratch
            };
            let y = out.image_mut(i);
            for (o, b) in self.bias.value.iter().enumerate() {
                y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = *b);
            }
            matmul(&self.weight.value, false, col, false, y, self.out_channels, kdim, p, true);
        }
        let cache = keep_cache.then(|| ConvCache {
            input: x.data.clone(),
            in_shape: x.shape,
            out_hw: (ho, wo),
        });
        (out, cache)
    }

    fn is_direct(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// requested.
    pub fn backward(&mut self, cache: &ConvCache<F>, grad_out: &Tensor<F>, need_input_grad: bool) -> Option<Tensor<F>> {
        let [n, c, h, w] = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let p = ho * wo;
        assert_eq!(grad_out.shape, [n, self.out_channels, ho, wo]);
        let kdim = self.in_channels * self.kernel * self.kernel;
        let direct = self.is_direct();
        let mut grad_in = need_input_grad.then(|| Tensor::zeros(cache.in_shape));
        let (mut cols, mut gcols) = if direct {
            (Vec::new(), Vec::new())
        } else {
            (vec![F::zero(); kdim * p], vec![F::zero(); if need_input_grad { kdim * p } else { 0 }])
        };
        let plane = c * h * w;
        for i in 0..n {
            let gy = grad_out.image(i);
            let x = &cache.input[i * plane..(i + 1) * plane];
            let col: &[F] = if direct {
                x
            } else {
                self.im2col(x, h, w, &mut cols);
                &cols
            };
            for o in 0..self.out_channels {
                let s: F = gy[o * p..(o + 1) * p].iter().copied().sum();
                self.bias.grad[o] = self.bias.grad[o] + s;
            }
            matmul(gy, false, col, true, &mut self.weight.grad, self.out_channels, p, kdim, true);
            if let Some(gx) = grad_in.as_mut() {
                if direct {
                    matmul(&self.weight.value, true, gy, false, gx.image_mut(i), kdim, self.out_channels, p, false);
                } else {
                    matmul(&self.weight.value, true, gy, false, &mut gcols, kdim, self.out_channels, p, false);
                    self.col2im(&gcols, h, w, gx.image_mut(i));
                }
            }
        }
        grad_in
    }
}

impl<F: Real> Parameterized<F> for Conv2d<F> {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

pub(crate) fn prefixed(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

pub fn relu_inplace<F: Real>(t: &mut Tensor<F>) {
    t.data.iter_mut().for_each(|v| {
        if *v < F::zero() {
            *v = F::zero()
        }
    });
}

/// Masks `grad` by the ReLU output it flows back through.
pub fn relu_backward_inplace<F: Real>(grad: &mut Tensor<F>, output: &Tensor<F>) {
    for (g, y) in grad.data.iter_mut().zip(&output.data) {
        if *y <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = x.shape;
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(grad: &Tensor<F>) -> Tensor<F> {
    let [n, c, h2, w2] = grad.shape;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &grad.data[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut out.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                let d = &mut dst[(y / 2) * w + x / 2];
                *d = *d + src[y * w2 + x];
            }
        }
    }
    out
}
