//! Minimal space-time convolutional network with manual backpropagation.
//!
//! Activations are channels-last `(frames, height, width, channels)`;
//! kernels are `[kt][kh][kw][cin][cout]`. Padding is "same" with zeros.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, LinalgScalar};
use num_traits::Float;
use serde::{Deserialize, Serialize};

pub trait Scalar:
    Float + LinalgScalar + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + Default + Send + Sync + std::fmt::Debug + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub activation: bool,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.kt * self.kh * self.kw * self.cin * self.cout
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn voxels(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// Smooth rectifier `0.5 x (1 + x / sqrt(1 + x^2))`.
#[inline]
fn act<S: Scalar>(x: S) -> S {
    let half = S::from(0.5).unwrap();
    let r = (S::one() + x * x).sqrt();
    half * x * (S::one() + x / r)
}

#[inline]
fn act_grad<S: Scalar>(x: S) -> S {
    let half = S::from(0.5).unwrap();
    let r = (S::one() + x * x).sqrt();
    half * (S::one() + x / r + x / (r * r * r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet<S: Scalar> {
    pub specs: Vec<ConvSpec>,
    /// All layers' weights then biases, concatenated layer by layer.
    pub params: Vec<S>,
}

/// Per-layer pre-activation outputs kept for the backward pass.
pub struct Trace<S> {
    inputs: Vec<Vec<S>>,
    pre: Vec<Vec<S>>,
}

impl<S: Scalar> ConvNet<S> {
    pub fn zeros(specs: Vec<ConvSpec>) -> Self {
        let n = specs.iter().map(ConvSpec::param_len).sum();
        Self { specs, params: vec![S::zero(); n] }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.specs.len() + 1);
        let mut acc = 0;
        out.push(0);
        for s in &self.specs {
            acc += s.param_len();
            out.push(acc);
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> ConvNet<T> {
        ConvNet { specs: self.specs.clone(), params: self.params.iter().map(|v| T::from(*v).unwrap()).collect() }
    }

    pub fn output_channels(&self) -> usize {
        self.specs.last().map_or(0, |s| s.cout)
    }

    pub fn forward(&self, input: &[S], grid: Grid) -> Vec<S> {
        let mut x = input.to_vec();
        let offs = self.offsets();
        for (i, spec) in self.specs.iter().enumerate() {
            let p = &self.params[offs[i]..offs[i + 1]];
            let mut y = conv_forward(&x, grid, spec, p);
            if spec.activation {
                y.iter_mut().for_each(|v| *v = act(*v));
            }
            x = y;
        }
        x
    }

    pub fn forward_traced(&self, input: &[S], grid: Grid) -> (Vec<S>, Trace<S>) {
        let mut trace = Trace { inputs: Vec::new(), pre: Vec::new() };
        let mut x = input.to_vec();
        let offs = self.offsets();
        for (i, spec) in self.specs.iter().enumerate() {
            let p = &self.params[offs[i]..offs[i + 1]];
            let pre = conv_forward(&x, grid, spec, p);
            let post = if spec.activation { pre.iter().map(|v| act(*v)).collect() } else { pre.clone() };
            trace.inputs.push(std::mem::replace(&mut x, post));
            trace.pre.push(pre);
        }
        (x, trace)
    }

    /// Accumulates parameter gradients into `grads` given the gradient of
    /// the loss with respect to the network output.
    pub fn backward(&self, trace: &Trace<S>, grad_out: Vec<S>, grid: Grid, grads: &mut [S]) {
        let offs = self.offsets();
        let mut g = grad_out;
        for i in (0..self.specs.len()).rev() {
            let spec = &self.specs[i];
            if spec.activation {
                for (gv, pv) in g.iter_mut().zip(&trace.pre[i]) {
                    *gv *= act_grad(*pv);
                }
            }
            let p = &self.params[offs[i]..offs[i + 1]];
            let gp = &mut grads[offs[i]..offs[i + 1]];
            g = conv_backward(&trace.inputs[i], grid, spec, p, &g, gp, i > 0);
        }
    }
}

/// Gathers every voxel's receptive field into one row of a
/// `(voxels, kt*kh*kw*cin)` matrix, zero outside the grid.
fn im2col<S: Scalar>(input: &[S], grid: Grid, spec: &ConvSpec) -> Array2<S> {
    let Grid { frames, height, width } = grid;
    let ConvSpec { kt, kh, kw, cin, .. } = *spec;
    let k = kt * kh * kw * cin;
    let (pt, ph, pw) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut col = Array2::<S>::zeros((grid.voxels(), k));
    let data = col.as_slice_mut().expect("fresh arrays are contiguous");
    for (v, row) in data.chunks_exact_mut(k).enumerate() {
        let (f, y, x) = (v / (height * width), (v / width) % height, v % width);
        for dt in 0..kt {
            let ff = f as isize + dt as isize - pt;
            if ff < 0 || ff >= frames as isize {
                continue;
            }
            for dy in 0..kh {
                let yy = y as isize + dy as isize - ph;
                if yy < 0 || yy >= height as isize {
                    continue;
                }
                for dx in 0..kw {
                    let xx = x as isize + dx as isize - pw;
                    if xx < 0 || xx >= width as isize {
                        continue;
                    }
                    let i = ((ff as usize * height + yy as usize) * width + xx as usize) * cin;
                    let o = ((dt * kh + dy) * kw + dx) * cin;
                    row[o..o + cin].copy_from_slice(&input[i..i + cin]);
                }
            }
        }
    }
    col
}

/// Scatters row gradients of an im2col matrix back onto the input grid.
fn col2im<S: Scalar>(col: &Array2<S>, grid: Grid, spec: &ConvSpec) -> Vec<S> {
    let Grid { frames, height, width } = grid;
    let ConvSpec { kt, kh, kw, cin, .. } = *spec;
    let k = kt * kh * kw * cin;
    let (pt, ph, pw) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![S::zero(); grid.voxels() * cin];
    let data = col.as_slice().expect("contiguous");
    for (v, row) in data.chunks_exact(k).enumerate() {
        let (f, y, x) = (v / (height * width), (v / width) % height, v % width);
        for dt in 0..kt {
            let ff = f as isize + dt as isize - pt;
            if ff < 0 || ff >= frames as isize {
                continue;
            }
            for dy in 0..kh {
                let yy = y as isize + dy as isize - ph;
                if yy < 0 || yy >= height as isize {
                    continue;
                }
                for dx in 0..kw {
                    let xx = x as isize + dx as isize - pw;
                    if xx < 0 || xx >= width as isize {
                        continue;
                    }
                    let i = ((ff as usize * height + yy as usize) * width + xx as usize) * cin;
                    let o = ((dt * kh + dy) * kw + dx) * cin;
                    for (dst, &g) in out[i..i + cin].iter_mut().zip(&row[o..o + cin]) {
                        *dst += g;
                    }
                }
            }
        }
    }
    out
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kt == 1 && spec.kh == 1 && spec.kw == 1
}

fn conv_forward_gemm<S: Scalar>(input: &[S], grid: Grid, spec: &ConvSpec, params: &[S]) -> Vec<S> {
    let (cin, cout) = (spec.cin, spec.cout);
    let (weights, bias) = params.split_at(spec.weight_len());
    let w = ArrayView2::from_shape((weights.len() / cout, cout), weights).expect("weight shape");
    let mut out = Array2::<S>::zeros((grid.voxels(), cout));
    for mut row in out.rows_mut() {
        row.as_slice_mut().expect("contiguous").copy_from_slice(bias);
    }
    if is_pointwise(spec) {
        let x = ArrayView2::from_shape((grid.voxels(), cin), input).expect("input shape");
        general_mat_mul(S::one(), &x, &w, S::one(), &mut out);
    } else {
        let col = im2col(input, grid, spec);
        general_mat_mul(S::one(), &col, &w, S::one(), &mut out);
    }
    out.into_raw_vec_and_offset().0
}

fn conv_backward_gemm<S: Scalar>(
    input: &[S],
    grid: Grid,
    spec: &ConvSpec,
    params: &[S],
    grad_out: &[S],
    grad_params: &mut [S],
    need_input_grad: bool,
) -> Vec<S> {
    let (cin, cout) = (spec.cin, spec.cout);
    let wlen = spec.weight_len();
    let k = wlen / cout;
    let w = ArrayView2::from_shape((k, cout), &params[..wlen]).expect("weight shape");
    let g = ArrayView2::from_shape((grid.voxels(), cout), grad_out).expect("grad shape");
    let (gw, gb) = grad_params.split_at_mut(wlen);
    for row in g.rows() {
        for (b, &v) in gb.iter_mut().zip(row) {
            *b += v;
        }
    }
    let mut gw = ArrayViewMut2::from_shape((k, cout), gw).expect("weight grad shape");
    if is_pointwise(spec) {
        let x = ArrayView2::from_shape((grid.voxels(), cin), input).expect("input shape");
        general_mat_mul(S::one(), &x.t(), &g, S::one(), &mut gw);
        if !need_input_grad {
            return Vec::new();
        }
        let mut gin = Array2::<S>::zeros((grid.voxels(), cin));
        general_mat_mul(S::one(), &g, &w.t(), S::zero(), &mut gin);
        return gin.into_raw_vec_and_offset().0;
    }
    let col = im2col(input, grid, spec);
    general_mat_mul(S::one(), &col.t(), &g, S::one(), &mut gw);
    if !need_input_grad {
        return Vec::new();
    }
    let mut gcol = Array2::<S>::zeros((grid.voxels(), k));
    general_mat_mul(S::one(), &g, &w.t(), S::zero(), &mut gcol);
    col2im(&gcol, grid, spec)
}

/// Valid `(tap, input voxel)` pairs of voxel `v`, with `tap` indexing the
/// flattened `(kt, kh, kw)` kernel.
#[inline(always)]
fn taps(v: usize, grid: Grid, spec: &ConvSpec, mut visit: impl FnMut(usize, usize)) {
    let Grid { frames, height, width } = grid;
    let (f, y, x) = (v / (height * width), (v / width) % height, v % width);
    let (pt, ph, pw) = ((spec.kt / 2) as isize, (spec.kh / 2) as isize, (spec.kw / 2) as isize);
    for dt in 0..spec.kt {
        let ff = f as isize + dt as isize - pt;
        if ff < 0 || ff >= frames as isize {
            continue;
        }
        for dy in 0..spec.kh {
            let yy = y as isize + dy as isize - ph;
            if yy < 0 || yy >= height as isize {
                continue;
            }
            for dx in 0..spec.kw {
                let xx = x as isize + dx as isize - pw;
                if xx < 0 || xx >= width as isize {
                    continue;
                }
                visit((dt * spec.kh + dy) * spec.kw + dx, (ff as usize * height + yy as usize) * width + xx as usize);
            }
        }
    }
}

#[inline(always)]
fn conv_forward_n<S: Scalar, const N: usize>(input: &[S], grid: Grid, spec: &ConvSpec, params: &[S]) -> Vec<S> {
    let cin = spec.cin;
    let (weights, bias) = params.split_at(spec.weight_len());
    let bias: [S; N] = bias.try_into().expect("bias width");
    let mut out = vec![S::zero(); grid.voxels() * N];
    for (v, dst) in out.chunks_exact_mut(N).enumerate() {
        let mut acc = bias;
        taps(v, grid, spec, |tap, src| {
            let a = &input[src * cin..(src + 1) * cin];
            let w = &weights[tap * cin * N..(tap + 1) * cin * N];
            for (&ai, wrow) in a.iter().zip(w.chunks_exact(N)) {
                let wrow: &[S; N] = wrow.try_into().unwrap();
                for j in 0..N {
                    acc[j] += wrow[j] * ai;
                }
            }
        });
        dst.copy_from_slice(&acc);
    }
    out
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv_backward_n<S: Scalar, const N: usize>(
    input: &[S],
    grid: Grid,
    spec: &ConvSpec,
    params: &[S],
    grad_out: &[S],
    grad_params: &mut [S],
    need_input_grad: bool,
) -> Vec<S> {
    let cin = spec.cin;
    let wlen = spec.weight_len();
    let weights = &params[..wlen];
    let (gw, gb) = grad_params.split_at_mut(wlen);
    let mut grad_in = if need_input_grad { vec![S::zero(); input.len()] } else { Vec::new() };
    let mut bias_acc = [S::zero(); N];
    for (v, g) in grad_out.chunks_exact(N).enumerate() {
        let g: &[S; N] = g.try_into().unwrap();
        for j in 0..N {
            bias_acc[j] += g[j];
        }
        taps(v, grid, spec, |tap, src| {
            let a = &input[src * cin..(src + 1) * cin];
            let base = tap * cin * N;
            for (ci, &ai) in a.iter().enumerate() {
                let row: &mut [S; N] = (&mut gw[base + ci * N..base + (ci + 1) * N]).try_into().unwrap();
                for j in 0..N {
                    row[j] += ai * g[j];
                }
            }
            if need_input_grad {
                let gi = &mut grad_in[src * cin..(src + 1) * cin];
                for (ci, dst) in gi.iter_mut().enumerate() {
                    let w: &[S; N] = weights[base + ci * N..base + (ci + 1) * N].try_into().unwrap();
                    let mut dot = S::zero();
                    for j in 0..N {
                        dot += w[j] * g[j];
                    }
                    *dst += dot;
                }
            }
        });
    }
    for (b, v) in gb.iter_mut().zip(bias_acc) {
        *b += v;
    }
    grad_in
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use super::*;

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn forward<S: Scalar, const N: usize>(
        input: &[S],
        grid: Grid,
        spec: &ConvSpec,
        params: &[S],
    ) -> Vec<S> {
        conv_forward_n::<S, N>(input, grid, spec, params)
    }

    #[target_feature(enable = "avx2")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn backward<S: Scalar, const N: usize>(
        input: &[S],
        grid: Grid,
        spec: &ConvSpec,
        params: &[S],
        grad_out: &[S],
        grad_params: &mut [S],
        need_input_grad: bool,
    ) -> Vec<S> {
        conv_backward_n::<S, N>(input, grid, spec, params, grad_out, grad_params, need_input_grad)
    }
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

macro_rules! dispatch {
    ($n:literal, $portable:ident, $fast:ident, ($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2, checked at runtime.
            return unsafe { avx::$fast::<S, $n>($($arg),*) };
        }
        $portable::<S, $n>($($arg),*)
    }};
}

macro_rules! by_width {
    ($cout:expr, $portable:ident, $fast:ident, $fallback:ident, ($($arg:expr),*)) => {
        match $cout {
            3 => dispatch!(3, $portable, $fast, ($($arg),*)),
            4 => dispatch!(4, $portable, $fast, ($($arg),*)),
            8 => dispatch!(8, $portable, $fast, ($($arg),*)),
            12 => dispatch!(12, $portable, $fast, ($($arg),*)),
            16 => dispatch!(16, $portable, $fast, ($($arg),*)),
            24 => dispatch!(24, $portable, $fast, ($($arg),*)),
            32 => dispatch!(32, $portable, $fast, ($($arg),*)),
            _ => $fallback($($arg),*),
        }
    };
}

fn conv_forward<S: Scalar>(input: &[S], grid: Grid, spec: &ConvSpec, params: &[S]) -> Vec<S> {
    by_width!(spec.cout, conv_forward_n, forward, conv_forward_gemm, (input, grid, spec, params))
}

/// Returns the gradient with respect to the layer input (empty when
/// `need_input_grad` is false) and accumulates into `grad_params`.
fn conv_backward<S: Scalar>(
    input: &[S],
    grid: Grid,
    spec: &ConvSpec,
    params: &[S],
    grad_out: &[S],
    grad_params: &mut [S],
    need_input_grad: bool,
) -> Vec<S> {
    by_width!(
        spec.cout,
        conv_backward_n,
        backward,
        conv_backward_gemm,
        (input, grid, spec, params, grad_out, grad_params, need_input_grad)
    )
}
