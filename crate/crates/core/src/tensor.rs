//! Dense `f32` tensors and the handful of kernels the detector needs.
//!
//! Images use `[channels, height, width]`, convolution kernels use
//! `[out_channels, in_channels, k_height, k_width]`. All data is row-major.
//! Every kernel here accumulates in a fixed order, so results are
//! bit-reproducible across calls.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        validate_shape(&shape).expect("tensor shape");
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        validate_shape(&shape).expect("tensor shape");
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::InvalidShape(format!(
                "expected a [C,H,W] tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape(format!(
            "tensor order must be 1..=4, got {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Elementwise nonlinearity. `Linear` is the identity and is what a conv layer
/// without an activation uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    LeakyRelu(f32),
    Sigmoid,
    Tanh,
    Abs,
    Clamp01,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu(alpha) => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Abs => x.abs(),
            Activation::Clamp01 => x.clamp(0.0, 1.0),
        }
    }

    /// d(apply)/dx evaluated at the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Linear => 1.0,
            Activation::LeakyRelu(alpha) => {
                if x >= 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Activation::Clamp01 => {
                if x > 0.0 && x < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Stable text form used by the FNET descriptor grammar.
    pub fn name(self) -> String {
        match self {
            Activation::Linear => "linear".into(),
            Activation::LeakyRelu(alpha) => format!("leaky_relu:{alpha}"),
            Activation::Sigmoid => "sigmoid".into(),
            Activation::Tanh => "tanh".into(),
            Activation::Abs => "abs".into(),
            Activation::Clamp01 => "clamp01".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "linear" => Activation::Linear,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "abs" => Activation::Abs,
            "clamp01" => Activation::Clamp01,
            other => {
                let alpha = other.strip_prefix("leaky_relu:")?.parse::<f32>().ok()?;
                if !alpha.is_finite() {
                    return None;
                }
                Activation::LeakyRelu(alpha)
            }
        })
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn pointwise(input: &Tensor, act: Activation) -> Tensor {
    input.map(|x| act.apply(x))
}

/// Gradient of [`pointwise`] with respect to its input.
pub fn pointwise_backward(pre: &Tensor, grad_out: &Tensor, act: Activation) -> Tensor {
    debug_assert_eq!(pre.shape(), grad_out.shape());
    Tensor {
        shape: pre.shape.clone(),
        data: pre
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| g * act.derivative(x))
            .collect(),
    }
}

/// Output extent of a convolution along one axis, or `None` if it would be
/// non-positive.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = extent + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (in_c, in_h, in_w) = input.dims3()?;
        let (out_c, k_in, kh, kw) = match kernel.shape()[..] {
            [f, c, kh, kw] => (f, c, kh, kw),
            _ => {
                return Err(Error::InvalidShape(format!(
                    "kernel must be [F,C,kh,kw], got {:?}",
                    kernel.shape()
                )))
            }
        };
        if k_in != in_c {
            return Err(Error::shape(
                "conv2d kernel in-channels vs input channels",
                kernel.shape(),
                input.shape(),
            ));
        }
        let out_h = conv_out_extent(in_h, kh, stride, pad);
        let out_w = conv_out_extent(in_w, kw, stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::InvalidShape(format!(
                "conv2d output extent is not positive: input {:?}, kernel {:?}, stride {stride}, pad {pad}",
                input.shape(),
                kernel.shape()
            )));
        };
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            out_h,
            out_w,
            stride,
            pad,
        })
    }

    /// Range of output columns whose input column `ox*stride + kx - pad`
    /// lands inside the image.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        valid_range(self.in_w, self.out_w, kx, self.stride, self.pad)
    }

    #[inline]
    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        valid_range(self.in_h, self.out_h, ky, self.stride, self.pad)
    }
}

#[inline]
fn valid_range(in_extent: usize, out_extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k - pad < in_extent
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_extent + pad > k {
        ((in_extent + pad - k - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation (no kernel flip) plus bias.
///
/// Each output element is `bias[f]` followed by the products accumulated in
/// `(c, ky, kx)` order.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &[f32], stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, stride, pad)?;
    if bias.len() != g.out_c {
        return Err(Error::shape("conv2d bias", &[bias.len()], &[g.out_c]));
    }
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0f32; g.out_c * plane];
    let x = input.data();
    let k = kernel.data();

    for f in 0..g.out_c {
        let out_plane = &mut out[f * plane..(f + 1) * plane];
        out_plane.fill(bias[f]);
        for c in 0..g.in_c {
            let in_plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_rows(ky);
                for kx in 0..g.kw {
                    let w = k[((f * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    let (ox_lo, ox_hi) = g.valid_cols(kx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let in_row = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let out_row = &mut out_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let n = ox_hi - ox_lo;
                            let src = &in_row[ix0..ix0 + n];
                            for (o, &v) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o += w * v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                out_row[ox] += w * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.out_c, g.out_h, g.out_w], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Vec<f32>,
}

/// Dot product with eight independent partial sums so the compiler can
/// vectorize it; the summation order is still fixed.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    want_input_grad: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, kernel, stride, pad)?;
    if grad_out.shape() != [g.out_c, g.out_h, g.out_w] {
        return Err(Error::shape(
            "conv2d_backward upstream gradient",
            grad_out.shape(),
            &[g.out_c, g.out_h, g.out_w],
        ));
    }
    let plane = g.out_h * g.out_w;
    let in_plane_len = g.in_h * g.in_w;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();

    let bias: Vec<f32> = (0..g.out_c)
        .map(|f| go[f * plane..(f + 1) * plane].iter().sum())
        .collect();

    let mut gk = vec![0.0f32; kernel.len()];
    for f in 0..g.out_c {
        let go_plane = &go[f * plane..(f + 1) * plane];
        for c in 0..g.in_c {
            let in_plane = &x[c * in_plane_len..(c + 1) * in_plane_len];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_rows(ky);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = g.valid_cols(kx);
                    let mut acc = 0.0f32;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let in_row = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let go_row = &go_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let n = ox_hi.saturating_sub(ox_lo);
                            acc += dot(&go_row[ox_lo..ox_lo + n], &in_row[ix0..ix0 + n]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc += go_row[ox] * in_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                    gk[((f * g.in_c + c) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }

    let input_grad = if want_input_grad {
        let mut gi = vec![0.0f32; input.len()];
        for c in 0..g.in_c {
            let gi_plane = &mut gi[c * in_plane_len..(c + 1) * in_plane_len];
            for f in 0..g.out_c {
                let go_plane = &go[f * plane..(f + 1) * plane];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = g.valid_rows(ky);
                    for kx in 0..g.kw {
                        let w = k[((f * g.in_c + c) * g.kh + ky) * g.kw + kx];
                        let (ox_lo, ox_hi) = g.valid_cols(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let gi_row = &mut gi_plane[iy * g.in_w..(iy + 1) * g.in_w];
                            let go_row = &go_plane[oy * g.out_w..(oy + 1) * g.out_w];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                let n = ox_hi - ox_lo;
                                for (d, &s) in gi_row[ix0..ix0 + n].iter_mut().zip(&go_row[ox_lo..ox_hi]) {
                                    *d += w * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    gi_row[ox * g.stride + kx - g.pad] += w * go_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(Tensor::new(input.shape().to_vec(), gi)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        kernel: Tensor::new(kernel.shape().to_vec(), gk)?,
        bias,
    })
}

/// 2×2 max pooling with stride 2.
pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "maxpool2 needs even height and width, got {:?}",
            input.shape()
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let r0 = base + 2 * oy * w;
            let r1 = r0 + w;
            for ox in 0..ow {
                let i = 2 * ox;
                out.push(x[r0 + i].max(x[r0 + i + 1]).max(x[r1 + i]).max(x[r1 + i + 1]));
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Routes each upstream gradient to the first maximal element of its window
/// (scan order: top-left, top-right, bottom-left, bottom-right).
pub fn maxpool2_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = (h / 2, w / 2);
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::shape("maxpool2_backward", grad_out.shape(), &[c, oh, ow]));
    }
    let x = input.data();
    let go = grad_out.data();
    let mut gi = vec![0.0f32; input.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let cand = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                gi[best] += go[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), gi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::full(vec![1, 3, 3], 1.0);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &k, &[0.0], 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn diagonal_kernel_sums_plus_bias() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d(&x, &k, &[0.5], 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.5]);
    }

    #[test]
    fn strided_padded_shape() {
        let x = Tensor::zeros(vec![3, 8, 8]);
        let k = Tensor::zeros(vec![4, 3, 3, 3]);
        let y = conv2d(&x, &k, &[0.0; 4], 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
    }

    #[test]
    fn conv_matches_naive_loop_with_padding_and_stride() {
        let x = Tensor::from_fn(vec![2, 7, 5], |i| ((i * 37) % 11) as f32 * 0.1 - 0.5);
        let k = Tensor::from_fn(vec![3, 2, 3, 3], |i| ((i * 13) % 7) as f32 * 0.2 - 0.6);
        let bias = [0.1, -0.2, 0.3];
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let y = conv2d(&x, &k, &bias, stride, pad).unwrap();
            let (_, oh, ow) = y.dims3().unwrap();
            for f in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[f] as f64;
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 7 || ix >= 5 {
                                        continue;
                                    }
                                    let xv = x.data()[(c * 7 + iy as usize) * 5 + ix as usize];
                                    let kv = k.data()[((f * 2 + c) * 3 + ky) * 3 + kx];
                                    acc += (xv * kv) as f64;
                                }
                            }
                        }
                        let got = y.data()[(f * oh + oy) * ow + ox];
                        assert!((got as f64 - acc).abs() < 1e-5, "stride {stride} pad {pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(vec![2, 4, 4]);
        let k = Tensor::zeros(vec![1, 3, 1, 1]);
        let err = conv2d(&x, &k, &[0.0], 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 1, 1]") && msg.contains("[2, 4, 4]"), "{msg}");

        let k = Tensor::zeros(vec![1, 2, 5, 5]);
        assert!(conv2d(&x, &k, &[0.0], 1, 0).is_err());
    }

    #[test]
    fn activations() {
        let zeros = Tensor::zeros(vec![4]);
        assert!(pointwise(&zeros, Activation::Sigmoid).data().iter().all(|&v| v == 0.5));
        let x = t(&[2], &[-1.0, 2.0]);
        assert_eq!(pointwise(&x, Activation::LeakyRelu(0.1)).data(), &[-0.1, 2.0]);
        let x = t(&[2], &[-0.3, 0.3]);
        assert_eq!(pointwise(&x, Activation::Abs).data(), &[0.3, 0.3]);
        let x = t(&[3], &[-0.5, 0.5, 1.5]);
        assert_eq!(pointwise(&x, Activation::Clamp01).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn activation_names_round_trip() {
        for act in [
            Activation::Linear,
            Activation::LeakyRelu(0.1),
            Activation::Sigmoid,
            Activation::Tanh,
            Activation::Abs,
            Activation::Clamp01,
        ] {
            assert_eq!(Activation::parse(&act.name()), Some(act));
        }
        assert_eq!(Activation::parse("relu6"), None);
    }

    #[test]
    fn maxpool_windows() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2(&x).unwrap().data(), &[4.0]);

        let c = Tensor::full(vec![2, 6, 4], 0.25);
        assert_eq!(maxpool2(&c).unwrap(), Tensor::full(vec![2, 3, 2], 0.25));

        let x = Tensor::from_fn(vec![1, 4, 4], |i| (i + 1) as f32);
        assert_eq!(maxpool2(&x).unwrap().data(), &[6.0, 8.0, 14.0, 16.0]);

        assert!(maxpool2(&Tensor::zeros(vec![1, 3, 4])).is_err());
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
    }
}
