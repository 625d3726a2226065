//! Eager forward kernels and the adjoint helpers the tape reuses.

use super::scalar::{gemm, MatRef};
use super::{NumError, Scalar, Tensor};

fn shape_err(msg: String) -> NumError {
    NumError::Shape(msg)
}

/// `[..., k] · [k, n] -> [..., n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    if b.rank() != 2 {
        return Err(shape_err(format!("matmul rhs must be rank 2, got {:?}", b.shape())));
    }
    let k = *a.shape().last().unwrap();
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let m = a.numel() / k;
    let mut out = vec![T::zero(); m * n];
    gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, false);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

/// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ` with
/// `trans_b`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>, NumError> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(shape_err(format!("bmm operands {:?}, {:?}", a.shape(), b.shape())));
    }
    let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (br, bc) = (b.shape()[1], b.shape()[2]);
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(shape_err(format!(
            "bmm inner extents differ: {:?} · {:?} (trans_b={trans_b})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let am = MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
        let mut bm = MatRef::new(&b.data()[i * br * bc..(i + 1) * br * bc], br, bc);
        if trans_b {
            bm = bm.t();
        }
        gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], false);
    }
    Ok(Tensor::from_parts(vec![batch, m, n], out))
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumError> {
    if axis >= x.rank() {
        return Err(NumError::Axis { axis, rank: x.rank() });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(src[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                total = total + e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn log_softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let len = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(len) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>, NumError> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err(format!("invalid permutation {perm:?} for rank {rank}")));
    }
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], strides[last]);
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(a, b)| a * b).sum();
        for j in 0..last_len {
            out.push(src[base + j * last_stride]);
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return Ok(Tensor::from_parts(out_shape, out));
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a batched 2-D convolution with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, NumError> {
        if x_shape.len() != 4 || w_shape.len() != 4 || x_shape[1] != w_shape[1] {
            return Err(shape_err(format!("conv2d operands {x_shape:?}, kernel {w_shape:?}")));
        }
        if stride == 0 {
            return Err(NumError::Invalid("convolution stride must be positive".into()));
        }
        let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(NumError::KernelTooLong { kernel: kh.max(kw), input: h.min(w) + 2 * pad });
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { batch, c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.h_out * self.w_out
    }
}

/// Unfolds input patches into a `[c_in·kh·kw, batch·h_out·w_out]` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let plane = g.h_out * g.w_out;
    let mut cols = vec![T::zero(); g.patch() * ncols];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.c_in + c) * g.h * g.w..(b * g.c_in + c + 1) * g.h * g.w];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[b * plane + oy * g.w_out..b * plane + (oy + 1) * g.w_out];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let plane = g.h_out * g.w_out;
    let mut x = vec![T::zero(); g.batch * g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.c_in + c) * g.h * g.w..(b * g.c_in + c + 1) * g.h * g.w];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let d = &mut dst[iy as usize * g.w + ix as usize];
                                *d = *d + src[b * plane + oy * g.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Batched cross-correlation `[B, C_in, H, W] ⋆ [C_out, C_in, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NumError> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(shape_err(format!("conv bias {:?} for {} outputs", b.shape(), g.c_out)));
        }
    }
    let cols = im2col(x.data(), &g);
    let ncols = g.cols();
    let mut prod = vec![T::zero(); g.c_out * ncols];
    gemm(
        MatRef::new(w.data(), g.c_out, g.patch()),
        MatRef::new(&cols, g.patch(), ncols),
        &mut prod,
        false,
    );
    let plane = g.h_out * g.w_out;
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    for co in 0..g.c_out {
        let bv = bias.map(|b| b.data()[co]).unwrap_or_else(T::zero);
        for b in 0..g.batch {
            let src = &prod[co * ncols + b * plane..co * ncols + (b + 1) * plane];
            let dst = &mut out[(b * g.c_out + co) * plane..(b * g.c_out + co + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.c_out, g.h_out, g.w_out], out))
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let plane = g.h_out * g.w_out;
    let ncols = g.cols();
    // [B, C_out, P] -> [C_out, B·P]
    let mut g2 = vec![T::zero(); g.c_out * ncols];
    let mut dbias = vec![T::zero(); g.c_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let src = &grad.data()[(b * g.c_out + co) * plane..(b * g.c_out + co + 1) * plane];
            g2[co * ncols + b * plane..co * ncols + (b + 1) * plane].copy_from_slice(src);
            dbias[co] = dbias[co] + src.iter().copied().sum::<T>();
        }
    }
    let cols = im2col(x.data(), &g);
    let mut dw = vec![T::zero(); g.c_out * g.patch()];
    gemm(
        MatRef::new(&g2, g.c_out, ncols),
        MatRef::new(&cols, g.patch(), ncols).t(),
        &mut dw,
        false,
    );
    let dx = need_x.then(|| {
        let mut dcols = vec![T::zero(); g.patch() * ncols];
        gemm(
            MatRef::new(w.data(), g.c_out, g.patch()).t(),
            MatRef::new(&g2, g.c_out, ncols),
            &mut dcols,
            false,
        );
        col2im(&dcols, &g)
    });
    (dx, dw, dbias)
}

/// Valid-padding 1-D cross-correlation. `x` is `[C_in, L]` or `[B, C_in, L]`,
/// kernels `[C_out, C_in, K]`; output length is `floor((L−K)/stride)+1`.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, stride: usize) -> Result<Tensor<T>, NumError> {
    let (x4, w4, out_shape) = conv1d_as_2d(x.shape(), kernels.shape(), stride)?;
    let y = conv2d(&x.reshape(&x4)?, &kernels.reshape(&w4)?, None, stride, 0)?;
    y.reshape(&out_shape)
}

/// Shapes that embed a 1-D convolution into a height-1 2-D one.
pub(crate) fn conv1d_as_2d(
    x: &[usize],
    k: &[usize],
    stride: usize,
) -> Result<([usize; 4], [usize; 4], Vec<usize>), NumError> {
    if k.len() != 3 {
        return Err(shape_err(format!("conv1d kernels must be [C_out, C_in, K], got {k:?}")));
    }
    let (batch, c_in, len, batched) = match x {
        [c, l] => (1, *c, *l, false),
        [b, c, l] => (*b, *c, *l, true),
        _ => return Err(shape_err(format!("conv1d signal must be rank 2 or 3, got {x:?}"))),
    };
    if c_in != k[1] {
        return Err(shape_err(format!("conv1d channels: signal {x:?}, kernels {k:?}")));
    }
    if k[2] > len {
        return Err(NumError::KernelTooLong { kernel: k[2], input: len });
    }
    if stride == 0 {
        return Err(NumError::Invalid("convolution stride must be positive".into()));
    }
    let l_out = (len - k[2]) / stride + 1;
    let out = if batched { vec![batch, k[0], l_out] } else { vec![k[0], l_out] };
    Ok(([batch, c_in, 1, len], [k[0], k[1], 1, k[2]], out))
}

/// Nearest-neighbour ×2 upsampling of `[B, C, H, W]`.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    if x.rank() != 4 {
        return Err(shape_err(format!("upsample expects [B, C, H, W], got {:?}", x.shape())));
    }
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let planes = s[0] * s[1];
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out))
}

pub(crate) fn upsample2x_backward<T: Scalar>(grad: &Tensor<T>, in_shape: &[usize]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let planes = in_shape[0] * in_shape[1];
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &grad.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * 2 * w + xx];
            }
        }
    }
    out
}

/// tanh approximation of GELU and its derivative.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    let th = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * dinner
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
