//! Forward numeric kernels.
//!
//! Pure functions from tensors to tensors, with no differentiation state.
//! The tape in [`crate::tape`] wraps these for reverse-mode gradients; tests
//! also call them directly as an independent forward route.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{LabelVolume, Tensor, NUM_CLASSES};

/// `c[m,n] = sum_k a[m,k] * b[k,n]`, row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
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

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// Channel-wise projection of a 4D stack: `c[i,j,k,m] = sum_n b[i,j,k,n] w[n,m]`.
pub fn matmul_4d<T: Scalar>(b: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let bs = b.shape();
    let ws = w.shape();
    if bs.len() != 4 || ws.len() != 2 || bs[3] != ws[0] {
        return Err(shape_err("matmul_4d", bs, ws));
    }
    let rows = bs[0] * bs[1] * bs[2];
    let (c_in, c_out) = (ws[0], ws[1]);
    let mut out = vec![T::ZERO; rows * c_out];
    gemm_into(
        rows,
        c_in,
        c_out,
        b.data(),
        c_in as isize,
        1,
        w.data(),
        c_out as isize,
        1,
        T::ZERO,
        &mut out,
    );
    Tensor::from_vec(&[bs[0], bs[1], bs[2], c_out], out)
}

/// Plain 2D matmul; `transpose_b` multiplies by `b^T` without copying.
pub fn matmul_2d<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, transpose_b: bool) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 {
        return Err(shape_err("matmul_2d", ash, bsh));
    }
    let (m, k) = (ash[0], ash[1]);
    let (n, rsb, csb) = if transpose_b {
        if bsh[1] != k {
            return Err(shape_err("matmul_2d", ash, bsh));
        }
        (bsh[0], 1isize, bsh[1] as isize)
    } else {
        if bsh[0] != k {
            return Err(shape_err("matmul_2d", ash, bsh));
        }
        (bsh[1], bsh[1] as isize, 1isize)
    };
    let mut out = vec![T::ZERO; m * n];
    gemm_into(
        m,
        k,
        n,
        a.data(),
        k as isize,
        1,
        b.data(),
        rsb,
        csb,
        T::ZERO,
        &mut out,
    );
    Tensor::from_vec(&[m, n], out)
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * s).collect();
    Tensor::from_vec(x.shape(), data).expect("scale keeps shape")
}

/// Elementwise product with a fixed (non-differentiated) coefficient array.
pub fn mul_const<T: Scalar>(x: &Tensor<T>, coeff: &[T]) -> Result<Tensor<T>> {
    if x.numel() != coeff.len() {
        return Err(shape_err("mul_const", x.shape(), &[coeff.len()]));
    }
    let data = x
        .data()
        .iter()
        .zip(coeff)
        .map(|(&a, &c)| a * c)
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().copied().fold(T::ZERO, |a, v| a + v);
    Tensor::scalar(total)
}

/// Adds a per-channel bias: `x[..., c] + b[c]`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap();
    if b.shape() != [c] {
        return Err(shape_err("add_bias", x.shape(), b.shape()));
    }
    let bd = b.data();
    let data = x
        .data()
        .chunks_exact(c)
        .flat_map(|row| row.iter().zip(bd).map(|(&v, &bias)| v + bias))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Adds a positional term of shape `l x 1 x 1 x c`, broadcast over `h, w`.
pub fn add_pe<T: Scalar>(x: &Tensor<T>, pe: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 || pe.shape() != [xs[0], 1, 1, xs[3]] {
        return Err(shape_err("add_pe", xs, pe.shape()));
    }
    let (l, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let mut data = x.data().to_vec();
    for slice in 0..l {
        let pe_row = &pe.data()[slice * c..(slice + 1) * c];
        let base = slice * h * w * c;
        for pix in 0..h * w {
            let off = base + pix * c;
            for ch in 0..c {
                data[off + ch] += pe_row[ch];
            }
        }
    }
    Tensor::from_vec(xs, data)
}

// ---------------------------------------------------------------------------
// Activations and normalization
// ---------------------------------------------------------------------------

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF via the error function.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut data = vec![T::ZERO; x.numel()];
    let half = x.numel() / 2;
    par2_map(x.data(), half, &mut data, half, 2, |xs, out| {
        for (o, &v) in out.iter_mut().zip(xs) {
            *o = gelu_scalar(v);
        }
    });
    Tensor::from_vec(x.shape(), data).expect("gelu keeps shape")
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v >= T::ZERO { v } else { v * slope })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("leaky_relu keeps shape")
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::usage(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut data = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = data[base];
            for j in 1..n {
                m = m.max(data[base + j * inner]);
            }
            let mut total = T::ZERO;
            for j in 0..n {
                let e = (data[base + j * inner] - m).exp();
                data[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                data[base + j * inner] /= total;
            }
        }
    }
    Tensor::from_vec(shape, data)
}

/// Per-group normalization statistics retained for the backward pass.
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes each slice over all of `h, w, c`, then applies a per-channel affine.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(shape_err("layer_norm", xs, &[]));
    }
    let c = xs[3];
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(shape_err("layer_norm", gain.shape(), bias.shape()));
    }
    let (l, group) = (xs[0], xs[1] * xs[2] * xs[3]);
    let mut data = vec![T::ZERO; x.numel()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(l),
        inv_std: Vec::with_capacity(l),
    };
    let inv_n = T::ONE / T::from_usize(group);
    let (gd, bd) = (gain.data(), bias.data());
    for s in 0..l {
        let xs_slice = &x.data()[s * group..(s + 1) * group];
        let mean = xs_slice.iter().copied().fold(T::ZERO, |a, v| a + v) * inv_n;
        let var = xs_slice
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(T::ZERO, |a, v| a + v)
            * inv_n;
        let inv_std = T::ONE / (var + eps).sqrt();
        stats.mean.push(mean);
        stats.inv_std.push(inv_std);
        let out_slice = &mut data[s * group..(s + 1) * group];
        for (out_row, in_row) in out_slice.chunks_exact_mut(c).zip(xs_slice.chunks_exact(c)) {
            for ch in 0..c {
                out_row[ch] = (in_row[ch] - mean) * inv_std * gd[ch] + bd[ch];
            }
        }
    }
    Ok((Tensor::from_vec(xs, data)?, stats))
}

/// Normalizes per slice and per channel over `h x w`, then applies the affine.
pub fn instance_norm2d<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(shape_err("instance_norm2d", xs, &[]));
    }
    let (l, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(shape_err("instance_norm2d", gain.shape(), bias.shape()));
    }
    let hw = h * w;
    let inv_n = T::ONE / T::from_usize(hw);
    let mut data = vec![T::ZERO; x.numel()];
    let mut stats = NormStats {
        mean: vec![T::ZERO; l * c],
        inv_std: vec![T::ZERO; l * c],
    };
    let (gd, bd) = (gain.data(), bias.data());
    let mut sums = vec![T::ZERO; c];
    let mut sq = vec![T::ZERO; c];
    for s in 0..l {
        let xslice = &x.data()[s * hw * c..(s + 1) * hw * c];
        sums.iter_mut().for_each(|v| *v = T::ZERO);
        sq.iter_mut().for_each(|v| *v = T::ZERO);
        for row in xslice.chunks_exact(c) {
            for ch in 0..c {
                sums[ch] += row[ch];
                sq[ch] += row[ch] * row[ch];
            }
        }
        let stat_row = s * c;
        for ch in 0..c {
            let mean = sums[ch] * inv_n;
            let var = (sq[ch] * inv_n - mean * mean).max(T::ZERO);
            stats.mean[stat_row + ch] = mean;
            stats.inv_std[stat_row + ch] = T::ONE / (var + eps).sqrt();
        }
        let out_slice = &mut data[s * hw * c..(s + 1) * hw * c];
        for (out_row, in_row) in out_slice.chunks_exact_mut(c).zip(xslice.chunks_exact(c)) {
            for ch in 0..c {
                let mean = stats.mean[stat_row + ch];
                let inv = stats.inv_std[stat_row + ch];
                out_row[ch] = (in_row[ch] - mean) * inv * gd[ch] + bd[ch];
            }
        }
    }
    Ok((Tensor::from_vec(xs, data)?, stats))
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

/// Mean over non-overlapping `k x k` windows, per slice and channel.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(shape_err("avg_pool2d", xs, &[]));
    }
    let (l, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::config(format!(
            "avg_pool2d: spatial dims {h}x{w} not divisible by kernel {k}"
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let inv = T::ONE / T::from_usize(k * k);
    let mut data = vec![T::ZERO; l * ho * wo * c];
    for s in 0..l {
        for oy in 0..ho {
            for ox in 0..wo {
                let out_off = ((s * ho + oy) * wo + ox) * c;
                let out_row = &mut data[out_off..out_off + c];
                for dy in 0..k {
                    let in_row = ((s * h + oy * k + dy) * w + ox * k) * c;
                    let in_span = &x.data()[in_row..in_row + k * c];
                    for window in in_span.chunks_exact(c) {
                        for (o, &v) in out_row.iter_mut().zip(window) {
                            *o += v;
                        }
                    }
                }
                for o in out_row {
                    *o *= inv;
                }
            }
        }
    }
    Tensor::from_vec(&[l, ho, wo, c], data)
}

/// Nearest-neighbor 2x upscale.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(shape_err("upsample2x", xs, &[]));
    }
    let (l, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let mut data = vec![T::ZERO; l * 4 * h * w * c];
    for s in 0..l {
        for y in 0..h {
            for x_ in 0..w {
                let src = ((s * h + y) * w + x_) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = ((s * 2 * h + 2 * y + dy) * 2 * w + 2 * x_ + dx) * c;
                    data[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
        }
    }
    Tensor::from_vec(&[l, 2 * h, 2 * w, c], data)
}

pub(crate) fn conv2d_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if stride == 0 || hp < kh || wp < kw {
        return Err(Error::config(format!(
            "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{w}"
        )));
    }
    Ok(((hp - kh) / stride + 1, (wp - kw) / stride + 1))
}

/// Work is split in half over the slice axis when a kernel's output exceeds
/// this element count; the split depends only on the shape, so results do not
/// depend on scheduling.
pub(crate) const PAR_MIN_ELEMS: usize = 1 << 14;

/// Runs `f` over two disjoint input/output regions on two threads.
pub(crate) fn par2_map<T, F>(
    input: &[T],
    in_chunk: usize,
    out: &mut [T],
    out_chunk: usize,
    units: usize,
    f: F,
) where
    T: Send + Sync,
    F: Fn(&[T], &mut [T]) + Sync,
{
    if units < 2 || out.len() < PAR_MIN_ELEMS {
        f(input, out);
        return;
    }
    let mid = units / 2;
    let (ia, ib) = input.split_at(mid * in_chunk);
    let (oa, ob) = out.split_at_mut(mid * out_chunk);
    std::thread::scope(|s| {
        s.spawn(|| f(ia, oa));
        f(ib, ob);
    });
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub(crate) l: usize,
    pub(crate) h: usize,
    pub(crate) w: usize,
    pub(crate) c_in: usize,
    pub(crate) kh: usize,
    pub(crate) kw: usize,
    pub(crate) c_out: usize,
    pub(crate) stride: usize,
    pub(crate) pad: usize,
    pub(crate) ho: usize,
    pub(crate) wo: usize,
}

/// Forward pass with the output-channel count fixed at compile time, so the
/// accumulator tile stays in registers.
fn conv2d_fixed<T: Scalar, const CO: usize>(
    xd: &[T],
    kd: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    out: &mut [T],
) {
    debug_assert_eq!(d.c_out, CO);
    let mut init = [T::ZERO; CO];
    if let Some(b) = bias {
        init.copy_from_slice(b);
    }
    for s in 0..d.l {
        for oy in 0..d.ho {
            let iy0 = (oy * d.stride) as isize - d.pad as isize;
            let ky_lo = (-iy0).clamp(0, d.kh as isize) as usize;
            let ky_hi = (d.h as isize - iy0).clamp(0, d.kh as isize) as usize;
            for ox in 0..d.wo {
                let ix0 = (ox * d.stride) as isize - d.pad as isize;
                let kx_lo = (-ix0).clamp(0, d.kw as isize) as usize;
                let kx_hi = (d.w as isize - ix0).clamp(0, d.kw as isize) as usize;
                let mut acc = init;
                for ky in ky_lo..ky_hi {
                    let iy = (iy0 + ky as isize) as usize;
                    let xrow = (s * d.h + iy) * d.w * d.c_in;
                    for kx in kx_lo..kx_hi {
                        let ix = (ix0 + kx as isize) as usize;
                        let xv = &xd[xrow + ix * d.c_in..][..d.c_in];
                        let kbase = (ky * d.kw + kx) * d.c_in * CO;
                        let ktap = &kd[kbase..kbase + d.c_in * CO];
                        for (krow, &a) in ktap.chunks_exact(CO).zip(xv) {
                            for co in 0..CO {
                                acc[co] += a * krow[co];
                            }
                        }
                    }
                }
                let dst = ((s * d.ho + oy) * d.wo + ox) * CO;
                out[dst..dst + CO].copy_from_slice(&acc);
            }
        }
    }
}

fn conv2d_dispatch<T: Scalar>(xd: &[T], kd: &[T], bias: Option<&[T]>, d: &ConvDims, out: &mut [T]) {
    match d.c_out {
        1 => conv2d_fixed::<T, 1>(xd, kd, bias, d, out),
        2 => conv2d_fixed::<T, 2>(xd, kd, bias, d, out),
        3 => conv2d_fixed::<T, 3>(xd, kd, bias, d, out),
        4 => conv2d_fixed::<T, 4>(xd, kd, bias, d, out),
        6 => conv2d_fixed::<T, 6>(xd, kd, bias, d, out),
        8 => conv2d_fixed::<T, 8>(xd, kd, bias, d, out),
        16 => conv2d_fixed::<T, 16>(xd, kd, bias, d, out),
        32 => conv2d_fixed::<T, 32>(xd, kd, bias, d, out),
        64 => conv2d_fixed::<T, 64>(xd, kd, bias, d, out),
        _ => conv2d_generic(xd, kd, bias, d, out),
    }
}

fn conv2d_generic<T: Scalar>(xd: &[T], kd: &[T], bias: Option<&[T]>, d: &ConvDims, out: &mut [T]) {
    let c_out = d.c_out;
    let mut acc = vec![T::ZERO; c_out];
    for s in 0..d.l {
        for oy in 0..d.ho {
            let iy0 = (oy * d.stride) as isize - d.pad as isize;
            for ox in 0..d.wo {
                let ix0 = (ox * d.stride) as isize - d.pad as isize;
                match bias {
                    Some(b) => acc.copy_from_slice(b),
                    None => acc.iter_mut().for_each(|v| *v = T::ZERO),
                }
                for ky in 0..d.kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let xrow = (s * d.h + iy as usize) * d.w * d.c_in;
                    for kx in 0..d.kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let xv = &xd[xrow + ix as usize * d.c_in..][..d.c_in];
                        let kbase = (ky * d.kw + kx) * d.c_in * c_out;
                        for (ci, &a) in xv.iter().enumerate() {
                            let krow = &kd[kbase + ci * c_out..][..c_out];
                            for (o, &kv) in acc.iter_mut().zip(krow) {
                                *o += a * kv;
                            }
                        }
                    }
                }
                let dst = ((s * d.ho + oy) * d.wo + ox) * c_out;
                out[dst..dst + c_out].copy_from_slice(&acc);
            }
        }
    }
}

/// Zero-padded cross-correlation; the slice axis is a pure batch axis.
///
/// `kernel` has layout `kh x kw x c_in x c_out`. Direct accumulation over
/// taps: with channels innermost every tap touches one contiguous input run
/// and one contiguous kernel row, so the pass reads the input exactly once
/// instead of materializing patch matrices.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
        return Err(shape_err("conv2d", xs, ks));
    }
    let (l, h, w, c_in) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, c_out) = (ks[0], ks[1], ks[3]);
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err("conv2d bias", b.shape(), &[c_out]));
        }
    }
    let (ho, wo) = conv2d_out_dims(h, w, kh, kw, stride, pad)?;
    let d = ConvDims { l, h, w, c_in, kh, kw, c_out, stride, pad, ho, wo };
    let mut out = vec![T::ZERO; l * ho * wo * c_out];
    let kd = kernel.data();
    let bd = bias.map(|b| b.data());
    par2_map(
        x.data(),
        h * w * c_in,
        &mut out,
        ho * wo * c_out,
        l,
        |x_part, out_part| {
            let dd = ConvDims { l: out_part.len() / (ho * wo * c_out), ..d };
            conv2d_dispatch(x_part, kd, bd, &dd, out_part);
        },
    );
    Tensor::from_vec(&[l, ho, wo, c_out], out)
}

/// Valid output-column range for a tap: `ox` such that
/// `ox * stride + kx - pad` lands inside `[0, w)`.
fn tap_ox_range(kx: usize, w: usize, wo: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi_unclamped = (w + pad - kx - 1) / stride + 1;
    (lo.min(wo), hi_unclamped.min(wo))
}

fn conv2d_grad_input_fixed<T: Scalar, const CI: usize>(g: &[T], kd: &[T], d: &ConvDims) -> Vec<T> {
    debug_assert_eq!(d.c_in, CI);
    let taps = d.kh * d.kw;
    let c_out = d.c_out;
    // transpose the kernel to (tap, co, ci) so the per-output-channel update
    // is a contiguous axpy over ci
    let mut kt = vec![T::ZERO; taps * c_out * CI];
    for tap in 0..taps {
        for ci in 0..CI {
            for co in 0..c_out {
                kt[(tap * c_out + co) * CI + ci] = kd[(tap * CI + ci) * c_out + co];
            }
        }
    }
    // gather form: every input pixel accumulates from the output pixels whose
    // windows cover it, so the accumulator tile stays in registers
    let mut dx = vec![T::ZERO; d.l * d.h * d.w * CI];
    for s in 0..d.l {
        for iy in 0..d.h {
            let mut oys = [usize::MAX; 16];
            debug_assert!(d.kh <= 16);
            for (ky, slot) in oys.iter_mut().enumerate().take(d.kh) {
                let t = iy as isize + d.pad as isize - ky as isize;
                if t >= 0 && (t as usize) % d.stride == 0 && (t as usize) / d.stride < d.ho {
                    *slot = (t as usize) / d.stride;
                }
            }
            let dx_row = &mut dx[(s * d.h + iy) * d.w * CI..][..d.w * CI];
            for ix in 0..d.w {
                let mut acc = [T::ZERO; CI];
                for ky in 0..d.kh {
                    let oy = oys[ky];
                    if oy == usize::MAX {
                        continue;
                    }
                    let g_row = &g[((s * d.ho + oy) * d.wo) * c_out..][..d.wo * c_out];
                    if d.stride == 1 {
                        // ox = ix + pad - kx stays in range for a contiguous kx band
                        let kx_lo = (ix + d.pad + 1).saturating_sub(d.wo).min(d.kw);
                        let kx_hi = (ix + d.pad + 1).min(d.kw);
                        let mut ox = ix + d.pad - kx_lo;
                        for kx in kx_lo..kx_hi {
                            let grow = &g_row[ox * c_out..][..c_out];
                            let ktap = &kt[(ky * d.kw + kx) * c_out * CI..][..c_out * CI];
                            for (krow, &gv) in ktap.chunks_exact(CI).zip(grow) {
                                for ci in 0..CI {
                                    acc[ci] += gv * krow[ci];
                                }
                            }
                            ox -= 1;
                        }
                    } else {
                        for kx in 0..d.kw {
                            let u = ix as isize + d.pad as isize - kx as isize;
                            if u < 0 || (u as usize) % d.stride != 0 {
                                continue;
                            }
                            let ox = (u as usize) / d.stride;
                            if ox >= d.wo {
                                continue;
                            }
                            let grow = &g_row[ox * c_out..][..c_out];
                            let ktap = &kt[(ky * d.kw + kx) * c_out * CI..][..c_out * CI];
                            for (krow, &gv) in ktap.chunks_exact(CI).zip(grow) {
                                for ci in 0..CI {
                                    acc[ci] += gv * krow[ci];
                                }
                            }
                        }
                    }
                }
                dx_row[ix * CI..(ix + 1) * CI].copy_from_slice(&acc);
            }
        }
    }
    dx
}

fn conv2d_grad_input_generic<T: Scalar>(g: &[T], kd: &[T], d: &ConvDims) -> Vec<T> {
    let c_in = d.c_in;
    let c_out = d.c_out;
    let mut dx = vec![T::ZERO; d.l * d.h * d.w * c_in];
    for s in 0..d.l {
        for oy in 0..d.ho {
            let iy0 = (oy * d.stride) as isize - d.pad as isize;
            for ox in 0..d.wo {
                let ix0 = (ox * d.stride) as isize - d.pad as isize;
                let grow = &g[((s * d.ho + oy) * d.wo + ox) * c_out..][..c_out];
                for ky in 0..d.kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let xrow = (s * d.h + iy as usize) * d.w * c_in;
                    for kx in 0..d.kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let dxv = &mut dx[xrow + ix as usize * c_in..][..c_in];
                        let kbase = (ky * d.kw + kx) * c_in * c_out;
                        for (ci, dv) in dxv.iter_mut().enumerate() {
                            let krow = &kd[kbase + ci * c_out..][..c_out];
                            let mut dot = T::ZERO;
                            for (&kv, &gv) in krow.iter().zip(grow) {
                                dot += kv * gv;
                            }
                            *dv += dot;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv2d`] with respect to its input.
pub(crate) fn conv2d_grad_input<T: Scalar>(g: &[T], kd: &[T], d: &ConvDims) -> Vec<T> {
    let mut dx = vec![T::ZERO; d.l * d.h * d.w * d.c_in];
    par2_map(
        g,
        d.ho * d.wo * d.c_out,
        &mut dx,
        d.h * d.w * d.c_in,
        d.l,
        |g_part, dx_part| {
            let dd = ConvDims { l: dx_part.len() / (d.h * d.w * d.c_in), ..*d };
            let part = conv2d_grad_input_serial(g_part, kd, &dd);
            dx_part.copy_from_slice(&part);
        },
    );
    dx
}

fn conv2d_grad_input_serial<T: Scalar>(g: &[T], kd: &[T], d: &ConvDims) -> Vec<T> {
    match d.c_in {
        1 => conv2d_grad_input_fixed::<T, 1>(g, kd, d),
        2 => conv2d_grad_input_fixed::<T, 2>(g, kd, d),
        3 => conv2d_grad_input_fixed::<T, 3>(g, kd, d),
        4 => conv2d_grad_input_fixed::<T, 4>(g, kd, d),
        6 => conv2d_grad_input_fixed::<T, 6>(g, kd, d),
        8 => conv2d_grad_input_fixed::<T, 8>(g, kd, d),
        12 => conv2d_grad_input_fixed::<T, 12>(g, kd, d),
        16 => conv2d_grad_input_fixed::<T, 16>(g, kd, d),
        24 => conv2d_grad_input_fixed::<T, 24>(g, kd, d),
        32 => conv2d_grad_input_fixed::<T, 32>(g, kd, d),
        48 => conv2d_grad_input_fixed::<T, 48>(g, kd, d),
        64 => conv2d_grad_input_fixed::<T, 64>(g, kd, d),
        96 => conv2d_grad_input_fixed::<T, 96>(g, kd, d),
        128 => conv2d_grad_input_fixed::<T, 128>(g, kd, d),
        _ => conv2d_grad_input_generic(g, kd, d),
    }
}

fn conv2d_grad_kernel_fixed<T: Scalar, const CO: usize>(g: &[T], xd: &[T], d: &ConvDims) -> Vec<T> {
    debug_assert_eq!(d.c_out, CO);
    let c_in = d.c_in;
    let mut dk = vec![T::ZERO; d.kh * d.kw * c_in * CO];
    // per output row and tap, reduce over the row into a register tile before
    // touching the kernel-gradient buffer
    for s in 0..d.l {
        for oy in 0..d.ho {
            let g_row = &g[((s * d.ho + oy) * d.wo) * CO..][..d.wo * CO];
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let x_row = &xd[(s * d.h + iy as usize) * d.w * c_in..][..d.w * c_in];
                for kx in 0..d.kw {
                    let (ox_lo, ox_hi) = tap_ox_range(kx, d.w, d.wo, d.stride, d.pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix0 = ox_lo * d.stride + kx - d.pad;
                    let dtap = &mut dk[(ky * d.kw + kx) * c_in * CO..][..c_in * CO];
                    for ci in 0..c_in {
                        let mut acc = [T::ZERO; CO];
                        let mut ix = ix0;
                        for ox in ox_lo..ox_hi {
                            let a = x_row[ix * c_in + ci];
                            let grow = &g_row[ox * CO..][..CO];
                            for co in 0..CO {
                                acc[co] += a * grow[co];
                            }
                            ix += d.stride;
                        }
                        let drow = &mut dtap[ci * CO..][..CO];
                        for co in 0..CO {
                            drow[co] += acc[co];
                        }
                    }
                }
            }
        }
    }
    dk
}

fn conv2d_grad_kernel_generic<T: Scalar>(g: &[T], xd: &[T], d: &ConvDims) -> Vec<T> {
    let c_in = d.c_in;
    let co = d.c_out;
    let mut dk = vec![T::ZERO; d.kh * d.kw * c_in * co];
    for s in 0..d.l {
        for oy in 0..d.ho {
            let iy0 = (oy * d.stride) as isize - d.pad as isize;
            for ox in 0..d.wo {
                let ix0 = (ox * d.stride) as isize - d.pad as isize;
                let grow = &g[((s * d.ho + oy) * d.wo + ox) * co..][..co];
                for ky in 0..d.kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let xrow = (s * d.h + iy as usize) * d.w * c_in;
                    for kx in 0..d.kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let xv = &xd[xrow + ix as usize * c_in..][..c_in];
                        let kbase = (ky * d.kw + kx) * c_in * co;
                        let dtap = &mut dk[kbase..kbase + c_in * co];
                        for (drow, &a) in dtap.chunks_exact_mut(co).zip(xv) {
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += a * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub(crate) fn conv2d_grad_kernel<T: Scalar>(g: &[T], xd: &[T], d: &ConvDims) -> Vec<T> {
    if d.l >= 2 && g.len() >= PAR_MIN_ELEMS {
        // halve over slices; the two partial sums are combined in a fixed
        // order so the result only depends on the shape
        let mid = d.l / 2;
        let (ga, gb) = g.split_at(mid * d.ho * d.wo * d.c_out);
        let (xa, xb) = xd.split_at(mid * d.h * d.w * d.c_in);
        let da = ConvDims { l: mid, ..*d };
        let db = ConvDims { l: d.l - mid, ..*d };
        let (mut ka, kb) = std::thread::scope(|s| {
            let handle = s.spawn(|| conv2d_grad_kernel_serial(ga, xa, &da));
            let kb = conv2d_grad_kernel_serial(gb, xb, &db);
            (handle.join().expect("conv grad worker"), kb)
        });
        for (a, b) in ka.iter_mut().zip(kb) {
            *a += b;
        }
        return ka;
    }
    conv2d_grad_kernel_serial(g, xd, d)
}

fn conv2d_grad_kernel_serial<T: Scalar>(g: &[T], xd: &[T], d: &ConvDims) -> Vec<T> {
    match d.c_out {
        1 => conv2d_grad_kernel_fixed::<T, 1>(g, xd, d),
        2 => conv2d_grad_kernel_fixed::<T, 2>(g, xd, d),
        3 => conv2d_grad_kernel_fixed::<T, 3>(g, xd, d),
        4 => conv2d_grad_kernel_fixed::<T, 4>(g, xd, d),
        6 => conv2d_grad_kernel_fixed::<T, 6>(g, xd, d),
        8 => conv2d_grad_kernel_fixed::<T, 8>(g, xd, d),
        12 => conv2d_grad_kernel_fixed::<T, 12>(g, xd, d),
        16 => conv2d_grad_kernel_fixed::<T, 16>(g, xd, d),
        24 => conv2d_grad_kernel_fixed::<T, 24>(g, xd, d),
        32 => conv2d_grad_kernel_fixed::<T, 32>(g, xd, d),
        48 => conv2d_grad_kernel_fixed::<T, 48>(g, xd, d),
        64 => conv2d_grad_kernel_fixed::<T, 64>(g, xd, d),
        96 => conv2d_grad_kernel_fixed::<T, 96>(g, xd, d),
        128 => conv2d_grad_kernel_fixed::<T, 128>(g, xd, d),
        _ => conv2d_grad_kernel_generic(g, xd, d),
    }
}

/// Mean per-voxel cross entropy; also returns the softmax probabilities.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    target: &LabelVolume,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ls = logits.shape();
    let ts = target.shape();
    if ls.len() != 4 || ls[3] != NUM_CLASSES || ls[0] != ts[0] || ls[1] != ts[1] || ls[2] != ts[2] {
        return Err(shape_err("cross_entropy", ls, &ts));
    }
    let voxels = ts[0] * ts[1] * ts[2];
    let mut probs = vec![T::ZERO; logits.numel()];
    let mut loss = T::ZERO;
    for (v, (chunk, &label)) in logits
        .data()
        .chunks_exact(NUM_CLASSES)
        .zip(target.data())
        .enumerate()
    {
        let m = chunk.iter().copied().fold(chunk[0], T::max);
        let mut total = T::ZERO;
        for (j, &z) in chunk.iter().enumerate() {
            let e = (z - m).exp();
            probs[v * NUM_CLASSES + j] = e;
            total += e;
        }
        let lse = m + total.ln();
        for j in 0..NUM_CLASSES {
            probs[v * NUM_CLASSES + j] /= total;
        }
        loss += lse - chunk[label as usize];
    }
    loss /= T::from_usize(voxels);
    Ok((Tensor::scalar(loss), Tensor::from_vec(ls, probs)?))
}

/// Per-voxel argmax over the class axis; ties go to the lowest class index.
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>) -> Result<LabelVolume> {
    let ls = logits.shape();
    if ls.len() != 4 || ls[3] != NUM_CLASSES {
        return Err(shape_err("predict_mask", ls, &[NUM_CLASSES]));
    }
    let data = logits
        .data()
        .chunks_exact(NUM_CLASSES)
        .map(|chunk| {
            let mut best = 0u8;
            for (j, &v) in chunk.iter().enumerate().skip(1) {
                if v > chunk[best as usize] {
                    best = j as u8;
                }
            }
            best
        })
        .collect();
    LabelVolume::new([ls[0], ls[1], ls[2]], data)
}

/// Concatenates along the channel (last) axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::usage("concat_channels: empty input"))?;
    let lead = &first.shape()[..3];
    let mut c_total = 0;
    for p in parts {
        if p.shape().len() != 4 || &p.shape()[..3] != lead {
            return Err(shape_err("concat_channels", first.shape(), p.shape()));
        }
        c_total += p.shape()[3];
    }
    let rows: usize = lead.iter().product();
    let mut data = vec![T::ZERO; rows * c_total];
    let mut off = 0;
    for p in parts {
        let pc = p.shape()[3];
        for r in 0..rows {
            data[r * c_total + off..r * c_total + off + pc]
                .copy_from_slice(&p.data()[r * pc..(r + 1) * pc]);
        }
        off += pc;
    }
    Tensor::from_vec(&[lead[0], lead[1], lead[2], c_total], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_4d_identity() {
        let b = t4(&[1, 1, 1, 2], vec![1.0, 2.0]);
        let eye = t4(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let c = matmul_4d(&b, &eye).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_4d_hand_evaluated() {
        let b = t4(&[1, 1, 1, 2], vec![1.0, 2.0]);
        let w = t4(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = matmul_4d(&b, &w).unwrap();
        assert_eq!(c.data(), &[7.0, 10.0]);
    }

    #[test]
    fn matmul_4d_zeros_and_errors() {
        let b = t4(&[2, 1, 2, 3], vec![0.0; 12]);
        let w = t4(&[3, 4], (0..12).map(|v| v as f64).collect());
        let c = matmul_4d(&b, &w).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(c.shape(), &[2, 1, 2, 4]);

        let bad = matmul_4d(&b, &t4(&[4, 2], vec![0.0; 8]));
        let msg = format!("{}", bad.unwrap_err());
        assert!(msg.contains("[2, 1, 2, 3]") && msg.contains("[4, 2]"));
    }

    #[test]
    fn softmax_examples() {
        let x = t4(&[2], vec![0.0, 0.0]);
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);

        let x = t4(&[3], vec![1.0, 1.0, 1.0]);
        let y = softmax(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // e^0 = 1 and e^{ln 3} = 3 normalize to 1/4, 3/4.
        let x = t4(&[2], vec![0.0, 3.0f64.ln()]);
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_examples() {
        let x = t4(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.5]);

        let y = avg_pool2d(&x, 1).unwrap();
        assert_eq!(y.data(), x.data());

        let x = t4(&[1, 4, 4, 1], vec![7.0; 16]);
        let y = avg_pool2d(&x, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-15));

        assert!(avg_pool2d(&t4(&[1, 3, 4, 1], vec![0.0; 12]), 2).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // Phi(1) from the standard normal CDF.
        assert!((gelu_scalar(1.0f64) - 0.841344746068543).abs() < 1e-12);
        assert!(gelu_scalar(-20.0f64).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_examples() {
        let x = t4(&[3], vec![2.0, -1.0, 0.0]);
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y.data(), &[2.0, -0.01, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let gain = t4(&[1], vec![1.0]);
        let bias = t4(&[1], vec![0.0]);

        let x = t4(&[1, 2, 2, 1], vec![3.0; 4]);
        let (y, _) = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));

        // Values {1,3}: mean 2, population std 1.
        let x = t4(&[1, 2, 1, 1], vec![1.0, 3.0]);
        let (y, _) = layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);

        let gain0 = t4(&[1], vec![0.0]);
        let bias5 = t4(&[1], vec![5.0]);
        let x = t4(&[1, 2, 2, 1], vec![0.5, 9.0, -3.0, 2.0]);
        let (y, _) = layer_norm(&x, &gain0, &bias5, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn instance_norm_examples() {
        let gain = t4(&[1], vec![1.0]);
        let bias = t4(&[1], vec![0.0]);

        let x = t4(&[1, 2, 2, 1], vec![4.0; 4]);
        let (y, _) = instance_norm2d(&x, &gain, &bias, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));

        // Channel values {0,2}: mean 1, population std 1.
        let x = t4(&[1, 2, 1, 1], vec![0.0, 2.0]);
        let (y, _) = instance_norm2d(&x, &gain, &bias, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);

        let gain0 = t4(&[1], vec![0.0]);
        let bias5 = t4(&[1], vec![5.0]);
        let x = t4(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, _) = instance_norm2d(&x, &gain0, &bias5, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn conv2d_examples() {
        // 1x1 kernel of weight 1 is the identity.
        let x = t4(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let k = t4(&[1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());

        // 3x3 all-ones kernel over all-ones 5x5 input: center output is 9.
        let x = t4(&[1, 5, 5, 1], vec![1.0; 25]);
        let k = t4(&[3, 3, 1, 1], vec![1.0; 9]);
        let y = conv2d(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5, 1]);
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], 4.0); // corner sees a 2x2 window

        let k0 = t4(&[3, 3, 1, 2], vec![0.0; 18]);
        let y = conv2d(&x, &k0, None, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // channel mismatch
        let bad = conv2d(&x, &t4(&[3, 3, 2, 1], vec![0.0; 18]), None, 1, 1);
        assert!(bad.is_err());
    }

    #[test]
    fn conv2d_stride2_shape() {
        let x = t4(&[1, 8, 8, 1], vec![0.0; 64]);
        let k = t4(&[3, 3, 1, 2], vec![0.0; 18]);
        let y = conv2d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 2]);
    }

    #[test]
    fn upsample_examples() {
        let x = t4(&[1, 1, 1, 1], vec![3.5]);
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert!(y.data().iter().all(|&v| v == 3.5));

        let x = t4(&[3, 4, 4, 2], (0..96).map(|v| v as f64).collect());
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8, 2]);
        // pooling back recovers the input exactly
        let back = avg_pool2d(&y, 2).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn cross_entropy_examples() {
        let target = LabelVolume::new([1, 1, 2], vec![0, 2]).unwrap();

        let logits = t4(&[1, 1, 2, 3], vec![0.0; 6]);
        let (loss, _) = cross_entropy(&logits, &target).unwrap();
        assert!((loss.data()[0] - 3.0f64.ln()).abs() < 1e-12);

        let logits = t4(&[1, 1, 2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]);
        let (loss, _) = cross_entropy(&logits, &target).unwrap();
        assert!(loss.data()[0] < 1e-12);

        // shift invariance per voxel
        let logits_a = t4(&[1, 1, 2, 3], vec![0.3, -0.7, 1.1, 2.0, 0.0, -1.0]);
        let logits_b = t4(
            &[1, 1, 2, 3],
            vec![0.3 + 5.0, -0.7 + 5.0, 1.1 + 5.0, 2.0 - 3.0, 0.0 - 3.0, -1.0 - 3.0],
        );
        let (la, _) = cross_entropy(&logits_a, &target).unwrap();
        let (lb, _) = cross_entropy(&logits_b, &target).unwrap();
        assert!((la.data()[0] - lb.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn predict_mask_examples() {
        let logits = t4(&[1, 1, 2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let mask = predict_mask(&logits).unwrap();
        assert_eq!(mask.data(), &[1, 0]); // argmax, tie broken to class 0

        let shifted = t4(&[1, 1, 2, 3], vec![2.0, 3.0, 2.0, -1.0, -1.0, -1.0]);
        assert_eq!(predict_mask(&shifted).unwrap().data(), mask.data());
    }

    #[test]
    fn concat_channel_layout() {
        let a = t4(&[1, 1, 2, 1], vec![1.0, 2.0]);
        let b = t4(&[1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 1, 2, 3]);
        assert_eq!(c.data(), &[1.0, 10.0, 20.0, 2.0, 30.0, 40.0]);
    }
}
