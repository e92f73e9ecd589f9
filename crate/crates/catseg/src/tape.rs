//! Reverse-mode differentiation tape.
//!
//! Operations executed through a [`Tape`] record enough state to replay
//! backward in exact reverse execution order. A tape and its in-flight graph
//! stay on one thread; the tensors it produces are plain values.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, NormStats};
use crate::scalar::Scalar;
use crate::tensor::{LabelVolume, Tensor, NUM_CLASSES};

/// Handle to a node on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    MulConst { x: Var, coeff: Arc<Vec<T>> },
    Sum { x: Var },
    AddBias { x: Var, bias: Var },
    AddPe { x: Var, pe: Var },
    Matmul4d { x: Var, w: Var },
    Matmul2d { a: Var, b: Var, transpose_b: bool },
    Reshape { x: Var },
    Softmax { x: Var, axis: usize },
    Gelu { x: Var },
    LeakyRelu { x: Var, slope: T },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: NormStats<T> },
    InstanceNorm { x: Var, gain: Var, bias: Var, stats: NormStats<T> },
    AvgPool { x: Var, k: usize },
    Upsample2x { x: Var },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize },
    CrossEntropy { logits: Var, target: Arc<LabelVolume>, probs: Tensor<T> },
    ConcatC { parts: Vec<Var> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Registers an input; gradient tracking follows the tensor's flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Registers an input that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // -- forward wrappers ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        value.debug_check_finite("add");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        value.debug_check_finite("mul");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = ops::scale(self.value(x), s);
        value.debug_check_finite("scale");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, s }, rg)
    }

    pub fn mul_const(&mut self, x: Var, coeff: Arc<Vec<T>>) -> Result<Var> {
        let value = ops::mul_const(self.value(x), &coeff)?;
        value.debug_check_finite("mul_const");
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst { x, coeff }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = ops::sum(self.value(x));
        value.debug_check_finite("sum");
        let rg = self.rg(x);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = ops::add_bias(self.value(x), self.value(bias))?;
        value.debug_check_finite("add_bias");
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    pub fn add_pe(&mut self, x: Var, pe: Var) -> Result<Var> {
        let value = ops::add_pe(self.value(x), self.value(pe))?;
        value.debug_check_finite("add_pe");
        let rg = self.rg(x) || self.rg(pe);
        Ok(self.push(value, Op::AddPe { x, pe }, rg))
    }

    pub fn matmul_4d(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = ops::matmul_4d(self.value(x), self.value(w))?;
        value.debug_check_finite("matmul_4d");
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Matmul4d { x, w }, rg))
    }

    pub fn matmul_2d(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let value = ops::matmul_2d(self.value(a), self.value(b), transpose_b)?;
        value.debug_check_finite("matmul_2d");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul2d { a, b, transpose_b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::softmax(self.value(x), axis)?;
        value.debug_check_finite("softmax");
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = ops::gelu(self.value(x));
        value.debug_check_finite("gelu");
        let rg = self.rg(x);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = ops::leaky_relu(self.value(x), slope);
        value.debug_check_finite("leaky_relu");
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (value, stats) = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        value.debug_check_finite("layer_norm");
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, stats }, rg))
    }

    pub fn instance_norm2d(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (value, stats) =
            ops::instance_norm2d(self.value(x), self.value(gain), self.value(bias), eps)?;
        value.debug_check_finite("instance_norm2d");
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::InstanceNorm { x, gain, bias, stats }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = ops::avg_pool2d(self.value(x), k)?;
        value.debug_check_finite("avg_pool2d");
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool { x, k }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let value = ops::upsample2x(self.value(x))?;
        value.debug_check_finite("upsample2x");
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample2x { x }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = ops::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        value.debug_check_finite("conv2d");
        let rg = self.rg(x) || self.rg(kernel) || bias.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(value, Op::Conv2d { x, kernel, bias, stride, pad }, rg))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: Arc<LabelVolume>) -> Result<Var> {
        let (value, probs) = ops::cross_entropy(self.value(logits), &target)?;
        value.debug_check_finite("cross_entropy");
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, target, probs }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat_channels(&tensors)?;
        value.debug_check_finite("concat_channels");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatC { parts: parts.to_vec() }, rg))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Returns one gradient per node
    /// that requires gradients and is reachable from the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].as_ref() {
                Some(g) if self.nodes[i].requires_grad => g.clone(),
                _ => continue,
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.iter().zip(bv.data()).map(|(&gv, &b)| gv * b).collect();
                let db = g.iter().zip(av.data()).map(|(&gv, &a)| gv * a).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, g.iter().map(|&gv| gv * *s).collect());
            }
            Op::MulConst { x, coeff } => {
                let dx = g.iter().zip(coeff.iter()).map(|(&gv, &c)| gv * c).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::AddBias { x, bias } => {
                let c = self.value(*bias).numel();
                let mut db = vec![T::ZERO; c];
                for row in g.chunks_exact(c) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *x, g.to_vec());
                self.accumulate(grads, *bias, db);
            }
            Op::AddPe { x, pe } => {
                let xs = self.value(*x).shape();
                let (l, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
                let mut dpe = vec![T::ZERO; l * c];
                for s in 0..l {
                    for pix in 0..hw {
                        let off = (s * hw + pix) * c;
                        for ch in 0..c {
                            dpe[s * c + ch] += g[off + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, g.to_vec());
                self.accumulate(grads, *pe, dpe);
            }
            Op::Matmul4d { x, w } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let rows = xs[0] * xs[1] * xs[2];
                let (c_in, c_out) = (ws[0], ws[1]);
                if self.rg(*x) {
                    let mut dx = vec![T::ZERO; rows * c_in];
                    // dX = dC (rows x c_out) @ W^T
                    ops::gemm_into(
                        rows,
                        c_out,
                        c_in,
                        g,
                        c_out as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        c_out as isize,
                        T::ZERO,
                        &mut dx,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::ZERO; c_in * c_out];
                    // dW = X^T (c_in x rows) @ dC
                    ops::gemm_into(
                        c_in,
                        rows,
                        c_out,
                        self.value(*x).data(),
                        1,
                        c_in as isize,
                        g,
                        c_out as isize,
                        1,
                        T::ZERO,
                        &mut dw,
                    );
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Matmul2d { a, b, transpose_b } => {
                let ash = self.value(*a).shape();
                let bsh = self.value(*b).shape();
                let (m, k) = (ash[0], ash[1]);
                let n = if *transpose_b { bsh[0] } else { bsh[1] };
                if self.rg(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    if *transpose_b {
                        // dA = dC @ B
                        ops::gemm_into(
                            m, n, k,
                            g, n as isize, 1,
                            self.value(*b).data(), k as isize, 1,
                            T::ZERO, &mut da,
                        );
                    } else {
                        // dA = dC @ B^T
                        ops::gemm_into(
                            m, n, k,
                            g, n as isize, 1,
                            self.value(*b).data(), 1, n as isize,
                            T::ZERO, &mut da,
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    if *transpose_b {
                        // dB = dC^T @ A  (n x k)
                        let mut db = vec![T::ZERO; n * k];
                        ops::gemm_into(
                            n, m, k,
                            g, 1, n as isize,
                            self.value(*a).data(), k as isize, 1,
                            T::ZERO, &mut db,
                        );
                        self.accumulate(grads, *b, db);
                    } else {
                        // dB = A^T @ dC  (k x n)
                        let mut db = vec![T::ZERO; k * n];
                        ops::gemm_into(
                            k, m, n,
                            self.value(*a).data(), 1, k as isize,
                            g, n as isize, 1,
                            T::ZERO, &mut db,
                        );
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let shape = y.shape();
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut dx = vec![T::ZERO; y.numel()];
                let yd = y.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::ZERO;
                        for j in 0..n {
                            let idx2 = base + j * inner;
                            dot += g[idx2] * yd[idx2];
                        }
                        for j in 0..n {
                            let idx2 = base + j * inner;
                            dx[idx2] = yd[idx2] * (g[idx2] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu { x } => {
                const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
                let xd = self.value(*x).data();
                let mut dx = vec![T::ZERO; xd.len()];
                let gelu_grad = |xs: &[T], gs: &[T], out: &mut [T]| {
                    for ((o, &v), &gv) in out.iter_mut().zip(xs).zip(gs) {
                        let pdf = T::from_f64(INV_SQRT_2PI) * (-v * v * T::from_f64(0.5)).exp();
                        *o = gv * (ops::normal_cdf(v) + v * pdf);
                    }
                };
                if xd.len() >= ops::PAR_MIN_ELEMS {
                    let half = xd.len() / 2;
                    let (xa, xb) = xd.split_at(half);
                    let (ga, gb) = g.split_at(half);
                    let (da, db) = dx.split_at_mut(half);
                    std::thread::scope(|s| {
                        s.spawn(|| gelu_grad(xa, ga, da));
                        gelu_grad(xb, gb, db);
                    });
                } else {
                    gelu_grad(xd, g, &mut dx);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v >= T::ZERO { gv } else { gv * *slope })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = self.value(*x);
                let xs = xv.shape();
                let (l, c) = (xs[0], xs[3]);
                let group = xs[1] * xs[2] * xs[3];
                let gaind = self.value(*gain).data();
                let inv_n = T::ONE / T::from_usize(group);
                let mut dx = vec![T::ZERO; xv.numel()];
                let mut dgain = vec![T::ZERO; c];
                let mut dbias = vec![T::ZERO; c];
                for s in 0..l {
                    let (mean, inv) = (stats.mean[s], stats.inv_std[s]);
                    let xslice = &xv.data()[s * group..(s + 1) * group];
                    let gslice = &g[s * group..(s + 1) * group];
                    let mut m1 = T::ZERO; // mean of gain-scaled upstream grad
                    let mut m2 = T::ZERO; // mean of (grad * xhat)
                    for (xrow, grow) in xslice.chunks_exact(c).zip(gslice.chunks_exact(c)) {
                        for ch in 0..c {
                            let xhat = (xrow[ch] - mean) * inv;
                            let dy = grow[ch] * gaind[ch];
                            dgain[ch] += grow[ch] * xhat;
                            dbias[ch] += grow[ch];
                            m1 += dy;
                            m2 += dy * xhat;
                        }
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    let dst = &mut dx[s * group..(s + 1) * group];
                    for ((drow, xrow), grow) in dst
                        .chunks_exact_mut(c)
                        .zip(xslice.chunks_exact(c))
                        .zip(gslice.chunks_exact(c))
                    {
                        for ch in 0..c {
                            let xhat = (xrow[ch] - mean) * inv;
                            let dy = grow[ch] * gaind[ch];
                            drow[ch] = inv * (dy - m1 - xhat * m2);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::InstanceNorm { x, gain, bias, stats } => {
                let xv = self.value(*x);
                let xs = xv.shape();
                let (l, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
                let gaind = self.value(*gain).data();
                let inv_n = T::ONE / T::from_usize(hw);
                let mut dx = vec![T::ZERO; xv.numel()];
                let mut dgain = vec![T::ZERO; c];
                let mut dbias = vec![T::ZERO; c];
                let mut m1 = vec![T::ZERO; c];
                let mut m2 = vec![T::ZERO; c];
                for s in 0..l {
                    let base = s * hw * c;
                    let xslice = &xv.data()[base..base + hw * c];
                    let gslice = &g[base..base + hw * c];
                    let mean_row = &stats.mean[s * c..(s + 1) * c];
                    let inv_row = &stats.inv_std[s * c..(s + 1) * c];
                    m1.iter_mut().for_each(|v| *v = T::ZERO);
                    m2.iter_mut().for_each(|v| *v = T::ZERO);
                    for (xrow, grow) in xslice.chunks_exact(c).zip(gslice.chunks_exact(c)) {
                        for ch in 0..c {
                            let xhat = (xrow[ch] - mean_row[ch]) * inv_row[ch];
                            let dy = grow[ch] * gaind[ch];
                            dgain[ch] += grow[ch] * xhat;
                            dbias[ch] += grow[ch];
                            m1[ch] += dy;
                            m2[ch] += dy * xhat;
                        }
                    }
                    for ch in 0..c {
                        m1[ch] *= inv_n;
                        m2[ch] *= inv_n;
                    }
                    let dst = &mut dx[base..base + hw * c];
                    for ((drow, xrow), grow) in dst
                        .chunks_exact_mut(c)
                        .zip(xslice.chunks_exact(c))
                        .zip(gslice.chunks_exact(c))
                    {
                        for ch in 0..c {
                            let inv = inv_row[ch];
                            let xhat = (xrow[ch] - mean_row[ch]) * inv;
                            let dy = grow[ch] * gaind[ch];
                            drow[ch] = inv * (dy - m1[ch] - xhat * m2[ch]);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::AvgPool { x, k } => {
                let xs = self.value(*x).shape();
                let (l, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / k, w / k);
                let inv = T::ONE / T::from_usize(k * k);
                let mut dx = vec![T::ZERO; l * h * w * c];
                for s in 0..l {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = ((s * ho + oy) * wo + ox) * c;
                            let grow = &g[go..go + c];
                            for dy in 0..*k {
                                let xo = ((s * h + oy * k + dy) * w + ox * k) * c;
                                for win in dx[xo..xo + k * c].chunks_exact_mut(c) {
                                    for (o, &gv) in win.iter_mut().zip(grow) {
                                        *o += gv * inv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2x { x } => {
                let xs = self.value(*x).shape();
                let (l, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = vec![T::ZERO; l * h * w * c];
                for s in 0..l {
                    for y in 0..h {
                        for x_ in 0..w {
                            let dst = ((s * h + y) * w + x_) * c;
                            let out_row = &mut dx[dst..dst + c];
                            for (dy, dxk) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let src = ((s * 2 * h + 2 * y + dy) * 2 * w + 2 * x_ + dxk) * c;
                                for (o, &gv) in out_row.iter_mut().zip(&g[src..src + c]) {
                                    *o += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, kernel, bias, stride, pad } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let xs = xv.shape();
                let ks = kv.shape();
                let (ho, wo) = ops::conv2d_out_dims(xs[1], xs[2], ks[0], ks[1], *stride, *pad)
                    .expect("checked in forward");
                let d = ops::ConvDims {
                    l: xs[0],
                    h: xs[1],
                    w: xs[2],
                    c_in: xs[3],
                    kh: ks[0],
                    kw: ks[1],
                    c_out: ks[3],
                    stride: *stride,
                    pad: *pad,
                    ho,
                    wo,
                };
                if self.rg(*kernel) {
                    let dk = ops::conv2d_grad_kernel(g, xv.data(), &d);
                    self.accumulate(grads, *kernel, dk);
                }
                if self.rg(*x) {
                    let dx = ops::conv2d_grad_input(g, kv.data(), &d);
                    self.accumulate(grads, *x, dx);
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let c_out = ks[3];
                        let mut db = vec![T::ZERO; c_out];
                        for row in g.chunks_exact(c_out) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                let voxels = probs.numel() / NUM_CLASSES;
                let scale = g[0] / T::from_usize(voxels);
                let mut dl: Vec<T> = probs.data().iter().map(|&p| p * scale).collect();
                for (v, &label) in target.data().iter().enumerate() {
                    dl[v * NUM_CLASSES + label as usize] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::ConcatC { parts } => {
                let c_total = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / c_total;
                let mut off = 0;
                for p in parts {
                    let pc = *self.value(*p).shape().last().unwrap();
                    if self.rg(*p) {
                        let mut dp = vec![T::ZERO; rows * pc];
                        for r in 0..rows {
                            dp[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g[r * c_total + off..r * c_total + off + pc]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    off += pc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_and_unused_params_get_no_or_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let used = tape.leaf(Tensor::from_vec(&[3], vec![1.0; 3]).unwrap().with_requires_grad());
        let unused =
            tape.leaf(Tensor::from_vec(&[3], vec![9.0; 3]).unwrap().with_requires_grad());
        let prod = tape.mul(c, used).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        // gradient of a sum of constants w.r.t. the constant input is not tracked
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(used).unwrap(), &[1.0, 2.0, 3.0]);
        // a parameter not on the path to the loss receives no gradient;
        // the trainer treats that as zero
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad());
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }
}
