//! Cross-slice attention, transformer blocks, and the slice-transformer
//! module applied on skip connections.
//!
//! Attention here relates whole 2D slices of a feature stack to each other:
//! queries and keys come from spatially pooled features, values from the
//! full-resolution features, and the attention matrix is `l x l` for an
//! `l`-slice stack.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Epsilon used by every layer norm in the transformer blocks.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Learnable per-head projections, each `c x c`.
#[derive(Clone, Debug)]
pub struct AttentionHeadParams<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

impl<T: Scalar> AttentionHeadParams<T> {
    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        AttentionHeadParams {
            w_q: Tensor::he_uniform(&[c, c], c, rng).with_requires_grad(),
            w_k: Tensor::he_uniform(&[c, c], c, rng).with_requires_grad(),
            w_v: Tensor::he_uniform(&[c, c], c, rng).with_requires_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> AttentionHeadVars {
        AttentionHeadVars {
            w_q: tape.leaf(self.w_q.clone()),
            w_k: tape.leaf(self.w_k.clone()),
            w_v: tape.leaf(self.w_v.clone()),
        }
    }
}

#[derive(Copy, Clone)]
pub struct AttentionHeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// One transformer block: `H` heads plus two projection/normalization stages.
///
/// Head outputs keep the full channel width `c`, so the concatenation has
/// `H * c` channels and the first projection maps `H * c -> c`.
#[derive(Clone, Debug)]
pub struct TransformerBlockParams<T: Scalar> {
    pub heads: Vec<AttentionHeadParams<T>>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

impl<T: Scalar> TransformerBlockParams<T> {
    pub fn init(c: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1, "transformer block needs at least one head");
        TransformerBlockParams {
            heads: (0..heads).map(|_| AttentionHeadParams::init(c, rng)).collect(),
            w1: Tensor::he_uniform(&[heads * c, c], heads * c, rng).with_requires_grad(),
            b1: Tensor::zeros(&[c]).with_requires_grad(),
            w2: Tensor::he_uniform(&[c, c], c, rng).with_requires_grad(),
            b2: Tensor::zeros(&[c]).with_requires_grad(),
            ln1_gain: Tensor::full(&[c], T::ONE).with_requires_grad(),
            ln1_bias: Tensor::zeros(&[c]).with_requires_grad(),
            ln2_gain: Tensor::full(&[c], T::ONE).with_requires_grad(),
            ln2_bias: Tensor::zeros(&[c]).with_requires_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> TransformerBlockVars {
        TransformerBlockVars {
            heads: self.heads.iter().map(|h| h.bind(tape)).collect(),
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            ln1_gain: tape.leaf(self.ln1_gain.clone()),
            ln1_bias: tape.leaf(self.ln1_bias.clone()),
            ln2_gain: tape.leaf(self.ln2_gain.clone()),
            ln2_bias: tape.leaf(self.ln2_bias.clone()),
        }
    }
}

#[derive(Clone)]
pub struct TransformerBlockVars {
    pub heads: Vec<AttentionHeadVars>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Per-scale module: learnable positional encoding plus `N` transformer blocks.
#[derive(Clone, Debug)]
pub struct CatModuleParams<T: Scalar> {
    pub pe: Tensor<T>,
    pub blocks: Vec<TransformerBlockParams<T>>,
    pub pool_k: usize,
}

impl<T: Scalar> CatModuleParams<T> {
    pub fn init(
        slices: usize,
        c: usize,
        blocks: usize,
        heads: usize,
        pool_k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if blocks < 1 {
            return Err(Error::config("transformer block count must be >= 1"));
        }
        Ok(CatModuleParams {
            pe: init_positional_encoding(slices, c)?.with_requires_grad(),
            blocks: (0..blocks)
                .map(|_| TransformerBlockParams::init(c, heads, rng))
                .collect(),
            pool_k,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> CatModuleVars {
        CatModuleVars {
            pe: tape.leaf(self.pe.clone()),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            pool_k: self.pool_k,
        }
    }
}

#[derive(Clone)]
pub struct CatModuleVars {
    pub pe: Var,
    pub blocks: Vec<TransformerBlockVars>,
    pub pool_k: usize,
}

/// One captured attention matrix, tagged by where it was produced.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T: Scalar> {
    pub scale: usize,
    pub block: usize,
    pub head: usize,
    pub matrix: Tensor<T>,
}

/// Divisor applied to the attention logits: `sqrt(h*w*c / k^2)`.
pub fn attention_scale(h: usize, w: usize, c: usize, k: usize) -> f64 {
    ((h * w * c) as f64 / (k * k) as f64).sqrt()
}

/// Single-head cross-slice attention.
///
/// Queries and keys are projections of the `k`-pooled stack, flattened to one
/// row per slice; values are a projection of the full-resolution stack. The
/// returned attention matrix has one row per slice, rows summing to 1.
pub fn cross_slice_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    head: &AttentionHeadVars,
    pool_k: usize,
) -> Result<(Var, Var)> {
    let shape = tape.value(x).shape().to_vec();
    let (l, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let x_pool = tape.avg_pool2d(x, pool_k)?;
    let q4 = tape.matmul_4d(x_pool, head.w_q)?;
    let k4 = tape.matmul_4d(x_pool, head.w_k)?;
    let v4 = tape.matmul_4d(x, head.w_v)?;

    let d = h * w * c / (pool_k * pool_k);
    let q = tape.reshape(q4, &[l, d])?;
    let k = tape.reshape(k4, &[l, d])?;
    let logits = tape.matmul_2d(q, k, true)?;
    let scaled = tape.scale(logits, T::from_f64(1.0 / attention_scale(h, w, c, pool_k)));
    let a = tape.softmax(scaled, 1)?;

    let v_flat = tape.reshape(v4, &[l, h * w * c])?;
    let y_flat = tape.matmul_2d(a, v_flat, false)?;
    let y = tape.reshape(y_flat, &[l, h, w, c])?;
    Ok((y, a))
}

/// Runs all heads of a block in parallel and concatenates the outputs along
/// the channel axis, in head order. Returns the per-head attention matrices.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    block: &TransformerBlockVars,
    pool_k: usize,
) -> Result<(Var, Vec<Var>)> {
    let mut outputs = Vec::with_capacity(block.heads.len());
    let mut matrices = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let (y, a) = cross_slice_attention(tape, x, head, pool_k)?;
        outputs.push(y);
        matrices.push(a);
    }
    let y_cat = tape.concat_channels(&outputs)?;
    Ok((y_cat, matrices))
}

/// Transformer block:
/// `z_int = LayerNorm(GELU(y_cat W1 + b1) + x)`,
/// `z = LayerNorm(GELU(z_int W2 + b2) + z_int)`,
/// with layer norms over `(h, w, c)` per slice.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    block: &TransformerBlockVars,
    pool_k: usize,
) -> Result<(Var, Vec<Var>)> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let (y_cat, matrices) = multi_head_attention(tape, x, block, pool_k)?;

    let proj1 = tape.matmul_4d(y_cat, block.w1)?;
    let proj1 = tape.add_bias(proj1, block.b1)?;
    let act1 = tape.gelu(proj1);
    let res1 = tape.add(act1, x)?;
    let z_int = tape.layer_norm(res1, block.ln1_gain, block.ln1_bias, eps)?;

    let proj2 = tape.matmul_4d(z_int, block.w2)?;
    let proj2 = tape.add_bias(proj2, block.b2)?;
    let act2 = tape.gelu(proj2);
    let res2 = tape.add(act2, z_int)?;
    let z = tape.layer_norm(res2, block.ln2_gain, block.ln2_bias, eps)?;

    Ok((z, matrices))
}

/// Sinusoidal initialization for the learnable positional encoding,
/// shape `l x 1 x 1 x c`: even channels `sin(p / 10000^{2j/c})`, odd channels
/// `cos` with the same frequency. Identical for all pixels of a slice, so it
/// is stored at spatial size 1x1 and broadcast on use.
pub fn init_positional_encoding<T: Scalar>(slices: usize, c: usize) -> Result<Tensor<T>> {
    if c < 2 {
        return Err(Error::config(format!(
            "positional encoding needs at least 2 channels, got {c}"
        )));
    }
    let mut data = vec![T::ZERO; slices * c];
    for p in 0..slices {
        for j in 0..c.div_ceil(2) {
            let freq = (p as f64) / 10000f64.powf(2.0 * j as f64 / c as f64);
            data[p * c + 2 * j] = T::from_f64(freq.sin());
            if 2 * j + 1 < c {
                data[p * c + 2 * j + 1] = T::from_f64(freq.cos());
            }
        }
    }
    Tensor::from_vec(&[slices, 1, 1, c], data)
}

/// Full module forward: positional encoding added once at entry (skipped when
/// `pe_enabled` is false), then the transformer blocks in sequence (skipped
/// when `transformer_enabled` is false). Returns the output and the attention
/// matrices of every block/head in execution order.
pub fn cat_module_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    module: &CatModuleVars,
    pe_enabled: bool,
    transformer_enabled: bool,
) -> Result<(Var, Vec<(usize, usize, Var)>)> {
    let x_slices = tape.value(x).shape()[0];
    let pe_slices = tape.value(module.pe).shape()[0];
    if x_slices != pe_slices {
        return Err(Error::config(format!(
            "stack has {x_slices} slices but positional encoding was built for {pe_slices}"
        )));
    }
    let mut cur = if pe_enabled {
        tape.add_pe(x, module.pe)?
    } else {
        x
    };
    let mut records = Vec::new();
    if transformer_enabled {
        for (bi, block) in module.blocks.iter().enumerate() {
            let (z, matrices) = transformer_block(tape, cur, block, module.pool_k)?;
            cur = z;
            for (hi, a) in matrices.into_iter().enumerate() {
                records.push((bi, hi, a));
            }
        }
    }
    Ok((cur, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_stack(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn single_slice_attention_is_identity_weighting() {
        let mut r = rng(1);
        let head = AttentionHeadParams::<f64>::init(3, &mut r);
        let x = random_stack(&[1, 2, 2, 3], &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let hv = head.bind(&mut tape);
        let (y, a) = cross_slice_attention(&mut tape, xv, &hv, 1).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0]);
        let v = crate::ops::matmul_4d(&x, &head.w_v).unwrap();
        assert!(tape.value(y).max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn identical_slices_give_uniform_attention() {
        let mut r = rng(2);
        let head = AttentionHeadParams::<f64>::init(2, &mut r);
        let one = random_stack(&[1, 2, 2, 2], &mut r);
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(one.data());
        }
        let x = Tensor::from_vec(&[4, 2, 2, 2], data).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let hv = head.bind(&mut tape);
        let (y, a) = cross_slice_attention(&mut tape, xv, &hv, 2).unwrap();
        for &v in tape.value(a).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // all output slices identical
        let yd = tape.value(y).data();
        let per = yd.len() / 4;
        for s in 1..4 {
            for i in 0..per {
                assert!((yd[i] - yd[s * per + i]).abs() < 1e-12);
            }
        }
    }

    /// Brute-force scalar evaluation for l=2, h=w=c=1, k=1: every tensor is a
    /// single number per slice, so the whole mechanism reduces to arithmetic.
    fn scalar_attention_oracle(x0: f64, x1: f64, wq: f64, wk: f64, wv: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let (q0, q1) = (x0 * wq, x1 * wq);
        let (k0, k1) = (x0 * wk, x1 * wk);
        let (v0, v1) = (x0 * wv, x1 * wv);
        let scale = 1.0; // sqrt(1*1*1/1)
        let logits = [[q0 * k0 / scale, q0 * k1 / scale], [q1 * k0 / scale, q1 * k1 / scale]];
        let mut a = [[0.0; 2]; 2];
        for i in 0..2 {
            let m = logits[i][0].max(logits[i][1]);
            let e0 = (logits[i][0] - m).exp();
            let e1 = (logits[i][1] - m).exp();
            a[i][0] = e0 / (e0 + e1);
            a[i][1] = e1 / (e0 + e1);
        }
        let y = [a[0][0] * v0 + a[0][1] * v1, a[1][0] * v0 + a[1][1] * v1];
        (y, a)
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut r = rng(3);
        for _ in 0..50 {
            let x0 = r.gen_range(-2.0..2.0);
            let x1 = r.gen_range(-2.0..2.0);
            let wq = r.gen_range(-2.0..2.0);
            let wk = r.gen_range(-2.0..2.0);
            let wv = r.gen_range(-2.0..2.0);
            let head = AttentionHeadParams {
                w_q: Tensor::from_vec(&[1, 1], vec![wq]).unwrap(),
                w_k: Tensor::from_vec(&[1, 1], vec![wk]).unwrap(),
                w_v: Tensor::from_vec(&[1, 1], vec![wv]).unwrap(),
            };
            let x = Tensor::from_vec(&[2, 1, 1, 1], vec![x0, x1]).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let hv = head.bind(&mut tape);
            let (y, a) = cross_slice_attention(&mut tape, xv, &hv, 1).unwrap();
            let (ye, ae) = scalar_attention_oracle(x0, x1, wq, wk, wv);
            let yd = tape.value(y).data();
            let ad = tape.value(a).data();
            assert!((yd[0] - ye[0]).abs() < 1e-12 && (yd[1] - ye[1]).abs() < 1e-12);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((ad[i * 2 + j] - ae[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn multi_head_shapes_and_determinism() {
        let mut r = rng(4);
        let c = 2;
        let block = TransformerBlockParams::<f64>::init(c, 3, &mut r);
        let x = random_stack(&[3, 2, 2, c], &mut r);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bv = block.bind(&mut tape);
        let (y_cat, matrices) = multi_head_attention(&mut tape, xv, &bv, 1).unwrap();
        assert_eq!(tape.value(y_cat).shape(), &[3, 2, 2, 3 * c]);
        assert_eq!(matrices.len(), 3);

        // single head equals its own concatenation
        let mut single = block.clone();
        single.heads.truncate(1);
        let mut tape1 = Tape::new();
        let xv1 = tape1.leaf(x.clone());
        let sv = single.bind(&mut tape1);
        let (y1, _) = multi_head_attention(&mut tape1, xv1, &sv, 1).unwrap();
        let (yh, _) = {
            let mut tape2 = Tape::new();
            let xv2 = tape2.leaf(x.clone());
            let hv = single.heads[0].bind(&mut tape2);
            let (y, a) = cross_slice_attention(&mut tape2, xv2, &hv, 1).unwrap();
            (tape2.value(y).clone(), tape2.value(a).clone())
        };
        let _ = yh;
        assert!(tape1.value(y1).max_abs_diff({
            let mut tape2 = Tape::new();
            let xv2 = tape2.leaf(x.clone());
            let hv = single.heads[0].bind(&mut tape2);
            let (y, _) = cross_slice_attention(&mut tape2, xv2, &hv, 1).unwrap();
            &tape2.value(y).clone()
        }) < 1e-15);

        // identical head weights produce identical channel segments
        let mut shared = block.clone();
        shared.heads[1] = shared.heads[0].clone();
        shared.heads[2] = shared.heads[0].clone();
        let mut tape3 = Tape::new();
        let xv3 = tape3.leaf(x);
        let shv = shared.bind(&mut tape3);
        let (yc, _) = multi_head_attention(&mut tape3, xv3, &shv, 1).unwrap();
        let ycd = tape3.value(yc).data();
        let total_c = 3 * c;
        for row in ycd.chunks_exact(total_c) {
            for seg in 1..3 {
                for ch in 0..c {
                    assert!((row[ch] - row[seg * c + ch]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn transformer_block_zero_w1_reduces_to_layer_norm_of_input() {
        let mut r = rng(5);
        let c = 2;
        let mut block = TransformerBlockParams::<f64>::init(c, 2, &mut r);
        block.w1 = Tensor::zeros(&[2 * c, c]).with_requires_grad();
        block.b1 = Tensor::zeros(&[c]).with_requires_grad();
        let x = random_stack(&[2, 2, 2, c], &mut r);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bv = block.bind(&mut tape);
        // recompute z_int path only: GELU(0) = 0 kills the attention branch
        let (y_cat, _) = multi_head_attention(&mut tape, xv, &bv, 1).unwrap();
        let proj1 = tape.matmul_4d(y_cat, bv.w1).unwrap();
        let proj1 = tape.add_bias(proj1, bv.b1).unwrap();
        let act1 = tape.gelu(proj1);
        let res1 = tape.add(act1, xv).unwrap();
        let z_int = tape
            .layer_norm(res1, bv.ln1_gain, bv.ln1_bias, LAYER_NORM_EPS)
            .unwrap();

        let gain = Tensor::full(&[c], 1.0);
        let bias = Tensor::zeros(&[c]);
        let (ln_x, _) = crate::ops::layer_norm(&x, &gain, &bias, LAYER_NORM_EPS).unwrap();
        assert!(tape.value(z_int).max_abs_diff(&ln_x) < 1e-12);
    }

    #[test]
    fn transformer_block_preserves_shape() {
        let mut r = rng(6);
        let block = TransformerBlockParams::<f64>::init(3, 2, &mut r);
        let x = random_stack(&[4, 4, 4, 3], &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let bv = block.bind(&mut tape);
        let (z, matrices) = transformer_block(&mut tape, xv, &bv, 2).unwrap();
        assert_eq!(tape.value(z).shape(), &[4, 4, 4, 3]);
        assert_eq!(matrices.len(), 2);
        for a in matrices {
            let ad = tape.value(a);
            assert_eq!(ad.shape(), &[4, 4]);
            for row in ad.data().chunks_exact(4) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    /// Independent forward route: composes the already-verified plain kernels
    /// without the tape, mirroring the block wiring.
    fn block_forward_oracle(
        x: &Tensor<f64>,
        block: &TransformerBlockParams<f64>,
        pool_k: usize,
    ) -> Tensor<f64> {
        use crate::ops;
        let shape = x.shape();
        let (l, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let d = h * w * c / (pool_k * pool_k);
        let mut ys = Vec::new();
        for head in &block.heads {
            let x_pool = ops::avg_pool2d(x, pool_k).unwrap();
            let q = ops::matmul_4d(&x_pool, &head.w_q).unwrap().reshaped(&[l, d]).unwrap();
            let k = ops::matmul_4d(&x_pool, &head.w_k).unwrap().reshaped(&[l, d]).unwrap();
            let v = ops::matmul_4d(x, &head.w_v).unwrap().reshaped(&[l, h * w * c]).unwrap();
            let logits = ops::matmul_2d(&q, &k, true).unwrap();
            let scaled = ops::scale(&logits, 1.0 / attention_scale(h, w, c, pool_k));
            let a = ops::softmax(&scaled, 1).unwrap();
            let y = ops::matmul_2d(&a, &v, false).unwrap().reshaped(&[l, h, w, c]).unwrap();
            ys.push(y);
        }
        let refs: Vec<&Tensor<f64>> = ys.iter().collect();
        let y_cat = ops::concat_channels(&refs).unwrap();
        let p1 = ops::add_bias(&ops::matmul_4d(&y_cat, &block.w1).unwrap(), &block.b1).unwrap();
        let r1 = ops::add(&ops::gelu(&p1), x).unwrap();
        let (z_int, _) =
            ops::layer_norm(&r1, &block.ln1_gain, &block.ln1_bias, LAYER_NORM_EPS).unwrap();
        let p2 = ops::add_bias(&ops::matmul_4d(&z_int, &block.w2).unwrap(), &block.b2).unwrap();
        let r2 = ops::add(&ops::gelu(&p2), &z_int).unwrap();
        let (z, _) = ops::layer_norm(&r2, &block.ln2_gain, &block.ln2_bias, LAYER_NORM_EPS).unwrap();
        z
    }

    #[test]
    fn transformer_block_matches_kernel_composition() {
        let mut r = rng(7);
        let block = TransformerBlockParams::<f64>::init(2, 3, &mut r);
        let x = random_stack(&[3, 4, 4, 2], &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bv = block.bind(&mut tape);
        let (z, _) = transformer_block(&mut tape, xv, &bv, 2).unwrap();
        let oracle = block_forward_oracle(&x, &block, 2);
        assert!(tape.value(z).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = init_positional_encoding::<f64>(4, 6).unwrap();
        assert_eq!(pe.shape(), &[4, 1, 1, 6]);
        assert_eq!(pe.data()[0], 0.0); // sin 0
        assert_eq!(pe.data()[1], 1.0); // cos 0
        assert!((pe.data()[6] - 1f64.sin()).abs() < 1e-15);
        assert!(pe.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(init_positional_encoding::<f64>(4, 1).is_err());
    }

    #[test]
    fn module_rejects_mismatched_slice_count_and_zero_blocks() {
        let mut r = rng(8);
        assert!(CatModuleParams::<f64>::init(4, 2, 0, 1, 1, &mut r).is_err());
        let module = CatModuleParams::<f64>::init(4, 2, 1, 1, 1, &mut r).unwrap();
        let x = random_stack(&[3, 2, 2, 2], &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let mv = module.bind(&mut tape);
        assert!(cat_module_forward(&mut tape, xv, &mv, true, true).is_err());
    }

    #[test]
    fn module_preserves_shape_and_counts_records() {
        let mut r = rng(9);
        let module = CatModuleParams::<f64>::init(3, 2, 2, 3, 1, &mut r).unwrap();
        let x = random_stack(&[3, 2, 2, 2], &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let mv = module.bind(&mut tape);
        let (z, records) = cat_module_forward(&mut tape, xv, &mv, true, true).unwrap();
        assert_eq!(tape.value(z).shape(), &[3, 2, 2, 2]);
        assert_eq!(records.len(), 2 * 3);
    }

    #[test]
    fn permutation_equivariance_without_positional_encoding() {
        let mut r = rng(10);
        let module = CatModuleParams::<f64>::init(4, 2, 2, 2, 2, &mut r).unwrap();
        let x = random_stack(&[4, 4, 4, 2], &mut r);
        let perm = [2usize, 0, 3, 1];

        let run = |input: &Tensor<f64>| -> Tensor<f64> {
            let mut tape = Tape::new();
            let xv = tape.leaf(input.clone());
            let mv = module.bind(&mut tape);
            let (z, _) = cat_module_forward(&mut tape, xv, &mv, false, true).unwrap();
            tape.value(z).clone()
        };

        let per = x.numel() / 4;
        let mut permuted = vec![0.0; x.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * per..(dst + 1) * per].copy_from_slice(&x.data()[src * per..(src + 1) * per]);
        }
        let x_perm = Tensor::from_vec(x.shape(), permuted).unwrap();

        let out = run(&x);
        let out_perm = run(&x_perm);
        for (dst, &src) in perm.iter().enumerate() {
            for i in 0..per {
                let a = out.data()[src * per + i];
                let b = out_perm.data()[dst * per + i];
                assert!((a - b).abs() < 1e-6, "slice {src}->{dst} differs: {a} vs {b}");
            }
        }
    }

    #[test]
    fn logit_scaling_follows_pooled_feature_size() {
        // Recover logit differences from attention ratios: for l=2,
        // ln(A[0,0]/A[0,1]) = (Q0.K0 - Q0.K1) / sqrt(hwc/k^2).
        let mut r = rng(11);
        for &(c, expect_ratio) in &[(1usize, 1.0f64), (2, std::f64::consts::SQRT_2)] {
            let _ = expect_ratio;
            let head = AttentionHeadParams {
                w_q: {
                    let mut eye = vec![0.0; c * c];
                    for i in 0..c {
                        eye[i * c + i] = 1.0;
                    }
                    Tensor::from_vec(&[c, c], eye.clone()).unwrap()
                },
                w_k: {
                    let mut eye = vec![0.0; c * c];
                    for i in 0..c {
                        eye[i * c + i] = 1.0;
                    }
                    Tensor::from_vec(&[c, c], eye).unwrap()
                },
                w_v: Tensor::zeros(&[c, c]),
            };
            let x = random_stack(&[2, 2, 2, c], &mut r);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let hv = head.bind(&mut tape);
            let (_, a) = cross_slice_attention(&mut tape, xv, &hv, 1).unwrap();
            let ad = tape.value(a).data();
            let measured = (ad[0] / ad[1]).ln();

            // independent computation of Q0.(K0-K1) with identity projections
            let per = x.numel() / 2;
            let (s0, s1) = (&x.data()[..per], &x.data()[per..]);
            let dot: f64 = s0.iter().zip(s0).map(|(a, b)| a * b).sum::<f64>()
                - s0.iter().zip(s1).map(|(a, b)| a * b).sum::<f64>();
            let expected = dot / attention_scale(2, 2, c, 1);
            assert!((measured - expected).abs() < 1e-9);
        }
        // and the divisor itself doubles by sqrt(2) when c doubles
        assert!(
            (attention_scale(2, 2, 2, 1) / attention_scale(2, 2, 1, 1) - std::f64::consts::SQRT_2)
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut r = rng(12);
        let module = CatModuleParams::<f64>::init(2, 2, 1, 2, 1, &mut r).unwrap();
        let x = random_stack(&[2, 2, 2, 2], &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.with_requires_grad());
        let mv = module.bind(&mut tape);
        let (z, _) = cat_module_forward(&mut tape, xv, &mv, true, true).unwrap();
        // scalar probe with uneven weights so no symmetric cancellation occurs
        let coeff: Vec<f64> = (0..tape.value(z).numel())
            .map(|i| 0.5 + (i as f64 * 0.37).sin().abs())
            .collect();
        let probe = tape.mul_const(z, std::sync::Arc::new(coeff)).unwrap();
        let loss = tape.sum(probe);
        let grads = tape.backward(loss).unwrap();

        let check = |v: Var, name: &str| {
            let g = grads.get(v).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(g.iter().any(|&x| x != 0.0), "all-zero grad for {name}");
        };
        check(mv.pe, "pe");
        let b = &mv.blocks[0];
        check(b.w1, "w1");
        check(b.b1, "b1");
        check(b.w2, "w2");
        check(b.b2, "b2");
        check(b.ln1_gain, "ln1_gain");
        check(b.ln1_bias, "ln1_bias");
        check(b.ln2_gain, "ln2_gain");
        check(b.ln2_bias, "ln2_bias");
        for (i, h) in b.heads.iter().enumerate() {
            check(h.w_q, &format!("head{i}.w_q"));
            check(h.w_k, &format!("head{i}.w_k"));
            check(h.w_v, &format!("head{i}.w_v"));
        }
        check(xv, "input");
    }
}
