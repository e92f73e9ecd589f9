//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker reruns the forward closure from scratch for every perturbed
//! element, so it never shares state with the backward pass it is validating.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, TransformerBlockParams};
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{LabelVolume, Tensor};

/// Builds a graph from registered inputs and returns the scalar loss.
pub type BuildFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn eval(build: &BuildFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares backward gradients against central finite differences.
///
/// Returns the max relative error over every element of every input, where
/// the error is normalized by `max(|analytic|, |numeric|, 1)`.
pub fn grad_check(build: &BuildFn, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad()))
        .collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (ti, tensor) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]);
        for j in 0..tensor.numel() {
            let orig = tensor.data()[j];
            let h = eps * (1.0 + orig.abs());

            let bump = |delta: f64| -> Result<f64> {
                let mut data = tensor.data().to_vec();
                data[j] = orig + delta;
                let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
                perturbed[ti] = Tensor::from_vec(tensor.shape(), data)?;
                eval(build, &perturbed)
            };
            let numeric = (bump(h)? - bump(-h)?) / (2.0 * h);
            let a = analytic.map(|g| g[j]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Outcome of one named check in the suite.
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Appends a deterministic scalar probe `sum(coeff .* out)` so that checks
/// exercise a full Jacobian contraction rather than a plain sum.
fn probe(tape: &mut Tape<f64>, out: Var, salt: u64) -> Result<Var> {
    let n = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9E37_79B9 ^ salt);
    let coeff: Vec<f64> = (0..n).map(|_| rng.gen_range(0.25..1.75)).collect();
    let weighted = tape.mul_const(out, Arc::new(coeff))?;
    Ok(tape.sum(weighted))
}

const OP_TOL: f64 = 1e-6;
const COMPOSED_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
const POINTS_PER_OP: usize = 10;

fn check_op(
    results: &mut Vec<CheckResult>,
    name: &str,
    shapes: &[Vec<usize>],
    seed: u64,
    tol: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) {
    let mut worst = 0.0f64;
    for point in 0..POINTS_PER_OP {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + point as u64);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
        let err = grad_check(&build, &inputs, FD_EPS).expect("grad_check evaluation failed");
        worst = worst.max(err);
    }
    results.push(CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: tol,
    });
}

/// The full gradient suite: every differentiable operation at random points,
/// plus the composed transformer block. Used by tests and the CLI.
pub fn run_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();

    check_op(&mut out, "add", &[vec![2, 3], vec![2, 3]], 1, OP_TOL, |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y, 1)
    });
    check_op(&mut out, "mul", &[vec![2, 3], vec![2, 3]], 2, OP_TOL, |t, v| {
        let y = t.mul(v[0], v[1])?;
        probe(t, y, 2)
    });
    check_op(&mut out, "scale", &[vec![4]], 3, OP_TOL, |t, v| {
        let y = t.scale(v[0], -0.7);
        probe(t, y, 3)
    });
    check_op(&mut out, "sum", &[vec![3, 2]], 4, OP_TOL, |t, v| {
        let y = t.sum(v[0]);
        probe(t, y, 4)
    });
    check_op(
        &mut out,
        "add_bias",
        &[vec![2, 2, 2, 3], vec![3]],
        5,
        OP_TOL,
        |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            probe(t, y, 5)
        },
    );
    check_op(
        &mut out,
        "add_pe",
        &[vec![3, 2, 2, 2], vec![3, 1, 1, 2]],
        6,
        OP_TOL,
        |t, v| {
            let y = t.add_pe(v[0], v[1])?;
            probe(t, y, 6)
        },
    );
    check_op(
        &mut out,
        "matmul_4d",
        &[vec![2, 2, 2, 3], vec![3, 2]],
        7,
        OP_TOL,
        |t, v| {
            let y = t.matmul_4d(v[0], v[1])?;
            probe(t, y, 7)
        },
    );
    check_op(
        &mut out,
        "matmul_2d",
        &[vec![3, 4], vec![4, 2]],
        8,
        OP_TOL,
        |t, v| {
            let y = t.matmul_2d(v[0], v[1], false)?;
            probe(t, y, 8)
        },
    );
    check_op(
        &mut out,
        "matmul_2d_transposed",
        &[vec![3, 4], vec![2, 4]],
        9,
        OP_TOL,
        |t, v| {
            let y = t.matmul_2d(v[0], v[1], true)?;
            probe(t, y, 9)
        },
    );
    check_op(&mut out, "reshape", &[vec![2, 6]], 10, OP_TOL, |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        probe(t, y, 10)
    });
    check_op(&mut out, "softmax_dim1", &[vec![3, 4]], 11, OP_TOL, |t, v| {
        let y = t.softmax(v[0], 1)?;
        probe(t, y, 11)
    });
    check_op(&mut out, "softmax_dim0", &[vec![4, 2]], 12, OP_TOL, |t, v| {
        let y = t.softmax(v[0], 0)?;
        probe(t, y, 12)
    });
    check_op(&mut out, "gelu", &[vec![2, 5]], 13, OP_TOL, |t, v| {
        let y = t.gelu(v[0]);
        probe(t, y, 13)
    });
    check_op(&mut out, "leaky_relu", &[vec![2, 5]], 14, OP_TOL, |t, v| {
        let y = t.leaky_relu(v[0], 0.01);
        probe(t, y, 14)
    });
    check_op(
        &mut out,
        "layer_norm",
        &[vec![2, 2, 2, 3], vec![3], vec![3]],
        15,
        OP_TOL,
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, 15)
        },
    );
    check_op(
        &mut out,
        "instance_norm2d",
        &[vec![2, 3, 2, 2], vec![2], vec![2]],
        16,
        OP_TOL,
        |t, v| {
            let y = t.instance_norm2d(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, 16)
        },
    );
    check_op(&mut out, "avg_pool2d", &[vec![2, 4, 4, 2]], 17, OP_TOL, |t, v| {
        let y = t.avg_pool2d(v[0], 2)?;
        probe(t, y, 17)
    });
    check_op(&mut out, "upsample2x", &[vec![2, 2, 2, 2]], 18, OP_TOL, |t, v| {
        let y = t.upsample2x(v[0])?;
        probe(t, y, 18)
    });
    check_op(
        &mut out,
        "conv2d_3x3_pad1",
        &[vec![2, 4, 4, 2], vec![3, 3, 2, 2], vec![2]],
        19,
        OP_TOL,
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            probe(t, y, 19)
        },
    );
    check_op(
        &mut out,
        "conv2d_stride2",
        &[vec![2, 4, 4, 2], vec![3, 3, 2, 3], vec![3]],
        20,
        OP_TOL,
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(t, y, 20)
        },
    );
    check_op(
        &mut out,
        "conv2d_1x1",
        &[vec![2, 3, 3, 2], vec![1, 1, 2, 3]],
        21,
        OP_TOL,
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0)?;
            probe(t, y, 21)
        },
    );
    {
        // fixed labels per point, generated alongside the logits
        let mut worst = 0.0f64;
        for point in 0..POINTS_PER_OP {
            let mut rng = ChaCha8Rng::seed_from_u64(22_000 + point as u64);
            let logits = random_tensor(&[2, 2, 2, 3], &mut rng);
            let labels: Vec<u8> = (0..8).map(|_| rng.gen_range(0..3u8)).collect();
            let target = Arc::new(LabelVolume::new([2, 2, 2], labels).unwrap());
            let build = move |t: &mut Tape<f64>, v: &[Var]| t.cross_entropy(v[0], target.clone());
            let err = grad_check(&build, &[logits], FD_EPS).expect("cross_entropy grad_check");
            worst = worst.max(err);
        }
        out.push(CheckResult {
            name: "cross_entropy".into(),
            max_rel_err: worst,
            tolerance: OP_TOL,
        });
    }
    check_op(
        &mut out,
        "concat_channels",
        &[vec![2, 2, 2, 1], vec![2, 2, 2, 2]],
        23,
        OP_TOL,
        |t, v| {
            let y = t.concat_channels(&[v[0], v[1]])?;
            probe(t, y, 23)
        },
    );

    // composed transformer block on a 2x4x4x2 stack, all parameters checked
    {
        let mut worst = 0.0f64;
        for point in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(24_000 + point);
            let c = 2;
            let heads = 2;
            let x = random_tensor(&[2, 4, 4, c], &mut rng);
            let block = TransformerBlockParams::<f64>::init(c, heads, &mut rng);
            let mut inputs = vec![x];
            for h in &block.heads {
                inputs.push(h.w_q.clone());
                inputs.push(h.w_k.clone());
                inputs.push(h.w_v.clone());
            }
            inputs.extend([
                block.w1.clone(),
                block.b1.clone(),
                block.w2.clone(),
                block.b2.clone(),
                block.ln1_gain.clone(),
                block.ln1_bias.clone(),
                block.ln2_gain.clone(),
                block.ln2_bias.clone(),
            ]);
            let build = move |t: &mut Tape<f64>, v: &[Var]| {
                let mut idx = 1;
                let mut head_vars = Vec::new();
                for _ in 0..heads {
                    head_vars.push(attention::AttentionHeadVars {
                        w_q: v[idx],
                        w_k: v[idx + 1],
                        w_v: v[idx + 2],
                    });
                    idx += 3;
                }
                let bv = attention::TransformerBlockVars {
                    heads: head_vars,
                    w1: v[idx],
                    b1: v[idx + 1],
                    w2: v[idx + 2],
                    b2: v[idx + 3],
                    ln1_gain: v[idx + 4],
                    ln1_bias: v[idx + 5],
                    ln2_gain: v[idx + 6],
                    ln2_bias: v[idx + 7],
                };
                let (z, _) = attention::transformer_block(t, v[0], &bv, 2)?;
                probe(t, z, 24)
            };
            let err = grad_check(&build, &inputs, FD_EPS).expect("transformer grad_check");
            worst = worst.max(err);
        }
        out.push(CheckResult {
            name: "transformer_block_2x4x4x2".into(),
            max_rel_err: worst,
            tolerance: COMPOSED_TOL,
        });
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_softmax_matmul_pass_tight_tolerance() {
        // the spec'd spot checks, at the 64-bit 1e-6 bound
        let results = run_suite();
        for name in ["gelu", "softmax_dim1", "matmul_4d"] {
            let r = results.iter().find(|r| r.name == name).unwrap();
            assert!(r.max_rel_err < 1e-6, "{name}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn full_suite_passes() {
        for r in run_suite() {
            assert!(
                r.passed(),
                "{} failed: max rel err {} >= {}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
    }
}
