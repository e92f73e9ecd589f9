use std::time::Instant;
use std::sync::Arc;
use catseg::tape::Tape;
use catseg::tensor::Tensor;

fn bench(name: &str, mut f: impl FnMut()) {
    f();
    let t0 = Instant::now();
    let reps = 10;
    for _ in 0..reps { f(); }
    println!("{name:40} {:8.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn t(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
}

fn conv_bwd(xshape: &[usize], kshape: &[usize], stride: usize, pad: usize) -> impl FnMut() {
    let x = t(xshape).with_requires_grad();
    let k = t(kshape).with_requires_grad();
    move || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let kv = tape.leaf(k.clone());
        let y = tape.conv2d(xv, kv, None, stride, pad).unwrap();
        let coeff = Arc::new(vec![1.0f32; tape.value(y).numel()]);
        let p = tape.mul_const(y, coeff).unwrap();
        let loss = tape.sum(p);
        let _ = tape.backward(loss).unwrap();
    }
}

fn main() {
    bench("conv bwd 64x64 1->8", conv_bwd(&[12,64,64,1], &[3,3,1,8], 1, 1));
    bench("conv bwd 64x64 8->8", conv_bwd(&[12,64,64,8], &[3,3,8,8], 1, 1));
    bench("conv bwd 32x32 16->16", conv_bwd(&[12,32,32,16], &[3,3,16,16], 1, 1));
    bench("conv bwd 16x16 32->32", conv_bwd(&[12,16,16,32], &[3,3,32,32], 1, 1));
    bench("conv bwd 16x16 64->32", conv_bwd(&[12,16,16,64], &[3,3,64,32], 1, 1));
    bench("conv bwd 8x8 64->64", conv_bwd(&[12,8,8,64], &[3,3,64,64], 1, 1));

    // instance norm bwd at full res
    let x = t(&[12,64,64,8]).with_requires_grad();
    let gain = Tensor::full(&[8], 1.0f32).with_requires_grad();
    let bias = Tensor::zeros(&[8]).with_requires_grad();
    bench("instance_norm bwd 64x64x8", move || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let gv = tape.leaf(gain.clone());
        let bv = tape.leaf(bias.clone());
        let y = tape.instance_norm2d(xv, gv, bv, 1e-5).unwrap();
        let coeff = Arc::new(vec![1.0f32; tape.value(y).numel()]);
        let p = tape.mul_const(y, coeff).unwrap();
        let loss = tape.sum(p);
        let _ = tape.backward(loss).unwrap();
    });

    // gelu bwd on the big CAT tensor
    let xg = t(&[12,32,32,16]).with_requires_grad();
    bench("gelu fwd+bwd 32x32x16", move || {
        let mut tape = Tape::new();
        let xv = tape.leaf(xg.clone());
        let y = tape.gelu(xv);
        let coeff = Arc::new(vec![1.0f32; tape.value(y).numel()]);
        let p = tape.mul_const(y, coeff).unwrap();
        let loss = tape.sum(p);
        let _ = tape.backward(loss).unwrap();
    });
}
