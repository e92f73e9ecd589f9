use std::time::Instant;
use catseg::ops;
use catseg::tensor::Tensor;

fn bench(name: &str, mut f: impl FnMut()) {
    // warmup
    f();
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps { f(); }
    println!("{name:34} {:8.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn t(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
}

fn main() {
    // encoder convs, desk scale
    let x0 = t(&[12, 64, 64, 1]);
    let k_stem0 = t(&[3, 3, 1, 8]);
    bench("conv 64x64 1->8", || { ops::conv2d(&x0, &k_stem0, None, 1, 1).unwrap(); });
    let x1 = t(&[12, 64, 64, 8]);
    let k_stem1 = t(&[3, 3, 8, 8]);
    bench("conv 64x64 8->8", || { ops::conv2d(&x1, &k_stem1, None, 1, 1).unwrap(); });
    let k_d1 = t(&[3, 3, 8, 16]);
    bench("conv 64->32 stride2 8->16", || { ops::conv2d(&x1, &k_d1, None, 2, 1).unwrap(); });
    let x2 = t(&[12, 32, 32, 16]);
    let k2 = t(&[3, 3, 16, 16]);
    bench("conv 32x32 16->16", || { ops::conv2d(&x2, &k2, None, 1, 1).unwrap(); });
    let x3 = t(&[12, 16, 16, 32]);
    let k3 = t(&[3, 3, 32, 32]);
    bench("conv 16x16 32->32", || { ops::conv2d(&x3, &k3, None, 1, 1).unwrap(); });
    let x4 = t(&[12, 8, 8, 64]);
    let k4 = t(&[3, 3, 64, 64]);
    bench("conv 8x8 64->64", || { ops::conv2d(&x4, &k4, None, 1, 1).unwrap(); });
    let kd = t(&[3, 3, 64, 32]);
    let xd = t(&[12, 16, 16, 64]);
    bench("conv 16x16 64->32 (dec)", || { ops::conv2d(&xd, &kd, None, 1, 1).unwrap(); });

    let gain = Tensor::full(&[8], 1.0f32);
    let bias = Tensor::zeros(&[8]);
    bench("instance_norm 64x64x8", || { ops::instance_norm2d(&x1, &gain, &bias, 1e-5).unwrap(); });
    bench("leaky_relu 64x64x8", || { ops::leaky_relu(&x1, 0.01f32); });

    // attention pieces at scale 1 (32x32x16)
    let w = t(&[16, 16]);
    bench("matmul4d 32x32x16 V-proj", || { ops::matmul_4d(&x2, &w).unwrap(); });
    let q = t(&[12, 4096]);
    bench("QK^T 12x4096", || { ops::matmul_2d(&q, &q, true).unwrap(); });
    let a = t(&[12, 12]);
    let v = t(&[12, 16384]);
    bench("A*V 12x12 x 12x16384", || { ops::matmul_2d(&a, &v, false).unwrap(); });
    let big = t(&[12, 32, 32, 48]);
    let w1 = t(&[48, 16]);
    bench("matmul4d W1 48->16 at 32x32", || { ops::matmul_4d(&big, &w1).unwrap(); });
    bench("gelu 32x32x16", || { ops::gelu(&x2); });
    let lg = Tensor::full(&[16], 1.0f32);
    let lb = Tensor::zeros(&[16]);
    bench("layer_norm 32x32x16", || { ops::layer_norm(&x2, &lg, &lb, 1e-5).unwrap(); });
}
