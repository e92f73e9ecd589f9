use std::time::Instant;

fn bench(name: &str, mut f: impl FnMut()) {
    f();
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps { f(); }
    println!("{name:40} {:8.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    // the conv 64x64 8->8 shape: M=49152, K=72, N=8
    let m = 49152; let k = 72; let n = 8;
    let a = vec![1.0f32; m*k];
    let b = vec![1.0f32; k*n];
    let mut c = vec![0.0f32; m*n];
    bench("sgemm 49152x72x8", || unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1);
    });
    // same flops, square-ish: M=2048 K=72 N=192
    let m2 = 2048; let n2 = 192;
    let a2 = vec![1.0f32; m2*k];
    let b2 = vec![1.0f32; k*n2];
    let mut c2 = vec![0.0f32; m2*n2];
    bench("sgemm 2048x72x192", || unsafe {
        matrixmultiply::sgemm(m2, k, n2, 1.0, a2.as_ptr(), k as isize, 1, b2.as_ptr(), n2 as isize, 1, 0.0, c2.as_mut_ptr(), n2 as isize, 1);
    });
    // 9-tap accumulation shape: M=49152, K=8, N=8, beta=1, x9
    let a3 = vec![1.0f32; m*8];
    let b3 = vec![1.0f32; 8*n];
    let mut c3 = vec![0.0f32; m*n];
    bench("9x sgemm 49152x8x8 beta1", || unsafe {
        for _ in 0..9 {
            matrixmultiply::sgemm(m, 8, n, 1.0, a3.as_ptr(), 8, 1, b3.as_ptr(), n as isize, 1, 1.0, c3.as_mut_ptr(), n as isize, 1);
        }
    });
    // scale-3 conv shape: M=768, K=576, N=64
    let m4 = 768; let k4 = 576; let n4 = 64;
    let a4 = vec![1.0f32; m4*k4];
    let b4 = vec![1.0f32; k4*n4];
    let mut c4 = vec![0.0f32; m4*n4];
    bench("sgemm 768x576x64", || unsafe {
        matrixmultiply::sgemm(m4, k4, n4, 1.0, a4.as_ptr(), k4 as isize, 1, b4.as_ptr(), n4 as isize, 1, 0.0, c4.as_mut_ptr(), n4 as isize, 1);
    });

    // im2col cost alone for 64x64x8 3x3
    use catseg::ops;
    use catseg::tensor::Tensor;
    let x = Tensor::<f32>::from_vec(&[12,64,64,8], vec![0.5; 12*64*64*8]).unwrap();
    let kk = Tensor::<f32>::from_vec(&[3,3,8,8], vec![0.1; 576]).unwrap();
    bench("conv2d full (incl im2col)", || { ops::conv2d(&x, &kk, None, 1, 1).unwrap(); });
}
