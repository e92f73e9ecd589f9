use std::time::Instant;

fn bench(name: &str, mut f: impl FnMut()) {
    f();
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps { f(); }
    println!("{name:44} {:8.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    let m = 49152usize; let k = 72usize; let n = 8usize;
    let col = vec![1.0f32; m*k];      // row-major (m, k)
    let kern = vec![1.0f32; k*n];     // row-major (k, n)
    let mut out = vec![0.0f32; m*n];  // row-major (m, n)

    bench("normal: sgemm M=49152 K=72 N=8", || unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, col.as_ptr(), k as isize, 1, kern.as_ptr(), n as isize, 1, 0.0, out.as_mut_ptr(), n as isize, 1);
    });

    // transposed: C^T (n x m) = kern^T (n x k) @ col^T (k x m)
    // A = kern with strides (rsa=1, csa=n), B = col with strides (rsb=1, csb=k)
    // C = out with strides (rsc=1, csc=n)
    bench("transposed: sgemm M=8 K=72 N=49152", || unsafe {
        matrixmultiply::sgemm(n, k, m, 1.0, kern.as_ptr(), 1, n as isize, col.as_ptr(), 1, k as isize, 0.0, out.as_mut_ptr(), 1, n as isize);
    });

    // N=16/32/64 comparisons at conv shapes
    for (mm, kk, nn) in [(12288usize, 72usize, 16usize), (12288, 144, 16), (3072, 288, 32), (3072, 144, 32), (768, 576, 64)] {
        let a = vec![1.0f32; mm*kk];
        let b = vec![1.0f32; kk*nn];
        let mut c = vec![0.0f32; mm*nn];
        bench(&format!("normal M={mm} K={kk} N={nn}"), || unsafe {
            matrixmultiply::sgemm(mm, kk, nn, 1.0, a.as_ptr(), kk as isize, 1, b.as_ptr(), nn as isize, 1, 0.0, c.as_mut_ptr(), nn as isize, 1);
        });
        bench(&format!("transp M={nn} K={kk} N={mm}"), || unsafe {
            matrixmultiply::sgemm(nn, kk, mm, 1.0, b.as_ptr(), 1, nn as isize, a.as_ptr(), 1, kk as isize, 0.0, c.as_mut_ptr(), 1, nn as isize);
        });
    }
}
