// scratch throughput probe; deleted before finalizing
use promptboost::numerics::kernels::{gemm_nn, gemm_nt};
use std::time::Instant;

fn main() {
    for &(m, k, n) in &[(180usize, 48usize, 192usize), (180, 48, 260), (180, 180, 48), (48, 48, 192)] {
        let a = vec![0.5f32; m * k];
        let b = vec![0.25f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let reps = (2_000_000_000 / (2 * m * k * n)).max(1);
        let t0 = Instant::now();
        for _ in 0..reps {
            c.iter_mut().for_each(|x| *x = 0.0);
            gemm_nn(&a, &b, &mut c, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n) as f64 * reps as f64) / dt / 1e9;
        println!("gemm_nn {m}x{k}x{n}: {gflops:.2} GFLOP/s");
        let bt = vec![0.25f32; n * k];
        let t0 = Instant::now();
        for _ in 0..reps {
            c.iter_mut().for_each(|x| *x = 0.0);
            gemm_nt(&a, &bt, &mut c, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n) as f64 * reps as f64) / dt / 1e9;
        println!("gemm_nt {m}x{k}x{n}: {gflops:.2} GFLOP/s");
    }
    let (m, k, n) = (16usize, 32usize, 128usize);
    let a = vec![0.5f64; m * k];
    let b = vec![0.25f64; k * n];
    let mut c = vec![0.0f64; m * n];
    let reps = 500_000;
    let t0 = Instant::now();
    for _ in 0..reps {
        c.iter_mut().for_each(|x| *x = 0.0);
        gemm_nn(&a, &b, &mut c, m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("gemm_nn f64 {m}x{k}x{n}: {:.2} GFLOP/s", (2.0 * (m * k * n) as f64 * reps as f64) / dt / 1e9);
}
