use std::time::Instant;
use voxseg_core::gemm::gemm_acc_strided;
use voxseg_core::rng::Rng;

fn bench(m: usize, k: usize, n: usize, a_s: usize, b_s: usize, reps: usize, tag: &str) {
    let mut rng = Rng::new(1);
    let a: Vec<f32> = (0..m * a_s).map(|_| rng.range_f64(-1.0, 1.0) as f32).collect();
    let b: Vec<f32> = (0..k * b_s).map(|_| rng.range_f64(-1.0, 1.0) as f32).collect();
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        gemm_acc_strided(&mut c, n, &a, a_s, &b, b_s, m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let macs = (m * k * n) as f64;
    println!("{tag}: {m}x{k}x{n} (a_s={a_s} b_s={b_s}): {:.2} ms = {:.2} GMAC/s", dt * 1e3, macs / dt / 1e9);
}

#[test]
#[ignore]
fn gemm_shapes() {
    bench(16, 432, 1024, 432, 1024, 20, "fwd-like");
    bench(432, 16, 1024, 16, 1024, 20, "bwdin-like");
    bench(432, 1024, 16, 1040, 16, 20, "bwdw-like padded");
    bench(432, 1024, 16, 1024, 16, 20, "bwdw-like dense");
    bench(432, 1024, 64, 1040, 64, 10, "bwdw wide-n");
    bench(1728, 64, 64, 64, 64, 20, "bwdw 8cub");
}
