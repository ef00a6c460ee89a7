use fkd::mat::Mat;
use std::time::Instant;

fn main() {
    for n in [500usize, 1000] {
        let a = Mat::from_fn(n, n, |i, j| ((i * 7 + j) as f64 * 0.1).sin());
        let b = Mat::from_fn(n, 64, |i, j| ((i + j * 3) as f64 * 0.2).cos());
        let t = Instant::now();
        let mut acc = 0.0;
        for _ in 0..10 {
            acc += a.matmul(&b).get(0, 0);
        }
        let dt = t.elapsed().as_secs_f64();
        let gflops = 10.0 * 2.0 * (n * n * 64) as f64 / dt / 1e9;
        println!("n={n} x 64: {:.2} GF/s (acc {acc:.2})", gflops);

        let t = Instant::now();
        let c = a.matmul(&a);
        let dt = t.elapsed().as_secs_f64();
        println!("n={n} square: {:.2} GF/s ({:.2}s, c00={:.3})", 2.0 * (n * n * n) as f64 / dt / 1e9, dt, c.get(0,0));
    }
    // jacobi eig timing at n=500
    let n = 500;
    let mut m = Mat::from_fn(n, n, |i, j| ((i * 3 + j * 11) as f64).sin());
    m.symmetrize();
    let t = Instant::now();
    let d = fkd::eig::symmetric_eig(&m).unwrap();
    println!("eig n=500: {:.2}s (lambda0={:.3})", t.elapsed().as_secs_f64(), d.lambda[0]);
}
