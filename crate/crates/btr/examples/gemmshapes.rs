//! Compare conv-GEMM orientations on the shapes the trunk actually uses.

use ndarray::Array2;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, label: &str) {
    let a = Array2::<f32>::from_elem((m, k), 0.5);
    let b = Array2::<f32>::from_elem((k, n), 0.25);
    let mut reps = 0;
    let t = Instant::now();
    loop {
        let c = a.dot(&b);
        std::hint::black_box(&c);
        reps += 1;
        if t.elapsed().as_secs_f64() > 0.5 {
            break;
        }
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    let gf = 2.0 * (m * k * n) as f64 / dt / 1e9;
    println!("{label}: [{m}x{k}]*[{k}x{n}] {:.2} ms  {gf:.1} GFLOP/s", dt * 1e3);
}

fn main() {
    // block1 stem, batch 32 @42x42
    bench(16, 36, 56448, "b1 stem  out-major");
    bench(56448, 36, 16, "b1 stem  pos-major");
    // block1 residual conv, batch 32 @21x21
    bench(16, 144, 14112, "b1 res   out-major");
    bench(14112, 144, 16, "b1 res   pos-major");
    // block2 residual conv, batch 32 @11x11
    bench(32, 288, 3872, "b2 res   out-major");
    bench(3872, 288, 32, "b2 res   pos-major");
    // block3 residual conv, batch 32 @6x6
    bench(32, 288, 1152, "b3 res   out-major");
    bench(1152, 288, 32, "b3 res   pos-major");
    // dense head hidden, batch*taus 256 rows
    bench(256, 1152, 256, "hidden   row-major");
}
