//! Break down conv forward/backward cost by phase.

use ndarray::{Array2, Array4};
use std::time::Instant;

fn im2col(
    x: &Array4<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let (batch, in_c, h, w) = x.dim();
    let cols = batch * oh * ow;
    let x_slice = x.as_slice().unwrap();
    for c in 0..in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row_idx = (c * k + ki) * k + kj;
                let row = &mut out[row_idx * cols..(row_idx + 1) * cols];
                for b in 0..batch {
                    let src_plane = &x_slice[(b * in_c + c) * h * w..(b * in_c + c + 1) * h * w];
                    for oi in 0..oh {
                        let si = (oi * stride + ki) as isize - pad as isize;
                        let dst = &mut row[(b * oh + oi) * ow..(b * oh + oi + 1) * ow];
                        if si < 0 || si >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_row = &src_plane[si as usize * w..(si as usize + 1) * w];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let sj = (oj * stride + kj) as isize - pad as isize;
                            *d = if sj >= 0 && sj < w as isize {
                                src_row[sj as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

fn main() {
    // block1 residual conv shape, batch 32: 16->16 @ 21x21, k3 s1 p1
    let (batch, ic, oc, h) = (32usize, 16usize, 16usize, 21usize);
    let (k, stride, pad) = (3usize, 1usize, 1usize);
    let (oh, ow) = (21usize, 21usize);
    let k_len = ic * k * k;
    let cols = batch * oh * ow;

    let x = Array4::<f32>::from_elem((batch, ic, h, h), 0.1);
    let w2 = Array2::<f32>::from_elem((oc, k_len), 0.01);
    let mut col_buf = vec![0.0f32; k_len * cols];

    let reps = 300;

    let t = Instant::now();
    for _ in 0..reps {
        im2col(&x, k, stride, pad, oh, ow, &mut col_buf);
        std::hint::black_box(&col_buf);
    }
    println!("im2col:      {:.3} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let col = ndarray::ArrayView2::from_shape((k_len, cols), &col_buf).unwrap();
    let t = Instant::now();
    for _ in 0..reps {
        let y2 = w2.dot(&col);
        std::hint::black_box(&y2);
    }
    println!("fwd gemm:    {:.3} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let y2 = w2.dot(&col);
    let t = Instant::now();
    for _ in 0..reps {
        let g_eff = y2.dot(&col.t());
        std::hint::black_box(&g_eff);
    }
    println!("gw gemm:     {:.3} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t = Instant::now();
    for _ in 0..reps {
        let gcol = w2.t().dot(&y2);
        std::hint::black_box(&gcol);
    }
    println!("gcol gemm:   {:.3} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // y reorder: [oc, cols] -> [batch, oc, oh, ow] with bias
    let mut y = vec![0.0f32; batch * oc * oh * ow];
    let plane = oh * ow;
    let t = Instant::now();
    for _ in 0..reps {
        for c in 0..oc {
            let row = y2.row(c);
            let row = row.as_slice().unwrap();
            for b in 0..batch {
                y[(b * oc + c) * plane..(b * oc + c + 1) * plane]
                    .copy_from_slice(&row[b * plane..(b + 1) * plane]);
            }
        }
        std::hint::black_box(&y);
    }
    println!("y reorder:   {:.3} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
