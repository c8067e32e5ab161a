//! Prototype: direct 3x3 stride-1 pad-1 conv vs im2col, single core.

use std::time::Instant;

// y[oc] += sum_ic conv(x[ic], w[oc,ic]) ; all planes h*w, pad 1
fn direct3x3(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    y: &mut [f32],
    batch: usize,
    ic: usize,
    oc: usize,
    h: usize,
    wd: usize,
) {
    let plane = h * wd;
    for s in 0..batch {
        let xs = &x[s * ic * plane..(s + 1) * ic * plane];
        let ys = &mut y[s * oc * plane..(s + 1) * oc * plane];
        for o in 0..oc {
            let yo = &mut ys[o * plane..(o + 1) * plane];
            yo.fill(b[o]);
            for i in 0..ic {
                let xi = &xs[i * plane..(i + 1) * plane];
                let wk = &w[(o * ic + i) * 9..(o * ic + i + 1) * 9];
                for ki in 0..3usize {
                    for kj in 0..3usize {
                        let wv = wk[ki * 3 + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        // output row oi reads input row oi+ki-1
                        let di = ki as isize - 1;
                        let dj = kj as isize - 1;
                        for oi in 0..h {
                            let si = oi as isize + di;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let src_row = &xi[si as usize * wd..(si as usize + 1) * wd];
                            let dst_row = &mut yo[oi * wd..(oi + 1) * wd];
                            // column shift: dst[oj] += w * src[oj+dj]
                            if dj == 0 {
                                for j in 0..wd {
                                    dst_row[j] += wv * src_row[j];
                                }
                            } else if dj == 1 {
                                for j in 0..wd - 1 {
                                    dst_row[j] += wv * src_row[j + 1];
                                }
                            } else {
                                for j in 1..wd {
                                    dst_row[j] += wv * src_row[j - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn main() {
    let batch = 32;
    for &(ic, oc, h) in &[(16usize, 16usize, 21usize), (32, 32, 11), (4, 16, 42), (32, 32, 6)] {
        let plane = h * h;
        let x = vec![0.1f32; batch * ic * plane];
        let w = vec![0.01f32; oc * ic * 9];
        let b = vec![0.0f32; oc];
        let mut y = vec![0.0f32; batch * oc * plane];
        let reps = 200;
        let t = Instant::now();
        for _ in 0..reps {
            direct3x3(&x, &w, &b, &mut y, batch, ic, oc, h, h);
            std::hint::black_box(&y);
        }
        let dt = t.elapsed().as_secs_f64() / reps as f64;
        let flops = 2.0 * (batch * plane * 9 * ic * oc) as f64;
        println!(
            "direct3x3 {ic}->{oc} @{h}x{h} batch{batch}: {:.2} ms, {:.1} GFLOP/s",
            dt * 1e3,
            flops / dt / 1e9
        );
    }
}
