//! Pooling and elementwise layers on [batch, channel, h, w] maps.

use ndarray::{Array1, Array4};

use super::{ParamRef, Scalar};

/// Max pool, kernel 3, stride 2, padding 1: halves each spatial dim with
/// ceiling rounding (same arithmetic the Impala trunk uses at every scale).
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<PoolCache>,
}

struct PoolCache {
    in_shape: (usize, usize, usize, usize),
    // chosen source index inside h*w per output element
    argmax: Vec<u32>,
}

pub fn pool_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

impl MaxPool2d {
    pub fn halving() -> Self {
        Self {
            kernel: 3,
            stride: 2,
            pad: 1,
            cache: None,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (
            pool_out_dim(h, self.kernel, self.stride, self.pad),
            pool_out_dim(w, self.kernel, self.stride, self.pad),
        )
    }

    pub fn forward<S: Scalar>(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let (batch, c, h, w) = x.dim();
        let (oh, ow) = self.out_shape(h, w);
        let mut y = Array4::from_elem((batch, c, oh, ow), S::ZERO);
        let mut argmax = vec![0u32; batch * c * oh * ow];
        let x_slice = x.as_slice().unwrap();
        let y_slice = y.as_slice_mut().unwrap();
        let mut out_idx = 0;
        for b in 0..batch {
            for ch in 0..c {
                let plane = &x_slice[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = S::NEG_INF;
                        let mut best_idx = 0u32;
                        for ki in 0..self.kernel {
                            let si = (oi * self.stride + ki) as isize - self.pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let sj = (oj * self.stride + kj) as isize - self.pad as isize;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                let idx = si as usize * w + sj as usize;
                                let v = plane[idx];
                                if best < v {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        y_slice[out_idx] = best;
                        argmax[out_idx] = best_idx;
                        out_idx += 1;
                    }
                }
            }
        }
        self.cache = train.then(|| PoolCache {
            in_shape: (batch, c, h, w),
            argmax,
        });
        y
    }

    pub fn backward<S: Scalar>(&mut self, gy: &Array4<S>) -> Array4<S> {
        let cache = self.cache.take().expect("backward without forward");
        let (batch, c, h, w) = cache.in_shape;
        let mut gx = Array4::from_elem((batch, c, h, w), S::ZERO);
        let gx_slice = gx.as_slice_mut().unwrap();
        let gy_slice = gy.as_slice().unwrap();
        let per_plane = gy.dim().2 * gy.dim().3;
        for p in 0..batch * c {
            let base = p * h * w;
            for k in 0..per_plane {
                let src = cache.argmax[p * per_plane + k] as usize;
                gx_slice[base + src] = gx_slice[base + src] + gy_slice[p * per_plane + k];
            }
        }
        gx
    }
}

/// Max pool onto a fixed out x out grid. Window for output cell i spans
/// [floor(i*H/out), ceil((i+1)*H/out)); windows overlap when H is not a
/// multiple of out and the layer is the identity when H == out.
pub struct AdaptiveMaxPool {
    pub out: usize,
    cache: Option<PoolCache>,
}

pub fn adaptive_window(i: usize, input: usize, out: usize) -> (usize, usize) {
    let start = i * input / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end)
}

impl AdaptiveMaxPool {
    pub fn new(out: usize) -> Self {
        Self { out, cache: None }
    }

    pub fn forward<S: Scalar>(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let (batch, c, h, w) = x.dim();
        let o = self.out;
        assert!(
            h >= o && w >= o,
            "adaptive maxpool needs input >= {o}x{o}, got {h}x{w}"
        );
        let mut y = Array4::from_elem((batch, c, o, o), S::ZERO);
        let mut argmax = vec![0u32; batch * c * o * o];
        let x_slice = x.as_slice().unwrap();
        let y_slice = y.as_slice_mut().unwrap();
        let mut out_idx = 0;
        for b in 0..batch {
            for ch in 0..c {
                let plane = &x_slice[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for oi in 0..o {
                    let (r0, r1) = adaptive_window(oi, h, o);
                    for oj in 0..o {
                        let (c0, c1) = adaptive_window(oj, w, o);
                        let mut best = S::NEG_INF;
                        let mut best_idx = 0u32;
                        for si in r0..r1 {
                            for sj in c0..c1 {
                                let idx = si * w + sj;
                                if best < plane[idx] {
                                    best = plane[idx];
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        y_slice[out_idx] = best;
                        argmax[out_idx] = best_idx;
                        out_idx += 1;
                    }
                }
            }
        }
        self.cache = train.then(|| PoolCache {
            in_shape: (batch, c, h, w),
            argmax,
        });
        y
    }

    pub fn backward<S: Scalar>(&mut self, gy: &Array4<S>) -> Array4<S> {
        let cache = self.cache.take().expect("backward without forward");
        let (batch, c, h, w) = cache.in_shape;
        let mut gx = Array4::from_elem((batch, c, h, w), S::ZERO);
        let gx_slice = gx.as_slice_mut().unwrap();
        let gy_slice = gy.as_slice().unwrap();
        let per_plane = self.out * self.out;
        for p in 0..batch * c {
            let base = p * h * w;
            for k in 0..per_plane {
                let src = cache.argmax[p * per_plane + k] as usize;
                gx_slice[base + src] = gx_slice[base + src] + gy_slice[p * per_plane + k];
            }
        }
        gx
    }
}

/// ReLU on conv maps; cached output doubles as the dormant-probe source
/// (channel granularity).
pub struct Relu4<S> {
    pub name: String,
    pub cache_y: Option<Array4<S>>,
}

impl<S: Scalar> Relu4<S> {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cache_y: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let y = x.mapv(|v| v.max_s(S::ZERO));
        self.cache_y = train.then(|| y.clone());
        y
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let y = self.cache_y.as_ref().expect("backward without forward");
        let mut gx = gy.clone();
        gx.zip_mut_with(y, |g, &v| {
            if v <= S::ZERO {
                *g = S::ZERO;
            }
        });
        gx
    }

    /// Mean |activation| per channel from the cached forward.
    pub fn channel_mean_abs(&self) -> Vec<f64> {
        let y = self.cache_y.as_ref().expect("no cached activations");
        let (batch, c, h, w) = y.dim();
        let denom = (batch * h * w).max(1) as f64;
        let y_slice = y.as_slice().unwrap();
        let mut acc = vec![0.0f64; c];
        for b in 0..batch {
            for (ch, a) in acc.iter_mut().enumerate() {
                let plane = &y_slice[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                *a += plane.iter().map(|v| v.to_f64().abs()).sum::<f64>();
            }
        }
        for a in acc.iter_mut() {
            *a /= denom;
        }
        acc
    }
}

/// Normalizes each sample over (channels, h, w) with a learned per-channel
/// scale and shift, so parameter count stays independent of resolution.
pub struct ChannelNorm<S> {
    pub name: String,
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub g_gamma: Array1<S>,
    pub g_beta: Array1<S>,
    eps: f64,
    cache: Option<(Array4<S>, Vec<f64>)>, // (x_hat, inv_std per sample)
}

impl<S: Scalar> ChannelNorm<S> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Array1::from_elem(channels, S::ONE),
            beta: Array1::from_elem(channels, S::ZERO),
            g_gamma: Array1::from_elem(channels, S::ZERO),
            g_beta: Array1::from_elem(channels, S::ZERO),
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let (batch, c, h, w) = x.dim();
        let n = (c * h * w) as f64;
        let mut x_hat = x.clone();
        let mut inv_stds = vec![0.0f64; batch];
        for b in 0..batch {
            let mut sample = x_hat.index_axis_mut(ndarray::Axis(0), b);
            let mean = sample.iter().map(|v| v.to_f64()).sum::<f64>() / n;
            let var = sample
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            inv_stds[b] = inv_std;
            for v in sample.iter_mut() {
                *v = S::from_f64((v.to_f64() - mean) * inv_std);
            }
        }
        let mut y = x_hat.clone();
        for b in 0..batch {
            for ch in 0..c {
                let g = self.gamma[ch];
                let be = self.beta[ch];
                for v in y
                    .index_axis_mut(ndarray::Axis(0), b)
                    .index_axis_mut(ndarray::Axis(0), ch)
                    .iter_mut()
                {
                    *v = *v * g + be;
                }
            }
        }
        self.cache = train.then(|| (x_hat, inv_stds));
        let _ = (h, w);
        y
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let (x_hat, inv_stds) = self.cache.as_ref().expect("backward without forward");
        let (batch, c, h, w) = gy.dim();
        let n = (c * h * w) as f64;
        let mut gx = Array4::from_elem(gy.raw_dim(), S::ZERO);
        for b in 0..batch {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for ch in 0..c {
                let gam = self.gamma[ch].to_f64();
                for i in 0..h {
                    for j in 0..w {
                        let gyv = gy[[b, ch, i, j]].to_f64();
                        let xh = x_hat[[b, ch, i, j]].to_f64();
                        let gxh = gyv * gam;
                        sum_g += gxh;
                        sum_gx += gxh * xh;
                        self.g_gamma[ch] = self.g_gamma[ch] + S::from_f64(gyv * xh);
                        self.g_beta[ch] = self.g_beta[ch] + S::from_f64(gyv);
                    }
                }
            }
            let mean_g = sum_g / n;
            let mean_gx = sum_gx / n;
            for ch in 0..c {
                let gam = self.gamma[ch].to_f64();
                for i in 0..h {
                    for j in 0..w {
                        let gxh = gy[[b, ch, i, j]].to_f64() * gam;
                        let xh = x_hat[[b, ch, i, j]].to_f64();
                        gx[[b, ch, i, j]] =
                            S::from_f64((gxh - mean_g - xh * mean_gx) * inv_stds[b]);
                    }
                }
            }
        }
        gx
    }

    pub fn zero_grads(&mut self) {
        self.g_gamma.fill(S::ZERO);
        self.g_beta.fill(S::ZERO);
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        f(ParamRef {
            name: format!("{prefix}.{}.gamma", self.name),
            shape: self.gamma.shape().to_vec(),
            w: self.gamma.as_slice_mut().unwrap(),
            g: self.g_gamma.as_slice_mut().unwrap(),
        });
        f(ParamRef {
            name: format!("{prefix}.{}.beta", self.name),
            shape: self.beta.shape().to_vec(),
            w: self.beta.as_slice_mut().unwrap(),
            g: self.g_beta.as_slice_mut().unwrap(),
        });
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}
