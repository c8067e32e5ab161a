//! 2-D convolution via im2col + GEMM, with optional spectral normalization.

use ndarray::{Array1, Array2, Array4, ArrayView2};
use rand::Rng;

use super::{fan_in_uniform, ParamRef, Scalar, StateRef};

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Power-iteration state for spectral normalization of a conv weight viewed
/// as a [out_c, in_c*kh*kw] matrix. `u` persists across steps; `v` and sigma
/// are recomputed from (u, w) on every use so they never go stale after an
/// optimizer update.
pub struct SpectralState<S> {
    pub u: Array1<S>,
}

impl<S: Scalar> SpectralState<S> {
    fn new<R: Rng>(out_c: usize, rng: &mut R) -> Self {
        let mut u = Array1::from_elem(out_c, S::ZERO);
        for v in u.iter_mut() {
            *v = S::from_f64(rng.gen_range(-1.0..1.0));
        }
        normalize(&mut u);
        Self { u }
    }
}

fn normalize<S: Scalar>(v: &mut Array1<S>) {
    let norm = v.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
    let scale = S::from_f64(1.0 / norm.max(1e-12));
    v.mapv_inplace(|x| x * scale);
}

pub struct Conv2d<S> {
    pub name: String,
    pub w: Array4<S>, // [out_c, in_c, kh, kw]
    pub b: Array1<S>,
    pub gw: Array4<S>,
    pub gb: Array1<S>,
    pub stride: usize,
    pub pad: usize,
    pub spectral: Option<SpectralState<S>>,
    cache: Option<ConvCache<S>>,
    col: Vec<S>,
    // col currently holds the im2col of the cached input, so backward can
    // skip rebuilding it
    col_fresh: bool,
}

struct ConvCache<S> {
    x: Array4<S>,
    sigma: f64,
    v: Array1<S>,
    u: Array1<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng>(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let mut w = Array4::from_elem((out_c, in_c, kernel, kernel), S::ZERO);
        let mut b = Array1::from_elem(out_c, S::ZERO);
        let fan_in = in_c * kernel * kernel;
        fan_in_uniform(rng, fan_in, w.as_slice_mut().unwrap());
        fan_in_uniform(rng, fan_in, b.as_slice_mut().unwrap());
        Self {
            name: name.to_string(),
            gw: Array4::from_elem(w.dim(), S::ZERO),
            gb: Array1::from_elem(b.dim(), S::ZERO),
            w,
            b,
            stride,
            pad,
            spectral: spectral.then(|| SpectralState::new(out_c, rng)),
            cache: None,
            col: Vec::new(),
            col_fresh: false,
        }
    }

    fn w2(&self) -> ArrayView2<'_, S> {
        let (o, i, kh, kw) = self.w.dim();
        self.w.view().into_shape_with_order((o, i * kh * kw)).unwrap()
    }

    /// sigma_hat and the right singular-vector estimate for the current u.
    fn sigma_v(&self) -> (f64, Array1<S>) {
        let state = self.spectral.as_ref().expect("sigma_v without spectral");
        let w2 = self.w2();
        let mut v = w2.t().dot(&state.u);
        normalize(&mut v);
        let wv = w2.dot(&v);
        let sigma = state
            .u
            .iter()
            .zip(wv.iter())
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum::<f64>();
        (sigma, v)
    }

    /// One power-iteration update of u. Called once per training step.
    pub fn spectral_normalize_step(&mut self) {
        if self.spectral.is_none() {
            return;
        }
        let w2 = self.w2();
        let u = &self.spectral.as_ref().unwrap().u;
        let mut v = w2.t().dot(u);
        normalize(&mut v);
        let mut u_new = w2.dot(&v);
        normalize(&mut u_new);
        self.spectral.as_mut().unwrap().u = u_new;
    }

    /// Largest-singular-value estimate from the persisted u (1.0 when
    /// spectral norm is off).
    pub fn sigma_estimate(&self) -> f64 {
        if self.spectral.is_some() {
            self.sigma_v().0
        } else {
            1.0
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        (
            conv_out_dim(h, k, self.stride, self.pad),
            conv_out_dim(w, k, self.stride, self.pad),
        )
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let (batch, in_c, h, w) = x.dim();
        let (out_c, w_in_c, kh, kw) = self.w.dim();
        assert_eq!(in_c, w_in_c, "{}: channel mismatch", self.name);
        let (oh, ow) = self.out_shape(h, w);
        let k_len = in_c * kh * kw;
        let cols = batch * oh * ow;

        if self.col.len() != k_len * cols {
            self.col = vec![S::ZERO; k_len * cols];
        }
        im2col4(x, kh, self.stride, self.pad, oh, ow, &mut self.col);
        self.col_fresh = train;
        let col = ArrayView2::from_shape((k_len, cols), &self.col).unwrap();
        let mut y2 = self.w2().dot(&col); // [out_c, batch*oh*ow]

        let (sigma, v, u) = if self.spectral.is_some() {
            let (sigma, v) = self.sigma_v();
            let scale = S::from_f64(1.0 / sigma.max(1e-12));
            y2.mapv_inplace(|val| val * scale);
            (sigma, v, self.spectral.as_ref().unwrap().u.clone())
        } else {
            (1.0, Array1::from_elem(0, S::ZERO), Array1::from_elem(0, S::ZERO))
        };

        let mut y = Array4::from_elem((batch, out_c, oh, ow), S::ZERO);
        {
            let y_slice = y.as_slice_mut().unwrap();
            let plane = oh * ow;
            for c in 0..out_c {
                let bias = self.b[c];
                let row = y2.row(c);
                let row = row.as_slice().unwrap();
                for b in 0..batch {
                    let dst = &mut y_slice[(b * out_c + c) * plane..(b * out_c + c + 1) * plane];
                    let src = &row[b * plane..(b + 1) * plane];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s + bias;
                    }
                }
            }
        }
        if train {
            self.cache = Some(ConvCache {
                x: x.clone(),
                sigma,
                v,
                u,
            });
        } else {
            self.cache = None;
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let cache = self.cache.take().expect("backward without forward");
        let x = &cache.x;
        let (batch, in_c, h, w) = x.dim();
        let (out_c, _, kh, kw) = self.w.dim();
        let (oh, ow) = self.out_shape(h, w);
        let k_len = in_c * kh * kw;
        let cols = batch * oh * ow;
        let plane = oh * ow;

        if !self.col_fresh || self.col.len() != k_len * cols {
            if self.col.len() != k_len * cols {
                self.col = vec![S::ZERO; k_len * cols];
            }
            im2col4(x, kh, self.stride, self.pad, oh, ow, &mut self.col);
        }
        self.col_fresh = false;
        let col = ArrayView2::from_shape((k_len, cols), &self.col).unwrap();

        // gy as [out_c, batch*oh*ow] in the same column order as the forward
        let mut gy2 = Array2::from_elem((out_c, cols), S::ZERO);
        {
            let gy_slice = gy.as_slice().unwrap();
            for c in 0..out_c {
                let mut row = gy2.row_mut(c);
                let row = row.as_slice_mut().unwrap();
                for b in 0..batch {
                    row[b * plane..(b + 1) * plane].copy_from_slice(
                        &gy_slice[(b * out_c + c) * plane..(b * out_c + c + 1) * plane],
                    );
                }
            }
        }

        for c in 0..out_c {
            let s: S = gy2.row(c).iter().fold(S::ZERO, |acc, &v| acc + v);
            self.gb[c] = self.gb[c] + s;
        }

        // grad wrt the effective (possibly normalized) weight
        let g_eff = gy2.dot(&col.t()); // [out_c, k_len]

        let w_grad_flat = if self.spectral.is_some() {
            // w_hat = w / sigma with u, v treated as constants:
            // dL/dw = (g_eff - <g_eff, w_hat> u v^T) / sigma
            let sigma = cache.sigma.max(1e-12);
            let w2 = self.w2();
            let mut inner = 0.0f64;
            for (g, wv) in g_eff.iter().zip(w2.iter()) {
                inner += g.to_f64() * wv.to_f64() / sigma;
            }
            let inv_sigma = S::from_f64(1.0 / sigma);
            let inner_s = S::from_f64(inner);
            let mut out = g_eff;
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let ui = cache.u[i];
                for (j, val) in row.iter_mut().enumerate() {
                    *val = (*val - inner_s * ui * cache.v[j]) * inv_sigma;
                }
            }
            out
        } else {
            g_eff
        };
        {
            let gw_flat = self.gw.as_slice_mut().unwrap();
            for (dst, src) in gw_flat.iter_mut().zip(w_grad_flat.iter()) {
                *dst = *dst + *src;
            }
        }

        // input gradient through the effective weight
        let gcol = if self.spectral.is_some() {
            let scale = S::from_f64(1.0 / cache.sigma.max(1e-12));
            let mut w_eff = self.w2().to_owned();
            w_eff.mapv_inplace(|v| v * scale);
            w_eff.t().dot(&gy2)
        } else {
            self.w2().t().dot(&gy2)
        }; // [k_len, cols]
        let mut gx = Array4::from_elem((batch, in_c, h, w), S::ZERO);
        col2im(
            &gcol,
            batch,
            in_c,
            h,
            w,
            kh,
            self.stride,
            self.pad,
            oh,
            ow,
            &mut gx,
        );
        gx
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(S::ZERO);
        self.gb.fill(S::ZERO);
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        f(ParamRef {
            name: format!("{prefix}.{}.w", self.name),
            shape: self.w.shape().to_vec(),
            w: self.w.as_slice_mut().unwrap(),
            g: self.gw.as_slice_mut().unwrap(),
        });
        f(ParamRef {
            name: format!("{prefix}.{}.b", self.name),
            shape: self.b.shape().to_vec(),
            w: self.b.as_slice_mut().unwrap(),
            g: self.gb.as_slice_mut().unwrap(),
        });
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateRef<'_, S>)) {
        if let Some(sp) = self.spectral.as_mut() {
            f(StateRef {
                name: format!("{prefix}.{}.sn_u", self.name),
                w: sp.u.as_slice_mut().unwrap(),
            });
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Lay out every kernel patch of every sample as one column:
/// col[(c*kh*kw + ki*kw + kj), (b*oh*ow + oi*ow + oj)] = x[b, c, ...].
/// Out-of-bounds (padding) positions stay zero.
fn im2col4<S: Scalar>(
    x: &Array4<S>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [S],
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
                            dst.fill(S::ZERO);
                            continue;
                        }
                        let src_row = &src_plane[si as usize * w..(si as usize + 1) * w];
                        let src_row = src_row;
                        // valid output column range, so the hot loop is branch-free
                        let oj_lo = if kj >= pad {
                            0
                        } else {
                            (pad - kj).div_ceil(stride)
                        }
                        .min(ow);
                        let hi_num = (w + pad) as isize - kj as isize - 1;
                        let oj_hi = if hi_num < 0 {
                            oj_lo
                        } else {
                            ((hi_num as usize / stride) + 1).clamp(oj_lo, ow)
                        };
                        dst[..oj_lo].fill(S::ZERO);
                        if oj_lo < oj_hi {
                            if stride == 1 {
                                let s0 = oj_lo + kj - pad;
                                dst[oj_lo..oj_hi]
                                    .copy_from_slice(&src_row[s0..s0 + (oj_hi - oj_lo)]);
                            } else {
                                for oj in oj_lo..oj_hi {
                                    dst[oj] = src_row[oj * stride + kj - pad];
                                }
                            }
                        }
                        dst[oj_hi..].fill(S::ZERO);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    gcol: &Array2<S>,
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut Array4<S>,
) {
    let gx_slice = gx.as_slice_mut().unwrap();
    for c in 0..in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row_idx = (c * k + ki) * k + kj;
                let row = gcol.row(row_idx);
                let row = row.as_slice().unwrap();
                let oj_lo = if kj >= pad {
                    0
                } else {
                    (pad - kj).div_ceil(stride)
                }
                .min(ow);
                let hi_num = (w + pad) as isize - kj as isize - 1;
                let oj_hi = if hi_num < 0 {
                    oj_lo
                } else {
                    ((hi_num as usize / stride) + 1).clamp(oj_lo, ow)
                };
                for b in 0..batch {
                    let dst_plane =
                        &mut gx_slice[(b * in_c + c) * h * w..(b * in_c + c + 1) * h * w];
                    for oi in 0..oh {
                        let si = (oi * stride + ki) as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src = &row[(b * oh + oi) * ow..(b * oh + oi + 1) * ow];
                        let dst_row =
                            &mut dst_plane[si as usize * w..(si as usize + 1) * w];
                        if stride == 1 {
                            let s0 = oj_lo + kj - pad;
                            for (d, s) in dst_row[s0..s0 + (oj_hi - oj_lo)]
                                .iter_mut()
                                .zip(&src[oj_lo..oj_hi])
                            {
                                *d = *d + *s;
                            }
                        } else {
                            for oj in oj_lo..oj_hi {
                                let sj = oj * stride + kj - pad;
                                dst_row[sj] = dst_row[sj] + src[oj];
                            }
                        }
                    }
                }
            }
        }
    }
}
