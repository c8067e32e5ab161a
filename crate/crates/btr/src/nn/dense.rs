//! Dense layers: plain linear, factorized-noise linear, layer norm, ReLU.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{fan_in_uniform, ParamRef, Scalar};

pub struct Linear<S> {
    pub name: String,
    pub w: Array2<S>, // [out, in]
    pub b: Array1<S>,
    pub gw: Array2<S>,
    pub gb: Array1<S>,
    cache_x: Option<Array2<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut w = Array2::from_elem((out_dim, in_dim), S::ZERO);
        let mut b = Array1::from_elem(out_dim, S::ZERO);
        fan_in_uniform(rng, in_dim, w.as_slice_mut().unwrap());
        fan_in_uniform(rng, in_dim, b.as_slice_mut().unwrap());
        Self {
            name: name.to_string(),
            gw: Array2::from_elem(w.dim(), S::ZERO),
            gb: Array1::from_elem(b.dim(), S::ZERO),
            w,
            b,
            cache_x: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }
    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&mut self, x: &Array2<S>, train: bool) -> Array2<S> {
        let mut y = x.dot(&self.w.t());
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(self.b.iter()) {
                *v = *v + *b;
            }
        }
        self.cache_x = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        let x = self.cache_x.as_ref().expect("backward without forward");
        self.gw = &self.gw + &gy.t().dot(x);
        self.gb = &self.gb + &gy.sum_axis(Axis(0));
        gy.dot(&self.w)
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

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Linear layer with factorized Gaussian noise. Effective weights are
/// mu + sigma * f(eps_out) f(eps_in)^T with f(x) = sign(x) sqrt(|x|);
/// zeroed noise reduces the layer to its mu parameters.
pub struct NoisyLinear<S> {
    pub name: String,
    pub w_mu: Array2<S>,
    pub w_sigma: Array2<S>,
    pub b_mu: Array1<S>,
    pub b_sigma: Array1<S>,
    pub g_w_mu: Array2<S>,
    pub g_w_sigma: Array2<S>,
    pub g_b_mu: Array1<S>,
    pub g_b_sigma: Array1<S>,
    // f(eps), not raw eps; zeros mean "noise off".
    f_eps_in: Array1<S>,
    f_eps_out: Array1<S>,
    cache: Option<NoisyCache<S>>,
}

struct NoisyCache<S> {
    x: Array2<S>,
    w_eff: Array2<S>,
}

fn noise_transform(x: f64) -> f64 {
    x.signum() * x.abs().sqrt()
}

impl<S: Scalar> NoisyLinear<S> {
    pub fn new<R: Rng>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        sigma0: f64,
        rng: &mut R,
    ) -> Self {
        let mut w_mu = Array2::from_elem((out_dim, in_dim), S::ZERO);
        let mut b_mu = Array1::from_elem(out_dim, S::ZERO);
        fan_in_uniform(rng, in_dim, w_mu.as_slice_mut().unwrap());
        fan_in_uniform(rng, in_dim, b_mu.as_slice_mut().unwrap());
        let sigma_init = S::from_f64(sigma0 / (in_dim as f64).sqrt());
        Self {
            name: name.to_string(),
            g_w_mu: Array2::from_elem((out_dim, in_dim), S::ZERO),
            g_w_sigma: Array2::from_elem((out_dim, in_dim), S::ZERO),
            g_b_mu: Array1::from_elem(out_dim, S::ZERO),
            g_b_sigma: Array1::from_elem(out_dim, S::ZERO),
            w_mu,
            w_sigma: Array2::from_elem((out_dim, in_dim), sigma_init),
            b_mu,
            b_sigma: Array1::from_elem(out_dim, sigma_init),
            f_eps_in: Array1::from_elem(in_dim, S::ZERO),
            f_eps_out: Array1::from_elem(out_dim, S::ZERO),
            cache: None,
        }
    }

    pub fn sample_noise<R: Rng>(&mut self, rng: &mut R) {
        for v in self.f_eps_in.iter_mut() {
            *v = S::from_f64(noise_transform(rng.sample::<f64, _>(StandardNormal)));
        }
        for v in self.f_eps_out.iter_mut() {
            *v = S::from_f64(noise_transform(rng.sample::<f64, _>(StandardNormal)));
        }
    }

    pub fn zero_noise(&mut self) {
        self.f_eps_in.fill(S::ZERO);
        self.f_eps_out.fill(S::ZERO);
    }

    pub fn effective_weight(&self) -> Array2<S> {
        let mut w = self.w_mu.clone();
        for (i, mut row) in w.rows_mut().into_iter().enumerate() {
            let fo = self.f_eps_out[i];
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v + self.w_sigma[[i, j]] * fo * self.f_eps_in[j];
            }
        }
        w
    }

    pub fn forward(&mut self, x: &Array2<S>, train: bool) -> Array2<S> {
        let w_eff = self.effective_weight();
        let mut y = x.dot(&w_eff.t());
        for mut row in y.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v + self.b_mu[i] + self.b_sigma[i] * self.f_eps_out[i];
            }
        }
        self.cache = train.then(|| NoisyCache { x: x.clone(), w_eff });
        y
    }

    pub fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        let cache = self.cache.as_ref().expect("backward without forward");
        let g_w_eff = gy.t().dot(&cache.x);
        let g_b = gy.sum_axis(Axis(0));
        for i in 0..self.w_mu.nrows() {
            let fo = self.f_eps_out[i];
            for j in 0..self.w_mu.ncols() {
                let g = g_w_eff[[i, j]];
                self.g_w_mu[[i, j]] = self.g_w_mu[[i, j]] + g;
                self.g_w_sigma[[i, j]] = self.g_w_sigma[[i, j]] + g * fo * self.f_eps_in[j];
            }
            self.g_b_mu[i] = self.g_b_mu[i] + g_b[i];
            self.g_b_sigma[i] = self.g_b_sigma[i] + g_b[i] * fo;
        }
        gy.dot(&cache.w_eff)
    }

    pub fn zero_grads(&mut self) {
        self.g_w_mu.fill(S::ZERO);
        self.g_w_sigma.fill(S::ZERO);
        self.g_b_mu.fill(S::ZERO);
        self.g_b_sigma.fill(S::ZERO);
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        f(ParamRef {
            name: format!("{prefix}.{}.w_mu", self.name),
            shape: self.w_mu.shape().to_vec(),
            w: self.w_mu.as_slice_mut().unwrap(),
            g: self.g_w_mu.as_slice_mut().unwrap(),
        });
        f(ParamRef {
            name: format!("{prefix}.{}.w_sigma", self.name),
            shape: self.w_sigma.shape().to_vec(),
            w: self.w_sigma.as_slice_mut().unwrap(),
            g: self.g_w_sigma.as_slice_mut().unwrap(),
        });
        f(ParamRef {
            name: format!("{prefix}.{}.b_mu", self.name),
            shape: self.b_mu.shape().to_vec(),
            w: self.b_mu.as_slice_mut().unwrap(),
            g: self.g_b_mu.as_slice_mut().unwrap(),
        });
        f(ParamRef {
            name: format!("{prefix}.{}.b_sigma", self.name),
            shape: self.b_sigma.shape().to_vec(),
            w: self.b_sigma.as_slice_mut().unwrap(),
            g: self.g_b_sigma.as_slice_mut().unwrap(),
        });
    }

    pub fn mu_count(&self) -> usize {
        self.w_mu.len() + self.b_mu.len()
    }
    pub fn sigma_count(&self) -> usize {
        self.w_sigma.len() + self.b_sigma.len()
    }
}

/// Either head-layer flavor; noisy nets are an ablation flag.
pub enum DenseLayer<S> {
    Plain(Linear<S>),
    Noisy(NoisyLinear<S>),
}

impl<S: Scalar> DenseLayer<S> {
    pub fn forward(&mut self, x: &Array2<S>, train: bool) -> Array2<S> {
        match self {
            DenseLayer::Plain(l) => l.forward(x, train),
            DenseLayer::Noisy(l) => l.forward(x, train),
        }
    }
    pub fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        match self {
            DenseLayer::Plain(l) => l.backward(gy),
            DenseLayer::Noisy(l) => l.backward(gy),
        }
    }
    pub fn zero_grads(&mut self) {
        match self {
            DenseLayer::Plain(l) => l.zero_grads(),
            DenseLayer::Noisy(l) => l.zero_grads(),
        }
    }
    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        match self {
            DenseLayer::Plain(l) => l.visit_params(prefix, f),
            DenseLayer::Noisy(l) => l.visit_params(prefix, f),
        }
    }
    pub fn sample_noise<R: Rng>(&mut self, rng: &mut R) {
        if let DenseLayer::Noisy(l) = self {
            l.sample_noise(rng);
        }
    }
    pub fn zero_noise(&mut self) {
        if let DenseLayer::Noisy(l) = self {
            l.zero_noise();
        }
    }
    pub fn mu_count(&self) -> usize {
        match self {
            DenseLayer::Plain(l) => l.param_count(),
            DenseLayer::Noisy(l) => l.mu_count(),
        }
    }
    pub fn sigma_count(&self) -> usize {
        match self {
            DenseLayer::Plain(_) => 0,
            DenseLayer::Noisy(l) => l.sigma_count(),
        }
    }
    pub fn mu_weight(&self) -> &Array2<S> {
        match self {
            DenseLayer::Plain(l) => &l.w,
            DenseLayer::Noisy(l) => &l.w_mu,
        }
    }
}

/// Layer norm over the feature axis with learned per-feature scale and shift.
pub struct LayerNorm<S> {
    pub name: String,
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub g_gamma: Array1<S>,
    pub g_beta: Array1<S>,
    eps: f64,
    cache: Option<(Array2<S>, Array1<S>)>, // (x_hat, inv_std per row)
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Array1::from_elem(dim, S::ONE),
            beta: Array1::from_elem(dim, S::ZERO),
            g_gamma: Array1::from_elem(dim, S::ZERO),
            g_beta: Array1::from_elem(dim, S::ZERO),
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<S>, train: bool) -> Array2<S> {
        let d = x.ncols();
        let inv_d = 1.0 / d as f64;
        let mut x_hat = x.clone();
        let mut inv_stds = Array1::from_elem(x.nrows(), S::ZERO);
        for (r, mut row) in x_hat.rows_mut().into_iter().enumerate() {
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() * inv_d;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                * inv_d;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            inv_stds[r] = S::from_f64(inv_std);
            for v in row.iter_mut() {
                *v = S::from_f64((v.to_f64() - mean) * inv_std);
            }
        }
        let mut y = x_hat.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.gamma[j] + self.beta[j];
            }
        }
        self.cache = train.then(|| (x_hat, inv_stds));
        y
    }

    pub fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        let (x_hat, inv_stds) = self.cache.as_ref().expect("backward without forward");
        let d = gy.ncols();
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut gx = Array2::from_elem(gy.raw_dim(), S::ZERO);
        for r in 0..gy.nrows() {
            let mut sum_g = S::ZERO;
            let mut sum_gx = S::ZERO;
            for j in 0..d {
                let gxh = gy[[r, j]] * self.gamma[j];
                sum_g = sum_g + gxh;
                sum_gx = sum_gx + gxh * x_hat[[r, j]];
                self.g_gamma[j] = self.g_gamma[j] + gy[[r, j]] * x_hat[[r, j]];
                self.g_beta[j] = self.g_beta[j] + gy[[r, j]];
            }
            let mean_g = sum_g * inv_d;
            let mean_gx = sum_gx * inv_d;
            for j in 0..d {
                let gxh = gy[[r, j]] * self.gamma[j];
                gx[[r, j]] = (gxh - mean_g - x_hat[[r, j]] * mean_gx) * inv_stds[r];
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

/// ReLU over a 2-D activation; keeps its output for the backward mask and for
/// dormant-neuron probes.
pub struct Relu2<S> {
    pub name: String,
    pub cache_y: Option<Array2<S>>,
}

impl<S: Scalar> Relu2<S> {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cache_y: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<S>, train: bool) -> Array2<S> {
        let y = x.mapv(|v| v.max_s(S::ZERO));
        self.cache_y = train.then(|| y.clone());
        y
    }

    pub fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        let y = self.cache_y.as_ref().expect("backward without forward");
        let mut gx = gy.clone();
        gx.zip_mut_with(y, |g, &v| {
            if v <= S::ZERO {
                *g = S::ZERO;
            }
        });
        gx
    }

    /// Mean |activation| per output unit from the cached forward.
    pub fn unit_mean_abs(&self) -> Vec<f64> {
        let y = self.cache_y.as_ref().expect("no cached activations");
        let rows = y.nrows().max(1) as f64;
        (0..y.ncols())
            .map(|j| y.column(j).iter().map(|v| v.to_f64().abs()).sum::<f64>() / rows)
            .collect()
    }
}
