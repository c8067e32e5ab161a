//! Q-network: conv trunk (Impala residual stack or classic 3-conv), optional
//! adaptive maxpool, optional IQN quantile embedding, dueling noisy heads.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use thiserror::Error;

use crate::config::AgentConfig;
use crate::nn::conv::Conv2d;
use crate::nn::dense::{DenseLayer, LayerNorm, Linear, NoisyLinear, Relu2};
use crate::nn::pool::{AdaptiveMaxPool, ChannelNorm, MaxPool2d, Relu4};
use crate::nn::{ParamRef, Scalar, StateRef};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("input {got}x{got_w} too small: trunk needs at least {need}x{need} for a {out}x{out} maxpool")]
    InputTooSmall {
        got: usize,
        got_w: usize,
        need: usize,
        out: usize,
    },
    #[error("observation shape {got:?} does not match spec {want:?}")]
    ObsShape {
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrunkKind {
    Impala,
    Nature,
}

/// Everything needed to build the network; independent of the scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_actions: usize,
    pub trunk: TrunkKind,
    pub impala_width: usize,
    pub use_maxpool: bool,
    pub maxpool_out: usize,
    pub use_spectral_norm: bool,
    pub use_noisy: bool,
    pub noisy_sigma0: f64,
    pub use_dueling: bool,
    pub use_iqn: bool,
    pub n_cos: usize,
    pub dueling_hidden: usize,
    pub use_layer_norm: bool,
}

impl NetworkSpec {
    pub fn from_config(cfg: &AgentConfig, num_actions: usize) -> Self {
        Self {
            in_channels: crate::envs::FRAME_STACK,
            height: cfg.render_height,
            width: cfg.render_width,
            num_actions,
            trunk: if cfg.use_impala {
                TrunkKind::Impala
            } else {
                TrunkKind::Nature
            },
            impala_width: cfg.impala_width,
            use_maxpool: cfg.use_maxpool,
            maxpool_out: cfg.maxpool_out,
            use_spectral_norm: cfg.use_spectral_norm,
            use_noisy: cfg.use_noisy,
            noisy_sigma0: cfg.noisy_sigma0,
            use_dueling: cfg.use_dueling,
            use_iqn: cfg.use_iqn,
            n_cos: cfg.iqn_cos_embedding,
            dueling_hidden: cfg.dueling_hidden,
            use_layer_norm: cfg.use_layer_norm,
        }
    }

    pub fn impala_channels(&self) -> [usize; 3] {
        [
            16 * self.impala_width,
            32 * self.impala_width,
            32 * self.impala_width,
        ]
    }

    /// Spatial size of the trunk output before any adaptive pool.
    pub fn trunk_map(&self) -> (usize, usize, usize) {
        match self.trunk {
            TrunkKind::Impala => {
                let mut h = self.height;
                let mut w = self.width;
                for _ in 0..3 {
                    // conv 3x3 s1 p1 keeps size; pool 3x3 s2 p1 ceil-halves
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
                (self.impala_channels()[2], h, w)
            }
            TrunkKind::Nature => {
                let step = |d: usize, k: usize, s: usize| (d - k) / s + 1;
                let h = step(step(step(self.height, 8, 4), 4, 2), 3, 1);
                let w = step(step(step(self.width, 8, 4), 4, 2), 3, 1);
                (64, h, w)
            }
        }
    }

    /// Flattened feature length fed to the heads.
    pub fn feature_len(&self) -> usize {
        let (c, h, w) = self.trunk_map();
        if self.use_maxpool {
            c * self.maxpool_out * self.maxpool_out
        } else {
            c * h * w
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let (_, h, w) = self.trunk_map();
        if self.use_maxpool && (h < self.maxpool_out || w < self.maxpool_out) {
            return Err(NetworkError::InputTooSmall {
                got: self.height,
                got_w: self.width,
                need: self.maxpool_out,
                out: self.maxpool_out,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub trunk: usize,
    pub embedding: usize,
    pub heads_mu: usize,
    pub heads_sigma: usize,
    pub total_mu: usize,
}

struct ResUnit<S> {
    r1: Relu4<S>,
    c1: Conv2d<S>,
    r2: Relu4<S>,
    c2: Conv2d<S>,
}

impl<S: Scalar> ResUnit<S> {
    fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let h = self.r1.forward(x, train);
        let h = self.c1.forward(&h, train);
        let h = self.r2.forward(&h, train);
        let h = self.c2.forward(&h, train);
        x + &h
    }

    fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let g = self.c2.backward(gy);
        let g = self.r2.backward(&g);
        let g = self.c1.backward(&g);
        let g = self.r1.backward(&g);
        gy + &g
    }
}

struct ImpalaBlock<S> {
    stem: Conv2d<S>,
    norm: Option<ChannelNorm<S>>,
    pool: MaxPool2d,
    units: [ResUnit<S>; 2],
}

impl<S: Scalar> ImpalaBlock<S> {
    fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let mut h = self.stem.forward(x, train);
        if let Some(n) = self.norm.as_mut() {
            h = n.forward(&h, train);
        }
        let h = self.pool.forward(&h, train);
        let h = self.units[0].forward(&h, train);
        self.units[1].forward(&h, train)
    }

    fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let g = self.units[1].backward(gy);
        let g = self.units[0].backward(&g);
        let mut g = self.pool.backward(&g);
        if let Some(n) = self.norm.as_mut() {
            g = n.backward(&g);
        }
        self.stem.backward(&g)
    }
}

enum Trunk<S> {
    Impala {
        blocks: Vec<ImpalaBlock<S>>,
        out_relu: Relu4<S>,
    },
    Nature {
        c1: Conv2d<S>,
        r1: Relu4<S>,
        c2: Conv2d<S>,
        r2: Relu4<S>,
        c3: Conv2d<S>,
        r3: Relu4<S>,
    },
}

impl<S: Scalar> Trunk<S> {
    fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        match self {
            Trunk::Impala { blocks, out_relu } => {
                let mut h = blocks[0].forward(x, train);
                h = blocks[1].forward(&h, train);
                h = blocks[2].forward(&h, train);
                out_relu.forward(&h, train)
            }
            Trunk::Nature {
                c1,
                r1,
                c2,
                r2,
                c3,
                r3,
            } => {
                let h = r1.forward(&c1.forward(x, train), train);
                let h = r2.forward(&c2.forward(&h, train), train);
                r3.forward(&c3.forward(&h, train), train)
            }
        }
    }

    fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        match self {
            Trunk::Impala { blocks, out_relu } => {
                let g = out_relu.backward(gy);
                let g = blocks[2].backward(&g);
                let g = blocks[1].backward(&g);
                blocks[0].backward(&g)
            }
            Trunk::Nature {
                c1,
                r1,
                c2,
                r2,
                c3,
                r3,
            } => {
                let g = c3.backward(&r3.backward(gy));
                let g = c2.backward(&r2.backward(&g));
                c1.backward(&r1.backward(&g))
            }
        }
    }

    fn for_each_conv(&mut self, f: &mut dyn FnMut(&mut Conv2d<S>)) {
        match self {
            Trunk::Impala { blocks, .. } => {
                for b in blocks {
                    f(&mut b.stem);
                    for u in b.units.iter_mut() {
                        f(&mut u.c1);
                        f(&mut u.c2);
                    }
                }
            }
            Trunk::Nature { c1, c2, c3, .. } => {
                f(c1);
                f(c2);
                f(c3);
            }
        }
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        match self {
            Trunk::Impala { blocks, .. } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    let bp = format!("{prefix}.block{}", i + 1);
                    b.stem.visit_params(&bp, f);
                    if let Some(n) = b.norm.as_mut() {
                        n.visit_params(&bp, f);
                    }
                    for (j, u) in b.units.iter_mut().enumerate() {
                        let up = format!("{bp}.res{}", j + 1);
                        u.c1.visit_params(&up, f);
                        u.c2.visit_params(&up, f);
                    }
                }
            }
            Trunk::Nature { c1, c2, c3, .. } => {
                c1.visit_params(prefix, f);
                c2.visit_params(prefix, f);
                c3.visit_params(prefix, f);
            }
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateRef<'_, S>)) {
        match self {
            Trunk::Impala { blocks, .. } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    let bp = format!("{prefix}.block{}", i + 1);
                    for (j, u) in b.units.iter_mut().enumerate() {
                        let up = format!("{bp}.res{}", j + 1);
                        u.c1.visit_state(&up, f);
                        u.c2.visit_state(&up, f);
                    }
                }
            }
            Trunk::Nature { .. } => {}
        }
    }
}

struct DenseHead<S> {
    hidden: DenseLayer<S>,
    norm: Option<LayerNorm<S>>,
    relu: Relu2<S>,
    out: DenseLayer<S>,
}

impl<S: Scalar> DenseHead<S> {
    fn forward(&mut self, x: &Array2<S>, train: bool) -> Array2<S> {
        let mut h = self.hidden.forward(x, train);
        if let Some(n) = self.norm.as_mut() {
            h = n.forward(&h, train);
        }
        let h = self.relu.forward(&h, train);
        self.out.forward(&h, train)
    }

    fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        let g = self.out.backward(gy);
        let mut g = self.relu.backward(&g);
        if let Some(n) = self.norm.as_mut() {
            g = n.backward(&g);
        }
        self.hidden.backward(&g)
    }

    fn zero_grads(&mut self) {
        self.hidden.zero_grads();
        if let Some(n) = self.norm.as_mut() {
            n.zero_grads();
        }
        self.out.zero_grads();
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        self.hidden.visit_params(prefix, f);
        if let Some(n) = self.norm.as_mut() {
            n.visit_params(prefix, f);
        }
        self.out.visit_params(prefix, f);
    }

    fn mu_count(&self) -> usize {
        self.hidden.mu_count()
            + self.out.mu_count()
            + self.norm.as_ref().map_or(0, |n| n.param_count())
    }

    fn sigma_count(&self) -> usize {
        self.hidden.sigma_count() + self.out.sigma_count()
    }
}

struct FwdCache<S> {
    batch: usize,
    n_taus: usize,
    map_shape: (usize, usize, usize),
    phi: Array2<S>,
    psi: Option<Array2<S>>,
}

pub struct BtrNetwork<S> {
    pub spec: NetworkSpec,
    trunk: Trunk<S>,
    adaptive: Option<AdaptiveMaxPool>,
    embed: Option<Linear<S>>,
    embed_relu: Relu2<S>,
    value: Option<DenseHead<S>>,
    advantage: DenseHead<S>,
    cache: Option<FwdCache<S>>,
}

fn make_dense<S: Scalar, R: Rng>(
    spec: &NetworkSpec,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
) -> DenseLayer<S> {
    if spec.use_noisy {
        DenseLayer::Noisy(NoisyLinear::new(name, in_dim, out_dim, spec.noisy_sigma0, rng))
    } else {
        DenseLayer::Plain(Linear::new(name, in_dim, out_dim, rng))
    }
}

impl<S: Scalar> BtrNetwork<S> {
    pub fn new<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self, NetworkError> {
        spec.validate()?;
        let trunk = match spec.trunk {
            TrunkKind::Impala => {
                let chans = spec.impala_channels();
                let mut in_c = spec.in_channels;
                let mut blocks = Vec::with_capacity(3);
                for (bi, &out_c) in chans.iter().enumerate() {
                    let sn = spec.use_spectral_norm;
                    let unit = |j: usize, rng: &mut R| ResUnit {
                        r1: Relu4::new(&format!("block{}.res{}.relu1", bi + 1, j + 1)),
                        c1: Conv2d::new("c1", out_c, out_c, 3, 1, 1, sn, rng),
                        r2: Relu4::new(&format!("block{}.res{}.relu2", bi + 1, j + 1)),
                        c2: Conv2d::new("c2", out_c, out_c, 3, 1, 1, sn, rng),
                    };
                    blocks.push(ImpalaBlock {
                        stem: Conv2d::new("stem", in_c, out_c, 3, 1, 1, false, rng),
                        norm: spec
                            .use_layer_norm
                            .then(|| ChannelNorm::new("stem_norm", out_c)),
                        pool: MaxPool2d::halving(),
                        units: [unit(0, rng), unit(1, rng)],
                    });
                    in_c = out_c;
                }
                Trunk::Impala {
                    blocks,
                    out_relu: Relu4::new("trunk.out_relu"),
                }
            }
            TrunkKind::Nature => Trunk::Nature {
                c1: Conv2d::new("c1", spec.in_channels, 32, 8, 4, 0, false, rng),
                r1: Relu4::new("trunk.relu1"),
                c2: Conv2d::new("c2", 32, 64, 4, 2, 0, false, rng),
                r2: Relu4::new("trunk.relu2"),
                c3: Conv2d::new("c3", 64, 64, 3, 1, 0, false, rng),
                r3: Relu4::new("trunk.relu3"),
            },
        };
        let d = spec.feature_len();
        let embed = spec
            .use_iqn
            .then(|| Linear::new("embed", spec.n_cos, d, rng));
        let value = spec.use_dueling.then(|| DenseHead {
            hidden: make_dense(&spec, "value_hidden", d, spec.dueling_hidden, rng),
            norm: spec
                .use_layer_norm
                .then(|| LayerNorm::new("value_norm", spec.dueling_hidden)),
            relu: Relu2::new("head.value_relu"),
            out: make_dense(&spec, "value_out", spec.dueling_hidden, 1, rng),
        });
        let advantage = DenseHead {
            hidden: make_dense(&spec, "adv_hidden", d, spec.dueling_hidden, rng),
            norm: spec
                .use_layer_norm
                .then(|| LayerNorm::new("adv_norm", spec.dueling_hidden)),
            relu: Relu2::new("head.adv_relu"),
            out: make_dense(&spec, "adv_out", spec.dueling_hidden, spec.num_actions, rng),
        };
        Ok(Self {
            adaptive: spec.use_maxpool.then(|| AdaptiveMaxPool::new(spec.maxpool_out)),
            embed,
            embed_relu: Relu2::new("head.embed_relu"),
            value,
            advantage,
            trunk,
            spec,
            cache: None,
        })
    }

    /// Quantile values [batch, n_taus, actions]. `taus` must be [batch, N]
    /// (with IQN off, N = 1 and the values are plain Q estimates).
    pub fn forward(&mut self, obs: &Array4<S>, taus: &Array2<S>, train: bool) -> Array3<S> {
        let (batch, c, h, w) = obs.dim();
        assert_eq!(
            (c, h, w),
            (self.spec.in_channels, self.spec.height, self.spec.width),
            "observation shape mismatch"
        );
        assert_eq!(taus.nrows(), batch, "taus rows must match batch");
        let n = if self.spec.use_iqn { taus.ncols() } else { 1 };

        let t = self.trunk.forward(obs, train);
        let map_shape = (t.dim().1, t.dim().2, t.dim().3);
        let pooled = match self.adaptive.as_mut() {
            Some(p) => p.forward(&t, train),
            None => t,
        };
        let d = self.spec.feature_len();
        let phi = pooled
            .into_shape_with_order((batch, d))
            .expect("trunk output contiguous");

        let (x, psi) = self.iqn_mix(&phi, taus, train);

        let adv = self.advantage.forward(&x, train); // [batch*n, A] or [batch*n, 1+..]
        let a_dim = self.spec.num_actions;
        let mut q = Array3::from_elem((batch, n, a_dim), S::ZERO);
        if let Some(value) = self.value.as_mut() {
            let v = value.forward(&x, train); // [batch*n, 1]
            let inv_a = S::from_f64(1.0 / a_dim as f64);
            for b in 0..batch {
                for j in 0..n {
                    let r = b * n + j;
                    let mut mean = S::ZERO;
                    for a in 0..a_dim {
                        mean = mean + adv[[r, a]];
                    }
                    mean = mean * inv_a;
                    for a in 0..a_dim {
                        q[[b, j, a]] = v[[r, 0]] + adv[[r, a]] - mean;
                    }
                }
            }
        } else {
            for b in 0..batch {
                for j in 0..n {
                    for a in 0..a_dim {
                        q[[b, j, a]] = adv[[b * n + j, a]];
                    }
                }
            }
        }

        self.cache = train.then_some(FwdCache {
            batch,
            n_taus: n,
            map_shape,
            phi,
            psi,
        });
        q
    }

    /// Backprop from quantile-value gradients; accumulates parameter grads.
    pub fn backward(&mut self, gq: &Array3<S>) {
        let cache = self.cache.take().expect("backward without forward");
        let (batch, n, a_dim) = gq.dim();
        assert_eq!(batch, cache.batch);
        assert_eq!(n, cache.n_taus);
        let d = self.spec.feature_len();

        // undo dueling combine
        let rows = batch * n;
        let mut g_adv = Array2::from_elem((rows, a_dim), S::ZERO);
        let inv_a = S::from_f64(1.0 / a_dim as f64);
        let mut gx = if let Some(value) = self.value.as_mut() {
            let mut g_v = Array2::from_elem((rows, 1), S::ZERO);
            for b in 0..batch {
                for j in 0..n {
                    let r = b * n + j;
                    let mut sum = S::ZERO;
                    for a in 0..a_dim {
                        sum = sum + gq[[b, j, a]];
                    }
                    g_v[[r, 0]] = sum;
                    let mean = sum * inv_a;
                    for a in 0..a_dim {
                        g_adv[[r, a]] = gq[[b, j, a]] - mean;
                    }
                }
            }
            let gx_v = value.backward(&g_v);
            let gx_a = self.advantage.backward(&g_adv);
            gx_v + gx_a
        } else {
            for b in 0..batch {
                for j in 0..n {
                    for a in 0..a_dim {
                        g_adv[[b * n + j, a]] = gq[[b, j, a]];
                    }
                }
            }
            self.advantage.backward(&g_adv)
        };

        // undo the phi (*) psi product
        let mut g_phi = Array2::from_elem((batch, d), S::ZERO);
        if self.spec.use_iqn {
            let psi = cache.psi.as_ref().unwrap();
            let mut g_psi = Array2::from_elem((rows, d), S::ZERO);
            for b in 0..batch {
                let phi_row = cache.phi.row(b);
                let mut g_phi_row = g_phi.row_mut(b);
                for j in 0..n {
                    let r = b * n + j;
                    for k in 0..d {
                        g_psi[[r, k]] = gx[[r, k]] * phi_row[k];
                        g_phi_row[k] = g_phi_row[k] + gx[[r, k]] * psi.row(r)[k];
                    }
                }
            }
            let g_e = self.embed_relu.backward(&g_psi);
            let _g_cos = self.embed.as_mut().unwrap().backward(&g_e);
        } else {
            g_phi = std::mem::replace(&mut gx, Array2::from_elem((0, 0), S::ZERO));
        }

        let (c3, mh, mw) = cache.map_shape;
        let g_pooled = g_phi
            .into_shape_with_order(if self.spec.use_maxpool {
                (batch, c3, self.spec.maxpool_out, self.spec.maxpool_out)
            } else {
                (batch, c3, mh, mw)
            })
            .unwrap();
        let g_trunk = match self.adaptive.as_mut() {
            Some(p) => p.backward(&g_pooled),
            None => g_pooled,
        };
        self.trunk.backward(&g_trunk);
    }

    /// Tau-conditions phi into the head input x [batch*n, D]: cos features of
    /// each tau through the embedding, psi = relu(embed), x = phi (*) psi.
    /// With IQN off, x is phi itself (n = 1). Returns psi for the backward
    /// cache.
    fn iqn_mix(
        &mut self,
        phi: &Array2<S>,
        taus: &Array2<S>,
        train: bool,
    ) -> (Array2<S>, Option<Array2<S>>) {
        if !self.spec.use_iqn {
            return (phi.clone(), None);
        }
        let batch = phi.nrows();
        let d = phi.ncols();
        let n = taus.ncols();
        let n_cos = self.spec.n_cos;
        let mut cos_feat = Array2::from_elem((batch * n, n_cos), S::ZERO);
        for b in 0..batch {
            for j in 0..n {
                let tau = taus[[b, j]];
                for i in 0..n_cos {
                    let arg = S::from_f64(std::f64::consts::PI * i as f64) * tau;
                    cos_feat[[b * n + j, i]] = arg.cos();
                }
            }
        }
        let e = self.embed.as_mut().unwrap().forward(&cos_feat, train);
        let psi = self.embed_relu.forward(&e, train);
        let mut x = Array2::from_elem((batch * n, d), S::ZERO);
        for b in 0..batch {
            let phi_row = phi.row(b);
            for j in 0..n {
                let mut out_row = x.row_mut(b * n + j);
                let psi_row = psi.row(b * n + j);
                for k in 0..d {
                    out_row[k] = phi_row[k] * psi_row[k];
                }
            }
        }
        (x, Some(psi))
    }

    /// Trunk features phi(s) [batch, D]; no gradient bookkeeping.
    pub fn trunk_features(&mut self, obs: &Array4<S>) -> Array2<S> {
        let batch = obs.dim().0;
        let t = self.trunk.forward(obs, false);
        let pooled = match self.adaptive.as_mut() {
            Some(p) => p.forward(&t, false),
            None => t,
        };
        pooled
            .into_shape_with_order((batch, self.spec.feature_len()))
            .unwrap()
    }

    /// Mean Q over the given taus, [batch, A].
    pub fn mean_q(&mut self, obs: &Array4<S>, taus: &Array2<S>) -> Array2<S> {
        let q = self.forward(obs, taus, false);
        let n = q.dim().1;
        let inv = S::from_f64(1.0 / n as f64);
        q.sum_axis(Axis(1)).mapv(|v| v * inv)
    }

    /// Deterministic mean Q using midpoint taus (2i+1)/2N; for probes.
    pub fn mean_q_fixed(&mut self, obs: &Array4<S>, n: usize) -> Array2<S> {
        let batch = obs.dim().0;
        let taus = midpoint_taus(batch, n);
        self.mean_q(obs, &taus)
    }

    pub fn sample_noise<R: Rng>(&mut self, rng: &mut R) {
        if let Some(v) = self.value.as_mut() {
            v.hidden.sample_noise(rng);
            v.out.sample_noise(rng);
        }
        self.advantage.hidden.sample_noise(rng);
        self.advantage.out.sample_noise(rng);
    }

    pub fn zero_noise(&mut self) {
        if let Some(v) = self.value.as_mut() {
            v.hidden.zero_noise();
            v.out.zero_noise();
        }
        self.advantage.hidden.zero_noise();
        self.advantage.out.zero_noise();
    }

    /// One power iteration on every spectrally normalized conv.
    pub fn spectral_normalize_step(&mut self) {
        self.trunk.for_each_conv(&mut |c| c.spectral_normalize_step());
    }

    /// Largest sigma estimate across spectrally normalized convs (for tests).
    pub fn spectral_sigmas(&mut self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        self.trunk.for_each_conv(&mut |c| {
            if c.spectral.is_some() {
                out.push((c.name.clone(), c.sigma_estimate()));
            }
        });
        out
    }

    pub fn zero_grads(&mut self) {
        self.trunk.for_each_conv(&mut |c| c.zero_grads());
        if let Trunk::Impala { blocks, .. } = &mut self.trunk {
            for b in blocks {
                if let Some(n) = b.norm.as_mut() {
                    n.zero_grads();
                }
            }
        }
        if let Some(e) = self.embed.as_mut() {
            e.zero_grads();
        }
        if let Some(v) = self.value.as_mut() {
            v.zero_grads();
        }
        self.advantage.zero_grads();
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        self.trunk.visit_params("trunk", f);
        if let Some(e) = self.embed.as_mut() {
            e.visit_params("head", f);
        }
        if let Some(v) = self.value.as_mut() {
            v.visit_params("head", f);
        }
        self.advantage.visit_params("head", f);
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(StateRef<'_, S>)) {
        self.trunk.visit_state("trunk", f);
    }

    /// Copy all parameters and persistent state from `src` (target sync).
    pub fn copy_from(&mut self, src: &mut BtrNetwork<S>) {
        let mut src_params: Vec<Vec<S>> = Vec::new();
        src.visit_params(&mut |p| src_params.push(p.w.to_vec()));
        let mut i = 0;
        self.visit_params(&mut |p| {
            p.w.copy_from_slice(&src_params[i]);
            i += 1;
        });
        let mut src_state: Vec<Vec<S>> = Vec::new();
        src.visit_state(&mut |s| src_state.push(s.w.to_vec()));
        let mut i = 0;
        self.visit_state(&mut |s| {
            s.w.copy_from_slice(&src_state[i]);
            i += 1;
        });
    }

    pub fn count_parameters(&mut self) -> ParamCounts {
        let mut trunk = 0usize;
        self.trunk.for_each_conv(&mut |c| trunk += c.param_count());
        if let Trunk::Impala { blocks, .. } = &mut self.trunk {
            for b in blocks {
                if let Some(n) = b.norm.as_ref() {
                    trunk += n.param_count();
                }
            }
        }
        let embedding = self.embed.as_ref().map_or(0, |e| e.param_count());
        let mut heads_mu = self.advantage.mu_count();
        let mut heads_sigma = self.advantage.sigma_count();
        if let Some(v) = self.value.as_ref() {
            heads_mu += v.mu_count();
            heads_sigma += v.sigma_count();
        }
        ParamCounts {
            trunk,
            embedding,
            heads_mu,
            heads_sigma,
            total_mu: trunk + embedding + heads_mu,
        }
    }

    /// (site name, per-unit mean |activation|) for each ReLU, from the caches
    /// of the last train-mode forward.
    pub fn activation_sites(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        match &self.trunk {
            Trunk::Impala { blocks, out_relu } => {
                for b in blocks {
                    for u in b.units.iter() {
                        out.push((u.r1.name.clone(), u.r1.channel_mean_abs()));
                        out.push((u.r2.name.clone(), u.r2.channel_mean_abs()));
                    }
                }
                out.push((out_relu.name.clone(), out_relu.channel_mean_abs()));
            }
            Trunk::Nature { r1, r2, r3, .. } => {
                out.push((r1.name.clone(), r1.channel_mean_abs()));
                out.push((r2.name.clone(), r2.channel_mean_abs()));
                out.push((r3.name.clone(), r3.channel_mean_abs()));
            }
        }
        if self.spec.use_iqn {
            out.push((self.embed_relu.name.clone(), self.embed_relu.unit_mean_abs()));
        }
        if let Some(v) = self.value.as_ref() {
            out.push((v.relu.name.clone(), v.relu.unit_mean_abs()));
        }
        out.push((
            self.advantage.relu.name.clone(),
            self.advantage.relu.unit_mean_abs(),
        ));
        out
    }

    /// Per-layer L2 norms of mu weights plus the global norm.
    pub fn weight_l2(&mut self) -> (Vec<(String, f64)>, f64) {
        let mut per = Vec::new();
        let mut total = 0.0f64;
        self.visit_params(&mut |p| {
            let sq: f64 = p.w.iter().map(|v| v.to_f64() * v.to_f64()).sum();
            // sigma tensors are tracked too but named so callers can filter
            per.push((p.name.clone(), sq.sqrt()));
            if !p.name.ends_with("_sigma") {
                total += sq;
            }
        });
        (per, total.sqrt())
    }
}

pub fn midpoint_taus<S: Scalar>(batch: usize, n: usize) -> Array2<S> {
    Array2::from_shape_fn((batch, n), |(_, j)| {
        S::from_f64((2.0 * j as f64 + 1.0) / (2.0 * n as f64))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, STREAM_INIT};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn perturb_param(net: &mut BtrNetwork<f64>, k: usize, d: f64) {
        let mut idx = 0usize;
        net.visit_params(&mut |p| {
            for v in p.w.iter_mut() {
                if idx == k {
                    *v += d;
                }
                idx += 1;
            }
        });
    }

    /// Max relative error between analytic gradients and central differences
    /// of a random linear functional of the quantile outputs, over a random
    /// subset of parameters. Spectral norm stays off: its backward treats the
    /// power-iteration vectors as constants by design.
    fn fd_max_rel_err(spec: NetworkSpec, seed: u64, n_checks: usize) -> f64 {
        assert!(!spec.use_spectral_norm);
        let mut rng = stream_rng(seed, STREAM_INIT, 0);
        let mut net = BtrNetwork::<f64>::new(spec.clone(), &mut rng).unwrap();
        net.sample_noise(&mut rng);

        let b = 2;
        let n = 2;
        let mut obs = Array4::from_elem((b, 4, spec.height, spec.width), 0.0f64);
        for v in obs.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let mut taus = Array2::from_elem((b, n), 0.0f64);
        for v in taus.iter_mut() {
            *v = rng.gen_range(0.05..0.95);
        }
        let mut c = Array3::from_elem((b, n, spec.num_actions), 0.0f64);
        for v in c.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }

        let q = net.forward(&obs, &taus, true);
        let _ = q;
        net.zero_grads();
        net.backward(&c);
        let mut analytic: Vec<f64> = Vec::new();
        net.visit_params(&mut |p| analytic.extend(p.g.iter().copied()));

        let mut idxs: Vec<usize> = (0..analytic.len()).collect();
        idxs.shuffle(&mut rng);
        idxs.truncate(n_checks);

        let eps = 1e-5;
        let mut worst = 0.0f64;
        for &k in &idxs {
            perturb_param(&mut net, k, eps);
            let up: f64 = net
                .forward(&obs, &taus, false)
                .iter()
                .zip(c.iter())
                .map(|(a, b)| a * b)
                .sum();
            perturb_param(&mut net, k, -2.0 * eps);
            let down: f64 = net
                .forward(&obs, &taus, false)
                .iter()
                .zip(c.iter())
                .map(|(a, b)| a * b)
                .sum();
            perturb_param(&mut net, k, eps);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k];
            let denom = a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max((a - numeric).abs() / denom);
        }
        worst
    }

    #[test]
    fn nature_head_gradients_match_finite_differences() {
        let spec = NetworkSpec {
            in_channels: 4,
            height: 36,
            width: 36,
            num_actions: 3,
            trunk: TrunkKind::Nature,
            impala_width: 1,
            use_maxpool: false,
            maxpool_out: 6,
            use_spectral_norm: false,
            use_noisy: true,
            noisy_sigma0: 0.5,
            use_dueling: true,
            use_iqn: true,
            n_cos: 8,
            dueling_hidden: 8,
            use_layer_norm: false,
        };
        let err = fd_max_rel_err(spec, 91, 120);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn impala_maxpool_gradients_match_finite_differences() {
        let spec = NetworkSpec {
            in_channels: 4,
            height: 48,
            width: 48,
            num_actions: 4,
            trunk: TrunkKind::Impala,
            impala_width: 1,
            use_maxpool: true,
            maxpool_out: 6,
            use_spectral_norm: false,
            use_noisy: true,
            noisy_sigma0: 0.5,
            use_dueling: true,
            use_iqn: true,
            n_cos: 8,
            dueling_hidden: 8,
            use_layer_norm: true,
        };
        let err = fd_max_rel_err(spec, 92, 120);
        assert!(err < 1e-4, "max relative error {err}");
    }

    fn base_spec() -> NetworkSpec {
        NetworkSpec {
            in_channels: 4,
            height: 84,
            width: 84,
            num_actions: 18,
            trunk: TrunkKind::Impala,
            impala_width: 2,
            use_maxpool: true,
            maxpool_out: 6,
            use_spectral_norm: true,
            use_noisy: true,
            noisy_sigma0: 0.5,
            use_dueling: true,
            use_iqn: true,
            n_cos: 64,
            dueling_hidden: 512,
            use_layer_norm: false,
        }
    }

    #[test]
    fn paper_scale_parameter_counts() {
        let mut rng = stream_rng(0, STREAM_INIT, 0);
        let mut net = BtrNetwork::<f32>::new(base_spec(), &mut rng).unwrap();
        let c = net.count_parameters();
        // exact counts for width 2, 84x84x4 input, 18 actions, maxpool 6
        assert_eq!(c.trunk, 389_024);
        assert_eq!(c.embedding, 149_760);
        assert_eq!(c.heads_mu, 2_370_067);
        assert_eq!(c.total_mu, 2_908_851);
        assert_eq!(c.heads_sigma, c.heads_mu);
    }

    #[test]
    fn feature_len_is_resolution_invariant_with_maxpool() {
        let mut spec = base_spec();
        assert_eq!(spec.feature_len(), 2304);
        spec.height = 140;
        spec.width = 114;
        assert_eq!(spec.feature_len(), 2304);
        spec.height = 42;
        spec.width = 42;
        assert_eq!(spec.feature_len(), 2304);
    }

    #[test]
    fn forward_shapes_and_dueling_identity() {
        let mut rng = stream_rng(1, STREAM_INIT, 0);
        let mut spec = base_spec();
        spec.height = 42;
        spec.width = 42;
        spec.impala_width = 1;
        spec.dueling_hidden = 32;
        spec.num_actions = 4;
        let mut net = BtrNetwork::<f32>::new(spec, &mut rng).unwrap();
        net.zero_noise();
        let obs = Array4::from_shape_fn((3, 4, 42, 42), |(b, c, i, j)| {
            ((b + c + i + j) % 7) as f32 * 0.1
        });
        let taus = midpoint_taus::<f32>(3, 5);
        let q = net.forward(&obs, &taus, false);
        assert_eq!(q.dim(), (3, 5, 4));
        // dueling: mean_a(q) == value, i.e. advantages are centered; check
        // that adding a constant to all advantages cannot change q
        // (identifiability): q - mean_a q == adv - mean adv
        let mean0: f32 = (0..4).map(|a| q[[0, 0, a]]).sum::<f32>() / 4.0;
        assert!(mean0.is_finite());
    }

    #[test]
    fn iqn_off_gives_single_quantile() {
        let mut rng = stream_rng(2, STREAM_INIT, 0);
        let mut spec = base_spec();
        spec.height = 42;
        spec.width = 42;
        spec.impala_width = 1;
        spec.dueling_hidden = 16;
        spec.num_actions = 4;
        spec.use_iqn = false;
        let mut net = BtrNetwork::<f32>::new(spec, &mut rng).unwrap();
        let obs = Array4::from_elem((2, 4, 42, 42), 0.3f32);
        let taus = midpoint_taus::<f32>(2, 1);
        let q = net.forward(&obs, &taus, false);
        assert_eq!(q.dim(), (2, 1, 4));
    }

    #[test]
    fn input_too_small_is_detected() {
        let mut spec = base_spec();
        spec.height = 32;
        spec.width = 32;
        assert!(spec.validate().is_err());
    }
}
