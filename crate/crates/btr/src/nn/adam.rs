//! Adam with bias correction, keyed positionally to a parameter visit order.

use super::Scalar;

pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: Vec<Moment<S>>,
}

struct Moment<S> {
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Advances the step counter. Call once, then `apply` each parameter
    /// tensor in a fixed positional order.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one tensor. `idx` must follow the same visit order every step;
    /// moment buffers are allocated on first use.
    pub fn apply(&mut self, idx: usize, w: &mut [S], g: &[S]) {
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step_size = S::from_f64(self.lr / bc1);
        let bc2_sqrt_inv = S::from_f64(1.0 / bc2.sqrt());
        let eps = S::from_f64(self.eps);

        if idx == self.moments.len() {
            self.moments.push(Moment {
                m: vec![S::ZERO; w.len()],
                v: vec![S::ZERO; w.len()],
            });
        }
        let mom = &mut self.moments[idx];
        assert_eq!(mom.m.len(), w.len(), "parameter {idx} changed size");
        for i in 0..w.len() {
            let gi = g[i];
            mom.m[i] = b1 * mom.m[i] + one_m_b1 * gi;
            mom.v[i] = b2 * mom.v[i] + one_m_b2 * gi * gi;
            let denom = (mom.v[i].sqrt() * bc2_sqrt_inv) + eps;
            w[i] = w[i] - step_size * mom.m[i] / denom;
        }
    }

    /// One update over parameter slices in a fixed order. `params` yields
    /// (weights, grads) pairs.
    pub fn step<'a, I>(&mut self, params: I)
    where
        I: Iterator<Item = (&'a mut [S], &'a [S])>,
        S: 'a,
    {
        self.begin_step();
        for (idx, (w, g)) in params.enumerate() {
            self.apply(idx, w, g);
        }
    }

    pub fn num_moment_tensors(&self) -> usize {
        self.moments.len()
    }

    /// (m, v) slices for checkpointing, positional order.
    pub fn moment_slices(&self) -> Vec<(&[S], &[S])> {
        self.moments
            .iter()
            .map(|mo| (mo.m.as_slice(), mo.v.as_slice()))
            .collect()
    }

    pub fn load_moments(&mut self, t: u64, moments: Vec<(Vec<S>, Vec<S>)>) {
        self.t = t;
        self.moments = moments
            .into_iter()
            .map(|(m, v)| Moment { m, v })
            .collect();
    }
}
