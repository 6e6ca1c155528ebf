use crate::ndauto::ParamStore;

/// AdamW with decoupled weight decay on parameters flagged `decay`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Steps skipped because a gradient was not finite.
    pub skipped: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyper(store, 0.9, 0.95, 1e-8, 0.05)
    }

    pub fn with_hyper(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        AdamW { beta1, beta2, eps, weight_decay, step: 0, skipped: 0, m: zeros(), v: zeros() }
    }

    /// One update of every trainable parameter from its accumulated
    /// gradient; returns `false` (and changes nothing) if any gradient is
    /// non-finite. Gradients are left in place.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> bool {
        let finite = store.iter().filter(|(_, p)| p.trainable).all(|(_, p)| p.grad.iter().all(|g| g.is_finite()));
        if !finite {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *x -= lr * (step + wd * *x);
            }
        }
        true
    }
}
