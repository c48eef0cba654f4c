//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use ndarray::{Array2, Zip};

use crate::tape::{ParamGrads, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    settings: AdamWSettings,
    first: Vec<Array2<F>>,
    second: Vec<Array2<F>>,
    steps: u32,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>, settings: AdamWSettings) -> Self {
        let zeros = || -> Vec<Array2<F>> {
            store.iter().map(|(_, _, v)| Array2::zeros(v.raw_dim())).collect()
        };
        Self {
            settings,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// One update. Parameters without a gradient still decay. Weight decay
    /// applies to matrices only; vectors (biases, norm gains) are exempt.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>, lr: f64) {
        self.steps += 1;
        let s = self.settings;
        let c = F::from_f64_lossy;
        let (b1, b2) = (c(s.beta1), c(s.beta2));
        let correction1 = c(1.0 - s.beta1.powi(self.steps as i32));
        let correction2 = c(1.0 - s.beta2.powi(self.steps as i32));
        let (lr_f, eps) = (c(lr), c(s.epsilon));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let value = store.get_mut(id);
            if s.weight_decay > 0.0 && value.nrows() > 1 && value.ncols() > 1 {
                let keep = c(1.0 - lr * s.weight_decay);
                value.mapv_inplace(|v| v * keep);
            }
            let Some(grad) = grads.get(id) else {
                continue;
            };
            Zip::from(value)
                .and(&mut self.first[i])
                .and(&mut self.second[i])
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let m_hat = *m / correction1;
                    let v_hat = *v / correction2;
                    *p -= lr_f * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// Learning rate at `step` of `total`, decaying from `peak` to 0 along a
/// half cosine.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return peak;
    }
    let progress = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}
