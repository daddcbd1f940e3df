//! Adam(W), linear warm-up/decay schedule and global-norm clipping.

use crate::autograd::Mat;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct AdamW {
    cfg: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params
            .iter()
            .map(|(_, t)| Mat::zeros(t.raw_dim()))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `cfg.lr * lr_scale`. Parameters without a
    /// gradient still receive weight decay but keep their moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>], lr_scale: f64) {
        self.t += 1;
        let lr = self.cfg.lr * lr_scale;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(id);
            if self.cfg.weight_decay > 0.0 {
                p.mapv_inplace(|x| x * (1.0 - lr * self.cfg.weight_decay));
            }
            let Some(g) = g else { continue };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
        }
    }
}

/// Linear warm-up to the peak rate, then linear decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct LinearSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LinearSchedule {
    pub fn from_fraction(total_steps: u64, warmup_fraction: f64) -> Self {
        Self {
            warmup_steps: (total_steps as f64 * warmup_fraction).round() as u64,
            total_steps,
        }
    }

    /// Multiplier for the update with 0-based index `step`.
    pub fn factor(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        (remaining / span).clamp(0.0, 1.0)
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

/// Adds `src` into `acc` element-wise (gradient accumulation).
pub fn accumulate_grads(acc: &mut Vec<Option<Mat>>, src: Vec<Option<Mat>>) {
    if acc.is_empty() {
        *acc = src;
        return;
    }
    for (a, s) in acc.iter_mut().zip(src) {
        match (a.as_mut(), s) {
            (Some(a), Some(s)) => *a += &s,
            (None, Some(s)) => *a = Some(s),
            _ => {}
        }
    }
}

pub fn scale_grads(grads: &mut [Option<Mat>], s: f64) {
    for g in grads.iter_mut().flatten() {
        *g *= s;
    }
}
