//! Adam with decoupled weight decay, linear-warmup cosine schedule, global
//! norm clipping and an exponential moving average of the weights.

use std::f64::consts::PI;

use crate::element::Element;
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.base_lr;
            }
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state: step counter and per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam<T: Element> {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    step: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig, schedule: LrSchedule) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            schedule,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Applies one update from the gradients stored in `store` and returns
    /// the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> f64 {
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        let decay = T::from_f64_lossy(lr * c.weight_decay);

        for ((p, m), v) in store
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if !p.requires_grad {
                continue;
            }
            let apply_decay = p.weight_decay && c.weight_decay != 0.0;
            let values = p.value.data_mut();
            for (((w, &g), mv), vv) in values
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * g;
                *vv = b2 * *vv + one_b2 * g * g;
                if apply_decay {
                    *w -= decay * *w;
                }
                *w -= step_size * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        lr
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm().to_f64_lossy();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.scale_in_place(s);
        }
    }
    norm
}

/// Shadow copy of the parameters, `shadow <- decay * shadow + (1 - decay) * params`.
#[derive(Debug, Clone)]
pub struct Ema<T: Element> {
    pub decay: f64,
    shadow: Vec<Tensor<T>>,
}

impl<T: Element> Ema<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        Ema {
            decay,
            shadow: store.iter().map(|p| p.value.clone()).collect(),
        }
    }

    pub fn update(&mut self, store: &ParamStore<T>) {
        let d = T::from_f64_lossy(self.decay);
        let one_d = T::one() - d;
        for (s, p) in self.shadow.iter_mut().zip(store.iter()) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.value.data()) {
                *sv = d * *sv + one_d * pv;
            }
        }
    }

    pub fn shadow(&self) -> &[Tensor<T>] {
        &self.shadow
    }

    /// Shadow values paired with parameter names, in store order.
    pub fn named<'a>(&'a self, store: &'a ParamStore<T>) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> {
        store.iter().map(|p| p.name.as_str()).zip(self.shadow.iter())
    }

    /// Replaces the shadow, e.g. after loading a checkpoint.
    pub fn set_shadow(&mut self, shadow: Vec<Tensor<T>>) {
        assert_eq!(shadow.len(), self.shadow.len(), "ema shadow length");
        self.shadow = shadow;
    }
}
