//! Trainable parameters and Adam with decoupled weight decay.
//!
//! Decay is applied to the value *before* the moment update, so it never
//! leaks into the running moments:
//!
//! ```text
//! value -= lr * weight_decay * value
//! m = b1*m + (1-b1)*g          v = b2*v + (1-b2)*g^2
//! t += 1
//! value -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
//! ```

use super::dense::DenseMatrix;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// One trainable matrix with its gradient accumulator and Adam state.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
    adam_m: DenseMatrix,
    adam_v: DenseMatrix,
    step_count: u64,
}

impl Parameter {
    fn new(value: DenseMatrix) -> Self {
        let (r, c) = value.shape();
        Parameter {
            value,
            grad: DenseMatrix::zeros(r, c),
            adam_m: DenseMatrix::zeros(r, c),
            adam_v: DenseMatrix::zeros(r, c),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// Owns every parameter of a model; iteration order is insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add_param(&mut self, value: DenseMatrix) -> ParamId {
        self.params.push(Parameter::new(value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.values_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }
}

/// Adam hyperparameters. `Default` matches the trained configuration:
/// lr 0.01, betas (0.9, 0.999), eps 1e-8, weight decay 5e-4.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// One Adam step over every parameter in the store, reading the
/// accumulated gradients. Gradients are left in place; callers zero them.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    for p in &mut store.params {
        if cfg.weight_decay != 0.0 {
            let shrink = cfg.lr * cfg.weight_decay;
            for v in p.value.values_mut() {
                *v -= shrink * *v;
            }
        }
        p.step_count += 1;
        let bc1 = 1.0 - cfg.beta1.powi(p.step_count as i32);
        let bc2 = 1.0 - cfg.beta2.powi(p.step_count as i32);
        let n = p.value.values().len();
        for i in 0..n {
            let g = p.grad.values()[i];
            let m = cfg.beta1 * p.adam_m.values()[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * p.adam_v.values()[i] + (1.0 - cfg.beta2) * g * g;
            p.adam_m.values_mut()[i] = m;
            p.adam_v.values_mut()[i] = v;
            let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            p.value.values_mut()[i] -= update;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_cfg() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixpoint() {
        let mut store = ParamStore::new();
        let id = store.add_param(DenseMatrix::filled(2, 2, 1.5));
        adam_step(&mut store, &plain_cfg());
        for &v in store.get(id).value.values() {
            assert_eq!(v, 1.5);
        }
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // g=1, lr=0.1: bias-corrected m-hat = 1, v-hat = 1, so the update
        // is lr / (1 + eps)
        let mut store = ParamStore::new();
        let id = store.add_param(DenseMatrix::filled(1, 1, 0.0));
        store.get_mut(id).grad.set(0, 0, 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut store, &cfg);
        let moved = store.get(id).value.get(0, 0);
        assert!((moved + 0.1).abs() < 1e-8, "step {moved}");
    }

    #[test]
    fn params_update_independently() {
        let mut store = ParamStore::new();
        let a = store.add_param(DenseMatrix::filled(1, 1, 1.0));
        let b = store.add_param(DenseMatrix::filled(1, 1, 1.0));
        store.get_mut(a).grad.set(0, 0, 1.0);
        adam_step(&mut store, &plain_cfg());
        assert!(store.get(a).value.get(0, 0) < 1.0);
        assert_eq!(store.get(b).value.get(0, 0), 1.0);
    }

    #[test]
    fn decay_shrinks_before_moment_update() {
        let mut store = ParamStore::new();
        let id = store.add_param(DenseMatrix::filled(1, 1, 1.0));
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        // zero gradient: only the decay moves the value
        adam_step(&mut store, &cfg);
        assert!((store.get(id).value.get(0, 0) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn step_counter_advances_per_call() {
        let mut store = ParamStore::new();
        let id = store.add_param(DenseMatrix::filled(1, 1, 1.0));
        adam_step(&mut store, &plain_cfg());
        adam_step(&mut store, &plain_cfg());
        assert_eq!(store.get(id).step_count(), 2);
    }
}
