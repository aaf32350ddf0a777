use super::{round_f32, ParamStore, Precision};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update using the gradients currently in `store`.
/// Parameters with `lr_scale == 0` are left untouched, moments included.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let precision = store.precision;
    for p in store.params_mut() {
        if p.lr_scale == 0.0 {
            continue;
        }
        let lr = cfg.lr * p.lr_scale;
        for k in 0..p.value.data.len() {
            let g = p.grad.data[k];
            let m = cfg.beta1 * p.adam_m.data[k] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * p.adam_v.data[k] + (1.0 - cfg.beta2) * g * g;
            p.adam_m.data[k] = m;
            p.adam_v.data[k] = v;
            p.value.data[k] -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        }
        if precision == Precision::F32 {
            round_f32(&mut p.value.data);
            round_f32(&mut p.adam_m.data);
            round_f32(&mut p.adam_v.data);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::Mat;

    fn scalar_store(precision: Precision) -> ParamStore {
        let mut s = ParamStore::new(precision);
        s.add("w", Mat { rows: 1, cols: 1, data: vec![0.5] }).unwrap();
        s.add("v", Mat { rows: 2, cols: 1, data: vec![-1.0, 2.0] }).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = scalar_store(Precision::F64);
        let before = s.snapshot();
        adam_step(&mut s, &AdamConfig::default());
        assert_eq!(s.snapshot(), before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let mut s = scalar_store(Precision::F64);
        s.params_mut()[0].grad.data[0] = 1.0;
        let cfg = AdamConfig { lr: 0.001, ..Default::default() };
        adam_step(&mut s, &cfg);
        let moved = 0.5 - s.params()[0].value.data[0];
        let expected = 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((moved - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = scalar_store(Precision::F64);
        s.set_lr_scale("w", 0.0);
        for p in s.params_mut() {
            p.grad.fill(1.0);
        }
        adam_step(&mut s, &AdamConfig::default());
        assert_eq!(s.params()[0].value.data, vec![0.5]);
        assert_eq!(s.params()[0].adam_m.data, vec![0.0]);
        assert_ne!(s.params()[1].value.data, vec![-1.0, 2.0]);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut s = scalar_store(Precision::F32);
            for step in 0..10 {
                for p in s.params_mut() {
                    p.grad.fill((step as f64 * 0.37).sin());
                }
                adam_step(&mut s, &AdamConfig::default());
            }
            s
        };
        assert_eq!(run(), run());
    }
}
