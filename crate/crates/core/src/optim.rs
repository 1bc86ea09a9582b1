//! AdamW with a linear warm-up then linear decay learning-rate schedule.

use std::collections::BTreeMap;

use crate::model::Param;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Decoupled weight decay: the decay term is applied to the parameters
/// directly, not mixed into the gradient moments.
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `lr_scale` multiplies the base learning rate (the
    /// schedule value for this step). Unknown gradient keys are ignored;
    /// parameters without gradients only receive weight decay when they
    /// appear in `grads`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Param>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr_scale: f64,
    ) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let lr = c.lr * lr_scale;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            assert_eq!(g.len(), p.data.len(), "gradient shape mismatch for {name}");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p.data[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
        }
    }
}

/// Linear warm-up from 0 to 1 over `warmup_steps`, then linear decay to 0
/// at `total_steps`. Steps are 0-based.
pub fn linear_schedule(step: u64, warmup_steps: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    if step < warmup_steps {
        return (step + 1) as f64 / warmup_steps.max(1) as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let remaining = (total_steps - step) as f64;
    let span = (total_steps - warmup_steps).max(1) as f64;
    remaining / span
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_param(x: f64, y: f64) -> BTreeMap<String, Param> {
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), Param { rows: 1, cols: 2, data: vec![x, y] });
        params
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        // f(x, y) = (x - 3)^2 + 2 (y + 1)^2
        let mut params = quadratic_param(0.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
        for _ in 0..400 {
            let d = &params["p"].data;
            let g = vec![2.0 * (d[0] - 3.0), 4.0 * (d[1] + 1.0)];
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), g);
            opt.step(&mut params, &grads, 1.0);
        }
        let d = &params["p"].data;
        assert!((d[0] - 3.0).abs() < 1e-2, "x: {}", d[0]);
        assert!((d[1] + 1.0).abs() < 1e-2, "y: {}", d[1]);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // With zero gradients, a parameter listed in the gradient map decays
        // geometrically toward zero and the moments stay empty of signal.
        let mut params = quadratic_param(1.0, -2.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![0.0, 0.0]);
        opt.step(&mut params, &grads, 1.0);
        let d = &params["p"].data;
        assert!((d[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        assert!((d[1] - (-2.0) * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        assert!((linear_schedule(0, 4, 20) - 0.25).abs() < 1e-12);
        assert!((linear_schedule(3, 4, 20) - 1.0).abs() < 1e-12);
        assert!((linear_schedule(4, 4, 20) - 1.0).abs() < 1e-12);
        assert!((linear_schedule(12, 4, 20) - 0.5).abs() < 1e-12);
        assert_eq!(linear_schedule(20, 4, 20), 0.0);
        assert_eq!(linear_schedule(25, 4, 20), 0.0);
        // Monotone up then down.
        let vals: Vec<f64> = (0..=20).map(|s| linear_schedule(s, 4, 20)).collect();
        for w in vals.windows(2).take(3) {
            assert!(w[1] >= w[0]);
        }
        for w in vals[4..].windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
