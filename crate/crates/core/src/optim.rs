//! Adaptive moment estimation with optional L2 weight decay folded into
//! the gradient. Moment state is kept in f64 and keyed by parameter name,
//! so updates are bit-reproducible regardless of run precision.

use std::collections::HashMap;

use crate::model::DepthModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, first: HashMap::new(), second: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter; parameters without a gradient this
    /// step are treated as having a zero gradient.
    pub fn step<T: Scalar>(&mut self, model: &mut DepthModel<T>, lr: f64) {
        self.step += 1;
        let t = self.step;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        let eps = self.cfg.eps;
        let wd = self.cfg.weight_decay;
        let first = &mut self.first;
        let second = &mut self.second;
        model.visit_parameters_mut(&mut |p| {
            let n = p.tensor.numel();
            let grad = p.tensor.grad();
            let m = first.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = second.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = p.tensor.data();
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let x = data[i].to_f64();
                let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64()) + wd * x;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                next.push(T::from_f64(x - lr * m_hat / (v_hat.sqrt() + eps)));
            }
            p.set_data(next);
        });
    }
}

/// Linear decay from `lr_start` at step 1 to `lr_end` at the last step.
pub fn linear_lr(lr_start: f64, lr_end: f64, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return lr_start;
    }
    let frac = (step - 1) as f64 / (total - 1) as f64;
    lr_start * (1.0 - frac) + lr_end * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn tiny() -> DepthModel<f64> {
        let cfg = ModelConfig {
            backbone_channels: vec![2, 3, 4, 5],
            decoder_channels: vec![4, 8, 8, 12],
            heads: vec![2, 2, 2, 2],
            pqi_channels: 6,
            bcp_hidden: 8,
            n_bins: 4,
            ..ModelConfig::default()
        };
        DepthModel::init(cfg, 1).unwrap()
    }

    #[test]
    fn adam_descends_a_quadratic_on_one_parameter() {
        let mut model = tiny();
        let mut opt = Adam::new(AdamConfig::default());
        // drive loss = sum(head.bias^2) only
        for _ in 0..200 {
            let bias = &model.head.bias.tensor;
            let loss = bias.mul(bias).unwrap().sum_all();
            loss.backward().unwrap();
            opt.step(&mut model, 1e-2);
        }
        let worst = model
            .head
            .bias
            .tensor
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "bias did not shrink: {worst}");
    }

    #[test]
    fn weight_decay_shrinks_untouched_parameters() {
        let mut model = tiny();
        model.head.bias.tensor = Tensor::leaf(&[4], vec![1.0; 4]).unwrap();
        let before: f64 = model.head.bias.tensor.data().iter().sum();
        let mut opt = Adam::new(AdamConfig { weight_decay: 1e-2, ..AdamConfig::default() });
        for _ in 0..10 {
            opt.step(&mut model, 1e-3);
        }
        let after: f64 = model.head.bias.tensor.data().iter().sum();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn linear_lr_endpoints_and_midpoint() {
        assert_eq!(linear_lr(1e-3, 1e-4, 1, 500), 1e-3);
        assert_eq!(linear_lr(1e-3, 1e-4, 500, 500), 1e-4);
        let mid = linear_lr(1.0, 0.0, 251, 501);
        assert!((mid - 0.5).abs() < 1e-12);
        assert_eq!(linear_lr(3e-4, 1e-5, 1, 1), 3e-4);
    }
}
