//! SGD and Adam, plus the plateau learning-rate schedule.

use std::collections::BTreeMap;

use crate::config::{ModelConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::model::StreamParams;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Anything holding named tensors an optimizer can update.
pub trait ParamStore {
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

impl ParamStore for StreamParams {
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_mut(&mut |name, t| f(&name, t));
    }
}

impl ParamStore for BTreeMap<String, Tensor> {
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, t) in self.iter_mut() {
            f(name, t);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, state: AdamState },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Optimizer::Adam {
            lr,
            state: AdamState {
                beta1,
                beta2,
                epsilon,
                step: 0,
                first: BTreeMap::new(),
                second: BTreeMap::new(),
            },
        }
    }

    pub fn from_config(config: &ModelConfig) -> Self {
        match config.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(config.learning_rate),
            OptimizerKind::Adam => Optimizer::adam(
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_epsilon,
            ),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn set_learning_rate(&mut self, value: f64) {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr = value,
        }
    }

    /// Applies one update to every parameter not listed in `frozen`.
    /// Fails without touching anything if a gradient is missing.
    pub fn step(
        &mut self,
        params: &mut dyn ParamStore,
        grads: &Gradients,
        frozen: &[&str],
    ) -> Result<()> {
        let mut missing = None;
        params.for_each_mut(&mut |name, t| {
            if missing.is_none() && !frozen.contains(&name) {
                match grads.get(name) {
                    Some(g) if g.shape() == t.shape() => {}
                    Some(g) => {
                        missing = Some(format!(
                            "gradient for `{name}` has shape {:?}, parameter {:?}",
                            g.shape(),
                            t.shape()
                        ))
                    }
                    None => missing = Some(format!("no gradient for parameter `{name}`")),
                }
            }
        });
        if let Some(msg) = missing {
            return Err(Error::Contract(msg));
        }

        match self {
            Optimizer::Sgd { lr } => {
                let lr = *lr;
                params.for_each_mut(&mut |name, t| {
                    if frozen.contains(&name) {
                        return;
                    }
                    let g = grads.get(name).expect("checked above");
                    for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                });
            }
            Optimizer::Adam { lr, state } => {
                state.step += 1;
                let lr = *lr;
                let AdamState {
                    beta1,
                    beta2,
                    epsilon,
                    step,
                    first,
                    second,
                } = state;
                let (b1, b2, eps) = (*beta1, *beta2, *epsilon);
                let c1 = 1.0 - b1.powi(*step as i32);
                let c2 = 1.0 - b2.powi(*step as i32);
                params.for_each_mut(&mut |name, t| {
                    if frozen.contains(&name) {
                        return;
                    }
                    let g = grads.get(name).expect("checked above");
                    let m = first
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(t.shape()));
                    let v = second
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(t.shape()));
                    let iter = t
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                    for ((p, &gv), (mv, vv)) in iter {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                });
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored accuracy
/// has failed to improve (strictly) for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch's metric and returns the (possibly decayed) rate.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        match self.best {
            Some(best) if metric <= best => self.stale += 1,
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        if self.patience > 0 && self.stale >= self.patience {
            self.stale = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Names of parameters that are skipped by the optimizer.
pub fn frozen_params(config: &ModelConfig) -> Vec<&'static str> {
    if config.attention {
        vec![]
    } else {
        vec![crate::model::MASK_PARAM]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::from_vec(values.to_vec()).unwrap())])
    }

    fn grads(values: &[f64]) -> Gradients {
        let mut g = Gradients::default();
        g.insert("p", Tensor::from_vec(values.to_vec()).unwrap());
        g
    }

    #[test]
    fn sgd_step() {
        let mut p = store(&[1.0]);
        Optimizer::sgd(0.1)
            .step(&mut p, &grads(&[1.0]), &[])
            .unwrap();
        assert!((p["p"].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_leave_parameters_alone() {
        for mut opt in [Optimizer::sgd(0.5), Optimizer::adam(0.5, 0.9, 0.999, 1e-8)] {
            let mut p = store(&[1.0, -2.0]);
            for _ in 0..3 {
                opt.step(&mut p, &grads(&[0.0, 0.0]), &[]).unwrap();
            }
            assert_eq!(p["p"].data(), &[1.0, -2.0]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // Bias correction makes the first update exactly lr * g / (|g| + eps).
        let mut p = store(&[0.0, 0.0]);
        let mut opt = Optimizer::adam(0.01, 0.9, 0.999, 1e-8);
        opt.step(&mut p, &grads(&[3.0, -0.5]), &[]).unwrap();
        let expected = [-0.01 * 3.0 / (3.0 + 1e-8), 0.01 * 0.5 / (0.5 + 1e-8)];
        for (a, b) in p["p"].data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-16);
        }
    }

    #[test]
    fn adam_matches_hand_rolled_recurrence() {
        let gs = [0.4, -1.0, 2.5, 0.1];
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut p = store(&[1.0]);
        let mut opt = Optimizer::adam(lr, b1, b2, eps);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            opt.step(&mut p, &grads(&[g]), &[]).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let k = (t + 1) as i32;
            x -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
        }
        assert!((p["p"].data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = store(&[1.0]);
        let err = Optimizer::sgd(0.1)
            .step(&mut p, &Gradients::default(), &[])
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(p["p"].data(), &[1.0]);
        // Frozen parameters need no gradient.
        Optimizer::sgd(0.1)
            .step(&mut p, &Gradients::default(), &["p"])
            .unwrap();
    }

    #[test]
    fn plateau_decays_after_patience_epochs() {
        let mut sched = PlateauScheduler::new(5, 0.1);
        let mut lr = sched.observe(0.6, 0.01);
        for epoch in 0..5 {
            assert_eq!(lr, 0.01, "decayed early at {epoch}");
            lr = sched.observe(0.6, lr);
        }
        assert!((lr - 0.001).abs() < 1e-18);
        // Counter resets after a decay.
        for _ in 0..4 {
            lr = sched.observe(0.5, lr);
        }
        assert!((lr - 0.001).abs() < 1e-18);
    }

    #[test]
    fn improvement_resets_patience() {
        let mut sched = PlateauScheduler::new(2, 0.1);
        let mut lr = 1.0;
        for acc in [0.1, 0.1, 0.2, 0.2, 0.3] {
            lr = sched.observe(acc, lr);
        }
        assert_eq!(lr, 1.0);
    }
}
