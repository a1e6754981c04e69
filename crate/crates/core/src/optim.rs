//! Adam and Polyak averaging of target parameters.

use serde::{Deserialize, Serialize};

use crate::error::{BracError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

fn check_aligned(a: &[Tensor], b: &[Tensor], what: &str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(BracError::Config(format!("{what}: parameter shapes do not align")));
    }
    Ok(())
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::new(p.shape().to_vec(), vec![0.0; p.numel()]).expect("same shape"))
            .collect();
        Self {
            cfg,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update (descent on `grads`).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_aligned(params, grads, "adam_step")?;
        check_aligned(params, &self.first, "adam_step")?;
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(BracError::training(
                "adam_step",
                self.step,
                format!("non-finite gradient for parameter {bad}"),
            ));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// `target ← tau·source + (1 − tau)·target`, elementwise.
pub fn soft_update(target: &mut [Tensor], source: &[Tensor], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(BracError::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    check_aligned(target, source, "soft_update")?;
    for (t, s) in target.iter_mut().zip(source) {
        if tau == 1.0 {
            t.data_mut().copy_from_slice(s.data());
            continue;
        }
        for (ti, &si) in t.data_mut().iter_mut().zip(s.data()) {
            *ti = tau * si + (1.0 - tau) * *ti;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::from_vec(1, data.len(), data.to_vec())
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![v(&[1.0, -2.0])];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &params);
        adam.step(&mut params, &[v(&[0.0, 0.0])]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut params = vec![v(&[0.0, 0.0, 0.0])];
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &params);
        adam.step(&mut params, &[v(&[3.0, -0.5, 1e-3])]).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let expect = |g: f64| -0.01 * g / (g.abs() + 1e-8);
        for (p, g) in params[0].data().iter().zip([3.0, -0.5, 1e-3]) {
            assert!((p - expect(g)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let mut params = vec![v(&[0.0])];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let err = adam.step(&mut params, &[v(&[f64::NAN])]).unwrap_err();
        assert!(matches!(err, BracError::Training { ref op, .. } if op == "adam_step"));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn identical_states_give_identical_updates() {
        let mut p1 = vec![v(&[0.3, 0.7])];
        let mut p2 = p1.clone();
        let mut a1 = Adam::new(AdamConfig::default(), &p1);
        let mut a2 = a1.clone();
        for _ in 0..5 {
            a1.step(&mut p1, &[v(&[0.1, -0.2])]).unwrap();
            a2.step(&mut p2, &[v(&[0.1, -0.2])]).unwrap();
        }
        assert_eq!(p1, p2);
    }

    #[test]
    fn soft_update_examples() {
        let mut t = vec![v(&[0.0])];
        soft_update(&mut t, &[v(&[1.0])], 0.005).unwrap();
        assert_eq!(t[0].data(), &[0.005]);

        let mut t = vec![v(&[3.0, -4.0])];
        soft_update(&mut t, &[v(&[0.25, 9.0])], 1.0).unwrap();
        assert_eq!(t[0].data(), &[0.25, 9.0]);

        assert!(soft_update(&mut t, &[v(&[0.0, 0.0])], 0.0).is_err());
    }

    #[test]
    fn soft_update_gap_decays_geometrically() {
        let tau = 0.005;
        let mut t = vec![v(&[0.0])];
        let src = [v(&[1.0])];
        for n in 1..=1000 {
            soft_update(&mut t, &src, tau).unwrap();
            let gap = 1.0 - t[0].data()[0];
            let expect = (1.0 - tau).powi(n);
            assert!((gap - expect).abs() < 1e-12, "step {n}: {gap} vs {expect}");
        }
    }

    proptest! {
        #[test]
        fn soft_update_is_affine(
            a in prop::collection::vec(-10.0f64..10.0, 4),
            b in prop::collection::vec(-10.0f64..10.0, 4),
            s in prop::collection::vec(-10.0f64..10.0, 4),
            tau in 0.001f64..1.0,
        ) {
            let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let mut ta = vec![v(&a)];
            let mut tb = vec![v(&b)];
            let mut td = vec![v(&diff)];
            let src = [v(&s)];
            soft_update(&mut ta, &src, tau).unwrap();
            soft_update(&mut tb, &src, tau).unwrap();
            // The source cancels in the difference, so apply a zero source to `td`.
            soft_update(&mut td, &[v(&[0.0; 4])], tau).unwrap();
            for i in 0..4 {
                let got = ta[0].data()[i] - tb[0].data()[i];
                prop_assert!((got - td[0].data()[i]).abs() < 1e-9);
            }
        }
    }
}
