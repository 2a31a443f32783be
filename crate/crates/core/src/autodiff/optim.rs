use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamWState<T> {
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { step: 0, m, v }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam update with bias-corrected moments:
/// `p ← p − lr·(m̂/(√v̂+ε) + λ·p)`.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adamw_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of_f64(cfg.beta1), T::of_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::of_f64(1.0 - cfg.beta1), T::of_f64(1.0 - cfg.beta2));
    let (bc1, bc2) = (T::of_f64(bc1), T::of_f64(bc2));
    let eps = T::of_f64(cfg.epsilon);
    let lr_t = T::of_f64(lr);
    let decay = T::of_f64(lr * cfg.weight_decay);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + one_b1 * gd[i];
            vd[i] = b2 * vd[i] + one_b2 * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr_t * m_hat / (v_hat.sqrt() + eps) + decay * pd[i];
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: u64, warmup_steps: u64, total_steps: u64, peak_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::invalid(format!(
            "lr_schedule: warmup {warmup_steps} exceeds total {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "lr_schedule: step {step} beyond total {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(peak_lr);
    }
    Ok(peak_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamWState::new([&p]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut [&mut p], &[g], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g = 1, v̂ = g² = 1, so the step is lr·1/(1+ε).
        let mut p = Tensor::<f64>::scalar(2.0);
        let mut st = AdamWState::new([&p]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st, 0.1, &cfg).unwrap();
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - 1.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let mut p = Tensor::<f64>::new(vec![2], vec![3.0, -4.0]).unwrap();
        let mut st = AdamWState::new([&p]);
        let cfg = AdamWConfig::default();
        adamw_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, 0.5, &cfg).unwrap();
        let f = 1.0 - 0.5 * 0.01;
        assert!((p.data()[0] - 3.0 * f).abs() < 1e-15);
        assert!((p.data()[1] + 4.0 * f).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut st = AdamWState::new([&p]);
        let err = adamw_step(
            &mut [&mut p],
            &[Tensor::zeros(&[3])],
            &mut st,
            0.1,
            &AdamWConfig::default(),
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 1000, 275_000, 5e-5).unwrap(), 0.0);
        assert_eq!(lr_schedule(1000, 1000, 275_000, 5e-5).unwrap(), 5e-5);
        assert_eq!(lr_schedule(275_000, 1000, 275_000, 5e-5).unwrap(), 0.0);
        assert_eq!(lr_schedule(500, 1000, 275_000, 5e-5).unwrap(), 2.5e-5);
    }

    #[test]
    fn schedule_midpoint_of_decay() {
        // (1000 + 275000) / 2 = 138000; 5e-5 · (275000 − 138000) / 274000
        let lr = lr_schedule(138_000, 1000, 275_000, 5e-5).unwrap();
        assert!((lr - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_rejects_long_warmup() {
        assert!(lr_schedule(0, 10, 5, 1.0).is_err());
        assert!(lr_schedule(6, 0, 5, 1.0).is_err());
    }
}
