use crate::autograd::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every trainable parameter of a store,
/// in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.trainable().map(|id| store.get(id).numel()).collect();
        Self {
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
///
/// Every trainable parameter must carry a gradient.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, cfg: &AdamConfig) -> Result<()> {
    let ids: Vec<_> = store.trainable().collect();
    if ids.len() != state.first_moment.len() {
        return Err(Error::Invalid(format!(
            "optimizer state tracks {} tensors, store has {} trainable",
            state.first_moment.len(),
            ids.len()
        )));
    }
    for (slot, &id) in ids.iter().enumerate() {
        let t = store.get(id);
        if t.grad().is_none() {
            return Err(Error::MissingGrad(store.name(id).to_string()));
        }
        if state.first_moment[slot].len() != t.numel() {
            return Err(Error::Invalid(format!(
                "moment size mismatch for `{}`",
                store.name(id)
            )));
        }
    }
    state.step += 1;
    let t_step = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let one = T::one();
    let bc1 = one - b1.powi(t_step);
    let bc2 = one - b2.powi(t_step);
    for (slot, &id) in ids.iter().enumerate() {
        let tensor = store.get_mut(id);
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[slot];
        let v = &mut state.second_moment[slot];
        for (((p, &g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> (ParamStore<f64>, crate::autograd::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add_param("p", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn constant_unit_grad_three_steps() {
        let (mut store, id) = scalar_store(0.0);
        let mut st = OptimizerState::new(&store);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        for _ in 0..3 {
            store.zero_grad();
            store.get_mut(id).accumulate_grad(&[1.0]).unwrap();
            adam_step(&mut store, &mut st, &cfg).unwrap();
        }
        assert!((store.get(id).data()[0] + 0.3).abs() < 1e-6);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        for g in [-3.0, 0.01, 42.0] {
            let (mut store, id) = scalar_store(1.0);
            let mut st = OptimizerState::new(&store);
            let cfg = AdamConfig::default();
            store.get_mut(id).accumulate_grad(&[g]).unwrap();
            adam_step(&mut store, &mut st, &cfg).unwrap();
            let delta = store.get(id).data()[0] - 1.0;
            assert!((delta + f64::signum(g) * cfg.lr).abs() < 1e-9 * cfg.lr.max(1.0) + cfg.lr * 1e-6);
        }
    }

    #[test]
    fn zero_grad_leaves_params() {
        let (mut store, id) = scalar_store(0.7);
        let mut st = OptimizerState::new(&store);
        for _ in 0..5 {
            store.zero_grad();
            store.get_mut(id).accumulate_grad(&[0.0]).unwrap();
            adam_step(&mut store, &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(store.get(id).data()[0], 0.7);
    }

    #[test]
    fn missing_grad_is_error() {
        let (mut store, _) = scalar_store(0.0);
        let mut st = OptimizerState::new(&store);
        let err = adam_step(&mut store, &mut st, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "p"));
    }
}
