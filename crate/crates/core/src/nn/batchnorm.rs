use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::nn::{Initializer, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    /// Scale is drawn from N(1, std^2), shift starts at 0.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, init: &mut Initializer) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.gamma"), init.normal(&[channels], 1.0)),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one())),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let eps = T::of(self.eps);
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batchnorm_train(x, gamma, beta, eps)?;
                let s = g.shape(x);
                let count = (s[0] * s[2] * s[3]) as f64;
                let unbias = T::of(count / (count - 1.0).max(1.0));
                let mom = T::of(self.momentum);
                let keep = T::one() - mom;
                let rm = store.get(self.running_mean).data();
                let rv = store.get(self.running_var).data();
                let new_mean = rm.iter().zip(&mean).map(|(&r, &m)| keep * r + mom * m).collect();
                let new_var = rv.iter().zip(&var).map(|(&r, &v)| keep * r + mom * v * unbias).collect();
                g.push_buffer_update(self.running_mean, new_mean);
                g.push_buffer_update(self.running_var, new_var);
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                g.batchnorm_eval(x, gamma, beta, &mean, &var, eps)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(channels: usize) -> (ParamStore<f64>, BatchNorm2d) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0, 0.0);
        let bn = BatchNorm2d::new(&mut store, "bn", channels, &mut init);
        (store, bn)
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let (store, bn) = layer(2);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = g.constant(Tensor::new(vec![2, 2, 2, 2], data.clone()).unwrap());
        let y = bn.forward(&mut g, &store, x, Mode::Eval).unwrap();
        for (a, b) in g.data(y).iter().zip(&data) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let (mut store, bn) = layer(1);
        store.get_mut(bn.beta).data_mut()[0] = 0.25;
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![3, 1, 2, 2], 4.0));
        let y = bn.forward(&mut g, &store, x, Mode::Train).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn two_sample_batch_normalizes_to_unit() {
        let (store, bn) = layer(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap());
        let y = bn.forward(&mut g, &store, x, Mode::Train).unwrap();
        let out = g.data(y);
        assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4, "{out:?}");
    }

    #[test]
    fn single_value_per_channel_rejected_in_training() {
        let (store, bn) = layer(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
        assert!(bn.forward(&mut g, &store, x, Mode::Train).is_err());
    }

    #[test]
    fn running_stats_update() {
        let (mut store, bn) = layer(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap());
        bn.forward(&mut g, &store, x, Mode::Train).unwrap();
        store.apply_buffer_updates(&mut g).unwrap();
        assert!((store.get(bn.running_mean).data()[0] - 0.1).abs() < 1e-12);
        // unbiased variance 2, blended: 0.9 * 1 + 0.1 * 2
        assert!((store.get(bn.running_var).data()[0] - 1.1).abs() < 1e-12);
    }
}
