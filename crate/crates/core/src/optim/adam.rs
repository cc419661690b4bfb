use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{is_buffer, NetworkParams};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<T: Float = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(lr: f64, beta1: f64) -> Self {
        AdamState { lr, beta1, beta2: 0.999, epsilon: 1e-8, t: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }
}

/// One bias-corrected Adam step over every trainable tensor of `params`.
/// Running-statistic buffers are left alone; a parameter without a gradient
/// is treated as having a zero gradient.
pub fn adam_step<T: Float>(
    params: &mut NetworkParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, p) in params.trainable() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch { op: "adam_step", left: p.shape().to_vec(), right: g.shape().to_vec() });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}` is not finite")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(state.lr), T::of(state.epsilon));

    let mut updates = Vec::new();
    for (name, p) in params.trainable() {
        let zeros = || Tensor::zeros(p.shape().to_vec());
        let mut m = state.first.remove(name).unwrap_or_else(zeros).into_vec();
        let mut v = state.second.remove(name).unwrap_or_else(zeros).into_vec();
        let mut theta = p.data().to_vec();
        let g = grads.get(name);
        for i in 0..theta.len() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let shape = p.shape().to_vec();
        state.first.insert(name.clone(), Tensor::from_parts(shape.clone(), m));
        state.second.insert(name.clone(), Tensor::from_parts(shape.clone(), v));
        updates.push((name.clone(), Tensor::from_parts(shape, theta)));
    }
    debug_assert!(updates.iter().all(|(n, _)| !is_buffer(n)));
    params.apply(updates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_params(theta: f64) -> NetworkParams<f64> {
        let mut p = NetworkParams::new();
        p.insert("theta", Tensor::new([1], vec![theta]).unwrap());
        p
    }

    fn grad(name: &str, g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::new([1], vec![g]).unwrap())])
    }

    /// Plain scalar Adam, written out independently of `adam_step`.
    fn oracle_trajectory(lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            theta -= lr * mh / (vh.sqrt() + eps);
            out.push(theta);
        }
        out
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(0.001, 0.9);
        adam_step(&mut p, &grad("theta", 2.0), &mut s).unwrap();
        let theta = p.get("theta").unwrap().data()[0];
        assert!((theta - (1.0 - 0.001 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert!((theta - 0.999).abs() < 1e-9);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn minimizes_a_parabola_like_the_oracle() {
        let lr = 0.05;
        let oracle = oracle_trajectory(lr, 500);
        let reached = oracle.iter().position(|t| t.abs() < 0.01).unwrap();
        assert_eq!(reached, 23);

        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(lr, 0.9);
        for (step, expected) in oracle.iter().enumerate() {
            let theta = p.get("theta").unwrap().data()[0];
            adam_step(&mut p, &grad("theta", 2.0 * theta), &mut s).unwrap();
            let theta = p.get("theta").unwrap().data()[0];
            assert!((theta - expected).abs() < 1e-12, "step {step}: {theta} vs {expected}");
        }
        assert!(p.get("theta").unwrap().data()[0].abs() < 0.01);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(0.001, 0.9);
        let err = adam_step(&mut p, &grad("theta", f64::NAN), &mut s).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(s.step_count(), 0);
        assert_eq!(p.get("theta").unwrap().data()[0], 1.0);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut p = scalar_params(1.0);
        p.insert("bn.running_mean", Tensor::new([1], vec![3.0]).unwrap());
        let mut s = AdamState::new(0.1, 0.5);
        let mut g = grad("theta", 1.0);
        g.insert("bn.running_mean".into(), Tensor::new([1], vec![1.0]).unwrap());
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p.get("bn.running_mean").unwrap().data()[0], 3.0);
        assert!(s.moments("bn.running_mean").is_none());
        assert_eq!(s.moments("theta").unwrap().0.shape(), &[1]);
    }

    proptest! {
        #[test]
        fn zero_gradient_is_a_fixed_point(values in prop::collection::vec(-10.0f64..10.0, 1..20), steps in 1usize..5) {
            let mut p = NetworkParams::new();
            p.insert("w", Tensor::new([values.len()], values.clone()).unwrap());
            let before = p.clone();
            let g = BTreeMap::from([("w".to_string(), Tensor::zeros([values.len()]))]);
            let mut s = AdamState::new(0.001, 0.9);
            for _ in 0..steps {
                adam_step(&mut p, &g, &mut s).unwrap();
            }
            prop_assert_eq!(p, before);
            prop_assert_eq!(s.step_count(), steps as u64);
        }
    }
}
