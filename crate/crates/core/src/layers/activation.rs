use crate::tensor::{Backward, Float, Tensor, Var};

/// Leaky-relu slope used throughout the discriminator.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Sigmoid,
    /// Over the last axis of a `[n, classes]` tensor.
    Softmax,
}

impl Activation {
    pub fn apply<'t, T: Float>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Relu => leaky_relu(x, 0.0),
            Activation::LeakyRelu { slope } => leaky_relu(x, slope),
            Activation::Tanh => tanh(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softmax => softmax(x),
        }
    }
}

pub fn relu<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    leaky_relu(x, 0.0)
}

/// `x` for `x > 0`, `slope·x` otherwise. `slope = 0` is plain relu.
pub fn leaky_relu<'t, T: Float>(x: Var<'t, T>, slope: f64) -> Var<'t, T> {
    let v = x.value();
    let tape = x.tape();
    let s = T::of(slope);
    if tape.tracks_branches() {
        for (i, &e) in v.data().iter().enumerate() {
            if e > T::zero() {
                tape.note_branch(i as u64);
            }
        }
    }
    let out = v.map(|e| if e > T::zero() { e } else { e * s });
    tape.record(&[x], out, LeakyRule { slope: s })
}

struct LeakyRule<T> {
    slope: T,
}

impl<T: Float> Backward<T> for LeakyRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx =
            inputs[0].data().iter().zip(g).map(|(&x, &g)| if x > T::zero() { g } else { g * self.slope }).collect();
        vec![Some(dx)]
    }
}

pub fn tanh<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    let out = x.value().map(T::tanh);
    x.tape().record(&[x], out, OutputRule(|y: T| T::one() - y * y))
}

pub fn sigmoid<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    let out = x.value().map(|e| T::one() / (T::one() + (-e).exp()));
    x.tape().record(&[x], out, OutputRule(|y: T| y * (T::one() - y)))
}

/// Rules whose derivative is a function of the output alone.
struct OutputRule<F>(F);

impl<T: Float, F: Fn(T) -> T> Backward<T> for OutputRule<F> {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(out.data().iter().zip(g).map(|(&y, &g)| g * (self.0)(y)).collect())]
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    let v = x.value();
    let cols = *v.shape().last().expect("tensors have rank >= 1");
    let mut out = v.clone().into_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            total += *e;
        }
        row.iter_mut().for_each(|e| *e /= total);
    }
    let out = Tensor::from_parts(v.shape().to_vec(), out);
    x.tape().record(&[x], out, SoftmaxRule { cols })
}

struct SoftmaxRule {
    cols: usize,
}

impl<T: Float> Backward<T> for SoftmaxRule {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut dx = Vec::with_capacity(g.len());
        for (y, g) in out.data().chunks(self.cols).zip(g.chunks(self.cols)) {
            let dot: T = y.iter().zip(g).map(|(&y, &g)| y * g).sum();
            dx.extend(y.iter().zip(g).map(|(&y, &g)| y * (g - dot)));
        }
        vec![Some(dx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::{RngStream, Tape};
    use proptest::prelude::*;

    fn eval(kind: Activation, data: &[f64], shape: &[usize]) -> Vec<f64> {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap());
        kind.apply(x).value().data().to_vec()
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(eval(Activation::Relu, &[-1.0, 2.0], &[2]), vec![0.0, 2.0]);
        assert_eq!(eval(Activation::Sigmoid, &[0.0], &[1]), vec![0.5]);
        assert_eq!(eval(Activation::LeakyRelu { slope: LEAKY_SLOPE }, &[-1.0, 3.0], &[2]), vec![-0.2, 3.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        for c in [-50.0, 0.0, 3.7, 1e3] {
            let p = eval(Activation::Softmax, &[c; 5], &[1, 5]);
            assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15), "{p:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngStream::new(21, 0);
        let kinds = [
            Activation::Relu,
            Activation::LeakyRelu { slope: LEAKY_SLOPE },
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Softmax,
        ];
        for kind in kinds {
            for trial in 0..10 {
                let shape = [1 + trial % 3, 2 + trial % 4];
                // Keep relu inputs away from the kink.
                let x = Tensor::from_fn(shape, |_| {
                    let v = rng.uniform(0.1, 2.0);
                    if rng.bernoulli(0.5) {
                        v
                    } else {
                        -v
                    }
                });
                let w = Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0));
                let r = grad_check(|x| Ok(kind.apply(x).mul(x.tape().constant(w.clone()))?.sum()), &x, 1e-5).unwrap();
                assert!(r.max_rel_error < 1e-6, "{kind:?} {r:?}");
                assert_eq!(r.skipped, 0);
            }
        }
    }

    #[test]
    fn relu_kink_points_are_skipped() {
        let x = Tensor::new([3], vec![1e-7, 0.5, -0.5]).unwrap();
        let r = grad_check(|x| Ok(relu(x).sum()), &x, 1e-5).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9);
    }

    proptest! {
        #[test]
        fn ranges_hold(data in proptest::collection::vec(-15.0f64..15.0, 1..40)) {
            let n = data.len();
            for y in eval(Activation::Tanh, &data, &[n]) {
                prop_assert!(y > -1.0 && y < 1.0);
            }
            for y in eval(Activation::Sigmoid, &data, &[n]) {
                prop_assert!(y > 0.0 && y < 1.0);
            }
            let p = eval(Activation::Softmax, &data, &[1, n]);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
