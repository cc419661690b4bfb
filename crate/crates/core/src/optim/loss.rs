use crate::error::{Error, Result};
use crate::tensor::{Backward, Float, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_noting<T: Float>(p: &Var<'_, T>) -> (Vec<T>, Vec<bool>) {
    let tape = p.tape();
    let (lo, hi) = (T::of(PROB_CLAMP), T::of(1.0 - PROB_CLAMP));
    let value = p.value();
    let mut clamped = Vec::with_capacity(value.len());
    let mut inside = Vec::with_capacity(value.len());
    for (i, &e) in value.data().iter().enumerate() {
        let free = e >= lo && e <= hi;
        if !free && tape.tracks_branches() {
            tape.note_branch(i as u64);
        }
        clamped.push(e.max(lo).min(hi));
        inside.push(free);
    }
    (clamped, inside)
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() });
    }
    Ok(())
}

/// Mean over the batch of `−Σ y·log p` for `[batch, classes]` probabilities.
pub fn categorical_cross_entropy<'t, T: Float>(probs: Var<'t, T>, onehot: &Tensor<T>) -> Result<Var<'t, T>> {
    let shape = probs.shape();
    check_same("categorical_cross_entropy", &shape, onehot.shape())?;
    let &[batch, classes] = shape.as_slice() else {
        return Err(Error::shape(format!("categorical_cross_entropy expects [batch, classes], got {shape:?}")));
    };
    let pv = probs.value();
    for r in 0..batch {
        let row = &pv.data()[r * classes..(r + 1) * classes];
        let total = row.iter().fold(0.0, |a, v| a + v.as_f64());
        if (total - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("probability row {r} sums to {total}")));
        }
        let labels = &onehot.data()[r * classes..(r + 1) * classes];
        let ones = labels.iter().filter(|&&y| y == T::one()).count();
        if ones != 1 || labels.iter().any(|&y| y != T::one() && y != T::zero()) {
            return Err(Error::invalid(format!("label row {r} is not one-hot")));
        }
    }
    let (clamped, inside) = clamp_noting(&probs);
    let n = T::of(batch as f64);
    let loss = clamped
        .iter()
        .zip(onehot.data())
        .fold(T::zero(), |acc, (&p, &y)| if y == T::zero() { acc } else { acc - y * p.ln() })
        / n;
    let grad: Vec<T> = clamped
        .iter()
        .zip(onehot.data())
        .zip(&inside)
        .map(|((&p, &y), &free)| if free { -y / (p * n) } else { T::zero() })
        .collect();
    Ok(probs.tape().record(&[probs], Tensor::scalar(loss), ScaledGrad(grad)))
}

/// Mean of `−[t·log p + (1 − t)·log(1 − p)]`.
pub fn binary_cross_entropy<'t, T: Float>(pred: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    check_same("binary_cross_entropy", &pred.shape(), target.shape())?;
    let (clamped, inside) = clamp_noting(&pred);
    let n = T::of(clamped.len() as f64);
    let loss = clamped
        .iter()
        .zip(target.data())
        .fold(T::zero(), |acc, (&p, &t)| acc - (t * p.ln() + (T::one() - t) * (T::one() - p).ln()))
        / n;
    let grad: Vec<T> = clamped
        .iter()
        .zip(target.data())
        .zip(&inside)
        .map(|((&p, &t), &free)| if free { (-t / p + (T::one() - t) / (T::one() - p)) / n } else { T::zero() })
        .collect();
    Ok(pred.tape().record(&[pred], Tensor::scalar(loss), ScaledGrad(grad)))
}

/// Gradient of a scalar loss, fixed at forward time.
struct ScaledGrad<T>(Vec<T>);

impl<T: Float> Backward<T> for ScaledGrad<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(self.0.iter().map(|&d| d * g[0]).collect())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::activation::{sigmoid, softmax};
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::{RngStream, Tape};
    use proptest::prelude::*;

    fn onehot(labels: &[usize], classes: usize) -> Tensor<f64> {
        Tensor::from_fn([labels.len(), classes], |i| f64::from(u8::from(i % classes == labels[i / classes])))
    }

    #[test]
    fn cce_examples() {
        let tape = Tape::<f64>::new();
        let y = onehot(&[2], 5);
        let p = Tensor::from_fn([1, 5], |i| if i == 2 { 1.0 - 1e-7 } else { 0.25e-7 });
        let l = categorical_cross_entropy(tape.constant(p), &y).unwrap().value().item().unwrap();
        assert!(l < 1e-6);
        let l = categorical_cross_entropy(tape.constant(Tensor::full([3, 5], 0.2)), &onehot(&[0, 3, 4], 5))
            .unwrap()
            .value()
            .item()
            .unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cce_rejects_bad_inputs() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full([2, 5], 0.2));
        assert!(categorical_cross_entropy(p, &onehot(&[0], 5)).is_err());
        let mut two_hot = onehot(&[0, 1], 5).into_vec();
        two_hot[1] = 1.0;
        assert!(categorical_cross_entropy(p, &Tensor::new([2, 5], two_hot).unwrap()).is_err());
        let unnormalized = tape.constant(Tensor::full([2, 5], 0.3));
        assert!(categorical_cross_entropy(unnormalized, &onehot(&[0, 1], 5)).is_err());
    }

    #[test]
    fn softmax_cce_gradient_is_p_minus_y_over_batch() {
        for seed in 0..10 {
            let mut rng = RngStream::new(70, seed);
            let logits = Tensor::from_fn([4, 5], |_| rng.uniform(-3.0, 3.0));
            let labels: Vec<usize> = (0..4).map(|_| (rng.uniform(0.0, 4.999)) as usize).collect();
            let y = onehot(&labels, 5);

            let tape = Tape::<f64>::new();
            let x = tape.leaf(logits.clone());
            let p = softmax(x);
            let loss = categorical_cross_entropy(p, &y).unwrap();
            let g = tape.backward(loss).unwrap().wrt(x);
            let expected: Vec<f64> = p.value().data().iter().zip(y.data()).map(|(p, y)| (p - y) / 4.0).collect();
            for (a, b) in g.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }

            let r = grad_check(|v| categorical_cross_entropy(softmax(v), &y), &logits, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn bce_examples() {
        let tape = Tape::<f64>::new();
        let t = Tensor::new([4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = binary_cross_entropy(tape.constant(Tensor::full([4], 0.5)), &t).unwrap();
        assert!((l.value().item().unwrap() - 2f64.ln()).abs() < 1e-12);
        let near = t.map(|v| if v == 1.0 { 1.0 - 1e-9 } else { 1e-9 });
        let l = binary_cross_entropy(tape.constant(near), &t).unwrap();
        assert!(l.value().item().unwrap() < 1e-6);
        assert!(binary_cross_entropy(tape.constant(Tensor::full([3], 0.5)), &t).is_err());
    }

    #[test]
    fn bce_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = RngStream::new(71, seed);
            let logits = Tensor::from_fn([6, 1], |_| rng.uniform(-4.0, 4.0));
            let t = Tensor::from_fn([6, 1], |_| f64::from(u8::from(rng.bernoulli(0.5))));
            let r = grad_check(|v| binary_cross_entropy(sigmoid(v), &t), &logits, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(raw in prop::collection::vec(-30.0f64..30.0, 10), label in 0usize..5) {
            let tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new([2, 5], raw.clone()).unwrap());
            let l = categorical_cross_entropy(softmax(x), &onehot(&[label, 4 - label], 5)).unwrap();
            prop_assert!(l.value().item().unwrap() >= 0.0);
            let t = Tensor::from_fn([2, 5], |i| f64::from(u8::from(raw[i] > 0.0)));
            let l = binary_cross_entropy(sigmoid(x), &t).unwrap();
            prop_assert!(l.value().item().unwrap() >= 0.0);
        }
    }
}
