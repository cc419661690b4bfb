//! Differentiable arithmetic: elementwise ops, matmul, reductions, reshape.

use super::{gemm, Backward, Float, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl ElementwiseKind {
    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            ElementwiseKind::Add => a + b,
            ElementwiseKind::Sub => a - b,
            ElementwiseKind::Mul => a * b,
            ElementwiseKind::Div => a / b,
        }
    }
}

/// Right-hand side of an elementwise op.
pub enum Operand<'t, T: Float> {
    Var(Var<'t, T>),
    Scalar(T),
}

/// `a ∘ b` for equal shapes or a scalar `b`. No other broadcasting.
pub fn elementwise<'t, T: Float>(kind: ElementwiseKind, a: Var<'t, T>, b: Operand<'t, T>) -> Result<Var<'t, T>> {
    let av = a.value();
    match b {
        Operand::Var(b) => {
            let bv = b.value();
            if av.shape() != bv.shape() {
                return Err(Error::ShapeMismatch {
                    op: "elementwise",
                    left: av.shape().to_vec(),
                    right: bv.shape().to_vec(),
                });
            }
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| kind.apply(x, y)).collect();
            let out = Tensor::from_parts(av.shape().to_vec(), data);
            Ok(a.tape().record(&[a, b], out, BinaryRule { kind }))
        }
        Operand::Scalar(s) => {
            let out = av.map(|x| kind.apply(x, s));
            Ok(a.tape().record(&[a], out, ScalarRule { kind, scalar: s }))
        }
    }
}

struct BinaryRule {
    kind: ElementwiseKind,
}

impl<T: Float> Backward<T> for BinaryRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (ga, gb): (Vec<T>, Vec<T>) = match self.kind {
            ElementwiseKind::Add => (g.to_vec(), g.to_vec()),
            ElementwiseKind::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
            ElementwiseKind::Mul => {
                (g.iter().zip(b).map(|(&g, &b)| g * b).collect(), g.iter().zip(a).map(|(&g, &a)| g * a).collect())
            }
            ElementwiseKind::Div => (
                g.iter().zip(b).map(|(&g, &b)| g / b).collect(),
                g.iter().zip(a).zip(b).map(|((&g, &a), &b)| -g * a / (b * b)).collect(),
            ),
        };
        vec![needs[0].then_some(ga), needs[1].then_some(gb)]
    }
}

struct ScalarRule<T> {
    kind: ElementwiseKind,
    scalar: T,
}

impl<T: Float> Backward<T> for ScalarRule<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = self.scalar;
        let ga = match self.kind {
            ElementwiseKind::Add | ElementwiseKind::Sub => g.to_vec(),
            ElementwiseKind::Mul => g.iter().map(|&v| v * s).collect(),
            ElementwiseKind::Div => g.iter().map(|&v| v / s).collect(),
        };
        vec![Some(ga)]
    }
}

/// Rank-2 product `[m,k]·[k,n]`.
pub fn matmul<'t, T: Float>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
        return Err(Error::ShapeMismatch { op: "matmul", left: av.shape().to_vec(), right: bv.shape().to_vec() });
    }
    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
    Ok(a.tape().record(&[a, b], Tensor::from_parts(vec![m, n], out), MatmulRule { m, k, n }))
}

struct MatmulRule {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Float> Backward<T> for MatmulRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let da = needs[0].then(|| {
            let mut da = vec![T::zero(); m * k];
            gemm(m, n, k, g, false, inputs[1].data(), true, &mut da, false);
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); k * n];
            gemm(k, m, n, inputs[0].data(), true, g, false, &mut db, false);
            db
        });
        vec![da, db]
    }
}

/// Sum of all entries, as a one-element tensor.
pub fn sum<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    let v = x.value();
    x.tape().record(&[x], Tensor::scalar(v.sum()), ReduceRule { scale: T::one() })
}

pub fn mean<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    let v = x.value();
    let scale = T::one() / T::of(v.len() as f64);
    x.tape().record(&[x], Tensor::scalar(v.sum() * scale), ReduceRule { scale })
}

struct ReduceRule<T> {
    scale: T,
}

impl<T: Float> Backward<T> for ReduceRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0] * self.scale; inputs[0].len()])]
    }
}

pub fn reshape<'t, T: Float>(x: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let out = x.value().reshape(shape.to_vec())?;
    Ok(x.tape().record(&[x], out, PassThrough))
}

struct PassThrough;

impl<T: Float> Backward<T> for PassThrough {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

/// `[n, f] + [f]`, the bias broadcast over the batch axis.
pub fn add_row_bias<'t, T: Float>(x: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xv, bv) = (x.value(), bias.value());
    if xv.rank() != 2 || bv.shape() != [xv.shape()[1]] {
        return Err(Error::ShapeMismatch { op: "add_row_bias", left: xv.shape().to_vec(), right: bv.shape().to_vec() });
    }
    let f = xv.shape()[1];
    let data = xv.data().iter().enumerate().map(|(i, &v)| v + bv.data()[i % f]).collect();
    let out = Tensor::from_parts(xv.shape().to_vec(), data);
    Ok(x.tape().record(&[x, bias], out, RowBiasRule { features: f }))
}

struct RowBiasRule {
    features: usize,
}

impl<T: Float> Backward<T> for RowBiasRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); self.features];
            for row in g.chunks(self.features) {
                db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
            db
        });
        vec![needs[0].then(|| g.to_vec()), db]
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        elementwise(ElementwiseKind::Add, self, Operand::Var(other))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        elementwise(ElementwiseKind::Sub, self, Operand::Var(other))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        elementwise(ElementwiseKind::Mul, self, Operand::Var(other))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Self> {
        elementwise(ElementwiseKind::Div, self, Operand::Var(other))
    }

    pub fn scale(self, s: T) -> Self {
        elementwise(ElementwiseKind::Mul, self, Operand::Scalar(s)).expect("scalar ops are total")
    }

    pub fn add_scalar(self, s: T) -> Self {
        elementwise(ElementwiseKind::Add, self, Operand::Scalar(s)).expect("scalar ops are total")
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        matmul(self, other)
    }

    pub fn sum(self) -> Self {
        sum(self)
    }

    pub fn mean(self) -> Self {
        mean(self)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        reshape(self, shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheck};
    use crate::tensor::{RngStream, Tape};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn add_componentwise() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_scalar() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[2.0, 3.0]));
        assert_eq!(a.scale(0.0).value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(row.matmul(col).unwrap().value().data(), &[11.0]);

        let bad = tape.constant(Tensor::zeros([3, 3]));
        assert!(row.matmul(bad).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let grads = tape.backward(x.sum()).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let grads = tape.backward(x.mul(x).unwrap()).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::ones([3]));
        let y = tape.param("y", Tensor::ones([2, 2]));
        let grads = tape.backward(x.sum()).unwrap();
        assert_eq!(grads.wrt(y), Tensor::zeros([2, 2]));
        assert_eq!(grads.named("y").unwrap(), &Tensor::zeros([2, 2]));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..10 {
            let a = random(&[3, 3], &mut rng);
            let b = random(&[3, 3], &mut rng);
            let report: GradCheck = grad_check(
                |x| {
                    let bv = x.tape().constant(b.clone());
                    Ok(x.matmul(bv)?.sum())
                },
                &a,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = RngStream::new(12, 0);
        for kind in [ElementwiseKind::Add, ElementwiseKind::Sub, ElementwiseKind::Mul, ElementwiseKind::Div] {
            for _ in 0..10 {
                let a = random(&[2, 3], &mut rng);
                let b = random(&[2, 3], &mut rng).map(|v| v + 2.0 * v.signum());
                let w = random(&[2, 3], &mut rng);
                let report = grad_check(
                    |x| {
                        let tape = x.tape();
                        let y = elementwise(kind, x, Operand::Var(tape.constant(b.clone())))?;
                        let z = elementwise(kind, tape.constant(b.clone()), Operand::Var(x))?;
                        Ok(y.add(z)?.mul(tape.constant(w.clone()))?.sum())
                    },
                    &a,
                    1e-5,
                )
                .unwrap();
                assert!(report.max_rel_error < 1e-4, "{kind:?} {report:?}");
            }
        }
    }

    #[test]
    fn two_layer_composition_matches_finite_differences() {
        let mut rng = RngStream::new(13, 0);
        let w1 = random(&[4, 5], &mut rng);
        let w2 = random(&[5, 2], &mut rng);
        let bias = random(&[5], &mut rng);
        let x0 = random(&[3, 4], &mut rng);
        let report = grad_check(
            |x| {
                let tape = x.tape();
                let h = add_row_bias(x.matmul(tape.constant(w1.clone()))?, tape.constant(bias.clone()))?;
                let h = h.mul(h)?;
                Ok(h.matmul(tape.constant(w2.clone()))?.mean())
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let tape = Tape::<f32>::new();
            let x = tape.param("x", Tensor::from_fn([4, 4], |i| (i as f32 * 0.3).sin()));
            let y = x.matmul(x).unwrap().mul(x).unwrap().sum();
            tape.backward(y).unwrap().named("x").unwrap().clone()
        };
        let a = run();
        let b = run();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
