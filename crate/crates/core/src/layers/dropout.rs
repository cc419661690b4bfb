use super::{ForwardCtx, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Backward, Float, RngStream, Tensor, Var};

/// Dropout rate used in the discriminator.
pub const DISCRIMINATOR_DROPOUT: f64 = 0.3;

pub(crate) fn dropout_layer<'t, T: Float>(ctx: &ForwardCtx<'t, '_, T>, x: Var<'t, T>, rate: f64) -> Result<Var<'t, T>> {
    check_rate(rate)?;
    match ctx.mode() {
        Mode::Eval => Ok(x),
        Mode::Train if rate == 0.0 => Ok(x),
        Mode::Train => ctx.with_rng_mut(|rng| dropout(x, rate, Mode::Train, rng))?,
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted dropout: survivors are scaled by 1/(1 − rate). Identity in eval mode.
pub fn dropout<'t, T: Float>(x: Var<'t, T>, rate: f64, mode: Mode, rng: &mut RngStream) -> Result<Var<'t, T>> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let xv = x.value();
    let mask: Vec<T> = (0..xv.len()).map(|_| if rng.bernoulli(rate) { T::zero() } else { keep }).collect();
    let out = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    let out = Tensor::from_parts(xv.shape().to_vec(), out);
    Ok(x.tape().record(&[x], out, MaskRule { mask }))
}

struct MaskRule<T> {
    mask: Vec<T>,
}

impl<T: Float> Backward<T> for MaskRule<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn eval_and_zero_rate_are_identity() {
        let tape = Tape::<f32>::new();
        let x = Tensor::from_fn([3, 4], |i| i as f32 + 1.0);
        let mut rng = RngStream::new(1, 0);
        let v = tape.constant(x.clone());
        assert_eq!(dropout(v, 0.5, Mode::Eval, &mut rng).unwrap().value(), x);
        assert_eq!(dropout(v, 0.0, Mode::Train, &mut rng).unwrap().value(), x);
        assert_eq!(dropout(v, 0.0, Mode::Eval, &mut rng).unwrap().value(), x);
    }

    #[test]
    fn rate_of_one_rejected() {
        let tape = Tape::<f32>::new();
        let mut rng = RngStream::new(1, 0);
        assert!(dropout(tape.constant(Tensor::ones([2])), 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn zero_fraction_matches_rate() {
        let tape = Tape::<f32>::new();
        let mut rng = RngStream::new(2, 0);
        let y = dropout(tape.constant(Tensor::ones([100_000])), 0.3, Mode::Train, &mut rng).unwrap();
        let zeros = y.value().data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 1e5;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");
        let kept = y.value().data().iter().find(|&&v| v != 0.0).copied().unwrap();
        assert!((kept - 1.0 / 0.7).abs() < 1e-6);
    }

    #[test]
    fn gradient_uses_same_mask() {
        let tape = Tape::<f64>::new();
        let mut rng = RngStream::new(3, 0);
        let x = tape.leaf(Tensor::ones([50]));
        let y = dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
        let g = tape.backward(y.sum()).unwrap().wrt(x);
        assert_eq!(g, y.value());
    }
}
