//! Losses, Adam, the step learning-rate schedule and early stopping.

mod adam;
mod early_stop;
mod loss;

pub use adam::{adam_step, AdamState};
pub use early_stop::{EarlyStopState, StopDecision, DEFAULT_PATIENCE};
pub use loss::{binary_cross_entropy, categorical_cross_entropy, PROB_CLAMP};

/// `initial · 0.1^floor(epoch / 10)`.
pub fn lr_schedule(initial: f64, epoch: usize) -> f64 {
    initial / 10f64.powi((epoch / 10) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0.001, 0), 0.001);
        assert_eq!(lr_schedule(0.001, 9), 0.001);
        assert_eq!(lr_schedule(0.001, 10), 0.0001);
        assert_eq!(lr_schedule(0.001, 25), 1e-5);
    }

    proptest! {
        #[test]
        fn schedule_is_piecewise_constant_and_non_increasing(initial in 1e-6f64..1.0, epoch in 0usize..200) {
            let k = epoch / 10;
            prop_assert_eq!(lr_schedule(initial, epoch), lr_schedule(initial, 10 * k));
            prop_assert!(lr_schedule(initial, epoch + 1) <= lr_schedule(initial, epoch));
            let expected = initial * 10f64.powi(-(k as i32));
            prop_assert!((lr_schedule(initial, epoch) - expected).abs() <= 1e-15 * initial);
        }
    }
}
