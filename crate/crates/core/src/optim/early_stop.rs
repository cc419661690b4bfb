use crate::error::{Error, Result};
use crate::params::NetworkParams;
use crate::tensor::Float;

pub const DEFAULT_PATIENCE: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopState<T: Float = f32> {
    pub patience: usize,
    best_loss: f64,
    best_epoch: Option<usize>,
    snapshot: Option<NetworkParams<T>>,
    counter: usize,
}

impl<T: Float> EarlyStopState<T> {
    pub fn new(patience: usize) -> Self {
        EarlyStopState { patience, best_loss: f64::INFINITY, best_epoch: None, snapshot: None, counter: 0 }
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn best_params(&self) -> Option<&NetworkParams<T>> {
        self.snapshot.as_ref()
    }

    pub fn into_best_params(self) -> Option<NetworkParams<T>> {
        self.snapshot
    }

    /// Records one epoch's validation loss. Only a strictly lower loss counts
    /// as an improvement.
    pub fn update(&mut self, epoch: usize, val_loss: f64, params: &NetworkParams<T>) -> Result<StopDecision> {
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.snapshot = Some(params.clone());
            self.counter = 0;
        } else {
            self.counter += 1;
        }
        Ok(if self.counter > self.patience { StopDecision::Stop } else { StopDecision::Continue })
    }
}
