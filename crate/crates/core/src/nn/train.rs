//! Training state and the epoch loop.

use serde::{Deserialize, Serialize};

use super::graph::{Mode, NetInput, Network};
use super::loss::softmax_cross_entropy;
use super::optim::{Optimizer, OptimizerKind, StepSchedule};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// One training minibatch: network input plus one target class per output
/// position.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub input: NetInput<T>,
    pub targets: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub network: Network<T>,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochLog>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(network: Network<T>, kind: OptimizerKind, seed: u64) -> Self {
        TrainState {
            network,
            optimizer: Optimizer::new(kind),
            epoch: 0,
            seed,
            history: Vec::new(),
        }
    }

    /// Forward, loss, backward and one optimiser update. Returns the loss.
    pub fn train_step(
        &mut self,
        batch: &Batch<T>,
        lr: f64,
        class_weights: Option<&[f64]>,
    ) -> Result<f64> {
        let trace = self.network.forward(&batch.input, Mode::Train)?;
        let (loss, grad) = softmax_cross_entropy(trace.output(), &batch.targets, class_weights)?;
        self.network.zero_grad();
        self.network.backward(&trace, grad, false)?;
        self.optimizer.step(self.network.params_mut(), lr)?;
        Ok(loss)
    }

    /// Runs one epoch over `batches` at the scheduled rate and records it.
    pub fn train_epoch<I>(
        &mut self,
        schedule: &StepSchedule,
        batches: I,
        class_weights: Option<&[f64]>,
    ) -> Result<EpochLog>
    where
        I: IntoIterator<Item = Result<Batch<T>>>,
    {
        let lr = schedule.lr(self.epoch);
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in batches {
            sum += self.train_step(&batch?, lr, class_weights)?;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("epoch without batches".into()));
        }
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            loss: sum / steps as f64,
            steps,
        };
        if !log.loss.is_finite() {
            return Err(Error::NonFinite {
                layer: "loss".into(),
            });
        }
        self.history.push(log.clone());
        self.epoch += 1;
        Ok(log)
    }
}
