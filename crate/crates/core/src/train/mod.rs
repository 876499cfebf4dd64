//! Optimization: schedule, Adam, EMA, per-type reference energies, the
//! Noisy Nodes training step, evaluation, and checkpoints.

mod atomref;
mod checkpoint;
mod evaluate;
mod optim;
mod schedule;
mod state;
mod step;

pub use atomref::{atom_counts, fit_atomref, reference_value};
pub use checkpoint::{checkpoint_load, checkpoint_save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use evaluate::{evaluate, predict, EvalRecord, Predictions};
pub use optim::{adam_update, ema_decay, ema_update, AdamConfig};
pub use schedule::{lr_schedule, ScheduleSpec};
pub use state::{Normalizer, Task, TrainConfig, TrainState};
pub use step::{prepare_batch, train_step, LossRecord, PreparedBatch};
