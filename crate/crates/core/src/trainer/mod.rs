//! Joint optimisation of the encoder and the proposal net.

mod adam;
mod config;
mod run;
mod state;

pub use adam::{adam_update, Adam, AdamHyper};
pub use config::{lr_at, LossForm, TrainConfig};
pub use run::{steps_to_threshold, train, EvalSet, RunOptions, RunSummary};
pub use state::{stream_rng, train_step, DataCursor, RngStreams, StepMetrics, Stream, TrainState};
