//! Optimization: AdamW, the WSD schedule, checkpoint averaging, the
//! pretraining loop and DPO alignment.

mod dpo;
mod optim;
mod schedule;
mod sma;
mod trainer;

pub use dpo::*;
pub use optim::{adamw_step, clip_grad_norm, grad_norm, OptimizerConfig};
pub use schedule::{wsd_lr, WsdSchedule};
pub use sma::{average_params, sma_average, SmaConfig, SmaRing};
pub use trainer::{
    abf_continuation, smoothed_loss, train_loop, write_metrics_csv, MetricsRow, MetricsWriter, TrainOptions,
    TrainOutcome, Trainer, METRICS_HEADER,
};
