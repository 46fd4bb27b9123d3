//! The full training objective, AdamW, mixed image/video batch sampling and
//! the alternating generator/discriminator training loop.

pub mod losses;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use losses::{
    adversarial_losses, hinge_disc_term, hinge_gen_term, kl_loss, kl_term, total_loss, total_loss_graph,
    LossBreakdown, LossGraph, LossInputs, LossWeights,
};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use schedule::{sample_batch, BatchSchedule, Datasets, ScheduleEntry};
pub use trainer::{StepMetrics, TrainConfig, Trainer};
