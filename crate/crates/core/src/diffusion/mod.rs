//! Trajectory diffusion: denoiser, noise ladder, curriculum, training and sampling.

mod curriculum;
mod denoiser;
mod model;
mod sample;
mod schedule;
mod train;

pub use curriculum::{curriculum_gate, Curriculum, CurriculumMode, CURRICULUM_NAMES};
pub use denoiser::{denoise_step, Denoiser, Layout, Modality, WindowMlp, MODALITY_NAMES};
pub use model::{Checkpoint, TrainMeta};
pub use sample::{
    run_sampler, sample, sample_from, select_best, ProjectorChoice, SampleBatch, SampleOptions, SELECTION_METRICS,
};
pub use schedule::{schedule_sigmas, NoiseSchedule};
pub use train::{evaluation_loss, init_denoiser, loss_trace_csv, train, train_from, LossRecord, TrainConfig, TrainOutcome};
