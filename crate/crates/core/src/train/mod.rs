//! Multi-crop sampling, schedules, optimizer, EMA and the training phases.

mod batch;
mod config;
mod crops;
pub mod data;
mod masks;
mod mix;
mod model;
mod optim;
mod schedule;
mod step;
mod trainer;

pub use batch::{build_batch, CropBatch, StudentNoise};
pub use crops::{adaptation_triples, render_crop, sample_crops, sample_triple, CropConfig, CropGeom, CropSet, ResolutionTriple};
pub use data::ShapesDataset;
pub use masks::{mask_count_bounds, sample_mask_plan, MaskConfig};
pub use mix::{next_batch, BatchDescriptor, MixSamplerConfig};
pub use model::{Model, ModelOptimizer, ModelVars};
pub use optim::{ema_update, AdamW};
pub use schedule::{layer_lr, schedule, ScheduleConfig, ScheduleValues};
pub use step::{
    gram_targets, optimize_student, student_objective, teacher_targets, train_step, GramTeacher, GramTeacherPolicy,
    LossTerms, ObjectiveConfig, StepInfo, Targets, TrainState,
};
pub use config::{parse_pairs, EvalConfig, TrainConfig, TrainPhase};
pub use trainer::{
    checkpoint_name, evaluate, extract_features, load_checkpoint, metrics_row, save_checkpoint, CheckpointMeta, EvalReport,
    Batcher, EvalSet, Trainer, EVAL_HEADER, METRICS_HEADER,
};
