//! Training, evaluation and synthetic data.

pub mod eval;
pub mod optim;
pub mod synth;
pub mod teacher;
pub mod train;

pub use eval::{evaluate_dataset, label_map, prompt_rng, EvalReport, EvalRow, ModelSegmenter, Segmenter};
pub use optim::{AdamW, AdamWConfig, Plateau, PlateauConfig};
pub use synth::{gen_synthetic_case, gen_synthetic_case_sized, synthetic_dataset, SyntheticCase};
pub use teacher::{build_teacher_store, RandomTeacher, TeacherStore};
pub use train::{
    distill_stage, draw_sample, finetune_stage, split_val, step_rng, EpochLog, Stage, StepLog, TrainConfig,
    TrainOutcome, TrainSample, TrainState, Trainer,
};
