//! Training, prediction and benchmarking built on the model components.

pub mod bench;
pub mod features;
pub mod predict;
pub mod train;

pub use bench::{format_bench, measure_cell, prepare_scenes, run_bench, sampler_for, BenchCell, BenchReport, CellSpec, PreparedScene};
pub use features::{derive_seed, flatten, group_by_key, EncoderGroup, SceneInputs};
pub use predict::{
    candidates, evaluate, predict, predict_scene, read_predictions, score_candidates, select, write_predictions, Candidates,
    Prediction, PredictOptions, Timing,
};
pub use train::{
    score_examples, scorer_batch_loss, scorer_examples, stage1_loss, train_denoiser, train_scorer, EpochLog, ScorerExample,
    Stage1Batch,
};
