//! Experiment orchestration: configuration, loss assembly, training,
//! evaluation, checkpoints and diagnostics.

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod eval;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::{load_model, save_model, Manifest};
pub use config::{Ablation, AugConfig, ModelConfig, OptimConfig, Precision, RunConfig, SEED_ENV};
pub use eval::{evaluate, EvalReport, NoiseEval};
pub use loss::{total_loss, Breakdown, LossRng};
pub use model::{GilaModel, Network};
pub use train::{train, TrainOutcome};

#[cfg(test)]
pub(crate) fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.d = 8;
    c.model.heads = 2;
    c.model.d_ff = 16;
    c.model.enc_layers = 1;
    c.model.dec_layers = 1;
    c.align.codebook.entries = 4;
    c.corpus.train_size = 12;
    c.corpus.val_size = 3;
    c.corpus.test_size = 6;
    c.optim.total_steps = 4;
    c.optim.warmup_steps = 2;
    c.optim.batch_size = 3;
    c.optim.eval_every = 2;
    c
}
