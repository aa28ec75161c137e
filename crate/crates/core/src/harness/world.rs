// SPDX-License-Identifier: Apache-2.0

//! A seeded desk-scale world: vocabulary table with a planted attribute,
//! frozen encoder, public corpus and a labelled private task.

use rand::Rng;

use super::config::ExperimentConfig;
use super::corpus::{designated_tokens, label, zipf_corpus};
use crate::denoiser::{
    encode_all, evaluate_loss, generate_training_pairs, DenoiserConfig, DenoiserWeights, TrainingExample,
};
use crate::error::Result;
use crate::model::{embed_tokens, init_toy_model, EncoderConfig, EncoderWeights, VocabEmbeddingTable};
use crate::privacy::{sample_direction, ClipBound, Eta};
use crate::rng::RngState;
use crate::tensor::{cosine, Tensor, TokenMatrix};

// Stream ids for `RngState::derive`.
pub const STREAM_DIRECTION: u64 = 1;
pub const STREAM_PUBLIC: u64 = 2;
pub const STREAM_TASK: u64 = 3;
pub const STREAM_TRAIN_PAIRS: u64 = 10;
pub const STREAM_VAL_PAIRS: u64 = 11;
pub const STREAM_TRAIN: u64 = 12;
pub const STREAM_CLASSIFIER: u64 = 13;
pub const STREAM_DRIFT: u64 = 14;
pub const STREAM_FINETUNE: u64 = 15;
pub const STREAM_EVAL: u64 = 16;
pub const STREAM_CELL: u64 = 17;

/// Noise stream of one `(eta, seed)` cell. It depends on the seed only, so
/// every method and every eta consume the same underlying draws (the
/// noise radius scales as `1/eta`).
pub fn cell_rng(seed: u64) -> RngState {
    RngState::derive(seed, STREAM_CELL)
}

pub struct World {
    pub cfg: ExperimentConfig,
    pub table: VocabEmbeddingTable,
    pub encoder: EncoderWeights,
    pub bound: ClipBound,
    pub designated: Vec<usize>,
    pub public_train: Vec<Vec<usize>>,
    pub public_val: Vec<Vec<usize>>,
    pub task_train: Vec<Vec<usize>>,
    pub train_labels: Vec<f64>,
    pub task_test: Vec<Vec<usize>>,
    pub test_labels: Vec<f64>,
}

pub fn encoder_config(cfg: &ExperimentConfig) -> EncoderConfig {
    EncoderConfig {
        vocab_size: cfg.vocab_size,
        dim: cfg.dim,
        n_layers: cfg.encoder_layers,
        n_head: cfg.encoder_heads,
        d_kv: cfg.encoder_d_kv,
        d_ff: cfg.encoder_d_ff,
        init_std: cfg.encoder_init_std,
        positional: true,
        seed: cfg.world_seed,
    }
}

pub fn denoiser_config(cfg: &ExperimentConfig) -> DenoiserConfig {
    DenoiserConfig {
        d_model: cfg.dim,
        d_ff: cfg.denoiser_d_ff,
        d_kv: cfg.denoiser_d_kv,
        n_head: cfg.denoiser_heads,
        n_layers: cfg.denoiser_layers,
        lr: cfg.denoiser_lr,
        batch_size: cfg.denoiser_batch,
        epochs: cfg.denoiser_epochs,
        ..DenoiserConfig::default()
    }
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (mut table, encoder) = init_toy_model(&encoder_config(cfg))?;
        let designated = designated_tokens(cfg.vocab_size, cfg.zipf_exponent, cfg.seq_len, cfg.designated_count);
        let direction = sample_direction(cfg.dim, &mut RngState::derive(cfg.world_seed, STREAM_DIRECTION));
        table.plant_attribute(&designated, &direction, cfg.attribute_strength)?;
        let bound = ClipBound::from_table(&table)?;

        let mut public = zipf_corpus(
            cfg.vocab_size,
            cfg.zipf_exponent,
            cfg.seq_len,
            cfg.corpus_size,
            &mut RngState::derive(cfg.world_seed, STREAM_PUBLIC),
        )?;
        let n_val = ((cfg.corpus_size as f64 * cfg.validation_fraction).round() as usize).clamp(1, cfg.corpus_size - 1);
        let public_val = public.split_off(cfg.corpus_size - n_val);

        let mut task = zipf_corpus(
            cfg.vocab_size,
            cfg.zipf_exponent,
            cfg.seq_len,
            cfg.task_size,
            &mut RngState::derive(cfg.world_seed, STREAM_TASK),
        )?;
        let task_test = task.split_off(cfg.task_size / 2);
        let train_labels = task.iter().map(|s| label(s, &designated)).collect();
        let test_labels = task_test.iter().map(|s| label(s, &designated)).collect();
        Ok(Self {
            cfg: cfg.clone(),
            table,
            encoder,
            bound,
            designated,
            public_train: public,
            public_val,
            task_train: task,
            train_labels,
            task_test,
            test_labels,
        })
    }

    pub fn embed(&self, seqs: &[Vec<usize>]) -> Result<Vec<TokenMatrix>> {
        seqs.iter().map(|s| embed_tokens(s, &self.table)).collect()
    }

    /// Clean sentence embeddings under `encoder`, one row per sequence.
    pub fn clean_embeddings(&self, seqs: &[Vec<usize>], encoder: &EncoderWeights) -> Result<Tensor> {
        let xs = self.embed(seqs)?;
        encode_all(encoder, &xs.iter().collect::<Vec<_>>())
    }

    /// Denoiser training pairs from `seqs` at the listed etas.
    pub fn pairs(
        &self,
        seqs: &[Vec<usize>],
        encoder: &EncoderWeights,
        etas: &[Eta],
        clip: bool,
        samples: usize,
        rng: &mut RngState,
    ) -> Result<Vec<TrainingExample>> {
        generate_training_pairs(seqs, &self.table, encoder, etas, samples, clip, rng)
    }

    /// Random subset of the public training sequences.
    pub fn public_subset(&self, fraction: f64, rng: &mut RngState) -> Vec<Vec<usize>> {
        let n = ((self.public_train.len() as f64 * fraction).round() as usize).max(1);
        (0..n)
            .map(|_| self.public_train[rng.gen_range(0..self.public_train.len())].clone())
            .collect()
    }
}

/// Denoising quality on validation pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseQuality {
    /// Per-coordinate MSE of `e_d` against `e_c`.
    pub mse_denoised: f64,
    /// Per-coordinate MSE of `e_n` against `e_c`.
    pub mse_noisy: f64,
    pub mean_cos_denoised: f64,
    pub mean_cos_noisy: f64,
    /// Fraction of items with `cos(e_d, e_c) > cos(e_n, e_c)`.
    pub cos_improved_fraction: f64,
}

pub fn denoise_quality(w: &DenoiserWeights, pairs: &[TrainingExample]) -> Result<DenoiseQuality> {
    let out = crate::denoiser::denoise_examples(w, pairs)?;
    let d = w.config.d_model as f64;
    let n = pairs.len() as f64;
    let mut q = DenoiseQuality {
        mse_denoised: evaluate_loss(w, pairs)?,
        mse_noisy: 0.0,
        mean_cos_denoised: 0.0,
        mean_cos_noisy: 0.0,
        cos_improved_fraction: 0.0,
    };
    for (i, p) in pairs.iter().enumerate() {
        let (cd, cn) = (cosine(out.row(i), &p.e_c), cosine(&p.e_n, &p.e_c));
        q.mse_noisy += p.e_n.iter().zip(&p.e_c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (d * n);
        q.mean_cos_denoised += cd / n;
        q.mean_cos_noisy += cn / n;
        if cd > cn {
            q.cos_improved_fraction += 1.0 / n;
        }
    }
    Ok(q)
}
