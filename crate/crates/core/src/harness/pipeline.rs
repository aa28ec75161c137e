// SPDX-License-Identifier: Apache-2.0

//! The client pipeline: embed, privatize, upload, denoise; plus denoiser
//! training helpers shared by the scenarios.

use std::io::{self, Read, Write};

use super::config::Method;
use super::world::{cell_rng, denoiser_config, World, STREAM_CLASSIFIER, STREAM_TRAIN, STREAM_TRAIN_PAIRS, STREAM_VAL_PAIRS};
use crate::classifier::{eval_downstream, ClassifierConfig, DownstreamMetrics};
use crate::denoiser::{
    continue_training, denoise_examples, plan_partitions, train_denoiser, DenoiserConfig, DenoiserWeights, EtaPartition,
    EtaPartitionRegistry, LossHistory, PartitionPlan, TrainingExample,
};
use crate::error::{Result, SndError};
use crate::model::{embed_tokens, EncoderWeights};
use crate::privacy::{privatize_tokens, text2text_privatize, tok_emb_priv_baseline, Eta, PrivacyParams};
use crate::protocol::{client_request, handle_request, Session};
use crate::rng::RngState;
use crate::tensor::{cosine, Tensor, TokenMatrix};

/// In-process transport that hands each flushed request to the server
/// handler and buffers the reply. Counts bytes in both directions.
pub struct Loopback<'a> {
    encoder: &'a EncoderWeights,
    pending: Vec<u8>,
    reply: Vec<u8>,
    pos: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl<'a> Loopback<'a> {
    pub fn new(encoder: &'a EncoderWeights) -> Self {
        Self {
            encoder,
            pending: Vec::new(),
            reply: Vec::new(),
            pos: 0,
            bytes_up: 0,
            bytes_down: 0,
        }
    }
}

impl Write for Loopback<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.pending.extend_from_slice(buf);
        self.bytes_up += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if !self.pending.is_empty() {
            let request = std::mem::take(&mut self.pending);
            self.reply.extend_from_slice(&handle_request(&request, self.encoder));
        }
        Ok(())
    }
}

impl Read for Loopback<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let k = buf.len().min(self.reply.len() - self.pos);
        buf[..k].copy_from_slice(&self.reply[self.pos..self.pos + k]);
        self.pos += k;
        self.bytes_down += k as u64;
        if self.pos == self.reply.len() {
            self.reply.clear();
            self.pos = 0;
        }
        Ok(k)
    }
}

/// Sentence embeddings a method yields for one split, plus traffic.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEmbeddings {
    pub embeddings: Tensor,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// What the client holds after uploading one split.
pub struct Uploaded {
    pub examples: Vec<TrainingExample>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Privatizes (clipping per `clip`), uploads through the protocol and
/// collects `(e_n, x_tilde, z)` per sequence. `e_c` is zero: the client
/// never sees it.
pub fn upload(
    world: &World,
    encoder: &EncoderWeights,
    seqs: &[Vec<usize>],
    eta: Eta,
    clip: bool,
    rng: &mut RngState,
) -> Result<Uploaded> {
    let mut session = Session::new(0, Loopback::new(encoder));
    let mut examples = Vec::with_capacity(seqs.len());
    for s in seqs {
        let x = embed_tokens(s, &world.table)?;
        let p = privatize_tokens(&x, PrivacyParams { eta, clip_enabled: clip }, world.bound, rng)?;
        let e_n = client_request(&p.x_tilde, &mut session)?;
        examples.push(TrainingExample {
            e_c: vec![0.0; e_n.dim()],
            e_n: e_n.values,
            x_tilde: p.x_tilde,
            z: p.noise,
        });
    }
    let t = session.into_transport();
    Ok(Uploaded {
        examples,
        bytes_up: t.bytes_up,
        bytes_down: t.bytes_down,
    })
}

fn rows(examples: &[TrainingExample], d: usize) -> Result<Tensor> {
    Tensor::matrix(examples.len(), d, examples.iter().flat_map(|e| e.e_n.iter().copied()).collect())
}

fn remote(encoder: &EncoderWeights, xs: &[TokenMatrix]) -> Result<SplitEmbeddings> {
    let mut session = Session::new(0, Loopback::new(encoder));
    let mut out = Vec::with_capacity(xs.len() * encoder.config.dim);
    for x in xs {
        out.extend(client_request(x, &mut session)?.values);
    }
    let t = session.into_transport();
    Ok(SplitEmbeddings {
        embeddings: Tensor::matrix(xs.len(), encoder.config.dim, out)?,
        bytes_up: t.bytes_up,
        bytes_down: t.bytes_down,
    })
}

/// Embeddings of `seqs` under `method`. `denoiser` is required for SnD.
pub fn method_embeddings(
    world: &World,
    method: Method,
    seqs: &[Vec<usize>],
    eta: Eta,
    denoiser: Option<&DenoiserWeights>,
    rng: &mut RngState,
) -> Result<SplitEmbeddings> {
    let encoder = &world.encoder;
    match method {
        Method::NoNoise => Ok(SplitEmbeddings {
            embeddings: world.clean_embeddings(seqs, encoder)?,
            bytes_up: 0,
            bytes_down: 0,
        }),
        Method::TokEmbPriv => {
            let xs = seqs
                .iter()
                .map(|s| tok_emb_priv_baseline(&embed_tokens(s, &world.table)?, eta, rng))
                .collect::<Result<Vec<_>>>()?;
            remote(encoder, &xs)
        }
        Method::Text2Text => {
            let xs = seqs
                .iter()
                .map(|s| {
                    let ids = text2text_privatize(&embed_tokens(s, &world.table)?, &world.table, eta, rng)?;
                    embed_tokens(&ids, &world.table)
                })
                .collect::<Result<Vec<_>>>()?;
            remote(encoder, &xs)
        }
        Method::Snd => {
            let w = denoiser.ok_or_else(|| SndError::Contract("SnD needs a denoiser".into()))?;
            let up = upload(world, encoder, seqs, eta, world.cfg.clip, rng)?;
            Ok(SplitEmbeddings {
                embeddings: denoise_examples(w, &up.examples)?,
                bytes_up: up.bytes_up,
                bytes_down: up.bytes_down,
            })
        }
    }
}

pub fn classifier_config(world: &World) -> ClassifierConfig {
    ClassifierConfig {
        epochs: world.cfg.classifier_epochs,
        lr: world.cfg.classifier_lr,
        batch_size: world.cfg.classifier_batch,
        ..ClassifierConfig::default()
    }
}

/// Downstream metrics for embeddings of the task's train and test splits.
pub fn downstream(world: &World, train: &Tensor, test: &Tensor, seed: u64) -> Result<DownstreamMetrics> {
    eval_downstream(
        train,
        &world.train_labels,
        test,
        &world.test_labels,
        &classifier_config(world),
        &mut RngState::derive(seed, STREAM_CLASSIFIER),
    )
}

/// Mean per-coordinate squared error and mean cosine of `got` against `clean`.
pub fn mse_cos(got: &Tensor, clean: &Tensor) -> (f64, f64) {
    let n = got.rows() as f64;
    let d = got.cols() as f64;
    let mut mse = 0.0;
    let mut cos = 0.0;
    for i in 0..got.rows() {
        mse += got.row(i).iter().zip(clean.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (n * d);
        cos += cosine(got.row(i), clean.row(i)) / n;
    }
    (mse, cos)
}

/// Clean, noisy and denoised task embeddings for one cell, with downstream
/// metrics for each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownstreamComparison {
    pub clean: DownstreamMetrics,
    pub noisy: DownstreamMetrics,
    pub denoised: DownstreamMetrics,
}

pub fn downstream_comparison(world: &World, w: &DenoiserWeights, eta: Eta, seed: u64) -> Result<DownstreamComparison> {
    let d = world.cfg.dim;
    let clean_train = world.clean_embeddings(&world.task_train, &world.encoder)?;
    let clean_test = world.clean_embeddings(&world.task_test, &world.encoder)?;
    let mut rng = cell_rng(seed);
    let up_train = upload(world, &world.encoder, &world.task_train, eta, world.cfg.clip, &mut rng)?;
    let up_test = upload(world, &world.encoder, &world.task_test, eta, world.cfg.clip, &mut rng)?;
    Ok(DownstreamComparison {
        clean: downstream(world, &clean_train, &clean_test, seed)?,
        noisy: downstream(world, &rows(&up_train.examples, d)?, &rows(&up_test.examples, d)?, seed)?,
        denoised: downstream(
            world,
            &denoise_examples(w, &up_train.examples)?,
            &denoise_examples(w, &up_test.examples)?,
            seed,
        )?,
    })
}

/// Trains one denoiser on public-corpus pairs drawn at `train_etas` and
/// validates on held-out sequences at `val_eta`.
pub struct TrainedDenoiser {
    pub weights: DenoiserWeights,
    pub history: LossHistory,
    pub val_pairs: Vec<TrainingExample>,
}

pub fn train_for(
    world: &World,
    config: &DenoiserConfig,
    train_etas: &[Eta],
    val_eta: Eta,
    clip: bool,
    seed: u64,
) -> Result<TrainedDenoiser> {
    let cfg = &world.cfg;
    let train = world.pairs(
        &world.public_train,
        &world.encoder,
        train_etas,
        clip,
        cfg.samples_per_sequence,
        &mut RngState::derive(seed, STREAM_TRAIN_PAIRS),
    )?;
    let val_pairs = world.pairs(
        &world.public_val,
        &world.encoder,
        &[val_eta],
        clip,
        1,
        &mut RngState::derive(seed, STREAM_VAL_PAIRS),
    )?;
    let (weights, history) = train_denoiser(&train, &val_pairs, config, &mut RngState::derive(seed, STREAM_TRAIN))?;
    Ok(TrainedDenoiser {
        weights,
        history,
        val_pairs,
    })
}

pub fn partition_plan(world: &World) -> Result<PartitionPlan> {
    plan_partitions(&world.table, world.cfg.clip, world.cfg.partition_samples, world.cfg.world_seed)
}

/// Trains the partitions of `plan` that contain any of `etas` (all of them
/// when `etas` is `None`).
pub fn train_registry(world: &World, plan: &PartitionPlan, seed: u64, etas: Option<&[Eta]>) -> Result<EtaPartitionRegistry> {
    let config = denoiser_config(&world.cfg);
    let mut partitions = Vec::new();
    for &(low, high, reps) in &plan.intervals {
        let wanted = etas.is_none_or(|list| list.iter().any(|e| e.value() > low && e.value() <= high.value()));
        if !wanted {
            continue;
        }
        let t = train_for(world, &config, &reps, reps[0], world.cfg.clip, seed)?;
        partitions.push(EtaPartition {
            low,
            high,
            representatives: reps,
            weights: t.weights,
        });
    }
    EtaPartitionRegistry::new(partitions)
}

/// Further epochs on fresh data, as after a server model update.
pub fn finetune(w: &mut DenoiserWeights, fresh: &[TrainingExample], val: &[TrainingExample], epochs: usize, rng: &mut RngState) -> Result<LossHistory> {
    continue_training(w, fresh, val, epochs, rng)
}
