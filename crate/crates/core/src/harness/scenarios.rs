// SPDX-License-Identifier: Apache-2.0

//! Scenario runners. Each returns report rows in a fixed order, so equal
//! configurations produce byte-identical reports.

use std::collections::BTreeMap;
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;

use super::config::Method;
use super::corpus::{corpus_similarity, zipf_corpus};
use super::pipeline::{
    downstream, finetune, method_embeddings, mse_cos, partition_plan, train_for, train_registry, upload,
};
use super::report::{Metric, ReportRow};
use super::world::{
    cell_rng, denoise_quality, denoiser_config, World, STREAM_DRIFT, STREAM_EVAL, STREAM_FINETUNE, STREAM_PUBLIC,
    STREAM_VAL_PAIRS,
};
use crate::denoiser::{denoise_examples, select_denoiser, EtaPartitionRegistry, TrainingExample};
use crate::error::{Result, SndError};
use crate::eval::{attribute_inference, geometry_metrics, inversion_attack, mi_estimate};
use crate::model::{embed_tokens, EncoderWeights};
use crate::params::AdamConfig;
use crate::privacy::{privatize, privatize_tokens, Eta, PrivacyParams};
use crate::protocol::{bind, client_request, serve_tcp, Session};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Scenario names accepted by [`run_scenario`].
pub const SCENARIOS: [&str; 12] = [
    "sweep",
    "ablate-server-denoise",
    "ablate-clipping",
    "update-drill",
    "mi",
    "attack-inversion",
    "attack-attribute",
    "geometry",
    "similarity",
    "train-denoiser",
    "infer",
    "serve",
];

pub fn run_scenario(name: &str, world: &World) -> Result<Vec<ReportRow>> {
    match name {
        "sweep" => eta_sweep(world),
        "ablate-server-denoise" => ablation_server_denoise(world),
        "ablate-clipping" => ablation_clipping(world),
        "update-drill" => model_update_drill(world),
        "mi" => mi_scenario(world),
        "attack-inversion" => inversion_scenario(world),
        "attack-attribute" => attribute_scenario(world),
        "geometry" => geometry_scenario(world),
        "similarity" => similarity_scenario(world),
        "train-denoiser" => train_denoiser_scenario(world),
        "infer" => infer_scenario(world),
        "serve" => serve_scenario(world).map(|_| Vec::new()),
        other => Err(SndError::Config(format!("unknown scenario `{other}`"))),
    }
}

fn row(world: &World, method: &str, eta: Eta, seed: u64, metric: Metric, value: f64) -> ReportRow {
    ReportRow::new(&world.cfg.scenario, method, eta, seed, metric, value)
}

/// Every `(eta, seed, method)` cell of the configured grid: downstream
/// accuracy and AUC, plus MSE and cosine against the clean test embeddings.
pub fn eta_sweep(world: &World) -> Result<Vec<ReportRow>> {
    let cfg = &world.cfg;
    let clean_test = world.clean_embeddings(&world.task_test, &world.encoder)?;
    let mut registries: BTreeMap<u64, EtaPartitionRegistry> = BTreeMap::new();
    if cfg.methods.contains(&Method::Snd) {
        let plan = partition_plan(world)?;
        for &seed in &cfg.seeds {
            registries.insert(seed, train_registry(world, &plan, seed, Some(&cfg.etas))?);
        }
    }
    let mut rows = Vec::new();
    for &eta in &cfg.etas {
        for &seed in &cfg.seeds {
            for &method in &cfg.methods {
                let denoiser = match registries.get(&seed) {
                    Some(r) if method == Method::Snd => Some(select_denoiser(eta, r)?),
                    _ => None,
                };
                // Train then test split, both from the shared cell stream.
                let mut rng = cell_rng(seed);
                let train = method_embeddings(world, method, &world.task_train, eta, denoiser, &mut rng)?;
                let test = method_embeddings(world, method, &world.task_test, eta, denoiser, &mut rng)?;
                let m = downstream(world, &train.embeddings, &test.embeddings, seed)?;
                let (mse, cos) = mse_cos(&test.embeddings, &clean_test);
                let name = method.as_str();
                rows.push(row(world, name, eta, seed, Metric::Acc, m.acc));
                rows.push(row(world, name, eta, seed, Metric::Auc, m.auc));
                rows.push(row(world, name, eta, seed, Metric::Mse, mse));
                rows.push(row(world, name, eta, seed, Metric::Cos, cos));
            }
        }
    }
    Ok(rows)
}

/// Validation MSE/cosine and downstream metrics of one denoising arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmMetrics {
    pub val_mse: f64,
    pub val_cos: f64,
    pub acc: f64,
    pub auc: f64,
}

fn arm_rows(world: &World, method: &str, eta: Eta, seed: u64, m: &ArmMetrics) -> Vec<ReportRow> {
    vec![
        row(world, method, eta, seed, Metric::Mse, m.val_mse),
        row(world, method, eta, seed, Metric::Cos, m.val_cos),
        row(world, method, eta, seed, Metric::Acc, m.acc),
        row(world, method, eta, seed, Metric::Auc, m.auc),
    ]
}

/// Denoises the task splits uploaded at `eta` and scores them downstream.
fn task_metrics(
    world: &World,
    w: Option<&crate::denoiser::DenoiserWeights>,
    eta: Eta,
    clip: bool,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = cell_rng(seed);
    let train = upload(world, &world.encoder, &world.task_train, eta, clip, &mut rng)?;
    let test = upload(world, &world.encoder, &world.task_test, eta, clip, &mut rng)?;
    let embed = |ex: &[TrainingExample]| -> Result<Tensor> {
        match w {
            Some(w) => denoise_examples(w, ex),
            None => Tensor::matrix(ex.len(), world.cfg.dim, ex.iter().flat_map(|e| e.e_n.clone()).collect()),
        }
    };
    let m = downstream(world, &embed(&train.examples)?, &embed(&test.examples)?, seed)?;
    Ok((m.acc, m.auc))
}

/// The three arms of the server-side denoising ablation for one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerAblation {
    pub client: ArmMetrics,
    pub server: ArmMetrics,
    pub none: ArmMetrics,
}

pub fn server_ablation_cell(world: &World, eta: Eta, seed: u64) -> Result<ServerAblation> {
    let clip = world.cfg.clip;
    let client_cfg = denoiser_config(&world.cfg);
    let server_cfg = crate::denoiser::DenoiserConfig {
        use_noise: false,
        ..client_cfg
    };
    let client = train_for(world, &client_cfg, &[eta], eta, clip, seed)?;
    let server = train_for(world, &server_cfg, &[eta], eta, clip, seed)?;
    let arm = |w: &crate::denoiser::DenoiserWeights, val: &[TrainingExample]| -> Result<ArmMetrics> {
        let q = denoise_quality(w, val)?;
        let (acc, auc) = task_metrics(world, Some(w), eta, clip, seed)?;
        Ok(ArmMetrics {
            val_mse: q.mse_denoised,
            val_cos: q.mean_cos_denoised,
            acc,
            auc,
        })
    };
    let q = denoise_quality(&client.weights, &client.val_pairs)?;
    let (acc, auc) = task_metrics(world, None, eta, clip, seed)?;
    Ok(ServerAblation {
        client: arm(&client.weights, &client.val_pairs)?,
        server: arm(&server.weights, &server.val_pairs)?,
        none: ArmMetrics {
            val_mse: q.mse_noisy,
            val_cos: q.mean_cos_noisy,
            acc,
            auc,
        },
    })
}

/// Client denoiser versus a capacity-matched denoiser that never sees the
/// noise, versus no denoising.
pub fn ablation_server_denoise(world: &World) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &eta in &world.cfg.etas {
        for &seed in &world.cfg.seeds {
            let a = server_ablation_cell(world, eta, seed)?;
            rows.extend(arm_rows(world, "snd", eta, seed, &a.client));
            rows.extend(arm_rows(world, "server_denoise", eta, seed, &a.server));
            rows.extend(arm_rows(world, "no_denoise", eta, seed, &a.none));
        }
    }
    Ok(rows)
}

pub fn clipping_arm(world: &World, eta: Eta, seed: u64, clip: bool) -> Result<ArmMetrics> {
    let t = train_for(world, &denoiser_config(&world.cfg), &[eta], eta, clip, seed)?;
    let q = denoise_quality(&t.weights, &t.val_pairs)?;
    let (acc, auc) = task_metrics(world, Some(&t.weights), eta, clip, seed)?;
    Ok(ArmMetrics {
        val_mse: q.mse_denoised,
        val_cos: q.mean_cos_denoised,
        acc,
        auc,
    })
}

/// The full pipeline with and without norm clipping.
pub fn ablation_clipping(world: &World) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &eta in &world.cfg.etas {
        for &seed in &world.cfg.seeds {
            rows.extend(arm_rows(world, "snd_clip", eta, seed, &clipping_arm(world, eta, seed, true)?));
            rows.extend(arm_rows(world, "snd_noclip", eta, seed, &clipping_arm(world, eta, seed, false)?));
        }
    }
    Ok(rows)
}

/// Validation MSE at each stage of the update drill.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrillResult {
    pub pre_update: f64,
    pub post_update: f64,
    pub finetuned: f64,
    /// Same measurement after a no-op update.
    pub control: f64,
}

/// Provider-side update: fine-tunes the encoder on a shifted corpus with a
/// different labelling rule.
pub fn drift_encoder(world: &World, seed: u64) -> Result<EncoderWeights> {
    let cfg = &world.cfg;
    let mut rng = RngState::derive(seed, STREAM_DRIFT);
    let shifted = zipf_corpus(cfg.vocab_size, cfg.zipf_exponent * 0.8, cfg.seq_len, 512, &mut rng)?;
    let pivot = cfg.vocab_size / 2;
    let labels: Vec<f64> = shifted
        .iter()
        .map(|s| {
            let high = s.iter().filter(|&&t| t >= pivot / 4).count();
            if 2 * high >= s.len() {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let xs = world.embed(&shifted)?;
    let mut encoder = world.encoder.clone();
    let adam = AdamConfig {
        lr: cfg.drift_lr,
        ..AdamConfig::default()
    };
    encoder.finetune_with_probe(&xs, &labels, cfg.drift_steps, 32, &adam, &mut rng)?;
    Ok(encoder)
}

fn validation_pairs(world: &World, encoder: &EncoderWeights, eta: Eta, seed: u64) -> Result<Vec<TrainingExample>> {
    world.pairs(
        &world.public_val,
        encoder,
        &[eta],
        world.cfg.clip,
        1,
        &mut RngState::derive(seed, STREAM_VAL_PAIRS),
    )
}

pub fn drill_cell(world: &World, eta: Eta, seed: u64) -> Result<DrillResult> {
    let cfg = &world.cfg;
    let base = train_for(world, &denoiser_config(cfg), &[eta], eta, cfg.clip, seed)?;
    let pre_update = denoise_quality(&base.weights, &base.val_pairs)?.mse_denoised;

    let unchanged = world.encoder.clone();
    let control = denoise_quality(&base.weights, &validation_pairs(world, &unchanged, eta, seed)?)?.mse_denoised;

    let drifted = drift_encoder(world, seed)?;
    let val = validation_pairs(world, &drifted, eta, seed)?;
    let post_update = denoise_quality(&base.weights, &val)?.mse_denoised;

    let mut rng = RngState::derive(seed, STREAM_FINETUNE);
    let fresh_seqs = world.public_subset(cfg.finetune_fraction, &mut rng);
    let fresh = world.pairs(&fresh_seqs, &drifted, &[eta], cfg.clip, cfg.samples_per_sequence, &mut rng)?;
    let mut w = base.weights.clone();
    finetune(&mut w, &fresh, &val, cfg.finetune_epochs, &mut rng)?;
    let finetuned = denoise_quality(&w, &val)?.mse_denoised;
    Ok(DrillResult {
        pre_update,
        post_update,
        finetuned,
        control,
    })
}

/// Denoiser validation MSE before and after a server model update, after
/// a short fine-tune on fresh data, and for a no-update control.
pub fn model_update_drill(world: &World) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &eta in &world.cfg.etas {
        for &seed in &world.cfg.seeds {
            let r = drill_cell(world, eta, seed)?;
            for (stage, v) in [
                ("pre_update", r.pre_update),
                ("post_update", r.post_update),
                ("finetuned", r.finetuned),
                ("control", r.control),
            ] {
                rows.push(row(world, stage, eta, seed, Metric::Mse, v));
            }
        }
    }
    Ok(rows)
}

/// `n` tokens drawn uniformly from the vocabulary.
fn token_sample(world: &World, n: usize, rng: &mut RngState) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..world.cfg.vocab_size)).collect()
}

/// Mutual information between clean and privatized token representations
/// of `n` uniformly drawn tokens, from the raw mechanism output.
pub fn mi_cell(world: &World, eta: Eta, seed: u64) -> Result<f64> {
    let mut rng = RngState::derive(seed, STREAM_EVAL);
    let ids = token_sample(world, world.cfg.n, &mut rng);
    let x = embed_tokens(&ids, &world.table)?;
    let (x_tilde, z) = privatize(&x, eta, &mut rng)?;
    Ok(mi_estimate(&x_tilde, &z, world.cfg.k)?.value)
}

pub fn mi_scenario(world: &World) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &eta in &world.cfg.etas {
        for &seed in &world.cfg.seeds {
            rows.push(row(world, "snd", eta, seed, Metric::Mi, mi_cell(world, eta, seed)?));
        }
    }
    Ok(rows)
}

/// Nearest-neighbour inversion of `n` uploaded (privatized, clipped per
/// config) token vectors.
pub fn inversion_scenario(world: &World) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &eta in &world.cfg.etas {
        for &seed in &world.cfg.seeds {
            let mut rng = RngState::derive(seed, STREAM_EVAL);
            let ids = token_sample(world, world.cfg.n, &mut rng);
            let x = embed_tokens(&ids, &world.table)?;
            let p = privatize_tokens(
                &x,
                PrivacyParams {
                    eta,
                    clip_enabled: world.cfg.clip,
                },
                world.bound,
                &mut rng,
            )?;
            let r = inversion_attack(&p.x_tilde, &world.table, &ids)?;
            rows.push(row(world, "snd", eta, seed, Metric::AttackAcc, r.accuracy));
        }
    }
    Ok(rows)
}

/// Attribute inference from mean-pooled uploaded token vectors.
pub fn attribute_scenario(world: &World) -> Result<Vec<ReportRow>> {
    let cfg = &world.cfg;
    let params = |eta| PrivacyParams {
        eta,
        clip_enabled: cfg.clip,
    };
    let mut rows = Vec::new();
    for &eta in &cfg.etas {
        for &seed in &cfg.seeds {
            let mut rng = cell_rng(seed);
            let mut split = |seqs: &[Vec<usize>]| -> Result<Vec<Tensor>> {
                seqs.iter()
                    .map(|s| Ok(privatize_tokens(&embed_tokens(s, &world.table)?, params(eta), world.bound, &mut rng)?.x_tilde))
                    .collect()
            };
            let train = split(&world.task_train)?;
            let test = split(&world.task_test)?;
            let r = attribute_inference(
                &train,
                &world.train_labels,
                &test,
                &world.test_labels,
                &super::pipeline::classifier_config(world),
                &mut RngState::derive(seed, super::world::STREAM_CLASSIFIER),
            )?;
            rows.push(row(world, "snd", eta, seed, Metric::AttackAcc, r.accuracy));
            rows.push(row(world, "snd", eta, seed, Metric::Auc, r.auc.unwrap_or(f64::NAN)));
        }
    }
    Ok(rows)
}

pub fn geometry_scenario(world: &World) -> Result<Vec<ReportRow>> {
    let cfg = &world.cfg;
    let mut rows = Vec::new();
    for &eta in &cfg.etas {
        for &seed in &cfg.seeds {
            let r = geometry_metrics(
                &world.table,
                eta,
                cfg.k,
                &mut RngState::derive(seed, STREAM_EVAL),
                cfg.geometry_samples.min(cfg.vocab_size),
                cfg.noise_draws,
            )?;
            rows.push(row(world, "snd", eta, seed, Metric::KnnDist, r.mean_knn_distance));
            rows.push(row(world, "snd", eta, seed, Metric::PerturbDist, r.mean_perturbation));
        }
    }
    Ok(rows)
}

/// Rank similarity between the public corpus and a fresh corpus drawn per
/// seed. Rows carry eta `inf` since no noise is involved.
pub fn similarity_scenario(world: &World) -> Result<Vec<ReportRow>> {
    let cfg = &world.cfg;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let other = zipf_corpus(
            cfg.vocab_size,
            cfg.zipf_exponent,
            cfg.seq_len,
            cfg.corpus_size,
            &mut RngState::derive(seed, STREAM_PUBLIC + 100),
        )?;
        let rho = corpus_similarity(&world.public_train, &other)?;
        rows.push(row(world, "corpus", Eta::Infinite, seed, Metric::Rho, rho));
    }
    Ok(rows)
}

fn registry_path(world: &World) -> PathBuf {
    world.cfg.registry.clone().unwrap_or_else(|| PathBuf::from("denoisers.txt"))
}

/// Trains all partitions for the first seed and writes the registry
/// manifest. Rows report the final validation MSE per partition, keyed by
/// the partition's upper eta.
pub fn train_denoiser_scenario(world: &World) -> Result<Vec<ReportRow>> {
    let seed = world.cfg.seeds[0];
    let plan = partition_plan(world)?;
    let registry = train_registry(world, &plan, seed, None)?;
    registry.save_manifest(&registry_path(world))?;
    let mut rows = Vec::new();
    for p in registry.partitions() {
        let val = validation_pairs(world, &world.encoder, p.representatives[0], seed)?;
        let q = denoise_quality(&p.weights, &val)?;
        rows.push(row(world, "snd", p.high, seed, Metric::Mse, q.mse_denoised));
        rows.push(row(world, "no_denoise", p.high, seed, Metric::Mse, q.mse_noisy));
    }
    Ok(rows)
}

fn endpoint(world: &World) -> Result<String> {
    world
        .cfg
        .endpoint
        .clone()
        .ok_or_else(|| SndError::Config("no endpoint: pass --endpoint or set SND_ENDPOINT".into()))
}

/// Serves the world's encoder until `max_connections` connections are done
/// (forever when unset).
pub fn serve_scenario(world: &World) -> Result<()> {
    let listener = bind(endpoint(world)?)?;
    if let Ok(addr) = listener.local_addr() {
        eprintln!("listening on {addr}");
    }
    serve_tcp(listener, Arc::new(world.encoder.clone()), world.cfg.max_connections)
}

/// Client side over TCP: uploads the first `n` test sequences at each eta,
/// denoises with the registry when one is configured, and reports quality
/// against locally computed clean embeddings plus traffic.
pub fn infer_scenario(world: &World) -> Result<Vec<ReportRow>> {
    let cfg = &world.cfg;
    let registry = match &cfg.registry {
        Some(p) => Some(EtaPartitionRegistry::load_manifest(p)?),
        None => None,
    };
    let stream = TcpStream::connect(endpoint(world)?).map_err(|e| SndError::Transport(e.to_string()))?;
    let mut session = Session::new(0, crate::protocol::Metered::new(stream));
    let counters = session.transport().counters();
    let seqs = &world.task_test[..cfg.n.min(world.task_test.len())];
    let clean = world.clean_embeddings(seqs, &world.encoder)?;
    let mut rows = Vec::new();
    for &eta in &cfg.etas {
        for &seed in &cfg.seeds {
            let mut rng = cell_rng(seed);
            let (up0, down0) = (counters.sent(), counters.received());
            let mut examples = Vec::with_capacity(seqs.len());
            for s in seqs {
                let x = embed_tokens(s, &world.table)?;
                let p = privatize_tokens(&x, PrivacyParams { eta, clip_enabled: cfg.clip }, world.bound, &mut rng)?;
                let e_n = client_request(&p.x_tilde, &mut session)?;
                examples.push(TrainingExample {
                    e_c: vec![0.0; e_n.dim()],
                    e_n: e_n.values,
                    x_tilde: p.x_tilde,
                    z: p.noise,
                });
            }
            let (method, out) = match &registry {
                Some(r) => ("snd", denoise_examples(select_denoiser(eta, r)?, &examples)?),
                None => (
                    "no_denoise",
                    Tensor::matrix(examples.len(), cfg.dim, examples.iter().flat_map(|e| e.e_n.clone()).collect())?,
                ),
            };
            let (mse, cos) = mse_cos(&out, &clean);
            rows.push(row(world, method, eta, seed, Metric::Mse, mse));
            rows.push(row(world, method, eta, seed, Metric::Cos, cos));
            rows.push(row(world, method, eta, seed, Metric::BytesUp, (counters.sent() - up0) as f64));
            rows.push(row(world, method, eta, seed, Metric::BytesDown, (counters.received() - down0) as f64));
        }
    }
    Ok(rows)
}
