// SPDX-License-Identifier: Apache-2.0

//! Client-side embedding denoiser.
//!
//! The denoiser reads the sequence `[e_n; x̃_1..x̃_n; z_1..z_n]`, adds a
//! segment embedding (noisy embedding / privatized token / noise) and a
//! learned position embedding (index within the segment), then applies `L`
//! residual blocks
//!
//! ```text
//! a = attn(h)
//! h <- h + a + W_proj gelu(W_fc LN(a + h))
//! ```
//!
//! with full bidirectional attention. The denoised embedding is the final
//! hidden state at position 0.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnLayout, Graph, Var};
use crate::error::{Result, SndError};
use crate::model::{embed_tokens, EmbeddingRole, EncoderWeights, SentenceEmbedding, VocabEmbeddingTable, MAX_SEQ_LEN};
use crate::nn;
use crate::params::{AdamConfig, ParameterStore};
use crate::privacy::{privatize_tokens, token_correlation, ClipBound, Eta, PrivacyParams};
use crate::rng::RngState;
use crate::tensor::{Tensor, TokenMatrix};

pub const SEGMENT_NOISY_EMBEDDING: usize = 0;
pub const SEGMENT_PRIVATIZED: usize = 1;
pub const SEGMENT_NOISE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub d_kv: usize,
    pub n_head: usize,
    pub n_layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub init_std: f64,
    /// `false` zeroes the noise block: a denoiser without noise knowledge,
    /// as a server would have to run it.
    pub use_noise: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_ff: 64,
            d_kv: 8,
            n_head: 4,
            n_layers: 2,
            lr: 1e-3,
            batch_size: 32,
            epochs: 2,
            weight_decay: 0.0,
            init_std: nn::INIT_STD,
            use_noise: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.d_model, self.d_ff, self.d_kv, self.n_head, self.batch_size];
        if sizes.iter().any(|&s| s == 0) || !(self.lr > 0.0) {
            return Err(SndError::Parameter(format!("invalid denoiser config {self:?}")));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    pub config: DenoiserConfig,
    pub store: ParameterStore,
}

impl DenoiserWeights {
    /// Seeded initialization. Segment and position embeddings start at zero.
    pub fn init<R: Rng + ?Sized>(config: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParameterStore::new();
        store.insert("segment", Tensor::zeros(&[3, d]));
        store.insert("position", Tensor::zeros(&[MAX_SEQ_LEN + 1, d]));
        for l in 0..config.n_layers {
            let p = format!("dn{l}");
            nn::init_attention(
                &mut store,
                &format!("{p}.attn"),
                d,
                config.n_head,
                config.d_kv,
                config.init_std,
                rng,
            );
            nn::init_layer_norm(&mut store, &format!("{p}.ln"), d);
            nn::init_feed_forward(&mut store, &format!("{p}.ff"), d, config.d_ff, config.init_std, rng);
        }
        Ok(Self {
            config: *config,
            store,
        })
    }

    /// Writes the weights with the architecture in a `meta.config` record.
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut out = self.store.clone();
        out.insert(
            "meta.config",
            Tensor::vector(vec![
                c.d_model as f64,
                c.d_ff as f64,
                c.d_kv as f64,
                c.n_head as f64,
                c.n_layers as f64,
                if c.use_noise { 1.0 } else { 0.0 },
            ]),
        );
        out.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = ParameterStore::load(path)?;
        let meta = store
            .get("meta.config")
            .ok_or_else(|| SndError::Checkpoint("missing meta.config record".into()))?
            .data()
            .to_vec();
        if meta.len() != 6 {
            return Err(SndError::Checkpoint("meta.config must hold 6 values".into()));
        }
        let config = DenoiserConfig {
            d_model: meta[0] as usize,
            d_ff: meta[1] as usize,
            d_kv: meta[2] as usize,
            n_head: meta[3] as usize,
            n_layers: meta[4] as usize,
            use_noise: meta[5] != 0.0,
            ..DenoiserConfig::default()
        };
        let mut fresh = DenoiserWeights::init(&config, &mut RngState::new(0))?;
        let copied = fresh.store.load_values_from(&store);
        store.zero_grads();
        if copied != fresh.store.len() {
            return Err(SndError::Checkpoint(format!(
                "checkpoint provides {copied} of {} parameters",
                fresh.store.len()
            )));
        }
        fresh.config = config;
        Ok(fresh)
    }
}

/// One denoiser training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub e_n: Vec<f64>,
    pub x_tilde: TokenMatrix,
    pub z: TokenMatrix,
    pub e_c: Vec<f64>,
}

/// A padded batch: row `b` of `e_n` / `e_c` pairs with `x_tilde[b]`, `z[b]`.
/// `mask` flags the valid positions of the `(2 * max_n + 1)`-long inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub e_n: Tensor,
    pub x_tilde: Vec<TokenMatrix>,
    pub z: Vec<TokenMatrix>,
    pub e_c: Tensor,
    pub mask: Vec<bool>,
}

impl TrainingBatch {
    pub fn from_examples(examples: &[&TrainingExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(SndError::Empty("training batch".into()));
        }
        let d = examples[0].e_n.len();
        let max_n = examples.iter().map(|e| e.x_tilde.rows()).max().unwrap_or(0);
        let seq = 2 * max_n + 1;
        let mut mask = vec![false; examples.len() * seq];
        let mut e_n = Vec::with_capacity(examples.len() * d);
        let mut e_c = Vec::with_capacity(examples.len() * d);
        for (b, ex) in examples.iter().enumerate() {
            if ex.x_tilde.shape() != ex.z.shape() {
                return Err(SndError::Dimension("privatized and noise matrices differ in shape".into()));
            }
            let n = ex.x_tilde.rows();
            mask[b * seq] = true;
            for t in 0..n {
                mask[b * seq + 1 + t] = true;
                mask[b * seq + 1 + max_n + t] = true;
            }
            e_n.extend_from_slice(&ex.e_n);
            e_c.extend_from_slice(&ex.e_c);
        }
        Ok(Self {
            e_n: Tensor::matrix(examples.len(), d, e_n)?,
            x_tilde: examples.iter().map(|e| e.x_tilde.clone()).collect(),
            z: examples.iter().map(|e| e.z.clone()).collect(),
            e_c: Tensor::matrix(examples.len(), d, e_c)?,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.x_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_tilde.is_empty()
    }
}

/// Stacked raw inputs plus segment/position ids for a padded batch.
struct RawInput {
    stacked: Tensor,
    segment_ids: Vec<usize>,
    position_ids: Vec<usize>,
    seq: usize,
}

fn raw_input(
    e_n: &Tensor,
    x_tilde: &[TokenMatrix],
    z: &[TokenMatrix],
    use_noise: bool,
) -> Result<RawInput> {
    let d = e_n.cols();
    let max_n = x_tilde.iter().map(|x| x.rows()).max().unwrap_or(0);
    if max_n > MAX_SEQ_LEN {
        return Err(SndError::Parameter(format!("sequence length {max_n} exceeds {MAX_SEQ_LEN}")));
    }
    let seq = 2 * max_n + 1;
    let batch = x_tilde.len();
    let mut stacked = Tensor::zeros(&[batch * seq, d]);
    let mut segment_ids = vec![SEGMENT_NOISY_EMBEDDING; batch * seq];
    let mut position_ids = vec![0; batch * seq];
    for b in 0..batch {
        let (xt, zb) = (&x_tilde[b], &z[b]);
        if xt.shape() != zb.shape() {
            return Err(SndError::Dimension(format!(
                "privatized {:?} vs noise {:?}",
                xt.shape(),
                zb.shape()
            )));
        }
        if xt.cols() != d {
            return Err(SndError::Dimension(format!(
                "token width {} vs embedding width {d}",
                xt.cols()
            )));
        }
        let base = b * seq;
        stacked.row_mut(base).copy_from_slice(e_n.row(b));
        for t in 0..max_n {
            let (xi, zi) = (base + 1 + t, base + 1 + max_n + t);
            segment_ids[xi] = SEGMENT_PRIVATIZED;
            segment_ids[zi] = SEGMENT_NOISE;
            position_ids[xi] = t + 1;
            position_ids[zi] = t + 1;
            if t < xt.rows() {
                stacked.row_mut(xi).copy_from_slice(xt.row(t));
                if use_noise {
                    stacked.row_mut(zi).copy_from_slice(zb.row(t));
                }
            }
        }
    }
    Ok(RawInput {
        stacked,
        segment_ids,
        position_ids,
        seq,
    })
}

/// `H0` for one item: the concatenated rows plus segment and position
/// embeddings. Shape `(2n + 1) x d_model`.
pub fn build_input(
    e_n: &SentenceEmbedding,
    x_tilde: &TokenMatrix,
    z: &TokenMatrix,
    w: &DenoiserWeights,
) -> Result<Tensor> {
    let e = Tensor::matrix(1, e_n.dim(), e_n.values.clone())?;
    let raw = raw_input(&e, std::slice::from_ref(x_tilde), std::slice::from_ref(z), w.config.use_noise)?;
    let seg = w.store.get("segment").expect("segment table");
    let pos = w.store.get("position").expect("position table");
    let mut h0 = raw.stacked;
    for i in 0..h0.rows() {
        let (s, p) = (seg.row(raw.segment_ids[i]), pos.row(raw.position_ids[i]));
        for (j, v) in h0.row_mut(i).iter_mut().enumerate() {
            *v += s[j] + p[j];
        }
    }
    Ok(h0)
}

fn blocks(g: &mut Graph, store: &ParameterStore, cfg: &DenoiserConfig, mut h: Var, layout: &AttnLayout) -> Result<Var> {
    for l in 0..cfg.n_layers {
        let p = format!("dn{l}");
        let a = nn::attention_block(g, store, &format!("{p}.attn"), h, layout.clone())?;
        let u = g.add(a, h)?;
        let normed = nn::layer_norm(g, store, &format!("{p}.ln"), u)?;
        let m = nn::feed_forward(g, store, &format!("{p}.ff"), normed)?;
        h = g.add(u, m)?;
    }
    Ok(h)
}

/// Runs the blocks on an assembled `H0` and reads out position 0.
pub fn denoise_forward(h0: &Tensor, w: &DenoiserWeights, mask: &[bool]) -> Result<SentenceEmbedding> {
    let cfg = &w.config;
    let layout = AttnLayout {
        batch: 1,
        seq: h0.rows(),
        n_head: cfg.n_head,
        d_kv: cfg.d_kv,
        mask: mask.to_vec(),
    };
    let mut g = Graph::new();
    let h = g.input(h0.clone());
    let out = blocks(&mut g, &w.store, cfg, h, &layout)?;
    Ok(SentenceEmbedding::new(
        g.value(out).row(0).to_vec(),
        EmbeddingRole::Denoised,
    ))
}

/// Differentiable batch forward; returns the `batch x d` denoised rows.
pub fn forward_batch(g: &mut Graph, w: &DenoiserWeights, batch: &TrainingBatch) -> Result<Var> {
    let cfg = &w.config;
    let raw = raw_input(&batch.e_n, &batch.x_tilde, &batch.z, cfg.use_noise)?;
    let layout = AttnLayout {
        batch: batch.len(),
        seq: raw.seq,
        n_head: cfg.n_head,
        d_kv: cfg.d_kv,
        mask: batch.mask.clone(),
    };
    let x = g.input(raw.stacked);
    let seg_table = g.param(&w.store, "segment")?;
    let seg = g.gather(seg_table, raw.segment_ids)?;
    let pos_table = g.param(&w.store, "position")?;
    let pos = g.gather(pos_table, raw.position_ids)?;
    let h = g.add(x, seg)?;
    let h = g.add(h, pos)?;
    let h = blocks(g, &w.store, cfg, h, &layout)?;
    let readout = (0..batch.len()).map(|b| b * raw.seq).collect();
    g.gather(h, readout)
}

/// Mean squared error between denoised and clean embeddings over a batch.
pub fn batch_loss(g: &mut Graph, w: &DenoiserWeights, batch: &TrainingBatch) -> Result<Var> {
    let out = forward_batch(g, w, batch)?;
    let target = g.input(batch.e_c.clone());
    g.mse(out, target)
}

/// Denoises one received embedding.
pub fn denoise(
    e_n: &SentenceEmbedding,
    x_tilde: &TokenMatrix,
    z: &TokenMatrix,
    w: &DenoiserWeights,
) -> Result<SentenceEmbedding> {
    let h0 = build_input(e_n, x_tilde, z, w)?;
    denoise_forward(&h0, w, &vec![true; h0.rows()])
}

/// Denoised embeddings for many examples, `examples.len() x d`.
pub fn denoise_examples(w: &DenoiserWeights, examples: &[TrainingExample]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(examples.len() * w.config.d_model);
    for chunk in examples.chunks(64) {
        let refs: Vec<&TrainingExample> = chunk.iter().collect();
        let batch = TrainingBatch::from_examples(&refs)?;
        let mut g = Graph::new();
        let out = forward_batch(&mut g, w, &batch)?;
        rows.extend_from_slice(g.value(out).data());
    }
    Tensor::matrix(examples.len(), w.config.d_model, rows)
}

/// Builds training pairs from a public corpus: every sequence is embedded,
/// privatized `samples_per_sequence` times at an eta drawn uniformly from
/// `etas`, and encoded both clean and privatized.
#[allow(clippy::too_many_arguments)]
pub fn generate_training_pairs(
    corpus: &[Vec<usize>],
    table: &VocabEmbeddingTable,
    encoder: &EncoderWeights,
    etas: &[Eta],
    samples_per_sequence: usize,
    clip_enabled: bool,
    rng: &mut RngState,
) -> Result<Vec<TrainingExample>> {
    if corpus.is_empty() {
        return Err(SndError::Empty("public corpus".into()));
    }
    if etas.is_empty() {
        return Err(SndError::Empty("eta list".into()));
    }
    let bound = ClipBound::from_table(table)?;
    let mut clean = Vec::with_capacity(corpus.len());
    let mut privatized = Vec::with_capacity(corpus.len() * samples_per_sequence);
    for (i, ids) in corpus.iter().enumerate() {
        let x = embed_tokens(ids, table)?;
        for _ in 0..samples_per_sequence {
            let eta = etas[rng.gen_range(0..etas.len())];
            let p = privatize_tokens(&x, PrivacyParams { eta, clip_enabled }, bound, rng)?;
            privatized.push((i, p));
        }
        clean.push(x);
    }
    let e_c = encode_all(encoder, &clean.iter().collect::<Vec<_>>())?;
    let e_n = encode_all(encoder, &privatized.iter().map(|(_, p)| &p.x_tilde).collect::<Vec<_>>())?;
    Ok(privatized
        .into_iter()
        .enumerate()
        .map(|(k, (i, p))| TrainingExample {
            e_n: e_n.row(k).to_vec(),
            x_tilde: p.x_tilde,
            z: p.noise,
            e_c: e_c.row(i).to_vec(),
        })
        .collect())
}

/// Encodes in fixed-size chunks; row `i` belongs to `xs[i]`.
pub fn encode_all(encoder: &EncoderWeights, xs: &[&TokenMatrix]) -> Result<Tensor> {
    let d = encoder.config.dim;
    let mut rows = Vec::with_capacity(xs.len() * d);
    for chunk in xs.chunks(64) {
        rows.extend_from_slice(encoder.encode_batch(chunk)?.data());
    }
    Tensor::matrix(xs.len(), d, rows)
}

/// Per-epoch losses. Index 0 holds the losses before any update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
}

/// Mean squared error of the denoiser over `examples`.
pub fn evaluate_loss(w: &DenoiserWeights, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let out = denoise_examples(w, examples)?;
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        total += out
            .row(i)
            .iter()
            .zip(&ex.e_c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / (examples.len() * w.config.d_model) as f64)
}

/// Trains a fresh denoiser on `train`, tracking validation loss on `val`.
pub fn train_denoiser(
    train: &[TrainingExample],
    val: &[TrainingExample],
    config: &DenoiserConfig,
    rng: &mut RngState,
) -> Result<(DenoiserWeights, LossHistory)> {
    let mut w = DenoiserWeights::init(config, rng)?;
    let history = continue_training(&mut w, train, val, config.epochs, rng)?;
    Ok((w, history))
}

/// Further epochs on existing weights (fresh optimizer state).
pub fn continue_training(
    w: &mut DenoiserWeights,
    train: &[TrainingExample],
    val: &[TrainingExample],
    epochs: usize,
    rng: &mut RngState,
) -> Result<LossHistory> {
    if train.is_empty() {
        return Err(SndError::Empty("training data".into()));
    }
    let adam = w.config.adam();
    let mut store = ParameterStore::new();
    std::mem::swap(&mut store, &mut w.store);
    let mut fresh = ParameterStore::new();
    for name in store.names() {
        fresh.insert(name, store.get(name).expect("listed").clone());
    }
    w.store = fresh;

    let mut history = LossHistory {
        train: vec![evaluate_loss(w, train)?],
        validation: vec![evaluate_loss(w, val)?],
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(w.config.batch_size) {
            let refs: Vec<&TrainingExample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = TrainingBatch::from_examples(&refs)?;
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, w, &batch)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(SndError::Diverged { epoch });
            }
            total += value * chunk.len() as f64;
            g.backward(loss, &mut w.store)?;
            w.store.adam_step(&adam);
        }
        history.train.push(total / train.len() as f64);
        let v = evaluate_loss(w, val)?;
        if val.is_empty() || v.is_finite() {
            history.validation.push(v);
        } else {
            return Err(SndError::Diverged { epoch });
        }
    }
    Ok(history)
}

/// One eta interval `(low, high]` served by one trained denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaPartition {
    pub low: f64,
    pub high: Eta,
    /// The two eta values whose noise the model was trained on.
    pub representatives: [Eta; 2],
    pub weights: DenoiserWeights,
}

impl EtaPartition {
    pub fn contains(&self, eta: Eta) -> bool {
        let v = eta.value();
        v > self.low && v <= self.high.value()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtaPartitionRegistry {
    partitions: Vec<EtaPartition>,
}

impl EtaPartitionRegistry {
    pub fn new(partitions: Vec<EtaPartition>) -> Result<Self> {
        if partitions.is_empty() {
            return Err(SndError::Empty("partition registry".into()));
        }
        let config = partitions[0].weights.config;
        for (i, p) in partitions.iter().enumerate() {
            if !(p.low >= 0.0 && p.low < p.high.value()) {
                return Err(SndError::Parameter(format!("empty interval ({}, {}]", p.low, p.high)));
            }
            if i > 0 && p.low < partitions[i - 1].high.value() {
                return Err(SndError::Parameter("intervals overlap or are unsorted".into()));
            }
            let c = &p.weights.config;
            if (c.d_model, c.d_ff, c.d_kv, c.n_head, c.n_layers)
                != (config.d_model, config.d_ff, config.d_kv, config.n_head, config.n_layers)
            {
                return Err(SndError::Parameter("partition models disagree on architecture".into()));
            }
        }
        Ok(Self { partitions })
    }

    pub fn partitions(&self) -> &[EtaPartition] {
        &self.partitions
    }

    /// Writes one checkpoint per partition next to `manifest` and a manifest
    /// with lines `eta_low eta_high checkpoint_path`.
    pub fn save_manifest(&self, manifest: &Path) -> Result<()> {
        let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let stem = manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "registry".into());
        let mut text = String::new();
        for (i, p) in self.partitions.iter().enumerate() {
            let file = format!("{stem}.{i}.sndw");
            let mut weights = p.weights.clone();
            weights.store.insert(
                "meta.representatives",
                Tensor::vector(p.representatives.iter().map(|e| e.value()).collect()),
            );
            weights.save(&dir.join(&file))?;
            text.push_str(&format!("{} {} {}\n", p.low, p.high, file));
        }
        let mut f = std::fs::File::create(manifest)?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    /// Reads a manifest; relative checkpoint paths resolve against its directory.
    pub fn load_manifest(manifest: &Path) -> Result<Self> {
        let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = std::fs::read_to_string(manifest)?;
        let mut partitions = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(SndError::Config(format!(
                    "manifest line {}: expected `eta_low eta_high checkpoint_path`",
                    lineno + 1
                )));
            }
            let low: f64 = fields[0]
                .parse()
                .map_err(|_| SndError::Config(format!("manifest line {}: bad eta_low", lineno + 1)))?;
            let high: Eta = fields[1].parse()?;
            let path = PathBuf::from(fields[2]);
            let path = if path.is_absolute() { path } else { dir.join(path) };
            let raw = ParameterStore::load(&path)?;
            let reps = raw
                .get("meta.representatives")
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![high.value(), high.value()]);
            let weights = DenoiserWeights::load(&path)?;
            let to_eta = |v: f64| if v.is_infinite() { Eta::Infinite } else { Eta::Finite(v) };
            partitions.push(EtaPartition {
                low,
                high,
                representatives: [to_eta(reps[0]), to_eta(reps[1])],
                weights,
            });
        }
        Self::new(partitions)
    }
}

/// The model whose interval contains `eta`; boundaries belong to the lower interval.
pub fn select_denoiser(eta: Eta, registry: &EtaPartitionRegistry) -> Result<&DenoiserWeights> {
    registry
        .partitions
        .iter()
        .find(|p| p.contains(eta))
        .map(|p| &p.weights)
        .ok_or(SndError::NoModel(eta.value()))
}

/// Interval bounds and representative etas, before any training.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub intervals: Vec<(f64, Eta, [Eta; 2])>,
}

/// Correlation levels at which the partition boundaries sit.
pub const PARTITION_CORRELATIONS: [f64; 2] = [0.2, 0.8];

/// Splits eta into three groups where the clean/privatized token correlation
/// crosses 0.2 and 0.8. Inner groups train on two log-spaced etas inside the
/// interval; the lowest on `b/6, b/2`; the top on `3b` and the noise-free case.
pub fn plan_partitions(table: &VocabEmbeddingTable, clip_enabled: bool, samples: usize, seed: u64) -> Result<PartitionPlan> {
    let corr = |eta: f64| -> Result<f64> {
        token_correlation(
            table,
            PrivacyParams {
                eta: Eta::new(eta)?,
                clip_enabled,
            },
            samples,
            &mut RngState::new(seed),
        )
    };
    let crossing = |target: f64| -> Result<f64> {
        let (mut lo, mut hi) = (-6.0f64, 8.0f64);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if corr(10f64.powf(mid))? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(10f64.powf(0.5 * (lo + hi)))
    };
    let b_low = crossing(PARTITION_CORRELATIONS[0])?;
    let b_high = crossing(PARTITION_CORRELATIONS[1])?;
    let geo = |a: f64, b: f64, t: f64| Eta::Finite(a.powf(1.0 - t) * b.powf(t));
    Ok(PartitionPlan {
        intervals: vec![
            (0.0, Eta::Finite(b_low), [Eta::Finite(b_low / 6.0), Eta::Finite(b_low / 2.0)]),
            (b_low, Eta::Finite(b_high), [geo(b_low, b_high, 1.0 / 3.0), geo(b_low, b_high, 2.0 / 3.0)]),
            (b_high, Eta::Infinite, [Eta::Finite(3.0 * b_high), Eta::Infinite]),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::model::{init_toy_model, EncoderConfig};
    use crate::tensor::{dot, gelu, softmax_in_place};

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 8,
            d_ff: 12,
            d_kv: 2,
            n_head: 2,
            n_layers: 1,
            ..DenoiserConfig::default()
        }
    }

    fn random_item(n: usize, d: usize, seed: u64) -> (SentenceEmbedding, Tensor, Tensor) {
        let mut rng = RngState::new(seed);
        let e = SentenceEmbedding::new(Tensor::randn(&[d], 1.0, &mut rng).into_data(), EmbeddingRole::Noisy);
        (e, Tensor::randn(&[n, d], 1.0, &mut rng), Tensor::randn(&[n, d], 1.0, &mut rng))
    }

    #[test]
    fn input_layout() {
        let w = DenoiserWeights::init(&tiny_config(), &mut RngState::new(1)).unwrap();
        let (e, x, z) = random_item(2, 8, 2);
        let h0 = build_input(&e, &x, &z, &w).unwrap();
        assert_eq!(h0.shape(), &[5, 8]);
        assert_eq!(h0.row(0), e.values.as_slice());
        assert_eq!(h0.row(1), x.row(0));
        assert_eq!(h0.row(2), x.row(1));
        assert_eq!(h0.row(3), z.row(0));
        assert_eq!(h0.row(4), z.row(1));
        let bad = Tensor::zeros(&[3, 8]);
        assert!(matches!(build_input(&e, &x, &bad, &w), Err(SndError::Dimension(_))));
    }

    #[test]
    fn zero_layers_return_noisy_embedding() {
        let cfg = DenoiserConfig { n_layers: 0, ..tiny_config() };
        let w = DenoiserWeights::init(&cfg, &mut RngState::new(1)).unwrap();
        let (e, x, z) = random_item(3, 8, 3);
        let out = denoise(&e, &x, &z, &w).unwrap();
        assert_eq!(out.values, e.values);
        assert_eq!(out.role, EmbeddingRole::Denoised);
    }

    /// Loop-based evaluation of the residual recursion for one item.
    fn recursion_oracle(h0: &Tensor, w: &DenoiserWeights) -> Vec<f64> {
        let cfg = &w.config;
        let s = &w.store;
        let (seq, d) = (h0.rows(), h0.cols());
        let mut h: Vec<Vec<f64>> = (0..seq).map(|i| h0.row(i).to_vec()).collect();
        let matvec = |x: &[f64], m: &Tensor| -> Vec<f64> {
            (0..m.cols()).map(|c| (0..m.rows()).map(|r| x[r] * m.get2(r, c)).sum()).collect()
        };
        for l in 0..cfg.n_layers {
            let p = |n: &str| s.get(&format!("dn{l}.{n}")).unwrap();
            let (wq, wk, wv, wo) = (p("attn.wq"), p("attn.wk"), p("attn.wv"), p("attn.wo"));
            let q: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, wq)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, wk)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, wv)).collect();
            let mut next = h.clone();
            for t in 0..seq {
                let mut concat = vec![0.0; cfg.n_head * cfg.d_kv];
                for head in 0..cfg.n_head {
                    let r = head * cfg.d_kv..(head + 1) * cfg.d_kv;
                    let mut w: Vec<f64> = (0..seq)
                        .map(|j| dot(&q[t][r.clone()], &k[j][r.clone()]) / (cfg.d_kv as f64).sqrt())
                        .collect();
                    softmax_in_place(&mut w);
                    for j in 0..seq {
                        for (c, idx) in r.clone().enumerate() {
                            concat[head * cfg.d_kv + c] += w[j] * v[j][idx];
                        }
                    }
                }
                let a = matvec(&concat, wo);
                let u: Vec<f64> = (0..d).map(|j| a[j] + h[t][j]).collect();
                let mean = u.iter().sum::<f64>() / d as f64;
                let var = u.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let (gain, bias) = (p("ln.gain"), p("ln.bias"));
                let normed: Vec<f64> = (0..d)
                    .map(|j| gain.data()[j] * (u[j] - mean) / (var + nn::LN_EPS).sqrt() + bias.data()[j])
                    .collect();
                let hidden: Vec<f64> = matvec(&normed, p("ff.fc.w"))
                    .iter()
                    .zip(p("ff.fc.b").data())
                    .map(|(x, b)| gelu(x + b))
                    .collect();
                let m: Vec<f64> = matvec(&hidden, p("ff.proj.w"))
                    .iter()
                    .zip(p("ff.proj.b").data())
                    .map(|(x, b)| x + b)
                    .collect();
                for j in 0..d {
                    next[t][j] = h[t][j] + a[j] + m[j];
                }
            }
            h = next;
        }
        h[0].clone()
    }

    #[test]
    fn forward_matches_recursion_oracle() {
        let cfg = DenoiserConfig { init_std: 0.4, ..tiny_config() };
        let mut w = DenoiserWeights::init(&cfg, &mut RngState::new(5)).unwrap();
        // Non-trivial layer-norm parameters.
        let mut rng = RngState::new(6);
        *w.store.get_mut("dn0.ln.gain").unwrap() = Tensor::randn(&[8], 1.0, &mut rng);
        *w.store.get_mut("dn0.ln.bias").unwrap() = Tensor::randn(&[8], 1.0, &mut rng);
        let (e, x, z) = random_item(1, 8, 7);
        let h0 = build_input(&e, &x, &z, &w).unwrap();
        assert_eq!(h0.rows(), 3);
        let got = denoise_forward(&h0, &w, &[true; 3]).unwrap();
        let oracle = recursion_oracle(&h0, &w);
        let diff = got.values.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn padding_never_reaches_readout() {
        let cfg = DenoiserConfig { init_std: 0.3, ..tiny_config() };
        let w = DenoiserWeights::init(&cfg, &mut RngState::new(8)).unwrap();
        let (e, x, z) = random_item(2, 8, 9);
        let (_, x4, z4) = random_item(4, 8, 10);
        let short = TrainingExample { e_n: e.values.clone(), x_tilde: x.clone(), z: z.clone(), e_c: vec![0.0; 8] };
        let long = TrainingExample { e_n: e.values.clone(), x_tilde: x4, z: z4, e_c: vec![0.0; 8] };
        let alone = denoise(&e, &x, &z, &w).unwrap();
        let batched = denoise_examples(&w, &[short.clone(), long.clone()]).unwrap();
        for j in 0..8 {
            assert!((batched.get2(0, j) - alone.values[j]).abs() < 1e-12);
        }
        // Garbage in the padded rows of the assembled input changes nothing.
        let batch = TrainingBatch::from_examples(&[&short, &long]).unwrap();
        let mut g = Graph::new();
        let out = forward_batch(&mut g, &w, &batch).unwrap();
        let first = g.value(out).row(0).to_vec();
        let raw = raw_input(&batch.e_n, &batch.x_tilde, &batch.z, true).unwrap();
        let mut stacked = raw.stacked.clone();
        for i in 0..raw.seq {
            if !batch.mask[i] {
                stacked.row_mut(i).fill(1e3);
            }
        }
        let mut g = Graph::new();
        let h = g.input(stacked);
        let seg_t = g.param(&w.store, "segment").unwrap();
        let seg = g.gather(seg_t, raw.segment_ids.clone()).unwrap();
        let h = g.add(h, seg).unwrap();
        let layout = AttnLayout { batch: 2, seq: raw.seq, n_head: 2, d_kv: 2, mask: batch.mask.clone() };
        let out = blocks(&mut g, &w.store, &cfg, h, &layout).unwrap();
        for j in 0..8 {
            assert!((g.value(out).get2(0, j) - first[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_pass_check() {
        let cfg = DenoiserConfig { init_std: 0.3, n_layers: 2, ..tiny_config() };
        let mut rng = RngState::new(11);
        let mut w = DenoiserWeights::init(&cfg, &mut rng).unwrap();
        for name in ["segment", "position"] {
            let shape = w.store.get(name).unwrap().shape().to_vec();
            *w.store.get_mut(name).unwrap() = Tensor::randn(&shape, 0.3, &mut rng);
        }
        let examples: Vec<TrainingExample> = (0..3)
            .map(|i| {
                let (e, x, z) = random_item(2 + i, 8, 20 + i as u64);
                TrainingExample { e_n: e.values, x_tilde: x, z, e_c: Tensor::randn(&[8], 1.0, &mut rng).into_data() }
            })
            .collect();
        let refs: Vec<&TrainingExample> = examples.iter().collect();
        let batch = TrainingBatch::from_examples(&refs).unwrap();
        let config = w.config;
        let report = grad_check(
            &mut w.store,
            |g, s| {
                let weights = DenoiserWeights { config, store: s.clone() };
                batch_loss(g, &weights, &batch)
            },
            1e-5,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    fn toy_world() -> (VocabEmbeddingTable, EncoderWeights, Vec<Vec<usize>>) {
        let cfg = EncoderConfig { vocab_size: 40, dim: 8, n_layers: 1, n_head: 2, d_kv: 4, d_ff: 16, init_std: 0.1, positional: true, seed: 3 };
        let (table, enc) = init_toy_model(&cfg).unwrap();
        let mut rng = RngState::new(4);
        let corpus = (0..24).map(|_| (0..5).map(|_| rng.gen_range(0..40)).collect()).collect();
        (table, enc, corpus)
    }

    #[test]
    fn pair_generation_contract() {
        let (table, enc, corpus) = toy_world();
        let pairs = generate_training_pairs(&corpus, &table, &enc, &[Eta::Infinite], 2, true, &mut RngState::new(1)).unwrap();
        assert_eq!(pairs.len(), corpus.len() * 2);
        for p in &pairs {
            assert_eq!(p.e_n, p.e_c);
            assert!(p.z.data().iter().all(|v| *v == 0.0));
        }
        let etas = [Eta::Finite(2.0), Eta::Finite(20.0)];
        let a = generate_training_pairs(&corpus, &table, &enc, &etas, 1, true, &mut RngState::new(2)).unwrap();
        let b = generate_training_pairs(&corpus, &table, &enc, &etas, 1, true, &mut RngState::new(2)).unwrap();
        assert_eq!(a, b);
        for p in &a {
            let clean = embed_tokens(&corpus[0], &table).unwrap();
            let _ = clean;
            assert_eq!(p.x_tilde.shape(), p.z.shape());
        }
        assert!(generate_training_pairs(&[], &table, &enc, &etas, 1, true, &mut RngState::new(2)).is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (table, enc, corpus) = toy_world();
        let pairs = generate_training_pairs(&corpus, &table, &enc, &[Eta::Finite(20.0)], 4, true, &mut RngState::new(5)).unwrap();
        let (train, val) = pairs.split_at(80);
        let cfg = DenoiserConfig { d_model: 8, d_ff: 16, d_kv: 4, n_head: 2, n_layers: 1, epochs: 8, batch_size: 8, lr: 3e-3, ..DenoiserConfig::default() };
        let (_, h1) = train_denoiser(train, val, &cfg, &mut RngState::new(6)).unwrap();
        let (_, h2) = train_denoiser(train, val, &cfg, &mut RngState::new(6)).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.train.len(), 9);
        assert!(h1.train.last().unwrap() < &h1.train[0]);
        assert!(h1.validation.last().unwrap() < &h1.validation[0]);
    }

    fn registry() -> EtaPartitionRegistry {
        let w = DenoiserWeights::init(&tiny_config(), &mut RngState::new(1)).unwrap();
        let mut w2 = w.clone();
        w2.store.get_mut("segment").unwrap().data_mut()[0] = 1.0;
        EtaPartitionRegistry::new(vec![
            EtaPartition { low: 0.0, high: Eta::Finite(1.0), representatives: [Eta::Finite(0.2), Eta::Finite(0.5)], weights: w },
            EtaPartition { low: 1.0, high: Eta::Finite(100.0), representatives: [Eta::Finite(5.0), Eta::Finite(20.0)], weights: w2 },
        ])
        .unwrap()
    }

    #[test]
    fn selection_rules() {
        let reg = registry();
        let first = &reg.partitions()[0].weights;
        assert_eq!(select_denoiser(Eta::Finite(0.5), &reg).unwrap(), first);
        assert_eq!(select_denoiser(Eta::Finite(1.0), &reg).unwrap(), first);
        assert_eq!(select_denoiser(Eta::Finite(1.5), &reg).unwrap(), &reg.partitions()[1].weights);
        assert_eq!(select_denoiser(Eta::Finite(1000.0), &reg).unwrap_err(), SndError::NoModel(1000.0));
        assert!(select_denoiser(Eta::Infinite, &reg).is_err());
    }

    #[test]
    fn overlapping_intervals_rejected() {
        let mut parts = registry().partitions().to_vec();
        parts[1].low = 0.5;
        assert!(EtaPartitionRegistry::new(parts).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join(format!("snd-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let reg = registry();
        let path = dir.join("denoisers.txt");
        reg.save_manifest(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "0 1 denoisers.0.sndw");
        let back = EtaPartitionRegistry::load_manifest(&path).unwrap();
        assert_eq!(back.partitions().len(), 2);
        assert_eq!(back.partitions()[1].representatives, [Eta::Finite(5.0), Eta::Finite(20.0)]);
        for (a, b) in reg.partitions().iter().zip(back.partitions()) {
            assert_eq!(a.weights.store, b.weights.store);
            assert_eq!(a.high, b.high);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn partition_plan_is_ordered() {
        let (table, _, _) = toy_world();
        let plan = plan_partitions(&table, true, 500, 1).unwrap();
        assert_eq!(plan.intervals.len(), 3);
        let (lo, mid, hi) = (&plan.intervals[0], &plan.intervals[1], &plan.intervals[2]);
        assert_eq!(lo.1.value(), mid.0);
        assert_eq!(mid.1.value(), hi.0);
        assert!(mid.0 < mid.1.value());
        for (low, high, reps) in &plan.intervals {
            for r in reps {
                assert!(r.value() > *low && r.value() <= high.value());
            }
        }
    }
}
