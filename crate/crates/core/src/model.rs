// SPDX-License-Identifier: Apache-2.0

//! The split language model: a token-embedding table run by the client and
//! a frozen toy transformer encoder run by the server.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnLayout, Graph, Var};
use crate::error::{Result, SndError};
use crate::nn;
use crate::params::{AdamConfig, ParameterStore};
use crate::rng::RngState;
use crate::tensor::{sq_dist, Tensor, TokenMatrix};

/// Longest token sequence the encoder (and the server) accepts.
pub const MAX_SEQ_LEN: usize = 512;

/// The `|V| x d` token-embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabEmbeddingTable {
    table: Tensor,
}

impl VocabEmbeddingTable {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(SndError::Dimension(format!(
                "embedding table must be 2-D, got {:?}",
                table.shape()
            )));
        }
        if !table.is_finite() {
            return Err(SndError::Parameter("embedding table has non-finite entries".into()));
        }
        Ok(Self { table })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.table.row(id)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.table
    }

    /// Id of the row closest to `v` in Euclidean distance; ties go to the
    /// lowest id. `None` for an empty table.
    pub fn nearest(&self, v: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for id in 0..self.vocab_size() {
            let dist = sq_dist(self.row(id), v);
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((id, dist));
            }
        }
        best.map(|(id, _)| id)
    }

    /// Adds `strength * direction` to each listed row, giving those tokens a
    /// shared, linearly detectable component.
    pub fn plant_attribute(&mut self, ids: &[usize], direction: &[f64], strength: f64) -> Result<()> {
        if direction.len() != self.dim() {
            return Err(SndError::Dimension("attribute direction length".into()));
        }
        for &id in ids {
            if id >= self.vocab_size() {
                return Err(SndError::TokenOutOfRange {
                    id,
                    vocab: self.vocab_size(),
                });
            }
            for (x, u) in self.table.row_mut(id).iter_mut().zip(direction) {
                *x += strength * u;
            }
        }
        Ok(())
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            table: self.table.scale(factor),
        }
    }
}

/// Row `t` of the result is the table row of `ids[t]`.
pub fn embed_tokens(ids: &[usize], table: &VocabEmbeddingTable) -> Result<TokenMatrix> {
    if let Some(&id) = ids.iter().find(|&&id| id >= table.vocab_size()) {
        return Err(SndError::TokenOutOfRange {
            id,
            vocab: table.vocab_size(),
        });
    }
    Ok(table.as_tensor().select_rows(ids))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingRole {
    Clean,
    Noisy,
    Denoised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Mean over valid token positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding {
    pub values: Vec<f64>,
    pub role: EmbeddingRole,
    /// How the encoder reduced token states to one vector.
    pub pooling: Pooling,
}

impl SentenceEmbedding {
    pub fn new(values: Vec<f64>, role: EmbeddingRole) -> Self {
        Self {
            values,
            role,
            pooling: Pooling::Mean,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn with_role(mut self, role: EmbeddingRole) -> Self {
        self.role = role;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_head: usize,
    pub d_kv: usize,
    pub d_ff: usize,
    /// Weight initialization scale of the encoder blocks.
    pub init_std: f64,
    /// Add sinusoidal positional encodings before the first block.
    pub positional: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            dim: 32,
            n_layers: 2,
            n_head: 4,
            d_kv: 8,
            d_ff: 64,
            init_std: 0.1,
            positional: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub store: ParameterStore,
}

/// Standard sinusoidal encoding of `pos` in `dim` dimensions.
pub fn sinusoidal_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Seeded table and encoder. Table entries are `Normal(0, 1/d)` so rows have
/// roughly unit norm.
pub fn init_toy_model(config: &EncoderConfig) -> Result<(VocabEmbeddingTable, EncoderWeights)> {
    if config.vocab_size == 0 || config.dim == 0 || config.n_head == 0 || config.d_kv == 0 {
        return Err(SndError::Parameter("model sizes must be positive".into()));
    }
    let mut rng = RngState::new(config.seed);
    let table = Tensor::randn(
        &[config.vocab_size, config.dim],
        1.0 / (config.dim as f64).sqrt(),
        &mut rng,
    );
    let mut store = ParameterStore::new();
    for l in 0..config.n_layers {
        let p = format!("enc{l}");
        nn::init_layer_norm(&mut store, &format!("{p}.ln1"), config.dim);
        nn::init_attention(
            &mut store,
            &format!("{p}.attn"),
            config.dim,
            config.n_head,
            config.d_kv,
            config.init_std,
            &mut rng,
        );
        nn::init_layer_norm(&mut store, &format!("{p}.ln2"), config.dim);
        nn::init_feed_forward(
            &mut store,
            &format!("{p}.ff"),
            config.dim,
            config.d_ff,
            config.init_std,
            &mut rng,
        );
    }
    Ok((
        VocabEmbeddingTable::new(table)?,
        EncoderWeights {
            config: *config,
            store,
        },
    ))
}

impl EncoderWeights {
    /// Runs the encoder over a batch of token matrices padded into one graph
    /// input. Returns the `batch x d` pooled embeddings.
    pub fn forward(&self, g: &mut Graph, xs: &[&TokenMatrix]) -> Result<Var> {
        let cfg = &self.config;
        if xs.is_empty() {
            return Err(SndError::Empty("no sequences to encode".into()));
        }
        let seq = xs.iter().map(|x| x.rows()).max().unwrap_or(0);
        for x in xs {
            if x.rows() == 0 {
                return Err(SndError::Empty("sequence with no tokens".into()));
            }
            if x.cols() != cfg.dim {
                return Err(SndError::Dimension(format!(
                    "token matrix has {} columns, encoder expects {}",
                    x.cols(),
                    cfg.dim
                )));
            }
            if x.rows() > MAX_SEQ_LEN {
                return Err(SndError::Parameter(format!(
                    "sequence length {} exceeds {MAX_SEQ_LEN}",
                    x.rows()
                )));
            }
        }
        let batch = xs.len();
        let mut stacked = Tensor::zeros(&[batch * seq, cfg.dim]);
        let mut mask = vec![false; batch * seq];
        let mut pool = Tensor::zeros(&[batch, batch * seq]);
        for (b, x) in xs.iter().enumerate() {
            let n = x.rows();
            for t in 0..n {
                let row = stacked.row_mut(b * seq + t);
                row.copy_from_slice(x.row(t));
                if cfg.positional {
                    for (v, p) in row.iter_mut().zip(sinusoidal_encoding(t, cfg.dim)) {
                        *v += p;
                    }
                }
                mask[b * seq + t] = true;
                pool.row_mut(b)[b * seq + t] = 1.0 / n as f64;
            }
        }
        let layout = AttnLayout {
            batch,
            seq,
            n_head: cfg.n_head,
            d_kv: cfg.d_kv,
            mask,
        };
        let mut h = g.input(stacked);
        for l in 0..cfg.n_layers {
            let p = format!("enc{l}");
            let normed = nn::layer_norm(g, &self.store, &format!("{p}.ln1"), h)?;
            let a = nn::attention_block(g, &self.store, &format!("{p}.attn"), normed, layout.clone())?;
            h = g.add(h, a)?;
            let normed = nn::layer_norm(g, &self.store, &format!("{p}.ln2"), h)?;
            let m = nn::feed_forward(g, &self.store, &format!("{p}.ff"), normed)?;
            h = g.add(h, m)?;
        }
        let pool = g.input(pool);
        g.matmul(pool, h)
    }

    /// Encodes many sequences at once; row `i` is the embedding of `xs[i]`.
    pub fn encode_batch(&self, xs: &[&TokenMatrix]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, xs)?;
        Ok(g.value(out).clone())
    }

    /// Fine-tunes the encoder for `steps` Adam steps so that a jointly
    /// trained linear probe predicts `labels` from the pooled embedding.
    /// Only used to simulate a provider-side model update.
    pub fn finetune_with_probe(
        &mut self,
        xs: &[TokenMatrix],
        labels: &[f64],
        steps: usize,
        batch_size: usize,
        adam: &AdamConfig,
        rng: &mut RngState,
    ) -> Result<()> {
        if xs.len() != labels.len() || xs.is_empty() {
            return Err(SndError::Dimension("finetune data and labels disagree".into()));
        }
        let d = self.config.dim;
        let mut store = self.store.clone();
        nn::init_linear(&mut store, "probe", d, 1, nn::INIT_STD, rng);
        for _ in 0..steps {
            let picks: Vec<usize> = (0..batch_size.min(xs.len()))
                .map(|_| rng.gen_range(0..xs.len()))
                .collect();
            let batch: Vec<&TokenMatrix> = picks.iter().map(|&i| &xs[i]).collect();
            let targets = picks.iter().map(|&i| labels[i]).collect();
            let probe_self = EncoderWeights {
                config: self.config,
                store,
            };
            let mut g = Graph::new();
            let pooled = probe_self.forward(&mut g, &batch)?;
            let logits = nn::linear(&mut g, &probe_self.store, "probe", pooled)?;
            let loss = g.bce_with_logits(logits, targets)?;
            store = probe_self.store;
            g.backward(loss, &mut store)?;
            store.adam_step(adam);
        }
        self.store.load_values_from(&store);
        Ok(())
    }
}

/// The cloud encoder: token matrix in, pooled sentence embedding out.
pub fn encode(x: &TokenMatrix, w: &EncoderWeights) -> Result<SentenceEmbedding> {
    let out = w.encode_batch(&[x])?;
    Ok(SentenceEmbedding::new(out.into_data(), EmbeddingRole::Clean))
}
