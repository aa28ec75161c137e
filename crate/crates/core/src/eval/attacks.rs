// SPDX-License-Identifier: Apache-2.0

//! Token-inversion and attribute-inference attacks on privatized token
//! representations.

use serde::{Deserialize, Serialize};

use crate::classifier::{eval_downstream, ClassifierConfig};
use crate::error::{Result, SndError};
use crate::model::VocabEmbeddingTable;
use crate::privacy::Eta;
use crate::rng::RngState;
use crate::tensor::{Tensor, TokenMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Inversion,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub accuracy: f64,
    /// Attribute attack only.
    pub auc: Option<f64>,
    pub eta: Option<Eta>,
    pub seed: Option<u64>,
    pub samples: usize,
}

impl AttackReport {
    pub fn tagged(mut self, eta: Eta, seed: u64) -> Self {
        self.eta = Some(eta);
        self.seed = Some(seed);
        self
    }
}

/// Maps every privatized row to its nearest vocabulary row and scores the
/// fraction of positions recovered.
pub fn inversion_attack(x_tilde: &TokenMatrix, table: &VocabEmbeddingTable, truth: &[usize]) -> Result<AttackReport> {
    if table.vocab_size() == 0 {
        return Err(SndError::Empty("vocabulary".into()));
    }
    if x_tilde.cols() != table.dim() {
        return Err(SndError::Dimension(format!(
            "rows have width {}, vocabulary {}",
            x_tilde.cols(),
            table.dim()
        )));
    }
    if x_tilde.rows() != truth.len() {
        return Err(SndError::Dimension("one true id per row required".into()));
    }
    if truth.is_empty() {
        return Err(SndError::Empty("attack input".into()));
    }
    let hits = (0..x_tilde.rows())
        .filter(|&i| table.nearest(x_tilde.row(i)) == Some(truth[i]))
        .count();
    Ok(AttackReport {
        kind: AttackKind::Inversion,
        accuracy: hits as f64 / truth.len() as f64,
        auc: None,
        eta: None,
        seed: None,
        samples: truth.len(),
    })
}

/// Mean over rows.
pub fn mean_pool(x: &TokenMatrix) -> Vec<f64> {
    let n = x.rows().max(1) as f64;
    (0..x.cols())
        .map(|j| (0..x.rows()).map(|i| x.get2(i, j)).sum::<f64>() / n)
        .collect()
}

fn pooled(xs: &[TokenMatrix]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(SndError::Empty("attack split".into()));
    }
    Tensor::from_rows(&xs.iter().map(mean_pool).collect::<Vec<_>>())
}

/// Trains the downstream classifier on mean-pooled privatized token
/// matrices and reports test accuracy and AUC.
pub fn attribute_inference(
    train: &[TokenMatrix],
    train_labels: &[f64],
    test: &[TokenMatrix],
    test_labels: &[f64],
    cfg: &ClassifierConfig,
    rng: &mut RngState,
) -> Result<AttackReport> {
    let m = eval_downstream(&pooled(train)?, train_labels, &pooled(test)?, test_labels, cfg, rng)?;
    Ok(AttackReport {
        kind: AttackKind::Attribute,
        accuracy: m.acc,
        auc: Some(m.auc),
        eta: None,
        seed: None,
        samples: test.len(),
    })
}
