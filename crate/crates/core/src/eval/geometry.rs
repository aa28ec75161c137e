// SPDX-License-Identifier: Apache-2.0

//! Geometry of the token-embedding space relative to the noise scale.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SndError};
use crate::model::VocabEmbeddingTable;
use crate::privacy::{sample_noise, Eta};
use crate::rng::RngState;
use crate::tensor::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    /// Mean distance from a sampled vocabulary row to its k-th nearest row.
    pub mean_knn_distance: f64,
    /// Mean `|M(x) - x|` over fresh noise draws.
    pub mean_perturbation: f64,
    pub eta: Eta,
    pub k: usize,
}

/// Distance from vocabulary row `id` to its `k`-th nearest other row.
pub fn vocab_knn_distance(table: &VocabEmbeddingTable, id: usize, k: usize) -> f64 {
    let mut best = vec![f64::INFINITY; k];
    for j in 0..table.vocab_size() {
        if j == id {
            continue;
        }
        let dist = sq_dist(table.row(id), table.row(j));
        if dist < best[k - 1] {
            let mut p = k - 1;
            while p > 0 && best[p - 1] > dist {
                best[p] = best[p - 1];
                p -= 1;
            }
            best[p] = dist;
        }
    }
    best[k - 1].sqrt()
}

pub fn geometry_metrics(
    table: &VocabEmbeddingTable,
    eta: Eta,
    k: usize,
    rng: &mut RngState,
    sample_count: usize,
    noise_draws: usize,
) -> Result<GeometryReport> {
    let v = table.vocab_size();
    if sample_count == 0 || sample_count > v {
        return Err(SndError::Parameter(format!("sample count {sample_count} must lie in 1..={v}")));
    }
    if k == 0 || k >= v {
        return Err(SndError::Parameter(format!("k = {k} needs a vocabulary larger than k")));
    }
    let ids = sample(rng, v, sample_count).into_vec();
    let mean_knn_distance = ids.iter().map(|&id| vocab_knn_distance(table, id, k)).sum::<f64>() / sample_count as f64;
    let mean_perturbation = match eta {
        Eta::Infinite => 0.0,
        Eta::Finite(e) => {
            let mut total = 0.0;
            for _ in 0..noise_draws.max(1) {
                total += sample_noise(table.dim(), e, rng)?.radius;
            }
            total / noise_draws.max(1) as f64
        }
    };
    Ok(GeometryReport {
        mean_knn_distance,
        mean_perturbation,
        eta,
        k,
    })
}
