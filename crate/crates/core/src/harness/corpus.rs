// SPDX-License-Identifier: Apache-2.0

//! Synthetic Zipf corpus, the planted-attribute labelling rule and the
//! corpus-similarity measure.

use std::collections::HashMap;

use rand::distributions::Distribution;
use rand_distr::Zipf;

use crate::classifier::average_ranks;
use crate::error::{Result, SndError};
use crate::privacy::pearson;
use crate::rng::RngState;

/// Token id `r - 1` has Zipf rank `r`.
pub fn zipf_corpus(vocab_size: usize, exponent: f64, seq_len: usize, count: usize, rng: &mut RngState) -> Result<Vec<Vec<usize>>> {
    let zipf = Zipf::new(vocab_size as u64, exponent)
        .map_err(|e| SndError::Parameter(format!("zipf distribution: {e}")))?;
    Ok((0..count)
        .map(|_| (0..seq_len).map(|_| zipf.sample(rng) as usize - 1).collect())
        .collect())
}

/// Probability mass of every token id under Zipf(`exponent`).
pub fn zipf_mass(vocab_size: usize, exponent: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=vocab_size).map(|r| (r as f64).powf(-exponent)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// `count` consecutive Zipf ranks whose presence in a length-`seq_len`
/// sequence is closest to even odds.
pub fn designated_tokens(vocab_size: usize, exponent: f64, seq_len: usize, count: usize) -> Vec<usize> {
    let mass = zipf_mass(vocab_size, exponent);
    let count = count.min(vocab_size);
    let start = (0..=vocab_size - count)
        .min_by(|&a, &b| {
            let p = |s: usize| {
                let q: f64 = mass[s..s + count].iter().sum();
                (1.0 - (1.0 - q).powi(seq_len as i32) - 0.5).abs()
            };
            p(a).total_cmp(&p(b))
        })
        .unwrap_or(0);
    (start..start + count).collect()
}

/// 1 when any designated token occurs in the sequence.
pub fn label(seq: &[usize], designated: &[usize]) -> f64 {
    if seq.iter().any(|t| designated.contains(t)) {
        1.0
    } else {
        0.0
    }
}

fn counts(corpus: &[Vec<usize>]) -> HashMap<usize, f64> {
    let mut c = HashMap::new();
    for seq in corpus {
        for &t in seq {
            *c.entry(t).or_insert(0.0) += 1.0;
        }
    }
    c
}

/// Spearman rank correlation of per-corpus token frequencies over the
/// (up to) 5000 shared tokens with the highest pooled frequency.
pub fn corpus_similarity(a: &[Vec<usize>], b: &[Vec<usize>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SndError::Empty("corpus".into()));
    }
    let (ca, cb) = (counts(a), counts(b));
    let mut shared: Vec<usize> = ca.keys().filter(|t| cb.contains_key(t)).copied().collect();
    if shared.len() < 2 {
        return Err(SndError::Parameter(format!("{} shared features; need at least 2", shared.len())));
    }
    shared.sort_by(|x, y| (ca[y] + cb[y]).total_cmp(&(ca[x] + cb[x])).then(x.cmp(y)));
    shared.truncate(5000);
    let fa: Vec<f64> = shared.iter().map(|t| ca[t]).collect();
    let fb: Vec<f64> = shared.iter().map(|t| cb[t]).collect();
    Ok(pearson(&average_ranks(&fa), &average_ranks(&fb)))
}
