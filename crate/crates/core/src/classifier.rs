// SPDX-License-Identifier: Apache-2.0

//! Downstream binary classifier: `Linear(in, in) -> ReLU -> Linear(in, 1)`
//! trained with logistic loss on standardized features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SndError};
use crate::nn;
use crate::params::{AdamConfig, ParameterStore};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub init_std: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 3e-3,
            batch_size: 32,
            weight_decay: 0.0,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub store: ParameterStore,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Accuracy and rank AUC on a held-out split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamMetrics {
    pub acc: f64,
    pub auc: f64,
}

fn check_labels(labels: &[f64], what: &str) -> Result<()> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(SndError::Parameter(format!("{what} labels must be 0 or 1")));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    if pos == 0 || pos == labels.len() {
        return Err(SndError::SingleClass(format!("{what} labels contain one class")));
    }
    Ok(())
}

impl Classifier {
    fn standardize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) * self.inv_std[j];
            }
        }
        out
    }

    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = nn::linear(g, &self.store, "mlp.hidden", x)?;
        let h = g.relu(h);
        nn::linear(g, &self.store, "mlp.out", h)
    }

    /// Logit per row of `x`.
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.mean.len() {
            return Err(SndError::Dimension(format!(
                "classifier expects {} features, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let mut g = Graph::new();
        let input = g.input(self.standardize(x));
        let out = self.logits(&mut g, input)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Trains the classifier. Hidden width equals the input width.
pub fn train_classifier(x: &Tensor, labels: &[f64], cfg: &ClassifierConfig, rng: &mut RngState) -> Result<Classifier> {
    if x.rows() != labels.len() {
        return Err(SndError::Dimension(format!("{} rows vs {} labels", x.rows(), labels.len())));
    }
    check_labels(labels, "training")?;
    let d = x.cols();
    let n = x.rows() as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..x.rows() {
        for (j, v) in x.row(i).iter().enumerate() {
            mean[j] += v / n;
        }
    }
    for i in 0..x.rows() {
        for (j, v) in x.row(i).iter().enumerate() {
            var[j] += (v - mean[j]) * (v - mean[j]) / n;
        }
    }
    let inv_std = var.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let mut store = ParameterStore::new();
    nn::init_linear(&mut store, "mlp.hidden", d, d, cfg.init_std, rng);
    nn::init_linear(&mut store, "mlp.out", d, 1, cfg.init_std, rng);
    let mut clf = Classifier { store, mean, inv_std };
    let xs = clf.standardize(x);
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let input = g.input(xs.select_rows(chunk));
            let out = clf.logits(&mut g, input)?;
            let loss = g.bce_with_logits(out, chunk.iter().map(|&i| labels[i]).collect())?;
            if !g.value(loss).data()[0].is_finite() {
                return Err(SndError::Diverged { epoch: 0 });
            }
            g.backward(loss, &mut clf.store)?;
            clf.store.adam_step(&adam);
        }
    }
    Ok(clf)
}

/// Fraction of rows whose logit sign matches the label.
pub fn accuracy(scores: &[f64], labels: &[f64]) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| (**s > 0.0) == (**y == 1.0))
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Average ranks (1-based); tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-sum (Mann-Whitney) AUC; ties count one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SndError::Dimension("scores and labels differ in length".into()));
    }
    check_labels(labels, "evaluation")?;
    let ranks = average_ranks(scores);
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1.0).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Trains on one split and scores the other.
pub fn eval_downstream(
    train_x: &Tensor,
    train_y: &[f64],
    test_x: &Tensor,
    test_y: &[f64],
    cfg: &ClassifierConfig,
    rng: &mut RngState,
) -> Result<DownstreamMetrics> {
    if train_x.cols() != test_x.cols() {
        return Err(SndError::Dimension("train and test feature widths differ".into()));
    }
    let clf = train_classifier(train_x, train_y, cfg, rng)?;
    let scores = clf.scores(test_x)?;
    Ok(DownstreamMetrics {
        acc: accuracy(&scores, test_y),
        auc: auc(&scores, test_y)?,
    })
}

/// Row-wise concatenation `[a_i, b_i]`, the input for sentence-pair tasks.
pub fn concat_pairs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(SndError::Dimension("pair halves differ in row count".into()));
    }
    let rows: Vec<Vec<f64>> = (0..a.rows()).map(|i| [a.row(i), b.row(i)].concat()).collect();
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> (Tensor, Vec<f64>) {
        let mut rng = RngState::new(seed);
        let x = Tensor::randn(&[n, 6], 1.0, &mut rng);
        let y = (0..n).map(|i| if x.get2(i, 0) + 0.5 * x.get2(i, 3) > 0.0 { 1.0 } else { 0.0 }).collect();
        (x, y)
    }

    #[test]
    fn separable_task_is_learned() {
        let (tx, ty) = separable(600, 1);
        let (vx, vy) = separable(400, 2);
        let m = eval_downstream(&tx, &ty, &vx, &vy, &ClassifierConfig::default(), &mut RngState::new(3)).unwrap();
        assert!(m.acc > 0.95, "{m:?}");
        assert!(m.auc > 0.98, "{m:?}");
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let (tx, mut ty) = separable(600, 4);
        let (vx, vy) = separable(1000, 5);
        ty.shuffle(&mut RngState::new(6));
        let m = eval_downstream(&tx, &ty, &vx, &vy, &ClassifierConfig::default(), &mut RngState::new(7)).unwrap();
        assert!((0.4..=0.6).contains(&m.acc), "{m:?}");
    }

    #[test]
    fn auc_rank_definition() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(SndError::SingleClass(_))));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = RngState::new(8);
        for _ in 0..20 {
            let n = rng.gen_range(4..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
            let mut labels: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            labels[0] = 0.0;
            labels[1] = 1.0;
            let (mut wins, mut pairs) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1.0 && labels[j] == 0.0 {
                        pairs += 1.0;
                        wins += match scores[i].total_cmp(&scores[j]) {
                            std::cmp::Ordering::Greater => 1.0,
                            std::cmp::Ordering::Equal => 0.5,
                            std::cmp::Ordering::Less => 0.0,
                        };
                    }
                }
            }
            assert!((auc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-12);
        }
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn single_class_training_rejected() {
        let x = Tensor::zeros(&[3, 2]);
        let err = train_classifier(&x, &[1.0; 3], &ClassifierConfig::default(), &mut RngState::new(1)).unwrap_err();
        assert!(matches!(err, SndError::SingleClass(_)));
    }
}
