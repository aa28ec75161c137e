// SPDX-License-Identifier: Apache-2.0

//! Kozachenko-Leonenko entropy and the differenced mutual-information
//! estimator built on it.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SndError};
use crate::tensor::Tensor;

/// Default neighbor order.
pub const DEFAULT_K: usize = 3;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Exact distance from each point to its `k`-th nearest other point.
/// Work is split across threads by point; each distance is computed by one
/// thread in a fixed order, so results do not depend on the thread count.
pub fn knn_distance(points: &Tensor, k: usize) -> Result<Vec<f64>> {
    let n = points.rows();
    if k == 0 {
        return Err(SndError::Parameter("k must be at least 1".into()));
    }
    if n <= k {
        return Err(SndError::Parameter(format!("need more than k = {k} points, got {n}")));
    }
    let threads = thread::available_parallelism().map_or(1, |p| p.get()).min(n.div_ceil(256)).max(1);
    let chunk = n.div_ceil(threads);
    let mut out = vec![0.0; n];
    let results: Vec<Result<()>> = thread::scope(|s| {
        let handles: Vec<_> = out
            .chunks_mut(chunk)
            .enumerate()
            .map(|(c, slot)| s.spawn(move || knn_range(points, k, c * chunk, slot)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("knn worker panicked")).collect()
    });
    // Report the first duplicate by point index, independent of scheduling.
    results.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(out)
}

fn knn_range(points: &Tensor, k: usize, start: usize, out: &mut [f64]) -> Result<()> {
    let n = points.rows();
    let mut best = vec![f64::INFINITY; k];
    for (o, i) in (start..start + out.len()).enumerate() {
        best.fill(f64::INFINITY);
        let pi = points.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut dist = 0.0;
            for (a, b) in pi.iter().zip(points.row(j)) {
                dist += (a - b) * (a - b);
            }
            if dist < best[k - 1] {
                if dist == 0.0 {
                    return Err(SndError::DuplicatePoints(i));
                }
                let mut p = k - 1;
                while p > 0 && best[p - 1] > dist {
                    best[p] = best[p - 1];
                    p -= 1;
                }
                best[p] = dist;
            } else if dist == 0.0 {
                return Err(SndError::DuplicatePoints(i));
            }
        }
        out[o] = best[k - 1].sqrt();
    }
    Ok(())
}

/// Digamma function for `x > 0`: upward recurrence to `x >= 10`, then the
/// asymptotic series.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(SndError::Parameter(format!("digamma needs a positive argument, got {x}")));
    }
    if x == 1.0 {
        return Ok(-EULER_GAMMA);
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let series = inv2
        * (1.0 / 12.0
            - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    Ok(acc + x.ln() - 0.5 / x - series)
}

/// `log(pi^(d/2) / Gamma(d/2 + 1))`.
pub fn log_unit_ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    h * std::f64::consts::PI.ln() - libm::lgamma(h + 1.0)
}

/// Volume of the `d`-dimensional unit ball.
pub fn unit_ball_volume(d: usize) -> f64 {
    log_unit_ball_volume(d).exp()
}

fn mean_log_distance(points: &Tensor, k: usize) -> Result<f64> {
    let eps = knn_distance(points, k)?;
    Ok(eps.iter().map(|e| e.ln()).sum::<f64>() / eps.len() as f64)
}

/// `psi(N) - psi(k) + log c_d + (d/N) sum log eps_i`, in nats.
pub fn knn_entropy(points: &Tensor, k: usize) -> Result<f64> {
    let n = points.rows();
    let d = points.cols();
    let mean_log = mean_log_distance(points, k)?;
    Ok(digamma(n as f64)? - digamma(k as f64)? + log_unit_ball_volume(d) + d as f64 * mean_log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    /// Nats; small negative values are estimator noise and kept as is.
    pub value: f64,
    pub n: usize,
    pub k: usize,
    pub d: usize,
}

/// `(d/N) sum log eps_Xtilde(i) - (d/N) sum log eps_Z(i)`: the difference
/// of two entropy estimates with equal `N`, `k` and `d`, where the constant
/// terms cancel.
pub fn mi_estimate(x_tilde: &Tensor, z: &Tensor, k: usize) -> Result<MIEstimate> {
    if x_tilde.shape() != z.shape() {
        return Err(SndError::Dimension(format!(
            "sample sets differ in shape: {:?} vs {:?}",
            x_tilde.shape(),
            z.shape()
        )));
    }
    let d = x_tilde.cols();
    let a = mean_log_distance(x_tilde, k)?;
    let b = mean_log_distance(z, k)?;
    Ok(MIEstimate {
        value: d as f64 * a - d as f64 * b,
        n: x_tilde.rows(),
        k,
        d,
    })
}
