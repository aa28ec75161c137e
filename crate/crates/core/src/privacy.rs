// SPDX-License-Identifier: Apache-2.0

//! Metric local privacy for token representations.
//!
//! Each token vector `x` is released as `x + z` where `z` has density
//! proportional to `exp(-eta * |z|)`. The noise is drawn as a radius
//! `l ~ Gamma(d, 1/eta)` times a direction uniform on the unit sphere.
//! Privatized rows may then be clipped onto the ball holding the whole
//! vocabulary, and the effective noise is recomputed against the clipped
//! rows so the denoiser sees exactly what was sent.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SndError};
use crate::model::VocabEmbeddingTable;
use crate::tensor::{l2_norm, Tensor, TokenMatrix};

/// The privacy parameter. `Infinite` is the exact no-noise control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Eta {
    Finite(f64),
    Infinite,
}

impl Eta {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_infinite() && value > 0.0 {
            Ok(Eta::Infinite)
        } else if value > 0.0 {
            Ok(Eta::Finite(value))
        } else {
            Err(SndError::Parameter(format!("eta must be positive, got {value}")))
        }
    }

    /// `f64::INFINITY` for the sentinel.
    pub fn value(self) -> f64 {
        match self {
            Eta::Finite(v) => v,
            Eta::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Eta::Infinite)
    }
}

impl fmt::Display for Eta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Eta::Finite(v) => write!(f, "{v}"),
            Eta::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Eta {
    type Err = SndError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Eta::Infinite);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| SndError::Parameter(format!("cannot parse eta from {s:?}")))?;
        Eta::new(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    pub eta: Eta,
    pub clip_enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub radius: f64,
    pub direction: Vec<f64>,
    pub z: Vec<f64>,
}

/// Norm bound for clipped rows: the largest vocabulary row norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBound(f64);

impl ClipBound {
    pub fn new(c: f64) -> Result<Self> {
        if c > 0.0 && c.is_finite() {
            Ok(Self(c))
        } else {
            Err(SndError::Parameter(format!("clip bound must be positive, got {c}")))
        }
    }

    pub fn from_table(table: &VocabEmbeddingTable) -> Result<Self> {
        let c = (0..table.vocab_size())
            .map(|i| l2_norm(table.row(i)))
            .fold(0.0, f64::max);
        Self::new(c)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `M'(x) - x` for every row.
pub type NoiseMatrix = Tensor;

/// Gamma(shape, scale) by Marsaglia and Tsang's squeeze-and-reject method.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && scale > 0.0);
    if shape < 1.0 {
        // Boost: Gamma(a) = Gamma(a + 1) * U^(1/a).
        let u: f64 = rng.sample(Open01);
        return sample_gamma(shape + 1.0, scale, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.sample(Open01);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v * scale;
        }
    }
}

/// Uniform direction on the unit sphere in `d` dimensions.
pub fn sample_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = l2_norm(&g);
        if norm > 0.0 {
            return g.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// One draw of `d`-dimensional noise with density `∝ exp(-eta |z|)`.
pub fn sample_noise<R: Rng + ?Sized>(d: usize, eta: f64, rng: &mut R) -> Result<NoiseSample> {
    if d == 0 {
        return Err(SndError::Parameter("noise dimension must be at least 1".into()));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(SndError::Parameter(format!("eta must be positive and finite, got {eta}")));
    }
    let radius = sample_gamma(d as f64, 1.0 / eta, rng);
    let direction = sample_direction(d, rng);
    let z = direction.iter().map(|v| radius * v).collect();
    Ok(NoiseSample {
        radius,
        direction,
        z,
    })
}

/// Raw `M(x) = x + z` per row, plus the drawn noise. With infinite eta the
/// output is the input and the noise is zero.
pub fn privatize<R: Rng + ?Sized>(
    x: &TokenMatrix,
    eta: Eta,
    rng: &mut R,
) -> Result<(TokenMatrix, NoiseMatrix)> {
    let mut noise = Tensor::zeros(x.shape());
    if let Eta::Finite(e) = eta {
        for i in 0..x.rows() {
            let s = sample_noise(x.cols(), e, rng)?;
            noise.row_mut(i).copy_from_slice(&s.z);
        }
    }
    Ok((x.add(&noise)?, noise))
}

/// Scales each row onto the ball of radius `bound` when it lies outside.
/// Clipped rows satisfy `l2_norm(row) <= bound` exactly as computed by
/// [`l2_norm`], which makes clipping idempotent.
pub fn clip_privatized(m: &TokenMatrix, bound: ClipBound) -> TokenMatrix {
    let c = bound.value();
    let mut out = m.clone();
    for i in 0..m.rows() {
        let norm = l2_norm(m.row(i));
        if norm <= c {
            continue;
        }
        let mut factor = c / norm;
        loop {
            for (o, v) in out.row_mut(i).iter_mut().zip(m.row(i)) {
                *o = v * factor;
            }
            if l2_norm(out.row(i)) <= c {
                break;
            }
            factor = f64::from_bits(factor.to_bits() - 1);
        }
    }
    out
}

/// `clipped - clean`, the noise the client actually applied.
pub fn effective_noise(clipped: &TokenMatrix, clean: &TokenMatrix) -> Result<NoiseMatrix> {
    clipped.sub(clean)
}

/// The client-side privatization step: a token matrix ready for upload and
/// the effective noise matrix kept for denoising. `x_tilde` is rebuilt as
/// `clean + noise`, so the pair is consistent bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedTokens {
    pub x_tilde: TokenMatrix,
    pub noise: NoiseMatrix,
}

pub fn privatize_tokens<R: Rng + ?Sized>(
    x: &TokenMatrix,
    params: PrivacyParams,
    bound: ClipBound,
    rng: &mut R,
) -> Result<PrivatizedTokens> {
    let (raw, drawn) = privatize(x, params.eta, rng)?;
    if !params.clip_enabled {
        return Ok(PrivatizedTokens {
            x_tilde: raw,
            noise: drawn,
        });
    }
    let clipped = clip_privatized(&raw, bound);
    let noise = effective_noise(&clipped, x)?;
    Ok(PrivatizedTokens {
        x_tilde: x.add(&noise)?,
        noise,
    })
}

/// `eta * (|y - x'| - |y - x|)`, the log ratio of the output densities at
/// `y` for inputs `x` and `x'`.
pub fn log_density_ratio(x: &[f64], x_prime: &[f64], y: &[f64], eta: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    eta * (dist(y, x_prime) - dist(y, x))
}

/// Lower bound on the per-coordinate MSE of any unbiased server-side
/// denoiser: `(diam_sq_sum / 4k) / (exp(eta * b_x) - 1)`.
pub fn server_mse_lower_bound(eta: f64, b_x: f64, diam_sq_sum: f64, k: usize) -> Result<f64> {
    if eta * b_x == 0.0 {
        return Err(SndError::UndefinedBound);
    }
    if !(eta > 0.0 && b_x > 0.0 && diam_sq_sum > 0.0 && k > 0) {
        return Err(SndError::Parameter(
            "server bound needs positive eta, b_x, diameter sum and k".into(),
        ));
    }
    Ok((diam_sq_sum / (4.0 * k as f64)) / (eta * b_x).exp_m1())
}

/// TokEmbPriv: raw perturbed token embeddings, no clipping.
pub fn tok_emb_priv_baseline<R: Rng + ?Sized>(
    x: &TokenMatrix,
    eta: Eta,
    rng: &mut R,
) -> Result<TokenMatrix> {
    Ok(privatize(x, eta, rng)?.0)
}

/// Text2Text: perturb each token embedding and replace the token by the
/// nearest vocabulary entry (lowest id on ties).
pub fn text2text_privatize<R: Rng + ?Sized>(
    x: &TokenMatrix,
    vocab: &VocabEmbeddingTable,
    eta: Eta,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if vocab.vocab_size() == 0 {
        return Err(SndError::Empty("vocabulary".into()));
    }
    let (noisy, _) = privatize(x, eta, rng)?;
    Ok((0..noisy.rows())
        .map(|i| vocab.nearest(noisy.row(i)).expect("non-empty vocabulary"))
        .collect())
}

/// Pearson correlation between clean and privatized coordinates of tokens
/// drawn uniformly from the vocabulary.
pub fn token_correlation<R: Rng + ?Sized>(
    table: &VocabEmbeddingTable,
    params: PrivacyParams,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let bound = ClipBound::from_table(table)?;
    let ids: Vec<usize> = (0..samples).map(|_| rng.gen_range(0..table.vocab_size())).collect();
    let x = table.as_tensor().select_rows(&ids);
    let p = privatize_tokens(&x, params, bound, rng)?;
    Ok(pearson(x.data(), p.x_tilde.data()))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
