// SPDX-License-Identifier: Apache-2.0

//! Parameter-store-backed layers shared by the encoder, the denoiser and the
//! downstream classifier. Parameters are addressed by dotted names.

use rand::Rng;

use crate::autodiff::{AttnLayout, Graph, Var};
use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Standard deviation of freshly initialized weight matrices.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Heads are packed side by side: `wq`, `wk`, `wv` are
/// `d_model x (n_head * d_kv)`, `wo` is `(n_head * d_kv) x d_model`.
pub fn init_attention<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    d_model: usize,
    n_head: usize,
    d_kv: usize,
    std: f64,
    rng: &mut R,
) {
    let inner = n_head * d_kv;
    for w in ["wq", "wk", "wv"] {
        store.insert(
            &format!("{prefix}.{w}"),
            Tensor::randn(&[d_model, inner], std, rng),
        );
    }
    store.insert(
        &format!("{prefix}.wo"),
        Tensor::randn(&[inner, d_model], std, rng),
    );
}

pub fn attention_block(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    h: Var,
    layout: AttnLayout,
) -> Result<Var> {
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let heads = g.attention(q, k, v, layout)?;
    g.matmul(heads, wo)
}

/// `fc.w: d_model x d_ff`, `proj.w: d_ff x d_model`, zero biases.
pub fn init_feed_forward<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    d_model: usize,
    d_ff: usize,
    std: f64,
    rng: &mut R,
) {
    init_linear(store, &format!("{prefix}.fc"), d_model, d_ff, std, rng);
    init_linear(store, &format!("{prefix}.proj"), d_ff, d_model, std, rng);
}

/// `proj(gelu(fc(x)))`.
pub fn feed_forward(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let hidden = linear(g, store, &format!("{prefix}.fc"), x)?;
    let act = g.gelu(hidden);
    linear(g, store, &format!("{prefix}.proj"), act)
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut R,
) {
    store.insert(
        &format!("{prefix}.w"),
        Tensor::randn(&[fan_in, fan_out], std, rng),
    );
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn linear(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

pub fn init_layer_norm(store: &mut ParameterStore, prefix: &str, d: usize) {
    store.insert(&format!("{prefix}.gain"), Tensor::filled(&[d], 1.0));
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[d]));
}

pub fn layer_norm(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Multi-head self-attention over one `s x d_model` sequence, with the
/// weights stored under `prefix`.
pub fn multi_head_attention(
    h: &Tensor,
    store: &ParameterStore,
    prefix: &str,
    n_head: usize,
    d_kv: usize,
    mask: &[bool],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(h.clone());
    let layout = AttnLayout {
        batch: 1,
        seq: h.rows(),
        n_head,
        d_kv,
        mask: mask.to_vec(),
    };
    let out = attention_block(&mut g, store, prefix, x, layout)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::SndError;
    use crate::rng::RngState;
    use crate::tensor::{dot, matmul, softmax_in_place};

    fn weights(seed: u64, d_model: usize, n_head: usize, d_kv: usize) -> ParameterStore {
        let mut rng = RngState::new(seed);
        let mut store = ParameterStore::new();
        init_attention(&mut store, "a", d_model, n_head, d_kv, 0.5, &mut rng);
        store
    }

    /// Loop-based evaluation of masked multi-head attention, written
    /// independently of the graph kernels.
    fn brute_force(h: &Tensor, s: &ParameterStore, n_head: usize, d_kv: usize, mask: &[bool]) -> Tensor {
        let (wq, wk, wv, wo) = (
            s.get("a.wq").unwrap(),
            s.get("a.wk").unwrap(),
            s.get("a.wv").unwrap(),
            s.get("a.wo").unwrap(),
        );
        let n = h.rows();
        let d_model = h.cols();
        let proj = |w: &Tensor, i: usize, head: usize| -> Vec<f64> {
            (0..d_kv)
                .map(|c| {
                    (0..d_model)
                        .map(|r| h.get2(i, r) * w.get2(r, head * d_kv + c))
                        .sum()
                })
                .collect()
        };
        let mut concat = vec![vec![0.0; n_head * d_kv]; n];
        for head in 0..n_head {
            for i in 0..n {
                let qi = proj(wq, i, head);
                let mut logits: Vec<f64> = (0..n)
                    .map(|j| dot(&qi, &proj(wk, j, head)) / (d_kv as f64).sqrt())
                    .collect();
                for j in 0..n {
                    if !mask[j] {
                        logits[j] = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(&mut logits);
                for j in 0..n {
                    let vj = proj(wv, j, head);
                    for c in 0..d_kv {
                        concat[i][head * d_kv + c] += logits[j] * vj[c];
                    }
                }
            }
        }
        matmul(&Tensor::from_rows(&concat).unwrap(), wo).unwrap()
    }

    #[test]
    fn single_position_is_value_projection() {
        let store = weights(1, 6, 2, 3);
        let mut rng = RngState::new(9);
        let h = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let out = multi_head_attention(&h, &store, "a", 2, 3, &[true]).unwrap();
        let expect = matmul(
            &matmul(&h, store.get("a.wv").unwrap()).unwrap(),
            store.get("a.wo").unwrap(),
        )
        .unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn identical_keys_average_values() {
        // Zero key weights make all logits equal, whatever the query.
        let mut store = weights(2, 4, 2, 2);
        store.get_mut("a.wk").unwrap().data_mut().fill(0.0);
        let mut rng = RngState::new(3);
        let h = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let out = multi_head_attention(&h, &store, "a", 2, 2, &[true; 5]).unwrap();
        let v = matmul(&h, store.get("a.wv").unwrap()).unwrap();
        let mean: Vec<f64> = (0..v.cols())
            .map(|c| (0..5).map(|r| v.get2(r, c)).sum::<f64>() / 5.0)
            .collect();
        let mean = Tensor::from_rows(&[mean]).unwrap();
        let expect = matmul(&mean, store.get("a.wo").unwrap()).unwrap();
        for i in 0..5 {
            for c in 0..4 {
                assert!((out.get2(i, c) - expect.get2(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_brute_force() {
        for (seed, mask) in [(4, vec![true; 3]), (5, vec![true, false, true])] {
            let store = weights(seed, 8, 4, 2);
            let mut rng = RngState::new(seed + 100);
            let h = Tensor::randn(&[3, 8], 1.0, &mut rng);
            let out = multi_head_attention(&h, &store, "a", 4, 2, &mask).unwrap();
            let oracle = brute_force(&h, &store, 4, 2, &mask);
            assert!(out.max_abs_diff(&oracle) < 1e-9);
        }
    }

    #[test]
    fn all_masked_is_degenerate() {
        let store = weights(6, 4, 1, 4);
        let h = Tensor::zeros(&[2, 4]);
        assert_eq!(
            multi_head_attention(&h, &store, "a", 1, 4, &[false, false]).unwrap_err(),
            SndError::DegenerateMask(0)
        );
    }
}
