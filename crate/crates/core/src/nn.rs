//! Transformer building blocks shared by the protein encoder, the text
//! encoder and the language model. Parameters are looked up by name in a
//! [`ParamStore`]; a block under prefix `p` owns:
//!
//! | name               | shape   |
//! |--------------------|---------|
//! | `p.ln1.g`, `p.ln1.b` | `1 x d` |
//! | `p.attn.wq/wk/wv/wo` | `d x d` |
//! | `p.attn.bo`        | `1 x d` |
//! | `p.ln2.g`, `p.ln2.b` | `1 x d` |
//! | `p.ffn.w1`, `p.ffn.b1` | `d x h`, `1 x h` |
//! | `p.ffn.w2`, `p.ffn.b2` | `h x d`, `1 x d` |

use rand::Rng;

use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Provenance};
use crate::tensor::Mat;

pub const LN_EPS: f64 = 1e-5;

/// Query/key/value projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub heads: usize,
}

/// Dense feed-forward parameters (`w1: d x h`, `w2: h x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

pub const FFN_TENSORS: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl FfnParams {
    pub fn init(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: Mat::randn(d, hidden, 1.0 / (d as f64).sqrt(), rng),
            b1: Mat::zeros(1, hidden),
            w2: Mat::randn(hidden, d, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Mat::zeros(1, d),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: store.get(&format!("{prefix}w1"))?.clone(),
            b1: store.get(&format!("{prefix}b1"))?.clone(),
            w2: store.get(&format!("{prefix}w2"))?.clone(),
            b2: store.get(&format!("{prefix}b2"))?.clone(),
        })
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str, provenance: Provenance) {
        store.insert(format!("{prefix}w1"), self.w1.clone(), provenance);
        store.insert(format!("{prefix}b1"), self.b1.clone(), provenance);
        store.insert(format!("{prefix}w2"), self.w2.clone(), provenance);
        store.insert(format!("{prefix}b2"), self.b2.clone(), provenance);
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Plain evaluation on one input row.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let xm = Mat::row_vector(x);
        let mut h = xm.matmul(&self.w1);
        for (v, b) in h.data_mut().iter_mut().zip(self.b1.data()) {
            *v = Activation::Gelu.apply(*v + b);
        }
        let mut y = h.matmul(&self.w2);
        for (v, b) in y.data_mut().iter_mut().zip(self.b2.data()) {
            *v += b;
        }
        y.into_data()
    }
}

/// Bound FFN parameters.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnVars {
    pub fn from_store(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: store.var(g, &format!("{prefix}w1"))?,
            b1: store.var(g, &format!("{prefix}b1"))?,
            w2: store.var(g, &format!("{prefix}w2"))?,
            b2: store.var(g, &format!("{prefix}b2"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.matmul(x, self.w1);
        let h = g.add_row(h, self.b1);
        let h = g.activation(h, Activation::Gelu);
        let y = g.matmul(h, self.w2);
        g.add_row(y, self.b2)
    }
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize, provenance: Provenance) {
    store.insert(format!("{prefix}g"), Mat::filled(1, d, 1.0), provenance);
    store.insert(format!("{prefix}b"), Mat::zeros(1, d), provenance);
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = store.var(g, &format!("{prefix}g"))?;
    let beta = store.var(g, &format!("{prefix}b"))?;
    Ok(g.layer_norm(x, gamma, beta, LN_EPS))
}

/// Adds a pre-norm transformer block (attention + dense FFN) under `prefix`.
pub fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    ffn_hidden: usize,
    provenance: Provenance,
    rng: &mut impl Rng,
) {
    let std = 1.0 / (d as f64).sqrt();
    init_layer_norm(store, &format!("{prefix}ln1."), d, provenance);
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert_normal(format!("{prefix}attn.{w}"), d, d, std, provenance, rng);
    }
    store.insert(format!("{prefix}attn.bo"), Mat::zeros(1, d), provenance);
    init_layer_norm(store, &format!("{prefix}ln2."), d, provenance);
    FfnParams::init(d, ffn_hidden, rng).insert_into(store, &format!("{prefix}ffn."), provenance);
}

/// Multi-head scaled dot-product attention without the output projection.
///
/// Per head `h`: `softmax(X Wq_h (X Wk_h)ᵀ / sqrt(d_head) + delta) X Wv_h`,
/// heads concatenated along columns. `delta`, when given, is shared by all
/// heads. Fails with [`Error::NumericFailure`] naming `layer` if any logit
/// is NaN.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
    delta: Option<Var>,
    causal: bool,
    layer: &str,
) -> Result<Var> {
    let (n, d) = g.value(x).shape();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("hidden size {d} not divisible by {heads} heads")));
    }
    if let Some(dl) = delta {
        if g.value(dl).shape() != (n, n) {
            return Err(Error::shape(format!(
                "attention bias is {:?}, expected {n}x{n}",
                g.value(dl).shape()
            )));
        }
    }
    let dh = d / heads;
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let a = g.matmul_nt(qh, kh);
        let mut a = g.scale(a, scale);
        if let Some(dl) = delta {
            a = g.add(a, dl);
        }
        if g.value(a).data().iter().any(|v| v.is_nan()) {
            return Err(Error::NumericFailure {
                layer: layer.to_string(),
                detail: format!("NaN attention logit in head {h}"),
            });
        }
        let p = g.softmax_rows(a, causal);
        outs.push(g.matmul(p, vh));
    }
    Ok(if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    })
}

/// Standalone evaluation of one bidirectional attention layer.
pub fn biased_attention(
    x: &Mat,
    params: &AttentionLayerParams,
    delta: Option<&Mat>,
) -> Result<Mat> {
    let d = x.cols();
    for (name, w) in [("W_Q", &params.w_q), ("W_K", &params.w_k), ("W_V", &params.w_v)] {
        if w.shape() != (d, d) {
            return Err(Error::shape(format!("{name} is {:?}, expected {d}x{d}", w.shape())));
        }
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wq = g.constant(params.w_q.clone());
    let wk = g.constant(params.w_k.clone());
    let wv = g.constant(params.w_v.clone());
    let dl = delta.map(|m| g.constant(m.clone()));
    let out = multi_head_attention(&mut g, xv, wq, wk, wv, params.heads, dl, false, "attention")?;
    Ok(g.value(out).clone())
}

/// `x + Attn(LN1(x)) Wo + bo`.
pub fn attention_sublayer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    delta: Option<Var>,
    causal: bool,
) -> Result<Var> {
    let h = layer_norm(g, store, &format!("{prefix}ln1."), x)?;
    let wq = store.var(g, &format!("{prefix}attn.wq"))?;
    let wk = store.var(g, &format!("{prefix}attn.wk"))?;
    let wv = store.var(g, &format!("{prefix}attn.wv"))?;
    let wo = store.var(g, &format!("{prefix}attn.wo"))?;
    let bo = store.var(g, &format!("{prefix}attn.bo"))?;
    let a = multi_head_attention(g, h, wq, wk, wv, heads, delta, causal, prefix)?;
    let a = g.matmul(a, wo);
    let a = g.add_row(a, bo);
    Ok(g.add(x, a))
}

/// `x + FFN(LN2(x))` with the dense FFN under `prefix.ffn.`.
pub fn ffn_sublayer(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = layer_norm(g, store, &format!("{prefix}ln2."), x)?;
    let ffn = FfnVars::from_store(g, store, &format!("{prefix}ffn."))?;
    let y = ffn.forward(g, h);
    Ok(g.add(x, y))
}

/// Full block with a dense FFN.
pub fn block_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    delta: Option<Var>,
    causal: bool,
) -> Result<Var> {
    let h = attention_sublayer(g, store, prefix, x, heads, delta, causal)?;
    ffn_sublayer(g, store, prefix, h)
}

/// `x W + b` with `b` broadcast over rows.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = store.var(g, &format!("{prefix}w"))?;
    let b = store.var(g, &format!("{prefix}b"))?;
    let y = g.matmul(x, w);
    Ok(g.add_row(y, b))
}

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    provenance: Provenance,
    rng: &mut impl Rng,
) {
    store.insert_normal(
        format!("{prefix}w"),
        fan_in,
        fan_out,
        1.0 / (fan_in as f64).sqrt(),
        provenance,
        rng,
    );
    store.insert(format!("{prefix}b"), Mat::zeros(1, fan_out), provenance);
}

/// Token embedding lookup plus learned absolute position embedding.
pub fn embed(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    tokens: &[usize],
) -> Result<Var> {
    let table = store.var(g, &format!("{prefix}tok"))?;
    let vocab = g.value(table).rows();
    if let Some(t) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::rejected(format!("token id {t} outside vocabulary of {vocab}")));
    }
    let e = g.gather_rows(table, tokens);
    add_positions(g, store, prefix, e, 0)
}

/// Adds position embeddings for positions `offset..offset + rows`.
pub fn add_positions(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    offset: usize,
) -> Result<Var> {
    let pos = store.var(g, &format!("{prefix}pos"))?;
    let n = g.value(x).rows();
    let max_len = g.value(pos).rows();
    if offset + n > max_len {
        return Err(Error::rejected(format!(
            "sequence of {} exceeds maximum length {max_len}",
            offset + n
        )));
    }
    let idx: Vec<usize> = (offset..offset + n).collect();
    let p = g.gather_rows(pos, &idx);
    Ok(g.add(x, p))
}

pub fn init_embedding(
    store: &mut ParamStore,
    prefix: &str,
    vocab: usize,
    max_len: usize,
    d: usize,
    provenance: Provenance,
    rng: &mut impl Rng,
) {
    store.insert_normal(format!("{prefix}tok"), vocab, d, 0.5, provenance, rng);
    store.insert_normal(format!("{prefix}pos"), max_len, d, 0.1, provenance, rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionLayerParams {
            w_q: Mat::randn(4, 4, 1.0, &mut rng),
            w_k: Mat::randn(4, 4, 1.0, &mut rng),
            w_v: Mat::randn(4, 4, 1.0, &mut rng),
            heads: 2,
        };
        let x = Mat::randn(1, 4, 1.0, &mut rng);
        let out = biased_attention(&x, &p, None).unwrap();
        assert!(out.max_abs_diff(&x.matmul(&p.w_v)) < 1e-15);
    }

    #[test]
    fn two_token_hand_softmax() {
        let one = Mat::scalar(1.0);
        let p = AttentionLayerParams {
            w_q: one.clone(),
            w_k: one.clone(),
            w_v: one,
            heads: 1,
        };
        let x = Mat::from_rows(&[vec![1.0], vec![0.0]]);
        let out = biased_attention(&x, &p, None).unwrap();
        // softmax([1, 0]) = [e/(e+1), 1/(e+1)]
        let e = std::f64::consts::E;
        assert!((out.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((out.get(0, 0) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn zero_bias_matches_no_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionLayerParams {
            w_q: Mat::randn(6, 6, 1.0, &mut rng),
            w_k: Mat::randn(6, 6, 1.0, &mut rng),
            w_v: Mat::randn(6, 6, 1.0, &mut rng),
            heads: 3,
        };
        let x = Mat::randn(5, 6, 1.0, &mut rng);
        let a = biased_attention(&x, &p, None).unwrap();
        let b = biased_attention(&x, &p, Some(&Mat::zeros(5, 5))).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn nan_logit_names_layer() {
        let p = AttentionLayerParams {
            w_q: Mat::scalar(1.0),
            w_k: Mat::scalar(1.0),
            w_v: Mat::scalar(1.0),
            heads: 1,
        };
        let x = Mat::from_rows(&[vec![1.0], vec![2.0]]);
        let delta = Mat::from_rows(&[vec![f64::NAN, 0.0], vec![0.0, 0.0]]);
        match biased_attention(&x, &p, Some(&delta)) {
            Err(Error::NumericFailure { layer, .. }) => assert_eq!(layer, "attention"),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_in_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(Mat::randn(7, 4, 3.0, &mut rng));
        for causal in [false, true] {
            let p = g.softmax_rows(x, causal);
            let p = g.value(p);
            for i in 0..p.rows() {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
