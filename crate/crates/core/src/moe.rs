//! Top-k gated mixture of experts, load balancing and sparse upcycling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_into, topk_indices, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, FfnParams, FfnVars, FFN_TENSORS};
use crate::params::{ParamStore, Provenance};
use crate::pipeline::checkpoint::Checkpoint;
use crate::tensor::Mat;

pub const GATE_STD: f64 = 0.02;
/// Only feed-forward layers under this prefix are upcycled.
pub const UPCYCLE_SCOPE: &str = "lm.";

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub experts: Vec<FfnParams>,
    /// `d x n_e`.
    pub gate: Mat,
    pub k: usize,
}

impl MoeLayer {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_experts();
        if n == 0 || self.k == 0 || self.k > n {
            return Err(Error::config(format!("top-{} routing over {n} experts", self.k)));
        }
        if self.gate.cols() != n || self.gate.rows() != self.experts[0].w1.rows() {
            return Err(Error::shape(format!(
                "gate {:?} for {n} experts of width {}",
                self.gate.shape(),
                self.experts[0].w1.rows()
            )));
        }
        let shape = |f: &FfnParams| (f.w1.shape(), f.w2.shape());
        if self.experts.iter().any(|e| shape(e) != shape(&self.experts[0])) {
            return Err(Error::shape("experts differ in shape"));
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore, prefix: &str, k: usize) -> Result<Self> {
        let gate = store.get(&gate_name(prefix))?.clone();
        let experts = (0..gate.cols())
            .map(|i| FfnParams::from_store(store, &expert_prefix(prefix, i)))
            .collect::<Result<Vec<_>>>()?;
        let layer = Self { experts, gate, k };
        layer.validate()?;
        Ok(layer)
    }
}

pub fn gate_name(layer_prefix: &str) -> String {
    format!("{layer_prefix}moe.gate")
}

pub fn expert_prefix(layer_prefix: &str, i: usize) -> String {
    format!("{layer_prefix}moe.expert{i}.")
}

pub fn is_moe_layer(store: &ParamStore, layer_prefix: &str) -> bool {
    store.contains(&gate_name(layer_prefix))
}

/// Top-k softmax weights: `k` largest logits (ties to the lower index)
/// softmaxed, zeros elsewhere.
pub fn topk_gate(x: &[f64], layer: &MoeLayer) -> Vec<f64> {
    let logits = Mat::row_vector(x).matmul(&layer.gate);
    topk_weights(logits.row(0), layer.k)
}

pub fn topk_weights(logits: &[f64], k: usize) -> Vec<f64> {
    let keep = topk_indices(logits, k);
    let vals: Vec<f64> = keep.iter().map(|&i| logits[i]).collect();
    let mut sm = vec![0.0; keep.len()];
    softmax_into(&vals, &mut sm);
    let mut out = vec![0.0; logits.len()];
    for (&i, p) in keep.iter().zip(sm) {
        out[i] = p;
    }
    out
}

/// `sum_i G(x)_i E_i(x)`, evaluating only experts with nonzero weight, in
/// expert order.
pub fn moe_forward(x: &[f64], layer: &MoeLayer) -> Vec<f64> {
    let w = topk_gate(x, layer);
    let mut y = vec![0.0; x.len()];
    for (e, &wi) in layer.experts.iter().zip(&w) {
        if wi == 0.0 {
            continue;
        }
        for (acc, v) in y.iter_mut().zip(e.apply(x)) {
            *acc += wi * v;
        }
    }
    y
}

/// Graph form over a `T x d` input. Returns the mixed output and the
/// `T x n_e` gate logits.
pub fn moe_forward_var(
    g: &mut Graph,
    store: &ParamStore,
    layer_prefix: &str,
    x: Var,
    k: usize,
) -> Result<(Var, Var)> {
    let gate = store.var(g, &gate_name(layer_prefix))?;
    let n_e = g.value(gate).cols();
    if k == 0 || k > n_e {
        return Err(Error::config(format!("top-{k} routing over {n_e} experts")));
    }
    let t = g.value(x).rows();
    let logits = g.matmul(x, gate);
    let weights = g.topk_softmax(logits, k);
    let mut parts = Vec::with_capacity(n_e);
    for i in 0..n_e {
        let idx: Vec<usize> = (0..t).filter(|&r| g.value(weights).get(r, i) != 0.0).collect();
        if idx.is_empty() {
            continue;
        }
        let ffn = FfnVars::from_store(g, store, &expert_prefix(layer_prefix, i))?;
        let xi = g.gather_rows(x, &idx);
        let yi = ffn.forward(g, xi);
        let col = g.slice_cols(weights, i, 1);
        let wi = g.gather_rows(col, &idx);
        let yi = g.mul_col(yi, wi);
        parts.push(g.scatter_rows(yi, &idx, t));
    }
    let y = if parts.len() == 1 { parts[0] } else { g.add_n(&parts) };
    Ok((y, logits))
}

/// `x + MoE(LN2(x))`.
pub fn moe_sublayer(
    g: &mut Graph,
    store: &ParamStore,
    layer_prefix: &str,
    x: Var,
    k: usize,
) -> Result<(Var, Var)> {
    let h = nn::layer_norm(g, store, &format!("{layer_prefix}ln2."), x)?;
    let (y, logits) = moe_forward_var(g, store, layer_prefix, h, k)?;
    Ok((g.add(x, y), logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    /// Dispatch fraction per expert, each token counting `1/k` per selection.
    pub f: Vec<f64>,
    /// Batch mean of the full gate softmax.
    pub p: Vec<f64>,
    pub token_count: usize,
}

/// Statistics of a `T x n_e` block of gate logits.
pub fn routing_stats(logits: &Mat, k: usize) -> RoutingStats {
    let (t, n) = logits.shape();
    let mut f = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut sm = vec![0.0; n];
    for r in 0..t {
        let row = logits.row(r);
        for i in topk_indices(row, k) {
            f[i] += 1.0 / k as f64;
        }
        softmax_into(row, &mut sm);
        for (acc, v) in p.iter_mut().zip(&sm) {
            *acc += v;
        }
    }
    let scale = 1.0 / t.max(1) as f64;
    RoutingStats {
        f: f.iter().map(|v| v * scale).collect(),
        p: p.iter().map(|v| v * scale).collect(),
        token_count: t,
    }
}

/// `n_e * sum_i f_i P_i`.
pub fn load_balance_loss(stats: &RoutingStats) -> f64 {
    let n = stats.f.len() as f64;
    n * stats.f.iter().zip(&stats.p).map(|(f, p)| f * p).sum::<f64>()
}

/// Graph form of [`load_balance_loss`] over `T x n_e` logits; gradients
/// reach the logits through `P` only.
pub fn aux_loss_var(g: &mut Graph, logits: Var, k: usize) -> Var {
    let stats = routing_stats(g.value(logits), k);
    let n = stats.f.len();
    let sm = g.softmax_rows(logits, false);
    let p = g.mean_rows(sm);
    let pf = g.mul_const(p, Mat::from_vec(1, n, stats.f));
    let s = g.sum_all(pf);
    g.scale(s, n as f64)
}

/// How per-layer auxiliary losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AuxReduction {
    #[default]
    Mean,
    Sum,
}

impl AuxReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            AuxReduction::Mean => "mean",
            AuxReduction::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(AuxReduction::Mean),
            "sum" => Some(AuxReduction::Sum),
            _ => None,
        }
    }
}

/// Prefixes (`...ffn.` stripped) of every dense FFN under [`UPCYCLE_SCOPE`].
pub fn dense_ffn_layers(store: &ParamStore) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for name in store.names() {
        let Some(prefix) = name.strip_suffix("ffn.w1") else {
            continue;
        };
        if !prefix.starts_with(UPCYCLE_SCOPE) || prefix.contains("moe.") {
            continue;
        }
        for t in FFN_TENSORS {
            if !store.contains(&format!("{prefix}ffn.{t}")) {
                return Err(Error::Manifest(format!("dense FFN {prefix}ffn. lacks '{t}'")));
            }
        }
        out.push(prefix.to_string());
    }
    Ok(out)
}

/// Replaces every dense FFN in scope with `n_e` copies of itself plus a
/// `d x n_e` gate drawn from `N(0, GATE_STD)` with `seed`. Experts keep the
/// FFN's provenance; gates are tagged with the checkpoint's next stage.
pub fn upcycle(dense: &Checkpoint, n_e: usize, k: usize, seed: u64) -> Result<Checkpoint> {
    if n_e == 0 || k == 0 || k > n_e {
        return Err(Error::config(format!("top-{k} routing over {n_e} experts")));
    }
    let layers = dense_ffn_layers(&dense.params)?;
    if layers.is_empty() {
        return Err(Error::Manifest("checkpoint has no dense FFN layer to upcycle".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dense.clone();
    let gate_stage = Provenance::Stage(dense.stage + 1);
    for prefix in &layers {
        let ffn_prefix = format!("{prefix}ffn.");
        let provenance = dense
            .params
            .tensor(&format!("{ffn_prefix}w1"))
            .expect("checked by dense_ffn_layers")
            .provenance;
        let ffn = FfnParams::from_store(&dense.params, &ffn_prefix)?;
        for t in FFN_TENSORS {
            out.params.remove(&format!("{ffn_prefix}{t}"));
        }
        for i in 0..n_e {
            ffn.insert_into(&mut out.params, &expert_prefix(prefix, i), provenance);
        }
        let d = ffn.w1.rows();
        let mut gate = Mat::randn(d, n_e, GATE_STD, &mut rng);
        gate.round_to_f32();
        out.params.insert(gate_name(prefix), gate, gate_stage);
    }
    out.set_config("moe.experts", n_e.to_string());
    out.set_config("moe.topk", k.to_string());
    Ok(out)
}

/// `layer,expert,f,P` rows.
pub fn routing_csv(table: &[(String, RoutingStats)]) -> String {
    let mut out = String::from("layer,expert,f,P\n");
    for (layer, s) in table {
        for (i, (f, p)) in s.f.iter().zip(&s.p).enumerate() {
            out.push_str(&format!("{layer},{i},{f:.6},{p:.6}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn layer(d: usize, n: usize, k: usize, seed: u64) -> MoeLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MoeLayer {
            experts: (0..n).map(|_| FfnParams::init(d, 2 * d, &mut rng)).collect(),
            gate: Mat::randn(d, n, 1.0, &mut rng),
            k,
        }
    }

    #[test]
    fn single_expert_weight_is_one() {
        let l = layer(3, 1, 1, 0);
        assert_eq!(topk_gate(&[0.1, -0.2, 0.3], &l), vec![1.0]);
    }

    #[test]
    fn top2_of_three() {
        let w = topk_weights(&[1.0, 2.0, 3.0], 2);
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 0.2689414213699951).abs() < 1e-12);
        assert!((w[2] - 0.7310585786300049).abs() < 1e-12);
        let full = topk_weights(&[1.0, 2.0, 3.0], 3);
        let mut sm = vec![0.0; 3];
        softmax_into(&[1.0, 2.0, 3.0], &mut sm);
        assert_eq!(full, sm);
    }

    #[test]
    fn gate_output_invariants() {
        let l = layer(4, 5, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = topk_gate(&x, &l);
            assert!(w.iter().all(|v| *v >= 0.0));
            assert!(w.iter().filter(|v| **v != 0.0).count() <= 2);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_experts_reproduce_dense() {
        let mut l = layer(4, 3, 1, 3);
        let dense = l.experts[0].clone();
        l.experts = vec![dense.clone(); 3];
        let x = [0.3, -1.0, 0.5, 2.0];
        assert_eq!(moe_forward(&x, &l), dense.apply(&x));
    }

    #[test]
    fn convex_mixture_of_two() {
        let mut l = layer(2, 2, 2, 4);
        l.gate = Mat::zeros(2, 2);
        let x = [0.4, -0.7];
        let a = l.experts[0].apply(&x);
        let b = l.experts[1].apply(&x);
        let y = moe_forward(&x, &l);
        for i in 0..2 {
            assert!((y[i] - 0.5 * (a[i] + b[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_brute_force_mixture() {
        let l = layer(4, 3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let logits: Vec<f64> = (0..3)
                .map(|e| (0..4).map(|j| x[j] * l.gate.get(j, e)).sum())
                .collect();
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
            let (a, b) = (order[0], order[1]);
            let z = (logits[a]).exp() + (logits[b]).exp();
            let mut expect = [0.0; 4];
            for (e, w) in [(a, logits[a].exp() / z), (b, logits[b].exp() / z)] {
                for (o, v) in expect.iter_mut().zip(l.experts[e].apply(&x)) {
                    *o += w * v;
                }
            }
            let y = moe_forward(&x, &l);
            for i in 0..4 {
                assert!((y[i] - expect[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn balance_loss_extremes() {
        let uniform = RoutingStats {
            f: vec![0.25; 4],
            p: vec![0.25; 4],
            token_count: 8,
        };
        assert!((load_balance_loss(&uniform) - 1.0).abs() < 1e-15);
        let collapsed = RoutingStats {
            f: vec![1.0, 0.0, 0.0, 0.0],
            p: vec![1.0, 0.0, 0.0, 0.0],
            token_count: 8,
        };
        assert_eq!(load_balance_loss(&collapsed), 4.0);
        let single = routing_stats(&Mat::from_rows(&[vec![0.3], vec![-2.0]]), 1);
        assert_eq!(load_balance_loss(&single), 1.0);
    }

    #[test]
    fn zero_gate_routes_to_first_expert() {
        let s = routing_stats(&Mat::zeros(10, 4), 1);
        assert_eq!(s.f, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.p, vec![0.25; 4]);
    }

    #[test]
    fn stats_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = routing_stats(&Mat::randn(500, 4, 1.0, &mut rng), 2);
        assert!((s.f.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matched_f_and_p_bound_loss_below() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let n = rng.random_range(1..9);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            let f: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let stats = RoutingStats { f: f.clone(), p: f, token_count: 1 };
            assert!(load_balance_loss(&stats) >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn graph_forward_matches_plain() {
        let l = layer(4, 3, 2, 10);
        let mut store = ParamStore::new();
        store.insert("lm.layer0.moe.gate", l.gate.clone(), Provenance::Stage(2));
        for (i, e) in l.experts.iter().enumerate() {
            e.insert_into(&mut store, &expert_prefix("lm.layer0.", i), Provenance::Stage(1));
        }
        let x = Mat::randn(6, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _) = moe_forward_var(&mut g, &store, "lm.layer0.", xv, 2).unwrap();
        for r in 0..6 {
            let expect = moe_forward(x.row(r), &l);
            for (a, b) in g.value(y).row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(MoeLayer::from_store(&store, "lm.layer0.", 2).unwrap(), l);
    }
}
