//! Structure-aware protein encoder.
//!
//! A pre-norm transformer over residue tokens. When alpha-carbon coordinates
//! are supplied, one pair-distance bias is computed per forward pass and
//! added to the attention logits of every head in every layer, and the
//! row-summed kernel features are projected into a positional encoding that
//! is added to the token embeddings. Without coordinates the structure path
//! is skipped entirely.

use rand::Rng;

use crate::autograd::{Activation, Graph, Var};
use crate::data::tokenizer::{
    protein_vocab_size, CANONICAL_START, PROTEIN_MASK,
};
use crate::error::{Error, Result};
use crate::geometry::{
    gbk_var, kernel_grid, pairwise_distances, structure_bias_var, structure_pe_var, BankVars,
    CoordinateSet, KernelSign,
};
use crate::nn;
use crate::params::{ParamStore, Provenance};
use crate::tensor::Mat;

pub const PREFIX: &str = "enc.";
pub const GBK_PREFIX: &str = "enc.gbk.";
pub const POS_HEAD_PREFIX: &str = "enc.pos_head.";

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub kernels: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub omega: f64,
    pub activation: Activation,
    pub sign: KernelSign,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 4,
            heads: 4,
            vocab: protein_vocab_size(),
            kernels: 16,
            max_len: 256,
            ffn_mult: 4,
            omega: 1.0,
            activation: Activation::Gelu,
            sign: KernelSign::Negative,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.vocab == 0 {
            return Err(Error::config("encoder sizes must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "encoder hidden size {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.kernels == 0 || self.max_len == 0 {
            return Err(Error::config("encoder needs K >= 1 and max_len >= 1"));
        }
        Ok(())
    }
}

/// Populates `store` with a freshly initialized encoder.
///
/// The transformer body and MLM head stand in for a pretrained protein
/// language model and are tagged [`Provenance::Pretrained`]; the kernel bank
/// and position head are tagged with `stage`.
pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, stage: u8, rng: &mut impl Rng) {
    let body = Provenance::Pretrained;
    let fresh = Provenance::Stage(stage);
    let d = cfg.d;
    nn::init_embedding(store, "enc.emb.", cfg.vocab, cfg.max_len, d, body, rng);
    for l in 0..cfg.layers {
        nn::init_block(store, &layer_prefix(l), d, cfg.ffn_mult * d, body, rng);
    }
    nn::init_layer_norm(store, "enc.lnf.", d, body);
    nn::init_linear(store, "enc.mlm.", d, cfg.vocab, body, rng);

    let k = cfg.kernels;
    let (mu, sigma) = kernel_grid(k);
    let std = 1.0 / (k as f64).sqrt();
    store.insert("enc.gbk.mu", mu, fresh);
    store.insert("enc.gbk.sigma", sigma, fresh);
    store.insert_normal("enc.gbk.w_a", k, k, std, fresh, rng);
    store.insert_normal("enc.gbk.w_b", k, 1, std, fresh, rng);
    store.insert_normal("enc.gbk.w_c", k, d, std * 0.1, fresh, rng);
    store.insert_normal("enc.pos_head.w_m", d, d, 1.0 / (d as f64).sqrt(), fresh, rng);
    store.insert_normal("enc.pos_head.w_n", d, 1, 1.0 / (d as f64).sqrt(), fresh, rng);
}

pub fn layer_prefix(l: usize) -> String {
    format!("enc.layer{l}.")
}

/// Graph handles of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    /// Embeddings (plus structure encoding) followed by each layer's output.
    pub hidden: Vec<Var>,
    pub delta: Option<Var>,
}

impl EncoderVars {
    pub fn last(&self) -> Var {
        *self.hidden.last().expect("encoder has at least the embedding state")
    }

    /// Output of layer `layers - 1`, the tap point for the projector.
    pub fn penultimate(&self) -> Var {
        self.hidden[self.hidden.len() - 2]
    }
}

/// Plain-value result of [`encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Vec<Mat>,
    pub delta_used: Option<Mat>,
    pub structure_enabled: bool,
}

impl EncoderOutput {
    pub fn last(&self) -> &Mat {
        self.hidden.last().expect("non-empty")
    }
}

pub fn encode_var(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    tokens: &[usize],
    coords: Option<&CoordinateSet>,
) -> Result<EncoderVars> {
    if tokens.is_empty() {
        return Err(Error::rejected("empty protein token sequence"));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::rejected(format!(
            "protein of {} residues exceeds encoder max_len {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    let mut x = nn::embed(g, store, "enc.emb.", tokens)?;
    let mut delta = None;
    if let Some(c) = coords {
        let n = tokens.len();
        if c.len() != n {
            return Err(Error::rejected(format!(
                "{} coordinates for {n} residues",
                c.len()
            )));
        }
        let bank = BankVars::from_store(g, store, GBK_PREFIX)?;
        let dist = pairwise_distances(c);
        let psi = gbk_var(g, &dist, bank.mu, bank.sigma, cfg.sign)?;
        let dl = structure_bias_var(g, psi, n, &bank, cfg.activation)?;
        let pe = structure_pe_var(g, psi, n, &bank, cfg.omega)?;
        x = g.add(x, pe);
        delta = Some(dl);
    }
    let mut hidden = vec![x];
    for l in 0..cfg.layers {
        x = nn::block_forward(g, store, &layer_prefix(l), x, cfg.heads, delta, false)?;
        hidden.push(x);
    }
    Ok(EncoderVars { hidden, delta })
}

/// Runs the encoder and returns every hidden state.
pub fn encode(
    store: &ParamStore,
    cfg: &EncoderConfig,
    tokens: &[usize],
    coords: Option<&CoordinateSet>,
) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let vars = encode_var(&mut g, store, cfg, tokens, coords)?;
    Ok(EncoderOutput {
        hidden: vars.hidden.iter().map(|v| g.value(*v).clone()).collect(),
        delta_used: vars.delta.map(|v| g.value(v).clone()),
        structure_enabled: vars.delta.is_some(),
    })
}

/// MLM logits `N x vocab` from the final hidden state.
pub fn mlm_logits_var(g: &mut Graph, store: &ParamStore, last: Var) -> Result<Var> {
    let h = nn::layer_norm(g, store, "enc.lnf.", last)?;
    nn::linear(g, store, "enc.mlm.", h)
}

pub fn mlm_logits(store: &ParamStore, output: &EncoderOutput) -> Result<Mat> {
    let mut g = Graph::new();
    let last = g.constant(output.last().clone());
    let l = mlm_logits_var(&mut g, store, last)?;
    Ok(g.value(l).clone())
}

fn mlm_targets(n: usize, targets: &[usize], mask: &[bool]) -> Result<Vec<Option<usize>>> {
    if targets.len() != n || mask.len() != n {
        return Err(Error::shape(format!(
            "{n} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::rejected("MLM mask selects no position"));
    }
    Ok(targets
        .iter()
        .zip(mask)
        .map(|(t, m)| m.then_some(*t))
        .collect())
}

pub fn mlm_loss_var(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let t = mlm_targets(g.value(logits).rows(), targets, mask)?;
    if let Some(bad) = t.iter().flatten().find(|&&t| t >= g.value(logits).cols()) {
        return Err(Error::rejected(format!("target id {bad} outside vocabulary")));
    }
    Ok(g.cross_entropy(logits, t))
}

/// Mean cross-entropy over masked positions only.
pub fn mlm_loss(logits: &Mat, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = mlm_loss_var(&mut g, l, targets, mask)?;
    Ok(g.scalar(loss))
}

/// One MLM training example.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmSample {
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Selects each position with probability 0.15 (at least one position);
/// selected positions become `<mask>` 80% of the time, a random canonical
/// residue 10%, and stay unchanged 10%.
pub fn mask_tokens(tokens: &[usize], rng: &mut impl Rng) -> MlmSample {
    let n = tokens.len();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.15).collect();
    if n > 0 && !mask.iter().any(|m| *m) {
        mask[rng.random_range(0..n)] = true;
    }
    let input = tokens
        .iter()
        .zip(&mask)
        .map(|(&t, &m)| {
            if !m {
                return t;
            }
            let r: f64 = rng.random();
            if r < 0.8 {
                PROTEIN_MASK
            } else if r < 0.9 {
                CANONICAL_START + rng.random_range(0..20)
            } else {
                t
            }
        })
        .collect();
    MlmSample {
        input,
        targets: tokens.to_vec(),
        mask,
    }
}

/// Position-head weights: `w_m: d x d`, `w_n: d x 1`, shared by all axes.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionHeadParams {
    pub w_m: Mat,
    pub w_n: Mat,
}

impl PositionHeadParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w_m: store.get("enc.pos_head.w_m")?.clone(),
            w_n: store.get("enc.pos_head.w_n")?.clone(),
        })
    }
}

/// Unit direction matrices `D^x, D^y, D^z` with `D_ik = (c_i - c_k) / |c_i - c_k|`,
/// zero where the two residues coincide.
pub fn direction_matrices(coords: &CoordinateSet) -> [Mat; 3] {
    let pts = coords.points();
    let n = pts.len();
    let mut out = [Mat::zeros(n, n), Mat::zeros(n, n), Mat::zeros(n, n)];
    for i in 0..n {
        for k in 0..n {
            if i == k {
                continue;
            }
            let diff = [
                pts[i][0] - pts[k][0],
                pts[i][1] - pts[k][1],
                pts[i][2] - pts[k][2],
            ];
            let norm = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            if norm == 0.0 {
                continue;
            }
            for ax in 0..3 {
                out[ax].set(i, k, diff[ax] / norm);
            }
        }
    }
    out
}

/// Predicted noise, `N x 3`: for each axis `j`,
/// `(sum_k delta_ik D^j_ik (X W_m)_k) W_n`.
pub fn position_head_var(
    g: &mut Graph,
    hidden: Var,
    delta: Var,
    coords: &CoordinateSet,
    w_m: Var,
    w_n: Var,
) -> Result<Var> {
    let (n, d) = g.value(hidden).shape();
    if coords.len() != n || g.value(delta).shape() != (n, n) {
        return Err(Error::shape(format!(
            "position head got {n} hidden rows, {} coordinates, bias {:?}",
            coords.len(),
            g.value(delta).shape()
        )));
    }
    if g.value(w_m).shape() != (d, d) || g.value(w_n).shape() != (d, 1) {
        return Err(Error::shape("position head weights must be d x d and d x 1"));
    }
    let xm = g.matmul(hidden, w_m);
    let dirs = direction_matrices(coords);
    let mut cols = Vec::with_capacity(3);
    for dir in dirs {
        let weighted = g.mul_const(delta, dir);
        let msg = g.matmul(weighted, xm);
        cols.push(g.matmul(msg, w_n));
    }
    Ok(g.concat_cols(&cols))
}

pub fn position_head(
    final_hidden: &Mat,
    delta: &Mat,
    noised_coords: &CoordinateSet,
    params: &PositionHeadParams,
) -> Result<Mat> {
    let mut g = Graph::new();
    let h = g.constant(final_hidden.clone());
    let dl = g.constant(delta.clone());
    let wm = g.constant(params.w_m.clone());
    let wn = g.constant(params.w_n.clone());
    let out = position_head_var(&mut g, h, dl, noised_coords, wm, wn)?;
    Ok(g.value(out).clone())
}

pub fn denoise_loss_var(g: &mut Graph, noise: &Mat, predicted: Var) -> Result<Var> {
    if g.value(predicted).shape() != noise.shape() {
        return Err(Error::shape(format!(
            "predicted noise {:?} vs drawn noise {:?}",
            g.value(predicted).shape(),
            noise.shape()
        )));
    }
    Ok(g.mse(predicted, noise.clone()))
}

/// `(1 / 3n) * sum_i sum_j (noise_ij - predicted_ij)^2`.
pub fn denoise_loss(noise: &Mat, predicted: &Mat) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(predicted.clone());
    let l = denoise_loss_var(&mut g, noise, p)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (EncoderConfig, ParamStore) {
        let cfg = EncoderConfig {
            d: 8,
            layers: 2,
            heads: 2,
            kernels: 4,
            max_len: 16,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        init(&mut store, &cfg, 0, &mut ChaCha8Rng::seed_from_u64(1));
        (cfg, store)
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let logits = Mat::zeros(3, 33);
        let l = mlm_loss(&logits, &[4, 7, 9], &[false, true, false]).unwrap();
        assert!((l - 33f64.ln()).abs() < 1e-12);
        assert!((l - 3.4965).abs() < 1e-4);
    }

    #[test]
    fn confident_prediction_has_small_loss() {
        let mut logits = Mat::zeros(2, 5);
        logits.set(0, 2, 30.0);
        logits.set(1, 4, 30.0);
        let l = mlm_loss(&logits, &[2, 4], &[true, true]).unwrap();
        assert!(l < 1e-3);
    }

    #[test]
    fn unmasked_targets_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Mat::randn(4, 6, 1.0, &mut rng);
        let mask = [true, false, true, false];
        let a = mlm_loss(&logits, &[1, 2, 3, 4], &mask).unwrap();
        let b = mlm_loss(&logits, &[1, 5, 3, 0], &mask).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(matches!(
            mlm_loss(&logits, &[1, 2, 3, 4], &[false; 4]),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn denoise_loss_values() {
        let noise = Mat::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.0, 0.5, 0.1]]);
        assert_eq!(denoise_loss(&noise, &noise).unwrap(), 0.0);
        let ones = Mat::filled(2, 3, 1.0);
        assert!((denoise_loss(&Mat::zeros(2, 3), &ones).unwrap() - 1.0).abs() < 1e-12);
        let pred = Mat::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, 0.6]]);
        let residual = pred.zip_map(&noise, |p, t| t + 2.0 * (p - t));
        let a = denoise_loss(&noise, &pred).unwrap();
        let b = denoise_loss(&noise, &residual).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        let (cfg, store) = tiny();
        let c = CoordinateSet::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            encode(&store, &cfg, &[5, 6, 7], Some(&c)),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn sequence_only_disables_structure() {
        let (cfg, store) = tiny();
        let out = encode(&store, &cfg, &[5, 6, 7, 8], None).unwrap();
        assert!(!out.structure_enabled);
        assert!(out.delta_used.is_none());
        assert_eq!(out.hidden.len(), cfg.layers + 1);
    }

    #[test]
    fn single_residue_position_head_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PositionHeadParams {
            w_m: Mat::randn(3, 3, 1.0, &mut rng),
            w_n: Mat::randn(3, 1, 1.0, &mut rng),
        };
        let c = CoordinateSet::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let out = position_head(&Mat::randn(1, 3, 1.0, &mut rng), &Mat::scalar(0.7), &c, &p)
            .unwrap();
        assert_eq!(out, Mat::zeros(1, 3));
    }

    #[test]
    fn coincident_residues_have_zero_direction() {
        let c = CoordinateSet::new(vec![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [2.0, 1.0, 1.0]])
            .unwrap();
        let d = direction_matrices(&c);
        for m in &d {
            assert_eq!(m.get(0, 1), 0.0);
            assert!(m.all_finite());
        }
        assert_eq!(d[0].get(2, 0), 1.0);
    }

    #[test]
    fn masking_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tokens: Vec<usize> = (0..20_000).map(|i| CANONICAL_START + i % 20).collect();
        let s = mask_tokens(&tokens, &mut rng);
        let selected = s.mask.iter().filter(|m| **m).count() as f64;
        assert!((selected / 20_000.0 - 0.15).abs() < 0.01);
        let masked = s.input.iter().filter(|&&t| t == PROTEIN_MASK).count() as f64;
        assert!((masked / selected - 0.8).abs() < 0.03);
        let single = mask_tokens(&[7], &mut rng);
        assert_eq!(single.mask, vec![true]);
    }
}
