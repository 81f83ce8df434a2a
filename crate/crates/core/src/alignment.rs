//! Protein-text contrastive alignment.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{ParamStore, Provenance};
use crate::tensor::Mat;

pub const NORM_EPS: f64 = 1e-12;
pub const TEXT_PREFIX: &str = "txt.";
pub const PROTEIN_PROJ: &str = "align.prot_proj.";
pub const TEXT_PROJ: &str = "align.text_proj.";

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub tau: f64,
    pub embed_dim: usize,
    pub normalize: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            embed_dim: 32,
            normalize: true,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("temperature {} must be positive", self.tau)));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.vocab == 0 || self.max_len == 0 {
            return Err(Error::config("text encoder sizes must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::config("text encoder hidden size not divisible by heads"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch {
    pub protein_embeds: Mat,
    pub text_embeds: Mat,
}

/// Adds the text encoder (tagged pretrained, standing in for a biomedical
/// text model) and both projection heads (tagged with `stage`).
pub fn init(
    store: &mut ParamStore,
    text: &TextEncoderConfig,
    enc_d: usize,
    cfg: &AlignmentConfig,
    stage: u8,
    rng: &mut impl Rng,
) {
    let body = Provenance::Pretrained;
    nn::init_embedding(store, "txt.emb.", text.vocab, text.max_len, text.d, body, rng);
    for l in 0..text.layers {
        nn::init_block(store, &text_layer_prefix(l), text.d, 4 * text.d, body, rng);
    }
    nn::init_layer_norm(store, "txt.lnf.", text.d, body);
    let fresh = Provenance::Stage(stage);
    nn::init_linear(store, PROTEIN_PROJ, enc_d, cfg.embed_dim, fresh, rng);
    nn::init_linear(store, TEXT_PROJ, text.d, cfg.embed_dim, fresh, rng);
}

pub fn text_layer_prefix(l: usize) -> String {
    format!("txt.layer{l}.")
}

fn finish(g: &mut Graph, pooled: Var, store: &ParamStore, proj: &str, cfg: &AlignmentConfig) -> Result<Var> {
    let e = nn::linear(g, store, proj, pooled)?;
    Ok(if cfg.normalize {
        g.l2_normalize_rows(e, NORM_EPS)
    } else {
        e
    })
}

/// Mean of the rows of `hidden` where `mask` is true, projected to the
/// embedding space; `1 x e`.
pub fn pool_protein_var(
    g: &mut Graph,
    store: &ParamStore,
    hidden: Var,
    mask: &[bool],
    cfg: &AlignmentConfig,
) -> Result<Var> {
    if mask.len() != g.value(hidden).rows() {
        return Err(Error::shape(format!(
            "pooling mask of {} for {} rows",
            mask.len(),
            g.value(hidden).rows()
        )));
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::rejected("pooling mask selects no token"));
    }
    let rows = if idx.len() == mask.len() {
        hidden
    } else {
        g.gather_rows(hidden, &idx)
    };
    let pooled = g.mean_rows(rows);
    finish(g, pooled, store, PROTEIN_PROJ, cfg)
}

pub fn pool_protein(
    store: &ParamStore,
    output: &EncoderOutput,
    mask: &[bool],
    cfg: &AlignmentConfig,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let h = g.constant(output.last().clone());
    let v = pool_protein_var(&mut g, store, h, mask, cfg)?;
    Ok(g.value(v).data().to_vec())
}

/// Bidirectional text transformer, mean-pooled and projected; `1 x e`.
pub fn encode_text_var(
    g: &mut Graph,
    store: &ParamStore,
    text: &TextEncoderConfig,
    cfg: &AlignmentConfig,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::rejected("empty text token sequence"));
    }
    let tokens: Vec<usize> = tokens
        .iter()
        .take(text.max_len)
        .map(|&t| if t < text.vocab { t } else { crate::data::tokenizer::TEXT_UNK })
        .collect();
    let mut x = nn::embed(g, store, "txt.emb.", &tokens)?;
    for l in 0..text.layers {
        x = nn::block_forward(g, store, &text_layer_prefix(l), x, text.heads, None, false)?;
    }
    let x = nn::layer_norm(g, store, "txt.lnf.", x)?;
    let pooled = g.mean_rows(x);
    finish(g, pooled, store, TEXT_PROJ, cfg)
}

pub fn encode_text(
    store: &ParamStore,
    text: &TextEncoderConfig,
    cfg: &AlignmentConfig,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let v = encode_text_var(&mut g, store, text, cfg, tokens)?;
    Ok(g.value(v).data().to_vec())
}

/// Symmetric InfoNCE over the `B x B` similarity matrix `P Tᵀ / tau`:
/// the mean of the protein-to-text and text-to-protein cross-entropies with
/// matched pairs on the diagonal.
pub fn clip_loss_var(g: &mut Graph, proteins: Var, texts: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature {tau} must be positive")));
    }
    let (b, e) = g.value(proteins).shape();
    if b == 0 || g.value(texts).shape() != (b, e) {
        return Err(Error::shape(format!(
            "protein embeddings {:?} vs text embeddings {:?}",
            g.value(proteins).shape(),
            g.value(texts).shape()
        )));
    }
    let diag: Vec<Option<usize>> = (0..b).map(Some).collect();
    let sim = g.matmul_nt(proteins, texts);
    let sim = g.scale(sim, 1.0 / tau);
    let p2t = g.cross_entropy(sim, diag.clone());
    let sim_t = g.transpose(sim);
    let t2p = g.cross_entropy(sim_t, diag);
    let both = g.add(p2t, t2p);
    Ok(g.scale(both, 0.5))
}

pub fn clip_loss(batch: &AlignmentBatch, cfg: &AlignmentConfig) -> Result<f64> {
    cfg.validate()?;
    let mut g = Graph::new();
    let p = g.constant(batch.protein_embeds.clone());
    let t = g.constant(batch.text_embeds.clone());
    let l = clip_loss_var(&mut g, p, t, cfg.tau)?;
    Ok(g.scalar(l))
}

/// Unweighted sum of the three stage-0 terms.
pub fn stage0_loss(denoise: f64, clip: f64, mlm: f64) -> f64 {
    denoise + clip + mlm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(tau: f64) -> AlignmentConfig {
        AlignmentConfig {
            tau,
            embed_dim: 2,
            normalize: true,
        }
    }

    #[test]
    fn singleton_batch_is_zero() {
        let b = AlignmentBatch {
            protein_embeds: Mat::from_rows(&[vec![0.3, 0.4]]),
            text_embeds: Mat::from_rows(&[vec![-1.0, 2.0]]),
        };
        assert_eq!(clip_loss(&b, &cfg(0.07)).unwrap(), 0.0);
    }

    #[test]
    fn identity_similarity_two_pairs() {
        let b = AlignmentBatch {
            protein_embeds: Mat::identity(2),
            text_embeds: Mat::identity(2),
        };
        let l = clip_loss(&b, &cfg(1.0)).unwrap();
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn swapping_roles_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Mat::randn(5, 3, 1.0, &mut rng);
        let t = Mat::randn(5, 3, 1.0, &mut rng);
        let a = clip_loss(
            &AlignmentBatch { protein_embeds: p.clone(), text_embeds: t.clone() },
            &cfg(0.07),
        )
        .unwrap();
        let b = clip_loss(
            &AlignmentBatch { protein_embeds: t, text_embeds: p },
            &cfg(0.07),
        )
        .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a >= 0.0);
    }

    #[test]
    fn temperature_must_be_positive() {
        let b = AlignmentBatch {
            protein_embeds: Mat::identity(2),
            text_embeds: Mat::identity(2),
        };
        assert!(matches!(clip_loss(&b, &cfg(0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn stage0_sum() {
        assert_eq!(stage0_loss(0.0, 0.0, 0.0), 0.0);
        assert!((stage0_loss(1.0, 0.3133, 3.4965) - 4.8098).abs() < 1e-12);
    }

    fn setup() -> (ParamStore, TextEncoderConfig, AlignmentConfig) {
        let text = TextEncoderConfig {
            d: 8,
            layers: 1,
            heads: 2,
            vocab: 20,
            max_len: 16,
        };
        let a = AlignmentConfig {
            tau: 0.07,
            embed_dim: 4,
            normalize: true,
        };
        let mut store = ParamStore::new();
        init(&mut store, &text, 6, &a, 0, &mut ChaCha8Rng::seed_from_u64(2));
        (store, text, a)
    }

    #[test]
    fn pooled_embeddings_are_unit_norm() {
        let (store, text, a) = setup();
        let out = EncoderOutput {
            hidden: vec![Mat::randn(3, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(3))],
            delta_used: None,
            structure_enabled: false,
        };
        let v = pool_protein(&store, &out, &[true, false, true], &a).unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        assert!(pool_protein(&store, &out, &[false; 3], &a).is_err());

        let t1 = encode_text(&store, &text, &a, &[4, 5, 6]).unwrap();
        let t2 = encode_text(&store, &text, &a, &[4, 5, 6]).unwrap();
        assert_eq!(t1, t2);
        assert!((t1.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        let t3 = encode_text(&store, &text, &a, &[7, 99]).unwrap();
        let cos: f64 = t1.iter().zip(&t3).map(|(x, y)| x * y).sum();
        assert!((-1.0..=1.0).contains(&cos));
    }

    #[test]
    fn single_token_pool_is_projection() {
        let (store, _, a) = setup();
        let row = Mat::randn(1, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let out = EncoderOutput {
            hidden: vec![row.clone()],
            delta_used: None,
            structure_enabled: false,
        };
        let raw = AlignmentConfig { normalize: false, ..a };
        let v = pool_protein(&store, &out, &[true], &raw).unwrap();
        let mut expect = row.matmul(store.get("align.prot_proj.w").unwrap());
        expect.add_assign(store.get("align.prot_proj.b").unwrap());
        assert_eq!(v, expect.data());
    }
}
