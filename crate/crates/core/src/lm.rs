//! Causal multimodal language model over spliced protein representations.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::data::tokenizer::{Specials, TextVocab, TEXT_BOS, TEXT_EOS};
use crate::data::{InstructionRecord, ProteinRecord};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::moe::{self, AuxReduction};
use crate::nn;
use crate::params::{ParamStore, Provenance};
use crate::tensor::Mat;

pub const PROJECTOR: &str = "proj.w";

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub beta: f64,
    /// Experts selected per token in MoE layers.
    pub topk: usize,
    pub aux_reduction: AuxReduction,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d: 128,
            layers: 4,
            heads: 4,
            vocab: 0,
            max_len: 512,
            ffn_mult: 4,
            beta: 0.01,
            topk: 1,
            aux_reduction: AuxReduction::Mean,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.vocab == 0 || self.max_len == 0
        {
            return Err(Error::config("language model sizes must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::config("language model width not divisible by heads"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config(format!("aux coefficient {} must be >= 0", self.beta)));
        }
        Ok(())
    }
}

pub fn layer_prefix(l: usize) -> String {
    format!("lm.layer{l}.")
}

/// Adds the projector and a freshly initialized language model, all tagged
/// with `stage`.
pub fn init(store: &mut ParamStore, cfg: &LmConfig, enc_d: usize, stage: u8, rng: &mut impl Rng) {
    let p = Provenance::Stage(stage);
    store.insert_normal(PROJECTOR, enc_d, cfg.d, 1.0 / (enc_d as f64).sqrt(), p, rng);
    nn::init_embedding(store, "lm.emb.", cfg.vocab, cfg.max_len, cfg.d, p, rng);
    for l in 0..cfg.layers {
        nn::init_block(store, &layer_prefix(l), cfg.d, cfg.ffn_mult * cfg.d, p, rng);
    }
    nn::init_layer_norm(store, "lm.lnf.", cfg.d, p);
    nn::init_linear(store, "lm.head.", cfg.d, cfg.vocab, p, rng);
}

/// Row-wise linear map into the language-model width.
pub fn project_var(g: &mut Graph, store: &ParamStore, states: Var) -> Result<Var> {
    let w = store.var(g, PROJECTOR)?;
    if g.value(states).cols() != g.value(w).rows() {
        return Err(Error::shape(format!(
            "encoder states of width {} for projector {:?}",
            g.value(states).cols(),
            g.value(w).shape()
        )));
    }
    Ok(g.matmul(states, w))
}

pub fn project(states: &Mat, w: &Mat) -> Result<Mat> {
    if states.cols() != w.rows() {
        return Err(Error::shape(format!(
            "encoder states of width {} for projector {:?}",
            states.cols(),
            w.shape()
        )));
    }
    Ok(states.matmul(w))
}

/// Projected penultimate-layer encoder states of `protein`, `N x d_lm`.
pub fn protein_states_var(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderConfig,
    protein: &ProteinRecord,
    use_structure: bool,
) -> Result<Var> {
    let coords = if use_structure { protein.coords.as_ref() } else { None };
    let out = encoder::encode_var(g, store, enc, &protein.tokens(), coords)?;
    project_var(g, store, out.penultimate())
}

/// Token layout of one multimodal sequence:
/// `[bos, prefix, protein rows, suffix, answer, eos]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputLayout {
    /// `bos` and question text before the placeholder.
    pub head: Vec<usize>,
    pub protein_rows: usize,
    /// Question text after the placeholder, then answer and `eos` when present.
    pub tail: Vec<usize>,
    /// One entry per position; true on answer and `eos` positions.
    pub loss_mask: Vec<bool>,
}

impl InputLayout {
    pub fn total_len(&self) -> usize {
        self.head.len() + self.protein_rows + self.tail.len()
    }

    /// Token id at each position, `None` on protein rows.
    pub fn token_at(&self, pos: usize) -> Option<usize> {
        let h = self.head.len();
        if pos < h {
            Some(self.head[pos])
        } else if pos < h + self.protein_rows {
            None
        } else {
            self.tail.get(pos - h - self.protein_rows).copied()
        }
    }

    /// Next-token targets for each logit row: row `i` predicts position
    /// `i + 1` when that position is supervised.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let t = self.total_len();
        (0..t)
            .map(|i| {
                if i + 1 < t && self.loss_mask[i + 1] {
                    self.token_at(i + 1)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }
}

/// Builds the layout for `record`. With `answer` false, the sequence ends
/// after the question (generation prompt).
///
/// Sequences longer than `max_len` lose positions from the end. A record is
/// rejected when the protein rows would be cut or, with `answer`, when no
/// supervised position survives.
pub fn assemble_layout(
    record: &InstructionRecord,
    protein_rows: usize,
    vocab: &TextVocab,
    max_len: usize,
    answer: bool,
) -> Result<InputLayout> {
    let (pre, post) = record.split_question()?;
    let mut head = vec![TEXT_BOS];
    head.extend(vocab.encode(pre, Specials::NONE));
    let mut tail = vocab.encode(post, Specials::NONE);
    let question_tail = tail.len();
    if answer {
        tail.extend(vocab.encode(&record.answer, Specials::NONE));
        tail.push(TEXT_EOS);
    }
    if head.len() + protein_rows > max_len {
        return Err(Error::rejected(format!(
            "instruction {}: {} protein rows do not fit in {max_len} positions",
            record.id, protein_rows
        )));
    }
    tail.truncate(max_len - head.len() - protein_rows);
    let mut loss_mask = vec![false; head.len() + protein_rows + tail.len()];
    let base = head.len() + protein_rows;
    for (i, m) in loss_mask[base..].iter_mut().enumerate() {
        *m = answer && i >= question_tail;
    }
    let layout = InputLayout {
        head,
        protein_rows,
        tail,
        loss_mask,
    };
    if answer && layout.supervised() == 0 {
        return Err(Error::rejected(format!(
            "instruction {}: no answer position fits in {max_len} positions",
            record.id
        )));
    }
    Ok(layout)
}

/// Assembled input with concrete protein embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalBatch {
    pub layout: InputLayout,
    /// `N x d_lm` projected protein representation.
    pub protein_embeds: Mat,
}

pub fn assemble_input(
    record: &InstructionRecord,
    protein_embeds: &Mat,
    vocab: &TextVocab,
    max_len: usize,
) -> Result<MultimodalBatch> {
    Ok(MultimodalBatch {
        layout: assemble_layout(record, protein_embeds.rows(), vocab, max_len, true)?,
        protein_embeds: protein_embeds.clone(),
    })
}

/// Output of [`lm_forward_var`].
#[derive(Debug, Clone)]
pub struct LmVars {
    pub logits: Var,
    /// Gate logits of each MoE layer, keyed by layer index.
    pub gate_logits: Vec<(usize, Var)>,
}

pub fn lm_forward_var(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &LmConfig,
    layout: &InputLayout,
    protein: Var,
) -> Result<LmVars> {
    let t = layout.total_len();
    if t > cfg.max_len {
        return Err(Error::rejected(format!(
            "sequence of {t} exceeds maximum length {}",
            cfg.max_len
        )));
    }
    if g.value(protein).shape() != (layout.protein_rows, cfg.d) {
        return Err(Error::shape(format!(
            "protein embeddings {:?}, layout expects {} x {}",
            g.value(protein).shape(),
            layout.protein_rows,
            cfg.d
        )));
    }
    let table = store.var(g, "lm.emb.tok")?;
    let vocab = g.value(table).rows();
    if let Some(bad) = layout.head.iter().chain(&layout.tail).find(|&&id| id >= vocab) {
        return Err(Error::rejected(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let mut parts = vec![g.gather_rows(table, &layout.head)];
    if layout.protein_rows > 0 {
        parts.push(protein);
    }
    if !layout.tail.is_empty() {
        parts.push(g.gather_rows(table, &layout.tail));
    }
    let x = g.concat_rows(&parts);
    let mut x = nn::add_positions(g, store, "lm.emb.", x, 0)?;
    let mut gate_logits = Vec::new();
    for l in 0..cfg.layers {
        let p = layer_prefix(l);
        x = nn::attention_sublayer(g, store, &p, x, cfg.heads, None, true)?;
        if moe::is_moe_layer(store, &p) {
            let (y, logits) = moe::moe_sublayer(g, store, &p, x, cfg.topk)?;
            gate_logits.push((l, logits));
            x = y;
        } else {
            x = nn::ffn_sublayer(g, store, &p, x)?;
        }
    }
    let x = nn::layer_norm(g, store, "lm.lnf.", x)?;
    let logits = nn::linear(g, store, "lm.head.", x)?;
    Ok(LmVars {
        logits,
        gate_logits,
    })
}

/// `T x vocab` logits for an assembled batch.
pub fn lm_forward(store: &ParamStore, cfg: &LmConfig, batch: &MultimodalBatch) -> Result<Mat> {
    let mut g = Graph::new();
    let p = g.constant(batch.protein_embeds.clone());
    let out = lm_forward_var(&mut g, store, cfg, &batch.layout, p)?;
    Ok(g.value(out.logits).clone())
}

pub fn instruction_loss_var(g: &mut Graph, logits: Var, layout: &InputLayout) -> Result<Var> {
    if g.value(logits).rows() != layout.total_len() {
        return Err(Error::shape("logit rows differ from sequence length"));
    }
    let targets = layout.targets();
    if targets.iter().all(Option::is_none) {
        return Err(Error::rejected("loss mask selects no answer position"));
    }
    Ok(g.cross_entropy(logits, targets))
}

/// Mean next-token cross-entropy over answer and `eos` positions.
pub fn instruction_loss(logits: &Mat, batch: &MultimodalBatch) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = instruction_loss_var(&mut g, l, &batch.layout)?;
    Ok(g.scalar(loss))
}

pub fn reduce_aux(values: &[f64], reduction: AuxReduction) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let s: f64 = values.iter().sum();
    match reduction {
        AuxReduction::Mean => s / values.len() as f64,
        AuxReduction::Sum => s,
    }
}

/// `inst + beta * reduce(aux)`; equals `inst` without MoE layers.
pub fn stage2_loss(inst_loss: f64, aux_losses: &[f64], beta: f64) -> f64 {
    if aux_losses.is_empty() {
        return inst_loss;
    }
    inst_loss + beta * reduce_aux(aux_losses, AuxReduction::Mean)
}

pub fn stage2_loss_var(
    g: &mut Graph,
    inst: Var,
    aux: &[Var],
    beta: f64,
    reduction: AuxReduction,
) -> Var {
    if aux.is_empty() {
        return inst;
    }
    let total = if aux.len() == 1 { aux[0] } else { g.add_n(aux) };
    let scale = match reduction {
        AuxReduction::Mean => beta / aux.len() as f64,
        AuxReduction::Sum => beta,
    };
    let weighted = g.scale(total, scale);
    g.add(inst, weighted)
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Shared inputs for inference.
#[derive(Debug, Clone, Copy)]
pub struct Inference<'a> {
    pub store: &'a ParamStore,
    pub enc: &'a EncoderConfig,
    pub lm: &'a LmConfig,
    pub vocab: &'a TextVocab,
}

impl Inference<'_> {
    pub fn protein_embeds(&self, protein: &ProteinRecord) -> Result<Mat> {
        let mut g = Graph::new();
        let v = protein_states_var(&mut g, self.store, self.enc, protein, true)?;
        Ok(g.value(v).clone())
    }

    /// Greedy decoding until `eos`, `max_new` tokens or the length limit;
    /// ties go to the lowest token id.
    pub fn generate(
        &self,
        record: &InstructionRecord,
        protein: &ProteinRecord,
        max_new: usize,
    ) -> Result<String> {
        if max_new == 0 {
            return Ok(String::new());
        }
        let embeds = self.protein_embeds(protein)?;
        let mut layout = assemble_layout(record, embeds.rows(), self.vocab, self.lm.max_len, false)?;
        let mut out = Vec::new();
        while out.len() < max_new && layout.total_len() < self.lm.max_len {
            let mut g = Graph::new();
            let p = g.constant(embeds.clone());
            let vars = lm_forward_var(&mut g, self.store, self.lm, &layout, p)?;
            let logits = g.value(vars.logits);
            let next = argmax_lowest(logits.row(logits.rows() - 1));
            if next == TEXT_EOS {
                break;
            }
            out.push(next);
            layout.tail.push(next);
            layout.loss_mask.push(false);
        }
        Ok(self.vocab.decode(&out))
    }

    /// Mean answer cross-entropy of `record` with its answer replaced by `answer`.
    pub fn answer_loss(&self, record: &InstructionRecord, embeds: &Mat, answer: &str) -> Result<f64> {
        let mut r = record.clone();
        r.answer = answer.to_string();
        let batch = assemble_input(&r, embeds, self.vocab, self.lm.max_len)?;
        instruction_loss(&lm_forward(self.store, self.lm, &batch)?, &batch)
    }

    /// Picks the candidate with the lowest answer loss; ties keep the earlier one.
    pub fn choose(
        &self,
        record: &InstructionRecord,
        protein: &ProteinRecord,
        candidates: &[&str],
    ) -> Result<String> {
        let embeds = self.protein_embeds(protein)?;
        let mut best: Option<(f64, &str)> = None;
        for c in candidates {
            let l = self.answer_loss(record, &embeds, c)?;
            if best.is_none_or(|(b, _)| l < b) {
                best = Some((l, c));
            }
        }
        best.map(|(_, c)| c.to_string())
            .ok_or_else(|| Error::rejected("no candidate answers"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(question: &str, answer: &str) -> InstructionRecord {
        InstructionRecord {
            id: "r0".into(),
            protein_id: "p0".into(),
            task_type: TaskType::OpenEnded,
            category: "Function".into(),
            question: question.into(),
            answer: answer.into(),
        }
    }

    fn vocab() -> TextVocab {
        TextVocab::build(["what is the function of ? binds dna . yes no"])
    }

    fn tiny(vocab: usize) -> (LmConfig, ParamStore) {
        let cfg = LmConfig {
            d: 8,
            layers: 2,
            heads: 2,
            vocab,
            max_len: 32,
            ..LmConfig::default()
        };
        let mut store = ParamStore::new();
        init(&mut store, &cfg, 6, 1, &mut ChaCha8Rng::seed_from_u64(3));
        (cfg, store)
    }

    #[test]
    fn splices_protein_rows_at_placeholder() {
        let v = vocab();
        let r = record("What is the function of <protein>?", "Binds DNA.");
        let l = assemble_layout(&r, 5, &v, 64, true).unwrap();
        assert_eq!(l.head.len(), 6);
        assert_eq!(l.protein_rows, 5);
        assert_eq!(l.token_at(6), None);
        assert_eq!(l.token_at(10), None);
        assert_eq!(l.token_at(11), Some(v.id("?")));
        assert_eq!(l.supervised(), 3 + 1);
        assert_eq!(*l.tail.last().unwrap(), TEXT_EOS);
    }

    #[test]
    fn truncation_boundaries() {
        let v = vocab();
        let r = record("What is the function of <protein>?", "Binds DNA.");
        let full = assemble_layout(&r, 5, &v, 64, true).unwrap().total_len();
        assert_eq!(full, 16);
        for max_len in 1..=20 {
            let out = assemble_layout(&r, 5, &v, max_len, true);
            if max_len < 13 {
                assert!(out.is_err(), "max_len {max_len}");
            } else {
                let l = out.unwrap();
                assert_eq!(l.protein_rows, 5);
                assert_eq!(l.total_len(), max_len.min(full));
                assert_eq!(l.supervised(), (max_len.min(full) - 12).min(4));
            }
        }
    }

    #[test]
    fn projector_is_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Mat::randn(3, 4, 1.0, &mut rng);
        let w = Mat::randn(4, 8, 1.0, &mut rng);
        let p = project(&s, &w).unwrap();
        for i in 0..3 {
            for j in 0..8 {
                let e: f64 = (0..4).map(|k| s.get(i, k) * w.get(k, j)).sum();
                assert!((p.get(i, j) - e).abs() < 1e-12);
            }
        }
        assert_eq!(project(&s, &Mat::identity(4)).unwrap(), s);
        assert_eq!(project(&Mat::zeros(2, 4), &w).unwrap(), Mat::zeros(2, 8));
        assert!(project(&s, &Mat::identity(3)).is_err());
    }

    #[test]
    fn logits_are_causal() {
        let v = vocab();
        let (cfg, store) = tiny(v.len());
        let r = record("What is the function of <protein>?", "Binds DNA.");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let embeds = Mat::randn(3, 8, 1.0, &mut rng);
        let a = assemble_input(&r, &embeds, &v, 32).unwrap();
        let mut b = a.clone();
        let last = b.layout.tail.len() - 2;
        b.layout.tail[last] = v.id("yes");
        let la = lm_forward(&store, &cfg, &a).unwrap();
        let lb = lm_forward(&store, &cfg, &b).unwrap();
        let changed = a.layout.total_len() - 2;
        for i in 0..changed {
            assert_eq!(la.row(i), lb.row(i), "row {i}");
        }
        assert_ne!(la.row(changed), lb.row(changed));
        assert_eq!(la, lm_forward(&store, &cfg, &a).unwrap());
    }

    #[test]
    fn uniform_logits_loss() {
        let specials_only = TextVocab::from_tokens(
            ["<pad>", "<unk>", "<bos>", "<eos>"].iter().map(|s| s.to_string()).collect(),
        );
        let b = assemble_input(&record("<protein>", "zzz"), &Mat::zeros(1, 4), &specials_only, 32)
            .unwrap();
        assert_eq!(b.layout.supervised(), 2);
        let logits = Mat::zeros(b.layout.total_len(), 4);
        let l = instruction_loss(&logits, &b).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn prompt_targets_do_not_matter() {
        let v = vocab();
        let r = record("what is <protein> function", "binds dna");
        let b = assemble_input(&r, &Mat::zeros(2, 4), &v, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Mat::randn(b.layout.total_len(), v.len(), 1.0, &mut rng);
        let base = instruction_loss(&logits, &b).unwrap();
        let mut c = b.clone();
        c.layout.head[1] = v.id("yes");
        c.layout.tail[0] = v.id("no");
        assert_eq!(instruction_loss(&logits, &c).unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn stage2_combination() {
        assert_eq!(stage2_loss(1.3863, &[], 0.01), 1.3863);
        assert_eq!(stage2_loss(1.3863, &[1.0, 1.0], 0.0), 1.3863);
        assert!((stage2_loss(1.3863, &[1.0, 1.0], 0.01) - 1.3963).abs() < 1e-12);
        assert!((stage2_loss(2.0, &[1.0], 0.01) - 2.01).abs() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic() {
        let v = vocab();
        let (cfg, mut store) = tiny(v.len());
        let enc = EncoderConfig {
            d: 6,
            layers: 2,
            heads: 2,
            kernels: 4,
            max_len: 16,
            ..EncoderConfig::default()
        };
        encoder::init(&mut store, &enc, 0, &mut ChaCha8Rng::seed_from_u64(4));
        let inf = Inference {
            store: &store,
            enc: &enc,
            lm: &cfg,
            vocab: &v,
        };
        let r = record("What is the function of <protein>?", "");
        let p = ProteinRecord::new("p0", "ACDEF");
        let a = inf.generate(&r, &p, 5).unwrap();
        assert_eq!(a, inf.generate(&r, &p, 5).unwrap());
        assert_eq!(inf.generate(&r, &p, 0).unwrap(), "");
        let c = inf.choose(&r, &p, &["Yes.", "No."]).unwrap();
        assert!(c == "Yes." || c == "No.");
    }

    #[test]
    fn argmax_tie_prefers_low_id() {
        assert_eq!(argmax_lowest(&[0.5, 2.0, 2.0, 1.0]), 1);
    }
}
