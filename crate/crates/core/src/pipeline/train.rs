//! Three-stage training: encoder warm-up with alignment (0), instruction
//! tuning of the projector and language model (1), and mixture-of-experts
//! tuning with a frozen encoder (2).

use std::collections::{BTreeMap, HashMap};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment;
use crate::autograd::{Graph, Var};
use crate::data::tokenizer::{Specials, TextVocab};
use crate::data::{InstructionRecord, ProteinRecord, TaskType};
use crate::encoder;
use crate::error::{Error, Result};
use crate::geometry::apply_noise_with;
use crate::lm::{self, InputLayout};
use crate::moe;
use crate::params::ParamStore;
use crate::tensor::Mat;

use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, TrainConfig};
use super::optim::{clip_grad_norm, group_lr, lr_schedule, AdamW};

const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_SAMPLE: u64 = 2;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Training inputs. Records refer to proteins by id.
#[derive(Debug, Clone, Copy)]
pub struct Corpus<'a> {
    pub proteins: &'a [ProteinRecord],
    pub records: &'a [InstructionRecord],
}

/// Vocabulary over question text around the placeholder and all answers.
pub fn build_vocab(records: &[InstructionRecord]) -> Result<TextVocab> {
    let mut texts = Vec::with_capacity(records.len() * 3);
    for r in records {
        let (pre, post) = r.split_question()?;
        texts.push(pre);
        texts.push(post);
        texts.push(r.answer.as_str());
    }
    Ok(TextVocab::build(texts))
}

/// Alignment text per protein: its open-ended answers in record order.
pub fn captions(records: &[InstructionRecord]) -> BTreeMap<String, String> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    for r in records.iter().filter(|r| r.task_type == TaskType::OpenEnded) {
        let e = out.entry(r.protein_id.clone()).or_default();
        if !e.is_empty() {
            e.push(' ');
        }
        e.push_str(&r.answer);
    }
    out
}

/// Model sizes and vocabulary recorded in a checkpoint, over `base`.
pub fn model_from_checkpoint(ckpt: &Checkpoint, base: &ModelConfig) -> Result<(ModelConfig, TextVocab)> {
    let vocab = TextVocab::from_tokens(ckpt.vocab.clone());
    let mut model = base.clone().with_vocab(vocab.len());
    model.overlay(&ckpt.config)?;
    Ok((model, vocab))
}

/// Coin flip deciding whether a record's coordinates are used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureMixer {
    pub prob: f64,
}

impl StructureMixer {
    /// Draws only when coordinates exist, so sequence-only records do not
    /// shift the random stream.
    pub fn include(&self, has_coords: bool, rng: &mut impl Rng) -> bool {
        has_coords && rng.random::<f64>() < self.prob
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub parts: Vec<f64>,
}

/// Per-step losses; `parts` columns are named by `columns`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub columns: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{:e},{:.9}", r.step, r.lr, r.loss));
            for p in &r.parts {
                out.push_str(&format!(",{p:.9}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MixingCounts {
    /// Samples whose protein has coordinates.
    pub eligible: usize,
    pub included: usize,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
    pub mixing: MixingCounts,
}

/// Fresh protein encoder, text encoder and alignment heads.
pub fn init_stage0(model: &ModelConfig, vocab: &TextVocab, seed: u64) -> Result<Checkpoint> {
    let model = model.clone().with_vocab(vocab.len());
    model.enc.validate()?;
    model.text.validate()?;
    model.align.validate()?;
    let mut rng = stream(seed, STREAM_INIT);
    let mut store = ParamStore::new();
    encoder::init(&mut store, &model.enc, 0, &mut rng);
    alignment::init(&mut store, &model.text, model.enc.d, &model.align, 0, &mut rng);
    store.round_to_f32();
    let mut ckpt = Checkpoint::new(0, store);
    ckpt.config = model.encoder_map();
    ckpt.vocab = vocab.tokens().to_vec();
    Ok(ckpt)
}

/// Adds a fresh projector and language model to a stage-0 checkpoint.
pub fn init_stage1(prior: &Checkpoint, model: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    let (model, _) = model_from_checkpoint(prior, model)?;
    model.lm.validate()?;
    let mut rng = stream(seed, STREAM_INIT);
    let mut ckpt = prior.clone();
    lm::init(&mut ckpt.params, &model.lm, model.enc.d, 1, &mut rng);
    ckpt.params.round_to_f32();
    ckpt.config.extend(model.lm_map());
    Ok(ckpt)
}

fn check_prerequisite(stage: u8, prior: Option<&Checkpoint>) -> Result<()> {
    let fail = |m: String| Err(Error::Pipeline(m));
    match (stage, prior) {
        (0, None) => Ok(()),
        (0, Some(_)) => fail("stage 0 starts from freshly initialized weights".into()),
        (_, None) => fail(format!("stage {stage} requires a stage {} checkpoint", stage - 1)),
        (1, Some(c)) if c.stage != 0 || c.is_upcycled() => fail(format!(
            "stage 1 requires a dense stage 0 checkpoint, got stage {}",
            c.stage
        )),
        (2, Some(c)) if c.stage != 1 => fail(format!(
            "stage 2 requires an upcycled stage 1 checkpoint, got stage {}",
            c.stage
        )),
        (2, Some(c)) if !c.is_upcycled() => {
            fail("stage 2 requires the upcycle transform; checkpoint has no MoE layer".into())
        }
        _ => Ok(()),
    }
}

struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng: stream(seed, STREAM_ORDER),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    /// Next `b` indices without repeats; the tail of an epoch that cannot
    /// fill a batch is dropped.
    fn next(&mut self, b: usize) -> Vec<usize> {
        if self.pos + b > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + b].to_vec();
        self.pos += b;
        out
    }
}

/// Stage-0 training item: a protein and its tokenized alignment text.
struct AlignItem<'a> {
    protein: &'a ProteinRecord,
    text: Vec<usize>,
}

/// Stage-1/2 training item.
struct TuneItem<'a> {
    protein: usize,
    layout: InputLayout,
    protein_ref: &'a ProteinRecord,
}

fn finite(stage: u8, step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericFailure {
            layer: format!("stage {stage} step {step}"),
            detail: format!("{what} = {v}"),
        })
    }
}

fn mean_var(g: &mut Graph, vars: &[Var]) -> Option<Var> {
    match vars.len() {
        0 => None,
        1 => Some(vars[0]),
        n => {
            let s = g.add_n(vars);
            Some(g.scale(s, 1.0 / n as f64))
        }
    }
}

/// Stage-0 loss of one batch: mean denoising loss over proteins with
/// coordinates, batch contrastive loss, and mean masked-LM loss.
fn stage0_batch(
    g: &mut Graph,
    store: &ParamStore,
    model: &ModelConfig,
    items: &[&AlignItem],
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Vec<f64>)> {
    let mut denoise = Vec::new();
    let mut mlm = Vec::new();
    let mut prot = Vec::new();
    let mut text = Vec::new();
    for item in items {
        let tokens = item.protein.tokens();
        let sample = encoder::mask_tokens(&tokens, rng);
        let noised = match &item.protein.coords {
            Some(c) => Some(apply_noise_with(c, alpha, rng)?),
            None => None,
        };
        let enc = encoder::encode_var(
            g,
            store,
            &model.enc,
            &sample.input,
            noised.as_ref().map(|n| &n.noised),
        )?;
        if let (Some(n), Some(delta)) = (&noised, enc.delta) {
            let w_m = store.var(g, "enc.pos_head.w_m")?;
            let w_n = store.var(g, "enc.pos_head.w_n")?;
            let pred = encoder::position_head_var(g, enc.last(), delta, &n.noised, w_m, w_n)?;
            denoise.push(encoder::denoise_loss_var(g, &n.noise, pred)?);
        }
        let logits = encoder::mlm_logits_var(g, store, enc.last())?;
        mlm.push(encoder::mlm_loss_var(g, logits, &sample.targets, &sample.mask)?);
        let all = vec![true; tokens.len()];
        prot.push(alignment::pool_protein_var(g, store, enc.last(), &all, &model.align)?);
        text.push(alignment::encode_text_var(g, store, &model.text, &model.align, &item.text)?);
    }
    let p = g.concat_rows(&prot);
    let t = g.concat_rows(&text);
    let clip = alignment::clip_loss_var(g, p, t, model.align.tau)?;
    let mlm = mean_var(g, &mlm).expect("non-empty batch");
    let mut terms = vec![clip, mlm];
    let d = mean_var(g, &denoise);
    if let Some(d) = d {
        terms.push(d);
    }
    let total = g.add_n(&terms);
    let parts = vec![
        d.map_or(0.0, |d| g.scalar(d)),
        g.scalar(clip),
        g.scalar(mlm),
    ];
    Ok((total, parts))
}

type StateCache = HashMap<(usize, bool), Mat>;

/// Stage-1/2 loss of one batch: mean instruction loss plus, with MoE
/// layers, `beta` times the reduced per-layer balance loss over the batch.
#[allow(clippy::too_many_arguments)]
fn tune_batch(
    g: &mut Graph,
    store: &ParamStore,
    model: &ModelConfig,
    items: &[&TuneItem],
    mixer: StructureMixer,
    rng: &mut ChaCha8Rng,
    mixing: &mut MixingCounts,
    cache: Option<&mut StateCache>,
) -> Result<(Var, Vec<f64>)> {
    let mut cache = cache;
    let mut inst = Vec::new();
    let mut gates: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
    for item in items {
        let has = item.protein_ref.coords.is_some();
        let use_structure = mixer.include(has, rng);
        if has {
            mixing.eligible += 1;
            mixing.included += use_structure as usize;
        }
        let protein = match cache.as_deref_mut() {
            Some(cache) => {
                let key = (item.protein, use_structure);
                if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(key) {
                    let coords = if use_structure { item.protein_ref.coords.as_ref() } else { None };
                    let out = encoder::encode(store, &model.enc, &item.protein_ref.tokens(), coords)?;
                    e.insert(out.hidden[out.hidden.len() - 2].clone());
                }
                let states = g.constant(cache[&key].clone());
                lm::project_var(g, store, states)?
            }
            None => lm::protein_states_var(g, store, &model.enc, item.protein_ref, use_structure)?,
        };
        let out = lm::lm_forward_var(g, store, &model.lm, &item.layout, protein)?;
        inst.push(lm::instruction_loss_var(g, out.logits, &item.layout)?);
        for (l, v) in out.gate_logits {
            gates.entry(l).or_default().push(v);
        }
    }
    let inst = mean_var(g, &inst).expect("non-empty batch");
    let aux: Vec<Var> = gates
        .values()
        .map(|vs| {
            let all = if vs.len() == 1 { vs[0] } else { g.concat_rows(vs) };
            moe::aux_loss_var(g, all, model.lm.topk)
        })
        .collect();
    let total = lm::stage2_loss_var(g, inst, &aux, model.lm.beta, model.lm.aux_reduction);
    let aux_vals: Vec<f64> = aux.iter().map(|&a| g.scalar(a)).collect();
    let parts = vec![g.scalar(inst), lm::reduce_aux(&aux_vals, model.lm.aux_reduction)];
    Ok((total, parts))
}

/// Runs one training stage.
///
/// Stage 0 ignores `prior` and must receive `None`; stage 1 needs the
/// stage-0 checkpoint; stage 2 needs an upcycled stage-1 checkpoint. Model
/// sizes recorded in `prior` override `model`.
pub fn train_stage(
    cfg: &TrainConfig,
    model: &ModelConfig,
    prior: Option<&Checkpoint>,
    data: &Corpus,
) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = cfg.stage;
    check_prerequisite(stage, prior)?;
    let mut ckpt = match (stage, prior) {
        (0, _) => init_stage0(model, &build_vocab(data.records)?, cfg.seed)?,
        (1, Some(p)) => init_stage1(p, model, cfg.seed)?,
        (_, Some(p)) => p.clone(),
        _ => unreachable!("checked by check_prerequisite"),
    };
    let (mut model, vocab) = model_from_checkpoint(&ckpt, model)?;
    model.lm.beta = cfg.beta;
    model.lm.aux_reduction = cfg.aux_reduction;
    if stage > 0 {
        model.validate()?;
    }

    let by_id: HashMap<&str, usize> = data
        .proteins
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect();
    let mut align_items = Vec::new();
    let mut tune_items = Vec::new();
    if stage == 0 {
        let caps = captions(data.records);
        for p in data.proteins {
            if let Some(c) = caps.get(&p.id) {
                align_items.push(AlignItem {
                    protein: p,
                    text: vocab.encode(c, Specials::NONE),
                });
            }
        }
    } else {
        for r in data.records {
            let &pi = by_id.get(r.protein_id.as_str()).ok_or_else(|| {
                Error::rejected(format!("record {} names unknown protein {}", r.id, r.protein_id))
            })?;
            let protein = &data.proteins[pi];
            match lm::assemble_layout(r, protein.len(), &vocab, model.lm.max_len, true) {
                Ok(layout) => tune_items.push(TuneItem {
                    protein: pi,
                    layout,
                    protein_ref: protein,
                }),
                Err(Error::RejectedInput(m)) => warn!("skipping record: {m}"),
                Err(e) => return Err(e),
            }
        }
    }
    let n = if stage == 0 { align_items.len() } else { tune_items.len() };
    if n == 0 {
        return Err(Error::rejected(format!("no usable training items for stage {stage}")));
    }
    let batch = cfg.batch_size.min(n);
    let total = if cfg.steps > 0 {
        cfg.steps
    } else {
        cfg.epochs * (n / batch).max(1)
    };
    info!("stage {stage}: {n} items, batch {batch}, {total} steps");

    let mut sampler = BatchSampler::new(n, cfg.seed);
    let mut rng = stream(cfg.seed, STREAM_SAMPLE);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mixer = StructureMixer {
        prob: cfg.structure_prob,
    };
    let mut mixing = MixingCounts::default();
    let mut cache = (stage == 2).then(StateCache::new);
    let mut trace = LossTrace {
        columns: if stage == 0 {
            vec!["denoise".into(), "clip".into(), "mlm".into()]
        } else {
            vec!["instruction".into(), "aux".into()]
        },
        rows: Vec::with_capacity(total),
    };

    for step in 0..total {
        let idx = sampler.next(batch);
        let mut g = Graph::new();
        if stage == 2 {
            g.freeze_prefix(encoder::PREFIX);
        }
        let (loss, parts) = if stage == 0 {
            let items: Vec<&AlignItem> = idx.iter().map(|&i| &align_items[i]).collect();
            stage0_batch(&mut g, &ckpt.params, &model, &items, cfg.alpha, &mut rng)?
        } else {
            let items: Vec<&TuneItem> = idx.iter().map(|&i| &tune_items[i]).collect();
            tune_batch(
                &mut g,
                &ckpt.params,
                &model,
                &items,
                mixer,
                &mut rng,
                &mut mixing,
                cache.as_mut(),
            )?
        };
        let value = finite(stage, step, "loss", g.scalar(loss))?;
        let mut grads = g.backward(loss).into_params();
        let norm = finite(stage, step, "gradient norm", clip_grad_norm(&mut grads, cfg.grad_clip))?;
        let lr = lr_schedule(step + 1, total, cfg.peak_lr, cfg.warmup_ratio)?;
        let params = &ckpt.params;
        let rates: HashMap<&str, f64> = grads
            .keys()
            .map(|k| {
                let p = params.tensor(k).expect("gradient for a stored tensor").provenance;
                (k.as_str(), group_lr(p, stage, lr, cfg.lr_group_ratio))
            })
            .collect();
        opt.step(&mut ckpt.params, &grads, |k| rates[k])?;
        ckpt.params.round_to_f32();
        if step % 25 == 0 || step + 1 == total {
            info!("stage {stage} step {step}/{total} loss {value:.5} lr {lr:.2e}");
        }
        debug!("step {step} grad norm {norm:.4}");
        trace.rows.push(TraceRow {
            step,
            lr,
            loss: value,
            parts,
        });
    }

    ckpt.stage = stage;
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            ckpt.set_config(format!("train.{k}"), v);
        }
    }
    Ok(StageOutput {
        checkpoint: ckpt,
        trace,
        mixing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{SyntheticConfig, SyntheticCorpus};

    fn small_model() -> ModelConfig {
        let mut m = ModelConfig::default();
        m.enc.d = 8;
        m.enc.heads = 2;
        m.enc.kernels = 4;
        m.enc.layers = 2;
        m.text.d = 8;
        m.text.heads = 2;
        m.align.embed_dim = 8;
        m.lm.d = 8;
        m.lm.heads = 2;
        m.lm.max_len = 80;
        m
    }

    fn corpus() -> (Vec<ProteinRecord>, Vec<InstructionRecord>) {
        let c = SyntheticCorpus::generate(&SyntheticConfig {
            proteins: 8,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let r = c.instructions(0).unwrap();
        (c.proteins, r)
    }

    fn cfg(stage: u8) -> TrainConfig {
        TrainConfig {
            stage,
            steps: 3,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_gating() {
        let (p, r) = corpus();
        let data = Corpus { proteins: &p, records: &r };
        let m = small_model();
        assert!(matches!(train_stage(&cfg(1), &m, None, &data), Err(Error::Pipeline(_))));
        let s0 = train_stage(&cfg(0), &m, None, &data).unwrap();
        assert!(matches!(
            train_stage(&cfg(0), &m, Some(&s0.checkpoint), &data),
            Err(Error::Pipeline(_))
        ));
        assert!(matches!(
            train_stage(&cfg(2), &m, Some(&s0.checkpoint), &data),
            Err(Error::Pipeline(_))
        ));
        let s1 = train_stage(&cfg(1), &m, Some(&s0.checkpoint), &data).unwrap();
        assert_eq!(s1.checkpoint.stage, 1);
        assert!(matches!(
            train_stage(&cfg(2), &m, Some(&s1.checkpoint), &data),
            Err(Error::Pipeline(_))
        ));
        let up = moe::upcycle(&s1.checkpoint, 2, 1, 3).unwrap();
        let s2 = train_stage(&cfg(2), &m, Some(&up), &data).unwrap();
        assert_eq!(s2.checkpoint.stage, 2);
        assert_eq!(s2.trace.rows.len(), 3);
    }

    #[test]
    fn stage2_leaves_encoder_untouched() {
        let (p, r) = corpus();
        let data = Corpus { proteins: &p, records: &r };
        let m = small_model();
        let s0 = train_stage(&cfg(0), &m, None, &data).unwrap();
        let s1 = train_stage(&cfg(1), &m, Some(&s0.checkpoint), &data).unwrap();
        let up = moe::upcycle(&s1.checkpoint, 2, 1, 3).unwrap();
        let s2 = train_stage(&cfg(2), &m, Some(&up), &data).unwrap();
        for (name, t) in up.params.iter() {
            let after = s2.checkpoint.params.get(name).unwrap();
            if name.starts_with("enc.") {
                assert_eq!(after, &t.value, "{name} moved");
            }
        }
        assert_ne!(
            up.params.get("lm.layer0.moe.gate").unwrap(),
            s2.checkpoint.params.get("lm.layer0.moe.gate").unwrap()
        );
    }

    #[test]
    fn stage1_trains_every_tuned_component() {
        let (p, r) = corpus();
        let data = Corpus { proteins: &p, records: &r };
        let m = small_model();
        let s0 = train_stage(&cfg(0), &m, None, &data).unwrap();
        let s1 = train_stage(&cfg(1), &m, Some(&s0.checkpoint), &data).unwrap();
        for name in ["enc.layer0.attn.wq", lm::PROJECTOR, "lm.head.w"] {
            let before = init_stage1(&s0.checkpoint, &m, 0).unwrap();
            assert_ne!(before.params.get(name).unwrap(), s1.checkpoint.params.get(name).unwrap());
        }
        // Text encoder is unused after stage 0.
        assert_eq!(
            s0.checkpoint.params.get("txt.lnf.g").unwrap(),
            s1.checkpoint.params.get("txt.lnf.g").unwrap()
        );
    }

    #[test]
    fn mixer_only_draws_with_coordinates() {
        let m = StructureMixer { prob: 0.85 };
        let mut a = stream(1, 5);
        let mut b = stream(1, 5);
        assert!(!m.include(false, &mut a));
        assert_eq!(m.include(true, &mut a), m.include(true, &mut b));
        assert!(!StructureMixer { prob: 0.0 }.include(true, &mut a));
        assert!(StructureMixer { prob: 1.0 }.include(true, &mut a));
    }

    #[test]
    fn captions_join_open_ended_answers() {
        let (_, r) = corpus();
        let caps = captions(&r);
        let first = &r[0].protein_id;
        assert!(caps[first].contains(&r[0].answer));
        assert!(!caps[first].contains("Yes."));
    }
}
