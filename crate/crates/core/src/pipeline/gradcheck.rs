//! Central-difference gradient checks of every training loss on a tiny
//! model in f64.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::alignment;
use crate::autograd::{Graph, Var};
use crate::data::tokenizer::{Specials, TextVocab, CANONICAL_RESIDUES};
use crate::data::{InstructionRecord, ProteinRecord, TaskType};
use crate::encoder::{self, MlmSample};
use crate::error::{Error, Result};
use crate::geometry::{apply_noise_with, CoordinateSet, NoiseSample};
use crate::lm::{self, InputLayout};
use crate::moe::{self, AuxReduction};
use crate::params::ParamStore;
use crate::tensor::Mat;

use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::train::{build_vocab, init_stage0, init_stage1, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossId {
    Denoise,
    Clip,
    Mlm,
    Stage0,
    Instruction,
    Aux,
    Stage2,
}

impl LossId {
    pub const ALL: [LossId; 7] = [
        LossId::Denoise,
        LossId::Clip,
        LossId::Mlm,
        LossId::Stage0,
        LossId::Instruction,
        LossId::Aux,
        LossId::Stage2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossId::Denoise => "denoise",
            LossId::Clip => "clip",
            LossId::Mlm => "mlm",
            LossId::Stage0 => "stage0",
            LossId::Instruction => "instruction",
            LossId::Aux => "aux",
            LossId::Stage2 => "stage2",
        }
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossId::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown loss '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub epsilon: f64,
    /// Entries checked per tensor (all entries of smaller tensors).
    pub samples_per_tensor: usize,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples_per_tensor: 4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub loss: String,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, worst case.
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub checked: usize,
    pub finite: bool,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.finite && self.max_rel_error < tol
    }
}

type Build<'a> = dyn Fn(&mut Graph, &ParamStore) -> Result<Var> + 'a;

fn eval(store: &ParamStore, build: &Build) -> Result<f64> {
    let mut g = Graph::new();
    let v = build(&mut g, store)?;
    Ok(g.scalar(v))
}

/// Compares graph gradients of `build` with central differences at sampled
/// entries of every tensor that receives a gradient.
pub fn check_gradients(
    name: &str,
    store: &ParamStore,
    build: &Build,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        loss: name.to_string(),
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        checked: 0,
        finite: true,
    };
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    if !g.scalar(loss).is_finite() {
        report.finite = false;
        report.max_rel_error = f64::INFINITY;
        return Ok(report);
    }
    let grads = g.backward(loss).into_params();
    let mut rng = stream(cfg.seed, 7);
    let mut probe = store.clone();
    for (tensor, grad) in &grads {
        let n = grad.len();
        let picks: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_tensor).into_vec()
        };
        for idx in picks {
            let orig = store.get(tensor)?.data()[idx];
            probe.get_mut(tensor)?.data_mut()[idx] = orig + cfg.epsilon;
            let up = eval(&probe, build)?;
            probe.get_mut(tensor)?.data_mut()[idx] = orig - cfg.epsilon;
            let down = eval(&probe, build)?;
            probe.get_mut(tensor)?.data_mut()[idx] = orig;
            report.checked += 1;
            let numeric = (up - down) / (2.0 * cfg.epsilon);
            let analytic = grad.data()[idx];
            if !numeric.is_finite() || !analytic.is_finite() {
                report.finite = false;
                report.max_rel_error = f64::INFINITY;
                report.worst_tensor = tensor.clone();
                report.worst_index = idx;
                return Ok(report);
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = tensor.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

/// Harness self-test on `sum(c * x^2 + b * x)`.
pub fn quadratic_self_test(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = stream(cfg.seed, 8);
    let mut store = ParamStore::new();
    store.insert("x", Mat::randn(3, 4, 1.0, &mut rng), crate::Provenance::Stage(0));
    let c = Mat::randn(3, 4, 1.0, &mut rng);
    let b = Mat::randn(3, 4, 1.0, &mut rng);
    let build = move |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let x = s.var(g, "x")?;
        let sq = g.mul(x, x);
        let quad = g.mul_const(sq, c.clone());
        let lin = g.mul_const(x, b.clone());
        let sum = g.add(quad, lin);
        Ok(g.sum_all(sum))
    };
    let cfg = GradcheckConfig {
        samples_per_tensor: 12,
        ..cfg.clone()
    };
    check_gradients("quadratic", &store, &build, &cfg)
}

/// Tiny model and inputs shared by all loss checks: d = 8, N = 6 residues,
/// two layers everywhere, K = 4 kernels, two experts with top-1 routing in
/// both language-model layers.
pub struct TinyFixture {
    pub model: ModelConfig,
    pub store: ParamStore,
    pub vocab: TextVocab,
    pub proteins: Vec<ProteinRecord>,
    pub texts: Vec<Vec<usize>>,
    pub records: Vec<InstructionRecord>,
    pub noise: NoiseSample,
    pub mlm: MlmSample,
    pub layout: InputLayout,
    pub beta: f64,
}

impl TinyFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = stream(seed, 9);
        let residues: Vec<char> = CANONICAL_RESIDUES.chars().collect();
        let captions = ["binds zinc .", "cuts dna .", "moves ions .", "folds rna ."];
        let mut proteins = Vec::new();
        let mut records = Vec::new();
        for (i, cap) in captions.iter().enumerate() {
            let seq: String = (0..6).map(|_| residues[rng.random_range(0..residues.len())]).collect();
            let coords: Vec<[f64; 3]> = (0..6)
                .map(|_| [0, 1, 2].map(|_| 4.0 * rng.random::<f64>() - 2.0 + i as f64))
                .collect();
            let mut p = ProteinRecord::new(format!("p{i}"), seq);
            p.coords = Some(CoordinateSet::new(coords)?);
            proteins.push(p);
            records.push(InstructionRecord {
                id: format!("r{i}"),
                protein_id: format!("p{i}"),
                task_type: TaskType::OpenEnded,
                category: "Function".into(),
                question: "what does <protein> do ?".into(),
                answer: cap.to_string(),
            });
        }
        let vocab = build_vocab(&records)?;
        let mut model = ModelConfig::default();
        model.enc.d = 8;
        model.enc.heads = 2;
        model.enc.layers = 2;
        model.enc.kernels = 4;
        model.enc.max_len = 16;
        model.text.d = 8;
        model.text.heads = 2;
        model.text.layers = 2;
        model.text.max_len = 16;
        model.align.embed_dim = 8;
        model.lm.d = 8;
        model.lm.heads = 2;
        model.lm.layers = 2;
        model.lm.max_len = 32;
        model.lm.topk = 1;
        let model = model.with_vocab(vocab.len());

        let s0 = init_stage0(&model, &vocab, seed)?;
        let s1 = init_stage1(&s0, &model, seed)?;
        let dense = Checkpoint { stage: 1, ..s1 };
        let mut store = moe::upcycle(&dense, 2, 1, seed)?.params;
        // Break the symmetry of copied experts, unit gains and zero biases.
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            let m = store.get_mut(&n)?;
            for v in m.data_mut() {
                *v += 0.05 * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        let texts = captions
            .iter()
            .map(|c| vocab.encode(c, Specials::NONE))
            .collect();
        let noise = apply_noise_with(proteins[0].coords.as_ref().expect("set above"), 0.5, &mut rng)?;
        let mlm = encoder::mask_tokens(&proteins[0].tokens(), &mut rng);
        let layout = lm::assemble_layout(&records[0], 6, &vocab, model.lm.max_len, true)?;
        Ok(Self {
            model,
            store,
            vocab,
            proteins,
            texts,
            records,
            noise,
            mlm,
            layout,
            beta: 0.5,
        })
    }

    fn denoise(&self, g: &mut Graph, s: &ParamStore) -> Result<Var> {
        let enc = encoder::encode_var(g, s, &self.model.enc, &self.proteins[0].tokens(), Some(&self.noise.noised))?;
        let w_m = s.var(g, "enc.pos_head.w_m")?;
        let w_n = s.var(g, "enc.pos_head.w_n")?;
        let delta = enc.delta.ok_or_else(|| Error::rejected("structure path disabled"))?;
        let pred = encoder::position_head_var(g, enc.last(), delta, &self.noise.noised, w_m, w_n)?;
        encoder::denoise_loss_var(g, &self.noise.noise, pred)
    }

    fn mlm(&self, g: &mut Graph, s: &ParamStore) -> Result<Var> {
        let enc = encoder::encode_var(g, s, &self.model.enc, &self.mlm.input, self.proteins[0].coords.as_ref())?;
        let logits = encoder::mlm_logits_var(g, s, enc.last())?;
        encoder::mlm_loss_var(g, logits, &self.mlm.targets, &self.mlm.mask)
    }

    fn clip(&self, g: &mut Graph, s: &ParamStore) -> Result<Var> {
        let mut prot = Vec::new();
        let mut text = Vec::new();
        for (p, t) in self.proteins.iter().zip(&self.texts) {
            let enc = encoder::encode_var(g, s, &self.model.enc, &p.tokens(), p.coords.as_ref())?;
            let mask = vec![true; p.len()];
            prot.push(alignment::pool_protein_var(g, s, enc.last(), &mask, &self.model.align)?);
            text.push(alignment::encode_text_var(g, s, &self.model.text, &self.model.align, t)?);
        }
        let p = g.concat_rows(&prot);
        let t = g.concat_rows(&text);
        alignment::clip_loss_var(g, p, t, self.model.align.tau)
    }

    fn lm_parts(&self, g: &mut Graph, s: &ParamStore) -> Result<(Var, Vec<Var>)> {
        let protein = lm::protein_states_var(g, s, &self.model.enc, &self.proteins[0], true)?;
        let out = lm::lm_forward_var(g, s, &self.model.lm, &self.layout, protein)?;
        let inst = lm::instruction_loss_var(g, out.logits, &self.layout)?;
        let aux = out
            .gate_logits
            .iter()
            .map(|&(_, l)| moe::aux_loss_var(g, l, self.model.lm.topk))
            .collect();
        Ok((inst, aux))
    }

    pub fn build(&self, loss: LossId, g: &mut Graph, s: &ParamStore) -> Result<Var> {
        match loss {
            LossId::Denoise => self.denoise(g, s),
            LossId::Clip => self.clip(g, s),
            LossId::Mlm => self.mlm(g, s),
            LossId::Stage0 => {
                let parts = [self.denoise(g, s)?, self.clip(g, s)?, self.mlm(g, s)?];
                Ok(g.add_n(&parts))
            }
            LossId::Instruction => Ok(self.lm_parts(g, s)?.0),
            LossId::Aux => {
                let (_, aux) = self.lm_parts(g, s)?;
                let total = g.add_n(&aux);
                Ok(g.scale(total, 1.0 / aux.len() as f64))
            }
            LossId::Stage2 => {
                let (inst, aux) = self.lm_parts(g, s)?;
                Ok(lm::stage2_loss_var(g, inst, &aux, self.beta, AuxReduction::Mean))
            }
        }
    }
}

pub fn gradcheck(loss: LossId, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let fx = TinyFixture::new(cfg.seed)?;
    let build = |g: &mut Graph, s: &ParamStore| fx.build(loss, g, s);
    check_gradients(loss.as_str(), &fx.store, &build, cfg)
}
