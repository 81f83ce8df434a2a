//! Scores generated answers against gold answers and collects routing
//! statistics of MoE layers.

use std::collections::{BTreeMap, HashMap};

use crate::autograd::Graph;
use crate::data::tokenizer::split_words;
use crate::data::{closed_answer, InstructionRecord, ProteinRecord, TaskType};
use crate::error::{Error, Result};
use crate::lm::{self, Inference};
use crate::metrics::{self, MetricConfig, MetricRow};
use crate::moe::{self, RoutingStats};
use crate::tensor::Mat;

use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::train::model_from_checkpoint;

/// Answer candidates ranked by likelihood for Yes/No records.
pub const CLOSED_CANDIDATES: [&str; 2] = ["Yes.", "No."];

/// Metrics reported for every task type present.
pub const METRICS: [&str; 8] = [
    "bleu2",
    "bleu4",
    "sentence_bleu2",
    "sentence_bleu4",
    "rouge1",
    "rouge2",
    "rougeL",
    "accuracy",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub metrics: MetricConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            metrics: MetricConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub task_type: TaskType,
    pub prediction: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    /// Per MoE layer, in layer order; empty for dense models.
    pub routing: Vec<(String, RoutingStats)>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == name).map(|r| r.value)
    }

    /// Metric table, followed by the routing table when present.
    pub fn to_csv(&self) -> String {
        let mut out = metrics::report_csv(&self.rows);
        if !self.routing.is_empty() {
            out.push('\n');
            out.push_str(&moe::routing_csv(&self.routing));
        }
        out
    }
}

/// One row per metric and task type, named `<task_type>.<metric>`.
pub fn score(predictions: &[Prediction], cfg: &MetricConfig) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let mut groups: BTreeMap<TaskType, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        groups.entry(p.task_type).or_default().push(p);
    }
    let mut rows = Vec::new();
    for (task, preds) in groups {
        let pairs: Vec<(Vec<String>, Vec<String>)> = preds
            .iter()
            .map(|p| (split_words(&p.prediction), split_words(&p.gold)))
            .collect();
        let n = pairs.len();
        let mean = |f: &dyn Fn(&[String], &[String]) -> f64| {
            pairs.iter().map(|(c, r)| f(c, r)).sum::<f64>() / n as f64
        };
        let guesses: Vec<&str> = preds.iter().map(|p| p.prediction.as_str()).collect();
        let golds: Vec<&str> = preds.iter().map(|p| p.gold.as_str()).collect();
        let values = [
            metrics::corpus_bleu(&pairs, 2, cfg),
            metrics::corpus_bleu(&pairs, 4, cfg),
            mean(&|c, r| metrics::bleu_n(c, r, 2, cfg)),
            mean(&|c, r| metrics::bleu_n(c, r, 4, cfg)),
            mean(&|c, r| metrics::rouge_n(c, r, 1)),
            mean(&|c, r| metrics::rouge_n(c, r, 2)),
            mean(&|c, r| metrics::rouge_l(c, r, cfg.rouge_beta)),
            metrics::closed_set_accuracy(&guesses, &golds)?,
        ];
        for (m, v) in METRICS.iter().zip(values) {
            rows.push(MetricRow {
                metric: format!("{}.{m}", task.as_str()),
                value: v,
                count: n,
            });
        }
    }
    Ok(rows)
}

/// Gate logits of every MoE layer for `record` with its gold answer.
fn gate_logits(inf: &Inference, record: &InstructionRecord, embeds: &Mat) -> Result<Vec<(usize, Mat)>> {
    let layout = lm::assemble_layout(record, embeds.rows(), inf.vocab, inf.lm.max_len, true)?;
    let mut g = Graph::new();
    let p = g.constant(embeds.clone());
    let out = lm::lm_forward_var(&mut g, inf.store, inf.lm, &layout, p)?;
    Ok(out
        .gate_logits
        .into_iter()
        .map(|(l, v)| (l, g.value(v).clone()))
        .collect())
}

/// Generates (open-ended) or ranks (closed-set) an answer for every record.
///
/// Yes/No records are answered by the lower answer loss among
/// [`CLOSED_CANDIDATES`]; other records by greedy decoding.
pub fn evaluate(
    ckpt: &Checkpoint,
    records: &[InstructionRecord],
    proteins: &[ProteinRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::rejected("empty test set"));
    }
    if ckpt.stage == 0 {
        return Err(Error::Pipeline("evaluation needs a stage 1 or stage 2 checkpoint".into()));
    }
    let (model, vocab) = model_from_checkpoint(ckpt, &ModelConfig::default())?;
    model.validate()?;
    let inf = Inference {
        store: &ckpt.params,
        enc: &model.enc,
        lm: &model.lm,
        vocab: &vocab,
    };
    let by_id: HashMap<&str, &ProteinRecord> = proteins.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut predictions = Vec::with_capacity(records.len());
    let mut gates: BTreeMap<usize, Vec<Mat>> = BTreeMap::new();
    for r in records {
        let protein = by_id.get(r.protein_id.as_str()).ok_or_else(|| {
            Error::rejected(format!("record {} names unknown protein {}", r.id, r.protein_id))
        })?;
        let prediction = if r.task_type == TaskType::ClosedSet && closed_answer(&r.answer).is_some() {
            inf.choose(r, protein, &CLOSED_CANDIDATES)?
        } else {
            inf.generate(r, protein, cfg.max_new_tokens)?
        };
        if ckpt.is_upcycled() {
            let embeds = inf.protein_embeds(protein)?;
            for (l, m) in gate_logits(&inf, r, &embeds)? {
                gates.entry(l).or_default().push(m);
            }
        }
        predictions.push(Prediction {
            id: r.id.clone(),
            task_type: r.task_type,
            prediction,
            gold: r.answer.clone(),
        });
    }
    let routing = gates
        .into_iter()
        .map(|(l, ms)| {
            let cols = ms[0].cols();
            let data: Vec<f64> = ms.iter().flat_map(|m| m.data().iter().copied()).collect();
            let all = Mat::from_vec(data.len() / cols, cols, data);
            (lm::layer_prefix(l).trim_end_matches('.').to_string(), moe::routing_stats(&all, model.lm.topk))
        })
        .collect();
    Ok(EvalReport {
        rows: score(&predictions, &cfg.metrics)?,
        routing,
        predictions,
    })
}
