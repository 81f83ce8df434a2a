//! Protein and instruction data: parsers, builders, splits, tokenization.

pub mod fasta;
pub mod instructions;
pub mod pdb;
pub mod synthetic;
pub mod tokenizer;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CoordinateSet;

pub use fasta::{parse_fasta, serialize_fasta};
pub use instructions::{
    build_instructions, parse_annotations, read_jsonl, split_dataset, stats_csv, to_jsonl,
    AnnotationRow, TemplateSet,
};
pub use pdb::{attach_structures, parse_pdb_ca, write_pdb_ca, CaChain};
pub use tokenizer::{tokenize, Specials, TextVocab, TokenMode};

pub const PROTEIN_PLACEHOLDER: &str = "<protein>";

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinRecord {
    pub id: String,
    pub sequence: String,
    pub coords: Option<CoordinateSet>,
}

impl ProteinRecord {
    pub fn new(id: impl Into<String>, sequence: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            sequence: sequence.into(),
            coords: None,
        }
    }

    pub fn len(&self) -> usize {
        self.sequence.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.sequence.chars().find(|c| !tokenizer::is_residue(*c)) {
            return Err(Error::rejected(format!(
                "protein {}: residue '{c}' not in vocabulary",
                self.id
            )));
        }
        if let Some(coords) = &self.coords {
            if coords.len() != self.len() {
                return Err(Error::rejected(format!(
                    "protein {}: {} coordinates for {} residues",
                    self.id,
                    coords.len(),
                    self.len()
                )));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> Vec<usize> {
        tokenizer::tokenize_protein(&self.sequence, Specials::NONE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    OpenEnded,
    ClosedSet,
}

impl TaskType {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::OpenEnded => "open_ended",
            TaskType::ClosedSet => "closed_set",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub protein_id: String,
    pub task_type: TaskType,
    pub category: String,
    pub question: String,
    pub answer: String,
}

impl InstructionRecord {
    /// Text before and after the single `<protein>` placeholder.
    pub fn split_question(&self) -> Result<(&str, &str)> {
        let count = self.question.matches(PROTEIN_PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::rejected(format!(
                "instruction {}: expected one {PROTEIN_PLACEHOLDER} placeholder, found {count}",
                self.id
            )));
        }
        let at = self.question.find(PROTEIN_PLACEHOLDER).expect("counted above");
        Ok((
            &self.question[..at],
            &self.question[at + PROTEIN_PLACEHOLDER.len()..],
        ))
    }

    pub fn validate(&self) -> Result<()> {
        self.split_question()?;
        if self.task_type == TaskType::ClosedSet && closed_answer(&self.answer).is_none() {
            return Err(Error::rejected(format!(
                "instruction {}: closed-set answer '{}' is not Yes./No.",
                self.id, self.answer
            )));
        }
        Ok(())
    }
}

/// Trims, lowercases and drops one trailing period.
pub fn normalize_answer(s: &str) -> String {
    let t = s.trim().to_lowercase();
    t.strip_suffix('.').unwrap_or(&t).trim_end().to_string()
}

/// `Some(true)` for yes, `Some(false)` for no, after normalization.
pub fn closed_answer(s: &str) -> Option<bool> {
    match normalize_answer(s).as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Reads a FASTA file and attaches CA coordinates from `<id>.pdb` files in
/// `pdb_dir`, when given.
pub fn load_proteins(fasta_path: &Path, pdb_dir: Option<&Path>) -> Result<Vec<ProteinRecord>> {
    let mut proteins = parse_fasta(&fs::read_to_string(fasta_path)?)?;
    if let Some(dir) = pdb_dir {
        let mut chains = HashMap::new();
        for p in &proteins {
            let path = dir.join(format!("{}.pdb", p.id));
            if path.is_file() {
                chains.insert(p.id.clone(), parse_pdb_ca(&fs::read_to_string(&path)?)?);
            }
        }
        attach_structures(&mut proteins, &chains);
    }
    Ok(proteins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(question: &str, task_type: TaskType, answer: &str) -> InstructionRecord {
        InstructionRecord {
            id: "r".into(),
            protein_id: "p".into(),
            task_type,
            category: "EC".into(),
            question: question.into(),
            answer: answer.into(),
        }
    }

    #[test]
    fn placeholder_count_enforced() {
        let ok = rec("What is <protein>?", TaskType::OpenEnded, "x");
        assert_eq!(ok.split_question().unwrap(), ("What is ", "?"));
        assert!(rec("What?", TaskType::OpenEnded, "x").validate().is_err());
        assert!(rec("<protein> <protein>", TaskType::OpenEnded, "x")
            .validate()
            .is_err());
    }

    #[test]
    fn closed_answers_normalize() {
        assert!(rec("<protein>?", TaskType::ClosedSet, " yes ").validate().is_ok());
        assert!(rec("<protein>?", TaskType::ClosedSet, "Maybe.").validate().is_err());
        assert_eq!(closed_answer("No."), Some(false));
    }

    #[test]
    fn json_keys() {
        let r = rec("<protein>?", TaskType::ClosedSet, "Yes.");
        let j = serde_json::to_string(&r).unwrap();
        assert_eq!(
            j,
            r#"{"id":"r","protein_id":"p","task_type":"closed_set","category":"EC","question":"<protein>?","answer":"Yes."}"#
        );
    }

    #[test]
    fn coordinate_count_must_match() {
        let mut p = ProteinRecord::new("a", "ACD");
        assert!(p.validate().is_ok());
        p.coords = Some(CoordinateSet::new(vec![[0.0; 3]]).unwrap());
        assert!(p.validate().is_err());
        assert!(ProteinRecord::new("b", "AJ").validate().is_err());
    }
}
