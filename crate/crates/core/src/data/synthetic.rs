//! Deterministic toy corpus: proteins grouped into families whose sequences
//! carry family-specific residues and whose annotations are fixed per family.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::fasta::serialize_fasta;
use crate::data::instructions::{annotations_tsv, build_instructions, AnnotationRow, TemplateSet};
use crate::data::pdb::write_pdb_ca;
use crate::data::tokenizer::CANONICAL_RESIDUES;
use crate::data::{InstructionRecord, ProteinRecord};
use crate::error::{Error, Result};
use crate::geometry::CoordinateSet;

pub const CATEGORY_FUNCTION: &str = "Function";
pub const CATEGORY_LOCATION: &str = "Subcellular location";
pub const CATEGORY_EC: &str = "EC";

const ACTIONS: [&str; 4] = ["Hydrolyzes", "Transports", "Binds", "Modifies"];
const SUBSTRATES: [&str; 8] = [
    "ester bonds",
    "peptide chains",
    "sugar polymers",
    "phosphate groups",
    "lipid tails",
    "nucleotide strands",
    "metal ions",
    "amino groups",
];
const PROCESSES: [&str; 4] = ["cell growth", "stress response", "energy storage", "signal relay"];
const COMPARTMENTS: [&str; 8] = [
    "cytoplasm",
    "nucleus",
    "mitochondrion",
    "cell membrane",
    "extracellular space",
    "golgi apparatus",
    "chloroplast",
    "lysosome",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub proteins: usize,
    pub families: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of proteins given coordinates.
    pub structure_fraction: f64,
    /// Probability that a position draws one of its family's signature residues.
    pub signature_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            proteins: 128,
            families: 8,
            min_len: 20,
            max_len: 36,
            structure_fraction: 0.75,
            signature_rate: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Family {
    pub signature: [char; 2],
    pub function: String,
    pub location: String,
    pub ec: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub families: Vec<Family>,
    pub proteins: Vec<ProteinRecord>,
    /// Family index of each protein.
    pub family_of: Vec<usize>,
    pub annotations: Vec<AnnotationRow>,
}

fn family(f: usize) -> Family {
    let residues: Vec<char> = CANONICAL_RESIDUES.chars().collect();
    Family {
        signature: [residues[2 * f], residues[2 * f + 1]],
        function: format!(
            "{} {} during {}.",
            ACTIONS[f % ACTIONS.len()],
            SUBSTRATES[f % SUBSTRATES.len()],
            PROCESSES[(f / 2) % PROCESSES.len()]
        ),
        location: format!("Located in the {}.", COMPARTMENTS[f % COMPARTMENTS.len()]),
        ec: format!("{}.{}.1.{}", 1 + f % 6, 1 + f % 3, f + 1),
    }
}

/// Helix (even families) or extended strand (odd families) alpha-carbon
/// trace with small Gaussian jitter and a random offset.
fn backbone(n: usize, helix: bool, rng: &mut impl Rng) -> CoordinateSet {
    let jitter = Normal::new(0.0, 0.1).expect("valid normal");
    let offset = [
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
    ];
    let pts = (0..n)
        .map(|i| {
            let t = i as f64;
            let base = if helix {
                let a = t * 100f64.to_radians();
                [2.3 * a.cos(), 2.3 * a.sin(), 1.5 * t]
            } else {
                [3.3 * t, if i % 2 == 0 { 0.9 } else { -0.9 }, 0.0]
            };
            [
                base[0] + offset[0] + jitter.sample(rng),
                base[1] + offset[1] + jitter.sample(rng),
                base[2] + offset[2] + jitter.sample(rng),
            ]
        })
        .collect();
    CoordinateSet::new(pts).expect("finite synthetic coordinates")
}

impl SyntheticCorpus {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        let max_families = CANONICAL_RESIDUES.len() / 2 - 1;
        if cfg.families == 0 || cfg.families > max_families {
            return Err(Error::config(format!(
                "synthetic corpus supports 1..={max_families} families"
            )));
        }
        if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
            return Err(Error::config("synthetic lengths need 1 <= min_len <= max_len"));
        }
        let families: Vec<Family> = (0..cfg.families).map(family).collect();
        let background: Vec<char> = CANONICAL_RESIDUES
            .chars()
            .skip(2 * cfg.families)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut proteins = Vec::with_capacity(cfg.proteins);
        let mut family_of = Vec::with_capacity(cfg.proteins);
        let mut annotations = Vec::with_capacity(3 * cfg.proteins);
        for i in 0..cfg.proteins {
            let f = i % cfg.families;
            let fam = &families[f];
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let sequence: String = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < cfg.signature_rate {
                        fam.signature[rng.random_range(0..2)]
                    } else {
                        background[rng.random_range(0..background.len())]
                    }
                })
                .collect();
            let mut rec = ProteinRecord::new(format!("syn{i:04}"), sequence);
            if rng.random::<f64>() < cfg.structure_fraction {
                rec.coords = Some(backbone(len, f.is_multiple_of(2), &mut rng));
            }
            for (category, value) in [
                (CATEGORY_FUNCTION, &fam.function),
                (CATEGORY_LOCATION, &fam.location),
                (CATEGORY_EC, &fam.ec),
            ] {
                annotations.push(AnnotationRow {
                    protein_id: rec.id.clone(),
                    category: category.to_string(),
                    value: value.clone(),
                });
            }
            proteins.push(rec);
            family_of.push(f);
        }
        Ok(Self {
            families,
            proteins,
            family_of,
            annotations,
        })
    }

    pub fn instructions(&self, seed: u64) -> Result<Vec<InstructionRecord>> {
        build_instructions(&self.annotations, &TemplateSet::standard(), seed)
    }

    /// Function and location sentences of a protein, used as its text caption.
    pub fn caption(&self, protein: usize) -> String {
        let fam = &self.families[self.family_of[protein]];
        format!("{} {}", fam.function, fam.location)
    }

    /// Writes `proteins.fasta`, `annotations.tsv` and `structures/<id>.pdb`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("structures"))?;
        fs::write(dir.join("proteins.fasta"), serialize_fasta(&self.proteins))?;
        fs::write(dir.join("annotations.tsv"), annotations_tsv(&self.annotations))?;
        for p in &self.proteins {
            if let Some(c) = &p.coords {
                fs::write(
                    dir.join("structures").join(format!("{}.pdb", p.id)),
                    write_pdb_ca(&p.sequence, c),
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskType;

    #[test]
    fn default_corpus_shape() {
        let c = SyntheticCorpus::generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(c.proteins.len(), 128);
        let inst = c.instructions(0).unwrap();
        assert_eq!(inst.len(), 512);
        let closed = inst.iter().filter(|r| r.task_type == TaskType::ClosedSet).count();
        assert_eq!(closed, 256);
        let with_coords = c.proteins.iter().filter(|p| p.coords.is_some()).count();
        assert!((80..=112).contains(&with_coords));
        for p in &c.proteins {
            p.validate().unwrap();
            assert!((20..=36).contains(&p.len()));
        }
    }

    #[test]
    fn family_texts_are_distinct() {
        let c = SyntheticCorpus::generate(&SyntheticConfig::default()).unwrap();
        for a in 0..c.families.len() {
            for b in a + 1..c.families.len() {
                assert_ne!(c.families[a].function, c.families[b].function);
                assert_ne!(c.families[a].location, c.families[b].location);
                assert_ne!(c.families[a].ec, c.families[b].ec);
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig::default();
        assert_eq!(
            SyntheticCorpus::generate(&cfg).unwrap(),
            SyntheticCorpus::generate(&cfg).unwrap()
        );
    }
}
