//! Instruction records: templates, builder, splits, JSONL and statistics.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{closed_answer, InstructionRecord, ProteinRecord, TaskType};
use crate::error::{Error, Result};

/// One line of an annotation table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRow {
    pub protein_id: String,
    pub category: String,
    pub value: String,
}

/// Parses `protein_id<TAB>category<TAB>value` lines. Blank lines and lines
/// starting with `#` are skipped, as is a leading `protein_id` header.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRow>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(line_no, "expected three tab-separated fields"));
        }
        if out.is_empty() && fields[0] == "protein_id" {
            continue;
        }
        let row = AnnotationRow {
            protein_id: fields[0].trim().to_string(),
            category: fields[1].trim().to_string(),
            value: fields[2].trim().to_string(),
        };
        if row.protein_id.is_empty() || row.category.is_empty() {
            return Err(Error::parse(line_no, "empty protein id or category"));
        }
        if row.value.is_empty() {
            return Err(Error::parse(line_no, "empty annotation value"));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn annotations_tsv(rows: &[AnnotationRow]) -> String {
    let mut out = String::from("protein_id\tcategory\tvalue\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\n", r.protein_id, r.category, r.value));
    }
    out
}

/// How a category turns annotation values into records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateKind {
    /// The value is the free-text answer.
    OpenEnded,
    /// The value is a label substituted for `slot`; each label yields a
    /// "Yes." record and a "No." record with another protein's label.
    ClosedLabel { slot: String },
    /// The value is `index:Yes` or `index:No`, selecting the question.
    ClosedIndexed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTemplates {
    pub kind: TemplateKind,
    pub questions: Vec<String>,
}

impl CategoryTemplates {
    pub fn task_type(&self) -> TaskType {
        match self.kind {
            TemplateKind::OpenEnded => TaskType::OpenEnded,
            _ => TaskType::ClosedSet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TemplateSet {
    pub categories: BTreeMap<String, CategoryTemplates>,
}

const OPEN_TEMPLATES: &[(&str, &[&str])] = &[
    (
        "Function",
        &[
            "What is the primary function of <protein>?",
            "What is the main function of <protein>?",
            "What is the function of <protein>?",
            "Explain the function of <protein>.",
            "What is the characteristic function associated with the protein <protein>?",
            "Can you define the function profile of the <protein>?",
            "Give me the function caption of <protein>.",
        ],
    ),
    (
        "Similarity",
        &[
            "Which protein family does <protein> belong to?",
            "What is the protein family of <protein>?",
            "What is the closest related protein family for <protein>?",
            "Can you identify the family or group that <protein> belongs to?",
            "To which protein family <protein> is classified?",
            "Which protein class does <protein> fall into?",
        ],
    ),
    (
        "Subcellular location",
        &[
            "Where is <protein> located in the cell?",
            "Can you specify the subcellular location of <protein>?",
            "What is the subcellular location of <protein>?",
            "Could you describe the subcellular location of <protein>?",
            "What are the primary subcellular regions where <protein> is detected?",
        ],
    ),
    (
        "Induction",
        &[
            "Description the effects of environmental factors of <protein>'s expression.",
            "What are the environmental factors that induce the expression of <protein>?",
            "What environmental factors causes the upregulation of <protein>?",
            "What are the environmental factors that lead to the upregulation of <protein>?",
        ],
    ),
    (
        "Molecular Function",
        &[
            "Which GO molecular function terms have <protein> been assigned to?",
            "What molecular function is associated with <protein>?",
            "Which GO terms outline the functional capabilities of <protein>?",
            "What are the molecular functions of <protein>?",
        ],
    ),
    (
        "Biological Process",
        &[
            "Which GO biological process terms have <protein> been assigned to?",
            "What biological process is associated with <protein>?",
            "Which GO terms outline the biological processes of <protein>?",
            "What biological processes is <protein> involved in, based on gene ontology annotations?",
            "What are the biological processes of <protein>?",
        ],
    ),
    (
        "Cellular Component",
        &[
            "Which GO cellular component terms have <protein> been assigned to?",
            "What cellular component is associated with <protein>?",
            "Which GO terms outline the cellular components of <protein>?",
            "What cellular components is <protein> involved in, based on gene ontology annotations?",
            "What are the cellular components of <protein>?",
        ],
    ),
    (
        "Developmental Stage",
        &[
            "At which specific developmental stages is <protein> expressed?",
            "What are the developmental stages where <protein> is expressed?",
            "What are the developmental stages where <protein> is detected?",
            "What are the developmental stages where <protein> is found?",
        ],
    ),
    (
        "Short Sequence Motif",
        &[
            "Can you identify and list all the motifs that are predicted to be present in <protein>?",
            "What are the short sequence motifs that are predicted to be present in <protein>?",
            "What are the short sequence motifs that are present in <protein>?",
            "What are the short sequence motifs that are found in <protein>?",
        ],
    ),
    (
        "Tissue Specificity",
        &[
            "In which tissues is the expression of <protein> absent?",
            "Describe the tissue-specific expression pattern of <protein>?",
            "What is the tissue-specific expression pattern of <protein>?",
            "What are the tissues where <protein> is expressed?",
        ],
    ),
    (
        "Activity Regulation",
        &[
            "Describe the activity regulatory mechanism of <protein> associated enzymes, transporters, microbial transcription factors.",
            "What is the activity regulatory mechanism of <protein>?",
            "Tell me about the activity regulatory mechanism of <protein>.",
        ],
    ),
    (
        "Pathway",
        &[
            "What is the role of <protein> in the metabolic pathway?",
            "Which metabolic pathway does <protein> associate with?",
            "What is the metabolic pathway that <protein> is involved in?",
        ],
    ),
    (
        "Caption",
        &[
            "Tell me about this protein <protein>.",
            "Give me some information about <protein>.",
            "Give me the abstract of <protein>.",
            "Give me a comprehensive description of <protein>.",
            "Tell me about <protein>.",
        ],
    ),
];

const OTHERS_TEMPLATES: &[&str] = &[
    "Does this protein contain non-polymer entities, <protein>?",
    "Does this protein contain polymer entities, <protein>?",
    "Does this protein contain DNA polymer entities, <protein>?",
    "Does this protein contain RNA polymer entities, <protein>?",
    "Does this protein contain solvent entities, <protein>?",
    "Does this protein contain branched entities, <protein>?",
    "Does this protein have unmodeled polymer monomers, <protein>?",
    "Does this protein have hybrid nucleic acid polymer entities, <protein>?",
    "Does this protein have cis-peptide linkages, <protein>?",
];

const LABEL_TEMPLATES: &[(&str, &str, &[&str])] = &[
    (
        "EC",
        "{EC}",
        &[
            "Does <protein> associate with enzyme classification \"{EC}\"?",
            "Does EC term \"{EC}\" outline the enzyme classifications of <protein>?",
            "Is <protein> involved in enzyme classification \"{EC}\"?",
        ],
    ),
    (
        "GO-BP",
        "{GO}",
        &[
            "Does <protein> associate with biological process \"{GO}\"?",
            "Does GO term \"{GO}\" outline the biological processes of <protein>?",
            "Is <protein> involved in biological process \"{GO}\"?",
        ],
    ),
    (
        "GO-CC",
        "{GO}",
        &[
            "Does <protein> associate with cellular component \"{GO}\"?",
            "Does GO term \"{GO}\" outline the cellular components of <protein>?",
            "Is <protein> involved in cellular component \"{GO}\"?",
        ],
    ),
    (
        "GO-MF",
        "{GO}",
        &[
            "Does <protein> associate with molecular function \"{GO}\"?",
            "Does GO term \"{GO}\" outline the functional capabilities of <protein>?",
            "Does <protein> have molecular function \"{GO}\"?",
        ],
    ),
];

fn owned(qs: &[&str]) -> Vec<String> {
    qs.iter().map(|q| q.to_string()).collect()
}

impl TemplateSet {
    /// Every open-ended and closed-set template category.
    pub fn standard() -> Self {
        let mut categories = BTreeMap::new();
        for (name, qs) in OPEN_TEMPLATES {
            categories.insert(
                name.to_string(),
                CategoryTemplates {
                    kind: TemplateKind::OpenEnded,
                    questions: owned(qs),
                },
            );
        }
        categories.insert(
            "Others".to_string(),
            CategoryTemplates {
                kind: TemplateKind::ClosedIndexed,
                questions: owned(OTHERS_TEMPLATES),
            },
        );
        for (name, slot, qs) in LABEL_TEMPLATES {
            categories.insert(
                name.to_string(),
                CategoryTemplates {
                    kind: TemplateKind::ClosedLabel {
                        slot: slot.to_string(),
                    },
                    questions: owned(qs),
                },
            );
        }
        Self { categories }
    }

    pub fn get(&self, category: &str) -> Result<&CategoryTemplates> {
        self.categories
            .get(category)
            .filter(|t| !t.questions.is_empty())
            .ok_or_else(|| Error::config(format!("no templates for category '{category}'")))
    }
}

fn slug(category: &str) -> String {
    category
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn pick<'a>(questions: &'a [String], rng: &mut impl Rng) -> &'a str {
    &questions[rng.random_range(0..questions.len())]
}

/// Builds one open-ended record per (protein, category), or a Yes/No pair per
/// label for label categories. Groups are processed in first-seen order and
/// every random choice draws from one generator seeded with `seed`.
pub fn build_instructions(
    rows: &[AnnotationRow],
    templates: &TemplateSet,
    seed: u64,
) -> Result<Vec<InstructionRecord>> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut values: HashMap<(String, String), Vec<String>> = HashMap::new();
    for r in rows {
        templates.get(&r.category)?;
        let key = (r.protein_id.clone(), r.category.clone());
        let entry = values.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        if !entry.contains(&r.value) {
            entry.push(r.value.clone());
        }
    }
    // Labels per category in first-seen order, for negative sampling.
    let mut pools: HashMap<&str, Vec<&str>> = HashMap::new();
    for key in &order {
        let pool = pools.entry(key.1.as_str()).or_default();
        for v in &values[key] {
            if !pool.contains(&v.as_str()) {
                pool.push(v);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for key in &order {
        let (protein, category) = key;
        let t = templates.get(category)?;
        let vals = &values[key];
        let push = |question: String, answer: String, out: &mut Vec<InstructionRecord>| {
            let n = out
                .iter()
                .filter(|r: &&InstructionRecord| &r.protein_id == protein && &r.category == category)
                .count();
            out.push(InstructionRecord {
                id: format!("{protein}/{}/{n}", slug(category)),
                protein_id: protein.clone(),
                task_type: t.task_type(),
                category: category.clone(),
                question,
                answer,
            });
        };
        match &t.kind {
            TemplateKind::OpenEnded => {
                let q = pick(&t.questions, &mut rng).to_string();
                push(q, vals.join("; "), &mut out);
            }
            TemplateKind::ClosedIndexed => {
                for v in vals {
                    let (idx, ans) = v.split_once(':').ok_or_else(|| {
                        Error::config(format!("{category} value '{v}' is not index:answer"))
                    })?;
                    let q = idx
                        .trim()
                        .parse::<usize>()
                        .ok()
                        .and_then(|i| t.questions.get(i))
                        .ok_or_else(|| {
                            Error::config(format!("{category} question index '{idx}' out of range"))
                        })?;
                    let yes = closed_answer(ans).ok_or_else(|| {
                        Error::config(format!("{category} answer '{ans}' is not Yes/No"))
                    })?;
                    push(q.clone(), yes_no(yes), &mut out);
                }
            }
            TemplateKind::ClosedLabel { slot } => {
                let own: HashSet<&str> = vals.iter().map(String::as_str).collect();
                let negatives: Vec<&str> = pools[category.as_str()]
                    .iter()
                    .copied()
                    .filter(|l| !own.contains(l))
                    .collect();
                for v in vals {
                    let q = pick(&t.questions, &mut rng).replace(slot.as_str(), v);
                    push(q, yes_no(true), &mut out);
                    if negatives.is_empty() {
                        log::warn!("{protein}/{category}: no negative label available");
                        continue;
                    }
                    let neg = negatives[rng.random_range(0..negatives.len())];
                    let q = pick(&t.questions, &mut rng).replace(slot.as_str(), neg);
                    push(q, yes_no(false), &mut out);
                }
            }
        }
    }
    Ok(out)
}

fn yes_no(yes: bool) -> String {
    if yes { "Yes." } else { "No." }.to_string()
}

/// Splits by protein: a seeded shuffle of the distinct protein ids sends
/// `round(test_fraction * proteins)` of them (at least one, at most all but
/// one) to the test side. Record order is preserved on both sides.
pub fn split_dataset(
    records: &[InstructionRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<InstructionRecord>, Vec<InstructionRecord>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut ids: Vec<&str> = Vec::new();
    for r in records {
        if !ids.contains(&r.protein_id.as_str()) {
            ids.push(&r.protein_id);
        }
    }
    if ids.len() < 2 {
        return Err(Error::rejected(format!(
            "cannot split {} protein(s) into train and test",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_test = ((test_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let test_ids: HashSet<&str> = ids[..n_test].iter().copied().collect();
    let (test, train): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .partition(|r| test_ids.contains(r.protein_id.as_str()));
    Ok((train, test))
}

pub fn to_jsonl(records: &[InstructionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    out
}

/// Reads one record per non-blank line and validates each.
pub fn read_jsonl(text: &str) -> Result<Vec<InstructionRecord>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: InstructionRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        r.validate()
            .map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `kind,key,count` table: records per task type and per category, then a
/// sequence-length histogram with bins of `bin_width` residues.
pub fn stats_csv(records: &[InstructionRecord], proteins: &[ProteinRecord], bin_width: usize) -> String {
    let bin_width = bin_width.max(1);
    let mut out = String::from("kind,key,count\n");
    let mut tasks: BTreeMap<&str, usize> = BTreeMap::new();
    let mut cats: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *tasks.entry(r.task_type.as_str()).or_default() += 1;
        *cats.entry(&r.category).or_default() += 1;
    }
    for (k, n) in tasks {
        out.push_str(&format!("task_type,{k},{n}\n"));
    }
    for (k, n) in cats {
        out.push_str(&format!("category,{},{n}\n", csv_field(k)));
    }
    let mut bins: BTreeMap<usize, usize> = BTreeMap::new();
    for p in proteins {
        *bins.entry(p.len() / bin_width).or_default() += 1;
    }
    for (b, n) in bins {
        out.push_str(&format!(
            "length,{}-{},{n}\n",
            b * bin_width,
            (b + 1) * bin_width - 1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: &str, c: &str, v: &str) -> AnnotationRow {
        AnnotationRow {
            protein_id: p.into(),
            category: c.into(),
            value: v.into(),
        }
    }

    #[test]
    fn function_uses_its_seven_templates() {
        let t = TemplateSet::standard();
        assert_eq!(t.get("Function").unwrap().questions.len(), 7);
        let rows = vec![row("p1", "Function", "Binds DNA.")];
        for seed in 0..20 {
            let r = build_instructions(&rows, &t, seed).unwrap();
            assert_eq!(r.len(), 1);
            assert!(t.categories["Function"].questions.contains(&r[0].question));
            assert_eq!(r[0].answer, "Binds DNA.");
            assert_eq!(r[0].task_type, TaskType::OpenEnded);
        }
    }

    #[test]
    fn every_template_has_one_placeholder() {
        for (name, c) in &TemplateSet::standard().categories {
            for q in &c.questions {
                assert_eq!(q.matches("<protein>").count(), 1, "{name}: {q}");
            }
        }
    }

    #[test]
    fn ec_pairs_are_balanced() {
        let rows: Vec<AnnotationRow> = (0..10)
            .map(|i| row(&format!("p{i}"), "EC", &format!("3.1.1.{}", i % 4)))
            .collect();
        let r = build_instructions(&rows, &TemplateSet::standard(), 3).unwrap();
        let yes = r.iter().filter(|x| x.answer == "Yes.").count();
        let no = r.iter().filter(|x| x.answer == "No.").count();
        assert!((yes as i64 - no as i64).abs() <= 1);
        for x in &r {
            x.validate().unwrap();
            assert!(!x.question.contains("{EC}"));
        }
        let p0_no = r.iter().find(|x| x.protein_id == "p0" && x.answer == "No.").unwrap();
        assert!(!p0_no.question.contains("\"3.1.1.0\""));
    }

    #[test]
    fn same_seed_same_records() {
        let rows = vec![
            row("a", "Function", "x"),
            row("b", "GO-BP", "transport"),
            row("a", "GO-BP", "repair"),
            row("c", "Others", "2:No"),
        ];
        let t = TemplateSet::standard();
        let a = build_instructions(&rows, &t, 9).unwrap();
        assert_eq!(a, build_instructions(&rows, &t, 9).unwrap());
        assert_eq!(a.last().unwrap().question, OTHERS_TEMPLATES[2]);
        assert_eq!(a.last().unwrap().answer, "No.");
    }

    #[test]
    fn unknown_category_is_config_error() {
        let rows = vec![row("a", "Mood", "happy")];
        assert!(matches!(
            build_instructions(&rows, &TemplateSet::standard(), 0),
            Err(Error::Config(_))
        ));
    }

    fn records(proteins: usize) -> Vec<InstructionRecord> {
        let rows: Vec<AnnotationRow> = (0..proteins)
            .flat_map(|i| {
                [
                    row(&format!("p{i}"), "Function", "f"),
                    row(&format!("p{i}"), "Pathway", "g"),
                ]
            })
            .collect();
        build_instructions(&rows, &TemplateSet::standard(), 0).unwrap()
    }

    #[test]
    fn split_by_protein() {
        let recs = records(10);
        let (train, test) = split_dataset(&recs, 0.2, 1).unwrap();
        let test_ids: HashSet<_> = test.iter().map(|r| r.protein_id.clone()).collect();
        assert_eq!(test_ids.len(), 2);
        assert_eq!(train.len() + test.len(), recs.len());
        assert_eq!(split_dataset(&recs, 0.2, 1).unwrap(), (train, test));
        assert!(split_dataset(&records(1), 0.5, 0).is_err());
        assert!(split_dataset(&recs, 1.0, 0).is_err());
    }

    #[test]
    fn splits_never_share_proteins() {
        let recs = records(12);
        for seed in 0..1000 {
            let (train, test) = split_dataset(&recs, 0.3, seed).unwrap();
            let a: HashSet<_> = train.iter().map(|r| &r.protein_id).collect();
            assert!(test.iter().all(|r| !a.contains(&r.protein_id)));
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let recs = records(3);
        assert_eq!(read_jsonl(&to_jsonl(&recs)).unwrap(), recs);
        let bad = format!("{}\n{{\"id\":1}}\n", to_jsonl(&recs[..1]).trim());
        assert!(matches!(read_jsonl(&bad), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn annotation_table() {
        let text = "protein_id\tcategory\tvalue\n# note\np1\tFunction\tBinds ATP.\n\np2\tEC\t1.1.1.1\n";
        let rows = parse_annotations(text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(parse_annotations(&annotations_tsv(&rows)).unwrap(), rows);
        assert!(matches!(
            parse_annotations("p1\tFunction\t \n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn stats_table() {
        let recs = records(2);
        let proteins = vec![ProteinRecord::new("p0", "ACDEF"), ProteinRecord::new("p1", "ACDEFGHIKLM")];
        let csv = stats_csv(&recs, &proteins, 10);
        assert!(csv.contains("task_type,open_ended,4\n"));
        assert!(csv.contains("category,Function,2\n"));
        assert!(csv.contains("length,0-9,1\n"));
        assert!(csv.contains("length,10-19,1\n"));
    }
}
