//! FASTA reading and writing.

use crate::data::tokenizer::is_residue;
use crate::data::ProteinRecord;
use crate::error::{Error, Result};

const LINE_WIDTH: usize = 60;

/// Parses FASTA text. Ids are the first whitespace-delimited header token;
/// sequence lines are concatenated and uppercased.
pub fn parse_fasta(text: &str) -> Result<Vec<ProteinRecord>> {
    let mut out: Vec<ProteinRecord> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let id = header
                .split_whitespace()
                .next()
                .ok_or_else(|| Error::parse(line_no, "empty FASTA header"))?;
            out.push(ProteinRecord::new(id, String::new()));
            continue;
        }
        let rec = out
            .last_mut()
            .ok_or_else(|| Error::parse(line_no, "sequence data before first header"))?;
        for (col, c) in line.chars().enumerate() {
            if c.is_whitespace() {
                continue;
            }
            if !is_residue(c) {
                return Err(Error::parse(
                    line_no,
                    format!(
                        "record {}: character '{c}' at column {} is not a residue code",
                        rec.id,
                        col + 1
                    ),
                ));
            }
            rec.sequence.push(c.to_ascii_uppercase());
        }
    }
    Ok(out)
}

/// Canonical FASTA: `>id` headers and sequence lines wrapped at 60 columns.
pub fn serialize_fasta(records: &[ProteinRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push('>');
        out.push_str(&r.id);
        out.push('\n');
        let chars: Vec<char> = r.sequence.chars().collect();
        for chunk in chars.chunks(LINE_WIDTH) {
            out.extend(chunk);
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenizer::CANONICAL_RESIDUES;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concatenates_lines() {
        let r = parse_fasta(">p1 some description\nACDE\nfg\n").unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].id, "p1");
        assert_eq!(r[0].sequence, "ACDEFG");
        assert!(parse_fasta("").unwrap().is_empty());
    }

    #[test]
    fn bad_residue_reports_line() {
        let err = parse_fasta(">a\nACD\n>b\nAC1D\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_fasta("ACD\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn round_trip_fifty_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let alphabet: Vec<char> = CANONICAL_RESIDUES.chars().collect();
        let records: Vec<ProteinRecord> = (0..50)
            .map(|i| {
                let len = rng.random_range(1..150);
                let seq: String = (0..len)
                    .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                    .collect();
                ProteinRecord::new(format!("prot{i}"), seq)
            })
            .collect();
        let text = serialize_fasta(&records);
        let parsed = parse_fasta(&text).unwrap();
        assert_eq!(parsed, records);
        assert_eq!(serialize_fasta(&parsed), text);

        let messy = text.to_lowercase().replace('\n', "\n\n");
        let canon = serialize_fasta(&parse_fasta(&messy).unwrap());
        assert_eq!(canon.to_uppercase(), text.to_uppercase());
    }
}
