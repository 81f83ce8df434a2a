//! Alpha-carbon extraction from fixed-column PDB `ATOM` records.

use std::collections::HashMap;

use crate::data::ProteinRecord;
use crate::error::{Error, Result};
use crate::geometry::CoordinateSet;

/// Alpha carbons of the first chain of the first model, ordered by residue
/// sequence number.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaChain {
    pub residues: String,
    pub coords: Vec<[f64; 3]>,
    pub res_seq: Vec<i32>,
}

impl CaChain {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coordinate_set(&self) -> Option<CoordinateSet> {
        CoordinateSet::new(self.coords.clone()).ok()
    }
}

pub fn three_to_one(name: &str) -> char {
    match name {
        "ALA" => 'A',
        "CYS" => 'C',
        "ASP" => 'D',
        "GLU" => 'E',
        "PHE" => 'F',
        "GLY" => 'G',
        "HIS" => 'H',
        "ILE" => 'I',
        "LYS" => 'K',
        "LEU" => 'L',
        "MET" => 'M',
        "ASN" => 'N',
        "PRO" => 'P',
        "GLN" => 'Q',
        "ARG" => 'R',
        "SER" => 'S',
        "THR" => 'T',
        "VAL" => 'V',
        "TRP" => 'W',
        "TYR" => 'Y',
        "ASX" => 'B',
        "GLX" => 'Z',
        "SEC" => 'U',
        "PYL" => 'O',
        _ => 'X',
    }
}

pub fn one_to_three(c: char) -> &'static str {
    match c {
        'A' => "ALA",
        'C' => "CYS",
        'D' => "ASP",
        'E' => "GLU",
        'F' => "PHE",
        'G' => "GLY",
        'H' => "HIS",
        'I' => "ILE",
        'K' => "LYS",
        'L' => "LEU",
        'M' => "MET",
        'N' => "ASN",
        'P' => "PRO",
        'Q' => "GLN",
        'R' => "ARG",
        'S' => "SER",
        'T' => "THR",
        'V' => "VAL",
        'W' => "TRP",
        'Y' => "TYR",
        'B' => "ASX",
        'Z' => "GLX",
        'U' => "SEC",
        'O' => "PYL",
        _ => "UNK",
    }
}

/// 1-based inclusive column range, or `None` when the line is too short.
fn columns(line: &str, from: usize, to: usize) -> Option<&str> {
    line.get(from - 1..to.min(line.len()))
        .filter(|_| line.len() >= from)
}

fn coordinate(line: &str, line_no: usize, from: usize, axis: char) -> Result<f64> {
    let field = columns(line, from, from + 7)
        .filter(|f| f.len() == 8)
        .ok_or_else(|| Error::parse(line_no, format!("{axis} coordinate field truncated")))?;
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(line_no, format!("{axis} coordinate '{}' unparsable", field.trim())))?;
    if !v.is_finite() {
        return Err(Error::parse(line_no, format!("{axis} coordinate not finite")));
    }
    Ok(v)
}

/// Reads CA atoms (columns 13-16) with blank or `A` alternate location from
/// the first model; coordinates come from columns 31-38, 39-46 and 47-54.
pub fn parse_pdb_ca(text: &str) -> Result<CaChain> {
    let mut atoms: Vec<(i32, char, char, [f64; 3])> = Vec::new();
    let mut chain: Option<char> = None;
    let mut other_chains = false;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        if columns(line, 13, 16).map(str::trim) != Some("CA") {
            continue;
        }
        let altloc = line.get(16..17).and_then(|s| s.chars().next()).unwrap_or(' ');
        if altloc != ' ' && altloc != 'A' {
            continue;
        }
        let chain_id = line.get(21..22).and_then(|s| s.chars().next()).unwrap_or(' ');
        match chain {
            None => chain = Some(chain_id),
            Some(c) if c != chain_id => {
                other_chains = true;
                continue;
            }
            _ => {}
        }
        let res_name = columns(line, 18, 20).unwrap_or("").trim();
        let res_seq: i32 = columns(line, 23, 26)
            .map(str::trim)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(line_no, "residue sequence number unparsable"))?;
        let icode = line.get(26..27).and_then(|s| s.chars().next()).unwrap_or(' ');
        let xyz = [
            coordinate(line, line_no, 31, 'x')?,
            coordinate(line, line_no, 39, 'y')?,
            coordinate(line, line_no, 47, 'z')?,
        ];
        atoms.push((res_seq, icode, three_to_one(res_name), xyz));
    }
    if other_chains {
        log::warn!("PDB input has several chains; kept chain {:?} only", chain.unwrap_or(' '));
    }
    if atoms.is_empty() {
        log::warn!("PDB input contains no usable CA atoms");
    }
    atoms.sort_by_key(|a| (a.0, a.1));
    Ok(CaChain {
        residues: atoms.iter().map(|a| a.2).collect(),
        coords: atoms.iter().map(|a| a.3).collect(),
        res_seq: atoms.iter().map(|a| a.0).collect(),
    })
}

/// Writes one CA `ATOM` record per residue in chain A, then `END`.
pub fn write_pdb_ca(sequence: &str, coords: &CoordinateSet) -> String {
    let mut out = String::new();
    for (i, (c, p)) in sequence.chars().zip(coords.points()).enumerate() {
        out.push_str(&format!(
            "ATOM  {:>5}  CA  {:>3} A{:>4}    {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}           C\n",
            i + 1,
            one_to_three(c),
            i + 1,
            p[0],
            p[1],
            p[2],
            1.0,
            0.0
        ));
    }
    out.push_str("END\n");
    out
}

/// Attaches coordinates by id. A chain whose length differs from the
/// sequence is dropped with a warning and the record stays sequence-only.
pub fn attach_structures(proteins: &mut [ProteinRecord], chains: &HashMap<String, CaChain>) {
    for p in proteins.iter_mut() {
        let Some(chain) = chains.get(&p.id) else {
            continue;
        };
        if chain.len() != p.len() {
            log::warn!(
                "protein {}: structure has {} residues, sequence {}; using sequence only",
                p.id,
                chain.len(),
                p.len()
            );
            continue;
        }
        p.coords = chain.coordinate_set();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CA_LINE: &str =
        "ATOM      2  CA  MET A   1      11.104   6.134   2.155  1.00 17.34           C";

    #[test]
    fn single_ca_line() {
        let c = parse_pdb_ca(CA_LINE).unwrap();
        assert_eq!(c.coords, vec![[11.104, 6.134, 2.155]]);
        assert_eq!(c.residues, "M");
    }

    #[test]
    fn non_ca_atoms_give_empty_chain() {
        let text = "ATOM      1  N   MET A   1      11.000   6.000   2.000  1.00 17.34           N\n\
                    ATOM      3  C   MET A   1      12.000   6.000   2.000  1.00 17.34           C\n";
        let c = parse_pdb_ca(text).unwrap();
        assert!(c.is_empty());
        assert!(c.coordinate_set().is_none());
    }

    #[test]
    fn only_first_model_is_read() {
        let mut text = String::from("MODEL        1\n");
        for i in 1..=3 {
            text.push_str(&format!(
                "ATOM  {i:>5}  CA  GLY A{i:>4}    {:>8.3}{:>8.3}{:>8.3}  1.00  0.00           C\n",
                i as f64, 0.0, 0.0
            ));
        }
        text.push_str("ENDMDL\nMODEL        2\n");
        for i in 1..=5 {
            text.push_str(&format!(
                "ATOM  {i:>5}  CA  GLY A{i:>4}    {:>8.3}{:>8.3}{:>8.3}  1.00  0.00           C\n",
                -(i as f64), 0.0, 0.0
            ));
        }
        text.push_str("ENDMDL\n");
        let c = parse_pdb_ca(&text).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.coords.iter().all(|p| p[0] > 0.0));
    }

    #[test]
    fn altloc_and_ordering() {
        let text = "\
ATOM      9  CA  ALA A   3       3.000   0.000   0.000  1.00  0.00           C
ATOM      5  CA AGLY A   2       2.000   0.000   0.000  0.50  0.00           C
ATOM      6  CA BGLY A   2       9.000   0.000   0.000  0.50  0.00           C
ATOM      1  CA  CYS A   1       1.000   0.000   0.000  1.00  0.00           C
";
        let c = parse_pdb_ca(text).unwrap();
        assert_eq!(c.residues, "CGA");
        assert_eq!(c.res_seq, vec![1, 2, 3]);
        assert_eq!(c.coords[1][0], 2.0);
    }

    #[test]
    fn bad_coordinate_reports_line() {
        let text = format!("HEADER x\n{}", CA_LINE.replace("  6.134", "  6.1a4"));
        assert!(matches!(parse_pdb_ca(&text), Err(Error::Parse { line: 2, .. })));
        let short = &CA_LINE[..50];
        assert!(matches!(parse_pdb_ca(short), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn writer_round_trips() {
        let coords = CoordinateSet::new(vec![[1.5, -2.25, 3.0], [-10.125, 0.5, 99.999]]).unwrap();
        let text = write_pdb_ca("AW", &coords);
        let c = parse_pdb_ca(&text).unwrap();
        assert_eq!(c.residues, "AW");
        assert_eq!(c.coords, coords.points().to_vec());
    }

    #[test]
    fn mismatched_structure_is_dropped() {
        let mut proteins = vec![ProteinRecord::new("a", "AC"), ProteinRecord::new("b", "ACD")];
        let chain = parse_pdb_ca(&write_pdb_ca(
            "AC",
            &CoordinateSet::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap(),
        ))
        .unwrap();
        let map: HashMap<String, CaChain> =
            [("a".to_string(), chain.clone()), ("b".to_string(), chain)].into();
        attach_structures(&mut proteins, &map);
        assert!(proteins[0].coords.is_some());
        assert!(proteins[1].coords.is_none());
    }
}
