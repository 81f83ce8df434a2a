//! Protein and text tokenization.

use std::collections::HashMap;

/// Fixed protein vocabulary: five specials, the 20 canonical residues, then
/// the ambiguous/rare codes X, B, Z, U, O.
pub const PROTEIN_TOKENS: [&str; 30] = [
    "<pad>", "<mask>", "<bos>", "<eos>", "<unk>", "A", "C", "D", "E", "F", "G", "H", "I", "K", "L",
    "M", "N", "P", "Q", "R", "S", "T", "V", "W", "Y", "X", "B", "Z", "U", "O",
];

pub const PROTEIN_PAD: usize = 0;
pub const PROTEIN_MASK: usize = 1;
pub const PROTEIN_BOS: usize = 2;
pub const PROTEIN_EOS: usize = 3;
pub const PROTEIN_UNK: usize = 4;
/// Ids of the 20 canonical residues are `CANONICAL_START..CANONICAL_START + 20`.
pub const CANONICAL_START: usize = 5;
pub const CANONICAL_RESIDUES: &str = "ACDEFGHIKLMNPQRSTVWY";

pub fn protein_vocab_size() -> usize {
    PROTEIN_TOKENS.len()
}

/// Id of a residue letter (case-insensitive), if it is in the vocabulary.
pub fn residue_id(c: char) -> Option<usize> {
    let up = c.to_ascii_uppercase();
    PROTEIN_TOKENS[CANONICAL_START..]
        .iter()
        .position(|t| t.len() == 1 && t.starts_with(up))
        .map(|p| p + CANONICAL_START)
}

pub fn is_residue(c: char) -> bool {
    residue_id(c).is_some()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Specials {
    pub bos: bool,
    pub eos: bool,
}

impl Specials {
    pub const NONE: Specials = Specials {
        bos: false,
        eos: false,
    };
    pub const BOTH: Specials = Specials {
        bos: true,
        eos: true,
    };
}

/// Maps a residue string to ids; unknown letters become `<unk>`.
pub fn tokenize_protein(seq: &str, specials: Specials) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len() + 2);
    if specials.bos {
        out.push(PROTEIN_BOS);
    }
    out.extend(seq.chars().map(|c| residue_id(c).unwrap_or(PROTEIN_UNK)));
    if specials.eos {
        out.push(PROTEIN_EOS);
    }
    out
}

/// Lowercases and splits on whitespace; every other non-alphanumeric
/// character becomes a token of its own, except a `.` between two
/// alphanumerics, which stays inside the word (`2.5`, `3.1.1.4`).
pub fn split_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let inner_dot = c == '.'
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if inner_dot {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn is_punct(tok: &str) -> bool {
    tok.chars().all(|c| !c.is_alphanumeric())
}

/// Joins word tokens with single spaces, attaching punctuation to the
/// preceding token.
pub fn join_words<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !is_punct(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Canonical text form: `join_words(split_words(text))`.
pub fn normalize_text(text: &str) -> String {
    join_words(&split_words(text))
}

pub const TEXT_PAD: usize = 0;
pub const TEXT_UNK: usize = 1;
pub const TEXT_BOS: usize = 2;
pub const TEXT_EOS: usize = 3;
const TEXT_SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Word-level vocabulary built from a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TextVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TextVocab {
    /// Vocabulary of the specials followed by corpus words in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = TEXT_SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for text in texts {
            for w in split_words(text) {
                if !index.contains_key(&w) {
                    index.insert(w.clone(), tokens.len());
                    tokens.push(w);
                }
            }
        }
        Self { tokens, index }
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(TEXT_UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str, specials: Specials) -> Vec<usize> {
        let mut out = Vec::new();
        if specials.bos {
            out.push(TEXT_BOS);
        }
        out.extend(split_words(text).iter().map(|w| self.id(w)));
        if specials.eos {
            out.push(TEXT_EOS);
        }
        out
    }

    /// Drops specials and joins the remaining words.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i >= TEXT_SPECIALS.len())
            .map(|&i| self.token(i))
            .collect();
        join_words(&words)
    }
}

/// Tokenization mode for [`tokenize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Protein,
    Text,
}

/// Protein mode ignores `vocab`; text mode requires it.
pub fn tokenize(
    input: &str,
    mode: TokenMode,
    vocab: Option<&TextVocab>,
    specials: Specials,
) -> Vec<usize> {
    match mode {
        TokenMode::Protein => tokenize_protein(input, specials),
        TokenMode::Text => match vocab {
            Some(v) => v.encode(input, specials),
            None => TextVocab::build(std::iter::empty()).encode(input, specials),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn protein_ids_follow_table() {
        assert_eq!(tokenize_protein("ACD", Specials::NONE), vec![5, 6, 7]);
        assert_eq!(
            tokenize_protein("ay", Specials::BOTH),
            vec![PROTEIN_BOS, 5, 24, PROTEIN_EOS]
        );
        assert_eq!(residue_id('X'), Some(25));
        assert_eq!(residue_id('O'), Some(29));
        assert_eq!(residue_id('J'), None);
        assert_eq!(protein_vocab_size(), 30);
    }

    #[test]
    fn yes_splits_off_period() {
        assert_eq!(split_words("Yes."), vec!["yes", "."]);
        assert_eq!(split_words("pH 7.5. Done"), vec!["ph", "7.5", ".", "done"]);
        assert_eq!(split_words("a..b .c"), vec!["a", ".", ".", "b", ".", "c"]);
        assert_eq!(
            split_words("Does EC term \"3.1.1\" apply?"),
            vec!["does", "ec", "term", "\"", "3.1.1", "\"", "apply", "?"]
        );
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = TextVocab::build(["the cat sat"]);
        assert_eq!(v.encode("the dog", Specials::NONE), vec![4, TEXT_UNK]);
        assert_eq!(v.decode(&[TEXT_BOS, 4, 5, TEXT_EOS]), "the cat");
    }

    proptest! {
        #[test]
        fn detokenize_round_trip(text in "[A-Za-z0-9 .,;()\"-]{0,60}") {
            let vocab = TextVocab::build([text.as_str()]);
            let ids = vocab.encode(&text, Specials::NONE);
            prop_assert_eq!(vocab.decode(&ids), normalize_text(&text));
            prop_assert_eq!(split_words(&normalize_text(&text)), split_words(&text));
        }
    }
}
