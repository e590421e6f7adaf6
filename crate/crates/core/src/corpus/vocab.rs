use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{tokenize, Dialogue};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Dense token/id bijection with the four specials at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from a token list that must start with the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Format(format!(
                "vocabulary must begin with {}",
                SPECIALS.join(", ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary entry {t:?} at line {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
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

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Unknown ids decode to `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_file_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Vocab> {
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::parse(&text)
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_text().as_bytes()))
    }
}

/// Specials first, then corpus tokens by descending count (ties lexicographic),
/// keeping at most `max_size` entries in total.
pub fn build_vocab(dialogues: &[Dialogue], max_size: usize) -> Vocab {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for d in dialogues {
        for u in &d.utterances {
            for t in tokenize(u) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    for s in SPECIALS {
        counts.remove(s);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = max_size.saturating_sub(SPECIALS.len());
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(room).map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens).expect("specials are well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dialogue(lines: &[&str]) -> Dialogue {
        Dialogue {
            utterances: lines.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn three_tokens_give_seven_entries() {
        let v = build_vocab(&[dialogue(&["x y", "z x"])], 13500);
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(4), Some("x"));
        assert_eq!(v.id("never"), UNK);
    }

    #[test]
    fn ties_break_lexicographically_and_size_is_capped() {
        let v = build_vocab(&[dialogue(&["b a", "c"])], 6);
        assert_eq!(v.tokens()[4..], ["a".to_string(), "b".to_string()]);
        assert_eq!(v.id("c"), UNK);
    }

    #[test]
    fn top_token_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let words = ["alpha", "beta", "gamma", "delta", "eps"];
        let mut lines = Vec::new();
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let line: Vec<&str> = (0..n).map(|_| words[rng.random_range(0..words.len())]).collect();
            lines.push(line.join(" "));
        }
        let mut oracle = HashMap::new();
        for l in &lines {
            for w in l.split(' ') {
                *oracle.entry(w).or_insert(0usize) += 1;
            }
        }
        let best = words
            .iter()
            .max_by(|a, b| oracle.get(*a).cmp(&oracle.get(*b)).then(b.cmp(a)))
            .unwrap();
        let d = Dialogue { utterances: lines };
        assert_eq!(build_vocab(&[d], 100).token(4), Some(*best));
    }

    #[test]
    fn encode_decode_identity_and_file_round_trip() {
        let v = build_vocab(&[dialogue(&["hello there .", "general kenobi !"])], 100);
        let toks: Vec<String> = v.tokens()[4..].to_vec();
        assert_eq!(v.decode(&v.encode(&toks)), toks);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let back = Vocab::load(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert_eq!(v.hash().len(), 64);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(matches!(Vocab::parse("a\nb\n"), Err(Error::Format(_))));
        assert!(matches!(
            Vocab::parse("<pad>\n<bos>\n<eos>\n<unk>\nx\nx\n"),
            Err(Error::Format(_))
        ));
    }
}
