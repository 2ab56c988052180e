//! Token and role vocabularies with reserved ids.
//!
//! Ids 0..=3 are PAD, UNK, BOS, EOS. Real tokens follow, most frequent
//! first, equal frequencies broken lexicographically so builds are
//! deterministic. The on-disk format is one `token<TAB>frequency` line per
//! id, preceded by a 4-line reserved-token header.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
    roles: Vec<String>,
    role_index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from a token stream plus the closed role set.
    /// `max_size` caps the total size including the 4 reserved ids.
    pub fn build<'a>(
        tokens: impl Iterator<Item = &'a str>,
        roles: &[String],
        min_freq: u64,
        max_size: usize,
    ) -> Self {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(RESERVED_TOKENS.len());
        ranked.truncate(keep);

        let mut vocab = Vocabulary {
            tokens: RESERVED_TOKENS.iter().map(|s| s.to_string()).collect(),
            freqs: vec![0; RESERVED_TOKENS.len()],
            index: HashMap::new(),
            roles: Vec::new(),
            role_index: HashMap::new(),
        };
        for (t, c) in ranked {
            vocab.tokens.push(t.to_string());
            vocab.freqs.push(c);
        }
        vocab.rebuild_indexes();
        vocab.set_roles(roles.to_vec());
        vocab
    }

    pub fn from_corpus(corpus: &super::Corpus, min_freq: u64, max_size: usize) -> Self {
        let roles = corpus.role_set();
        Vocabulary::build(
            corpus.iter().flat_map(|c| c.all_tokens()),
            &roles,
            min_freq,
            max_size,
        )
    }

    fn rebuild_indexes(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn set_roles(&mut self, roles: Vec<String>) {
        self.role_index = roles
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
        self.roles = roles;
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Token id, UNK for out-of-vocabulary tokens.
    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token_of(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn roles(&self) -> &[String] {
        &self.roles
    }

    pub fn role_count(&self) -> usize {
        self.roles.len()
    }

    pub fn role_id(&self, role: &str) -> Option<usize> {
        self.role_index.get(role).copied()
    }

    pub fn role_of(&self, id: usize) -> &str {
        &self.roles[id]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = String::new();
        for (t, f) in self.tokens.iter().zip(&self.freqs) {
            buf.push_str(t);
            buf.push('\t');
            buf.push_str(&f.to_string());
            buf.push('\n');
        }
        crate::cli::write_atomic(path, buf.as_bytes())
    }

    /// Loads the token table. Roles are not part of the file format; attach
    /// them afterwards from the corpus or a checkpoint via `set_roles`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open vocab {}: {}", path.display(), e)))?;
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, freq) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!(
                    "{}: line {}: expected token<TAB>frequency",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let freq: u64 = freq.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: line {}: bad frequency {:?}",
                    path.display(),
                    lineno + 1,
                    freq
                ))
            })?;
            tokens.push(tok.to_string());
            freqs.push(freq);
        }
        for (i, expected) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(|s| s.as_str()) != Some(*expected) {
                return Err(Error::Data(format!(
                    "{}: reserved-token header malformed at line {}",
                    path.display(),
                    i + 1
                )));
            }
        }
        let mut vocab = Vocabulary {
            tokens,
            freqs,
            index: HashMap::new(),
            roles: Vec::new(),
            role_index: HashMap::new(),
        };
        vocab.rebuild_indexes();
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_stream(pairs: &[(&str, usize)]) -> Vec<String> {
        let mut out = Vec::new();
        for &(t, n) in pairs {
            for _ in 0..n {
                out.push(t.to_string());
            }
        }
        out
    }

    #[test]
    fn min_freq_filters() {
        let stream = count_stream(&[("a", 3), ("b", 1)]);
        let v = Vocabulary::build(stream.iter().map(|s| s.as_str()), &[], 2, 50);
        assert_eq!(v.size(), 5);
        assert_eq!(v.token_of(4), "a");
        assert_eq!(v.id_of("b"), UNK_ID);
    }

    #[test]
    fn cap_below_first_token_keeps_only_reserved() {
        let stream = count_stream(&[("a", 3), ("b", 1)]);
        let v = Vocabulary::build(stream.iter().map(|s| s.as_str()), &[], 1, 4);
        assert_eq!(v.size(), 4);
    }

    #[test]
    fn empty_stream_is_reserved_only() {
        let v = Vocabulary::build(std::iter::empty(), &[], 1, 100);
        assert_eq!(v.size(), 4);
        assert_eq!(v.token_of(PAD_ID), "<pad>");
        assert_eq!(v.token_of(EOS_ID), "<eos>");
    }

    #[test]
    fn equal_frequencies_break_lexicographically() {
        let stream = count_stream(&[("zeta", 2), ("beta", 2), ("alpha", 2)]);
        let v = Vocabulary::build(stream.iter().map(|s| s.as_str()), &[], 1, 100);
        assert_eq!(v.token_of(4), "alpha");
        assert_eq!(v.token_of(5), "beta");
        assert_eq!(v.token_of(6), "zeta");
    }

    #[test]
    fn save_load_round_trip() {
        let stream = count_stream(&[("a", 3), ("b", 2)]);
        let v = Vocabulary::build(stream.iter().map(|s| s.as_str()), &[], 1, 100);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.size(), v.size());
        assert_eq!(loaded.id_of("a"), v.id_of("a"));
        assert_eq!(loaded.id_of("b"), v.id_of("b"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<pad>\t0\n<unk>\t0\n<bos>\t0\n<eos>\t0\n"));
    }
}
