//! Inverted index with BM25 scoring over whole-conversation documents.

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const DEFAULT_POOL: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Posting {
    pub id: String,
    pub tf: usize,
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<Posting>>,
    doc_len: HashMap<String, usize>,
    avgdl: f64,
    n_docs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub id: String,
    pub score: f64,
}

/// Documents are whole conversations flattened to token bags.
pub fn build_index(corpus: &Corpus) -> Result<InvertedIndex> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot index an empty corpus".into()));
    }
    build_from_docs(corpus.iter().map(|c| (c.id.as_str(), c.all_tokens())))
}

/// Index over a chosen subset of conversations (e.g. the train split only).
pub fn build_index_filtered<'a>(
    corpus: &'a Corpus,
    keep: impl Fn(&str) -> bool + 'a,
) -> Result<InvertedIndex> {
    let docs: Vec<_> = corpus.iter().filter(|c| keep(&c.id)).collect();
    if docs.is_empty() {
        return Err(Error::Data("no documents survive the index filter".into()));
    }
    build_from_docs(docs.iter().map(|c| (c.id.as_str(), c.all_tokens())))
}

fn build_from_docs<'a>(
    docs: impl Iterator<Item = (&'a str, impl Iterator<Item = &'a str>)>,
) -> Result<InvertedIndex> {
    let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
    let mut doc_len = HashMap::new();
    let mut total_len = 0usize;
    let mut n_docs = 0usize;
    for (id, tokens) in docs {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut dl = 0usize;
        for t in tokens {
            *counts.entry(t).or_default() += 1;
            dl += 1;
        }
        for (tok, tf) in counts {
            postings.entry(tok.to_string()).or_default().push(Posting {
                id: id.to_string(),
                tf,
            });
        }
        doc_len.insert(id.to_string(), dl);
        total_len += dl;
        n_docs += 1;
    }
    for list in postings.values_mut() {
        list.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(InvertedIndex {
        postings,
        doc_len,
        avgdl: total_len as f64 / n_docs as f64,
        n_docs,
    })
}

impl InvertedIndex {
    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn df(&self, token: &str) -> usize {
        self.postings.get(token).map_or(0, |l| l.len())
    }

    pub fn tf(&self, token: &str, id: &str) -> usize {
        self.postings.get(token).map_or(0, |l| {
            l.binary_search_by(|p| p.id.as_str().cmp(id))
                .map(|i| l[i].tf)
                .unwrap_or(0)
        })
    }

    pub fn doc_len(&self, id: &str) -> Option<usize> {
        self.doc_len.get(id).copied()
    }

    pub fn contains_doc(&self, id: &str) -> bool {
        self.doc_len.contains_key(id)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.doc_len.keys().map(|s| s.as_str())
    }

    /// idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)); always positive.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df(token) as f64;
        (1.0 + (self.n_docs as f64 - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 over unique query terms, ties broken by ascending id, at most
    /// `pool` results. An empty or fully out-of-vocabulary query yields an
    /// empty list.
    pub fn candidates<'q>(
        &self,
        query_tokens: impl IntoIterator<Item = &'q str>,
        pool: usize,
    ) -> Vec<ScoredDoc> {
        let mut unique: Vec<&str> = query_tokens.into_iter().collect();
        unique.sort_unstable();
        unique.dedup();
        let mut scores: HashMap<&str, f64> = HashMap::new();
        for term in unique {
            let list = match self.postings.get(term) {
                Some(l) => l,
                None => continue,
            };
            let idf = self.idf(term);
            for p in list {
                let dl = self.doc_len[&p.id] as f64;
                let tf = p.tf as f64;
                let denom = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avgdl);
                *scores.entry(p.id.as_str()).or_default() += idf * tf * (BM25_K1 + 1.0) / denom;
            }
        }
        let mut ranked: Vec<ScoredDoc> = scores
            .into_iter()
            .map(|(id, score)| ScoredDoc {
                id: id.to_string(),
                score,
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.id.cmp(&b.id))
        });
        ranked.truncate(pool);
        ranked
    }

    /// Serializes the index as JSON with all entries sorted, so identical
    /// indexes produce identical bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut doc_len: Vec<(&str, usize)> = self
            .doc_len
            .iter()
            .map(|(id, &l)| (id.as_str(), l))
            .collect();
        doc_len.sort_unstable();
        let mut postings: Vec<(&str, Vec<(&str, usize)>)> = self
            .postings
            .iter()
            .map(|(tok, list)| {
                (
                    tok.as_str(),
                    list.iter().map(|p| (p.id.as_str(), p.tf)).collect(),
                )
            })
            .collect();
        postings.sort_unstable_by_key(|(tok, _)| *tok);
        let file = IndexFile {
            n_docs: self.n_docs,
            avgdl: self.avgdl,
            doc_len,
            postings,
        };
        let bytes = serde_json::to_vec(&file)
            .map_err(|e| Error::Data(format!("index serialize: {e}")))?;
        crate::cli::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot open index {}: {e}", path.display())))?;
        let file: OwnedIndexFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{}: bad index file: {e}", path.display())))?;
        if file.n_docs == 0 || file.doc_len.len() != file.n_docs {
            return Err(Error::Data(format!(
                "{}: document table does not match n_docs",
                path.display()
            )));
        }
        let doc_len: HashMap<String, usize> = file.doc_len.into_iter().collect();
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        for (tok, list) in file.postings {
            let entries: Vec<Posting> = list
                .into_iter()
                .map(|(id, tf)| Posting { id, tf })
                .collect();
            for w in entries.windows(2) {
                if w[0].id >= w[1].id {
                    return Err(Error::Data(format!(
                        "{}: postings for {tok:?} not sorted by id",
                        path.display()
                    )));
                }
            }
            for p in &entries {
                if !doc_len.contains_key(&p.id) {
                    return Err(Error::Data(format!(
                        "{}: posting for unknown document {:?}",
                        path.display(),
                        p.id
                    )));
                }
            }
            postings.insert(tok, entries);
        }
        Ok(InvertedIndex {
            postings,
            doc_len,
            avgdl: file.avgdl,
            n_docs: file.n_docs,
        })
    }
}

#[derive(Serialize)]
struct IndexFile<'a> {
    n_docs: usize,
    avgdl: f64,
    doc_len: Vec<(&'a str, usize)>,
    postings: Vec<(&'a str, Vec<(&'a str, usize)>)>,
}

#[derive(Deserialize)]
struct OwnedIndexFile {
    n_docs: usize,
    avgdl: f64,
    doc_len: Vec<(String, usize)>,
    postings: Vec<(String, Vec<(String, usize)>)>,
}
