//! Candidate reranking: lexical tf-idf cosine and a deterministic
//! hashed-embedding cosine. Both score the query context against whole
//! candidate conversations.

use super::index::{InvertedIndex, ScoredDoc};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{fnv1a64, Rng};
use std::collections::BTreeMap;

pub const EMBED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reranker {
    TfidfCosine,
    EmbeddingCosine,
}

impl Reranker {
    pub fn name(&self) -> &'static str {
        match self {
            Reranker::TfidfCosine => "tfidf-cosine",
            Reranker::EmbeddingCosine => "embedding-cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tfidf-cosine" => Ok(Reranker::TfidfCosine),
            "embedding-cosine" => Ok(Reranker::EmbeddingCosine),
            other => Err(Error::Usage(format!(
                "unknown reranker {other:?} (expected tfidf-cosine or embedding-cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub score: f64,
}

/// Ranked similar conversations for one example. The query conversation
/// itself never appears. `short` flags that fewer than the requested k
/// survived exclusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarSet {
    pub example_id: String,
    pub neighbors: Vec<Neighbor>,
    pub pool: usize,
    pub reranker: String,
    pub short: bool,
}

// Ordered maps keep summation order (and so rounding) deterministic; the
// scores land in a cache file that reruns must reproduce byte for byte.
fn counts<'a>(tokens: impl IntoIterator<Item = &'a str>) -> BTreeMap<&'a str, f64> {
    let mut m: BTreeMap<&str, f64> = BTreeMap::new();
    for t in tokens {
        *m.entry(t).or_default() += 1.0;
    }
    m
}

fn cosine(a: &BTreeMap<&str, f64>, b: &BTreeMap<&str, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(k, va)| b.get(k).map(|vb| va * vb))
        .sum();
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// tf-idf cosine between two token bags, idf taken from the index.
pub fn tfidf_cosine<'a>(
    index: &InvertedIndex,
    query: impl IntoIterator<Item = &'a str>,
    doc: impl IntoIterator<Item = &'a str>,
) -> f64 {
    let mut q = counts(query);
    let mut d = counts(doc);
    for (tok, v) in q.iter_mut() {
        *v *= index.idf(tok);
    }
    for (tok, v) in d.iter_mut() {
        *v *= index.idf(tok);
    }
    cosine(&q, &d)
}

/// Deterministic pseudo-embedding: each token hashes (FNV-1a) to a seed for
/// its own generator stream, which emits a fixed dense vector. A text embeds
/// as the mean of its token vectors. This stands in for a pretrained
/// sentence encoder without any model dependency: same pipeline shape,
/// deterministic scores.
pub fn embed_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Matrix {
    let mut sum = Matrix::zeros(1, EMBED_DIM);
    let mut n = 0usize;
    for t in tokens {
        let mut rng = Rng::new(fnv1a64(t.as_bytes()));
        for c in 0..EMBED_DIM {
            let cur = sum.get(0, c);
            sum.set(0, c, cur + rng.uniform(-1.0, 1.0));
        }
        n += 1;
    }
    if n > 0 {
        sum = sum.scale(1.0 / n as f64);
    }
    sum
}

pub fn embedding_cosine<'a>(
    query: impl IntoIterator<Item = &'a str>,
    doc: impl IntoIterator<Item = &'a str>,
) -> f64 {
    dense_cosine(&embed_tokens(query), &embed_tokens(doc))
}

fn dense_cosine(a: &Matrix, b: &Matrix) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Scores the candidates against the query context, drops `exclude_id`,
/// and keeps the top k (ties by ascending id). Returns fewer than k with
/// `short = true` when the pool runs out.
pub fn rerank(
    index: &InvertedIndex,
    corpus: &Corpus,
    query_tokens: &[&str],
    candidates: &[ScoredDoc],
    exclude_id: Option<&str>,
    method: Reranker,
    k: usize,
) -> (Vec<Neighbor>, bool) {
    let q_embed = match method {
        Reranker::EmbeddingCosine => Some(embed_tokens(query_tokens.iter().copied())),
        Reranker::TfidfCosine => None,
    };
    let mut scored: Vec<Neighbor> = candidates
        .iter()
        .filter(|c| Some(c.id.as_str()) != exclude_id)
        .map(|c| {
            let conv = corpus
                .get(&c.id)
                .unwrap_or_else(|| panic!("candidate {} missing from corpus", c.id));
            let score = match method {
                Reranker::TfidfCosine => {
                    tfidf_cosine(index, query_tokens.iter().copied(), conv.all_tokens())
                }
                Reranker::EmbeddingCosine => {
                    dense_cosine(q_embed.as_ref().unwrap(), &embed_tokens(conv.all_tokens()))
                }
            };
            Neighbor {
                id: c.id.clone(),
                score,
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.id.cmp(&b.id))
    });
    let short = scored.len() < k;
    scored.truncate(k);
    (scored, short)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Conversation, Utterance};
    use crate::retrieval::index::build_index;

    fn conv(id: &str, turns: &[&str]) -> Conversation {
        Conversation {
            id: id.to_string(),
            turns: turns.iter().map(|t| Utterance::new("x", *t)).collect(),
        }
    }

    fn scored(ids: &[&str]) -> Vec<ScoredDoc> {
        ids.iter()
            .map(|id| ScoredDoc {
                id: id.to_string(),
                score: 1.0,
            })
            .collect()
    }

    #[test]
    fn identical_bag_scores_one_and_ranks_first() {
        let mut corpus = Corpus::new();
        corpus.push(conv("target", &["alpha beta", "ignored gold"])).unwrap();
        corpus.push(conv("twin", &["alpha", "beta"])).unwrap();
        corpus.push(conv("other", &["alpha gamma", "delta"])).unwrap();
        let idx = build_index(&corpus).unwrap();
        let query = ["alpha", "beta"];
        let (got, short) = rerank(
            &idx,
            &corpus,
            &query,
            &scored(&["twin", "other"]),
            Some("target"),
            Reranker::TfidfCosine,
            2,
        );
        assert!(!short);
        assert_eq!(got[0].id, "twin");
        assert!((got[0].score - 1.0).abs() < 1e-12);
        assert!(got[1].score < 1.0);
    }

    #[test]
    fn disjoint_vocabulary_scores_zero() {
        let mut corpus = Corpus::new();
        corpus.push(conv("a", &["one two", "three"])).unwrap();
        corpus.push(conv("b", &["four", "five six"])).unwrap();
        let idx = build_index(&corpus).unwrap();
        let (got, _) = rerank(
            &idx,
            &corpus,
            &["one", "two"],
            &scored(&["b"]),
            None,
            Reranker::TfidfCosine,
            1,
        );
        assert_eq!(got[0].score, 0.0);
    }

    #[test]
    fn ordering_matches_dense_cosine_oracle() {
        let mut corpus = Corpus::new();
        corpus.push(conv("q", &["a b c", "d"])).unwrap();
        corpus.push(conv("c1", &["a b", "c"])).unwrap();
        corpus.push(conv("c2", &["a a", "b"])).unwrap();
        corpus.push(conv("c3", &["c c", "d d"])).unwrap();
        corpus.push(conv("c4", &["a b c", "d e"])).unwrap();
        corpus.push(conv("c5", &["e e", "f"])).unwrap();
        let idx = build_index(&corpus).unwrap();
        let query = ["a", "b", "c"];
        let cand_ids = ["c1", "c2", "c3", "c4", "c5"];
        let (got, _) = rerank(
            &idx,
            &corpus,
            &query,
            &scored(&cand_ids),
            None,
            Reranker::TfidfCosine,
            5,
        );

        // dense oracle: explicit vocabulary axes, full vectors
        let vocab = ["a", "b", "c", "d", "e", "f"];
        let dense = |tokens: Vec<&str>| -> Vec<f64> {
            vocab
                .iter()
                .map(|v| {
                    let tf = tokens.iter().filter(|t| *t == v).count() as f64;
                    tf * idx.idf(v)
                })
                .collect()
        };
        let qv = dense(query.to_vec());
        let mut oracle: Vec<(String, f64)> = cand_ids
            .iter()
            .map(|id| {
                let dv = dense(corpus.get(id).unwrap().all_tokens().collect());
                let dot: f64 = qv.iter().zip(&dv).map(|(x, y)| x * y).sum();
                let nq = qv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nd = dv.iter().map(|x| x * x).sum::<f64>().sqrt();
                (id.to_string(), dot / (nq * nd))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));

        for (n, (oid, oscore)) in got.iter().zip(&oracle) {
            assert_eq!(&n.id, oid);
            assert!((n.score - oscore).abs() < 1e-12);
        }
    }

    #[test]
    fn short_pool_flags_and_returns_all() {
        let mut corpus = Corpus::new();
        corpus.push(conv("only", &["a", "b"])).unwrap();
        corpus.push(conv("me", &["a", "c"])).unwrap();
        let idx = build_index(&corpus).unwrap();
        let (got, short) = rerank(
            &idx,
            &corpus,
            &["a"],
            &scored(&["only", "me"]),
            Some("me"),
            Reranker::TfidfCosine,
            3,
        );
        assert!(short);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id, "only");
    }

    #[test]
    fn embedding_reranker_is_deterministic_and_self_similar() {
        let tokens = ["hello", "world", "hello"];
        let a = embed_tokens(tokens.iter().copied());
        let b = embed_tokens(tokens.iter().copied());
        assert_eq!(a.data(), b.data());
        let s = embedding_cosine(tokens.iter().copied(), tokens.iter().copied());
        assert!((s - 1.0).abs() < 1e-12);
        // different token sets give a different (generic) score
        let t = embedding_cosine(["hello", "world"], ["goodbye", "moon"]);
        assert!(t < 0.999);
    }

    #[test]
    fn embedding_reranker_prefers_shared_content() {
        let mut corpus = Corpus::new();
        corpus.push(conv("near", &["red apple orchard", "harvest"])).unwrap();
        corpus.push(conv("far", &["quantum flux capacitor", "warp"])).unwrap();
        let idx = build_index(&corpus).unwrap();
        let (got, _) = rerank(
            &idx,
            &corpus,
            &["red", "apple", "harvest"],
            &scored(&["near", "far"]),
            None,
            Reranker::EmbeddingCosine,
            2,
        );
        assert_eq!(got[0].id, "near");
        assert!(got[0].score > got[1].score);
    }

    #[test]
    fn reranker_names_round_trip() {
        for m in [Reranker::TfidfCosine, Reranker::EmbeddingCosine] {
            assert_eq!(Reranker::parse(m.name()).unwrap(), m);
        }
        assert!(Reranker::parse("roberta").is_err());
    }
}
