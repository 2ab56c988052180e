//! Similar-conversation retrieval: a BM25 candidate pass over an inverted
//! index, then a cosine reranker, cached per example.
//!
//! Queries are built from context turns only. The query's own conversation
//! is always excluded, so a cached neighbor list can never leak the turn
//! the model is asked to produce.

mod index;
mod rerank;

pub use index::{build_index, build_index_filtered, InvertedIndex, Posting, ScoredDoc};
pub use index::{BM25_B, BM25_K1, DEFAULT_POOL};
pub use rerank::{
    embed_tokens, embedding_cosine, rerank, tfidf_cosine, Neighbor, Reranker, SimilarSet,
    EMBED_DIM,
};

use crate::cli::write_atomic;
use crate::corpus::{Conversation, Corpus, TrainingExample};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::BufRead;
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct RetrievalConfig {
    pub pool: usize,
    pub k: usize,
    pub reranker: Reranker,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            pool: DEFAULT_POOL,
            k: 3,
            reranker: Reranker::TfidfCosine,
        }
    }
}

/// Retrieves the top-k similar conversations for one example. The query is
/// the concatenated context tokens; the gold turn contributes nothing.
pub fn retrieve_similar(
    index: &InvertedIndex,
    retrieval_corpus: &Corpus,
    example: &TrainingExample,
    conv: &Conversation,
    cfg: &RetrievalConfig,
) -> SimilarSet {
    let query: Vec<&str> = example
        .context(conv)
        .iter()
        .flat_map(|u| u.tokens.iter().map(String::as_str))
        .collect();
    let candidates = index.candidates(query.iter().copied(), cfg.pool);
    let (neighbors, short) = rerank(
        index,
        retrieval_corpus,
        &query,
        &candidates,
        Some(conv.id.as_str()),
        cfg.reranker,
        cfg.k,
    );
    SimilarSet {
        example_id: example.id(),
        neighbors,
        pool: cfg.pool,
        reranker: cfg.reranker.name().to_string(),
        short,
    }
}

/// Builds the full cache: one SimilarSet per example, in example order.
/// `full_corpus` supplies the query conversations (all splits);
/// `retrieval_corpus`/`index` are the train-side search space.
pub fn build_similar_cache(
    index: &InvertedIndex,
    retrieval_corpus: &Corpus,
    full_corpus: &Corpus,
    examples: &[TrainingExample],
    cfg: &RetrievalConfig,
) -> Result<Vec<SimilarSet>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let conv = full_corpus.get(&ex.conversation_id).ok_or_else(|| {
            Error::Data(format!(
                "example {} references missing conversation {}",
                ex.id(),
                ex.conversation_id
            ))
        })?;
        out.push(retrieve_similar(index, retrieval_corpus, ex, conv, cfg));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CacheNeighbor {
    id: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct CacheRow {
    example_id: String,
    neighbors: Vec<CacheNeighbor>,
}

/// Writes the cache as JSONL, one `{example_id, neighbors: [{id, score}]}`
/// object per line, atomically.
pub fn save_cache(path: &Path, sets: &[SimilarSet]) -> Result<()> {
    let mut buf = Vec::new();
    for s in sets {
        let row = CacheRow {
            example_id: s.example_id.clone(),
            neighbors: s
                .neighbors
                .iter()
                .map(|n| CacheNeighbor {
                    id: n.id.clone(),
                    score: n.score,
                })
                .collect(),
        };
        serde_json::to_writer(&mut buf, &row)
            .map_err(|e| Error::Data(format!("cache serialize: {e}")))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Reads a cache written by `save_cache`. File rows carry only ids and
/// scores, so the pool/reranker metadata of the returned sets is empty.
pub fn load_cache(path: &Path) -> Result<Vec<SimilarSet>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CacheRow = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: bad cache row: {e}", path.display(), lineno + 1))
        })?;
        out.push(SimilarSet {
            example_id: row.example_id,
            neighbors: row
                .neighbors
                .into_iter()
                .map(|n| Neighbor {
                    id: n.id,
                    score: n.score,
                })
                .collect(),
            pool: 0,
            reranker: String::new(),
            short: false,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_examples, synthesize, SynthConfig, Utterance};
    use crate::rng::Rng;

    fn synth(n: usize, seed: u64) -> Corpus {
        synthesize(&SynthConfig {
            n,
            seed,
            ..SynthConfig::default()
        })
    }

    #[test]
    fn self_conversation_never_retrieved() {
        let corpus = synth(120, 9);
        let index = build_index(&corpus).unwrap();
        let examples = make_examples(&corpus, "agent");
        let cfg = RetrievalConfig::default();
        let mut rng = Rng::new(42);
        for _ in 0..40 {
            let ex = &examples[rng.below(examples.len())];
            let conv = corpus.get(&ex.conversation_id).unwrap();
            let set = retrieve_similar(&index, &corpus, ex, conv, &cfg);
            assert!(set.neighbors.iter().all(|n| n.id != ex.conversation_id));
            assert!(set.neighbors.len() <= cfg.k);
        }
    }

    #[test]
    fn neighbors_sorted_descending_with_id_ties() {
        let corpus = synth(100, 5);
        let index = build_index(&corpus).unwrap();
        let examples = make_examples(&corpus, "agent");
        let cfg = RetrievalConfig::default();
        for ex in examples.iter().take(25) {
            let conv = corpus.get(&ex.conversation_id).unwrap();
            let set = retrieve_similar(&index, &corpus, ex, conv, &cfg);
            for w in set.neighbors.windows(2) {
                assert!(
                    w[0].score > w[1].score
                        || (w[0].score == w[1].score && w[0].id < w[1].id)
                );
            }
        }
    }

    #[test]
    fn gold_turn_does_not_influence_retrieval() {
        let corpus = synth(80, 13);
        let index = build_index(&corpus).unwrap();
        let examples = make_examples(&corpus, "agent");
        let cfg = RetrievalConfig::default();
        let ex = &examples[7];

        let base_conv = corpus.get(&ex.conversation_id).unwrap().clone();
        let baseline = retrieve_similar(&index, &corpus, ex, &base_conv, &cfg);

        // same index, same context, wildly different gold turn
        let mut perturbed = base_conv.clone();
        perturbed.turns[ex.turn_index] =
            Utterance::new("agent", "zebra xylophone quantum marmalade");
        let after = retrieve_similar(&index, &corpus, ex, &perturbed, &cfg);

        assert_eq!(baseline.neighbors, after.neighbors);
    }

    #[test]
    fn family_members_dominate_neighbors() {
        // synthetic families share a topic token unique to the family, so
        // for k=3 within a family of 5 every neighbor should be kin.
        let corpus = synth(200, 21);
        let index = build_index(&corpus).unwrap();
        let examples = make_examples(&corpus, "agent");
        let cfg = RetrievalConfig::default();
        let fam = |id: &str| -> usize {
            let n: usize = id.trim_start_matches('c').parse().unwrap();
            n / SynthConfig::default().family_size
        };
        let mut kin = 0usize;
        let mut total = 0usize;
        for ex in examples.iter().take(60) {
            let conv = corpus.get(&ex.conversation_id).unwrap();
            let set = retrieve_similar(&index, &corpus, ex, conv, &cfg);
            for n in &set.neighbors {
                total += 1;
                if fam(&n.id) == fam(&ex.conversation_id) {
                    kin += 1;
                }
            }
        }
        assert!(total > 0);
        assert!(kin as f64 / total as f64 > 0.9, "kin {kin}/{total}");
    }

    #[test]
    fn cache_round_trip_preserves_ids_and_scores() {
        let corpus = synth(50, 2);
        let index = build_index(&corpus).unwrap();
        let examples = make_examples(&corpus, "agent");
        let cfg = RetrievalConfig::default();
        let sets = build_similar_cache(&index, &corpus, &corpus, &examples, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("similar.jsonl");
        save_cache(&path, &sets).unwrap();
        let loaded = load_cache(&path).unwrap();

        assert_eq!(loaded.len(), sets.len());
        for (a, b) in sets.iter().zip(&loaded) {
            assert_eq!(a.example_id, b.example_id);
            assert_eq!(a.neighbors, b.neighbors);
        }
    }

    #[test]
    fn cache_rejects_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"example_id\": \"x#1\"\n").unwrap();
        let err = load_cache(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains(":1:"));
    }

    #[test]
    fn short_sets_flagged_when_search_space_is_tiny() {
        let corpus = synth(2, 7);
        let index = build_index(&corpus).unwrap();
        let examples = make_examples(&corpus, "agent");
        let cfg = RetrievalConfig::default(); // k = 3, only 1 other conversation
        let ex = &examples[0];
        let conv = corpus.get(&ex.conversation_id).unwrap();
        let set = retrieve_similar(&index, &corpus, ex, conv, &cfg);
        assert!(set.short);
        assert!(set.neighbors.len() < cfg.k);
    }

    #[test]
    fn train_only_index_keeps_dev_queries_working() {
        use crate::corpus::{split_of, Split};
        let corpus = synth(150, 4);
        let index = build_index_filtered(&corpus, |id| split_of(id) == Split::Train).unwrap();
        let examples = make_examples(&corpus, "agent");
        let cfg = RetrievalConfig::default();
        let mut checked = 0;
        for ex in &examples {
            if split_of(&ex.conversation_id) == Split::Train {
                continue;
            }
            let conv = corpus.get(&ex.conversation_id).unwrap();
            let set = retrieve_similar(&index, &corpus, ex, conv, &cfg);
            for n in &set.neighbors {
                assert_eq!(split_of(&n.id), Split::Train);
            }
            checked += 1;
        }
        assert!(checked > 5);
    }
}
