//! Training-example extraction and id encoding.
//!
//! One example per target-role turn with a nonempty context: the context is
//! every strictly earlier turn, the gold is the turn itself.

use super::{Conversation, Corpus, Utterance, Vocabulary, BOS_ID, EOS_ID};
use crate::error::{Error, Result};

/// A (conversation, turn) pair whose turn the model learns to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub conversation_id: String,
    /// 0-based index of the gold turn; always >= 1.
    pub turn_index: usize,
    pub target_role: String,
}

impl TrainingExample {
    /// Stable id used to key retrieval caches and generation outputs.
    pub fn id(&self) -> String {
        format!("{}#{}", self.conversation_id, self.turn_index)
    }

    pub fn context<'a>(&self, conv: &'a Conversation) -> &'a [Utterance] {
        &conv.turns[..self.turn_index]
    }

    pub fn gold<'a>(&self, conv: &'a Conversation) -> &'a Utterance {
        &conv.turns[self.turn_index]
    }
}

/// Enumerates examples for `target_role` over the whole corpus.
/// A target-role turn in first position yields nothing: the context
/// would be empty.
pub fn make_examples(corpus: &Corpus, target_role: &str) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for conv in corpus.iter() {
        for (idx, turn) in conv.turns.iter().enumerate() {
            if idx >= 1 && turn.role == target_role {
                out.push(TrainingExample {
                    conversation_id: conv.id.clone(),
                    turn_index: idx,
                    target_role: target_role.to_string(),
                });
            }
        }
    }
    out
}

/// One encoded turn: a role id plus parallel token ids and surface forms.
/// Surfaces survive encoding so the copy mechanism can emit
/// out-of-vocabulary words.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTurn {
    pub role: usize,
    pub ids: Vec<usize>,
    pub words: Vec<String>,
}

/// A teacher-forcing-ready example: encoded context turns plus the gold
/// turn framed as BOS ... EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub example_id: String,
    pub conversation_id: String,
    pub context: Vec<EncodedTurn>,
    /// Gold token ids framed [BOS, w1.., EOS]; `gold_words` holds the
    /// unframed surfaces.
    pub gold_ids: Vec<usize>,
    pub gold_words: Vec<String>,
    pub target_role: usize,
}

/// Truncation limits applied during encoding. Over-long utterances keep
/// their first `max_utt_tokens` tokens; over-long contexts drop oldest
/// turns first.
#[derive(Debug, Clone, Copy)]
pub struct Truncation {
    pub max_utt_tokens: usize,
    pub max_context_turns: usize,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation {
            max_utt_tokens: 30,
            max_context_turns: 20,
        }
    }
}

pub fn encode_turn(turn: &Utterance, vocab: &Vocabulary, max_tokens: usize) -> Result<EncodedTurn> {
    let role = vocab.role_id(&turn.role).ok_or_else(|| {
        Error::Data(format!("unknown role {:?} (roles are closed-world)", turn.role))
    })?;
    let words: Vec<String> = turn.tokens.iter().take(max_tokens).cloned().collect();
    let ids = words.iter().map(|w| vocab.id_of(w)).collect();
    Ok(EncodedTurn { role, ids, words })
}

/// Encodes a training example against the vocabulary. Every context token
/// maps to an id (UNK for misses); the gold is framed BOS ... EOS.
pub fn encode_example(
    example: &TrainingExample,
    conv: &Conversation,
    vocab: &Vocabulary,
    trunc: Truncation,
) -> Result<EncodedExample> {
    let context_turns = example.context(conv);
    let start = context_turns.len().saturating_sub(trunc.max_context_turns);
    let context = context_turns[start..]
        .iter()
        .map(|t| encode_turn(t, vocab, trunc.max_utt_tokens))
        .collect::<Result<Vec<_>>>()?;

    let gold = example.gold(conv);
    let target_role = vocab.role_id(&gold.role).ok_or_else(|| {
        Error::Data(format!("unknown role {:?} (roles are closed-world)", gold.role))
    })?;
    let gold_words: Vec<String> = gold.tokens.iter().take(trunc.max_utt_tokens).cloned().collect();
    let mut gold_ids = Vec::with_capacity(gold_words.len() + 2);
    gold_ids.push(BOS_ID);
    gold_ids.extend(gold_words.iter().map(|w| vocab.id_of(w)));
    gold_ids.push(EOS_ID);

    Ok(EncodedExample {
        example_id: example.id(),
        conversation_id: example.conversation_id.clone(),
        context,
        gold_ids,
        gold_words,
        target_role,
    })
}

/// Decodes ids back to tokens; OOV positions come back as `<unk>`.
pub fn decode_ids(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter().map(|&i| vocab.token_of(i).to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize, SynthConfig, UNK_ID};

    fn toy_corpus() -> Corpus {
        let mut corpus = Corpus::new();
        corpus
            .push(Conversation {
                id: "c1".into(),
                turns: vec![
                    Utterance::new("plaintiff", "we claim damages"),
                    Utterance::new("judge", "any objection"),
                    Utterance::new("plaintiff", "no objection"),
                    Utterance::new("judge", "fine"),
                ],
            })
            .unwrap();
        corpus
    }

    fn toy_vocab(corpus: &Corpus) -> Vocabulary {
        Vocabulary::from_corpus(corpus, 1, 1000)
    }

    #[test]
    fn examples_enumerated_for_target_role() {
        let corpus = toy_corpus();
        let examples = make_examples(&corpus, "judge");
        assert_eq!(examples.len(), 2);
        let conv = corpus.get("c1").unwrap();
        assert_eq!(examples[0].context(conv).len(), 1);
        assert_eq!(examples[1].context(conv).len(), 3);
    }

    #[test]
    fn absent_role_yields_nothing() {
        let corpus = toy_corpus();
        assert!(make_examples(&corpus, "defendant").is_empty());
    }

    #[test]
    fn first_turn_target_role_skipped() {
        let corpus = toy_corpus();
        // plaintiff speaks first: only the later plaintiff turn qualifies.
        let examples = make_examples(&corpus, "plaintiff");
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].turn_index, 2);
    }

    #[test]
    fn encode_repeats_role_per_token_and_frames_gold() {
        let corpus = toy_corpus();
        let vocab = toy_vocab(&corpus);
        let conv = corpus.get("c1").unwrap();
        let examples = make_examples(&corpus, "judge");
        let enc = encode_example(&examples[1], conv, &vocab, Truncation::default()).unwrap();
        assert_eq!(enc.context.len(), 3);
        let turn = &enc.context[1];
        assert_eq!(turn.ids.len(), 2);
        assert_eq!(turn.role, vocab.role_id("judge").unwrap());
        assert_eq!(enc.gold_ids[0], BOS_ID);
        assert_eq!(*enc.gold_ids.last().unwrap(), EOS_ID);
        assert_eq!(enc.gold_ids.len(), 3); // BOS fine EOS
        assert_eq!(enc.gold_ids[1], vocab.id_of("fine"));
    }

    #[test]
    fn oov_maps_to_unk() {
        let corpus = toy_corpus();
        let stream = ["objection".to_string()];
        let vocab = Vocabulary::build(
            stream.iter().map(|s| s.as_str()),
            &corpus.role_set(),
            1,
            100,
        );
        let conv = corpus.get("c1").unwrap();
        let examples = make_examples(&corpus, "judge");
        let enc = encode_example(&examples[0], conv, &vocab, Truncation::default()).unwrap();
        // "we claim damages" are all OOV
        assert!(enc.context[0].ids.iter().all(|&i| i == UNK_ID));
    }

    #[test]
    fn unknown_role_is_error() {
        let corpus = toy_corpus();
        let vocab = Vocabulary::build(std::iter::empty(), &["judge".to_string()], 1, 100);
        let conv = corpus.get("c1").unwrap();
        let examples = make_examples(&corpus, "judge");
        assert!(encode_example(&examples[0], conv, &vocab, Truncation::default()).is_err());
    }

    #[test]
    fn context_truncation_drops_oldest() {
        let corpus = toy_corpus();
        let vocab = toy_vocab(&corpus);
        let conv = corpus.get("c1").unwrap();
        let examples = make_examples(&corpus, "judge");
        let trunc = Truncation {
            max_utt_tokens: 30,
            max_context_turns: 2,
        };
        let enc = encode_example(&examples[1], conv, &vocab, trunc).unwrap();
        assert_eq!(enc.context.len(), 2);
        // oldest turn (plaintiff claim) dropped; first kept turn is the judge's
        assert_eq!(enc.context[0].role, vocab.role_id("judge").unwrap());
    }

    #[test]
    fn decode_encode_round_trip_with_unk() {
        let corpus = synthesize(&SynthConfig {
            n: 40,
            seed: 3,
            ..SynthConfig::default()
        });
        let vocab = Vocabulary::from_corpus(&corpus, 2, 200);
        for conv in corpus.iter() {
            for turn in &conv.turns {
                let ids: Vec<usize> = turn.tokens.iter().map(|t| vocab.id_of(t)).collect();
                let decoded = decode_ids(&ids, &vocab);
                for (orig, dec) in turn.tokens.iter().zip(&decoded) {
                    if vocab.contains(orig) {
                        assert_eq!(orig, dec);
                    } else {
                        assert_eq!(dec, "<unk>");
                    }
                }
            }
        }
    }

    #[test]
    fn example_count_matches_enumeration_on_synthetic() {
        let corpus = synthesize(&SynthConfig {
            n: 60,
            seed: 11,
            ..SynthConfig::default()
        });
        let examples = make_examples(&corpus, "agent");
        let expected: usize = corpus
            .iter()
            .map(|c| {
                c.turns
                    .iter()
                    .enumerate()
                    .filter(|(i, t)| *i >= 1 && t.role == "agent")
                    .count()
            })
            .sum();
        assert_eq!(examples.len(), expected);
    }
}
