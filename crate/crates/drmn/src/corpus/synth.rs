//! Synthetic dialogue generator.
//!
//! Emits families of near-duplicate customer/agent conversations. Members of
//! a family share a topic token (present in context turns) and a secret token
//! that appears only in the agent's answer turn. Retrieval should rank family
//! siblings first, and a copy mechanism can recover the secret from a sibling
//! even when it is out of vocabulary: secrets occur `family_size` times in
//! the whole corpus, so any min-frequency cutoff above that drops them.
//!
//! Conversations are emitted family-contiguously: index / family_size is the
//! family, and ids are `c{index:05}`.

use super::{Conversation, Corpus, Utterance};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub family_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 1000,
            seed: 7,
            family_size: 5,
        }
    }
}

const GREETINGS: [&str; 3] = ["hi", "hello", "hey"];
const FILLERS: [&str; 3] = ["please", "now", "today"];

/// Topic token shared by every member of a family; appears in two context
/// turns per conversation.
pub fn topic_token(family: usize) -> String {
    format!("topic{family:04}")
}

/// Secret token planted once per conversation, only in the agent answer turn.
pub fn entity_token(family: usize) -> String {
    format!("secret{family:04}")
}

/// Parses a generated id `c00042` back to its index.
pub fn conv_index(id: &str) -> Option<usize> {
    id.strip_prefix('c')?.parse().ok()
}

pub fn synthesize(config: &SynthConfig) -> Corpus {
    assert!(config.family_size >= 1, "family_size must be positive");
    let mut rng = Rng::new(config.seed);
    let mut corpus = Corpus::new();
    for i in 0..config.n {
        let family = i / config.family_size;
        let topic = topic_token(family);
        let entity = entity_token(family);
        let greeting = *rng.choose(&GREETINGS);
        let filler = *rng.choose(&FILLERS);
        let closing = rng.next_f64() < 0.5;

        let mut turns = vec![
            Utterance::new("customer", &format!("{greeting} i need help with {topic}")),
            Utterance::new("agent", &format!("sure let me check the {topic} record")),
            Utterance::new("customer", &format!("what is the access code {filler}")),
            Utterance::new("agent", &format!("the code is {entity} thanks")),
        ];
        if closing {
            turns.push(Utterance::new("customer", "great that works bye"));
            turns.push(Utterance::new("agent", "goodbye and have a nice day"));
        }

        corpus
            .push(Conversation {
                id: format!("c{i:05}"),
                turns,
            })
            .expect("generated conversations are well-formed");
    }
    corpus
}
