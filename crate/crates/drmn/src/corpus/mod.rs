//! Conversation data model and the on-disk JSONL corpus format.
//!
//! One conversation per line: `{"id": "...", "turns": [{"role": "...",
//! "text": "..."}]}`. Unknown fields are tolerated and ignored. Corpora and
//! vocabularies are immutable after construction.

mod example;
mod synth;
mod tokenize;
mod vocab;

pub use example::{
    decode_ids, encode_example, encode_turn, make_examples, EncodedExample, EncodedTurn,
    TrainingExample, Truncation,
};
pub use synth::{conv_index, entity_token, synthesize, topic_token, SynthConfig};
pub use tokenize::tokenize;
pub use vocab::{Vocabulary, BOS_ID, EOS_ID, PAD_ID, RESERVED_TOKENS, UNK_ID};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// One speaker contribution: a role label plus its tokenized text.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub role: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(role: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Utterance {
            role: role.into(),
            text,
            tokens,
        }
    }
}

/// An ordered multi-turn conversation; the unit of retrieval and of
/// generation context.
#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Utterance>,
}

impl Conversation {
    /// All tokens of all turns, flattened; the retrieval "document".
    pub fn all_tokens(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .flat_map(|t| t.tokens.iter().map(|s| s.as_str()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    conversations: Vec<Conversation>,
    by_id: HashMap<String, usize>,
}

// Wire format for one JSONL line.
#[derive(Serialize, Deserialize)]
struct TurnRecord {
    role: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct ConversationRecord {
    id: String,
    turns: Vec<TurnRecord>,
}

impl Corpus {
    pub fn new() -> Self {
        Corpus::default()
    }

    /// Adds a conversation, enforcing id uniqueness and L >= 2.
    pub fn push(&mut self, conv: Conversation) -> Result<()> {
        if conv.turns.len() < 2 {
            return Err(Error::Data(format!(
                "conversation {}: needs at least 2 turns, got {}",
                conv.id,
                conv.turns.len()
            )));
        }
        for (i, t) in conv.turns.iter().enumerate() {
            if t.tokens.is_empty() {
                return Err(Error::Data(format!(
                    "conversation {}: turn {} tokenizes to nothing",
                    conv.id,
                    i + 1
                )));
            }
        }
        if self.by_id.contains_key(&conv.id) {
            return Err(Error::Data(format!("duplicate conversation id {}", conv.id)));
        }
        self.by_id.insert(conv.id.clone(), self.conversations.len());
        self.conversations.push(conv);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Conversation> {
        self.conversations.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Conversation> {
        self.by_id.get(id).map(|&i| &self.conversations[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Sorted unique role labels; role ids are positions in this list.
    pub fn role_set(&self) -> Vec<String> {
        let mut roles: Vec<String> = self
            .conversations
            .iter()
            .flat_map(|c| c.turns.iter().map(|t| t.role.clone()))
            .collect();
        roles.sort();
        roles.dedup();
        roles
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Data(format!("cannot open corpus {}: {}", path.display(), e))
        })?;
        let reader = BufReader::new(file);
        let mut corpus = Corpus::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ConversationRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!(
                    "{}: line {}: malformed record: {}",
                    path.display(),
                    lineno + 1,
                    e
                ))
            })?;
            let conv = Conversation {
                id: record.id,
                turns: record
                    .turns
                    .into_iter()
                    .map(|t| Utterance::new(t.role, t.text))
                    .collect(),
            };
            corpus.push(conv).map_err(|e| match e {
                Error::Data(msg) => {
                    Error::Data(format!("{}: line {}: {}", path.display(), lineno + 1, msg))
                }
                other => other,
            })?;
        }
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for conv in &self.conversations {
            let record = ConversationRecord {
                id: conv.id.clone(),
                turns: conv
                    .turns
                    .iter()
                    .map(|t| TurnRecord {
                        role: t.role.clone(),
                        text: t.text.clone(),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut buf, &record)
                .map_err(|e| Error::Data(format!("serialize {}: {}", conv.id, e)))?;
            buf.push(b'\n');
        }
        crate::cli::write_atomic(path, &buf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// 80/10/10 split by a content hash of the conversation id, so membership
/// is a property of the conversation itself: stable across runs, corpus
/// orderings, and subsets.
pub fn split_of(conversation_id: &str) -> Split {
    match crate::rng::fnv1a64(conversation_id.as_bytes()) % 10 {
        0..=7 => Split::Train,
        8 => Split::Dev,
        _ => Split::Test,
    }
}
