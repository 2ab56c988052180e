//! Hierarchical conversation encoding: role-aware word embedding, a two
//! layer bidirectional utterance encoder with word-level pooling attention,
//! a conversation-layer encoder with sentence-level pooling attention, and
//! the self-attended context summary.

use super::Net;
use crate::autodiff::nn::{bilstm_layer, scaled_dot_attention, tanh_score_attention};
use crate::autodiff::NodeId;
use crate::corpus::EncodedTurn;

/// One encoded utterance: per-word states (l x S), the word attention row
/// (1 x l), and the attention-pooled vector (1 x S).
#[derive(Debug, Clone)]
pub struct UttEnc {
    pub states: NodeId,
    pub attn: NodeId,
    pub pooled: NodeId,
}

/// The encoded target context.
#[derive(Debug, Clone)]
pub struct ConvEnc {
    pub turns: Vec<UttEnc>,
    /// Conversation-layer states, L x S.
    pub conv_states: NodeId,
    /// Sentence attention, 1 x L.
    pub sent_attn: NodeId,
    /// Sentence-attention pooled conversation vector, 1 x S.
    pub pooled: NodeId,
    /// Utterance-layer pooled vector of the final context turn; the memory
    /// recurrence queries with this.
    pub last_query: NodeId,
    /// Self-attended, sentence-attention-pooled context summary X, 1 x S.
    pub summary: NodeId,
}

/// A similar conversation encoded with the utterance layer only.
#[derive(Debug, Clone)]
pub struct SimilarEnc {
    pub conversation_id: String,
    pub turns: Vec<UttEnc>,
}

/// Embeds one turn as rows of word embedding concatenated with the turn's
/// role embedding; dropout applies in training mode.
pub fn embed_turn(net: &mut Net, turn: &EncodedTurn) -> NodeId {
    assert!(!turn.ids.is_empty(), "empty turn");
    let words = net.rows("emb.word", &turn.ids);
    let role_rows = vec![turn.role; turn.ids.len()];
    let roles = net.rows("emb.role", &role_rows);
    let emb = net.tape.concat_cols(words, roles);
    net.drop(emb)
}

fn split_rows(net: &mut Net, m: NodeId) -> Vec<NodeId> {
    let rows = net.value(m).rows;
    (0..rows).map(|r| net.tape.slice_rows(m, r, 1)).collect()
}

fn two_layer_bilstm(net: &mut Net, prefix: &str, inputs: &[NodeId]) -> Vec<NodeId> {
    let f0 = net.lstm(&format!("{prefix}.l0.fwd"));
    let b0 = net.lstm(&format!("{prefix}.l0.bwd"));
    let l0 = bilstm_layer(&mut net.tape, &f0, &b0, inputs);
    let l0: Vec<NodeId> = l0.into_iter().map(|h| net.drop(h)).collect();
    let f1 = net.lstm(&format!("{prefix}.l1.fwd"));
    let b1 = net.lstm(&format!("{prefix}.l1.bwd"));
    let l1 = bilstm_layer(&mut net.tape, &f1, &b1, &l0);
    l1.into_iter().map(|h| net.drop(h)).collect()
}

pub fn encode_utterance(net: &mut Net, turn: &EncodedTurn) -> UttEnc {
    let emb = embed_turn(net, turn);
    let rows = split_rows(net, emb);
    let hs = two_layer_bilstm(net, "enc.utt", &rows);
    let states = net.tape.concat_rows(&hs);
    let w = net.p("att.word.w");
    let b = net.p("att.word.b");
    let (attn, pooled) = tanh_score_attention(&mut net.tape, w, b, states);
    UttEnc {
        states,
        attn,
        pooled,
    }
}

pub fn encode_conversation(net: &mut Net, turns: &[&EncodedTurn]) -> ConvEnc {
    assert!(!turns.is_empty(), "empty context");
    let utts: Vec<UttEnc> = turns.iter().map(|t| encode_utterance(net, t)).collect();
    let pooled_rows: Vec<NodeId> = utts.iter().map(|u| u.pooled).collect();
    let hs = two_layer_bilstm(net, "enc.conv", &pooled_rows);
    let conv_states = net.tape.concat_rows(&hs);
    let w = net.p("att.sent.w");
    let b = net.p("att.sent.b");
    let (sent_attn, pooled) = tanh_score_attention(&mut net.tape, w, b, conv_states);
    let last_query = utts.last().unwrap().pooled;
    let (_, self_att) = scaled_dot_attention(&mut net.tape, conv_states, conv_states, conv_states);
    let summary = net.tape.matmul(sent_attn, self_att);
    ConvEnc {
        turns: utts,
        conv_states,
        sent_attn,
        pooled,
        last_query,
        summary,
    }
}

/// Similar conversations share the utterance-layer parameters with the
/// target encoder but never touch the conversation layer.
pub fn encode_similar(net: &mut Net, conversation_id: &str, turns: &[EncodedTurn]) -> SimilarEnc {
    assert!(!turns.is_empty(), "empty similar conversation");
    SimilarEnc {
        conversation_id: conversation_id.to_string(),
        turns: turns.iter().map(|t| encode_utterance(net, t)).collect(),
    }
}
