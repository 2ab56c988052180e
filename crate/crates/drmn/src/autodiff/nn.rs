//! Neural building blocks recorded on the tape: LSTM cells and sequences,
//! bidirectional encoding, attention forms, the residual feed-forward
//! normalization block, and inverted dropout.

use super::tape::{NodeId, Tape};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Tape leaves for one LSTM direction. Gate layout along the 4H axis is
/// input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub wx: NodeId,
    pub wh: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

/// One LSTM step. `x` is 1 x in, `h` and `c` are 1 x hidden.
pub fn lstm_cell(
    tape: &mut Tape,
    w: &LstmWeights,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> (NodeId, NodeId) {
    let hidden = w.hidden;
    let zx = tape.matmul(x, w.wx);
    let zh = tape.matmul(h, w.wh);
    let zsum = tape.add(zx, zh);
    let z = tape.add(zsum, w.b);
    let zi = tape.slice_cols(z, 0, hidden);
    let zf = tape.slice_cols(z, hidden, hidden);
    let zg = tape.slice_cols(z, 2 * hidden, hidden);
    let zo = tape.slice_cols(z, 3 * hidden, hidden);
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let keep = tape.hadamard(f, c);
    let write = tape.hadamard(i, g);
    let c_next = tape.add(keep, write);
    let ct = tape.tanh(c_next);
    let h_next = tape.hadamard(o, ct);
    (h_next, c_next)
}

/// Runs an LSTM over a sequence of 1 x in rows from zero initial state.
/// Output hidden states are returned in input order even when scanning in
/// reverse.
pub fn lstm_sequence(
    tape: &mut Tape,
    w: &LstmWeights,
    xs: &[NodeId],
    reverse: bool,
) -> Vec<NodeId> {
    assert!(!xs.is_empty(), "empty sequence");
    let mut h = tape.constant(Matrix::zeros(1, w.hidden));
    let mut c = tape.constant(Matrix::zeros(1, w.hidden));
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    let mut out = vec![None; xs.len()];
    for idx in order {
        let (hn, cn) = lstm_cell(tape, w, xs[idx], h, c);
        h = hn;
        c = cn;
        out[idx] = Some(hn);
    }
    out.into_iter().map(|o| o.unwrap()).collect()
}

/// One bidirectional layer: forward and backward hidden states concatenated
/// per position (each output row is 1 x 2*hidden).
pub fn bilstm_layer(
    tape: &mut Tape,
    fwd: &LstmWeights,
    bwd: &LstmWeights,
    xs: &[NodeId],
) -> Vec<NodeId> {
    let fs = lstm_sequence(tape, fwd, xs, false);
    let bs = lstm_sequence(tape, bwd, xs, true);
    fs.into_iter()
        .zip(bs)
        .map(|(f, b)| tape.concat_cols(f, b))
        .collect()
}

/// Pooling attention whose score for each state row h is tanh(hW + b) . h,
/// the state acting as both transformed query and key. Returns the weight
/// row (1 x n) and the pooled vector (1 x width).
pub fn tanh_score_attention(
    tape: &mut Tape,
    w: NodeId,
    b: NodeId,
    states: NodeId,
) -> (NodeId, NodeId) {
    let proj = tape.matmul(states, w);
    let shifted = tape.add_row(proj, b);
    let keys = tape.tanh(shifted);
    let scores = tape.row_dot(keys, states);
    let logits = tape.transpose(scores);
    let weights = tape.softmax_rows(logits);
    let pooled = tape.matmul(weights, states);
    (weights, pooled)
}

/// softmax(Q K^T / sqrt(d)) V with d = key width. Returns (weights, output).
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> (NodeId, NodeId) {
    let d = tape.value(k).cols;
    assert!(tape.value(k).rows >= 1, "attention needs at least one key");
    assert_eq!(tape.value(q).cols, d, "query/key width mismatch");
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt);
    let logits = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(logits);
    let out = tape.matmul(weights, v);
    (weights, out)
}

/// Leaves for the residual feed-forward block with layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct FfnWeights {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub gain: NodeId,
    pub bias: NodeId,
}

/// LayerNorm(x + relu(x W1 + b1) W2 + b2), rowwise.
pub fn ffn_norm(tape: &mut Tape, w: &FfnWeights, x: NodeId) -> NodeId {
    let h_lin = tape.matmul(x, w.w1);
    let h_aff = tape.add_row(h_lin, w.b1);
    let h = tape.relu(h_aff);
    let back = tape.matmul(h, w.w2);
    let back_aff = tape.add_row(back, w.b2);
    let residual = tape.add(x, back_aff);
    tape.layer_norm_rows(residual, w.gain, w.bias)
}

/// Inverted dropout: in training, each element survives with probability
/// `keep_prob` and is scaled by 1/keep_prob; at inference this is the
/// identity. The mask enters the tape as a constant, so gradients flow only
/// through surviving elements.
pub fn dropout(
    tape: &mut Tape,
    rng: &mut Rng,
    x: NodeId,
    keep_prob: f64,
    training: bool,
) -> NodeId {
    assert!(
        keep_prob > 0.0 && keep_prob <= 1.0,
        "keep_prob must be in (0, 1]"
    );
    if !training || keep_prob >= 1.0 {
        return x;
    }
    let shape = (tape.value(x).rows, tape.value(x).cols);
    let mask = Matrix::from_fn(shape.0, shape.1, |_, _| {
        if rng.next_f64() < keep_prob {
            1.0 / keep_prob
        } else {
            0.0
        }
    });
    let m = tape.constant(mask);
    tape.hadamard(x, m)
}
