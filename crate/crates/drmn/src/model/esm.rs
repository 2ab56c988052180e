//! Shared-memory construction: an iterative attention read over the
//! utterances of retrieved similar conversations, queried first by the
//! target's last context sentence, thereafter by the previous memory.

use super::encoder::SimilarEnc;
use super::Net;
use crate::autodiff::nn::{ffn_norm, scaled_dot_attention};
use crate::autodiff::NodeId;
use crate::error::{Error, Result};

/// What the recurrence treats as one utterance's key/value bank: every word
/// state (the default, a genuine content-based read) or the single pooled
/// vector (degenerate attention, kept for comparison).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsmReading {
    WordMatrix,
    Pooled,
}

impl EsmReading {
    pub fn name(&self) -> &'static str {
        match self {
            EsmReading::WordMatrix => "word_matrix",
            EsmReading::Pooled => "pooled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "word_matrix" => Ok(EsmReading::WordMatrix),
            "pooled" => Ok(EsmReading::Pooled),
            other => Err(Error::Usage(format!(
                "unknown memory reading {other:?} (expected word_matrix or pooled)"
            ))),
        }
    }
}

/// One consumed utterance in the memory recurrence, for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    /// 1-based step index.
    pub step: usize,
    pub conversation_id: String,
    pub utterance_index: usize,
    pub weights: Vec<f64>,
}

fn read_step(net: &mut Net, query: NodeId, keys: NodeId) -> (NodeId, NodeId) {
    let (weights, attended) = scaled_dot_attention(&mut net.tape, query, keys, keys);
    let ffn = net.ffn();
    let y = ffn_norm(&mut net.tape, &ffn, attended);
    (y, weights)
}

/// First memory: the last-context-sentence query reads the first utterance.
pub fn memory_init(net: &mut Net, query: NodeId, keys: NodeId) -> (NodeId, NodeId) {
    assert!(net.value(keys).rows >= 1, "empty utterance matrix");
    read_step(net, query, keys)
}

/// Later memories: the previous memory is the query.
pub fn memory_step(net: &mut Net, y_prev: NodeId, keys: NodeId) -> (NodeId, NodeId) {
    assert!(net.value(keys).rows >= 1, "empty utterance matrix");
    read_step(net, y_prev, keys)
}

/// Folds the recurrence over every utterance of every similar conversation,
/// in the given (descending similarity) order. An empty plan yields a zero
/// memory and an empty trace, which is the memory-less ablation.
pub fn build_memory(
    net: &mut Net,
    query: NodeId,
    similars: &[SimilarEnc],
    reading: EsmReading,
) -> (NodeId, Vec<TraceStep>) {
    let width = net.value(query).cols;
    let mut trace = Vec::new();
    let mut y: Option<NodeId> = None;
    let mut step = 0usize;
    for sim in similars {
        for (utt_idx, utt) in sim.turns.iter().enumerate() {
            let keys = match reading {
                EsmReading::WordMatrix => utt.states,
                EsmReading::Pooled => utt.pooled,
            };
            step += 1;
            let (next, weights) = match y {
                None => memory_init(net, query, keys),
                Some(prev) => memory_step(net, prev, keys),
            };
            trace.push(TraceStep {
                step,
                conversation_id: sim.conversation_id.clone(),
                utterance_index: utt_idx,
                weights: net.value(weights).data().to_vec(),
            });
            y = Some(next);
        }
    }
    match y {
        Some(id) => (id, trace),
        None => (
            net.tape.constant(crate::matrix::Matrix::zeros(1, width)),
            trace,
        ),
    }
}

/// Renders the trace in the plain-text dump format: one row per step.
pub fn render_trace(trace: &[TraceStep]) -> String {
    let mut out = String::new();
    for t in trace {
        let ws: Vec<String> = t.weights.iter().map(|w| format!("{w:.6}")).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            t.step,
            t.conversation_id,
            t.utterance_index,
            ws.join(" ")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::model::encoder::encode_similar;
    use crate::model::testutil::*;
    use crate::model::{BankSpan, ForwardSettings, Mode};
    use crate::params::ParamSet;
    use crate::rng::Rng;

    fn inference() -> ForwardSettings {
        ForwardSettings::inference(Mode::Drmn, EsmReading::WordMatrix, BankSpan::TargetAndSimilar)
    }

    fn net_with(params: &ParamSet) -> Net<'_> {
        Net::new(params, &inference(), Rng::new(0))
    }

    /// Plain-f64 re-evaluation of one read: softmax(q K^T / sqrt(d)) K, then
    /// the residual feed-forward block with layer normalization.
    fn oracle_read(params: &ParamSet, query: &[f64], keys: &Matrix) -> Vec<f64> {
        let d = keys.cols;
        let scale = 1.0 / (d as f64).sqrt();
        let mut logits = vec![0.0; keys.rows];
        for (r, logit) in logits.iter_mut().enumerate() {
            *logit = (0..d).map(|c| query[c] * keys.get(r, c)).sum::<f64>() * scale;
        }
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut attended = vec![0.0; d];
        for r in 0..keys.rows {
            for c in 0..d {
                attended[c] += exps[r] / z * keys.get(r, c);
            }
        }
        // feed-forward with residual, then layer norm
        let w1 = params.by_name("esm.ffn.w1");
        let b1 = params.by_name("esm.ffn.b1");
        let w2 = params.by_name("esm.ffn.w2");
        let b2 = params.by_name("esm.ffn.b2");
        let gain = params.by_name("esm.ln.gain");
        let bias = params.by_name("esm.ln.bias");
        let mut hidden = vec![0.0; d];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut s = b1.get(0, j);
            for k in 0..d {
                s += attended[k] * w1.get(k, j);
            }
            *h = s.max(0.0);
        }
        let mut res = vec![0.0; d];
        for (j, r) in res.iter_mut().enumerate() {
            let mut s = b2.get(0, j);
            for k in 0..d {
                s += hidden[k] * w2.get(k, j);
            }
            *r = attended[j] + s;
        }
        let mean = res.iter().sum::<f64>() / d as f64;
        let var = res.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        (0..d)
            .map(|j| (res[j] - mean) * inv * gain.get(0, j) + bias.get(0, j))
            .collect()
    }

    fn oracle_chain(
        params: &ParamSet,
        query: &[f64],
        utterances: &[Matrix],
    ) -> Vec<f64> {
        let mut q = query.to_vec();
        for keys in utterances {
            q = oracle_read(params, &q, keys);
        }
        q
    }

    #[test]
    fn single_key_read_applies_ffn_to_that_state() {
        let (vocab, _, _) = fixture();
        let params = fixture_params(&vocab, 1);
        let mut net = net_with(&params);
        let q = net.tape.constant(Matrix::from_fn(1, 24, |_, c| 0.1 * c as f64));
        let key = Matrix::from_fn(1, 24, |_, c| ((c as f64) * 0.7).sin());
        let k = net.tape.constant(key.clone());
        let (y, w) = memory_init(&mut net, q, k);
        assert!((net.value(w).get(0, 0) - 1.0).abs() < 1e-15);
        // with a single key the attended vector is that key regardless of
        // the query direction
        let q_vals: Vec<f64> = (0..24).map(|c| 0.1 * c as f64).collect();
        let want = oracle_read(&params, &q_vals, &key);
        for c in 0..24 {
            assert!((net.value(y).get(0, c) - want[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_query_averages_the_states() {
        let (vocab, _, _) = fixture();
        let params = fixture_params(&vocab, 2);
        let mut net = net_with(&params);
        // query orthogonal to both key rows: keys live in dims 0..2,
        // query in dim 2
        let mut qm = Matrix::zeros(1, 24);
        qm.set(0, 2, 3.0);
        let mut km = Matrix::zeros(2, 24);
        km.set(0, 0, 1.0);
        km.set(1, 1, 1.0);
        let q = net.tape.constant(qm);
        let k = net.tape.constant(km.clone());
        let (y, w) = memory_init(&mut net, q, k);
        assert!((net.value(w).get(0, 0) - 0.5).abs() < 1e-12);
        assert!((net.value(w).get(0, 1) - 0.5).abs() < 1e-12);
        let mean = Matrix::from_fn(1, 24, |_, c| (km.get(0, c) + km.get(1, c)) / 2.0);
        let mut net2 = net_with(&params);
        let m = net2.tape.constant(mean);
        let ffn = net2.ffn();
        let direct = crate::autodiff::nn::ffn_norm(&mut net2.tape, &ffn, m);
        for c in 0..24 {
            assert!((net.value(y).get(0, c) - net2.value(direct).get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn memory_chain_matches_unrolled_oracle_in_both_readings() {
        let (vocab, _, sims) = fixture();
        let params = fixture_params(&vocab, 3);
        for reading in [EsmReading::WordMatrix, EsmReading::Pooled] {
            let mut net = net_with(&params);
            let enc = encode_similar(&mut net, "s0", &sims[0].turns);
            let query = net.tape.constant(Matrix::from_fn(1, 24, |_, c| {
                ((c * 3 + 1) as f64).cos() * 0.4
            }));
            let (y, trace) =
                build_memory(&mut net, query, std::slice::from_ref(&enc), reading);
            assert_eq!(trace.len(), sims[0].turns.len());

            let utts: Vec<Matrix> = enc
                .turns
                .iter()
                .map(|u| match reading {
                    EsmReading::WordMatrix => net.value(u.states).clone(),
                    EsmReading::Pooled => net.value(u.pooled).clone(),
                })
                .collect();
            let q0: Vec<f64> = (0..24).map(|c| ((c * 3 + 1) as f64).cos() * 0.4).collect();
            let want = oracle_chain(&params, &q0, &utts);
            for c in 0..24 {
                assert!(
                    (net.value(y).get(0, c) - want[c]).abs() < 1e-10,
                    "{reading:?} col {c}"
                );
            }
        }
    }

    #[test]
    fn empty_plan_yields_zero_memory_and_empty_trace() {
        let (vocab, _, _) = fixture();
        let params = fixture_params(&vocab, 4);
        let mut net = net_with(&params);
        let q = net.tape.constant(Matrix::from_fn(1, 24, |_, c| c as f64));
        let (y, trace) = build_memory(&mut net, q, &[], EsmReading::WordMatrix);
        assert!(trace.is_empty());
        assert!(net.value(y).data().iter().all(|&x| x == 0.0));
        assert_eq!(net.value(y).shape(), (1, 24));
    }

    #[test]
    fn trace_covers_plan_in_order_with_normalized_weights() {
        let (vocab, _, sims) = fixture();
        let params = fixture_params(&vocab, 5);
        let mut net = net_with(&params);
        let enc1 = encode_similar(&mut net, "s0", &sims[0].turns);
        let enc2 = encode_similar(&mut net, "other", &sims[0].turns[..1]);
        let q = net.tape.constant(Matrix::from_fn(1, 24, |_, c| 0.05 * c as f64));
        let (_, trace) = build_memory(
            &mut net,
            q,
            &[enc1, enc2],
            EsmReading::WordMatrix,
        );
        assert_eq!(trace.len(), 3);
        assert_eq!(trace[0].step, 1);
        assert_eq!(trace[0].conversation_id, "s0");
        assert_eq!(trace[2].conversation_id, "other");
        assert_eq!(trace[2].utterance_index, 0);
        for t in &trace {
            let s: f64 = t.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(t.weights.iter().all(|&w| w >= 0.0));
        }
        // prefix property: the 1-conversation plan is a prefix of the
        // 2-conversation plan
        let mut net2 = net_with(&params);
        let enc_only = encode_similar(&mut net2, "s0", &sims[0].turns);
        let q2 = net2.tape.constant(Matrix::from_fn(1, 24, |_, c| 0.05 * c as f64));
        let (_, short) = build_memory(
            &mut net2,
            q2,
            std::slice::from_ref(&enc_only),
            EsmReading::WordMatrix,
        );
        assert_eq!(short.len(), 2);
        for (a, b) in short.iter().zip(&trace) {
            assert_eq!(a.weights, b.weights);
        }
    }

    #[test]
    fn query_gradient_flows_through_memory() {
        let (vocab, _, sims) = fixture();
        let params = fixture_params(&vocab, 6);
        let mut net = net_with(&params);
        let enc = encode_similar(&mut net, "s0", &sims[0].turns);
        // the query comes from a parameter so backward reaches it only
        // via the memory path
        let q = net.p("att.sent.b");
        let (y, _) = build_memory(&mut net, q, std::slice::from_ref(&enc), EsmReading::WordMatrix);
        let loss = net.tape.mean_all(y);
        let grads = net.tape.backward(loss, &params);
        let idx = params.idx("att.sent.b");
        assert!(grads.get(idx).max_abs() > 0.0);
    }

    #[test]
    fn render_trace_is_tab_separated() {
        let trace = vec![TraceStep {
            step: 1,
            conversation_id: "c1".into(),
            utterance_index: 2,
            weights: vec![0.25, 0.75],
        }];
        let s = render_trace(&trace);
        assert_eq!(s, "1\tc1\t2\t0.250000 0.750000\n");
    }

    #[test]
    fn reading_names_round_trip() {
        for r in [EsmReading::WordMatrix, EsmReading::Pooled] {
            assert_eq!(EsmReading::parse(r.name()).unwrap(), r);
        }
        assert!(EsmReading::parse("bert").is_err());
    }
}
