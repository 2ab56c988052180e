//! Pointer-generator decoding over a bank of source word states: a single
//! layer LSTM, scaled-dot attention into the bank, a vocabulary softmax, a
//! copy distribution aggregated by surface token, and a learned gate mixing
//! the two. Out-of-vocabulary source tokens get extended-vocabulary slots so
//! the decoder can emit them verbatim.

use super::encoder::UttEnc;
use super::Net;
use crate::autodiff::nn::{lstm_cell, scaled_dot_attention};
use crate::autodiff::NodeId;
use crate::corpus::{EncodedTurn, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Where a bank position came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Target,
    Similar,
}

/// The copy source: one word state, token id, surface and origin per
/// position. Positions whose token is out of vocabulary map to extended
/// indices `vocab_size + k`, one per distinct surface in first-occurrence
/// order.
pub struct Bank {
    /// n x S stacked word states.
    pub states: NodeId,
    pub tokens: Vec<usize>,
    pub surfaces: Vec<String>,
    pub origins: Vec<Origin>,
    /// Extended-vocabulary index per position.
    pub ext_ids: Vec<usize>,
    /// Extended vocabulary beyond the base one.
    pub oov_surfaces: Vec<String>,
    pub vocab_size: usize,
}

impl Bank {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ext_size(&self) -> usize {
        self.vocab_size + self.oov_surfaces.len()
    }

    /// Extended index a gold token scores against: its vocabulary id when
    /// known, its copy entry when it is OOV but present in the bank, UNK
    /// otherwise.
    pub fn gold_ext_index(&self, id: usize, surface: Option<&str>) -> usize {
        if id != UNK_ID {
            return id;
        }
        if let Some(s) = surface {
            if let Some(k) = self.oov_surfaces.iter().position(|o| o == s) {
                return self.vocab_size + k;
            }
        }
        UNK_ID
    }

    /// Renders an extended index as a surface string.
    pub fn surface_of<'a>(&'a self, vocab: &'a Vocabulary, ext: usize) -> &'a str {
        if ext < self.vocab_size {
            vocab.token_of(ext)
        } else {
            &self.oov_surfaces[ext - self.vocab_size]
        }
    }
}

/// Stacks per-turn word states into one bank. Order of `parts` fixes
/// position order.
pub fn build_bank(net: &mut Net, vocab_size: usize, parts: &[(Origin, &EncodedTurn, &UttEnc)]) -> Bank {
    assert!(!parts.is_empty(), "empty bank");
    let state_nodes: Vec<NodeId> = parts.iter().map(|(_, _, u)| u.states).collect();
    let states = net.tape.concat_rows(&state_nodes);
    let mut tokens = Vec::new();
    let mut surfaces = Vec::new();
    let mut origins = Vec::new();
    for (origin, turn, _) in parts {
        for (id, word) in turn.ids.iter().zip(&turn.words) {
            tokens.push(*id);
            surfaces.push(word.clone());
            origins.push(*origin);
        }
    }
    assert_eq!(net.value(states).rows, tokens.len(), "bank misaligned");

    let mut oov_surfaces: Vec<String> = Vec::new();
    let mut oov_index: HashMap<String, usize> = HashMap::new();
    let mut ext_ids = Vec::with_capacity(tokens.len());
    for (id, surface) in tokens.iter().zip(&surfaces) {
        if *id != UNK_ID {
            ext_ids.push(*id);
        } else if let Some(&k) = oov_index.get(surface) {
            ext_ids.push(vocab_size + k);
        } else {
            let k = oov_surfaces.len();
            oov_surfaces.push(surface.clone());
            ext_ids.push(vocab_size + k);
            oov_index.insert(surface.clone(), k);
        }
    }
    Bank {
        states,
        tokens,
        surfaces,
        origins,
        ext_ids,
        oov_surfaces,
        vocab_size,
    }
}

/// Everything one decode step produces, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct StepOut {
    pub h: NodeId,
    pub c: NodeId,
    /// 1 x n attention over bank positions.
    pub attn: NodeId,
    /// 1 x S context vector.
    pub context: NodeId,
    /// 1 x V generator distribution.
    pub vocab_dist: NodeId,
    /// 1 x 1 pointer gate.
    pub gate: NodeId,
    /// 1 x ext final mixed distribution.
    pub final_dist: NodeId,
}

/// One decoder step. `merged` is the time-constant context + memory sum
/// cached at initialization; `gate_override` pins the gate to a constant
/// (used by identity tests and ablation diagnostics).
#[allow(clippy::too_many_arguments)]
pub fn decode_step(
    net: &mut Net,
    bank: &Bank,
    merged: NodeId,
    prev_id: usize,
    role_id: usize,
    h: NodeId,
    c: NodeId,
    gate_override: Option<f64>,
) -> StepOut {
    assert!(!bank.is_empty(), "empty bank");
    let word = net.rows("emb.word", &[prev_id]);
    let role = net.rows("emb.role", &[role_id]);
    let x_raw = net.tape.concat_cols(word, role);
    let x = net.drop(x_raw);

    let w = net.lstm("dec.lstm");
    let (h1, c1) = lstm_cell(&mut net.tape, &w, x, h, c);

    let (attn, context) = scaled_dot_attention(&mut net.tape, h1, bank.states, bank.states);

    let cat = net.tape.concat_cols(context, h1);
    let hid_w = net.p("dec.vocab.hid.w");
    let hid_b = net.p("dec.vocab.hid.b");
    let out_w = net.p("dec.vocab.out.w");
    let out_b = net.p("dec.vocab.out.b");
    let hid_lin = net.tape.matmul(cat, hid_w);
    let hid = net.tape.add_row(hid_lin, hid_b);
    let logits_lin = net.tape.matmul(hid, out_w);
    let logits = net.tape.add_row(logits_lin, out_b);
    let vocab_dist = net.tape.softmax_rows(logits);

    let gate = match gate_override {
        Some(v) => net.tape.constant(Matrix::scalar(v)),
        None => {
            let wx = net.p("dec.gate.wx");
            let wc = net.p("dec.gate.wc");
            let ws = net.p("dec.gate.ws");
            let b = net.p("dec.gate.b");
            let gx = net.tape.matmul(merged, wx);
            let gc = net.tape.matmul(context, wc);
            let gs = net.tape.matmul(h1, ws);
            let s1 = net.tape.add(gx, gc);
            let s2 = net.tape.add(s1, gs);
            let s3 = net.tape.add(s2, b);
            net.tape.sigmoid(s3)
        }
    };

    let ext = bank.ext_size();
    let gen_scaled = net.tape.scale_by(vocab_dist, gate);
    let gen_padded = net.tape.pad_cols(gen_scaled, ext - bank.vocab_size);
    let copy = net
        .tape
        .aggregate_cols(attn, bank.ext_ids.clone(), ext);
    let neg_gate = net.tape.scale(gate, -1.0);
    let inv_gate = net.tape.add_const(neg_gate, 1.0);
    let copy_scaled = net.tape.scale_by(copy, inv_gate);
    let final_dist = net.tape.add(gen_padded, copy_scaled);

    StepOut {
        h: h1,
        c: c1,
        attn,
        context,
        vocab_dist,
        gate,
        final_dist,
    }
}

/// Teacher-forced loss over one gold sequence.
pub struct SeqLoss {
    pub loss: NodeId,
    pub position_count: usize,
    pub correct: usize,
    pub gates: Vec<f64>,
    pub steps: Vec<StepOut>,
    pub gold_ext: Vec<usize>,
}

/// Mean over gold positions of -ln V_f(gold). The gold is framed BOS..EOS;
/// position t scores gold_ids[t] given the prefix.
pub fn sequence_loss(
    net: &mut Net,
    bank: &Bank,
    merged: NodeId,
    role_id: usize,
    gold_ids: &[usize],
    gold_words: &[String],
    s0: NodeId,
) -> SeqLoss {
    assert!(gold_ids.len() >= 2, "gold must be BOS..EOS framed");
    assert_eq!(gold_ids.len(), gold_words.len() + 2, "gold frame mismatch");
    let width = net.value(s0).cols;
    let mut h = s0;
    let mut c = net.tape.constant(Matrix::zeros(1, width));
    let mut lns = Vec::new();
    let mut gates = Vec::new();
    let mut steps = Vec::new();
    let mut gold_ext = Vec::new();
    let mut correct = 0usize;
    for t in 1..gold_ids.len() {
        let step = decode_step(net, bank, merged, gold_ids[t - 1], role_id, h, c, None);
        h = step.h;
        c = step.c;
        let surface = if t < gold_ids.len() - 1 {
            Some(gold_words[t - 1].as_str())
        } else {
            None
        };
        let idx = bank.gold_ext_index(gold_ids[t], surface);
        gold_ext.push(idx);
        if argmax_skip(net.value(step.final_dist), &[PAD_ID]) == idx {
            correct += 1;
        }
        let p = net.tape.pick(step.final_dist, 0, idx);
        let p = net.tape.clamp_min(p, PROB_FLOOR);
        lns.push(net.tape.ln(p));
        gates.push(net.value(step.gate).get(0, 0));
        steps.push(step);
    }
    let stacked = net.tape.concat_rows(&lns);
    let mean = net.tape.mean_all(stacked);
    let loss = net.tape.scale(mean, -1.0);
    SeqLoss {
        loss,
        position_count: lns.len(),
        correct,
        gates,
        steps,
        gold_ext,
    }
}

fn argmax_skip(dist: &Matrix, skip: &[usize]) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in dist.data().iter().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Search strategy for generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMode {
    Greedy,
    Beam(usize),
}

/// A decoded sequence with per-step diagnostics.
#[derive(Debug, Clone)]
pub struct GenerationResult {
    /// Extended-vocabulary ids of emitted tokens (EOS not included).
    pub ext_ids: Vec<usize>,
    /// Surface strings of emitted tokens.
    pub tokens: Vec<String>,
    pub gates: Vec<f64>,
    /// For steps where copying outweighed generating: the strongest source
    /// position and its origin.
    pub provenance: Vec<Option<(usize, Origin)>>,
}

impl GenerationResult {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn gate_mean(&self) -> f64 {
        if self.gates.is_empty() {
            return 0.0;
        }
        self.gates.iter().sum::<f64>() / self.gates.len() as f64
    }

    pub fn copied_from_similar(&self) -> usize {
        self.provenance
            .iter()
            .filter(|p| matches!(p, Some((_, Origin::Similar))))
            .count()
    }
}

/// One line of the generation output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenRecord {
    pub example_id: String,
    pub output: String,
    pub gold: String,
    pub gate_mean: f64,
    pub copied_from_similar: usize,
}

struct Hyp {
    h: NodeId,
    c: NodeId,
    ext_ids: Vec<usize>,
    logp: f64,
    gates: Vec<f64>,
    provenance: Vec<Option<(usize, Origin)>>,
    finished: bool,
}

impl Hyp {
    fn normalized(&self) -> f64 {
        self.logp / self.ext_ids.len().max(1) as f64
    }
}

fn copy_provenance(net: &Net, bank: &Bank, step: &StepOut, ext: usize) -> Option<(usize, Origin)> {
    let gate = net.value(step.gate).get(0, 0);
    let attn = net.value(step.attn);
    let copy_mass: f64 = bank
        .ext_ids
        .iter()
        .enumerate()
        .filter(|(_, &e)| e == ext)
        .map(|(i, _)| attn.get(0, i))
        .sum::<f64>()
        * (1.0 - gate);
    let gen_mass = if ext < bank.vocab_size {
        gate * net.value(step.vocab_dist).get(0, ext)
    } else {
        0.0
    };
    if copy_mass > gen_mass {
        let pos = bank
            .ext_ids
            .iter()
            .enumerate()
            .filter(|(_, &e)| e == ext)
            .max_by(|(i, _), (j, _)| {
                attn.get(0, *i)
                    .partial_cmp(&attn.get(0, *j))
                    .unwrap()
                    .then(j.cmp(i)) // ties to the earliest position
            })
            .map(|(i, _)| i)
            .unwrap();
        Some((pos, bank.origins[pos]))
    } else {
        None
    }
}

/// Free-running decoding. Greedy takes the argmax each step; beam search
/// keeps `width` running hypotheses ranked by total log-probability and
/// returns the best by length-normalized score. PAD and BOS are never
/// emitted; EOS terminates a hypothesis and is not part of the output.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    net: &mut Net,
    bank: &Bank,
    merged: NodeId,
    role_id: usize,
    s0: NodeId,
    vocab: &Vocabulary,
    mode: GenMode,
    max_len: usize,
) -> GenerationResult {
    let width = match mode {
        GenMode::Greedy => 1,
        GenMode::Beam(w) => w.max(1),
    };
    let s = net.value(s0).cols;
    let c0 = net.tape.constant(Matrix::zeros(1, s));
    let mut live = vec![Hyp {
        h: s0,
        c: c0,
        ext_ids: Vec::new(),
        logp: 0.0,
        gates: Vec::new(),
        provenance: Vec::new(),
        finished: false,
    }];
    let mut done: Vec<Hyp> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut candidates: Vec<Hyp> = Vec::new();
        for hyp in &live {
            let prev = match hyp.ext_ids.last() {
                None => BOS_ID,
                Some(&e) if e < bank.vocab_size => e,
                Some(_) => UNK_ID,
            };
            let step = decode_step(net, bank, merged, prev, role_id, hyp.h, hyp.c, None);
            let dist = net.value(step.final_dist).clone();
            // rank continuations: probability desc, index asc
            let mut order: Vec<usize> = (0..dist.cols)
                .filter(|&i| i != PAD_ID && i != BOS_ID)
                .collect();
            order.sort_by(|&a, &b| {
                dist.get(0, b)
                    .partial_cmp(&dist.get(0, a))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for &idx in order.iter().take(width) {
                let p = dist.get(0, idx).max(PROB_FLOOR);
                let mut next = Hyp {
                    h: step.h,
                    c: step.c,
                    ext_ids: hyp.ext_ids.clone(),
                    logp: hyp.logp + p.ln(),
                    gates: hyp.gates.clone(),
                    provenance: hyp.provenance.clone(),
                    finished: false,
                };
                next.gates.push(net.value(step.gate).get(0, 0));
                if idx == EOS_ID {
                    next.finished = true;
                } else {
                    next.ext_ids.push(idx);
                    next.provenance.push(copy_provenance(net, bank, &step, idx));
                }
                candidates.push(next);
            }
        }
        // stable sort: ties keep expansion order, which is deterministic
        candidates.sort_by(|a, b| b.logp.partial_cmp(&a.logp).unwrap());
        live = Vec::new();
        for hyp in candidates {
            if hyp.finished {
                done.push(hyp);
            } else if live.len() < width {
                live.push(hyp);
            }
        }
    }
    done.extend(live);
    let best = done
        .into_iter()
        .max_by(|a, b| {
            a.normalized()
                .partial_cmp(&b.normalized())
                .unwrap()
                .then(b.ext_ids.len().cmp(&a.ext_ids.len()))
        })
        .expect("at least one hypothesis");

    let tokens = best
        .ext_ids
        .iter()
        .map(|&e| bank.surface_of(vocab, e).to_string())
        .collect();
    GenerationResult {
        ext_ids: best.ext_ids,
        tokens,
        gates: best.gates,
        provenance: best.provenance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::*;
    use crate::model::{init_params, stage, BankSpan, EsmReading, ForwardSettings, Mode};
    use crate::params::ParamSet;
    use crate::rng::Rng;

    fn inference() -> ForwardSettings {
        ForwardSettings::inference(Mode::Drmn, EsmReading::WordMatrix, BankSpan::TargetAndSimilar)
    }

    fn staged<'p>(
        params: &'p ParamSet,
        vocab: &Vocabulary,
    ) -> (crate::model::Staged<'p>, crate::corpus::EncodedExample) {
        let (_, enc, sims) = fixture();
        let st = stage(
            params,
            vocab.size(),
            &enc.context,
            &sims,
            &inference(),
            Rng::new(0),
        );
        (st, enc)
    }

    #[test]
    fn bank_assigns_extended_ids_per_distinct_oov_surface() {
        let (vocab, _, _) = fixture();
        // vocabulary that knows only two of the words
        let small = Vocabulary::build(
            ["parcel", "the"].iter().copied(),
            &["customer".to_string(), "agent".to_string()],
            1,
            100,
        );
        let params = fixture_params(&small, 1);
        let mut net = Net::new(&params, &inference(), Rng::new(0));
        let t1 = turn(&small, "customer", "where is my parcel");
        let t2 = turn(&small, "agent", "parcel is where the box is");
        let e1 = crate::model::encode_utterance(&mut net, &t1);
        let e2 = crate::model::encode_utterance(&mut net, &t2);
        let bank = build_bank(
            &mut net,
            small.size(),
            &[(Origin::Target, &t1, &e1), (Origin::Similar, &t2, &e2)],
        );
        // OOV surfaces in first-occurrence order: where, is, my, box
        assert_eq!(bank.oov_surfaces, vec!["where", "is", "my", "box"]);
        assert_eq!(bank.ext_size(), small.size() + 4);
        // repeated OOV "is" shares one extended id everywhere
        let is_ext = small.size() + 1;
        let positions: Vec<usize> = bank
            .surfaces
            .iter()
            .enumerate()
            .filter(|(_, s)| s.as_str() == "is")
            .map(|(i, _)| i)
            .collect();
        assert_eq!(positions.len(), 3);
        for p in positions {
            assert_eq!(bank.ext_ids[p], is_ext);
        }
        // in-vocab token keeps its vocabulary id
        let parcel_pos = bank.surfaces.iter().position(|s| s == "parcel").unwrap();
        assert_eq!(bank.ext_ids[parcel_pos], small.id_of("parcel"));
        assert_ne!(small.id_of("parcel"), UNK_ID);
        let _ = vocab;
    }

    #[test]
    fn gate_one_reduces_exactly_to_generator() {
        let (vocab, _, _) = fixture();
        let params = fixture_params(&vocab, 2);
        let (st, enc) = staged(&params, &vocab);
        let mut net = st.net;
        let h = st.s0;
        let s = net.value(h).cols;
        let c = net.tape.constant(Matrix::zeros(1, s));
        let step = decode_step(
            &mut net,
            &st.bank,
            st.merged,
            enc.gold_ids[0],
            enc.target_role,
            h,
            c,
            Some(1.0),
        );
        let vf = net.value(step.final_dist).clone();
        let vs = net.value(step.vocab_dist).clone();
        for i in 0..vocab.size() {
            assert_eq!(vf.get(0, i), vs.get(0, i), "column {i}");
        }
        for i in vocab.size()..st.bank.ext_size() {
            assert_eq!(vf.get(0, i), 0.0);
        }
    }

    #[test]
    fn gate_zero_reduces_exactly_to_aggregated_copy() {
        let (vocab, _, _) = fixture();
        let params = fixture_params(&vocab, 3);
        let (st, enc) = staged(&params, &vocab);
        let mut net = st.net;
        let h = st.s0;
        let s = net.value(h).cols;
        let c = net.tape.constant(Matrix::zeros(1, s));
        let step = decode_step(
            &mut net,
            &st.bank,
            st.merged,
            enc.gold_ids[0],
            enc.target_role,
            h,
            c,
            Some(0.0),
        );
        let vf = net.value(step.final_dist).clone();
        let attn = net.value(step.attn).clone();
        let mut want = vec![0.0; st.bank.ext_size()];
        for (i, &e) in st.bank.ext_ids.iter().enumerate() {
            want[e] += attn.get(0, i);
        }
        for (i, w) in want.iter().enumerate() {
            assert_eq!(vf.get(0, i), *w, "column {i}");
        }
    }

    #[test]
    fn duplicated_bank_token_mass_is_the_positional_sum() {
        let (vocab, _, _) = fixture();
        let params = fixture_params(&vocab, 4);
        let (st, enc) = staged(&params, &vocab);
        let mut net = st.net;
        // "parcel" occurs in the target context twice (turns 0 and 3 of the
        // fixture feed the bank via context and similar)
        let tok = vocab.id_of("parcel");
        let positions: Vec<usize> = st
            .bank
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tok)
            .map(|(i, _)| i)
            .collect();
        assert!(positions.len() >= 2, "need a duplicated token");
        let h = st.s0;
        let s = net.value(h).cols;
        let c = net.tape.constant(Matrix::zeros(1, s));
        let step = decode_step(
            &mut net,
            &st.bank,
            st.merged,
            enc.gold_ids[0],
            enc.target_role,
            h,
            c,
            Some(0.0),
        );
        let attn = net.value(step.attn).clone();
        let mass: f64 = positions.iter().map(|&i| attn.get(0, i)).sum();
        let vf = net.value(step.final_dist).clone();
        assert!((vf.get(0, tok) - mass).abs() < 1e-12);
    }

    #[test]
    fn distributions_normalize_and_gate_stays_in_range() {
        let (vocab, _, _) = fixture();
        for seed in 0..30 {
            let params = fixture_params(&vocab, 200 + seed);
            let (st, enc) = staged(&params, &vocab);
            let mut net = st.net;
            let mut h = st.s0;
            let s = net.value(h).cols;
            let mut c = net.tape.constant(Matrix::zeros(1, s));
            let mut prev = enc.gold_ids[0];
            for t in 1..enc.gold_ids.len() {
                let step = decode_step(
                    &mut net,
                    &st.bank,
                    st.merged,
                    prev,
                    enc.target_role,
                    h,
                    c,
                    None,
                );
                let a: f64 = net.value(step.attn).data().iter().sum();
                let vs: f64 = net.value(step.vocab_dist).data().iter().sum();
                let vf: f64 = net.value(step.final_dist).data().iter().sum();
                let g = net.value(step.gate).get(0, 0);
                assert!((a - 1.0).abs() < 1e-9, "seed {seed}");
                assert!((vs - 1.0).abs() < 1e-9, "seed {seed}");
                assert!((vf - 1.0).abs() < 1e-6, "seed {seed}");
                assert!((0.0..=1.0).contains(&g), "seed {seed}");
                h = step.h;
                c = step.c;
                prev = enc.gold_ids[t];
            }
        }
    }

    #[test]
    fn uniform_generator_loss_is_ln_vocab_size() {
        // zeroed output projection makes V_s uniform; a pinned gate of 1
        // makes V_f uniform over the 10-token vocabulary
        let dims = tiny_dims(10, 2);
        let mut params = init_params(&dims, &mut Rng::new(6));
        for name in ["dec.vocab.hid.w", "dec.vocab.hid.b", "dec.vocab.out.w", "dec.vocab.out.b"] {
            let idx = params.idx(name);
            for v in params.value_mut(idx).data_mut() {
                *v = 0.0;
            }
        }
        let settings = inference();
        let mut net = Net::new(&params, &settings, Rng::new(0));
        let t = EncodedTurn {
            role: 0,
            ids: vec![4, 5, 6],
            words: vec!["a".into(), "b".into(), "c".into()],
        };
        let e = crate::model::encode_utterance(&mut net, &t);
        let bank = build_bank(&mut net, 10, &[(Origin::Target, &t, &e)]);
        let merged = net.tape.constant(Matrix::zeros(1, 24));
        let s0 = net.tape.constant(Matrix::zeros(1, 24));
        // hand-rolled loss loop with the gate pinned to 1
        let mut h = s0;
        let mut c = net.tape.constant(Matrix::zeros(1, 24));
        let gold = [BOS_ID, 4, EOS_ID];
        let mut lns = Vec::new();
        for t in 1..gold.len() {
            let step = decode_step(&mut net, &bank, merged, gold[t - 1], 0, h, c, Some(1.0));
            h = step.h;
            c = step.c;
            let p = net.tape.pick(step.final_dist, 0, gold[t]);
            let p = net.tape.clamp_min(p, PROB_FLOOR);
            lns.push(net.tape.ln(p));
        }
        let stacked = net.tape.concat_rows(&lns);
        let mean = net.tape.mean_all(stacked);
        let loss = net.tape.scale(mean, -1.0);
        assert!((net.value(loss).get(0, 0) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sequence_loss_matches_hand_summed_log_picks() {
        let (vocab, _, _) = fixture();
        let params = fixture_params(&vocab, 7);
        let (st, enc) = staged(&params, &vocab);
        let mut net = st.net;
        let out = sequence_loss(
            &mut net,
            &st.bank,
            st.merged,
            enc.target_role,
            &enc.gold_ids,
            &enc.gold_words,
            st.s0,
        );
        assert_eq!(out.position_count, enc.gold_ids.len() - 1);
        let mut sum = 0.0;
        for (step, &idx) in out.steps.iter().zip(&out.gold_ext) {
            sum -= net.value(step.final_dist).get(0, idx).max(PROB_FLOOR).ln();
        }
        let want = sum / out.position_count as f64;
        assert!((net.value(out.loss).get(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn oov_gold_scores_its_copy_entry_when_present() {
        // vocabulary without "tomorrow": the gold token is OOV but the
        // similar conversation supplies it to the bank
        let (_, _, _) = fixture();
        let mut corpus = crate::corpus::Corpus::new();
        corpus
            .push(crate::corpus::Conversation {
                id: "t".into(),
                turns: vec![
                    crate::corpus::Utterance::new("customer", "when does it arrive"),
                    crate::corpus::Utterance::new("agent", "it arrives tomorrow"),
                ],
            })
            .unwrap();
        let vocab = Vocabulary::build(
            ["when", "does", "it", "arrive", "arrives"].iter().copied(),
            &["customer".to_string(), "agent".to_string()],
            1,
            100,
        );
        let examples = crate::corpus::make_examples(&corpus, "agent");
        let enc = crate::corpus::encode_example(
            &examples[0],
            corpus.get("t").unwrap(),
            &vocab,
            crate::corpus::Truncation::default(),
        )
        .unwrap();
        let sims = vec![crate::model::SimilarInput {
            conversation_id: "s".into(),
            turns: vec![turn(&vocab, "agent", "parcel comes tomorrow")],
        }];
        let params = fixture_params(&vocab, 8);
        let st = stage(
            &params,
            vocab.size(),
            &enc.context,
            &sims,
            &inference(),
            Rng::new(0),
        );
        let mut net = st.net;
        let out = sequence_loss(
            &mut net,
            &st.bank,
            st.merged,
            enc.target_role,
            &enc.gold_ids,
            &enc.gold_words,
            st.s0,
        );
        // gold is "it arrives tomorrow": last word position gets the copy
        // entry for "tomorrow"
        let k = st
            .bank
            .oov_surfaces
            .iter()
            .position(|s| s == "tomorrow")
            .expect("bank has the OOV surface");
        assert_eq!(out.gold_ext[2], vocab.size() + k);
        // an OOV gold absent from the bank scores UNK
        assert_eq!(st.bank.gold_ext_index(UNK_ID, Some("zebra")), UNK_ID);
    }

    #[test]
    fn final_distribution_invariant_to_bank_part_order() {
        let (vocab, _, _) = fixture();
        let params = fixture_params(&vocab, 9);
        let settings = inference();
        let t1 = turn(&vocab, "customer", "where is my parcel");
        let t2 = turn(&vocab, "agent", "tracking shows tomorrow");
        let masses = |order: [(&EncodedTurn, Origin); 2]| {
            let mut net = Net::new(&params, &settings, Rng::new(0));
            let e1 = crate::model::encode_utterance(&mut net, order[0].0);
            let e2 = crate::model::encode_utterance(&mut net, order[1].0);
            let bank = build_bank(
                &mut net,
                vocab.size(),
                &[
                    (order[0].1, order[0].0, &e1),
                    (order[1].1, order[1].0, &e2),
                ],
            );
            let s = 24;
            let merged = net.tape.constant(Matrix::from_fn(1, s, |_, c| 0.01 * c as f64));
            let s0 = net.tape.constant(Matrix::from_fn(1, s, |_, c| 0.02 * c as f64));
            let c0 = net.tape.constant(Matrix::zeros(1, s));
            let step = decode_step(&mut net, &bank, merged, BOS_ID, 0, s0, c0, None);
            // collect mass per surface string so orderings compare
            let mut by_surface: std::collections::BTreeMap<String, f64> =
                std::collections::BTreeMap::new();
            for ext in 0..bank.ext_size() {
                let surf = bank.surface_of(&vocab, ext).to_string();
                *by_surface.entry(surf).or_default() += net.value(step.final_dist).get(0, ext);
            }
            by_surface
        };
        let a = masses([(&t1, Origin::Target), (&t2, Origin::Similar)]);
        let b = masses([(&t2, Origin::Similar), (&t1, Origin::Target)]);
        assert_eq!(a.len(), b.len());
        for (k, v) in &a {
            assert!((v - b[k]).abs() < 1e-12, "token {k}");
        }
    }

    #[test]
    fn rigged_eos_point_mass_gives_empty_output() {
        let (vocab, _, _) = fixture();
        let mut params = fixture_params(&vocab, 10);
        // push all generator probability onto EOS and the gate to 1
        let idx = params.idx("dec.vocab.out.b");
        params.value_mut(idx).set(0, EOS_ID, 1000.0);
        let gb = params.idx("dec.gate.b");
        params.value_mut(gb).set(0, 0, 1000.0);
        let (st, enc) = staged(&params, &vocab);
        let mut net = st.net;
        let result = generate(
            &mut net,
            &st.bank,
            st.merged,
            enc.target_role,
            st.s0,
            &vocab,
            GenMode::Greedy,
            20,
        );
        assert!(result.tokens.is_empty());
        assert_eq!(result.gates.len(), 1);
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        let (vocab, enc, sims) = fixture();
        for seed in 0..20 {
            let params = fixture_params(&vocab, 300 + seed);
            let run = |mode: GenMode| {
                let (res, _) = crate::model::generate_example(
                    &params,
                    &vocab,
                    &enc.context,
                    enc.target_role,
                    &sims,
                    &inference(),
                    mode,
                    12,
                );
                res.tokens
            };
            assert_eq!(run(GenMode::Greedy), run(GenMode::Beam(1)), "seed {seed}");
        }
    }

    #[test]
    fn generation_never_emits_pad_or_bos() {
        let (vocab, enc, sims) = fixture();
        for seed in 0..10 {
            let params = fixture_params(&vocab, 400 + seed);
            let (res, _) = crate::model::generate_example(
                &params,
                &vocab,
                &enc.context,
                enc.target_role,
                &sims,
                &inference(),
                GenMode::Beam(3),
                10,
            );
            assert!(res.ext_ids.iter().all(|&e| e != PAD_ID && e != BOS_ID));
            assert!(res.tokens.len() <= 10);
            assert_eq!(res.tokens.len(), res.provenance.len());
        }
    }
}
