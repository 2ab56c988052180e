//! The conversation generation model: hierarchical encoder, shared-memory
//! recurrence, and pointer-generator decoder, assembled per mode.
//!
//! All forward passes run on a fresh tape so every example's gradients are
//! exact and examples can be evaluated in parallel against one parameter
//! snapshot.

mod decoder;
mod encoder;
mod esm;

pub use decoder::{
    build_bank, decode_step, generate, sequence_loss, Bank, GenMode, GenRecord,
    GenerationResult, Origin, SeqLoss, StepOut,
};
pub use encoder::{
    embed_turn, encode_conversation, encode_similar, encode_utterance, ConvEnc, SimilarEnc,
    UttEnc,
};
pub use esm::{build_memory, memory_init, memory_step, render_trace, EsmReading, TraceStep};

use crate::autodiff::nn::{dropout, FfnWeights, LstmWeights};
use crate::autodiff::{NodeId, Tape};
use crate::corpus::{EncodedExample, EncodedTurn, Vocabulary};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::ParamSet;
use crate::rng::Rng;

/// Model dimensions. `hidden` is one LSTM direction; encoder outputs and
/// everything downstream are `2 * hidden` wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub roles: usize,
    pub word: usize,
    pub role: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn state(&self) -> usize {
        2 * self.hidden
    }

    pub fn embed(&self) -> usize {
        self.word + self.role
    }
}

/// Which pipeline variant runs: the full model, the memory-less ablation,
/// or the baseline that naively prepends similar turns to the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Drmn,
    EsmOff,
    ConcatTcSc,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Drmn => "drmn",
            Mode::EsmOff => "esm_off",
            Mode::ConcatTcSc => "concat_tc_sc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "drmn" => Ok(Mode::Drmn),
            "esm_off" => Ok(Mode::EsmOff),
            "concat_tc_sc" => Ok(Mode::ConcatTcSc),
            other => Err(Error::Usage(format!(
                "unknown mode {other:?} (expected drmn, esm_off or concat_tc_sc)"
            ))),
        }
    }
}

/// Which word states the copy bank holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankSpan {
    TargetAndSimilar,
    TargetOnly,
}

impl BankSpan {
    pub fn name(&self) -> &'static str {
        match self {
            BankSpan::TargetAndSimilar => "target_and_similar",
            BankSpan::TargetOnly => "target_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target_and_similar" => Ok(BankSpan::TargetAndSimilar),
            "target_only" => Ok(BankSpan::TargetOnly),
            other => Err(Error::Usage(format!(
                "unknown bank span {other:?} (expected target_and_similar or target_only)"
            ))),
        }
    }
}

/// Everything a forward pass needs besides parameters and data.
#[derive(Debug, Clone, Copy)]
pub struct ForwardSettings {
    pub mode: Mode,
    pub esm_reading: EsmReading,
    pub bank_span: BankSpan,
    pub keep_prob: f64,
    pub training: bool,
}

impl ForwardSettings {
    pub fn inference(mode: Mode, esm_reading: EsmReading, bank_span: BankSpan) -> Self {
        ForwardSettings {
            mode,
            esm_reading,
            bank_span,
            keep_prob: 1.0,
            training: false,
        }
    }
}

/// One retrieved similar conversation in encoded-token form, already in
/// descending-similarity order when passed as a slice.
#[derive(Debug, Clone)]
pub struct SimilarInput {
    pub conversation_id: String,
    pub turns: Vec<EncodedTurn>,
}

/// Working context of a single forward pass: the tape, the parameter
/// snapshot, cached parameter leaves, and the dropout stream.
pub struct Net<'p> {
    pub tape: Tape,
    pub params: &'p ParamSet,
    leaves: Vec<Option<NodeId>>,
    rng: Rng,
    training: bool,
    keep_prob: f64,
}

impl<'p> Net<'p> {
    pub fn new(params: &'p ParamSet, settings: &ForwardSettings, rng: Rng) -> Self {
        Net {
            tape: Tape::new(),
            params,
            leaves: vec![None; params.len()],
            rng,
            training: settings.training,
            keep_prob: settings.keep_prob,
        }
    }

    fn index(&self, name: &str) -> usize {
        self.params.idx(name)
    }

    /// Full-tensor parameter leaf, created once per tape.
    pub fn p(&mut self, name: &str) -> NodeId {
        let idx = self.index(name);
        if let Some(id) = self.leaves[idx] {
            return id;
        }
        let id = self.tape.param(self.params, idx);
        self.leaves[idx] = Some(id);
        id
    }

    /// Row gather from an embedding table; gradients scatter back to the
    /// listed rows only.
    pub fn rows(&mut self, name: &str, rows: &[usize]) -> NodeId {
        let idx = self.index(name);
        self.tape.param_rows(self.params, idx, rows)
    }

    pub fn lstm(&mut self, prefix: &str) -> LstmWeights {
        let wx = self.p(&format!("{prefix}.wx"));
        let wh = self.p(&format!("{prefix}.wh"));
        let b = self.p(&format!("{prefix}.b"));
        let hidden = self.tape.value(wh).rows;
        LstmWeights { wx, wh, b, hidden }
    }

    pub fn ffn(&mut self) -> FfnWeights {
        FfnWeights {
            w1: self.p("esm.ffn.w1"),
            b1: self.p("esm.ffn.b1"),
            w2: self.p("esm.ffn.w2"),
            b2: self.p("esm.ffn.b2"),
            gain: self.p("esm.ln.gain"),
            bias: self.p("esm.ln.bias"),
        }
    }

    pub fn drop(&mut self, x: NodeId) -> NodeId {
        dropout(&mut self.tape, &mut self.rng, x, self.keep_prob, self.training)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        self.tape.value(id)
    }
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

fn add_lstm(params: &mut ParamSet, rng: &mut Rng, prefix: &str, input: usize, hidden: usize) {
    let bound = 1.0 / (hidden as f64).sqrt();
    params.add(format!("{prefix}.wx"), uniform(rng, input, 4 * hidden, bound));
    params.add(format!("{prefix}.wh"), uniform(rng, hidden, 4 * hidden, bound));
    // forget-gate bias starts at +1 so early training keeps cell state
    let mut b = Matrix::zeros(1, 4 * hidden);
    for c in hidden..2 * hidden {
        b.set(0, c, 1.0);
    }
    params.add(format!("{prefix}.b"), b);
}

fn add_linear(params: &mut ParamSet, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    params.add(format!("{name}.w"), uniform(rng, fan_in, fan_out, bound));
    params.add(format!("{name}.b"), Matrix::zeros(1, fan_out));
}

/// Builds the full parameter set in a fixed order. The order is part of the
/// checkpoint contract: gradients, optimizer state and serialized tensors
/// all align by index.
pub fn init_params(dims: &ModelDims, rng: &mut Rng) -> ParamSet {
    let s = dims.state();
    let e = dims.embed();
    let mut p = ParamSet::new();

    p.add("emb.word", uniform(rng, dims.vocab, dims.word, 0.1));
    p.add("emb.role", uniform(rng, dims.roles, dims.role, 0.1));

    add_lstm(&mut p, rng, "enc.utt.l0.fwd", e, dims.hidden);
    add_lstm(&mut p, rng, "enc.utt.l0.bwd", e, dims.hidden);
    add_lstm(&mut p, rng, "enc.utt.l1.fwd", s, dims.hidden);
    add_lstm(&mut p, rng, "enc.utt.l1.bwd", s, dims.hidden);
    add_linear(&mut p, rng, "att.word", s, s);

    add_lstm(&mut p, rng, "enc.conv.l0.fwd", s, dims.hidden);
    add_lstm(&mut p, rng, "enc.conv.l0.bwd", s, dims.hidden);
    add_lstm(&mut p, rng, "enc.conv.l1.fwd", s, dims.hidden);
    add_lstm(&mut p, rng, "enc.conv.l1.bwd", s, dims.hidden);
    add_linear(&mut p, rng, "att.sent", s, s);

    let bound = 1.0 / (s as f64).sqrt();
    p.add("esm.ffn.w1", uniform(rng, s, s, bound));
    p.add("esm.ffn.b1", Matrix::zeros(1, s));
    p.add("esm.ffn.w2", uniform(rng, s, s, bound));
    p.add("esm.ffn.b2", Matrix::zeros(1, s));
    p.add("esm.ln.gain", Matrix::from_fn(1, s, |_, _| 1.0));
    p.add("esm.ln.bias", Matrix::zeros(1, s));

    add_linear(&mut p, rng, "dec.init", s, s);
    add_lstm(&mut p, rng, "dec.lstm", e, s);
    add_linear(&mut p, rng, "dec.vocab.hid", 2 * s, s);
    add_linear(&mut p, rng, "dec.vocab.out", s, dims.vocab);
    p.add("dec.gate.wx", uniform(rng, s, 1, bound));
    p.add("dec.gate.wc", uniform(rng, s, 1, bound));
    p.add("dec.gate.ws", uniform(rng, s, 1, bound));
    p.add("dec.gate.b", Matrix::zeros(1, 1));

    p
}

/// Infers dims back from a parameter set (used when loading checkpoints).
pub fn dims_of(params: &ParamSet) -> ModelDims {
    let word_tab = params.by_name("emb.word");
    let role_tab = params.by_name("emb.role");
    let wh = params.by_name("enc.utt.l0.fwd.wh");
    ModelDims {
        vocab: word_tab.rows,
        roles: role_tab.rows,
        word: word_tab.cols,
        role: role_tab.cols,
        hidden: wh.rows,
    }
}

/// Per-mode arrangement of one example's inputs: which turns the encoder
/// sees and which parts feed the copy bank and the memory.
struct Arranged<'a> {
    enc_turns: Vec<&'a EncodedTurn>,
    enc_origins: Vec<Origin>,
    memory_similars: &'a [SimilarInput],
}

fn arrange<'a>(
    mode: Mode,
    context: &'a [EncodedTurn],
    similars: &'a [SimilarInput],
) -> Arranged<'a> {
    match mode {
        Mode::Drmn | Mode::EsmOff => Arranged {
            enc_turns: context.iter().collect(),
            enc_origins: vec![Origin::Target; context.len()],
            memory_similars: if mode == Mode::Drmn { similars } else { &[] },
        },
        Mode::ConcatTcSc => {
            // prepend similar turns to the context; the memory path stays off
            let mut turns: Vec<&EncodedTurn> = Vec::new();
            let mut origins = Vec::new();
            for sim in similars {
                for t in &sim.turns {
                    turns.push(t);
                    origins.push(Origin::Similar);
                }
            }
            for t in context {
                turns.push(t);
                origins.push(Origin::Target);
            }
            Arranged {
                enc_turns: turns,
                enc_origins: origins,
                memory_similars: &[],
            }
        }
    }
}

/// Encoder + memory + bank, shared by the loss and generation paths.
pub struct Staged<'p> {
    pub net: Net<'p>,
    pub conv: ConvEnc,
    /// Similar conversations as the memory consumed them, in plan order.
    pub sims: Vec<SimilarEnc>,
    pub memory: NodeId,
    pub trace: Vec<TraceStep>,
    pub merged: NodeId,
    pub s0: NodeId,
    pub bank: Bank,
}

pub fn stage<'p>(
    params: &'p ParamSet,
    vocab_size: usize,
    context: &[EncodedTurn],
    similars: &[SimilarInput],
    settings: &ForwardSettings,
    rng: Rng,
) -> Staged<'p> {
    assert!(!context.is_empty(), "empty context");
    let mut net = Net::new(params, settings, rng);
    let arranged = arrange(settings.mode, context, similars);

    let conv = encode_conversation(&mut net, &arranged.enc_turns);

    let sim_encs: Vec<SimilarEnc> = arranged
        .memory_similars
        .iter()
        .map(|s| encode_similar(&mut net, &s.conversation_id, &s.turns))
        .collect();
    let (memory, trace) = build_memory(&mut net, conv.last_query, &sim_encs, settings.esm_reading);

    let merged = net.tape.add(conv.summary, memory);
    let w = net.p("dec.init.w");
    let b = net.p("dec.init.b");
    let lin = net.tape.matmul(merged, w);
    let aff = net.tape.add_row(lin, b);
    let s0 = net.tape.tanh(aff);

    // bank order: encoder turns first, then (full model only) the similar
    // utterances in plan order
    let mut parts: Vec<(Origin, &EncodedTurn, &UttEnc)> = arranged
        .enc_turns
        .iter()
        .zip(&conv.turns)
        .zip(&arranged.enc_origins)
        .map(|((t, u), o)| (*o, *t, u))
        .collect();
    if settings.mode == Mode::Drmn && settings.bank_span == BankSpan::TargetAndSimilar {
        for (sim, enc) in arranged.memory_similars.iter().zip(&sim_encs) {
            for (t, u) in sim.turns.iter().zip(&enc.turns) {
                parts.push((Origin::Similar, t, u));
            }
        }
    }
    let bank = build_bank(&mut net, vocab_size, &parts);

    Staged {
        net,
        conv,
        sims: sim_encs,
        memory,
        trace,
        merged,
        s0,
        bank,
    }
}

/// Teacher-forced loss pass over one example.
pub struct ForwardPass<'p> {
    pub net: Net<'p>,
    pub loss: NodeId,
    /// Number of scored positions (gold length including EOS).
    pub position_count: usize,
    /// Teacher-forced argmax hits against gold, same denominator.
    pub correct: usize,
    pub gates: Vec<f64>,
    pub trace: Vec<TraceStep>,
}

pub fn forward_example<'p>(
    params: &'p ParamSet,
    vocab_size: usize,
    example: &EncodedExample,
    similars: &[SimilarInput],
    settings: &ForwardSettings,
    rng: Rng,
) -> ForwardPass<'p> {
    let staged = stage(params, vocab_size, &example.context, similars, settings, rng);
    let Staged {
        mut net,
        trace,
        merged,
        s0,
        bank,
        ..
    } = staged;
    let out = sequence_loss(
        &mut net,
        &bank,
        merged,
        example.target_role,
        &example.gold_ids,
        &example.gold_words,
        s0,
    );
    ForwardPass {
        net,
        loss: out.loss,
        position_count: out.position_count,
        correct: out.correct,
        gates: out.gates,
        trace,
    }
}

/// Free-running generation for one example context.
pub fn generate_example(
    params: &ParamSet,
    vocab: &Vocabulary,
    context: &[EncodedTurn],
    target_role: usize,
    similars: &[SimilarInput],
    settings: &ForwardSettings,
    gen: GenMode,
    max_len: usize,
) -> (GenerationResult, Vec<TraceStep>) {
    let staged = stage(
        params,
        vocab.size(),
        context,
        similars,
        settings,
        Rng::new(0),
    );
    let Staged {
        mut net,
        trace,
        merged,
        s0,
        bank,
        ..
    } = staged;
    let result = generate(&mut net, &bank, merged, target_role, s0, vocab, gen, max_len);
    (result, trace)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::corpus::{encode_example, make_examples, Corpus, Truncation};

    pub fn tiny_dims(vocab: usize, roles: usize) -> ModelDims {
        ModelDims {
            vocab,
            roles,
            word: 16,
            role: 8,
            hidden: 12,
        }
    }

    pub fn turn(vocab: &Vocabulary, role: &str, text: &str) -> EncodedTurn {
        let utt = crate::corpus::Utterance::new(role, text);
        crate::corpus::encode_turn(&utt, vocab, 30).unwrap()
    }

    /// Tiny two-role corpus + vocab + one encoded example + one similar
    /// conversation, enough to exercise every code path.
    pub fn fixture() -> (Vocabulary, EncodedExample, Vec<SimilarInput>) {
        let mut corpus = Corpus::new();
        corpus
            .push(crate::corpus::Conversation {
                id: "t0".into(),
                turns: vec![
                    crate::corpus::Utterance::new("customer", "where is my parcel"),
                    crate::corpus::Utterance::new("agent", "let me check the tracking"),
                    crate::corpus::Utterance::new("customer", "thanks a lot"),
                    crate::corpus::Utterance::new("agent", "the parcel arrives tomorrow"),
                ],
            })
            .unwrap();
        corpus
            .push(crate::corpus::Conversation {
                id: "s0".into(),
                turns: vec![
                    crate::corpus::Utterance::new("customer", "parcel status please"),
                    crate::corpus::Utterance::new("agent", "tracking shows tomorrow"),
                ],
            })
            .unwrap();
        let vocab = Vocabulary::from_corpus(&corpus, 1, 100);
        let examples = make_examples(&corpus, "agent");
        let ex = examples
            .iter()
            .find(|e| e.conversation_id == "t0" && e.turn_index == 3)
            .unwrap();
        let enc = encode_example(
            ex,
            corpus.get("t0").unwrap(),
            &vocab,
            Truncation::default(),
        )
        .unwrap();
        let sim = SimilarInput {
            conversation_id: "s0".into(),
            turns: corpus
                .get("s0")
                .unwrap()
                .turns
                .iter()
                .map(|t| crate::corpus::encode_turn(t, &vocab, 30).unwrap())
                .collect(),
        };
        (vocab, enc, vec![sim])
    }

    pub fn fixture_params(vocab: &Vocabulary, seed: u64) -> ParamSet {
        let dims = tiny_dims(vocab.size(), vocab.role_count());
        init_params(&dims, &mut Rng::new(seed))
    }
}
