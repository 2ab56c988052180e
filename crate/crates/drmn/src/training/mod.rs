//! Mini-batch training: deterministic given a seed, parallel over the
//! examples of a batch, early-stopped on dev loss, and resumable from a
//! checkpoint bit-for-bit.
//!
//! Batch gradients are merged in example order with position-count weights,
//! so thread count never changes the result.

mod checkpoint;
mod optimizer;

pub use checkpoint::{Best, Checkpoint};
pub use optimizer::{Optimizer, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::config::TrainConfig;
use crate::corpus::{
    encode_example, encode_turn, make_examples, split_of, Corpus, EncodedExample, Split,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, VariantScores};
use crate::model::{
    forward_example, generate_example, init_params, GenMode, GenRecord, Mode, SimilarInput,
};
use crate::params::{GradStore, ParamSet};
use crate::retrieval::SimilarSet;
use crate::rng::Rng;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

/// One example with its retrieved similar conversations already encoded.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub encoded: EncodedExample,
    pub similars: Vec<SimilarInput>,
}

/// Train/dev/test examples, split by conversation id hash.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<PreparedExample>,
    pub dev: Vec<PreparedExample>,
    pub test: Vec<PreparedExample>,
}

/// Encodes examples and joins them with their cached similar conversations.
/// `top_k` similars are kept per example; modes that ignore similars get
/// none. A missing cache row is an error when the config needs similars.
pub fn prepare_examples(
    corpus: &Corpus,
    vocab: &Vocabulary,
    cache: &[SimilarSet],
    cfg: &TrainConfig,
    examples: &[crate::corpus::TrainingExample],
) -> Result<Vec<PreparedExample>> {
    let by_id: std::collections::HashMap<&str, &SimilarSet> = cache
        .iter()
        .map(|s| (s.example_id.as_str(), s))
        .collect();
    let truncation = cfg.truncation();
    let wants_similars = cfg.mode != Mode::EsmOff && cfg.top_k > 0;
    let mut prepared = Vec::with_capacity(examples.len());
    for ex in examples {
        let conv = corpus
            .get(&ex.conversation_id)
            .ok_or_else(|| Error::Data(format!("conversation {} missing", ex.conversation_id)))?;
        let encoded = encode_example(ex, conv, vocab, truncation)?;
        let mut similars = Vec::new();
        if wants_similars {
            let set = by_id.get(encoded.example_id.as_str()).ok_or_else(|| {
                Error::Data(format!(
                    "no cached neighbors for example {}",
                    encoded.example_id
                ))
            })?;
            for n in set.neighbors.iter().take(cfg.top_k) {
                let sim_conv = corpus.get(&n.id).ok_or_else(|| {
                    Error::Data(format!("cached neighbor {} missing from corpus", n.id))
                })?;
                let turns = sim_conv
                    .turns
                    .iter()
                    .map(|t| encode_turn(t, vocab, cfg.max_utt_tokens))
                    .collect::<Result<Vec<_>>>()?;
                similars.push(SimilarInput {
                    conversation_id: n.id.clone(),
                    turns,
                });
            }
        }
        prepared.push(PreparedExample { encoded, similars });
    }
    Ok(prepared)
}

/// Builds the full dataset for a config: examples for the target role,
/// hashed into train/dev/test.
pub fn prepare_dataset(
    corpus: &Corpus,
    vocab: &Vocabulary,
    cache: &[SimilarSet],
    cfg: &TrainConfig,
) -> Result<Dataset> {
    let examples = make_examples(corpus, &cfg.target_role);
    if examples.is_empty() {
        return Err(Error::Data(format!(
            "no examples with target role {:?}",
            cfg.target_role
        )));
    }
    let prepared = prepare_examples(corpus, vocab, cache, cfg, &examples)?;
    let mut data = Dataset::default();
    for p in prepared {
        match split_of(&p.encoded.conversation_id) {
            Split::Train => data.train.push(p),
            Split::Dev => data.dev.push(p),
            Split::Test => data.test.push(p),
        }
    }
    if data.train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    Ok(data)
}

/// Runs `f` over `0..n` on up to `threads` workers; results come back in
/// index order regardless of scheduling.
fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = threads.max(1).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots = Mutex::new((0..n).map(|_| None).collect::<Vec<Option<T>>>());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("worker filled every slot"))
        .collect()
}

/// Loss and teacher-forced accuracy of a parameter set on a split, without
/// dropout. Position-weighted means, merged in example order.
pub struct SplitEval {
    pub loss: f64,
    pub accuracy: f64,
    pub positions: usize,
}

pub fn evaluate_split(
    params: &ParamSet,
    vocab_size: usize,
    examples: &[PreparedExample],
    cfg: &TrainConfig,
) -> Result<SplitEval> {
    if examples.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let settings = cfg.forward_settings(false);
    let results = parallel_map(examples.len(), cfg.worker_threads(), |i| {
        let ex = &examples[i];
        let pass = forward_example(
            params,
            vocab_size,
            &ex.encoded,
            &ex.similars,
            &settings,
            Rng::new(0),
        );
        let loss = pass.net.value(pass.loss).get(0, 0);
        (loss, pass.correct, pass.position_count)
    });
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut positions = 0usize;
    for (loss, c, n) in results {
        loss_sum += loss * n as f64;
        correct += c;
        positions += n;
    }
    Ok(SplitEval {
        loss: loss_sum / positions as f64,
        accuracy: correct as f64 / positions as f64,
        positions,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub seconds: f64,
}

/// Renders the training log as CSV. The seconds column is wall clock and is
/// the only part of a run that is not reproducible byte-for-byte.
pub fn log_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from("epoch,train_loss,dev_loss,seconds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.3}\n",
            r.epoch, r.train_loss, r.dev_loss, r.seconds
        ));
    }
    s
}

/// The trainer owns the parameters and walks epochs. All randomness flows
/// from one RNG whose state is checkpointed, so a resumed run continues the
/// exact same stream.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    data: &'d Dataset,
    vocab_size: usize,
    pub params: ParamSet,
    optimizer: Optimizer,
    rng: Rng,
    epoch: usize,
    since_best: usize,
    best: Option<Best>,
    pub log: Vec<EpochRow>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &TrainConfig, data: &'d Dataset, vocab: &Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims(vocab.size(), vocab.role_count());
        let mut rng = Rng::new(cfg.seed);
        let params = init_params(&dims, &mut rng);
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params);
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            vocab_size: vocab.size(),
            params,
            optimizer,
            rng,
            epoch: 0,
            since_best: 0,
            best: None,
            log: Vec::new(),
        })
    }

    /// Restores a trainer from a checkpoint. The dataset must have been
    /// prepared with the checkpoint's own config.
    pub fn from_checkpoint(ck: Checkpoint, data: &'d Dataset) -> Result<Self> {
        ck.config.validate()?;
        let vocab_size = ck.params.by_name("emb.word").rows;
        Ok(Trainer {
            cfg: ck.config,
            data,
            vocab_size,
            params: ck.params,
            optimizer: ck.optimizer,
            rng: Rng::from_state(ck.rng_state),
            epoch: ck.epoch,
            since_best: ck.since_best,
            best: ck.best,
            log: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best_dev(&self) -> f64 {
        self.best.as_ref().map(|b| b.dev_loss).unwrap_or(f64::INFINITY)
    }

    pub fn since_best(&self) -> usize {
        self.since_best
    }

    pub fn should_stop(&self) -> bool {
        self.epoch >= self.cfg.max_epochs || self.since_best >= self.cfg.patience
    }

    fn numeric_error(&self, grads: Option<&GradStore>, what: &str) -> Error {
        let name = grads
            .and_then(|g| g.first_nonfinite(&self.params))
            .or_else(|| self.params.first_nonfinite())
            .unwrap_or_else(|| "loss".to_string());
        Error::Numeric(format!(
            "non-finite {what} at epoch {}; first bad tensor: {name}",
            self.epoch
        ))
    }

    /// Runs one epoch: shuffled mini-batches, parallel forward/backward
    /// against the parameter snapshot, merged gradients, clip, step; then a
    /// dev pass and the early-stop bookkeeping.
    pub fn run_epoch(&mut self) -> Result<EpochRow> {
        let t0 = Instant::now();
        self.epoch += 1;
        let mut epoch_rng = self.rng.split();
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        epoch_rng.shuffle(&mut order);

        let settings = self.cfg.forward_settings(true);
        let threads = self.cfg.worker_threads();
        let mut loss_weighted = 0.0;
        let mut total_positions = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            // dropout seeds drawn serially so thread timing cannot reorder them
            let seeds: Vec<u64> = batch.iter().map(|_| epoch_rng.next_u64()).collect();
            let results = parallel_map(batch.len(), threads, |j| {
                let ex = &self.data.train[batch[j]];
                let pass = forward_example(
                    &self.params,
                    self.vocab_size,
                    &ex.encoded,
                    &ex.similars,
                    &settings,
                    Rng::new(seeds[j]),
                );
                let loss = pass.net.value(pass.loss).get(0, 0);
                let grads = pass.net.tape.backward(pass.loss, &self.params);
                (grads, loss, pass.position_count)
            });

            let batch_positions: usize = results.iter().map(|r| r.2).sum();
            let mut merged = GradStore::zeros(&self.params);
            let mut batch_loss = 0.0;
            for (grads, loss, count) in &results {
                let w = *count as f64 / batch_positions as f64;
                merged.add_scaled(grads, w);
                batch_loss += loss * w;
            }
            if !batch_loss.is_finite() {
                return Err(self.numeric_error(Some(&merged), "loss"));
            }
            if let Some(name) = merged.first_nonfinite(&self.params) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {}; first bad tensor: {name}",
                    self.epoch
                )));
            }
            merged.clip_global_norm(self.cfg.clip);
            self.optimizer.step(&mut self.params, &merged);
            loss_weighted += batch_loss * batch_positions as f64;
            total_positions += batch_positions;
        }
        if let Some(name) = self.params.first_nonfinite() {
            return Err(Error::Numeric(format!(
                "non-finite parameters at epoch {}; first bad tensor: {name}",
                self.epoch
            )));
        }
        let train_loss = loss_weighted / total_positions as f64;

        // dev loss drives early stopping; with no dev split the train loss
        // stands in so tiny corpora still converge deterministically
        let dev_loss = if self.data.dev.is_empty() {
            train_loss
        } else {
            evaluate_split(&self.params, self.vocab_size, &self.data.dev, &self.cfg)?.loss
        };
        self.track_dev(dev_loss);

        let row = EpochRow {
            epoch: self.epoch,
            train_loss,
            dev_loss,
            seconds: t0.elapsed().as_secs_f64(),
        };
        self.log.push(row.clone());
        Ok(row)
    }

    fn track_dev(&mut self, dev_loss: f64) {
        if dev_loss < self.best_dev() {
            self.best = Some(Best {
                dev_loss,
                params: self.params.clone(),
            });
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
    }

    /// Trains until the epoch budget or patience runs out.
    pub fn train(&mut self) -> Result<()> {
        while !self.should_stop() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            since_best: self.since_best,
            rng_state: self.rng.state(),
            best: self.best.clone(),
        }
    }

    /// Parameters for generation: best-on-dev when available.
    pub fn inference_params(&self) -> &ParamSet {
        self.best.as_ref().map(|b| &b.params).unwrap_or(&self.params)
    }
}

/// Free-running generation over a prepared split, one record per example.
pub fn generate_records(
    params: &ParamSet,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    examples: &[PreparedExample],
    gen: GenMode,
    max_len: usize,
) -> Vec<GenRecord> {
    let settings = cfg.forward_settings(false);
    parallel_map(examples.len(), cfg.worker_threads(), |i| {
        let ex = &examples[i];
        let (result, _) = generate_example(
            params,
            vocab,
            &ex.encoded.context,
            ex.encoded.target_role,
            &ex.similars,
            &settings,
            gen,
            max_len,
        );
        GenRecord {
            example_id: ex.encoded.example_id.clone(),
            output: result.text(),
            gold: ex.encoded.gold_words.join(" "),
            gate_mean: result.gate_mean(),
            copied_from_similar: result.copied_from_similar(),
        }
    })
}

/// (example_id, gold text) pairs for metric alignment.
pub fn references(examples: &[PreparedExample]) -> Vec<(String, String)> {
    examples
        .iter()
        .map(|ex| (ex.encoded.example_id.clone(), ex.encoded.gold_words.join(" ")))
        .collect()
}

/// The five ablation rows: memory depth 1-3, memory removed, and the naive
/// concatenation baseline. All share the base seed and hyperparameters.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut rows = Vec::new();
    for k in 1..=3usize {
        let mut cfg = base.clone();
        cfg.mode = Mode::Drmn;
        cfg.top_k = k;
        rows.push((format!("drmn_top{k}"), cfg));
    }
    let mut off = base.clone();
    off.mode = Mode::EsmOff;
    off.top_k = 0;
    rows.push(("esm_off".to_string(), off));
    let mut concat = base.clone();
    concat.mode = Mode::ConcatTcSc;
    concat.top_k = 1;
    rows.push(("concat_tc_sc".to_string(), concat));
    rows
}

/// Everything one ablation variant produced.
pub struct AblationRun {
    pub variant: String,
    pub config: TrainConfig,
    pub scores: VariantScores,
    pub records: Vec<GenRecord>,
}

/// Trains and evaluates every ablation variant on the test split with a
/// shared seed; returns the report plus per-variant artifacts.
pub fn run_ablation(
    base: &TrainConfig,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cache: &[SimilarSet],
) -> Result<(EvalReport, Vec<AblationRun>)> {
    let mut runs = Vec::new();
    for (variant, cfg) in ablation_variants(base) {
        cfg.validate()?;
        let data = prepare_dataset(corpus, vocab, cache, &cfg)?;
        if data.test.is_empty() {
            return Err(Error::Data("empty test split".into()));
        }
        let mut trainer = Trainer::new(&cfg, &data, vocab)?;
        trainer.train()?;
        let params = trainer.inference_params();
        let records = generate_records(
            params,
            vocab,
            &cfg,
            &data.test,
            GenMode::Greedy,
            cfg.max_utt_tokens,
        );
        let outputs: Vec<(String, String)> = records
            .iter()
            .map(|r| (r.example_id.clone(), r.output.clone()))
            .collect();
        let scores = evaluate(&variant, &outputs, &references(&data.test))?;
        runs.push(AblationRun {
            variant,
            config: cfg,
            scores,
            records,
        });
    }
    let report = EvalReport {
        rows: runs.iter().map(|r| r.scores.clone()).collect(),
    };
    Ok((report, runs))
}
