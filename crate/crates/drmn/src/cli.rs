//! Command-line surface: argument parsing, subcommand dispatch, exit codes.
//!
//! One binary, ten subcommands, forming the pipeline DAG
//! synth -> vocab -> index -> retrieve -> train -> generate -> eval, plus
//! ablate (the five-variant comparison) and the diagnostics gradcheck and
//! trace-esm. Every output file is written atomically; config precedence is
//! command line > config file > defaults.

use crate::config::TrainConfig;
use crate::corpus::{make_examples, split_of, Corpus, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{forward_example, stage, GenMode, GenRecord, Mode};
use crate::retrieval::{
    build_index, build_index_filtered, build_similar_cache, load_cache, save_cache,
    InvertedIndex, Reranker, RetrievalConfig, SimilarSet,
};
use crate::rng::Rng;
use crate::training::{
    generate_records, log_csv, prepare_dataset, run_ablation, Checkpoint, Dataset,
    PreparedExample, Trainer,
};
use clap::{Args, Parser, Subcommand};
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes a file atomically: the bytes land in a sibling temp file which is
/// renamed over the target, so readers never observe a partial write.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let stamp = format!(
        ".{}.{}.tmp",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    );
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(stamp);
    let tmp = match dir {
        Some(d) => d.join(&name),
        None => std::path::PathBuf::from(&name),
    };
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "drmn",
    version,
    about = "Conversation generation with a shared memory read from similar dialogues"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic conversation corpus (JSONL)
    Synth(SynthArgs),
    /// Build the token vocabulary from a corpus
    Vocab(VocabArgs),
    /// Build the BM25 inverted index over the retrieval split
    Index(IndexArgs),
    /// Cache the top-k similar conversations for every example
    Retrieve(RetrieveArgs),
    /// Train a model; writes checkpoint, resolved config, and loss log
    Train(TrainArgs),
    /// Generate responses for a split from a trained checkpoint
    Generate(GenerateArgs),
    /// Score generated responses against gold references
    Eval(EvalArgs),
    /// Train and score all five model variants with a shared seed
    Ablate(AblateArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Dump the memory read weights for one example
    TraceEsm(TraceEsmArgs),
}

/// Training configuration source, shared by train and ablate. Defaults are
/// overridden by `--config` file lines, which are overridden by `--set`.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines (# comments allowed)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set seed=9 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set {kv:?}: expected KEY=VALUE")))?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Conversations to generate
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Generator seed
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Conversations per topic family
    #[arg(long, default_value_t = 5)]
    pub family_size: usize,
    /// Output corpus path (JSONL)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    /// Input corpus (JSONL)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Minimum token frequency
    #[arg(long, default_value_t = 2)]
    pub min_freq: u64,
    /// Maximum vocabulary size including the 4 reserved ids
    #[arg(long, default_value_t = 50000)]
    pub max_size: usize,
    /// Count tokens from every split, not just train
    #[arg(long)]
    pub all_splits: bool,
    /// Output vocabulary path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    /// Input corpus (JSONL)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Index every split, not just train (test retrieval leaks gold context)
    #[arg(long)]
    pub all_splits: bool,
    /// Output index path (JSON)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// Input corpus (JSONL)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Index built by `index`
    #[arg(long)]
    pub index: PathBuf,
    /// BM25 candidate pool size
    #[arg(long, default_value_t = 50)]
    pub pool: usize,
    /// Neighbors kept per example after reranking
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Candidate reranker: tfidf-cosine or embedding-cosine
    #[arg(long, default_value = "tfidf-cosine")]
    pub reranker: String,
    /// Role whose turns are generation targets
    #[arg(long, default_value = "agent")]
    pub target_role: String,
    /// Output cache path (JSONL)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Input corpus (JSONL)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary built by `vocab`
    #[arg(long)]
    pub vocab: PathBuf,
    /// Similar-conversation cache built by `retrieve` (required unless mode=esm_off)
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for checkpoint.bin, config.txt, and log.csv
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from the checkpoint already in --out-dir
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input corpus (JSONL)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary built by `vocab`
    #[arg(long)]
    pub vocab: PathBuf,
    /// Similar-conversation cache built by `retrieve`
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Split to generate for: train, dev, or test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Beam width; 1 means greedy
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    /// Maximum generated tokens per response
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    /// Output records path (JSONL)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Generated records (JSONL from `generate`)
    #[arg(long)]
    pub outputs: PathBuf,
    /// Corpus supplying the gold references
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split the outputs were generated for
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Role whose turns are generation targets
    #[arg(long, default_value = "agent")]
    pub target_role: String,
    /// Tokens kept per reference utterance (match the training truncation)
    #[arg(long, default_value_t = 30)]
    pub max_utt_tokens: usize,
    /// Variant label for the report row
    #[arg(long, default_value = "model")]
    pub variant: String,
    /// Optional CSV report path (the table always prints to stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Input corpus (JSONL)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary built by `vocab`
    #[arg(long)]
    pub vocab: PathBuf,
    /// Similar-conversation cache built by `retrieve`
    #[arg(long)]
    pub cache: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for the report and per-variant generations
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Synthetic conversations for the probe model
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Probe seed (corpus and parameter init)
    #[arg(long, default_value_t = 9)]
    pub seed: u64,
    /// Word embedding width of the probe model
    #[arg(long, default_value_t = 16)]
    pub word_dim: usize,
    /// Role embedding width of the probe model
    #[arg(long, default_value_t = 8)]
    pub role_dim: usize,
    /// LSTM width per direction of the probe model
    #[arg(long, default_value_t = 12)]
    pub hidden: usize,
    /// Vocabulary cap for the probe model
    #[arg(long, default_value_t = 50)]
    pub max_vocab: usize,
    /// Central-difference step; seeds whose relu preactivations fall
    /// within one step of zero report spurious errors on the biases
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    /// Maximum tolerated relative error
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct TraceEsmArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input corpus (JSONL)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary built by `vocab`
    #[arg(long)]
    pub vocab: PathBuf,
    /// Similar-conversation cache built by `retrieve`
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Example id (conversation#turn); defaults to the first test example
    #[arg(long)]
    pub example: Option<String>,
    /// Output file (defaults to stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses and dispatches. Errors bubble to `main`, which renders one line
/// and maps the kind to the exit code.
pub fn run() -> Result<()> {
    dispatch(Cli::parse())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Vocab(a) => cmd_vocab(a),
        Command::Index(a) => cmd_index(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::TraceEsm(a) => cmd_trace_esm(a),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(Error::Usage(format!(
            "unknown split {other:?} (expected train, dev or test)"
        ))),
    }
}

fn split_examples(data: &Dataset, split: Split) -> &[PreparedExample] {
    match split {
        Split::Train => &data.train,
        Split::Dev => &data.dev,
        Split::Test => &data.test,
    }
}

/// Loads the vocabulary and attaches the corpus role set (roles are not part
/// of the vocabulary file format).
fn load_vocab_for(path: &Path, corpus: &Corpus) -> Result<Vocabulary> {
    let mut vocab = Vocabulary::load(path)?;
    vocab.set_roles(corpus.role_set());
    Ok(vocab)
}

/// Loads the neighbor cache when the mode needs one; esm_off runs without.
fn load_cache_for(cfg: &TrainConfig, cache: &Option<PathBuf>) -> Result<Vec<SimilarSet>> {
    if cfg.mode == Mode::EsmOff {
        return Ok(Vec::new());
    }
    match cache {
        Some(path) => load_cache(path),
        None => Err(Error::Usage(format!(
            "mode {} needs --cache (run `retrieve` first)",
            cfg.mode.name()
        ))),
    }
}

/// Checks that a checkpoint's embedding tables match the corpus and
/// vocabulary it is asked to run against.
fn check_checkpoint_tables(ck: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    let words = ck.params.by_name("emb.word").rows;
    if words != vocab.size() {
        return Err(Error::Data(format!(
            "checkpoint was trained with {words} word ids but the vocabulary has {}",
            vocab.size()
        )));
    }
    let roles = ck.params.by_name("emb.role").rows;
    if roles != vocab.role_count() {
        return Err(Error::Data(format!(
            "checkpoint was trained with {roles} roles but the corpus has {}",
            vocab.role_count()
        )));
    }
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<GenRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open outputs {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: bad record: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn records_to_jsonl(records: &[GenRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)
            .map_err(|e| Error::Data(format!("record serialize: {e}")))?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let corpus = crate::corpus::synthesize(&crate::corpus::SynthConfig {
        n: args.n,
        seed: args.seed,
        family_size: args.family_size,
    });
    corpus.save(&args.out)?;
    println!("wrote {} conversations to {}", corpus.len(), args.out.display());
    Ok(())
}

fn cmd_vocab(args: VocabArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    // train-split counting by default: dev/test text must not shape the model
    let vocab = if args.all_splits {
        Vocabulary::from_corpus(&corpus, args.min_freq, args.max_size)
    } else {
        Vocabulary::build(
            corpus
                .iter()
                .filter(|c| split_of(&c.id) == Split::Train)
                .flat_map(|c| c.all_tokens()),
            &corpus.role_set(),
            args.min_freq,
            args.max_size,
        )
    };
    vocab.save(&args.out)?;
    println!(
        "wrote {} token ids ({} roles attach at load time) to {}",
        vocab.size(),
        corpus.role_set().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_index(args: IndexArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let index = if args.all_splits {
        build_index(&corpus)?
    } else {
        build_index_filtered(&corpus, |id| split_of(id) == Split::Train)?
    };
    index.save(&args.out)?;
    println!(
        "indexed {} conversations (avgdl {:.2}) to {}",
        index.n_docs(),
        index.avgdl(),
        args.out.display()
    );
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let index = InvertedIndex::load(&args.index)?;
    let examples = make_examples(&corpus, &args.target_role);
    if examples.is_empty() {
        return Err(Error::Data(format!(
            "no examples with target role {:?}",
            args.target_role
        )));
    }
    let cfg = RetrievalConfig {
        pool: args.pool,
        k: args.k,
        reranker: Reranker::parse(&args.reranker)?,
    };
    let sets = build_similar_cache(&index, &corpus, &corpus, &examples, &cfg)?;
    save_cache(&args.out, &sets)?;
    let short = sets.iter().filter(|s| s.short).count();
    println!(
        "cached neighbors for {} examples ({} short of k={}) to {}",
        sets.len(),
        short,
        args.k,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let ck_path = args.out_dir.join("checkpoint.bin");
    let resumed_from = if args.resume {
        if args.config.config.is_some() || !args.config.set.is_empty() {
            return Err(Error::Usage(
                "--resume uses the checkpoint's own config; drop --config/--set".into(),
            ));
        }
        Some(Checkpoint::load(&ck_path)?)
    } else {
        None
    };
    let cfg = match &resumed_from {
        Some(ck) => ck.config.clone(),
        None => args.config.resolve()?,
    };

    let corpus = Corpus::load(&args.corpus)?;
    let vocab = load_vocab_for(&args.vocab, &corpus)?;
    let cache = load_cache_for(&cfg, &args.cache)?;
    let data = prepare_dataset(&corpus, &vocab, &cache, &cfg)?;

    let mut trainer = match resumed_from {
        Some(ck) => {
            check_checkpoint_tables(&ck, &vocab)?;
            Trainer::from_checkpoint(ck, &data)?
        }
        None => Trainer::new(&cfg, &data, &vocab)?,
    };

    print!("resolved config:\n{}", cfg.echo());
    println!(
        "examples: train {} dev {} test {}",
        data.train.len(),
        data.dev.len(),
        data.test.len()
    );
    write_atomic(&args.out_dir.join("config.txt"), cfg.echo().as_bytes())?;

    // a resumed run extends the existing log rather than clobbering it
    let log_path = args.out_dir.join("log.csv");
    let prior = if args.resume {
        std::fs::read_to_string(&log_path)
            .ok()
            .map(|t| t.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>())
            .unwrap_or_default()
    } else {
        String::new()
    };

    while !trainer.should_stop() {
        let row = trainer.run_epoch()?;
        println!(
            "epoch {} train_loss {:.6} dev_loss {:.6} seconds {:.1}",
            row.epoch, row.train_loss, row.dev_loss, row.seconds
        );
        trainer.to_checkpoint().save(&ck_path)?;
        let body: String = log_csv(&trainer.log)
            .lines()
            .skip(1)
            .map(|l| format!("{l}\n"))
            .collect();
        write_atomic(
            &log_path,
            format!("epoch,train_loss,dev_loss,seconds\n{prior}{body}").as_bytes(),
        )?;
    }
    println!(
        "done: {} epochs, best dev loss {:.6}, checkpoint {}",
        trainer.epoch(),
        trainer.best_dev(),
        ck_path.display()
    );
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = ck.config.clone();
    let corpus = Corpus::load(&args.corpus)?;
    let vocab = load_vocab_for(&args.vocab, &corpus)?;
    check_checkpoint_tables(&ck, &vocab)?;
    let cache = load_cache_for(&cfg, &args.cache)?;
    let data = prepare_dataset(&corpus, &vocab, &cache, &cfg)?;
    let split = parse_split(&args.split)?;
    let examples = split_examples(&data, split);
    if examples.is_empty() {
        return Err(Error::Data(format!("split {} has no examples", args.split)));
    }
    if args.beam == 0 {
        return Err(Error::Usage("--beam must be at least 1".into()));
    }
    let gen = if args.beam <= 1 {
        GenMode::Greedy
    } else {
        GenMode::Beam(args.beam)
    };
    let records = generate_records(
        ck.inference_params(),
        &vocab,
        &cfg,
        examples,
        gen,
        args.max_len,
    );
    write_atomic(&args.out, &records_to_jsonl(&records)?)?;
    let copied = records.iter().filter(|r| r.copied_from_similar > 0).count();
    let gate_mean = records.iter().map(|r| r.gate_mean).sum::<f64>() / records.len() as f64;
    println!(
        "generated {} responses ({} with tokens copied from similars, mean gate {:.3}) to {}",
        records.len(),
        copied,
        gate_mean,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let records = read_records(&args.outputs)?;
    let outputs: Vec<(String, String)> = records
        .iter()
        .map(|r| (r.example_id.clone(), r.output.clone()))
        .collect();
    let corpus = Corpus::load(&args.corpus)?;
    let split = parse_split(&args.split)?;
    let refs: Vec<(String, String)> = make_examples(&corpus, &args.target_role)
        .iter()
        .filter(|ex| split_of(&ex.conversation_id) == split)
        .map(|ex| {
            let gold = ex.gold(corpus.get(&ex.conversation_id).expect("own conversation"));
            let text = gold
                .tokens
                .iter()
                .take(args.max_utt_tokens)
                .cloned()
                .collect::<Vec<_>>()
                .join(" ");
            (ex.id(), text)
        })
        .collect();
    let scores = crate::metrics::evaluate(&args.variant, &outputs, &refs)?;
    let report = crate::metrics::EvalReport { rows: vec![scores] };
    print!("{}", report.table());
    if let Some(out) = &args.out {
        write_atomic(out, report.csv().as_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let base = args.config.resolve()?;
    let corpus = Corpus::load(&args.corpus)?;
    let vocab = load_vocab_for(&args.vocab, &corpus)?;
    let cache = load_cache(&args.cache)?;
    print!("base config:\n{}", base.echo());
    write_atomic(&args.out_dir.join("config.txt"), base.echo().as_bytes())?;
    let (report, runs) = run_ablation(&base, &corpus, &vocab, &cache)?;
    for run in &runs {
        write_atomic(
            &args.out_dir.join(format!("gen_{}.jsonl", run.variant)),
            &records_to_jsonl(&run.records)?,
        )?;
    }
    write_atomic(&args.out_dir.join("report.csv"), report.csv().as_bytes())?;
    write_atomic(&args.out_dir.join("report.txt"), report.table().as_bytes())?;
    print!("{}", report.table());
    println!("wrote report and generations to {}", args.out_dir.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let corpus = crate::corpus::synthesize(&crate::corpus::SynthConfig {
        n: args.n.max(2),
        seed: args.seed,
        family_size: 5,
    });
    let vocab = Vocabulary::from_corpus(&corpus, 1, args.max_vocab);

    let mut cfg = TrainConfig::default();
    cfg.word_dim = args.word_dim;
    cfg.role_dim = args.role_dim;
    cfg.hidden = args.hidden;
    cfg.keep_prob = 1.0; // finite differences need a deterministic forward
    cfg.top_k = 1;
    cfg.max_context_turns = 2;
    cfg.seed = args.seed;
    cfg.min_freq = 1;

    let index = build_index(&corpus)?;
    let examples = make_examples(&corpus, &cfg.target_role);
    let rcfg = RetrievalConfig {
        pool: args.n.max(2),
        k: 1,
        reranker: Reranker::TfidfCosine,
    };
    let cache = build_similar_cache(&index, &corpus, &corpus, &examples, &rcfg)?;
    let prepared = crate::training::prepare_examples(&corpus, &vocab, &cache, &cfg, &examples)?;
    let probe = &prepared[0];

    let dims = cfg.dims(vocab.size(), vocab.role_count());
    let mut rng = Rng::new(cfg.seed);
    let mut params = crate::model::init_params(&dims, &mut rng);
    let settings = cfg.forward_settings(false);
    let report = crate::autodiff::grad_check(
        &mut params,
        |ps| {
            let pass = forward_example(
                ps,
                vocab.size(),
                &probe.encoded,
                &probe.similars,
                &settings,
                Rng::new(0),
            );
            (pass.net.tape, pass.loss)
        },
        args.step,
    )?;
    println!("{report}");
    let worst = report.max_rel_err();
    if report.passed(args.threshold) {
        println!(
            "ok: {} tensors, worst relative error {:.3e} < {:.1e}",
            report.entries.len(),
            worst,
            args.threshold
        );
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: worst relative error {worst:.3e} exceeds {:.1e}",
            args.threshold
        )))
    }
}

fn cmd_trace_esm(args: TraceEsmArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = ck.config.clone();
    let corpus = Corpus::load(&args.corpus)?;
    let vocab = load_vocab_for(&args.vocab, &corpus)?;
    check_checkpoint_tables(&ck, &vocab)?;
    let cache = load_cache_for(&cfg, &args.cache)?;
    let data = prepare_dataset(&corpus, &vocab, &cache, &cfg)?;

    let all: Vec<&PreparedExample> = data
        .test
        .iter()
        .chain(&data.dev)
        .chain(&data.train)
        .collect();
    let probe = match &args.example {
        Some(id) => *all
            .iter()
            .find(|p| &p.encoded.example_id == id)
            .ok_or_else(|| Error::Data(format!("example {id:?} not found")))?,
        None => all[0],
    };

    let settings = cfg.forward_settings(false);
    let staged = stage(
        ck.inference_params(),
        vocab.size(),
        &probe.encoded.context,
        &probe.similars,
        &settings,
        Rng::new(0),
    );
    let mut text = format!(
        "# example {}\n# step\tconversation\tutterance\tweights\n",
        probe.encoded.example_id
    );
    if staged.trace.is_empty() {
        text.push_str("# memory disabled for this mode; no reads\n");
    } else {
        text.push_str(&crate::model::render_trace(&staged.trace));
    }
    match &args.out {
        Some(path) => {
            write_atomic(path, text.as_bytes())?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn atomic_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"hello").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"hello");
        write_atomic(&path, b"world").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"world");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .ends_with(".tmp")
            })
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn atomic_write_creates_parent_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/out.txt");
        write_atomic(&path, b"x").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"x");
    }

    #[test]
    fn command_tree_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn set_overrides_beat_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "seed=3\nbatch_size=4\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            set: vec!["seed=11".into()],
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.batch_size, 4);
    }

    #[test]
    fn malformed_set_pairs_are_usage_errors() {
        let args = ConfigArgs {
            config: None,
            set: vec!["seed".into()],
        };
        let err = args.resolve().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_split_is_a_usage_error() {
        assert!(parse_split("train").is_ok());
        assert!(parse_split("dev").is_ok());
        assert!(parse_split("test").is_ok());
        let err = parse_split("validation").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
