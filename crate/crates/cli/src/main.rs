use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use kgctx::config::{parse_kv, RunConfig};
use kgctx::eval::{
    bucket_by_degree, bucket_by_frequency, buckets_csv, buckets_svg, evaluate, BucketStat, DegreeEdges, EvalReport,
};
use kgctx::kg::{read_triples, Direction, KnowledgeGraph, Query, Split};
use kgctx::kge::{ensemble_predictions, train_kge, ComplEx, KgeConfig};
use kgctx::model::checkpoint;
use kgctx::pipeline::{
    corpus_tsv, eval_options, evaluate_model, predict_queries, resolve_model_config, split_queries, train_seq2seq,
    train_tokenizer,
};
use kgctx::ranker::{predictions_from_tsv, predictions_to_tsv};
use kgctx::synth::{generate_synthetic_kg, MentionScheme, SynthSpec};
use kgctx::text::{load_text, TextStore};
use kgctx::tokenizer::Tokenizer;
use kgctx::verbalize::Verbalizer;

/// Bad flags or flag combinations. Reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Parser)]
#[command(name = "kgctx", version, about = "Context-augmented seq2seq link prediction")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "KGCTX_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the verbalized training corpus of one epoch.
    Prepare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Tokenizer(TokenizerCommand),
    /// Train a seq2seq model and write a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Log the training loss every N steps.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Rank answers for one query.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `<entity> <relation> <direction>` with direction `out` or `in`.
        #[arg(long)]
        query: String,
    },
    /// Evaluate a checkpoint on a split and write a JSON report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the ranked lists (input for `ensemble`).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Bucket breakdowns of one or more reports.
    Analyze {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        /// `degree` or `frequency`.
        #[arg(long, default_value = "degree")]
        by: String,
        #[arg(long)]
        degree_edges: Option<String>,
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Pool reports even if their fingerprints differ.
        #[arg(long)]
        force: bool,
    },
    #[command(subcommand)]
    Kge(KgeCommand),
    /// Route between seq2seq predictions and a KGE model by query frequency.
    Ensemble {
        #[command(flatten)]
        run: RunArgs,
        /// Predictions written by `eval --predictions`.
        #[arg(long)]
        seq2seq: PathBuf,
        #[arg(long)]
        kge: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Queries with fewer train answers than this use the seq2seq list.
        #[arg(long)]
        threshold: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic KG with a controlled context hit rate.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        entities: usize,
        #[arg(long, default_value_t = 4)]
        relation_pairs: usize,
        #[arg(long, default_value_t = 400)]
        base_facts: usize,
        #[arg(long, default_value_t = 100)]
        valid: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        /// Fraction of held-out answers inside the query entity's neighbourhood.
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        isolated_entities: usize,
        #[arg(long, default_value_t = 0.0)]
        isolated_fraction: f64,
        /// `syllable` or `numbered`.
        #[arg(long, default_value = "syllable")]
        mentions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum TokenizerCommand {
    /// Train a subword vocabulary on the verbalized corpus.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum KgeCommand {
    /// Train a ComplEx model.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a ComplEx model with full ranking.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        kge: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

/// Flags shared by commands that resolve a run configuration. Values are
/// applied in order: embedded config, `--config` file, then flags.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    entity_mentions: Option<PathBuf>,
    #[arg(long)]
    relation_mentions: Option<PathBuf>,
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// `plain` or `context`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    token_budget: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut run = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (k, v) in parse_kv(&text)? {
                run.set(&k, &v)?;
            }
        }
        let paths = [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
            ("entity_mentions", &self.entity_mentions),
            ("relation_mentions", &self.relation_mentions),
            ("descriptions", &self.descriptions),
            ("vocab", &self.vocab),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                run.set(k, &p.display().to_string())?;
            }
        }
        let values = [
            ("mode", self.mode.clone()),
            ("k", self.k.map(|v| v.to_string())),
            ("token_budget", self.token_budget.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("samples", self.samples.map(|v| v.to_string())),
        ];
        for (k, v) in values {
            if let Some(v) = v {
                run.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return usage(format!("--set expects KEY=VALUE, got `{kv}`"));
            };
            run.set(k.trim(), v.trim())?;
        }
        Ok(run)
    }
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing {}", path.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match Split::parse(s) {
        Some(s) => Ok(s),
        None => usage(format!("unknown split `{s}` (expected train, valid or test)")),
    }
}

fn load_kg(run: &RunConfig) -> Result<KnowledgeGraph> {
    let Some(train) = &run.train else {
        return usage("no train triples given (--train or `train` in the config)");
    };
    let read = |p: &Option<PathBuf>| p.as_deref().map(read_triples).transpose().map(Option::unwrap_or_default);
    let kg = KnowledgeGraph::from_raw(&read_triples(train)?, &read(&run.valid)?, &read(&run.test)?)?;
    log::info!(
        "loaded KG: {} entities, {} relations, {} train triples",
        kg.num_entities(),
        kg.num_relations(),
        kg.split(Split::Train).len()
    );
    Ok(kg)
}

fn load_store(run: &RunConfig, kg: &KnowledgeGraph) -> Result<TextStore> {
    let (Some(e), Some(r)) = (&run.entity_mentions, &run.relation_mentions) else {
        return usage("entity and relation mention files are required (--entity-mentions, --relation-mentions)");
    };
    if run.with_descriptions && run.descriptions.is_none() {
        return usage("with_descriptions is set but no --descriptions file was given");
    }
    Ok(load_text(kg, e, r, run.descriptions.as_deref())?)
}

fn tokenizer_for(run: &RunConfig, kg: &KnowledgeGraph, store: &TextStore) -> Result<Tokenizer> {
    match &run.vocab {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Tokenizer::from_text(&text)?)
        }
        None => {
            log::info!("training tokenizer with {} pieces", run.model.vocab_size);
            Ok(train_tokenizer(kg, store, &run.verbalizer(), run.seed, run.model.vocab_size)?)
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(checkpoint::decode::<f32>(&bytes).with_context(|| format!("decoding {}", path.display()))?)
}

fn load_kge(path: &Path) -> Result<(ComplEx<f32>, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ComplEx::<f32>::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?)
}

fn report_json(report: &EvalReport) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn summarize(report: &EvalReport) {
    log::info!(
        "{}: MRR {:.4} H@1 {:.4} H@3 {:.4} H@10 {:.4} over {} queries ({} without predictions)",
        report.split,
        report.mrr,
        report.hits_at_1,
        report.hits_at_3,
        report.hits_at_10,
        report.queries,
        report.missing_predictions
    );
}

fn cmd_prepare(args: &RunArgs, epoch: u64, out: Option<&Path>) -> Result<()> {
    let run = args.resolve(RunConfig::default())?;
    let kg = load_kg(&run)?;
    let store = load_store(&run, &kg)?;
    let tok = tokenizer_for(&run, &kg, &store)?;
    let vcfg = run.verbalizer();
    let v = Verbalizer::new(&kg, &store, &tok, &vcfg);
    let body = format!("# fingerprint {}\n{}", run.fingerprint(), corpus_tsv(&v, run.seed, epoch));
    emit(out, body.as_bytes())
}

fn cmd_tokenizer_train(args: &RunArgs, vocab_size: Option<usize>, out: &Path) -> Result<()> {
    let mut run = args.resolve(RunConfig::default())?;
    if let Some(n) = vocab_size {
        run.model.vocab_size = n;
    }
    run.vocab = None;
    let kg = load_kg(&run)?;
    let store = load_store(&run, &kg)?;
    let tok = tokenizer_for(&run, &kg, &store)?;
    write_atomic(out, tok.to_text().as_bytes())
}

fn cmd_train(args: &RunArgs, out: &Path, log_every: u64) -> Result<()> {
    let run = args.resolve(RunConfig::default())?;
    let kg = load_kg(&run)?;
    let store = load_store(&run, &kg)?;
    let tok = tokenizer_for(&run, &kg, &store)?;
    let vcfg = run.verbalizer();
    let v = Verbalizer::new(&kg, &store, &tok, &vcfg);
    log::info!("training {} steps in {} mode, fingerprint {}", run.steps, run.mode, run.fingerprint());
    let every = log_every.max(1);
    let model = train_seq2seq::<f32>(&v, &run, |step, loss| {
        if step % every == 0 || step + 1 == run.steps {
            log::info!("step {step} loss {loss:.4}");
        }
    })?;
    write_atomic(out, &checkpoint::encode(&model, &tok, &run.to_text()))
}

/// Checkpoint, resolved config and data for the commands that decode.
fn open_checkpoint(args: &RunArgs, path: &Path) -> Result<(checkpoint::Checkpoint<f32>, RunConfig)> {
    let ckpt = load_checkpoint(path)?;
    let run = args.resolve(RunConfig::from_text(&ckpt.run_config)?)?;
    if &resolve_model_config(&run, &ckpt.tokenizer) != ckpt.model.config() {
        return usage("model settings differ from the checkpoint's; drop the model overrides");
    }
    Ok((ckpt, run))
}

fn cmd_predict(args: &RunArgs, path: &Path, query: &str) -> Result<()> {
    let (ckpt, run) = open_checkpoint(args, path)?;
    let kg = load_kg(&run)?;
    let store = load_store(&run, &kg)?;
    let parts: Vec<&str> = query.split_whitespace().collect();
    let [e, r, d] = parts[..] else {
        return usage(format!("--query expects `<entity> <relation> <direction>`, got `{query}`"));
    };
    let q = Query {
        entity: kg.entities().id(e).with_context(|| format!("unknown entity `{e}`"))?,
        relation: kg.relations().id(r).with_context(|| format!("unknown relation `{r}`"))?,
        direction: match Direction::parse(d) {
            Some(d) => d,
            None => return usage(format!("unknown direction `{d}` (expected out or in)")),
        },
    };
    let vcfg = run.verbalizer();
    let v = Verbalizer::new(&kg, &store, &ckpt.tokenizer, &vcfg);
    let preds = predict_queries(&ckpt.model, &v, &[q], &run)?;
    let list = &preds[&q];
    log::info!("{} of {} samples matched an entity", list.matched_samples, list.raw_samples);
    let mut out = String::new();
    for (id, score) in &list.candidates {
        out.push_str(&format!("{}\t{score}\n", kg.entities().name(*id)));
    }
    emit(None, out.as_bytes())
}

fn cmd_eval(args: &RunArgs, path: &Path, split: &str, out: Option<&Path>, preds_out: Option<&Path>) -> Result<()> {
    let split = parse_split(split)?;
    let (ckpt, run) = open_checkpoint(args, path)?;
    let kg = load_kg(&run)?;
    let store = load_store(&run, &kg)?;
    let vcfg = run.verbalizer();
    let v = Verbalizer::new(&kg, &store, &ckpt.tokenizer, &vcfg);
    let (report, preds) = evaluate_model(&ckpt.model, &v, &run, split)?;
    summarize(&report);
    if let Some(p) = preds_out {
        write_atomic(p, predictions_to_tsv(&preds).as_bytes())?;
    }
    emit(out, &report_json(&report)?)
}

fn cmd_analyze(
    reports: &[PathBuf],
    by: &str,
    degree_edges: Option<&str>,
    plot: Option<&Path>,
    csv: Option<&Path>,
    force: bool,
) -> Result<()> {
    let mut loaded = Vec::new();
    for p in reports {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        loaded.push(r);
    }
    let first = loaded[0].fingerprint.clone();
    if let Some(other) = loaded.iter().find(|r| r.fingerprint != first) {
        if !force {
            return usage(format!(
                "reports have different fingerprints ({first} vs {}); pass --force to pool them",
                other.fingerprint
            ));
        }
        log::warn!("pooling reports with different fingerprints");
    }
    let ranks: Vec<_> = loaded.iter().flat_map(|r| r.per_query.iter().cloned()).collect();
    let (title, buckets): (&str, Vec<BucketStat>) = match by {
        "degree" => {
            let edges = match degree_edges {
                Some(s) => DegreeEdges::parse(s)?,
                None => DegreeEdges::default(),
            };
            ("MRR by query entity degree", bucket_by_degree(&ranks, &edges))
        }
        "frequency" => ("MRR by query frequency", bucket_by_frequency(&ranks)),
        other => return usage(format!("unknown grouping `{other}` (expected degree or frequency)")),
    };
    let table = buckets_csv(&buckets);
    if let Some(p) = csv {
        write_atomic(p, table.as_bytes())?;
    }
    if let Some(p) = plot {
        write_atomic(p, buckets_svg(title, &buckets).as_bytes())?;
    }
    emit(None, table.as_bytes())
}

fn cmd_kge_train(
    args: &RunArgs,
    dim: Option<usize>,
    epochs: Option<usize>,
    negatives: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut run = args.resolve(RunConfig::default())?;
    run.kge_dim = dim.unwrap_or(run.kge_dim);
    run.kge_epochs = epochs.unwrap_or(run.kge_epochs);
    run.kge_negatives = negatives.unwrap_or(run.kge_negatives);
    let kg = load_kg(&run)?;
    let config = KgeConfig {
        dim: run.kge_dim,
        epochs: run.kge_epochs,
        negatives: run.kge_negatives,
        lr: run.kge_lr,
        batch: run.kge_batch,
        seed: run.seed,
    };
    let (model, losses) = train_kge::<f32>(&kg, &config)?;
    for (i, l) in losses.iter().enumerate() {
        log::info!("epoch {i} loss {l:.4}");
    }
    write_atomic(out, &model.to_bytes(&run.to_text()))
}

fn open_kge(args: &RunArgs, path: &Path) -> Result<(ComplEx<f32>, RunConfig, KnowledgeGraph)> {
    let (model, text) = load_kge(path)?;
    let run = args.resolve(RunConfig::from_text(&text)?)?;
    let kg = load_kg(&run)?;
    if model.num_entities() != kg.num_entities() || model.num_relations() != kg.num_relations() {
        return usage(format!(
            "KGE checkpoint has {} entities and {} relations, the KG has {} and {}",
            model.num_entities(),
            model.num_relations(),
            kg.num_entities(),
            kg.num_relations()
        ));
    }
    Ok((model, run, kg))
}

fn cmd_kge_eval(args: &RunArgs, path: &Path, split: &str, out: Option<&Path>, preds_out: Option<&Path>) -> Result<()> {
    let split = parse_split(split)?;
    let (model, run, kg) = open_kge(args, path)?;
    let preds = model.rank_all(&split_queries(&kg, split, run.both_directions))?;
    let report = evaluate(&kg, &preds, &eval_options(&run, split))?;
    summarize(&report);
    if let Some(p) = preds_out {
        write_atomic(p, predictions_to_tsv(&preds).as_bytes())?;
    }
    emit(out, &report_json(&report)?)
}

fn cmd_ensemble(
    args: &RunArgs,
    seq_path: &Path,
    kge_path: &Path,
    split: &str,
    threshold: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let split = parse_split(split)?;
    let (model, mut run, kg) = open_kge(args, kge_path)?;
    run.router_threshold = threshold.unwrap_or(run.router_threshold);
    let text = fs::read_to_string(seq_path).with_context(|| format!("reading {}", seq_path.display()))?;
    let seq = predictions_from_tsv(&text, seq_path)?;
    let kge = model.rank_all(&split_queries(&kg, split, run.both_directions))?;
    let preds = ensemble_predictions(&kg, &seq, &kge, run.router_threshold)?;
    let report = evaluate(&kg, &preds, &eval_options(&run, split))?;
    summarize(&report);
    emit(out, &report_json(&report)?)
}

fn cmd_synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<()> {
    let g = generate_synthetic_kg(spec, seed)?;
    for (name, body) in g.files() {
        write_atomic(&out.join(name), body.as_bytes())?;
    }
    let p = |name: &str| out.join(name).display().to_string();
    let config = format!(
        "train = {}\nvalid = {}\ntest = {}\nentity_mentions = {}\nrelation_mentions = {}\n",
        p("train.tsv"),
        p("valid.tsv"),
        p("test.tsv"),
        p("entity_mentions.tsv"),
        p("relation_mentions.tsv")
    );
    write_atomic(&out.join("kgctx.conf"), config.as_bytes())?;
    log::info!(
        "realized context hit rate: valid {:.4}, test {:.4}",
        g.realized_p[0],
        g.realized_p[1]
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Prepare { run, epoch, out } => cmd_prepare(&run, epoch, out.as_deref()),
        Command::Tokenizer(TokenizerCommand::Train { run, vocab_size, out }) => {
            cmd_tokenizer_train(&run, vocab_size, &out)
        }
        Command::Train { run, out, log_every } => cmd_train(&run, &out, log_every),
        Command::Predict { run, checkpoint, query } => cmd_predict(&run, &checkpoint, &query),
        Command::Eval { run, checkpoint, split, out, predictions } => {
            cmd_eval(&run, &checkpoint, &split, out.as_deref(), predictions.as_deref())
        }
        Command::Analyze { reports, by, degree_edges, plot, csv, force } => cmd_analyze(
            &reports,
            &by,
            degree_edges.as_deref(),
            plot.as_deref(),
            csv.as_deref(),
            force,
        ),
        Command::Kge(KgeCommand::Train { run, dim, epochs, negatives, out }) => {
            cmd_kge_train(&run, dim, epochs, negatives, &out)
        }
        Command::Kge(KgeCommand::Eval { run, kge, split, out, predictions }) => {
            cmd_kge_eval(&run, &kge, &split, out.as_deref(), predictions.as_deref())
        }
        Command::Ensemble { run, seq2seq, kge, split, threshold, out } => {
            cmd_ensemble(&run, &seq2seq, &kge, &split, threshold, out.as_deref())
        }
        Command::Synth {
            out,
            entities,
            relation_pairs,
            base_facts,
            valid,
            test,
            p,
            isolated_entities,
            isolated_fraction,
            mentions,
            seed,
        } => {
            let Some(mentions) = MentionScheme::parse(&mentions) else {
                return usage(format!("unknown mention scheme `{mentions}` (expected syllable or numbered)"));
            };
            let spec = SynthSpec {
                entities,
                relation_pairs,
                base_facts,
                valid,
                test,
                p,
                isolated_entities,
                isolated_fraction,
                mentions,
            };
            cmd_synth(&spec, seed, &out)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let is_usage = err.downcast_ref::<Usage>().is_some()
        || matches!(err.downcast_ref::<kgctx::Error>(), Some(kgctx::Error::Config(_)));
    if is_usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == 2 { "usage error" } else { "error" };
            eprintln!("kgctx: {kind}: {e:#}");
            ExitCode::from(code)
        }
    }
}
