//! End-to-end steps shared by the command line and the test suites.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{eval_queries, EvalOptions, EvalReport};
use crate::kg::{KnowledgeGraph, Query, Split};
use crate::model::{Example, Sampling, Scalar, Seq2SeqModel, Trainer};
use crate::ranker::{predict, PredictConfig, RankedAnswerList};
use crate::seed;
use crate::text::TextStore;
use crate::tokenizer::Tokenizer;
use crate::verbalize::{Mode, VerbalizedExample, Verbalizer, VerbalizerConfig};

/// Texts the tokenizer is trained on: every mention and description, plus
/// one epoch of plain and context inputs budgeted in bytes. The result does
/// not depend on the mode, so both modes share one vocabulary.
pub fn tokenizer_corpus(
    kg: &KnowledgeGraph,
    store: &TextStore,
    config: &VerbalizerConfig,
    seed_value: u64,
) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for e in 0..kg.num_entities() as u32 {
        out.push(store.entity_mention(e).to_owned());
        if let Some(d) = store.description(e) {
            out.push(d.to_owned());
        }
    }
    for r in 0..kg.num_relations() as u32 {
        out.push(store.relation_mention(r).to_owned());
    }
    let bytes = Tokenizer::byte_level();
    for mode in [Mode::Plain, Mode::Context] {
        let cfg = VerbalizerConfig { mode, ..config.clone() };
        let v = Verbalizer::new(kg, store, &bytes, &cfg);
        out.extend(v.training_stream(seed_value, 0).map(|ex| ex.input_text));
    }
    out
}

pub fn train_tokenizer(
    kg: &KnowledgeGraph,
    store: &TextStore,
    config: &VerbalizerConfig,
    seed_value: u64,
    vocab_size: usize,
) -> Result<Tokenizer> {
    let corpus = tokenizer_corpus(kg, store, config, seed_value);
    Tokenizer::train(corpus.iter().map(String::as_str), vocab_size)
}

/// Token ids for one verbalized example, clipped to the model's lengths.
pub fn encode_example(tokenizer: &Tokenizer, ex: &VerbalizedExample, max_source: usize, max_target: usize) -> Example {
    let mut source = tokenizer.encode(&ex.input_text);
    source.truncate(max_source);
    let mut target = tokenizer.encode_target(&ex.target_text);
    target.truncate(max_target.saturating_sub(1));
    Example { source, target }
}

/// Training corpus for one epoch as `input<TAB>target` lines.
pub fn corpus_tsv(verbalizer: &Verbalizer<'_>, seed: u64, epoch: u64) -> String {
    let mut s = String::new();
    for ex in verbalizer.training_stream(seed, epoch) {
        let _ = writeln!(s, "{}\t{}", ex.input_text, ex.target_text);
    }
    s
}

/// Example order of one epoch: a seeded permutation of the stream.
pub fn epoch_examples(verbalizer: &Verbalizer<'_>, seed_value: u64, epoch: u64) -> Vec<VerbalizedExample> {
    let mut v: Vec<VerbalizedExample> = verbalizer.training_stream(seed_value, epoch).collect();
    v.shuffle(&mut seed::rng(seed::derive(seed_value, &[0x5348_5546, epoch])));
    v
}

/// Model configuration resolved against the tokenizer and verbalizer.
pub fn resolve_model_config(run: &RunConfig, tokenizer: &Tokenizer) -> crate::model::ModelConfig {
    let mut c = run.model.clone();
    c.vocab_size = tokenizer.vocab_size();
    c
}

/// Trains a fresh model for `run.steps` optimizer steps. `on_step` receives
/// the step number and its mean token loss.
pub fn train_seq2seq<T: Scalar>(
    verbalizer: &Verbalizer<'_>,
    run: &RunConfig,
    mut on_step: impl FnMut(u64, f64),
) -> Result<Seq2SeqModel<T>> {
    let mc = resolve_model_config(run, verbalizer.tokenizer);
    if run.token_budget > mc.max_source_len {
        log::warn!(
            "token budget {} exceeds max source length {}; inputs will be clipped",
            run.token_budget,
            mc.max_source_len
        );
    }
    if verbalizer.kg.split(Split::Train).is_empty() {
        return Err(Error::Validation("no train triples".into()));
    }
    let model = Seq2SeqModel::new(mc.clone(), seed::derive(run.seed, &[0x494e4954]))?;
    let mut trainer = Trainer::new(model, run.adam(), seed::derive(run.seed, &[0x44524f50]));
    let batch = run.batch_size.max(1);
    let mut epoch = 0u64;
    let mut pool: Vec<Example> = Vec::new();
    let mut cursor = 0;
    for step in 0..run.steps {
        let mut examples = Vec::with_capacity(batch);
        while examples.len() < batch {
            if cursor == pool.len() {
                pool = epoch_examples(verbalizer, run.seed, epoch)
                    .iter()
                    .map(|ex| encode_example(verbalizer.tokenizer, ex, mc.max_source_len, mc.max_target_len))
                    .collect();
                epoch += 1;
                cursor = 0;
            }
            let take = (batch - examples.len()).min(pool.len() - cursor);
            examples.extend_from_slice(&pool[cursor..cursor + take]);
            cursor += take;
        }
        let loss = trainer.train_step(&examples)?;
        on_step(step, loss);
    }
    Ok(trainer.model)
}

pub fn predict_config(run: &RunConfig) -> PredictConfig {
    PredictConfig {
        samples: run.samples,
        sampling: if run.temperature > 0.0 {
            Sampling::Temperature(run.temperature)
        } else {
            Sampling::Greedy
        },
        aggregation: run.aggregation,
    }
}

/// Sampled predictions for every query; deterministic given `run.seed`.
pub fn predict_queries<T: Scalar>(
    model: &Seq2SeqModel<T>,
    verbalizer: &Verbalizer<'_>,
    queries: &[Query],
    run: &RunConfig,
) -> Result<HashMap<Query, RankedAnswerList>> {
    let cfg = predict_config(run);
    let max_source = model.config().max_source_len;
    let lists: Vec<Result<RankedAnswerList>> = queries
        .par_iter()
        .map(|&q| {
            let input = verbalizer.query_input(q, run.seed);
            let input = verbalizer.tokenizer.truncate(&input, max_source);
            let s = seed::derive(crate::verbalize::query_seed(run.seed, q), &[0x5341_4d50]);
            predict(model, verbalizer.tokenizer, verbalizer.store, q, &input, &cfg, s)
        })
        .collect();
    lists.into_iter().map(|l| l.map(|l| (l.query, l))).collect()
}

/// Distinct evaluated queries of a split, in first-seen order.
pub fn split_queries(kg: &KnowledgeGraph, split: Split, both_directions: bool) -> Vec<Query> {
    let mut seen = std::collections::HashSet::new();
    eval_queries(kg, split, both_directions)
        .into_iter()
        .map(|(q, _)| q)
        .filter(|q| seen.insert(*q))
        .collect()
}

pub fn eval_options(run: &RunConfig, split: Split) -> EvalOptions {
    EvalOptions {
        split,
        both_directions: run.both_directions,
        macro_directions: run.macro_directions,
        degree_edges: run.degree_edges.clone(),
        fingerprint: run.fingerprint(),
    }
}

/// Predicts and evaluates one split.
pub fn evaluate_model<T: Scalar>(
    model: &Seq2SeqModel<T>,
    verbalizer: &Verbalizer<'_>,
    run: &RunConfig,
    split: Split,
) -> Result<(EvalReport, HashMap<Query, RankedAnswerList>)> {
    let queries = split_queries(verbalizer.kg, split, run.both_directions);
    let preds = predict_queries(model, verbalizer, &queries, run)?;
    let report = crate::eval::evaluate(verbalizer.kg, &preds, &eval_options(run, split))?;
    Ok((report, preds))
}
