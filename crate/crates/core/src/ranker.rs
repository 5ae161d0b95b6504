//! Turns decoder samples into a ranked list of entities.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, Query};
use crate::model::{Sampling, Scalar, Seq2SeqModel};
use crate::text::TextStore;
use crate::tokenizer::Tokenizer;

pub const DEFAULT_SAMPLES: usize = 500;

/// How repeated samples of the same entity combine into one score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Best log-probability among the matching samples.
    Max,
    /// Log of the fraction of samples that matched the entity.
    Frequency,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Max => "max",
            Aggregation::Frequency => "frequency",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "max" => Some(Aggregation::Max),
            "frequency" => Some(Aggregation::Frequency),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedAnswerList {
    pub query: Query,
    /// Sorted by score descending, then entity id ascending. Unique ids.
    pub candidates: Vec<(EntityId, f64)>,
    pub raw_samples: usize,
    pub matched_samples: usize,
}

impl RankedAnswerList {
    /// Builds a list from unsorted, possibly repeated scores (max kept).
    pub fn from_scores(query: Query, scores: impl IntoIterator<Item = (EntityId, f64)>) -> Self {
        let mut best: BTreeMap<EntityId, f64> = BTreeMap::new();
        for (e, s) in scores {
            let slot = best.entry(e).or_insert(f64::NEG_INFINITY);
            if s > *slot {
                *slot = s;
            }
        }
        let n = best.len();
        let mut candidates: Vec<_> = best.into_iter().collect();
        sort_candidates(&mut candidates);
        RankedAnswerList {
            query,
            candidates,
            raw_samples: n,
            matched_samples: n,
        }
    }

    pub fn empty(query: Query) -> Self {
        RankedAnswerList {
            query,
            candidates: Vec::new(),
            raw_samples: 0,
            matched_samples: 0,
        }
    }

    pub fn top(&self) -> Option<EntityId> {
        self.candidates.first().map(|c| c.0)
    }
}

fn sort_candidates(c: &mut [(EntityId, f64)]) {
    c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Maps decoded sample strings to entities and aggregates their scores.
/// Samples whose text is not an entity mention are dropped; an ambiguous
/// mention credits every entity it names.
pub fn rank_samples<'a>(
    query: Query,
    store: &TextStore,
    samples: impl IntoIterator<Item = (&'a str, f64)>,
    aggregation: Aggregation,
) -> RankedAnswerList {
    let mut best: BTreeMap<EntityId, (f64, usize)> = BTreeMap::new();
    let mut raw = 0;
    let mut matched = 0;
    for (text, lp) in samples {
        raw += 1;
        let ents = store.resolve_mention(text);
        if ents.is_empty() {
            continue;
        }
        matched += 1;
        for &e in ents {
            let slot = best.entry(e).or_insert((f64::NEG_INFINITY, 0));
            slot.0 = slot.0.max(lp);
            slot.1 += 1;
        }
    }
    let mut candidates: Vec<(EntityId, f64)> = best
        .into_iter()
        .map(|(e, (lp, n))| match aggregation {
            Aggregation::Max => (e, lp),
            Aggregation::Frequency => (e, (n as f64 / raw as f64).ln()),
        })
        .collect();
    sort_candidates(&mut candidates);
    RankedAnswerList {
        query,
        candidates,
        raw_samples: raw,
        matched_samples: matched,
    }
}

/// Settings for sample-based prediction.
#[derive(Clone, Copy, Debug)]
pub struct PredictConfig {
    pub samples: usize,
    pub sampling: Sampling,
    pub aggregation: Aggregation,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            samples: DEFAULT_SAMPLES,
            sampling: Sampling::Temperature(1.0),
            aggregation: Aggregation::Max,
        }
    }
}

/// Samples answers for a verbalized query and ranks the matched entities.
pub fn predict<T: Scalar>(
    model: &Seq2SeqModel<T>,
    tokenizer: &Tokenizer,
    store: &TextStore,
    query: Query,
    input: &str,
    config: &PredictConfig,
    seed: u64,
) -> Result<RankedAnswerList> {
    let source = tokenizer.encode(input);
    let samples = model.sample(&source, config.samples.max(1), config.sampling, seed)?;
    // unfinished samples are cut short and never count as a mention
    let texts: Vec<Option<(String, f64)>> = samples
        .iter()
        .map(|s| {
            s.finished
                .then(|| Ok((tokenizer.decode_target(&s.ids)?, s.log_prob)))
                .transpose()
        })
        .collect::<Result<_>>()?;
    Ok(rank_samples(
        query,
        store,
        texts.iter().map(|t| match t {
            Some((t, lp)) => (t.as_str(), *lp),
            None => ("", f64::NEG_INFINITY),
        }),
        config.aggregation,
    ))
}

/// Exact log-probability of every candidate's mention. Only feasible for
/// small candidate sets; used as a ranking oracle.
pub fn score_all_oracle<T: Scalar>(
    model: &Seq2SeqModel<T>,
    tokenizer: &Tokenizer,
    store: &TextStore,
    input: &str,
    candidates: &[EntityId],
) -> Result<Vec<(EntityId, f64)>> {
    let source = tokenizer.encode(input);
    let targets: Vec<Vec<u32>> = candidates
        .iter()
        .map(|&e| tokenizer.encode_target(store.entity_mention(e)))
        .collect();
    let scores = model.score_targets(&source, &targets)?;
    Ok(candidates.iter().copied().zip(scores).collect())
}

/// One line per query:
/// `entity<TAB>relation<TAB>direction<TAB>raw<TAB>matched<TAB>id:score ...`,
/// sorted by query.
pub fn predictions_to_tsv(predictions: &HashMap<Query, RankedAnswerList>) -> String {
    let mut keys: Vec<&Query> = predictions.keys().collect();
    keys.sort();
    let mut out = String::new();
    for q in keys {
        let p = &predictions[q];
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t",
            q.entity, q.relation, q.direction, p.raw_samples, p.matched_samples
        );
        for (i, (e, s)) in p.candidates.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{e}:{s:?}");
        }
        out.push('\n');
    }
    out
}

pub fn predictions_from_tsv(text: &str, path: &Path) -> Result<HashMap<Query, RankedAnswerList>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg: msg.to_owned(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad integer field"));
        let query = Query {
            entity: num(f[0])? as EntityId,
            relation: num(f[1])? as u32,
            direction: Direction::parse(f[2]).ok_or_else(|| bad("bad direction"))?,
        };
        let candidates = f[5]
            .split(' ')
            .filter(|c| !c.is_empty())
            .map(|c| {
                let (e, s) = c.split_once(':').ok_or_else(|| bad("candidate must be id:score"))?;
                Ok((
                    e.parse::<EntityId>().map_err(|_| bad("bad candidate id"))?,
                    s.parse::<f64>().map_err(|_| bad("bad candidate score"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let list = RankedAnswerList {
            query,
            candidates,
            raw_samples: num(f[3])? as usize,
            matched_samples: num(f[4])? as usize,
        };
        if out.insert(query, list).is_some() {
            return Err(bad("duplicate query"));
        }
    }
    Ok(out)
}
