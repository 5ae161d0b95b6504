//! Filtered ranking metrics with mean-rank tie handling, plus the
//! frequency, degree and context-hit analyses.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, FrequencyBucket, KnowledgeGraph, Query, Split};
use crate::ranker::RankedAnswerList;

/// Filtered rank of `gold` among `num_entities` entities.
///
/// Entities in `filter` are removed. Entities missing from `candidates` sit
/// in one tie block at `-inf`, below every listed score. Ties are resolved
/// with the mean position of the tie block: `better + (tied + 1) / 2` where
/// `tied` counts the block including gold.
pub fn filtered_rank(
    candidates: &[(EntityId, f64)],
    gold: EntityId,
    filter: &[EntityId],
    num_entities: usize,
) -> Result<f64> {
    if gold as usize >= num_entities {
        return Err(Error::Lookup {
            kind: "gold entity",
            id: gold.to_string(),
        });
    }
    let filter: HashSet<EntityId> = filter.iter().copied().collect();
    if filter.contains(&gold) {
        return Err(Error::Validation(format!("gold entity {gold} is in its own filter set")));
    }
    if let Some(&bad) = filter.iter().find(|&&e| e as usize >= num_entities) {
        return Err(Error::Lookup {
            kind: "filtered entity",
            id: bad.to_string(),
        });
    }
    let mut scores: HashMap<EntityId, f64> = HashMap::with_capacity(candidates.len());
    for &(e, s) in candidates {
        if e as usize >= num_entities {
            return Err(Error::Lookup {
                kind: "candidate entity",
                id: e.to_string(),
            });
        }
        let s = if s.is_nan() { f64::NEG_INFINITY } else { s };
        let slot = scores.entry(e).or_insert(f64::NEG_INFINITY);
        *slot = slot.max(s);
    }
    let gold_score = scores.get(&gold).copied().unwrap_or(f64::NEG_INFINITY);
    let mut better = 0usize;
    let mut tied = 0usize;
    let mut listed = 0usize;
    for (&e, &s) in &scores {
        if filter.contains(&e) {
            continue;
        }
        listed += 1;
        if e == gold {
            continue;
        }
        if s > gold_score {
            better += 1;
        } else if s == gold_score {
            tied += 1;
        }
    }
    if gold_score == f64::NEG_INFINITY {
        let unlisted = num_entities - filter.len() - listed;
        let gold_unlisted = usize::from(!scores.contains_key(&gold));
        tied += unlisted - gold_unlisted;
    }
    Ok(better as f64 + (tied as f64 + 2.0) / 2.0)
}

/// Upper-inclusive degree bucket bounds; the last may be infinite.
#[derive(Clone, Debug, PartialEq)]
pub struct DegreeEdges(Vec<f64>);

impl Default for DegreeEdges {
    fn default() -> Self {
        DegreeEdges(vec![1.0, 10.0, 100.0, 1000.0, f64::INFINITY])
    }
}

impl DegreeEdges {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Config("degree edges must not be empty".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| e.is_nan() || *e < 0.0) {
            return Err(Error::Config("degree edges must be strictly increasing and non-negative".into()));
        }
        let mut edges = edges;
        if edges.last().is_some_and(|e| e.is_finite()) {
            edges.push(f64::INFINITY);
        }
        Ok(DegreeEdges(edges))
    }

    pub fn parse(s: &str) -> Result<Self> {
        let edges = s
            .split(',')
            .map(|p| match p.trim() {
                "inf" | "∞" => Ok(f64::INFINITY),
                v => v
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad degree edge `{v}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(edges)
    }

    pub fn bucket(&self, degree: usize) -> usize {
        let d = degree as f64;
        self.0.iter().position(|&e| d <= e).unwrap_or(self.0.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn label(&self, i: usize) -> String {
        let lo = if i == 0 { 0.0 } else { self.0[i - 1].floor() + 1.0 };
        let hi = self.0[i];
        if hi.is_infinite() {
            format!("{lo}+")
        } else if lo == hi {
            format!("{hi}")
        } else {
            format!("{lo}-{hi}")
        }
    }
}

impl fmt::Display for DegreeEdges {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|e| if e.is_infinite() { "inf".into() } else { e.to_string() })
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Outcome for one evaluated query direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub entity: EntityId,
    pub relation: u32,
    pub direction: String,
    pub gold: EntityId,
    pub rank: f64,
    pub frequency: usize,
    pub degree: usize,
}

impl QueryRank {
    pub fn query(&self) -> Query {
        Query {
            entity: self.entity,
            relation: self.relation,
            direction: Direction::parse(&self.direction).expect("written by us"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub label: String,
    pub queries: usize,
    pub weight: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
    pub mrr_tail: Option<f64>,
    pub mrr_head: Option<f64>,
    pub macro_directions: bool,
    pub frequency_buckets: Vec<BucketStat>,
    pub degree_buckets: Vec<BucketStat>,
    pub context_hit_rate: f64,
    pub queries: usize,
    pub missing_predictions: usize,
    pub fingerprint: String,
    pub per_query: Vec<QueryRank>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub split: Split,
    pub both_directions: bool,
    pub macro_directions: bool,
    pub degree_edges: DegreeEdges,
    pub fingerprint: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Test,
            both_directions: true,
            macro_directions: false,
            degree_edges: DegreeEdges::default(),
            fingerprint: String::new(),
        }
    }
}

/// The `(query, gold)` pairs evaluated for a split, in triple order.
pub fn eval_queries(kg: &KnowledgeGraph, split: Split, both_directions: bool) -> Vec<(Query, EntityId)> {
    let dirs: &[Direction] = if both_directions {
        &[Direction::Out, Direction::In]
    } else {
        &[Direction::Out]
    };
    kg.split(split)
        .iter()
        .flat_map(|&t| dirs.iter().map(move |&d| Query::from_triple(t, d)))
        .collect()
}

/// Ranks every evaluated query of the split. Missing predictions count as
/// empty candidate lists.
pub fn rank_queries(
    kg: &KnowledgeGraph,
    predictions: &HashMap<Query, RankedAnswerList>,
    split: Split,
    both_directions: bool,
) -> Result<(Vec<QueryRank>, usize)> {
    let mut missing = 0;
    let mut out = Vec::new();
    for (q, gold) in eval_queries(kg, split, both_directions) {
        let cands: &[(EntityId, f64)] = match predictions.get(&q) {
            Some(p) => &p.candidates,
            None => {
                missing += 1;
                &[]
            }
        };
        let filter = kg.filter_set(q, gold);
        let rank = filtered_rank(cands, gold, &filter, kg.num_entities())?;
        out.push(QueryRank {
            entity: q.entity,
            relation: q.relation,
            direction: q.direction.as_str().into(),
            gold,
            rank,
            frequency: kg.query_frequency(q)?,
            degree: kg.degree(q.entity),
        });
    }
    if missing > 0 {
        log::warn!("{missing} queries had no prediction and were ranked pessimistically");
    }
    Ok((out, missing))
}

fn mrr(ranks: &[&QueryRank]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|r| 1.0 / r.rank).sum::<f64>() / ranks.len() as f64
}

fn buckets<'a>(
    ranks: &'a [QueryRank],
    n: usize,
    key: impl Fn(&QueryRank) -> usize,
    label: impl Fn(usize) -> String,
) -> Vec<BucketStat> {
    let mut groups: Vec<Vec<&'a QueryRank>> = vec![Vec::new(); n];
    for r in ranks {
        groups[key(r)].push(r);
    }
    let total = ranks.len().max(1) as f64;
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| BucketStat {
            label: label(i),
            queries: g.len(),
            weight: g.len() as f64 / total,
            mrr: mrr(g),
        })
        .collect()
}

/// MRR within the query-frequency buckets 0, 1-10 and >10.
pub fn bucket_by_frequency(ranks: &[QueryRank]) -> Vec<BucketStat> {
    buckets(
        ranks,
        3,
        |r| FrequencyBucket::of(r.frequency) as usize,
        |i| FrequencyBucket::ALL[i].label().into(),
    )
}

/// MRR and query share within query-entity degree buckets.
pub fn bucket_by_degree(ranks: &[QueryRank], edges: &DegreeEdges) -> Vec<BucketStat> {
    buckets(ranks, edges.len(), |r| edges.bucket(r.degree), |i| edges.label(i))
}

/// Share of the split's triples whose object is a train neighbour of the
/// subject.
pub fn context_hit_rate(kg: &KnowledgeGraph, split: Split) -> f64 {
    let triples = kg.split(split);
    if triples.is_empty() {
        return 0.0;
    }
    let hits = triples.iter().filter(|t| kg.is_neighbor(t.s, t.o)).count();
    hits as f64 / triples.len() as f64
}

/// Aggregates already-computed ranks into a report.
pub fn report_from_ranks(
    kg: &KnowledgeGraph,
    ranks: Vec<QueryRank>,
    missing: usize,
    opts: &EvalOptions,
) -> EvalReport {
    let all: Vec<&QueryRank> = ranks.iter().collect();
    let hits = |k: f64| {
        if all.is_empty() {
            0.0
        } else {
            all.iter().filter(|r| r.rank <= k).count() as f64 / all.len() as f64
        }
    };
    let by_dir = |d: &str| {
        let v: Vec<&QueryRank> = ranks.iter().filter(|r| r.direction == d).collect();
        (!v.is_empty()).then(|| mrr(&v))
    };
    let mrr_tail = by_dir("out");
    let mrr_head = by_dir("in");
    let pooled = mrr(&all);
    let headline = match (opts.macro_directions, mrr_tail, mrr_head) {
        (true, Some(t), Some(h)) => (t + h) / 2.0,
        _ => pooled,
    };
    EvalReport {
        split: opts.split.as_str().into(),
        mrr: headline,
        hits_at_1: hits(1.0),
        hits_at_3: hits(3.0),
        hits_at_10: hits(10.0),
        mrr_tail,
        mrr_head,
        macro_directions: opts.macro_directions,
        frequency_buckets: bucket_by_frequency(&ranks),
        degree_buckets: bucket_by_degree(&ranks, &opts.degree_edges),
        context_hit_rate: context_hit_rate(kg, opts.split),
        queries: ranks.len(),
        missing_predictions: missing,
        fingerprint: opts.fingerprint.clone(),
        per_query: ranks,
    }
}

/// Filtered metrics for `predictions` over the chosen split.
pub fn evaluate(
    kg: &KnowledgeGraph,
    predictions: &HashMap<Query, RankedAnswerList>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let (ranks, missing) = rank_queries(kg, predictions, opts.split, opts.both_directions)?;
    Ok(report_from_ranks(kg, ranks, missing, opts))
}

pub fn buckets_csv(buckets: &[BucketStat]) -> String {
    let mut s = String::from("bucket,queries,weight,mrr\n");
    for b in buckets {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", b.label, b.queries, b.weight, b.mrr);
    }
    s
}

/// Bar chart of bucket MRR with the bucket weight in brackets.
pub fn buckets_svg(title: &str, buckets: &[BucketStat]) -> String {
    let bar_w = 60.0;
    let gap = 20.0;
    let plot_h = 200.0;
    let left = 50.0;
    let top = 40.0;
    let width = left + buckets.len() as f64 * (bar_w + gap) + gap;
    let height = top + plot_h + 60.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    let base = top + plot_h;
    let _ = writeln!(s, r#"<line x1="{left}" y1="{base}" x2="{width}" y2="{base}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/>"#);
    for tick in [0.0, 0.5, 1.0] {
        let y = base - tick * plot_h;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{tick:.1}</text>"#, left - 5.0, y + 4.0);
    }
    for (i, b) in buckets.iter().enumerate() {
        let x = left + gap + i as f64 * (bar_w + gap);
        let h = b.mrr.clamp(0.0, 1.0) * plot_h;
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{}" width="{bar_w}" height="{h}" fill="#4477aa"/>"##,
            base - h
        );
        let cx = x + bar_w / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="middle">{:.3}</text>"#,
            base - h - 4.0,
            b.mrr
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text>"#,
            base + 16.0,
            escape(&b.label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="middle">({:.2})</text>"#,
            base + 32.0,
            b.weight
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
