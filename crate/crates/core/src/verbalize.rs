//! Query verbalization for plain and context modes.
//!
//! Plain: `predict tail: <entity> | <relation> |`
//!
//! Context: `query: <entity> | <relation> | [description: <text> | ]context:`
//! followed by ` <relation> | <neighbor> <SEP>` per sampled neighbour.
//!
//! Relations pointing toward the anchor entity are written `reverse of <r>`.
//! Head queries `(?, r, o)` are phrased as tail queries from `o` over
//! `reverse of r`.

use std::fmt;

use crate::kg::{AdjEntry, Direction, EntityId, KnowledgeGraph, Query, Split, Triple};
use crate::seed;
use crate::text::TextStore;
use crate::tokenizer::Tokenizer;

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_TOKEN_BUDGET: usize = 512;
pub const SEP: &str = "<SEP>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Plain,
    Context,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Context => "context",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plain" => Some(Mode::Plain),
            "context" => Some(Mode::Context),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerbalizedExample {
    pub input_text: String,
    pub target_text: String,
    pub query: Query,
    pub gold: EntityId,
    pub context_used: Vec<AdjEntry>,
    pub mode: Mode,
    pub with_description: bool,
}

/// Relation mention as seen from the anchor entity.
pub fn relation_phrase(mention: &str, direction: Direction) -> String {
    match direction {
        Direction::Out => mention.to_owned(),
        Direction::In => format!("reverse of {mention}"),
    }
}

pub fn verbalize_plain(entity_mention: &str, relation_mention: &str, direction: Direction) -> String {
    format!(
        "predict tail: {entity_mention} | {} |",
        relation_phrase(relation_mention, direction)
    )
}

/// Renders one context pair, including its leading space.
fn context_pair(store: &TextStore, a: &AdjEntry) -> String {
    format!(
        " {} | {} {SEP}",
        relation_phrase(store.relation_mention(a.relation), a.direction),
        store.entity_mention(a.neighbor)
    )
}

/// Builds the context-mode input. Returns the text and the number of
/// `context` pairs that fit in `token_budget`.
pub fn verbalize_context(
    store: &TextStore,
    tokenizer: &Tokenizer,
    query: Query,
    context: &[AdjEntry],
    description: Option<&str>,
    token_budget: usize,
) -> (String, usize) {
    let mut text = format!(
        "query: {} | {} |",
        store.entity_mention(query.entity),
        relation_phrase(store.relation_mention(query.relation), query.direction)
    );
    if let Some(desc) = description {
        let desc = tokenizer.truncate(desc.trim(), token_budget / 2);
        text.push_str(" description: ");
        text.push_str(desc.trim_end());
        text.push_str(" |");
    }
    text.push_str(" context:");
    let mut used = tokenizer.count_tokens(&text);
    if used > token_budget {
        return (tokenizer.truncate(&text, token_budget), 0);
    }
    // Every pair starts with a space and `text` never ends in one, so token
    // counts add up chunk by chunk.
    let mut n = 0;
    for a in context {
        let pair = context_pair(store, a);
        let cost = tokenizer.count_tokens(&pair);
        if used + cost > token_budget {
            break;
        }
        used += cost;
        text.push_str(&pair);
        n += 1;
    }
    (text, n)
}

#[derive(Clone, Debug)]
pub struct VerbalizerConfig {
    pub mode: Mode,
    pub k: usize,
    pub token_budget: usize,
    pub with_descriptions: bool,
    /// Sample each training context once instead of once per epoch.
    pub freeze_context: bool,
}

impl Default for VerbalizerConfig {
    fn default() -> Self {
        VerbalizerConfig {
            mode: Mode::Context,
            k: DEFAULT_K,
            token_budget: DEFAULT_TOKEN_BUDGET,
            with_descriptions: false,
            freeze_context: false,
        }
    }
}

/// Binds the graph, text and tokenizer needed to verbalize queries.
#[derive(Clone, Copy)]
pub struct Verbalizer<'a> {
    pub kg: &'a KnowledgeGraph,
    pub store: &'a TextStore,
    pub tokenizer: &'a Tokenizer,
    pub config: &'a VerbalizerConfig,
}

impl<'a> Verbalizer<'a> {
    pub fn new(
        kg: &'a KnowledgeGraph,
        store: &'a TextStore,
        tokenizer: &'a Tokenizer,
        config: &'a VerbalizerConfig,
    ) -> Self {
        Verbalizer {
            kg,
            store,
            tokenizer,
            config,
        }
    }

    /// Verbalizes `query`. `exclude` removes one edge from the context pool
    /// before sampling.
    pub fn input(&self, query: Query, seed: u64, exclude: Option<AdjEntry>) -> (String, Vec<AdjEntry>, bool) {
        let c = self.config;
        match c.mode {
            Mode::Plain => {
                let text = verbalize_plain(
                    self.store.entity_mention(query.entity),
                    self.store.relation_mention(query.relation),
                    query.direction,
                );
                (self.tokenizer.truncate(&text, c.token_budget), Vec::new(), false)
            }
            Mode::Context => {
                let sampled = self
                    .kg
                    .neighborhood_excluding(query.entity, c.k, seed, exclude)
                    .expect("query entity comes from the KG");
                let desc = if c.with_descriptions {
                    self.store.description(query.entity)
                } else {
                    None
                };
                let (text, n) = verbalize_context(
                    self.store,
                    self.tokenizer,
                    query,
                    &sampled,
                    desc,
                    c.token_budget,
                );
                let mut used = sampled;
                used.truncate(n);
                (text, used, desc.is_some())
            }
        }
    }

    /// Evaluation-time input for a query: no exclusion, seed derived from the
    /// query so every caller sees the same context.
    pub fn query_input(&self, query: Query, base_seed: u64) -> String {
        self.input(query, query_seed(base_seed, query), None).0
    }

    /// One training example for `triple` asked in `direction`.
    pub fn example(&self, triple: Triple, direction: Direction, seed: u64) -> VerbalizedExample {
        let (query, gold) = Query::from_triple(triple, direction);
        let exclude = AdjEntry {
            relation: triple.r,
            neighbor: gold,
            direction,
        };
        let (input_text, context_used, with_description) = self.input(query, seed, Some(exclude));
        VerbalizedExample {
            input_text,
            target_text: self.store.entity_mention(gold).to_owned(),
            query,
            gold,
            context_used,
            mode: self.config.mode,
            with_description,
        }
    }

    /// Training stream for one epoch: for each train triple, its tail query
    /// then its head query.
    pub fn training_stream(&self, seed: u64, epoch: u64) -> TrainingStream<'a> {
        self.training_range(seed, epoch, 0..self.kg.split(Split::Train).len())
    }

    /// The slice of the epoch stream covering train triples `range`.
    pub fn training_range(
        &self,
        seed: u64,
        epoch: u64,
        range: std::ops::Range<usize>,
    ) -> TrainingStream<'a> {
        let epoch = if self.config.freeze_context { 0 } else { epoch };
        TrainingStream {
            verbalizer: *self,
            seed,
            epoch,
            next: range.start * 2,
            end: range.end * 2,
        }
    }
}

pub fn query_seed(base: u64, q: Query) -> u64 {
    seed::derive(
        base,
        &[0x5155_4552, q.entity as u64, q.relation as u64, q.direction as u64],
    )
}

pub struct TrainingStream<'a> {
    verbalizer: Verbalizer<'a>,
    seed: u64,
    epoch: u64,
    next: usize,
    end: usize,
}

impl Iterator for TrainingStream<'_> {
    type Item = VerbalizedExample;

    fn next(&mut self) -> Option<VerbalizedExample> {
        if self.next >= self.end {
            return None;
        }
        let idx = self.next;
        self.next += 1;
        let triple = self.verbalizer.kg.split(Split::Train)[idx / 2];
        let dir = if idx % 2 == 0 { Direction::Out } else { Direction::In };
        let s = seed::derive(self.seed, &[0x5452_4149, self.epoch, idx as u64]);
        Some(self.verbalizer.example(triple, dir, s))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.end - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for TrainingStream<'_> {}
