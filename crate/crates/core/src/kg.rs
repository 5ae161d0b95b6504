//! In-memory knowledge graph: vocabularies, splits, train adjacency and
//! per-split answer indexes.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

pub type EntityId = u32;
pub type RelationId = u32;

/// Which side of an edge the anchor entity sits on.
///
/// For an adjacency entry, `Out` means the anchor is the subject. For a query,
/// `Out` is a tail query `(e, r, ?)` and `In` a head query `(?, r, e)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Out,
    In,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Out => "out",
            Direction::In => "in",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "out" | "tail" => Some(Direction::Out),
            "in" | "head" => Some(Direction::In),
            _ => None,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub s: EntityId,
    pub r: RelationId,
    pub o: EntityId,
}

/// One incident train edge seen from an anchor entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdjEntry {
    pub relation: RelationId,
    pub neighbor: EntityId,
    pub direction: Direction,
}

/// A directed link-prediction query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Query {
    pub entity: EntityId,
    pub relation: RelationId,
    pub direction: Direction,
}

impl Query {
    /// The query asked of `t` in `direction`, together with its gold answer.
    pub fn from_triple(t: Triple, direction: Direction) -> (Query, EntityId) {
        match direction {
            Direction::Out => (
                Query {
                    entity: t.s,
                    relation: t.r,
                    direction,
                },
                t.o,
            ),
            Direction::In => (
                Query {
                    entity: t.o,
                    relation: t.r,
                    direction,
                },
                t.s,
            ),
        }
    }
}

/// Query-frequency bucket used in the frequency analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FrequencyBucket {
    Zero,
    Low,
    High,
}

impl FrequencyBucket {
    pub const ALL: [FrequencyBucket; 3] =
        [FrequencyBucket::Zero, FrequencyBucket::Low, FrequencyBucket::High];

    pub fn of(count: usize) -> Self {
        match count {
            0 => FrequencyBucket::Zero,
            1..=10 => FrequencyBucket::Low,
            _ => FrequencyBucket::High,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FrequencyBucket::Zero => "0",
            FrequencyBucket::Low => "1-10",
            FrequencyBucket::High => ">10",
        }
    }
}

/// Ordered string vocabulary with dense ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

type AnswerIndex = HashMap<Query, Vec<EntityId>>;

/// Immutable triple store. Adjacency and frequencies come from train only.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    splits: [Vec<Triple>; 3],
    adjacency: Vec<Vec<AdjEntry>>,
    answers: [AnswerIndex; 3],
}

/// A triple of raw string identifiers.
pub type RawTriple = (String, String, String);

impl KnowledgeGraph {
    /// Builds the graph from raw identifier triples. Ids are assigned in
    /// first-seen order over train, then valid, then test.
    pub fn from_raw(train: &[RawTriple], valid: &[RawTriple], test: &[RawTriple]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Validation("train split is empty".into()));
        }
        let mut entities = Vocab::default();
        let mut relations = Vocab::default();
        let mut splits: [Vec<Triple>; 3] = Default::default();
        for (split, raw) in Split::ALL.iter().zip([train, valid, test]) {
            let mut seen = HashSet::new();
            let mut dups = 0usize;
            for (s, r, o) in raw {
                let t = Triple {
                    s: entities.intern(s),
                    r: relations.intern(r),
                    o: entities.intern(o),
                };
                if seen.insert(t) {
                    splits[split.index()].push(t);
                } else {
                    dups += 1;
                }
            }
            if dups > 0 {
                log::warn!("{}: collapsed {dups} duplicate triples", split.as_str());
            }
        }

        let mut adjacency = vec![Vec::new(); entities.len()];
        for t in &splits[Split::Train.index()] {
            adjacency[t.s as usize].push(AdjEntry {
                relation: t.r,
                neighbor: t.o,
                direction: Direction::Out,
            });
            adjacency[t.o as usize].push(AdjEntry {
                relation: t.r,
                neighbor: t.s,
                direction: Direction::In,
            });
        }

        let answers = [0, 1, 2].map(|i| build_answers(&splits[i]));
        let kg = KnowledgeGraph {
            entities,
            relations,
            splits,
            adjacency,
            answers,
        };
        kg.check_degree_sum()?;
        Ok(kg)
    }

    fn check_degree_sum(&self) -> Result<()> {
        let total: usize = self.adjacency.iter().map(Vec::len).sum();
        let expected = 2 * self.split(Split::Train).len();
        if total != expected {
            return Err(Error::Validation(format!(
                "degree sum {total} != 2 x train triples {expected}"
            )));
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        &self.splits[split.index()]
    }

    pub fn check_entity(&self, e: EntityId) -> Result<()> {
        if (e as usize) < self.num_entities() {
            Ok(())
        } else {
            Err(Error::Lookup {
                kind: "entity id",
                id: e.to_string(),
            })
        }
    }

    pub fn check_relation(&self, r: RelationId) -> Result<()> {
        if (r as usize) < self.num_relations() {
            Ok(())
        } else {
            Err(Error::Lookup {
                kind: "relation id",
                id: r.to_string(),
            })
        }
    }

    pub fn adjacency(&self, e: EntityId) -> Result<&[AdjEntry]> {
        self.check_entity(e)?;
        Ok(&self.adjacency[e as usize])
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.adjacency.get(e as usize).map_or(0, Vec::len)
    }

    /// Up to `k` incident train edges, uniformly without replacement, in
    /// random order. Deterministic given `seed`.
    pub fn neighborhood(&self, e: EntityId, k: usize, seed: u64) -> Result<Vec<AdjEntry>> {
        self.neighborhood_excluding(e, k, seed, None)
    }

    /// As [`neighborhood`](Self::neighborhood), with one edge removed from the
    /// candidate pool first (used to keep a training target out of its own
    /// context).
    pub fn neighborhood_excluding(
        &self,
        e: EntityId,
        k: usize,
        seed: u64,
        exclude: Option<AdjEntry>,
    ) -> Result<Vec<AdjEntry>> {
        let adj = self.adjacency(e)?;
        let pool: Vec<AdjEntry> = match exclude {
            Some(x) => {
                let mut pool = adj.to_vec();
                if let Some(pos) = pool.iter().position(|a| *a == x) {
                    pool.remove(pos);
                }
                pool
            }
            None => adj.to_vec(),
        };
        let mut rng = seed::rng(seed);
        if pool.len() <= k {
            let mut all = pool;
            all.shuffle(&mut rng);
            Ok(all)
        } else {
            Ok(index::sample(&mut rng, pool.len(), k)
                .into_iter()
                .map(|i| pool[i])
                .collect())
        }
    }

    /// Answers to `q` in one split, sorted ascending.
    pub fn answers(&self, split: Split, q: Query) -> &[EntityId] {
        self.answers[split.index()]
            .get(&q)
            .map_or(&[][..], Vec::as_slice)
    }

    /// Number of train answers already known for the directed query.
    pub fn query_frequency(&self, q: Query) -> Result<usize> {
        self.check_entity(q.entity)?;
        self.check_relation(q.relation)?;
        Ok(self.answers(Split::Train, q).len())
    }

    /// All known answers to `q` over every split, minus `gold`.
    pub fn filter_set(&self, q: Query, gold: EntityId) -> Vec<EntityId> {
        let mut out: Vec<EntityId> = Split::ALL
            .iter()
            .flat_map(|&s| self.answers(s, q).iter().copied())
            .filter(|&e| e != gold)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Whether `target` is a train neighbour of `e` (in either direction).
    pub fn is_neighbor(&self, e: EntityId, target: EntityId) -> bool {
        self.adjacency
            .get(e as usize)
            .is_some_and(|adj| adj.iter().any(|a| a.neighbor == target))
    }

    /// Renders one split back to the TSV triple format.
    pub fn split_tsv(&self, split: Split) -> String {
        let mut out = String::new();
        for t in self.split(split) {
            out.push_str(self.entities.name(t.s));
            out.push('\t');
            out.push_str(self.relations.name(t.r));
            out.push('\t');
            out.push_str(self.entities.name(t.o));
            out.push('\n');
        }
        out
    }
}

fn build_answers(triples: &[Triple]) -> AnswerIndex {
    let mut idx: AnswerIndex = HashMap::new();
    for &t in triples {
        for dir in [Direction::Out, Direction::In] {
            let (q, a) = Query::from_triple(t, dir);
            idx.entry(q).or_default().push(a);
        }
    }
    for v in idx.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    idx
}

/// Parses a `subject<TAB>relation<TAB>object` file.
pub fn read_triples(path: &Path) -> Result<Vec<RawTriple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text, path)
}

pub fn parse_triples(text: &str, path: &Path) -> Result<Vec<RawTriple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg: format!("expected 3 non-empty tab-separated fields, got {}", fields.len()),
            });
        }
        out.push((fields[0].to_owned(), fields[1].to_owned(), fields[2].to_owned()));
    }
    Ok(out)
}

/// Loads the three split files.
pub fn load_kg(train: &Path, valid: &Path, test: &Path) -> Result<KnowledgeGraph> {
    let train = read_triples(train)?;
    let valid = read_triples(valid)?;
    let test = read_triples(test)?;
    let kg = KnowledgeGraph::from_raw(&train, &valid, &test)?;
    log::info!(
        "loaded KG: {} entities, {} relations, {}/{}/{} triples",
        kg.num_entities(),
        kg.num_relations(),
        kg.split(Split::Train).len(),
        kg.split(Split::Valid).len(),
        kg.split(Split::Test).len()
    );
    Ok(kg)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn raw(triples: &[(&str, &str, &str)]) -> Vec<RawTriple> {
        triples
            .iter()
            .map(|(s, r, o)| (s.to_string(), r.to_string(), o.to_string()))
            .collect()
    }

    pub(crate) fn three_triple_kg() -> KnowledgeGraph {
        KnowledgeGraph::from_raw(
            &raw(&[("a", "r", "b"), ("a", "r", "c"), ("b", "q", "c")]),
            &[],
            &[],
        )
        .unwrap()
    }

    #[test]
    fn single_triple() {
        let kg = KnowledgeGraph::from_raw(&raw(&[("x", "r", "y")]), &[], &[]).unwrap();
        assert_eq!(kg.num_entities(), 2);
        assert_eq!(kg.num_relations(), 1);
        assert_eq!((kg.degree(0), kg.degree(1)), (1, 1));
    }

    #[test]
    fn three_triples() {
        let kg = three_triple_kg();
        let id = |n| kg.entities().id(n).unwrap();
        assert_eq!([kg.degree(id("a")), kg.degree(id("b")), kg.degree(id("c"))], [2, 2, 2]);
        let q = Query {
            entity: id("a"),
            relation: kg.relations().id("r").unwrap(),
            direction: Direction::Out,
        };
        assert_eq!(kg.answers(Split::Train, q), &[id("b"), id("c")]);
        assert_eq!(kg.query_frequency(q).unwrap(), 2);
    }

    #[test]
    fn empty_train_rejected() {
        let err = KnowledgeGraph::from_raw(&[], &raw(&[("a", "r", "b")]), &[]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_triples("a\tr\tb\na\tr\n", Path::new("t.tsv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicates_collapse_and_self_loops_count_twice() {
        let kg = KnowledgeGraph::from_raw(
            &raw(&[("a", "r", "b"), ("a", "r", "b"), ("a", "s", "a")]),
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(kg.split(Split::Train).len(), 2);
        assert_eq!(kg.degree(0), 3);
        assert_eq!(kg.degree(1), 1);
    }

    #[test]
    fn unseen_query_has_zero_frequency() {
        let kg = three_triple_kg();
        let q = Query {
            entity: kg.entities().id("c").unwrap(),
            relation: kg.relations().id("q").unwrap(),
            direction: Direction::Out,
        };
        assert_eq!(kg.query_frequency(q).unwrap(), 0);
        assert!(kg
            .query_frequency(Query {
                entity: 99,
                ..q
            })
            .is_err());
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(FrequencyBucket::of(0), FrequencyBucket::Zero);
        assert_eq!(FrequencyBucket::of(1), FrequencyBucket::Low);
        assert_eq!(FrequencyBucket::of(10), FrequencyBucket::Low);
        assert_eq!(FrequencyBucket::of(11), FrequencyBucket::High);
    }

    #[test]
    fn filter_set_unions_splits() {
        let kg = KnowledgeGraph::from_raw(
            &raw(&[("a", "r", "b")]),
            &raw(&[("a", "r", "c")]),
            &raw(&[("a", "r", "d")]),
        )
        .unwrap();
        let id = |n| kg.entities().id(n).unwrap();
        let q = Query {
            entity: id("a"),
            relation: 0,
            direction: Direction::Out,
        };
        assert_eq!(kg.filter_set(q, id("c")), vec![id("b"), id("d")]);
        assert_eq!(kg.filter_set(q, id("a")).len(), 3);
        let only = KnowledgeGraph::from_raw(&raw(&[("a", "r", "b")]), &[], &[]).unwrap();
        assert!(only.filter_set(q, 1).is_empty());
    }

    #[test]
    fn neighborhood_caps_and_isolated() {
        let mut triples = Vec::new();
        for i in 0..250 {
            triples.push(("hub".to_string(), "r".to_string(), format!("n{i}")));
        }
        let kg = KnowledgeGraph::from_raw(&triples, &raw(&[("lonely", "r", "hub")]), &[]).unwrap();
        let hub = kg.entities().id("hub").unwrap();
        let got = kg.neighborhood(hub, 100, 3).unwrap();
        assert_eq!(got.len(), 100);
        let distinct: HashSet<_> = got.iter().collect();
        assert_eq!(distinct.len(), 100);
        assert!(got.iter().all(|a| kg.adjacency(hub).unwrap().contains(a)));

        let leaf = kg.entities().id("n5").unwrap();
        assert_eq!(kg.neighborhood(leaf, 100, 3).unwrap().len(), 1);
        let lonely = kg.entities().id("lonely").unwrap();
        assert!(kg.neighborhood(lonely, 100, 3).unwrap().is_empty());
        assert!(kg.neighborhood(10_000, 5, 0).is_err());
        assert_eq!(kg.neighborhood(hub, 10, 9).unwrap(), kg.neighborhood(hub, 10, 9).unwrap());
    }

    #[test]
    fn exclusion_removes_one_edge() {
        let kg = three_triple_kg();
        let a = kg.entities().id("a").unwrap();
        let b = kg.entities().id("b").unwrap();
        let x = AdjEntry {
            relation: 0,
            neighbor: b,
            direction: Direction::Out,
        };
        for seed in 0..20 {
            let got = kg.neighborhood_excluding(a, 100, seed, Some(x)).unwrap();
            assert_eq!(got.len(), 1);
            assert!(!got.contains(&x));
        }
    }
}
