//! Synthetic knowledge graphs with a controlled fraction of held-out answers
//! that sit in the query entity's train neighbourhood.
//!
//! Relations come in pairs `(r_j, t_j)`. A base fact adds both `(s, r_j, o)`
//! and `(s, t_j, o)` to train. A context-informative held-out triple
//! `(s, r_j, o)` keeps only its twin `(s, t_j, o)` in train, so the answer is
//! recoverable from the neighbourhood but never seen as a query.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::context_hit_rate;
use crate::kg::{KnowledgeGraph, RawTriple, Split};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MentionScheme {
    /// Pronounceable made-up names such as `Kavomi`.
    Syllable,
    /// `entity 17`, `relation 3`.
    Numbered,
}

impl MentionScheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "syllable" => Some(MentionScheme::Syllable),
            "numbered" => Some(MentionScheme::Numbered),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub entities: usize,
    pub relation_pairs: usize,
    pub base_facts: usize,
    pub valid: usize,
    pub test: usize,
    /// Fraction of held-out triples whose answer is a train neighbour of the
    /// subject.
    pub p: f64,
    /// Entities kept out of train entirely.
    pub isolated_entities: usize,
    /// Fraction of held-out triples whose subject is an isolated entity.
    pub isolated_fraction: f64,
    pub mentions: MentionScheme,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            entities: 200,
            relation_pairs: 4,
            base_facts: 400,
            valid: 100,
            test: 100,
            p: 0.5,
            isolated_entities: 0,
            isolated_fraction: 0.0,
            mentions: MentionScheme::Syllable,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthKg {
    pub train: Vec<RawTriple>,
    pub valid: Vec<RawTriple>,
    pub test: Vec<RawTriple>,
    pub entity_mentions: Vec<(String, String)>,
    pub relation_mentions: Vec<(String, String)>,
    /// Measured context hit rate of the valid and test splits.
    pub realized_p: [f64; 2],
}

fn infeasible(msg: String) -> Error {
    Error::Validation(format!("infeasible synthetic spec: {msg}"))
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) || !(0.0..=1.0).contains(&self.isolated_fraction) {
            return Err(infeasible("fractions must lie in [0, 1]".into()));
        }
        if self.relation_pairs == 0 {
            return Err(infeasible("need at least one relation pair".into()));
        }
        if self.entities < self.isolated_entities + 3 {
            return Err(infeasible("need at least three connected entities".into()));
        }
        if self.isolated_fraction > 0.0 && self.isolated_entities == 0 {
            return Err(infeasible("isolated held-out triples need isolated entities".into()));
        }
        if self.base_facts == 0 {
            return Err(infeasible("train would be empty".into()));
        }
        for n in [self.valid, self.test] {
            let inf = (self.p * n as f64).round() as usize;
            let iso = (self.isolated_fraction * n as f64).round() as usize;
            if inf + iso > n {
                return Err(infeasible(format!(
                    "p = {} leaves no room for {iso} held-out triples on degree-0 entities",
                    self.p
                )));
            }
        }
        Ok(())
    }
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn syllable_name(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        s.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => s,
    }
}

fn unique_names(rng: &mut ChaCha8Rng, n: usize, syllables: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut len = syllables;
    let mut misses = 0;
    while out.len() < n {
        let name = syllable_name(rng, len);
        if seen.insert(name.clone()) {
            out.push(name);
        } else {
            misses += 1;
            if misses > 50 {
                len += 1;
                misses = 0;
            }
        }
    }
    out
}

struct Builder {
    rng: ChaCha8Rng,
    connected: Vec<usize>,
    isolated: Vec<usize>,
    pairs: usize,
    train: Vec<(usize, usize, usize)>,
    train_set: HashSet<(usize, usize, usize)>,
    held: HashSet<(usize, usize, usize)>,
}

impl Builder {
    fn add_train(&mut self, t: (usize, usize, usize)) -> bool {
        if self.train_set.insert(t) {
            self.train.push(t);
            true
        } else {
            false
        }
    }

    fn neighbours(&self) -> HashSet<(usize, usize)> {
        self.train
            .iter()
            .flat_map(|&(s, _, o)| [(s, o), (o, s)])
            .collect()
    }

    fn pick_pair(&mut self) -> (usize, usize) {
        let s = *self.connected.choose(&mut self.rng).unwrap();
        loop {
            let o = *self.connected.choose(&mut self.rng).unwrap();
            if o != s {
                return (s, o);
            }
        }
    }
}

/// Generates the splits and mention tables. The realized context hit rate
/// of each held-out split is exactly `round(p * n) / n`.
pub fn generate_synthetic_kg(spec: &SynthSpec, seed_value: u64) -> Result<SynthKg> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(seed_value, &[0x53594e]));
    let mut ids: Vec<usize> = (0..spec.entities).collect();
    ids.shuffle(&mut rng);
    let isolated = ids.split_off(spec.entities - spec.isolated_entities);
    let mut connected = ids;
    connected.sort_unstable();
    let mut b = Builder {
        rng,
        connected,
        isolated,
        pairs: spec.relation_pairs,
        train: Vec::new(),
        train_set: HashSet::new(),
        held: HashSet::new(),
    };
    let budget = 1000 * (spec.base_facts + spec.valid + spec.test) + 10_000;

    // base facts, covering every connected entity as a subject first
    let mut order = b.connected.clone();
    order.shuffle(&mut b.rng);
    let mut facts = 0;
    let mut attempts = 0;
    while facts < spec.base_facts {
        attempts += 1;
        if attempts > budget {
            return Err(infeasible("could not place the requested base facts".into()));
        }
        let (s, o) = match order.get(facts) {
            Some(&s) => loop {
                let o = *b.connected.choose(&mut b.rng).unwrap();
                if o != s {
                    break (s, o);
                }
            },
            None => b.pick_pair(),
        };
        let j = b.rng.gen_range(0..b.pairs);
        if b.train_set.contains(&(s, 2 * j, o)) {
            continue;
        }
        b.add_train((s, 2 * j, o));
        b.add_train((s, 2 * j + 1, o));
        facts += 1;
    }

    let mut kinds: Vec<Vec<u8>> = Vec::new();
    for n in [spec.valid, spec.test] {
        let inf = (spec.p * n as f64).round() as usize;
        let iso = (spec.isolated_fraction * n as f64).round() as usize;
        let mut k = vec![0u8; n];
        k[..inf].fill(1);
        k[inf..inf + iso].fill(2);
        k.shuffle(&mut b.rng);
        kinds.push(k);
    }

    // informative triples first: they add twin edges to train
    let mut held: [Vec<Option<(usize, usize, usize)>>; 2] =
        [vec![None; spec.valid], vec![None; spec.test]];
    for (split, k) in kinds.iter().enumerate() {
        for (i, _) in k.iter().enumerate().filter(|(_, &k)| k == 1) {
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > budget {
                    return Err(infeasible("could not place context-informative triples".into()));
                }
                let (s, o) = b.pick_pair();
                let j = b.rng.gen_range(0..b.pairs);
                let t = (s, 2 * j, o);
                if b.train_set.contains(&t) || b.held.contains(&t) || b.train_set.contains(&(s, 2 * j + 1, o)) {
                    continue;
                }
                b.add_train((s, 2 * j + 1, o));
                b.held.insert(t);
                held[split][i] = Some(t);
                break;
            }
        }
    }
    let neighbours = b.neighbours();
    for (split, k) in kinds.iter().enumerate() {
        for (i, &kind) in k.iter().enumerate().filter(|(_, &k)| k != 1) {
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > budget {
                    return Err(infeasible("could not place non-informative triples".into()));
                }
                let (mut s, o) = b.pick_pair();
                if kind == 2 {
                    s = *b.isolated.choose(&mut b.rng).unwrap();
                }
                let j = b.rng.gen_range(0..b.pairs);
                let t = (s, 2 * j, o);
                if neighbours.contains(&(s, o)) || b.held.contains(&t) {
                    continue;
                }
                b.held.insert(t);
                held[split][i] = Some(t);
                break;
            }
        }
    }

    let ent = |e: usize| format!("e{e}");
    let rel = |r: usize| {
        if r % 2 == 0 {
            format!("r{}", r / 2)
        } else {
            format!("t{}", r / 2)
        }
    };
    let raw = |t: &(usize, usize, usize)| (ent(t.0), rel(t.1), ent(t.2));
    let train: Vec<RawTriple> = b.train.iter().map(raw).collect();
    let [valid, test] = held.map(|v| v.iter().map(|t| raw(&t.expect("every slot filled"))).collect::<Vec<_>>());

    let mut names_rng = seed::rng(seed::derive(seed_value, &[0x4e414d]));
    let (ent_names, rel_names) = match spec.mentions {
        MentionScheme::Syllable => {
            let e = unique_names(&mut names_rng, spec.entities, 3);
            let r = unique_names(&mut names_rng, spec.relation_pairs, 2);
            let r = r
                .into_iter()
                .flat_map(|n| {
                    let lower = n.to_lowercase();
                    [format!("is {lower} of"), format!("also {lower}")]
                })
                .collect::<Vec<_>>();
            (e, r)
        }
        MentionScheme::Numbered => (
            (0..spec.entities).map(|i| format!("entity {i}")).collect(),
            (0..2 * spec.relation_pairs)
                .map(|r| {
                    if r % 2 == 0 {
                        format!("relation {}", r / 2)
                    } else {
                        format!("twin relation {}", r / 2)
                    }
                })
                .collect(),
        ),
    };
    let entity_mentions = ent_names.into_iter().enumerate().map(|(i, n)| (ent(i), n)).collect();
    let relation_mentions = rel_names.into_iter().enumerate().map(|(i, n)| (rel(i), n)).collect();

    let kg = KnowledgeGraph::from_raw(&train, &valid, &test)?;
    let realized_p = [
        context_hit_rate(&kg, Split::Valid),
        context_hit_rate(&kg, Split::Test),
    ];
    for (n, got) in [spec.valid, spec.test].into_iter().zip(realized_p) {
        if n == 0 {
            continue;
        }
        let want = (spec.p * n as f64).round() / n as f64;
        if (got - want).abs() > 1e-12 {
            return Err(Error::Validation(format!("realized context hit rate {got} != {want}")));
        }
    }
    Ok(SynthKg {
        train,
        valid,
        test,
        entity_mentions,
        relation_mentions,
        realized_p,
    })
}

fn triples_tsv(triples: &[RawTriple]) -> String {
    let mut s = String::new();
    for (a, r, b) in triples {
        let _ = writeln!(s, "{a}\t{r}\t{b}");
    }
    s
}

fn pairs_tsv(rows: &[(String, String)]) -> String {
    let mut s = String::new();
    for (id, text) in rows {
        let _ = writeln!(s, "{id}\t{text}");
    }
    s
}

impl SynthKg {
    /// File name and contents of every output file.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        vec![
            ("train.tsv", triples_tsv(&self.train)),
            ("valid.tsv", triples_tsv(&self.valid)),
            ("test.tsv", triples_tsv(&self.test)),
            ("entity_mentions.tsv", pairs_tsv(&self.entity_mentions)),
            ("relation_mentions.tsv", pairs_tsv(&self.relation_mentions)),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in self.files() {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn knowledge_graph(&self) -> Result<KnowledgeGraph> {
        KnowledgeGraph::from_raw(&self.train, &self.valid, &self.test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(p: f64) -> SynthSpec {
        SynthSpec {
            entities: 60,
            relation_pairs: 2,
            base_facts: 80,
            valid: 50,
            test: 30,
            p,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn realized_fraction_is_exact() {
        for p in [0.0, 0.07, 0.5, 1.0] {
            let g = generate_synthetic_kg(&small(p), 1).unwrap();
            assert_eq!(g.realized_p[0], (p * 50.0).round() / 50.0);
            assert_eq!(g.valid.len(), 50);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_synthetic_kg(&small(0.3), 4).unwrap(), generate_synthetic_kg(&small(0.3), 4).unwrap());
        assert_ne!(
            generate_synthetic_kg(&small(0.3), 4).unwrap().train,
            generate_synthetic_kg(&small(0.3), 5).unwrap().train
        );
    }

    #[test]
    fn infeasible_with_isolated_entities() {
        let spec = SynthSpec {
            p: 1.0,
            isolated_entities: 5,
            isolated_fraction: 0.1,
            ..small(1.0)
        };
        assert!(generate_synthetic_kg(&spec, 0).is_err());
        let ok = SynthSpec { p: 0.5, ..spec };
        let g = generate_synthetic_kg(&ok, 0).unwrap();
        let kg = g.knowledge_graph().unwrap();
        let zero_degree = kg
            .split(Split::Valid)
            .iter()
            .filter(|t| kg.degree(t.s) == 0)
            .count();
        assert_eq!(zero_degree, 5);
    }

    #[test]
    fn mentions_unique_and_complete() {
        for scheme in [MentionScheme::Syllable, MentionScheme::Numbered] {
            let g = generate_synthetic_kg(&SynthSpec { mentions: scheme, ..small(0.5) }, 2).unwrap();
            let names: HashSet<_> = g.entity_mentions.iter().map(|(_, n)| n).collect();
            assert_eq!(names.len(), 60);
            assert_eq!(g.relation_mentions.len(), 4);
        }
    }
}
