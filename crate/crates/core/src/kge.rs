//! ComplEx embeddings trained with shared negative sampling, and the
//! frequency router that combines a KGE ranking with seq2seq predictions.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, KnowledgeGraph, Query, RelationId, Split};
use crate::model::{Adam, AdamConfig, Scalar};
use crate::ranker::RankedAnswerList;
use crate::seed;

const MAGIC: &str = "KGCTX-KGE v1\n";

/// Entity and relation tables of complex vectors. Each row stores the `dim`
/// real parts followed by the `dim` imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplEx<T> {
    dim: usize,
    num_entities: usize,
    num_relations: usize,
    /// Entity rows, then relation rows.
    params: Vec<T>,
}

impl<T: Scalar> ComplEx<T> {
    pub fn new(num_entities: usize, num_relations: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("ComplEx dimension must be positive".into()));
        }
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let n = (num_entities + num_relations) * 2 * dim;
        let params = (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect();
        Ok(ComplEx {
            dim,
            num_entities,
            num_relations,
            params,
        })
    }

    pub fn from_params(num_entities: usize, num_relations: usize, dim: usize, params: Vec<T>) -> Result<Self> {
        if params.len() != (num_entities + num_relations) * 2 * dim {
            return Err(Error::Format(format!(
                "{} ComplEx parameters do not fit {num_entities} entities, {num_relations} relations, dim {dim}",
                params.len()
            )));
        }
        Ok(ComplEx {
            dim,
            num_entities,
            num_relations,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn entity(&self, e: EntityId) -> &[T] {
        let w = 2 * self.dim;
        &self.params[e as usize * w..(e as usize + 1) * w]
    }

    pub fn relation(&self, r: RelationId) -> &[T] {
        let w = 2 * self.dim;
        let off = (self.num_entities + r as usize) * w;
        &self.params[off..off + w]
    }

    pub fn entity_mut(&mut self, e: EntityId) -> &mut [T] {
        let w = 2 * self.dim;
        &mut self.params[e as usize * w..(e as usize + 1) * w]
    }

    pub fn relation_mut(&mut self, r: RelationId) -> &mut [T] {
        let w = 2 * self.dim;
        let off = (self.num_entities + r as usize) * w;
        &mut self.params[off..off + w]
    }

    fn check(&self, q: Query) -> Result<()> {
        if q.entity as usize >= self.num_entities {
            return Err(Error::Lookup {
                kind: "entity",
                id: q.entity.to_string(),
            });
        }
        if q.relation as usize >= self.num_relations {
            return Err(Error::Lookup {
                kind: "relation",
                id: q.relation.to_string(),
            });
        }
        Ok(())
    }

    /// Complex vector that every candidate is dotted with: `e_s * e_r` for
    /// tail queries, `conj(e_r * conj(e_o))` for head queries.
    fn query_vector(&self, q: Query) -> Vec<T> {
        let d = self.dim;
        let e = self.entity(q.entity);
        let r = self.relation(q.relation);
        let mut out = vec![T::zero(); 2 * d];
        for k in 0..d {
            let (a, b) = (e[k], e[d + k]);
            let (c, di) = (r[k], r[d + k]);
            match q.direction {
                Direction::Out => {
                    out[k] = a * c - b * di;
                    out[d + k] = a * di + b * c;
                }
                Direction::In => {
                    out[k] = c * a + di * b;
                    out[d + k] = c * b - di * a;
                }
            }
        }
        out
    }

    fn dot(&self, qv: &[T], e: EntityId) -> T {
        let x = self.entity(e);
        qv.iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    /// Scores of every entity as the answer to `q`.
    pub fn score_all(&self, q: Query) -> Result<Vec<f64>> {
        self.check(q)?;
        let qv = self.query_vector(q);
        Ok((0..self.num_entities as EntityId)
            .map(|e| self.dot(&qv, e).to_f64_lossy())
            .collect())
    }

    /// Full ranking over all entities as a candidate list.
    pub fn rank(&self, q: Query) -> Result<RankedAnswerList> {
        let scores = self.score_all(q)?;
        Ok(RankedAnswerList::from_scores(q, scores.into_iter().enumerate().map(|(e, s)| (e as EntityId, s))))
    }

    /// Full rankings for many queries, computed in parallel.
    pub fn rank_all(&self, queries: &[Query]) -> Result<HashMap<Query, RankedAnswerList>> {
        let lists: Vec<Result<RankedAnswerList>> = queries.par_iter().map(|&q| self.rank(q)).collect();
        lists.into_iter().map(|l| l.map(|l| (l.query, l))).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn to_bytes(&self, run_config: &str) -> Vec<u8> {
        let mut out = MAGIC.as_bytes().to_vec();
        out.extend_from_slice(
            format!(
                "dim {}\nentities {}\nrelations {}\nrun {}\n",
                self.dim,
                self.num_entities,
                self.num_relations,
                run_config.len()
            )
            .as_bytes(),
        );
        out.extend_from_slice(run_config.as_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        out
    }

    /// Inverse of [`ComplEx::to_bytes`]; returns the model and its run config.
    pub fn from_bytes(buf: &[u8]) -> Result<(Self, String)> {
        let rest = buf
            .strip_prefix(MAGIC.as_bytes())
            .ok_or_else(|| Error::Format("not a KGCTX-KGE v1 file".into()))?;
        let mut pos = 0;
        let mut header = |name: &str| -> Result<usize> {
            let end = rest[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("truncated KGE checkpoint".into()))?;
            let line = std::str::from_utf8(&rest[pos..pos + end]).map_err(|_| Error::Format("bad header".into()))?;
            pos += end + 1;
            line.strip_prefix(name)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("expected `{name} <n>`, found `{line}`")))
        };
        let dim = header("dim")?;
        let ne = header("entities")?;
        let nr = header("relations")?;
        let run_len = header("run")?;
        let n = (ne + nr) * 2 * dim;
        if rest.len() != pos + run_len + 4 * n {
            return Err(Error::Format("KGE checkpoint size does not match its header".into()));
        }
        let run = std::str::from_utf8(&rest[pos..pos + run_len])
            .map_err(|_| Error::Format("run config is not UTF-8".into()))?
            .to_owned();
        let params = rest[pos + run_len..]
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
            .collect();
        Ok((Self::from_params(ne, nr, dim, params)?, run))
    }
}

/// `Re(sum_k s_k * r_k * conj(o_k))`.
pub fn complex_score<T: Scalar>(model: &ComplEx<T>, s: EntityId, r: RelationId, o: EntityId) -> Result<f64> {
    let q = Query {
        entity: s,
        relation: r,
        direction: Direction::Out,
    };
    model.check(q)?;
    model.check(Query { entity: o, ..q })?;
    Ok(model.dot(&model.query_vector(q), o).to_f64_lossy())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgeConfig {
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for KgeConfig {
    fn default() -> Self {
        KgeConfig {
            dim: 64,
            epochs: 50,
            negatives: 50,
            lr: 0.01,
            batch: 64,
            seed: 0,
        }
    }
}

/// Loss and gradient for one query against its positive and the shared
/// negatives, under softmax cross-entropy with the positive at index 0.
fn query_grad<T: Scalar>(model: &ComplEx<T>, q: Query, gold: EntityId, negs: &[EntityId], grad: &mut [T]) -> f64 {
    let d = model.dim;
    let qv = model.query_vector(q);
    let cands: Vec<EntityId> = std::iter::once(gold)
        .chain(negs.iter().copied().filter(|&n| n != gold))
        .collect();
    let scores: Vec<f64> = cands.iter().map(|&e| model.dot(&qv, e).to_f64_lossy()).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let loss = z.ln() + max - scores[0];

    let w = 2 * d;
    let mut gq = vec![T::zero(); w];
    for (i, &e) in cands.iter().enumerate() {
        let p = (scores[i] - max).exp() / z;
        let coef = T::from_f64_lossy(if i == 0 { p - 1.0 } else { p });
        let x = model.entity(e);
        let off = e as usize * w;
        for k in 0..w {
            gq[k] += coef * x[k];
            grad[off + k] += coef * qv[k];
        }
    }

    let e = model.entity(q.entity);
    let r = model.relation(q.relation);
    let eo = q.entity as usize * w;
    let ro = (model.num_entities + q.relation as usize) * w;
    for k in 0..d {
        let (a, b) = (e[k], e[d + k]);
        let (c, di) = (r[k], r[d + k]);
        let (gr, gi) = (gq[k], gq[d + k]);
        match q.direction {
            Direction::Out => {
                grad[eo + k] += gr * c + gi * di;
                grad[eo + d + k] += gi * c - gr * di;
                grad[ro + k] += gr * a + gi * b;
                grad[ro + d + k] += gi * a - gr * b;
            }
            Direction::In => {
                grad[eo + k] += gr * c - gi * di;
                grad[eo + d + k] += gr * di + gi * c;
                grad[ro + k] += gr * a + gi * b;
                grad[ro + d + k] += gr * b - gi * a;
            }
        }
    }
    loss
}

/// Mean loss and summed gradient over a batch, both directions per triple.
pub fn batch_loss_and_grad<T: Scalar>(
    model: &ComplEx<T>,
    triples: &[crate::kg::Triple],
    negatives: &[EntityId],
) -> (f64, Vec<T>) {
    let mut grad = vec![T::zero(); model.params.len()];
    let mut loss = 0.0;
    for &t in triples {
        for dir in [Direction::Out, Direction::In] {
            let (q, gold) = Query::from_triple(t, dir);
            loss += query_grad(model, q, gold, negatives, &mut grad);
        }
    }
    (loss, grad)
}

/// Trains on the train split. Returns the model and the mean loss of each
/// epoch.
pub fn train_kge<T: Scalar>(kg: &KnowledgeGraph, config: &KgeConfig) -> Result<(ComplEx<T>, Vec<f64>)> {
    let mut model = ComplEx::new(kg.num_entities(), kg.num_relations(), config.dim, config.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            warmup_steps: 0,
            clip_norm: 0.0,
            ..AdamConfig::default()
        },
        model.params.len(),
    );
    let mut triples = kg.split(Split::Train).to_vec();
    let n_ent = kg.num_entities() as EntityId;
    let mut rng = seed::rng(seed::derive(config.seed, &[0x4b4745]));
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        triples.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in triples.chunks(config.batch.max(1)) {
            let negs: Vec<EntityId> = (0..config.negatives).map(|_| rng.gen_range(0..n_ent)).collect();
            let (loss, grad) = batch_loss_and_grad(&model, batch, &negs);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("KGE loss diverged in epoch {epoch}")));
            }
            total += loss;
            let scale = T::from_f64_lossy(1.0 / (2 * batch.len()) as f64);
            let grad: Vec<T> = grad.into_iter().map(|g| g * scale).collect();
            adam.update(&mut model.params, &grad);
        }
        let mean = total / (2 * triples.len()).max(1) as f64;
        log::debug!("kge epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    if !model.all_finite() {
        return Err(Error::NonFinite("KGE parameters are not finite".into()));
    }
    Ok((model, history))
}

/// Picks the seq2seq list when the query's train frequency is below
/// `threshold` and the KGE list otherwise. Scores are never mixed.
pub fn router_ensemble(
    seq2seq: &RankedAnswerList,
    kge: &RankedAnswerList,
    frequency: usize,
    threshold: usize,
) -> RankedAnswerList {
    if frequency < threshold {
        seq2seq.clone()
    } else {
        kge.clone()
    }
}

/// Routes every query present in either prediction set.
pub fn ensemble_predictions(
    kg: &KnowledgeGraph,
    seq2seq: &HashMap<Query, RankedAnswerList>,
    kge: &HashMap<Query, RankedAnswerList>,
    threshold: usize,
) -> Result<HashMap<Query, RankedAnswerList>> {
    let mut out = HashMap::new();
    for &q in seq2seq.keys().chain(kge.keys()) {
        if out.contains_key(&q) {
            continue;
        }
        let empty = RankedAnswerList::empty(q);
        let s = seq2seq.get(&q).unwrap_or(&empty);
        let k = kge.get(&q).unwrap_or(&empty);
        out.insert(q, router_ensemble(s, k, kg.query_frequency(q)?, threshold));
    }
    Ok(out)
}
