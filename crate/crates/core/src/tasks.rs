//! Auxiliary single-relation tasks: the smoothed task distribution and
//! balanced positive/negative batch sampling.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;

use crate::data::{RelationId, RelationSet, RelationTriple};
use crate::error::{Error, Result};

/// Sampling probability per non-random relation:
/// `p(r) = (ln|D_r| + γ) / Σ_r' (ln|D_r'| + γ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDistribution {
    relations: Vec<RelationId>,
    probs: Vec<f64>,
    gamma: f64,
}

impl TaskDistribution {
    pub fn relations(&self) -> &[RelationId] {
        &self.relations
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn prob(&self, relation: RelationId) -> Option<f64> {
        self.relations
            .iter()
            .position(|&r| r == relation)
            .map(|i| self.probs[i])
    }
}

/// Builds the distribution from training counts indexed by relation id.
pub fn task_distribution(
    relations: &RelationSet,
    counts: &[usize],
    gamma: f64,
) -> Result<TaskDistribution> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if counts.len() != relations.len() {
        return Err(Error::InvalidArgument(format!(
            "{} counts for {} relations",
            counts.len(),
            relations.len()
        )));
    }
    let task_rels = relations.task_relations().to_vec();
    let mut weights = Vec::with_capacity(task_rels.len());
    for &r in &task_rels {
        if counts[r] == 0 {
            return Err(Error::EmptyRelation(relations.name(r).to_string()));
        }
        weights.push((counts[r] as f64).ln() + gamma);
    }
    let total: f64 = weights.iter().sum();
    Ok(TaskDistribution {
        relations: task_rels,
        probs: weights.iter().map(|w| w / total).collect(),
        gamma,
    })
}

/// `n` independent draws from `dist`.
pub fn sample_tasks<R: Rng + ?Sized>(
    dist: &TaskDistribution,
    n: usize,
    rng: &mut R,
) -> Vec<RelationId> {
    let index = WeightedIndex::new(&dist.probs).expect("probabilities are positive");
    (0..n).map(|_| dist.relations[index.sample(rng)]).collect()
}

/// `Σ_r p(r) · loss(r)`; every task relation must have a loss.
pub fn expected_task_loss(
    dist: &TaskDistribution,
    losses: &BTreeMap<RelationId, f64>,
) -> Result<f64> {
    dist.relations
        .iter()
        .zip(&dist.probs)
        .map(|(r, p)| {
            losses
                .get(r)
                .map(|l| p * l)
                .ok_or_else(|| Error::InvalidArgument(format!("no loss for relation #{r}")))
        })
        .sum()
}

/// Where negatives for a task come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RanMode {
    /// Triples labeled with the random relation.
    Explicit,
    /// Any triple not labeled with the task relation, treated as random.
    Complement,
}

impl RanMode {
    /// Explicit when the relation set has a random class, else complement.
    pub fn for_relations(relations: &RelationSet) -> Self {
        if relations.random_id().is_some() {
            RanMode::Explicit
        } else {
            RanMode::Complement
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RanMode::Explicit => "explicit",
            RanMode::Complement => "complement",
        }
    }
}

/// Positives and negatives for one relation-vs-random task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch<'a> {
    pub relation: RelationId,
    pub positives: Vec<&'a RelationTriple>,
    pub negatives: Vec<&'a RelationTriple>,
}

impl TaskBatch<'_> {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-relation index over a training split.
#[derive(Clone, Debug)]
pub struct TaskSampler<'a> {
    triples: &'a [RelationTriple],
    by_relation: Vec<Vec<usize>>,
    random: Option<RelationId>,
    mode: RanMode,
}

impl<'a> TaskSampler<'a> {
    pub fn new(
        triples: &'a [RelationTriple],
        relations: &RelationSet,
        mode: RanMode,
    ) -> Result<Self> {
        if mode == RanMode::Explicit && relations.random_id().is_none() {
            return Err(Error::InvalidArgument(
                "explicit random mode needs a random relation".into(),
            ));
        }
        let mut by_relation = vec![Vec::new(); relations.len()];
        for (i, t) in triples.iter().enumerate() {
            by_relation[t.relation].push(i);
        }
        Ok(Self {
            triples,
            by_relation,
            random: relations.random_id(),
            mode,
        })
    }

    pub fn mode(&self) -> RanMode {
        self.mode
    }

    fn draw<R: Rng + ?Sized>(
        &self,
        pool: &[usize],
        k: usize,
        rng: &mut R,
    ) -> Vec<&'a RelationTriple> {
        let triples = self.triples;
        if pool.len() >= k {
            index::sample(rng, pool.len(), k)
                .into_iter()
                .map(|i| &triples[pool[i]])
                .collect()
        } else {
            (0..k)
                .map(|_| &triples[pool[rng.gen_range(0..pool.len())]])
                .collect()
        }
    }

    /// `batch_size / 2` positives and as many negatives. Pools smaller
    /// than the half batch are sampled with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        relation: RelationId,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<TaskBatch<'a>> {
        if Some(relation) == self.random {
            return Err(Error::InvalidArgument(
                "no task for the random relation".into(),
            ));
        }
        if batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 2".into(),
            ));
        }
        let half = batch_size / 2;
        let pos_pool = self
            .by_relation
            .get(relation)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::EmptyRelation(format!("#{relation}")))?;
        let positives = self.draw(pos_pool, half, rng);
        let negatives = match self.mode {
            RanMode::Explicit => {
                let pool = &self.by_relation[self.random.expect("checked in new")];
                if pool.is_empty() {
                    return Err(Error::EmptyRelation("random".into()));
                }
                self.draw(pool, half, rng)
            }
            RanMode::Complement => {
                let pool: Vec<usize> = (0..self.triples.len())
                    .filter(|&i| self.triples[i].relation != relation)
                    .collect();
                if pool.is_empty() {
                    return Err(Error::EmptyRelation("complement of task relation".into()));
                }
                self.draw(&pool, half, rng)
            }
        };
        Ok(TaskBatch {
            relation,
            positives,
            negatives,
        })
    }
}

/// One-shot convenience over [`TaskSampler`].
pub fn sample_batch<'a, R: Rng + ?Sized>(
    relation: RelationId,
    triples: &'a [RelationTriple],
    relations: &RelationSet,
    batch_size: usize,
    rng: &mut R,
    mode: RanMode,
) -> Result<TaskBatch<'a>> {
    TaskSampler::new(triples, relations, mode)?.sample_batch(relation, batch_size, rng)
}
