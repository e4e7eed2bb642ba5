//! Synthetic benchmark with planted relation offsets.
//!
//! Each relation `r` gets a ground-truth offset `v_r`. A related pair is
//! generated as `x ~ N(0, scale²/d · I)`, `y = x − v_r + noise`, so
//! `x − y ≈ v_r` follows the same convention as the prototypes. Random
//! pairs are two independent draws.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{
    save_embeddings, save_triples, Dataset, EmbeddingTable, RelationId, RelationLabel, RelationSet,
    RelationTriple,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, validation: usize, test: usize) -> Self {
        Self {
            train,
            validation,
            test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedRelation {
    pub name: String,
    pub offset: Vec<f64>,
    pub counts: SplitCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    pub relations: Vec<PlantedRelation>,
    /// Counts for the random class, if any.
    pub random: Option<SplitCounts>,
    pub noise_sigma: f64,
    /// Expected norm of a concept embedding.
    pub embedding_scale: f64,
    pub seed: u64,
}

pub const RANDOM_NAME: &str = "random";

const GRID: f64 = (1u64 << 24) as f64;

/// Rounds to a multiple of 2^-24. On this grid, `x - (x - v)` is exactly
/// `v` for the magnitudes generated here, so zero-noise offsets are
/// recovered bit for bit.
pub fn quantize(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

impl SynthSpec {
    /// Relations `rel0, rel1, ...` with Gaussian-direction offsets of norm
    /// `offset_norm`, one entry of `counts` per relation. Offsets are drawn
    /// from `seed` as well.
    pub fn planted(
        dim: usize,
        counts: &[SplitCounts],
        random: Option<SplitCounts>,
        offset_norm: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x000f_f5e7);
        let relations = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                PlantedRelation {
                    name: format!("rel{i}"),
                    offset: g.iter().map(|v| quantize(v * offset_norm / n)).collect(),
                    counts: c,
                }
            })
            .collect();
        Self {
            dim,
            relations,
            random,
            noise_sigma,
            embedding_scale: 1.0,
            seed,
        }
    }

    /// Same counts for every relation and the random class.
    pub fn balanced(
        dim: usize,
        n_relations: usize,
        counts: SplitCounts,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        Self::planted(
            dim,
            &vec![counts; n_relations],
            Some(counts),
            3.0,
            noise_sigma,
            seed,
        )
    }

    pub fn relation_set(&self) -> Result<RelationSet> {
        let mut labels: Vec<RelationLabel> = self
            .relations
            .iter()
            .map(|r| RelationLabel::new(&r.name))
            .collect();
        if self.random.is_some() {
            labels.push(RelationLabel::random(RANDOM_NAME));
        }
        RelationSet::new(labels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.relations.is_empty() {
            return Err(Error::InvalidArgument(
                "need dim ≥ 1 and at least one relation".into(),
            ));
        }
        if self.noise_sigma.is_nan()
            || self.noise_sigma < 0.0
            || self.embedding_scale.is_nan()
            || self.embedding_scale <= 0.0
        {
            return Err(Error::InvalidArgument(
                "noise must be ≥ 0 and scale > 0".into(),
            ));
        }
        for r in &self.relations {
            if r.offset.len() != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    actual: r.offset.len(),
                });
            }
        }
        let min_sep = 4.0 * self.noise_sigma;
        for (i, a) in self.relations.iter().enumerate() {
            for b in &self.relations[i + 1..] {
                let dist = a
                    .offset
                    .iter()
                    .zip(&b.offset)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                if dist < min_sep || dist == 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "offsets of {} and {} are {dist:.4} apart, need at least {min_sep:.4}",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }
}

struct Generator {
    rng: ChaCha8Rng,
    emb: EmbeddingTable,
    next: usize,
    scale: f64,
}

impl Generator {
    fn gaussian(&mut self, sigma: f64) -> Vec<f64> {
        let d = self.emb.dim();
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                quantize(sigma * z)
            })
            .collect()
    }

    fn concept(&mut self, v: &[f64]) -> Result<String> {
        let name = format!("c{:06}", self.next);
        self.next += 1;
        self.emb.insert(name.clone(), v)?;
        Ok(name)
    }

    fn related(
        &mut self,
        offset: &[f64],
        noise: f64,
        relation: RelationId,
    ) -> Result<RelationTriple> {
        let sd = self.scale / (self.emb.dim() as f64).sqrt();
        let x = self.gaussian(sd);
        let eta = self.gaussian(noise);
        let y: Vec<f64> = x
            .iter()
            .zip(offset)
            .zip(&eta)
            .map(|((a, v), e)| quantize(a - quantize(*v) + e))
            .collect();
        Ok(RelationTriple::new(
            self.concept(&x)?,
            self.concept(&y)?,
            relation,
        ))
    }

    fn random_pair(&mut self, relation: RelationId) -> Result<RelationTriple> {
        let sd = self.scale / (self.emb.dim() as f64).sqrt();
        let x = self.gaussian(sd);
        let y = self.gaussian(sd);
        Ok(RelationTriple::new(
            self.concept(&x)?,
            self.concept(&y)?,
            relation,
        ))
    }
}

/// Deterministic given `spec.seed`. Every pair uses fresh concepts.
pub fn generate(spec: &SynthSpec) -> Result<(EmbeddingTable, Dataset)> {
    spec.validate()?;
    let relations = spec.relation_set()?;
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        emb: EmbeddingTable::new(spec.dim)?,
        next: 0,
        scale: spec.embedding_scale,
    };
    let mut splits: [Vec<RelationTriple>; 3] = Default::default();
    for (id, r) in spec.relations.iter().enumerate() {
        let c = r.counts;
        for (split, n) in [c.train, c.validation, c.test].into_iter().enumerate() {
            for _ in 0..n {
                let t = g.related(&r.offset, spec.noise_sigma, id)?;
                splits[split].push(t);
            }
        }
    }
    if let Some(c) = spec.random {
        let id = relations.random_id().expect("random class present");
        for (split, n) in [c.train, c.validation, c.test].into_iter().enumerate() {
            for _ in 0..n {
                let t = g.random_pair(id)?;
                splits[split].push(t);
            }
        }
    }
    // Interleave classes within each split.
    for s in &mut splits {
        use rand::seq::SliceRandom;
        s.shuffle(&mut g.rng);
    }
    let [train, validation, test] = splits;
    let dataset = Dataset::new(relations, train, validation, test)?;
    Ok((g.emb, dataset))
}

/// Writes `embeddings.txt`, `train.tsv`, `val.tsv` and `test.tsv` into `dir`.
pub fn write_dataset(dir: &Path, emb: &EmbeddingTable, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    save_embeddings(dir.join("embeddings.txt"), emb)?;
    save_triples(dir.join("train.tsv"), &dataset.train, &dataset.relations)?;
    save_triples(dir.join("val.tsv"), &dataset.validation, &dataset.relations)?;
    save_triples(dir.join("test.tsv"), &dataset.test, &dataset.relations)?;
    Ok(())
}

/// Baseline: classify a pair by the nearest per-class mean offset, the
/// random class included. Centroids come from `train`.
pub struct NearestOffset {
    centroids: Vec<Option<Vec<f64>>>,
}

impl NearestOffset {
    pub fn fit(train: &[RelationTriple], emb: &EmbeddingTable, num_classes: usize) -> Result<Self> {
        let d = emb.dim();
        let mut sums = vec![vec![0.0; d]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for t in train {
            let (x, y) = (emb.lookup(&t.x)?, emb.lookup(&t.y)?);
            for ((s, a), b) in sums[t.relation].iter_mut().zip(x).zip(y) {
                *s += a - b;
            }
            counts[t.relation] += 1;
        }
        let centroids = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        Ok(Self { centroids })
    }

    pub fn classify(&self, x: &[f64], y: &[f64]) -> RelationId {
        let mut best = (f64::INFINITY, 0);
        for (c, centroid) in self.centroids.iter().enumerate() {
            let Some(m) = centroid else { continue };
            let dist: f64 = x
                .iter()
                .zip(y)
                .zip(m)
                .map(|((a, b), mu)| {
                    let e = a - b - mu;
                    e * e
                })
                .sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        best.1
    }
}

/// A random Gaussian vector with the given norm; used by the demo and CLI.
pub fn random_direction<R: Rng + ?Sized>(dim: usize, norm: f64, rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    g.iter().map(|v| v * norm / n).collect()
}
