//! Relation prototypes: the mean embedding offset `x - y` per relation.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::data::{write_vector_row, EmbeddingTable, RelationSet, RelationTriple};
use crate::error::{Error, Result};

/// One frozen prototype per non-random relation, indexed by task slot.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    dim: usize,
    protos: Vec<Vec<f64>>,
    source_counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn from_parts(
        dim: usize,
        protos: Vec<Vec<f64>>,
        source_counts: Vec<usize>,
    ) -> Result<Self> {
        if protos.len() != source_counts.len() || protos.is_empty() {
            return Err(Error::InvalidArgument(
                "prototype/count length mismatch".into(),
            ));
        }
        for (p, &c) in protos.iter().zip(&source_counts) {
            if p.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("prototype".into()));
            }
            if c == 0 {
                return Err(Error::InvalidArgument("prototype with zero sources".into()));
            }
        }
        Ok(Self {
            dim,
            protos,
            source_counts,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    /// Prototype for task slot `slot`.
    pub fn get(&self, slot: usize) -> &[f64] {
        &self.protos[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.protos.iter().map(Vec::as_slice)
    }

    pub fn source_counts(&self) -> &[usize] {
        &self.source_counts
    }

    /// Writes `count dim` then `relation<TAB>values`, like an embedding file.
    pub fn write_to<W: Write>(&self, relations: &RelationSet, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim)?;
        for (slot, p) in self.protos.iter().enumerate() {
            write_vector_row(
                &mut out,
                relations.name(relations.task_relations()[slot]),
                p,
            )?;
        }
        out.flush()
    }

    /// Reads an export written by [`PrototypeSet::write_to`]. Source counts
    /// are not part of the export and are set from `source_counts`.
    pub fn read_from<R: BufRead>(
        reader: R,
        source: &Path,
        relations: &RelationSet,
        source_counts: Vec<usize>,
    ) -> Result<Self> {
        let table = crate::data::read_embeddings(reader, source)?;
        let mut protos = vec![None; relations.num_tasks()];
        for (name, v) in table.iter() {
            let slot = relations
                .id_of(name)
                .and_then(|id| relations.task_slot(id))
                .ok_or_else(|| Error::UnknownRelation(name.to_string()))?;
            protos[slot] = Some(v.to_vec());
        }
        let protos = protos
            .into_iter()
            .enumerate()
            .map(|(slot, p)| {
                p.ok_or_else(|| {
                    Error::EmptyRelation(relations.name(relations.task_relations()[slot]).into())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(table.dim(), protos, source_counts)
    }
}

/// Averages `x - y` over the triples of each non-random relation. Random
/// triples are ignored. Accumulation is in `f64`.
pub fn compute_prototypes<'a>(
    kb: impl IntoIterator<Item = &'a RelationTriple>,
    emb: &EmbeddingTable,
    relations: &RelationSet,
) -> Result<PrototypeSet> {
    let dim = emb.dim();
    let mut sums = vec![vec![0.0f64; dim]; relations.num_tasks()];
    let mut counts = vec![0usize; relations.num_tasks()];
    let mut missing = Vec::new();
    for t in kb {
        let Some(slot) = relations.task_slot(t.relation) else {
            continue;
        };
        let (x, y) = match (emb.get(&t.x), emb.get(&t.y)) {
            (Some(x), Some(y)) => (x, y),
            (x, y) => {
                if x.is_none() {
                    missing.push(t.x.clone());
                }
                if y.is_none() {
                    missing.push(t.y.clone());
                }
                continue;
            }
        };
        for ((s, a), b) in sums[slot].iter_mut().zip(x).zip(y) {
            *s += a - b;
        }
        counts[slot] += 1;
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingConcepts(missing));
    }
    if let Some(slot) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyRelation(
            relations.name(relations.task_relations()[slot]).to_string(),
        ));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        let n = c as f64;
        s.iter_mut().for_each(|v| *v /= n);
    }
    PrototypeSet::from_parts(dim, sums, counts)
}
