//! Embedding tables, relation inventories and triple datasets.
//!
//! Two line-oriented UTF-8 formats are read and written here.
//!
//! Embedding file: a `count dim` header followed by `count` rows of
//! `concept<TAB>v1 v2 ... vd`. The concept is everything before the tab, so
//! multiword concepts such as `card game` need no escaping.
//!
//! Triple file: one `x<TAB>y<TAB>relation` row per line.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index of a relation inside its [`RelationSet`].
pub type RelationId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RelationLabel {
    pub name: String,
    /// Marks the pseudo-relation for randomly paired concepts.
    pub is_random: bool,
}

impl RelationLabel {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            is_random: false,
        }
    }

    pub fn random(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            is_random: true,
        }
    }
}

/// Ordered relation inventory. Non-random relations keep their relative
/// order as "task slots", which index SRR cells and meta heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationSet {
    labels: Vec<RelationLabel>,
    random: Option<RelationId>,
    task_slots: Vec<RelationId>,
}

impl RelationSet {
    pub fn new(labels: Vec<RelationLabel>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::RelationSet("empty relation set".into()));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.name.is_empty() {
                return Err(Error::RelationSet("empty relation name".into()));
            }
            if !seen.insert(label.name.as_str()) {
                return Err(Error::RelationSet(format!(
                    "duplicate relation {:?}",
                    label.name
                )));
            }
        }
        let randoms: Vec<_> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_random)
            .map(|(i, _)| i)
            .collect();
        if randoms.len() > 1 {
            return Err(Error::RelationSet(
                "more than one relation marked random".into(),
            ));
        }
        let task_slots: Vec<_> = (0..labels.len())
            .filter(|&i| !labels[i].is_random)
            .collect();
        if task_slots.is_empty() {
            return Err(Error::RelationSet("no non-random relations".into()));
        }
        Ok(Self {
            labels,
            random: randoms.first().copied(),
            task_slots,
        })
    }

    /// Builds a set from names; the name equal to `random` (if any) becomes
    /// the random class.
    pub fn from_names<S: AsRef<str>>(names: &[S], random: Option<&str>) -> Result<Self> {
        let labels = names
            .iter()
            .map(|n| {
                let n = n.as_ref();
                RelationLabel {
                    name: n.to_string(),
                    is_random: Some(n) == random,
                }
            })
            .collect();
        Self::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[RelationLabel] {
        &self.labels
    }

    pub fn name(&self, id: RelationId) -> &str {
        &self.labels[id].name
    }

    pub fn id_of(&self, name: &str) -> Option<RelationId> {
        self.labels.iter().position(|l| l.name == name)
    }

    pub fn random_id(&self) -> Option<RelationId> {
        self.random
    }

    pub fn is_random(&self, id: RelationId) -> bool {
        self.random == Some(id)
    }

    /// Non-random relation ids, in slot order.
    pub fn task_relations(&self) -> &[RelationId] {
        &self.task_slots
    }

    pub fn num_tasks(&self) -> usize {
        self.task_slots.len()
    }

    pub fn task_slot(&self, id: RelationId) -> Option<usize> {
        self.task_slots.iter().position(|&r| r == id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RelationTriple {
    pub x: String,
    pub y: String,
    pub relation: RelationId,
}

impl RelationTriple {
    pub fn new(x: impl Into<String>, y: impl Into<String>, relation: RelationId) -> Self {
        Self {
            x: x.into(),
            y: y.into(),
            relation,
        }
    }
}

/// Concept string to dense vector lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    names: Vec<String>,
    values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding dim must be positive".into(),
            ));
        }
        Ok(Self {
            dim,
            index: HashMap::new(),
            names: Vec::new(),
            values: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn insert(&mut self, concept: impl Into<String>, vector: &[f64]) -> Result<()> {
        let concept = concept.into();
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of {concept:?}")));
        }
        if self.index.contains_key(&concept) {
            return Err(Error::DuplicateConcept { concept });
        }
        self.index.insert(concept.clone(), self.names.len());
        self.names.push(concept);
        self.values.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, concept: &str) -> Option<&[f64]> {
        self.index
            .get(concept)
            .map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn lookup(&self, concept: &str) -> Result<&[f64]> {
        self.get(concept)
            .ok_or_else(|| Error::MissingConcepts(vec![concept.to_string()]))
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names
            .iter()
            .enumerate()
            .map(move |(i, n)| (n.as_str(), &self.values[i * self.dim..(i + 1) * self.dim]))
    }

    /// Fails with every unresolvable concept (sorted, deduplicated).
    pub fn check_coverage<'a>(
        &self,
        triples: impl IntoIterator<Item = &'a RelationTriple>,
    ) -> Result<()> {
        let mut missing = BTreeSet::new();
        for t in triples {
            for c in [&t.x, &t.y] {
                if !self.index.contains_key(c.as_str()) {
                    missing.insert(c.clone());
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingConcepts(missing.into_iter().collect()))
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim)?;
        for (name, v) in self.iter() {
            write_vector_row(&mut out, name, v)?;
        }
        out.flush()
    }
}

/// Writes `name<TAB>v1 v2 ...` using shortest round-trip float formatting.
pub(crate) fn write_vector_row<W: Write>(
    out: &mut W,
    name: &str,
    v: &[f64],
) -> std::io::Result<()> {
    write!(out, "{name}\t")?;
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.write_all(b" ")?;
        }
        write!(out, "{x:?}")?;
    }
    out.write_all(b"\n")
}

pub(crate) fn parse_vector_row(
    line: &str,
    dim: usize,
    source: &Path,
    lineno: usize,
) -> Result<(String, Vec<f64>)> {
    let (name, rest) = line
        .split_once('\t')
        .ok_or_else(|| Error::parse(source, lineno, "expected `name<TAB>values`"))?;
    if name.is_empty() {
        return Err(Error::parse(source, lineno, "empty name"));
    }
    let mut values = Vec::with_capacity(dim);
    for tok in rest.split_ascii_whitespace() {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::parse(source, lineno, format!("bad number {tok:?}")))?;
        if !v.is_finite() {
            return Err(Error::parse(
                source,
                lineno,
                format!("non-finite value {tok:?}"),
            ));
        }
        values.push(v);
    }
    if values.len() != dim {
        return Err(Error::parse(
            source,
            lineno,
            format!(
                "dimension mismatch: expected {dim} values, got {}",
                values.len()
            ),
        ));
    }
    Ok((name.to_string(), values))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    read_embeddings(open(path)?, path)
}

pub fn read_embeddings<R: BufRead>(reader: R, source: &Path) -> Result<EmbeddingTable> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(source, e))?,
        None => return Err(Error::parse(source, 1, "missing `count dim` header")),
    };
    let fields: Vec<_> = header.split_ascii_whitespace().collect();
    let parsed = match fields.as_slice() {
        [c, d] => c.parse::<usize>().ok().zip(d.parse::<usize>().ok()),
        _ => None,
    };
    let (count, dim) = parsed
        .filter(|&(_, d)| d > 0)
        .ok_or_else(|| Error::parse(source, 1, format!("malformed header {header:?}")))?;

    let mut table = EmbeddingTable::new(dim)?;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.is_empty() {
            continue;
        }
        let (name, values) = parse_vector_row(&line, dim, source, lineno)?;
        table.insert(name, &values)?;
    }
    if table.len() != count {
        return Err(Error::parse(
            source,
            1,
            format!("header declares {count} entries, file has {}", table.len()),
        ));
    }
    Ok(table)
}

pub fn load_triples(
    path: impl AsRef<Path>,
    relations: &RelationSet,
) -> Result<Vec<RelationTriple>> {
    let path = path.as_ref();
    read_triples(open(path)?, path, relations)
}

fn split_triple_line<'a>(line: &'a str, source: &Path, lineno: usize) -> Result<[&'a str; 3]> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(Error::parse(
            source,
            lineno,
            format!("expected 3 tab-separated fields, got {}", fields.len()),
        ));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err(Error::parse(source, lineno, "empty concept"));
    }
    Ok([fields[0], fields[1], fields[2].trim_end()])
}

pub fn read_triples<R: BufRead>(
    reader: R,
    source: &Path,
    relations: &RelationSet,
) -> Result<Vec<RelationTriple>> {
    let mut triples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.is_empty() {
            continue;
        }
        let [x, y, rel] = split_triple_line(&line, source, i + 1)?;
        let relation = relations
            .id_of(rel)
            .ok_or_else(|| Error::UnknownRelation(rel.to_string()))?;
        triples.push(RelationTriple::new(x, y, relation));
    }
    Ok(triples)
}

/// Distinct relation names of a triple file, sorted.
pub fn scan_relation_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut names = BTreeSet::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let [_, _, rel] = split_triple_line(&line, path, i + 1)?;
        names.insert(rel.to_string());
    }
    Ok(names.into_iter().collect())
}

pub fn write_triples<W: Write>(
    mut out: W,
    triples: &[RelationTriple],
    relations: &RelationSet,
) -> std::io::Result<()> {
    for t in triples {
        writeln!(out, "{}\t{}\t{}", t.x, t.y, relations.name(t.relation))?;
    }
    out.flush()
}

pub fn save_triples(
    path: impl AsRef<Path>,
    triples: &[RelationTriple],
    relations: &RelationSet,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_triples(BufWriter::new(file), triples, relations).map_err(|e| Error::io(path, e))
}

pub fn save_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    table
        .write_to(BufWriter::new(file))
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub relations: RelationSet,
    pub train: Vec<RelationTriple>,
    pub validation: Vec<RelationTriple>,
    pub test: Vec<RelationTriple>,
}

impl Dataset {
    /// Validates label ranges and split disjointness.
    pub fn new(
        relations: RelationSet,
        train: Vec<RelationTriple>,
        validation: Vec<RelationTriple>,
        test: Vec<RelationTriple>,
    ) -> Result<Self> {
        for t in train.iter().chain(&validation).chain(&test) {
            if t.relation >= relations.len() {
                return Err(Error::UnknownRelation(format!("#{}", t.relation)));
            }
        }
        let splits = [
            ("train", &train),
            ("validation", &validation),
            ("test", &test),
        ];
        for a in 0..splits.len() {
            let seen: HashSet<&RelationTriple> = splits[a].1.iter().collect();
            for b in a + 1..splits.len() {
                if let Some(t) = splits[b].1.iter().find(|t| seen.contains(t)) {
                    return Err(Error::InvalidArgument(format!(
                        "{} and {} splits share ({}, {}, {})",
                        splits[a].0,
                        splits[b].0,
                        t.x,
                        t.y,
                        relations.name(t.relation)
                    )));
                }
            }
        }
        Ok(Self {
            relations,
            train,
            validation,
            test,
        })
    }

    /// Training-split count per relation id.
    pub fn counts(&self) -> Vec<usize> {
        dataset_counts(&self.train, self.relations.len())
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &RelationTriple> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

pub fn dataset_counts(triples: &[RelationTriple], num_relations: usize) -> Vec<usize> {
    let mut counts = vec![0; num_relations];
    for t in triples {
        counts[t.relation] += 1;
    }
    counts
}

/// Seeded holdout: shuffles `train` and moves `fraction` of it into a
/// validation split. Returns `(train, validation)`.
pub fn split_holdout(
    train: Vec<RelationTriple>,
    fraction: f64,
    seed: u64,
) -> (Vec<RelationTriple>, Vec<RelationTriple>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = train;
    shuffled.shuffle(&mut rng);
    let n_val = (shuffled.len() as f64 * fraction).round() as usize;
    let val = shuffled.split_off(shuffled.len() - n_val);
    (shuffled, val)
}
