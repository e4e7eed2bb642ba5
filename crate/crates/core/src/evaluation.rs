//! Prediction, support-weighted precision/recall/F1 and confusion analysis.

use std::io::Write;

use crate::data::{EmbeddingTable, RelationId, RelationSet, RelationTriple};
use crate::error::{Error, Result};
use crate::network::{Head, NetworkParams};
use crate::prototypes::PrototypeSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Support summed over the classes that enter the average.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub labels: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub weighted: WeightedMetrics,
    /// Classes left out of the weighted average (still in the matrix).
    pub excluded: Vec<RelationId>,
    /// Classes that were never predicted; their precision is reported as 0.
    pub never_predicted: Vec<RelationId>,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl EvalReport {
    pub fn from_confusion(
        labels: Vec<String>,
        confusion: Vec<Vec<usize>>,
        excluded: &[RelationId],
    ) -> Result<Self> {
        let k = labels.len();
        if confusion.len() != k || confusion.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidArgument(format!(
                "confusion matrix is not {k}×{k}"
            )));
        }
        let mut per_class = Vec::with_capacity(k);
        let mut never_predicted = Vec::new();
        for c in 0..k {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            if predicted == 0 {
                never_predicted.push(c);
            }
            let precision = if predicted == 0 {
                0.0
            } else {
                tp / predicted as f64
            };
            let recall = if support == 0 {
                0.0
            } else {
                tp / support as f64
            };
            per_class.push(ClassMetrics {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
            });
        }
        let mut w = WeightedMetrics {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            support: 0,
        };
        for (c, m) in per_class.iter().enumerate() {
            if excluded.contains(&c) {
                continue;
            }
            let s = m.support as f64;
            w.precision += s * m.precision;
            w.recall += s * m.recall;
            w.f1 += s * m.f1;
            w.support += m.support;
        }
        if w.support > 0 {
            let n = w.support as f64;
            w.precision /= n;
            w.recall /= n;
            w.f1 /= n;
        }
        Ok(Self {
            labels,
            confusion,
            per_class,
            weighted: w,
            excluded: excluded.to_vec(),
            never_predicted,
        })
    }

    /// Per-class table, then the weighted row and a summary block.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "relation\tprecision\trecall\tf1\tsupport")?;
        for (label, m) in self.labels.iter().zip(&self.per_class) {
            writeln!(
                out,
                "{label}\t{:.6}\t{:.6}\t{:.6}\t{}",
                m.precision, m.recall, m.f1, m.support
            )?;
        }
        let w = &self.weighted;
        writeln!(
            out,
            "weighted\t{:.6}\t{:.6}\t{:.6}\t{}",
            w.precision, w.recall, w.f1, w.support
        )?;
        writeln!(out)?;
        let names = |ids: &[RelationId]| {
            ids.iter()
                .map(|&i| self.labels[i].as_str())
                .collect::<Vec<_>>()
                .join(",")
        };
        let names = |ids: &[RelationId]| {
            if ids.is_empty() {
                "none".to_string()
            } else {
                names(ids)
            }
        };
        writeln!(out, "# weighted_precision = {:.6}", w.precision)?;
        writeln!(out, "# weighted_recall = {:.6}", w.recall)?;
        writeln!(out, "# weighted_f1 = {:.6}", w.f1)?;
        writeln!(out, "# excluded = {}", names(&self.excluded))?;
        writeln!(out, "# never_predicted = {}", names(&self.never_predicted))?;
        out.flush()
    }

    /// Confusion matrix as TSV: header of predicted labels, one row per true label.
    pub fn write_confusion<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "true\\predicted\t{}", self.labels.join("\t"))?;
        for (label, row) in self.labels.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(out, "{label}\t{}", cells.join("\t"))?;
        }
        out.flush()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_vectors(
    params: &NetworkParams,
    protos: &PrototypeSet,
    x: &[f64],
    y: &[f64],
) -> Result<RelationId> {
    let out = params.forward(x, y, protos, Head::Final)?;
    Ok(argmax(&out.logits))
}

pub fn predict(
    params: &NetworkParams,
    protos: &PrototypeSet,
    pair: (&str, &str),
    emb: &EmbeddingTable,
) -> Result<RelationId> {
    let x = emb.get(pair.0);
    let y = emb.get(pair.1);
    match (x, y) {
        (Some(x), Some(y)) => predict_vectors(params, protos, x, y),
        _ => {
            let missing = [(pair.0, x.is_none()), (pair.1, y.is_none())]
                .iter()
                .filter(|(_, m)| *m)
                .map(|(c, _)| c.to_string())
                .collect();
            Err(Error::MissingConcepts(missing))
        }
    }
}

fn predict_all(
    params: &NetworkParams,
    protos: &PrototypeSet,
    triples: &[RelationTriple],
    emb: &EmbeddingTable,
) -> Result<Vec<RelationId>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        triples
            .par_iter()
            .map(|t| predict(params, protos, (&t.x, &t.y), emb))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        triples
            .iter()
            .map(|t| predict(params, protos, (&t.x, &t.y), emb))
            .collect()
    }
}

pub fn confusion_matrix(
    num_classes: usize,
    truth: &[RelationId],
    predicted: &[RelationId],
) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

/// Scores the final head on `triples`. `exclude` keeps a class in the
/// confusion matrix but out of the weighted averages.
pub fn evaluate(
    params: &NetworkParams,
    protos: &PrototypeSet,
    triples: &[RelationTriple],
    emb: &EmbeddingTable,
    exclude: Option<RelationId>,
) -> Result<EvalReport> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    emb.check_coverage(triples)?;
    let predicted = predict_all(params, protos, triples, emb)?;
    let truth: Vec<_> = triples.iter().map(|t| t.relation).collect();
    report_for(&params.relations, &truth, &predicted, exclude)
}

pub fn report_for(
    relations: &RelationSet,
    truth: &[RelationId],
    predicted: &[RelationId],
    exclude: Option<RelationId>,
) -> Result<EvalReport> {
    let labels = relations.labels().iter().map(|l| l.name.clone()).collect();
    let confusion = confusion_matrix(relations.len(), truth, predicted);
    let excluded: Vec<_> = exclude.into_iter().collect();
    EvalReport::from_confusion(labels, confusion, &excluded)
}

/// Largest off-diagonal cells normalized by the true class's support.
pub fn confusion_top_errors(report: &EvalReport, k: usize) -> Vec<(RelationId, RelationId, f64)> {
    let mut cells = Vec::new();
    for (t, row) in report.confusion.iter().enumerate() {
        let support: usize = row.iter().sum();
        for (p, &count) in row.iter().enumerate() {
            if p != t && count > 0 {
                cells.push((t, p, count as f64 / support as f64));
            }
        }
    }
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    cells.truncate(k);
    cells
}
