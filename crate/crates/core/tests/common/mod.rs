//! Reference implementations shared by the integration tests. Each one is
//! the slow, obvious version of something the library does faster.

#![allow(dead_code)]

use lexrel::data::{EmbeddingTable, RelationSet, RelationTriple};
use lexrel::network::{Example, Head, Linear, NetworkParams, ParamBlocks};
use lexrel::prototypes::PrototypeSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Training-split sizes for BLESS.
pub const BLESS_COUNTS: [(&str, usize); 5] = [
    ("attribute", 2731),
    ("co-hyponym", 3565),
    ("event", 3824),
    ("hypernym", 1337),
    ("meronym", 2943),
];

pub fn relations(n: usize, random: bool) -> RelationSet {
    let mut names: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
    if random {
        names.push("random".into());
    }
    RelationSet::from_names(&names, random.then_some("random")).unwrap()
}

pub fn random_protos(dim: usize, n: usize, rng: &mut impl Rng) -> PrototypeSet {
    let p = (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    PrototypeSet::from_parts(dim, p, vec![1; n]).unwrap()
}

pub fn random_vectors(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

/// Mutable views of exactly the tensors a head's loss depends on, in the
/// same order as [`lexrel::network::Gradient::blocks`].
fn head_blocks_mut(p: &mut NetworkParams, head: Head) -> Vec<&mut [f64]> {
    let slot = match head {
        Head::Meta(r) => Some(p.relations.task_slot(r).unwrap()),
        Head::Final => None,
    };
    let mut out = p.trunk.blocks_mut();
    let layer: &mut Linear = match slot {
        Some(s) => &mut p.meta_heads[s],
        None => p.final_head.as_mut().unwrap(),
    };
    out.extend(layer.blocks_mut());
    out
}

#[derive(Debug)]
pub struct GradCheck {
    pub entries: usize,
    pub worst_rel: f64,
    pub worst_at: String,
}

/// Entries whose analytic and numeric values are both below this are
/// compared absolutely; relative error is meaningless at round-off level.
pub const GRAD_FLOOR: f64 = 1e-7;

/// Central finite differences with step `h` over every parameter the loss
/// touches, compared with `backward`.
pub fn grad_check(
    params: &NetworkParams,
    batch: &[Example<'_>],
    protos: &PrototypeSet,
    head: Head,
    lambda: f64,
    h: f64,
) -> GradCheck {
    let (_, grad) = params.backward(batch, protos, head, lambda).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grad
        .blocks()
        .into_iter()
        .map(|b| (b.name, b.values.to_vec()))
        .collect();
    let mut probe = params.clone();
    let mut worst = GradCheck {
        entries: 0,
        worst_rel: 0.0,
        worst_at: String::new(),
    };
    for (bi, (name, values)) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            let orig = head_blocks_mut(&mut probe, head)[bi][i];
            head_blocks_mut(&mut probe, head)[bi][i] = orig + h;
            let up = probe.loss(batch, protos, head, lambda).unwrap();
            head_blocks_mut(&mut probe, head)[bi][i] = orig - h;
            let down = probe.loss(batch, protos, head, lambda).unwrap();
            head_blocks_mut(&mut probe, head)[bi][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst.entries += 1;
            if rel > worst.worst_rel {
                worst.worst_rel = rel;
                worst.worst_at = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    worst
}

/// Gives every parameter, biases included, a generic nonzero value so no
/// gradient entry vanishes by construction.
pub fn jitter(params: &mut NetworkParams, rng: &mut impl Rng) {
    for block in params.blocks_mut() {
        for v in block.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

/// Straight-line `mean(x − y)` per non-random relation.
pub fn brute_prototypes(
    triples: &[RelationTriple],
    emb: &EmbeddingTable,
    relations: &RelationSet,
) -> Vec<Vec<f64>> {
    relations
        .task_relations()
        .iter()
        .map(|&r| {
            let mut sum = vec![0.0; emb.dim()];
            let mut n = 0.0;
            for t in triples.iter().filter(|t| t.relation == r) {
                let x = emb.get(&t.x).unwrap();
                let y = emb.get(&t.y).unwrap();
                for k in 0..emb.dim() {
                    sum[k] += x[k] - y[k];
                }
                n += 1.0;
            }
            sum.iter().map(|s| s / n).collect()
        })
        .collect()
}

/// Weighted precision, recall and F1 straight from the definitions:
/// `truth`/`pred` label lists, classes in `excluded` left out.
pub fn brute_weighted(
    truth: &[usize],
    pred: &[usize],
    k: usize,
    excluded: &[usize],
) -> (f64, f64, f64) {
    let mut total = 0.0;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in (0..k).filter(|c| !excluded.contains(c)) {
        let tp = truth
            .iter()
            .zip(pred)
            .filter(|(t, p)| **t == c && **p == c)
            .count() as f64;
        let support = truth.iter().filter(|t| **t == c).count() as f64;
        let predicted = pred.iter().filter(|p| **p == c).count() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if support > 0.0 { tp / support } else { 0.0 };
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        wp += support * p;
        wr += support * r;
        wf += support * f;
        total += support;
    }
    if total == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    (wp / total, wr / total, wf / total)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
