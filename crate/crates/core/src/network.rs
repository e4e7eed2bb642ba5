//! SRR-cell classifier with a hand-written backward pass.
//!
//! For a pair `(x, y)` and every relation prototype `p`, one SRR cell computes
//!
//! ```text
//! U1 = tanh([x; p] W1 + b1)      U2 = tanh([y; p] W2 + b2)
//! U3 = tanh((U1 - y) W3 + b3)    U4 = tanh((U2 - x) W4 + b4)
//! ```
//!
//! All `U3`/`U4` vectors plus the raw `x` and `y` (skip connections) feed one
//! tanh dense layer of width `d`, followed by either a 2-way meta head for a
//! single relation or the final `|R|`-way head. Prototypes are inputs, never
//! parameters, so no gradient block exists for them.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{RelationId, RelationSet};
use crate::error::{Error, Result};
use crate::prototypes::PrototypeSet;

/// Examples per gradient chunk. Fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 16;

/// Dense affine map `out = in · W + b`, `W` stored row-major as
/// `inputs × outputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let s = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-s, s);
        let weight = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.inputs);
        let mut out = self.bias.clone();
        for (xi, row) in input.iter().zip(self.weight.chunks_exact(self.outputs)) {
            if *xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/d input`.
    fn backward(&self, input: &[f64], d_out: &[f64], grad: &mut Linear) -> Vec<f64> {
        for (o, d) in grad.bias.iter_mut().zip(d_out) {
            *o += d;
        }
        let mut d_in = vec![0.0; self.inputs];
        for (i, (row, grow)) in self
            .weight
            .chunks_exact(self.outputs)
            .zip(grad.weight.chunks_exact_mut(self.outputs))
            .enumerate()
        {
            let xi = input[i];
            let mut acc = 0.0;
            for ((w, g), d) in row.iter().zip(grow.iter_mut()).zip(d_out) {
                *g += xi * d;
                acc += w * d;
            }
            d_in[i] = acc;
        }
        d_in
    }

    fn l2(&self) -> f64 {
        self.weight.iter().map(|w| w * w).sum()
    }

    fn add_l2_grad(&self, lambda: f64, grad: &mut Linear) {
        for (g, w) in grad.weight.iter_mut().zip(&self.weight) {
            *g += lambda * w;
        }
    }
}

/// Named view of one parameter tensor.
pub struct Block<'a> {
    pub name: String,
    pub values: &'a [f64],
    pub is_weight: bool,
}

/// Uniform access to parameter tensors in a fixed order.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<Block<'_>>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.values.len()).sum()
    }

    /// `self += a * other`. Both sides must be congruent.
    fn axpy(&mut self, a: f64, other: &Self)
    where
        Self: Sized,
    {
        let src = other.blocks();
        for (dst, s) in self.blocks_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s.values) {
                *d += a * v;
            }
        }
    }

    /// Name of the first block holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        self.blocks()
            .into_iter()
            .find(|b| b.values.iter().any(|v| !v.is_finite()))
            .map(|b| b.name)
    }
}

impl ParamBlocks for Linear {
    fn blocks(&self) -> Vec<Block<'_>> {
        vec![
            Block {
                name: "weight".into(),
                values: &self.weight,
                is_weight: true,
            },
            Block {
                name: "bias".into(),
                values: &self.bias,
                is_weight: false,
            },
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

fn prefixed<'a>(prefix: &str, blocks: Vec<Block<'a>>) -> impl Iterator<Item = Block<'a>> + 'a {
    let prefix = prefix.to_string();
    blocks.into_iter().map(move |b| Block {
        name: format!("{prefix}.{}", b.name),
        ..b
    })
}

/// The four affine maps of one SRR cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SrrCellParams {
    /// `2d → d`, applied to `[x; proto]`.
    pub w1: Linear,
    /// `2d → d`, applied to `[y; proto]`.
    pub w2: Linear,
    /// `d → d`, applied to `U1 - y`.
    pub w3: Linear,
    /// `d → d`, applied to `U2 - x`.
    pub w4: Linear,
}

impl SrrCellParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w1: Linear::zeros(2 * dim, dim),
            w2: Linear::zeros(2 * dim, dim),
            w3: Linear::zeros(dim, dim),
            w4: Linear::zeros(dim, dim),
        }
    }

    fn glorot<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            w1: Linear::glorot(2 * dim, dim, rng),
            w2: Linear::glorot(2 * dim, dim, rng),
            w3: Linear::glorot(dim, dim, rng),
            w4: Linear::glorot(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w3.inputs
    }

    fn parts(&self) -> [(&'static str, &Linear); 4] {
        [
            ("w1", &self.w1),
            ("w2", &self.w2),
            ("w3", &self.w3),
            ("w4", &self.w4),
        ]
    }
}

impl ParamBlocks for SrrCellParams {
    fn blocks(&self) -> Vec<Block<'_>> {
        self.parts()
            .into_iter()
            .flat_map(|(n, l)| prefixed(n, l.blocks()))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.w1.blocks_mut();
        out.extend(self.w2.blocks_mut());
        out.extend(self.w3.blocks_mut());
        out.extend(self.w4.blocks_mut());
        out
    }
}

/// Activations of one SRR cell kept for the backward pass.
struct CellTrace {
    in1: Vec<f64>,
    in2: Vec<f64>,
    u1: Vec<f64>,
    u2: Vec<f64>,
    z3: Vec<f64>,
    z4: Vec<f64>,
    u3: Vec<f64>,
    u4: Vec<f64>,
}

fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|a| *a = a.tanh());
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn cell_trace(x: &[f64], y: &[f64], proto: &[f64], cell: &SrrCellParams) -> CellTrace {
    let in1 = concat(x, proto);
    let in2 = concat(y, proto);
    let mut u1 = cell.w1.forward(&in1);
    tanh_in_place(&mut u1);
    let mut u2 = cell.w2.forward(&in2);
    tanh_in_place(&mut u2);
    let z3: Vec<f64> = u1.iter().zip(y).map(|(a, b)| a - b).collect();
    let z4: Vec<f64> = u2.iter().zip(x).map(|(a, b)| a - b).collect();
    let mut u3 = cell.w3.forward(&z3);
    tanh_in_place(&mut u3);
    let mut u4 = cell.w4.forward(&z4);
    tanh_in_place(&mut u4);
    CellTrace {
        in1,
        in2,
        u1,
        u2,
        z3,
        z4,
        u3,
        u4,
    }
}

/// One SRR cell: returns `(U3, U4)`.
pub fn srr_forward(
    x: &[f64],
    y: &[f64],
    proto: &[f64],
    cell: &SrrCellParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = cell.dim();
    for v in [x, y, proto] {
        if v.len() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: v.len(),
            });
        }
    }
    let t = cell_trace(x, y, proto, cell);
    Ok((t.u3, t.u4))
}

fn tanh_backward(d_out: &[f64], act: &[f64]) -> Vec<f64> {
    d_out
        .iter()
        .zip(act)
        .map(|(d, a)| d * (1.0 - a * a))
        .collect()
}

fn cell_backward(
    cell: &SrrCellParams,
    trace: &CellTrace,
    d_u3: &[f64],
    d_u4: &[f64],
    grad: &mut SrrCellParams,
) {
    let d_pre3 = tanh_backward(d_u3, &trace.u3);
    let d_u1 = cell.w3.backward(&trace.z3, &d_pre3, &mut grad.w3);
    let d_pre1 = tanh_backward(&d_u1, &trace.u1);
    cell.w1.backward(&trace.in1, &d_pre1, &mut grad.w1);

    let d_pre4 = tanh_backward(d_u4, &trace.u4);
    let d_u2 = cell.w4.backward(&trace.z4, &d_pre4, &mut grad.w4);
    let d_pre2 = tanh_backward(&d_u2, &trace.u2);
    cell.w2.backward(&trace.in2, &d_pre2, &mut grad.w2);
}

/// Whether one SRR cell is shared by all relations or each relation has its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellSharing {
    Shared,
    PerRelation,
}

impl CellSharing {
    pub fn as_str(self) -> &'static str {
        match self {
            CellSharing::Shared => "shared",
            CellSharing::PerRelation => "per-relation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shared" => Some(CellSharing::Shared),
            "per-relation" => Some(CellSharing::PerRelation),
            _ => None,
        }
    }
}

/// SRR cells plus the tanh dense layer: everything below the output heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub cells: Vec<SrrCellParams>,
    pub dense: Linear,
}

impl Trunk {
    pub fn zeros_like(other: &Trunk) -> Self {
        Self {
            cells: other
                .cells
                .iter()
                .map(|c| SrrCellParams::zeros(c.dim()))
                .collect(),
            dense: Linear::zeros(other.dense.inputs, other.dense.outputs),
        }
    }

    fn cell_for(&self, slot: usize) -> usize {
        if self.cells.len() == 1 {
            0
        } else {
            slot
        }
    }
}

impl ParamBlocks for Trunk {
    fn blocks(&self) -> Vec<Block<'_>> {
        let mut out: Vec<Block<'_>> = self
            .cells
            .iter()
            .enumerate()
            .flat_map(|(i, c)| prefixed(&format!("cell{i}"), c.blocks()))
            .collect();
        out.extend(prefixed("dense", self.dense.blocks()));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.cells.iter_mut().flat_map(|c| c.blocks_mut()).collect();
        out.extend(self.dense.blocks_mut());
        out
    }
}

/// Which output layer a forward or backward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Binary head for one non-random relation. Class 0 is "holds the
    /// relation", class 1 is "random".
    Meta(RelationId),
    /// The `|R|`-way classifier.
    Final,
}

/// Meta-head class index for positives.
pub const META_POSITIVE: usize = 0;
/// Meta-head class index for random pairs.
pub const META_RANDOM: usize = 1;

/// All learnable parameters. Prototypes are deliberately absent.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub dim: usize,
    pub relations: RelationSet,
    pub trunk: Trunk,
    /// One `d → 2` head per task slot; empty once discarded.
    pub meta_heads: Vec<Linear>,
    pub final_head: Option<Linear>,
}

/// Dense-layer input width for `num_tasks` prototypes.
pub fn dense_input_width(dim: usize, num_tasks: usize) -> usize {
    2 * num_tasks * dim + 2 * dim
}

/// Parameter count of the final classifier (trunk plus `|R|`-way head,
/// no meta heads), computed from shapes alone.
pub fn classifier_param_count(dim: usize, relations: &RelationSet, sharing: CellSharing) -> u64 {
    let d = dim as u64;
    let t = relations.num_tasks() as u64;
    let r = relations.len() as u64;
    let cell = 2 * (2 * d * d + d) + 2 * (d * d + d);
    let cells = match sharing {
        CellSharing::Shared => cell,
        CellSharing::PerRelation => cell * t,
    };
    let dense = dense_input_width(dim, relations.num_tasks()) as u64 * d + d;
    let head = d * r + r;
    cells + dense + head
}

/// Deterministic Glorot-uniform initialization with zero biases. Draw order:
/// cells, dense, meta heads, final head.
pub fn init_params(
    dim: usize,
    relations: &RelationSet,
    sharing: CellSharing,
    seed: u64,
) -> NetworkParams {
    assert!(dim >= 1, "dim must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = relations.num_tasks();
    let n_cells = match sharing {
        CellSharing::Shared => 1,
        CellSharing::PerRelation => t,
    };
    let cells = (0..n_cells)
        .map(|_| SrrCellParams::glorot(dim, &mut rng))
        .collect();
    let dense = Linear::glorot(dense_input_width(dim, t), dim, &mut rng);
    let meta_heads = (0..t).map(|_| Linear::glorot(dim, 2, &mut rng)).collect();
    let final_head = Some(Linear::glorot(dim, relations.len(), &mut rng));
    NetworkParams {
        dim,
        relations: relations.clone(),
        trunk: Trunk { cells, dense },
        meta_heads,
        final_head,
    }
}

/// Logits and softmax probabilities of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits[target] - lse
}

/// One training example: embeddings plus the target class of the chosen head.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub target: usize,
}

struct Trace {
    cells: Vec<CellTrace>,
    dense_in: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

/// Gradient of a batch loss. Congruent with the trunk and the one head
/// that was used; there is no prototype block.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub head: Head,
    pub trunk: Trunk,
    pub head_grad: Linear,
}

impl ParamBlocks for Gradient {
    fn blocks(&self) -> Vec<Block<'_>> {
        let mut out = self.trunk.blocks();
        out.extend(prefixed("head", self.head_grad.blocks()));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.trunk.blocks_mut();
        out.extend(self.head_grad.blocks_mut());
        out
    }
}

impl NetworkParams {
    pub fn num_tasks(&self) -> usize {
        self.relations.num_tasks()
    }

    pub fn sharing(&self) -> CellSharing {
        if self.trunk.cells.len() == 1 {
            CellSharing::Shared
        } else {
            CellSharing::PerRelation
        }
    }

    pub fn dense_input_width(&self) -> usize {
        self.trunk.dense.inputs
    }

    fn head_layer(&self, head: Head) -> Result<&Linear> {
        match head {
            Head::Meta(r) => {
                let slot = self.relations.task_slot(r).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "no meta head for relation {:?}",
                        self.relations
                            .labels()
                            .get(r)
                            .map(|l| l.name.as_str())
                            .unwrap_or("?")
                    ))
                })?;
                self.meta_heads
                    .get(slot)
                    .ok_or_else(|| Error::InvalidArgument("meta heads were discarded".into()))
            }
            Head::Final => self
                .final_head
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("no final head attached".into())),
        }
    }

    fn head_layer_mut(&mut self, head: Head) -> Result<&mut Linear> {
        self.head_layer(head)?;
        Ok(match head {
            Head::Meta(r) => {
                let slot = self.relations.task_slot(r).expect("checked above");
                &mut self.meta_heads[slot]
            }
            Head::Final => self.final_head.as_mut().expect("checked above"),
        })
    }

    fn check_inputs(&self, x: &[f64], y: &[f64], protos: &PrototypeSet) -> Result<()> {
        for v in [x, y] {
            if v.len() != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    actual: v.len(),
                });
            }
        }
        if protos.len() != self.num_tasks() {
            return Err(Error::InvalidArgument(format!(
                "{} prototypes for {} relations",
                protos.len(),
                self.num_tasks()
            )));
        }
        if protos.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: protos.dim(),
            });
        }
        Ok(())
    }

    fn trace_trunk(
        &self,
        x: &[f64],
        y: &[f64],
        protos: &PrototypeSet,
    ) -> (Vec<CellTrace>, Vec<f64>, Vec<f64>) {
        let cells: Vec<CellTrace> = protos
            .iter()
            .enumerate()
            .map(|(slot, p)| cell_trace(x, y, p, &self.trunk.cells[self.trunk.cell_for(slot)]))
            .collect();
        let mut dense_in = Vec::with_capacity(self.trunk.dense.inputs);
        for c in &cells {
            dense_in.extend_from_slice(&c.u3);
            dense_in.extend_from_slice(&c.u4);
        }
        dense_in.extend_from_slice(x);
        dense_in.extend_from_slice(y);
        let mut hidden = self.trunk.dense.forward(&dense_in);
        tanh_in_place(&mut hidden);
        (cells, dense_in, hidden)
    }

    /// Output of the dense layer (the input to every head).
    pub fn trunk_forward(&self, x: &[f64], y: &[f64], protos: &PrototypeSet) -> Result<Vec<f64>> {
        self.check_inputs(x, y, protos)?;
        Ok(self.trace_trunk(x, y, protos).2)
    }

    pub fn forward(
        &self,
        x: &[f64],
        y: &[f64],
        protos: &PrototypeSet,
        head: Head,
    ) -> Result<HeadOutput> {
        self.check_inputs(x, y, protos)?;
        let layer = self.head_layer(head)?;
        let (_, _, hidden) = self.trace_trunk(x, y, protos);
        let logits = layer.forward(&hidden);
        let probs = softmax(&logits);
        Ok(HeadOutput { logits, probs })
    }

    fn trace(&self, x: &[f64], y: &[f64], protos: &PrototypeSet, layer: &Linear) -> Trace {
        let (cells, dense_in, hidden) = self.trace_trunk(x, y, protos);
        let logits = layer.forward(&hidden);
        Trace {
            cells,
            dense_in,
            hidden,
            logits,
        }
    }

    fn validate_batch(
        &self,
        batch: &[Example<'_>],
        protos: &PrototypeSet,
        layer: &Linear,
    ) -> Result<()> {
        for ex in batch {
            self.check_inputs(ex.x, ex.y, protos)?;
            if ex.target >= layer.outputs {
                return Err(Error::InvalidArgument(format!(
                    "target {} outside head of width {}",
                    ex.target, layer.outputs
                )));
            }
        }
        Ok(())
    }

    /// L2 penalty `lambda/2 · Σ W²` over trunk weights and the given head's
    /// weights. Biases are not penalized.
    fn l2_penalty(&self, layer: &Linear, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let trunk: f64 = self
            .trunk
            .cells
            .iter()
            .flat_map(|c| c.parts())
            .map(|(_, l)| l.l2())
            .sum::<f64>()
            + self.trunk.dense.l2();
        0.5 * lambda * (trunk + layer.l2())
    }

    /// Summed cross-entropy of `batch` under `head`, plus the L2 penalty.
    pub fn loss(
        &self,
        batch: &[Example<'_>],
        protos: &PrototypeSet,
        head: Head,
        lambda: f64,
    ) -> Result<f64> {
        let layer = self.head_layer(head)?;
        self.validate_batch(batch, protos, layer)?;
        let ce: f64 = batch
            .iter()
            .map(|ex| {
                let (_, _, hidden) = self.trace_trunk(ex.x, ex.y, protos);
                -log_softmax_at(&layer.forward(&hidden), ex.target)
            })
            .sum();
        Ok(ce + self.l2_penalty(layer, lambda))
    }

    fn chunk_gradient(
        &self,
        chunk: &[Example<'_>],
        protos: &PrototypeSet,
        head: Head,
        layer: &Linear,
    ) -> (f64, Gradient) {
        let mut grad = Gradient {
            head,
            trunk: Trunk::zeros_like(&self.trunk),
            head_grad: Linear::zeros(layer.inputs, layer.outputs),
        };
        let mut loss = 0.0;
        for ex in chunk {
            let tr = self.trace(ex.x, ex.y, protos, layer);
            loss -= log_softmax_at(&tr.logits, ex.target);
            let mut d_logits = softmax(&tr.logits);
            d_logits[ex.target] -= 1.0;
            let d_hidden = layer.backward(&tr.hidden, &d_logits, &mut grad.head_grad);
            let d_pre = tanh_backward(&d_hidden, &tr.hidden);
            let d_dense_in = self
                .trunk
                .dense
                .backward(&tr.dense_in, &d_pre, &mut grad.trunk.dense);
            let d = self.dim;
            for (slot, ct) in tr.cells.iter().enumerate() {
                let base = 2 * slot * d;
                let ci = self.trunk.cell_for(slot);
                cell_backward(
                    &self.trunk.cells[ci],
                    ct,
                    &d_dense_in[base..base + d],
                    &d_dense_in[base + d..base + 2 * d],
                    &mut grad.trunk.cells[ci],
                );
            }
        }
        (loss, grad)
    }

    /// Exact gradient of [`NetworkParams::loss`]. Returns `(loss, gradient)`.
    pub fn backward(
        &self,
        batch: &[Example<'_>],
        protos: &PrototypeSet,
        head: Head,
        lambda: f64,
    ) -> Result<(f64, Gradient)> {
        let layer = self.head_layer(head)?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        self.validate_batch(batch, protos, layer)?;

        let chunks: Vec<&[Example<'_>]> = batch.chunks(GRAD_CHUNK).collect();
        #[cfg(feature = "parallel")]
        let parts: Vec<(f64, Gradient)> = {
            use rayon::prelude::*;
            chunks
                .par_iter()
                .map(|c| self.chunk_gradient(c, protos, head, layer))
                .collect()
        };
        #[cfg(not(feature = "parallel"))]
        let parts: Vec<(f64, Gradient)> = chunks
            .iter()
            .map(|c| self.chunk_gradient(c, protos, head, layer))
            .collect();

        let mut parts = parts.into_iter();
        let (mut loss, mut grad) = parts.next().expect("nonempty batch");
        for (l, g) in parts {
            loss += l;
            grad.axpy(1.0, &g);
        }
        if lambda != 0.0 {
            loss += self.l2_penalty(layer, lambda);
            for (c, gc) in self.trunk.cells.iter().zip(grad.trunk.cells.iter_mut()) {
                c.w1.add_l2_grad(lambda, &mut gc.w1);
                c.w2.add_l2_grad(lambda, &mut gc.w2);
                c.w3.add_l2_grad(lambda, &mut gc.w3);
                c.w4.add_l2_grad(lambda, &mut gc.w4);
            }
            self.trunk.dense.add_l2_grad(lambda, &mut grad.trunk.dense);
            layer.add_l2_grad(lambda, &mut grad.head_grad);
        }
        if let Some(block) = grad.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient block {block}")));
        }
        Ok((loss, grad))
    }

    /// `self += a * grad` on the trunk and the gradient's head.
    pub fn apply(&mut self, a: f64, grad: &Gradient) -> Result<()> {
        self.trunk.axpy(a, &grad.trunk);
        let layer = self.head_layer_mut(grad.head)?;
        layer.axpy(a, &grad.head_grad);
        Ok(())
    }

    pub fn discard_meta_heads(&mut self) {
        self.meta_heads.clear();
    }

    /// Replaces the final head with a freshly initialized one.
    pub fn reset_final_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.final_head = Some(Linear::glorot(self.dim, self.relations.len(), &mut rng));
    }
}

impl ParamBlocks for NetworkParams {
    fn blocks(&self) -> Vec<Block<'_>> {
        let mut out: Vec<Block<'_>> = prefixed("trunk", self.trunk.blocks()).collect();
        for (slot, h) in self.meta_heads.iter().enumerate() {
            let name = self.relations.name(self.relations.task_relations()[slot]);
            out.extend(prefixed(&format!("meta[{name}]"), h.blocks()));
        }
        if let Some(h) = &self.final_head {
            out.extend(prefixed("final", h.blocks()));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.trunk.blocks_mut();
        for h in &mut self.meta_heads {
            out.extend(h.blocks_mut());
        }
        if let Some(h) = &mut self.final_head {
            out.extend(h.blocks_mut());
        }
        out
    }
}
