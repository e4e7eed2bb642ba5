//! Meta-learning over auxiliary tasks followed by supervised fine-tuning.
//!
//! Each meta-iteration samples `N` tasks, adapts a copy of the parameters
//! to each task with plain gradient descent at rate `alpha`, and moves the
//! shared parameters with a first-order update at rate `epsilon`. The
//! supervised stage drops the meta heads, attaches a fresh `|R|`-way head
//! and trains with Adam, early-stopping on validation weighted F1.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{EmbeddingTable, RelationId, RelationSet, RelationTriple};
use crate::error::{Error, Result};
use crate::evaluation::{argmax, evaluate};
use crate::network::{
    init_params, CellSharing, Example, Head, NetworkParams, ParamBlocks, META_POSITIVE, META_RANDOM,
};
use crate::prototypes::PrototypeSet;
use crate::tasks::{sample_tasks, task_distribution, RanMode, TaskBatch, TaskSampler};

/// First-order meta-update rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaUpdate {
    /// `θ ← θ − ε Σ_r ∇L(T_r)` evaluated at each adapted `θ_r` on a fresh batch.
    FoMaml,
    /// `θ ← θ + ε · mean_r (θ_r − θ)`.
    Reptile,
}

impl MetaUpdate {
    pub fn as_str(self) -> &'static str {
        match self {
            MetaUpdate::FoMaml => "fomaml",
            MetaUpdate::Reptile => "reptile",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Meta learning rate.
    pub epsilon: f64,
    /// Task-distribution smoothing.
    pub gamma: f64,
    /// Tasks per meta-iteration; `None` means one per non-random relation.
    pub n_tasks: Option<usize>,
    pub batch_size: usize,
    /// L2 weight on weight matrices (biases are not penalized).
    pub lambda: f64,
    pub inner_steps: usize,
    pub max_meta_iters: usize,
    /// Stop meta-training when mean probe accuracy has not improved by more
    /// than `plateau_delta` for `plateau_window` iterations. 0 disables.
    pub plateau_window: usize,
    pub plateau_delta: f64,
    pub probe_batch_size: usize,
    pub max_supervised_epochs: usize,
    /// Early-stopping patience in epochs; 0 trains every epoch.
    pub patience: usize,
    /// Adam learning rate for the supervised stage.
    pub finetune_lr: f64,
    pub seed: u64,
    pub meta_update_rule: MetaUpdate,
    /// Fraction of random-class training triples dropped each epoch.
    pub ran_discard_fraction: f64,
    /// Leave the random class out of validation averages.
    pub exclude_random: bool,
    /// `None` picks explicit when a random class exists.
    pub ran_mode: Option<RanMode>,
    pub cell_sharing: CellSharing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            epsilon: 1e-3,
            gamma: 1.0,
            n_tasks: None,
            batch_size: 256,
            lambda: 1e-3,
            inner_steps: 1,
            max_meta_iters: 500,
            plateau_window: 50,
            plateau_delta: 0.002,
            probe_batch_size: 256,
            max_supervised_epochs: 100,
            patience: 10,
            finetune_lr: 1e-3,
            seed: 0,
            meta_update_rule: MetaUpdate::FoMaml,
            ran_discard_fraction: 0.0,
            exclude_random: false,
            ran_mode: None,
            cell_sharing: CellSharing::Shared,
        }
    }
}

impl TrainConfig {
    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let positive = |name: &str, v: f64, p: &mut Vec<String>| {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("{name} must be positive, got {v}"));
            }
        };
        positive("alpha", self.alpha, &mut p);
        positive("epsilon", self.epsilon, &mut p);
        positive("gamma", self.gamma, &mut p);
        positive("finetune_lr", self.finetune_lr, &mut p);
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            p.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.n_tasks == Some(0) {
            p.push("n_tasks must be at least 1".into());
        }
        if self.batch_size < 2 {
            p.push(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.probe_batch_size < 2 {
            p.push(format!(
                "probe_batch_size must be at least 2, got {}",
                self.probe_batch_size
            ));
        }
        if self.inner_steps == 0 {
            p.push("inner_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ran_discard_fraction) {
            p.push(format!(
                "ran_discard_fraction must be in [0, 1), got {}",
                self.ran_discard_fraction
            ));
        }
        if self.plateau_delta < 0.0 {
            p.push("plateau_delta must be non-negative".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Sets one field from its textual `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "n_tasks" => {
                self.n_tasks = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "inner_steps" => self.inner_steps = num(key, value)?,
            "max_meta_iters" => self.max_meta_iters = num(key, value)?,
            "plateau_window" => self.plateau_window = num(key, value)?,
            "plateau_delta" => self.plateau_delta = num(key, value)?,
            "probe_batch_size" => self.probe_batch_size = num(key, value)?,
            "max_supervised_epochs" => self.max_supervised_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "finetune_lr" => self.finetune_lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "meta_update_rule" => {
                self.meta_update_rule = match value {
                    "fomaml" => MetaUpdate::FoMaml,
                    "reptile" => MetaUpdate::Reptile,
                    v => {
                        return Err(format!(
                            "meta_update_rule: expected fomaml or reptile, got {v:?}"
                        ))
                    }
                }
            }
            "ran_discard_fraction" => self.ran_discard_fraction = num(key, value)?,
            "exclude_random" => self.exclude_random = num(key, value)?,
            "ran_mode" => {
                self.ran_mode = match value {
                    "auto" => None,
                    "explicit" => Some(RanMode::Explicit),
                    "complement" => Some(RanMode::Complement),
                    v => {
                        return Err(format!(
                            "ran_mode: expected auto, explicit or complement, got {v:?}"
                        ))
                    }
                }
            }
            "cell_sharing" => {
                self.cell_sharing = CellSharing::parse(value).ok_or_else(|| {
                    format!("cell_sharing: expected shared or per-relation, got {value:?}")
                })?
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies a `key = value` per line config. Blank lines and `#`
    /// comments are ignored. All bad lines are reported together.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut problems = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v.trim()) {
                        problems.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => problems.push(format!("line {}: expected `key = value`", i + 1)),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

impl fmt::Display for TrainConfig {
    /// Writes the config in the same `key = value` form it is read from.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "alpha = {:?}", self.alpha)?;
        writeln!(f, "epsilon = {:?}", self.epsilon)?;
        writeln!(f, "gamma = {:?}", self.gamma)?;
        match self.n_tasks {
            Some(n) => writeln!(f, "n_tasks = {n}")?,
            None => writeln!(f, "n_tasks = auto")?,
        }
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "lambda = {:?}", self.lambda)?;
        writeln!(f, "inner_steps = {}", self.inner_steps)?;
        writeln!(f, "max_meta_iters = {}", self.max_meta_iters)?;
        writeln!(f, "plateau_window = {}", self.plateau_window)?;
        writeln!(f, "plateau_delta = {:?}", self.plateau_delta)?;
        writeln!(f, "probe_batch_size = {}", self.probe_batch_size)?;
        writeln!(f, "max_supervised_epochs = {}", self.max_supervised_epochs)?;
        writeln!(f, "patience = {}", self.patience)?;
        writeln!(f, "finetune_lr = {:?}", self.finetune_lr)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "meta_update_rule = {}", self.meta_update_rule.as_str())?;
        writeln!(f, "ran_discard_fraction = {:?}", self.ran_discard_fraction)?;
        writeln!(f, "exclude_random = {}", self.exclude_random)?;
        writeln!(
            f,
            "ran_mode = {}",
            self.ran_mode.map(RanMode::as_str).unwrap_or("auto")
        )?;
        writeln!(f, "cell_sharing = {}", self.cell_sharing.as_str())
    }
}

// Independent RNG streams derived from the one seed.
const STREAM_META: u64 = 0;
const STREAM_PROBE: u64 = 1;
const STREAM_FINETUNE: u64 = 2;
const HEAD_SEED_SALT: u64 = 0x5eed_f1a1;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaIteration {
    pub iteration: usize,
    pub tasks: Vec<RelationId>,
    /// `Σ_r L(T_r)` at the pre-adaptation parameters on the inner batches.
    pub task_loss: f64,
    /// Binary accuracy per non-random relation (slot order) on fresh probe batches.
    pub probe_accuracy: Vec<f64>,
}

impl MetaIteration {
    pub fn mean_probe_accuracy(&self) -> f64 {
        self.probe_accuracy.iter().sum::<f64>() / self.probe_accuracy.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Summed minibatch loss over the epoch.
    pub train_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub relation_names: Vec<String>,
    /// Names of the non-random relations, in probe-accuracy order.
    pub task_names: Vec<String>,
    pub meta: Vec<MetaIteration>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn for_relations(relations: &RelationSet) -> Self {
        Self {
            relation_names: relations.labels().iter().map(|l| l.name.clone()).collect(),
            task_names: relations
                .task_relations()
                .iter()
                .map(|&r| relations.name(r).to_string())
                .collect(),
            ..Self::default()
        }
    }

    /// Tab-separated curves: one `meta` row per iteration, one `epoch` row per epoch.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "meta\titeration\ttasks\ttask_loss\tmean_probe_acc")?;
        for name in &self.task_names {
            write!(out, "\tprobe_acc[{name}]")?;
        }
        writeln!(out)?;
        for m in &self.meta {
            let tasks: Vec<String> = m
                .tasks
                .iter()
                .map(|&r| {
                    self.relation_names
                        .get(r)
                        .cloned()
                        .unwrap_or_else(|| r.to_string())
                })
                .collect();
            write!(
                out,
                "meta\t{}\t{}\t{:?}\t{:?}",
                m.iteration,
                tasks.join(","),
                m.task_loss,
                m.mean_probe_accuracy()
            )?;
            for a in &m.probe_accuracy {
                write!(out, "\t{a:?}")?;
            }
            writeln!(out)?;
        }
        writeln!(
            out,
            "epoch\tepoch\ttrain_loss\tval_precision\tval_recall\tval_f1"
        )?;
        for e in &self.epochs {
            writeln!(
                out,
                "epoch\t{}\t{:?}\t{:?}\t{:?}\t{:?}",
                e.epoch, e.train_loss, e.val_precision, e.val_recall, e.val_f1
            )?;
        }
        if let Some(b) = self.best_epoch {
            writeln!(out, "# best_epoch = {b}")?;
        }
        out.flush()
    }
}

fn lookup<'e>(emb: &'e EmbeddingTable, t: &RelationTriple) -> Result<(&'e [f64], &'e [f64])> {
    Ok((emb.lookup(&t.x)?, emb.lookup(&t.y)?))
}

/// Meta-head examples: positives get class 0, negatives class 1.
pub fn task_examples<'e>(
    batch: &TaskBatch<'_>,
    emb: &'e EmbeddingTable,
) -> Result<Vec<Example<'e>>> {
    let mut out = Vec::with_capacity(batch.len());
    for (triples, target) in [
        (&batch.positives, META_POSITIVE),
        (&batch.negatives, META_RANDOM),
    ] {
        for t in triples.iter() {
            let (x, y) = lookup(emb, t)?;
            out.push(Example { x, y, target });
        }
    }
    Ok(out)
}

/// Final-head examples with the relation id as target.
pub fn multiway_examples<'e, 'a>(
    triples: impl IntoIterator<Item = &'a RelationTriple>,
    emb: &'e EmbeddingTable,
) -> Result<Vec<Example<'e>>> {
    triples
        .into_iter()
        .map(|t| {
            let (x, y) = lookup(emb, t)?;
            Ok(Example {
                x,
                y,
                target: t.relation,
            })
        })
        .collect()
}

/// `L(T_r)`: summed binary cross-entropy of the meta head for the batch's relation.
pub fn auxiliary_loss(
    batch: &TaskBatch<'_>,
    params: &NetworkParams,
    protos: &PrototypeSet,
    emb: &EmbeddingTable,
) -> Result<f64> {
    let examples = task_examples(batch, emb)?;
    params.loss(&examples, protos, Head::Meta(batch.relation), 0.0)
}

/// `K` plain gradient steps on one task batch, starting from a copy of `theta`.
pub fn inner_adapt(
    theta: &NetworkParams,
    relation: RelationId,
    examples: &[Example<'_>],
    protos: &PrototypeSet,
    config: &TrainConfig,
) -> Result<NetworkParams> {
    let mut adapted = theta.clone();
    for _ in 0..config.inner_steps {
        let (_, grad) = adapted.backward(examples, protos, Head::Meta(relation), config.lambda)?;
        adapted.apply(-config.alpha, &grad)?;
    }
    if let Some(block) = adapted.first_non_finite() {
        return Err(Error::NonFinite(format!(
            "adapted parameters, block {block}"
        )));
    }
    Ok(adapted)
}

/// One task's contribution to a meta-update.
pub struct AdaptedTask<'e> {
    pub relation: RelationId,
    pub adapted: NetworkParams,
    /// Fresh batch for the first-order meta-gradient (unused by Reptile).
    pub eval_examples: Vec<Example<'e>>,
}

pub fn meta_step(
    theta: &NetworkParams,
    tasks: &[AdaptedTask<'_>],
    protos: &PrototypeSet,
    config: &TrainConfig,
) -> Result<NetworkParams> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("meta step without tasks".into()));
    }
    let mut next = theta.clone();
    match config.meta_update_rule {
        MetaUpdate::FoMaml => {
            // Sum in task order for a reproducible reduction.
            for t in tasks {
                let (_, grad) = t.adapted.backward(
                    &t.eval_examples,
                    protos,
                    Head::Meta(t.relation),
                    config.lambda,
                )?;
                next.apply(-config.epsilon, &grad)?;
            }
        }
        MetaUpdate::Reptile => {
            let scale = config.epsilon / tasks.len() as f64;
            for t in tasks {
                let mut delta = t.adapted.clone();
                delta.axpy(-1.0, theta);
                next.axpy(scale, &delta);
            }
        }
    }
    if let Some(block) = next.first_non_finite() {
        return Err(Error::NonFinite(format!("meta update, block {block}")));
    }
    Ok(next)
}

fn binary_accuracy(
    params: &NetworkParams,
    examples: &[Example<'_>],
    protos: &PrototypeSet,
    relation: RelationId,
) -> Result<f64> {
    let mut correct = 0usize;
    for ex in examples {
        let out = params.forward(ex.x, ex.y, protos, Head::Meta(relation))?;
        if argmax(&out.logits) == ex.target {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Runs the meta-learning stage from `theta`. Probe accuracy for every
/// non-random relation is measured after each update on fresh batches
/// drawn from a separate RNG stream, so probing never shifts the training
/// sequence.
pub fn meta_train(
    mut theta: NetworkParams,
    train: &[RelationTriple],
    emb: &EmbeddingTable,
    protos: &PrototypeSet,
    config: &TrainConfig,
) -> Result<(NetworkParams, Vec<MetaIteration>)> {
    config.validate()?;
    let relations = theta.relations.clone();
    let mut history = Vec::new();
    if config.max_meta_iters == 0 {
        return Ok((theta, history));
    }
    let counts = crate::data::dataset_counts(train, relations.len());
    let dist = task_distribution(&relations, &counts, config.gamma)?;
    let mode = config
        .ran_mode
        .unwrap_or_else(|| RanMode::for_relations(&relations));
    let sampler = TaskSampler::new(train, &relations, mode)?;
    let n_tasks = config.n_tasks.unwrap_or(relations.num_tasks());
    let mut rng = stream(config.seed, STREAM_META);
    let mut probe_rng = stream(config.seed, STREAM_PROBE);

    let mut best_mean = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    for iteration in 0..config.max_meta_iters {
        let sampled = sample_tasks(&dist, n_tasks, &mut rng);
        let mut adapted = Vec::with_capacity(sampled.len());
        let mut task_loss = 0.0;
        for &r in &sampled {
            let batch = sampler.sample_batch(r, config.batch_size, &mut rng)?;
            let examples = task_examples(&batch, emb)?;
            task_loss += theta.loss(&examples, protos, Head::Meta(r), 0.0)?;
            let theta_r = inner_adapt(&theta, r, &examples, protos, config)?;
            let eval_examples = match config.meta_update_rule {
                MetaUpdate::FoMaml => {
                    let fresh = sampler.sample_batch(r, config.batch_size, &mut rng)?;
                    task_examples(&fresh, emb)?
                }
                MetaUpdate::Reptile => Vec::new(),
            };
            adapted.push(AdaptedTask {
                relation: r,
                adapted: theta_r,
                eval_examples,
            });
        }
        theta = meta_step(&theta, &adapted, protos, config)?;

        let mut probe_accuracy = Vec::with_capacity(relations.num_tasks());
        for &r in relations.task_relations() {
            let batch = sampler.sample_batch(r, config.probe_batch_size, &mut probe_rng)?;
            let examples = task_examples(&batch, emb)?;
            probe_accuracy.push(binary_accuracy(&theta, &examples, protos, r)?);
        }
        let record = MetaIteration {
            iteration,
            tasks: sampled,
            task_loss,
            probe_accuracy,
        };
        let mean = record.mean_probe_accuracy();
        history.push(record);

        if mean > best_mean + config.plateau_delta {
            best_mean = mean;
            since_best = 0;
        } else {
            since_best += 1;
            if config.plateau_window > 0 && since_best >= config.plateau_window {
                break;
            }
        }
    }
    Ok((theta, history))
}

/// Per-block Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn for_params<P: ParamBlocks>(params: &P) -> Self {
        let shapes: Vec<usize> = params.blocks().iter().map(|b| b.values.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step<P: ParamBlocks, G: ParamBlocks>(
    params: &mut P,
    grads: &G,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let g_blocks = grads.blocks();
    let mut p_blocks = params.blocks_mut();
    let congruent = p_blocks.len() == g_blocks.len()
        && p_blocks.len() == state.m.len()
        && p_blocks
            .iter()
            .zip(&g_blocks)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == g.values.len() && p.len() == m.len());
    if !congruent {
        return Err(Error::InvalidArgument(
            "Adam state, parameters and gradients differ in shape".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in p_blocks
        .iter_mut()
        .zip(&g_blocks)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g.values[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Supervised multi-way training driven one epoch at a time.
pub struct FineTuner<'a> {
    pub params: NetworkParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    train: &'a [RelationTriple],
    emb: &'a EmbeddingTable,
    protos: &'a PrototypeSet,
    config: &'a TrainConfig,
    epoch: usize,
}

impl<'a> FineTuner<'a> {
    /// Drops the meta heads and attaches a fresh final head.
    pub fn new(
        mut params: NetworkParams,
        train: &'a [RelationTriple],
        emb: &'a EmbeddingTable,
        protos: &'a PrototypeSet,
        config: &'a TrainConfig,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        emb.check_coverage(train)?;
        params.discard_meta_heads();
        params.reset_final_head(config.seed ^ HEAD_SEED_SALT);
        let adam = AdamState::for_params(&params);
        Ok(Self {
            params,
            adam,
            rng: stream(config.seed, STREAM_FINETUNE),
            train,
            emb,
            protos,
            config,
            epoch: 0,
        })
    }

    fn epoch_indices(&mut self) -> Vec<usize> {
        let random = self.params.relations.random_id();
        let mut keep: Vec<usize> = (0..self.train.len()).collect();
        if let (Some(ran), true) = (random, self.config.ran_discard_fraction > 0.0) {
            let ran_idx: Vec<usize> = keep
                .iter()
                .copied()
                .filter(|&i| self.train[i].relation == ran)
                .collect();
            let n_keep =
                ((1.0 - self.config.ran_discard_fraction) * ran_idx.len() as f64).round() as usize;
            let kept: std::collections::HashSet<usize> = ran_idx
                .choose_multiple(&mut self.rng, n_keep)
                .copied()
                .collect();
            keep.retain(|&i| self.train[i].relation != ran || kept.contains(&i));
        }
        keep.shuffle(&mut self.rng);
        keep
    }

    /// One pass over the (possibly thinned) training set. Returns the summed
    /// minibatch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let order = self.epoch_indices();
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let examples = multiway_examples(chunk.iter().map(|&i| &self.train[i]), self.emb)?;
            let (loss, grad) =
                self.params
                    .backward(&examples, self.protos, Head::Final, self.config.lambda)?;
            total += loss;
            adam_step(
                &mut self.params,
                &grad,
                &mut self.adam,
                self.config.finetune_lr,
            )?;
        }
        if let Some(block) = self.params.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after epoch, block {block}"
            )));
        }
        self.epoch += 1;
        Ok(total)
    }
}

/// Supervised stage with validation early stopping. Returns the parameters
/// of the best validation epoch (or the last epoch when patience is 0).
pub fn supervised_finetune(
    theta: NetworkParams,
    train: &[RelationTriple],
    validation: &[RelationTriple],
    emb: &EmbeddingTable,
    protos: &PrototypeSet,
    config: &TrainConfig,
) -> Result<(NetworkParams, Vec<EpochRecord>, Option<usize>)> {
    config.validate()?;
    if config.patience > 0 && validation.is_empty() {
        return Err(Error::InvalidArgument(
            "early stopping requested but there is no validation data".into(),
        ));
    }
    let exclude = if config.exclude_random {
        theta.relations.random_id()
    } else {
        None
    };
    let mut tuner = FineTuner::new(theta, train, emb, protos, config)?;
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, NetworkParams)> = None;
    let mut since_best = 0;
    for epoch in 0..config.max_supervised_epochs {
        let train_loss = tuner.run_epoch()?;
        let (p, r, f1) = if validation.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let rep = evaluate(&tuner.params, protos, validation, emb, exclude)?;
            (rep.weighted.precision, rep.weighted.recall, rep.weighted.f1)
        };
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_precision: p,
            val_recall: r,
            val_f1: f1,
        });
        if config.patience == 0 {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, tuner.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(match best {
        Some((_, epoch, params)) => (params, records, Some(epoch)),
        None => (tuner.params, records, None),
    })
}

/// Options for [`train_pipeline`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stages {
    /// Meta-learning, then fine-tuning.
    Full,
    /// Fine-tuning only from a fresh initialization.
    FineTuneOnly,
}

/// Initializes from `config.seed`, optionally meta-trains, then fine-tunes.
pub fn train_pipeline(
    dataset: &crate::data::Dataset,
    emb: &EmbeddingTable,
    protos: &PrototypeSet,
    config: &TrainConfig,
    stages: Stages,
) -> Result<(NetworkParams, TrainReport)> {
    config.validate()?;
    emb.check_coverage(dataset.all_triples())?;
    let theta = init_params(
        emb.dim(),
        &dataset.relations,
        config.cell_sharing,
        config.seed,
    );
    let (theta, meta) = match stages {
        Stages::Full => meta_train(theta, &dataset.train, emb, protos, config)?,
        Stages::FineTuneOnly => (theta, Vec::new()),
    };
    let (params, epochs, best_epoch) = supervised_finetune(
        theta,
        &dataset.train,
        &dataset.validation,
        emb,
        protos,
        config,
    )?;
    let report = TrainReport {
        meta,
        epochs,
        best_epoch,
        ..TrainReport::for_relations(&dataset.relations)
    };
    Ok((params, report))
}
