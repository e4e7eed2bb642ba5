//! Browser bindings for three small views of the classifier: the task
//! distribution, a 2-D synthetic offset space and a meta-training curve.
//! Everything is plain numbers in and flat arrays out so the page needs no
//! glue beyond the generated module.

use lexrel::data::RelationSet;
use lexrel::network::{init_params, CellSharing};
use lexrel::prototypes::compute_prototypes;
use lexrel::synth::{generate, NearestOffset, SplitCounts, SynthSpec};
use lexrel::tasks::task_distribution;
use lexrel::training::{meta_train, TrainConfig};
use wasm_bindgen::prelude::wasm_bindgen;

/// Sampling probability of each relation given its training-set size.
#[wasm_bindgen]
pub fn task_probabilities(counts: Vec<u32>, gamma: f64) -> Result<Vec<f64>, String> {
    let names: Vec<String> = (0..counts.len()).map(|i| format!("r{i}")).collect();
    let relations = RelationSet::from_names(&names, None).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = counts.iter().map(|&c| c as usize).collect();
    let dist = task_distribution(&relations, &counts, gamma).map_err(|e| e.to_string())?;
    Ok(dist.probs().to_vec())
}

/// Planted relations in two dimensions. Points are pair offsets `x − y`.
#[wasm_bindgen]
pub struct Geometry {
    points: Vec<f64>,
    labels: Vec<u32>,
    prototypes: Vec<f64>,
    baseline: NearestOffset,
    names: Vec<String>,
}

#[wasm_bindgen]
impl Geometry {
    #[wasm_bindgen(constructor)]
    pub fn new(
        relations: u32,
        per_relation: u32,
        noise: f64,
        seed: u32,
    ) -> Result<Geometry, String> {
        let counts = SplitCounts::new(per_relation as usize, 0, 0);
        let spec = SynthSpec::balanced(2, relations as usize, counts, noise, seed as u64);
        let (emb, ds) = generate(&spec).map_err(|e| e.to_string())?;
        let protos =
            compute_prototypes(&ds.train, &emb, &ds.relations).map_err(|e| e.to_string())?;
        let baseline =
            NearestOffset::fit(&ds.train, &emb, ds.relations.len()).map_err(|e| e.to_string())?;
        let mut points = Vec::with_capacity(2 * ds.train.len());
        let mut labels = Vec::with_capacity(ds.train.len());
        for t in &ds.train {
            let (x, y) = (
                emb.lookup(&t.x).map_err(|e| e.to_string())?,
                emb.lookup(&t.y).map_err(|e| e.to_string())?,
            );
            points.extend([x[0] - y[0], x[1] - y[1]]);
            labels.push(t.relation as u32);
        }
        Ok(Geometry {
            points,
            labels,
            prototypes: protos.iter().flatten().copied().collect(),
            baseline,
            names: ds
                .relations
                .labels()
                .iter()
                .map(|l| l.name.clone())
                .collect(),
        })
    }

    /// Flat `[dx0, dy0, dx1, dy1, ...]`.
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.labels.clone()
    }

    /// Flat prototypes, one pair per non-random relation.
    pub fn prototypes(&self) -> Vec<f64> {
        self.prototypes.clone()
    }

    pub fn num_classes(&self) -> u32 {
        self.names.len() as u32
    }

    pub fn class_name(&self, class: u32) -> String {
        self.names.get(class as usize).cloned().unwrap_or_default()
    }

    /// Nearest class centroid for the offset `(dx, dy)`.
    pub fn classify(&self, dx: f64, dy: f64) -> u32 {
        self.baseline.classify(&[dx, dy], &[0.0, 0.0]) as u32
    }
}

/// Mean probe accuracy after each meta-iteration on a small synthetic
/// problem (d = 8, four relations plus random).
#[wasm_bindgen]
pub fn probe_curve(
    iterations: u32,
    alpha: f64,
    epsilon: f64,
    seed: u32,
) -> Result<Vec<f64>, String> {
    let spec = SynthSpec::balanced(8, 4, SplitCounts::new(60, 0, 0), 0.05, seed as u64);
    let (emb, ds) = generate(&spec).map_err(|e| e.to_string())?;
    let protos = compute_prototypes(&ds.train, &emb, &ds.relations).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        alpha,
        epsilon,
        max_meta_iters: iterations as usize,
        plateau_window: 0,
        batch_size: 64,
        probe_batch_size: 64,
        seed: seed as u64,
        ..TrainConfig::default()
    };
    let theta = init_params(8, &ds.relations, CellSharing::Shared, seed as u64);
    let (_, history) =
        meta_train(theta, &ds.train, &emb, &protos, &config).map_err(|e| e.to_string())?;
    Ok(history.iter().map(|m| m.mean_probe_accuracy()).collect())
}
