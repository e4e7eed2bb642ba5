//! Command-line front end. Every subcommand returns an exit code:
//! 0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{
    dataset_counts, load_embeddings, load_triples, scan_relation_names, split_holdout, Dataset,
    EmbeddingTable, RelationSet,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, predict};
use crate::network::init_params;
use crate::prototypes::{compute_prototypes, PrototypeSet};
use crate::synth::{generate, write_dataset, SplitCounts, SynthSpec};
use crate::tasks::{sample_tasks, task_distribution};
use crate::training::{meta_train, train_pipeline, Stages, TrainConfig, TrainReport};

/// Fraction of the training file moved to validation when no validation file is given.
const HOLDOUT_FRACTION: f64 = 0.2;
/// The library accepts any `d ≥ 1`; the training commands do not.
const MIN_TRAIN_DIM: usize = 8;

#[derive(Parser, Debug)]
#[command(
    name = "lexrel",
    version,
    about = "Meta-learned lexical relation classifier"
)]
pub struct Cli {
    /// Worker threads for parallel sections (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute relation prototypes from a knowledge base.
    Prototypes(PrototypesArgs),
    /// Run only the meta-learning stage; the checkpoint keeps its meta heads.
    MetaTrain(TrainArgs),
    /// Meta-learning followed by supervised fine-tuning.
    Train(TrainArgs),
    /// Score a checkpoint on labeled triples.
    Eval(EvalArgs),
    /// Label `x<TAB>y` pairs.
    Predict(PredictArgs),
    /// Write a synthetic dataset with planted relation offsets.
    Synth(SynthArgs),
    /// Print the task distribution next to empirical sampling frequencies.
    SampleCheck(SampleCheckArgs),
}

#[derive(Args, Debug)]
pub struct RelationArgs {
    /// Label of the random class; `none` when the dataset has no such class.
    #[arg(long, default_value = "random")]
    pub random_label: String,
    /// Fix the relation set and its order instead of reading it off the training file.
    #[arg(long, value_delimiter = ',')]
    pub relations: Option<Vec<String>>,
}

impl RelationArgs {
    fn random(&self) -> Option<&str> {
        (self.random_label != "none").then_some(self.random_label.as_str())
    }

    /// `--relations` if given, else the sorted labels found in `train`.
    /// The random label is kept only if present.
    fn infer(&self, train: &Path) -> Result<RelationSet> {
        let names = match &self.relations {
            Some(r) => r.clone(),
            None => scan_relation_names(train)?,
        };
        let random = self.random().filter(|r| names.iter().any(|n| n == r));
        RelationSet::from_names(&names, random)
    }

    fn record(&self, m: &mut RunManifest) {
        m.setting("random_label", &self.random_label);
        if let Some(r) = &self.relations {
            m.setting("relations", r.join(","));
        }
    }
}

#[derive(Args, Debug)]
pub struct PrototypesArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Triples to average over.
    #[arg(long)]
    pub triples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub relations: RelationArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    /// Validation triples; without it a seeded 80/20 holdout of the training file is used.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Extra triples used only as prototype sources.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration override, `key=value`; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: u64,
    /// Skip meta-learning and fine-tune from a fresh initialization.
    #[arg(long)]
    pub no_meta: bool,
    /// Fraction of random-class training triples dropped each epoch.
    #[arg(long)]
    pub ran_discard: Option<f64>,
    /// Output directory for checkpoint.txt, report.tsv and manifest.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub relations: RelationArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub triples: PathBuf,
    /// Relation left out of the weighted averages (still counted in the confusion matrix).
    #[arg(long)]
    pub exclude: Option<String>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Pairs to label; stdin when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Number of planted (non-random) relations.
    #[arg(long, default_value_t = 5)]
    pub relations: usize,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 50)]
    pub val: usize,
    #[arg(long, default_value_t = 50)]
    pub test: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SampleCheckArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub relations: RelationArgs,
}

/// Everything needed to rerun a command: inputs with digests, resolved
/// configuration, seed, version and outputs.
#[derive(Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Option<TrainConfig>,
    pub settings: Vec<(String, String)>,
    pub inputs: Vec<(String, PathBuf, String)>,
    pub outputs: Vec<(String, PathBuf)>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            ..Self::default()
        }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs
            .push((role.to_string(), path.to_path_buf(), digest));
        Ok(())
    }

    fn setting(&mut self, key: &str, value: impl ToString) {
        self.settings.push((key.to_string(), value.to_string()));
    }

    fn output(&mut self, role: &str, path: &Path) {
        self.outputs.push((role.to_string(), path.to_path_buf()));
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# lexrel run manifest")?;
        writeln!(out, "version = {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(out, "command = {}", self.command)?;
        if let Some(seed) = self.seed {
            writeln!(out, "seed = {seed}")?;
        }
        for (k, v) in &self.settings {
            writeln!(out, "{k} = {v}")?;
        }
        for (role, path, digest) in &self.inputs {
            writeln!(out, "input.{role} = {} sha256:{digest}", path.display())?;
        }
        for (role, path) in &self.outputs {
            writeln!(out, "output.{role} = {}", path.display())?;
        }
        if let Some(c) = &self.config {
            writeln!(out, "[config]")?;
            write!(out, "{c}")?;
        }
        out.flush()
    }

    fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn sibling_manifest(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        // A second call in the same process keeps the first pool, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match cli.command {
        Command::Prototypes(a) => cmd_prototypes(&a),
        Command::MetaTrain(a) => cmd_train(&a, false),
        Command::Train(a) => cmd_train(&a, true),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::SampleCheck(a) => cmd_sample_check(&a),
    }
}

pub fn cmd_prototypes(a: &PrototypesArgs) -> Result<()> {
    let emb = load_embeddings(&a.embeddings)?;
    let relations = a.relations.infer(&a.triples)?;
    let triples = load_triples(&a.triples, &relations)?;
    let protos = compute_prototypes(&triples, &emb, &relations)?;
    let mut out = create(&a.out)?;
    protos
        .write_to(&relations, &mut out)
        .map_err(|e| Error::io(&a.out, e))?;
    for (&id, count) in relations
        .task_relations()
        .iter()
        .zip(protos.source_counts())
    {
        println!("{}\t{count}", relations.name(id));
    }
    let mut m = RunManifest::new("prototypes");
    m.input("embeddings", &a.embeddings)?;
    m.input("triples", &a.triples)?;
    a.relations.record(&mut m);
    m.output("prototypes", &a.out);
    m.save(&sibling_manifest(&a.out))
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    let mut problems = Vec::new();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if let Err(e) = config.apply_text(&text) {
            match e {
                Error::Config(p) => problems.extend(p),
                other => return Err(other),
            }
        }
    }
    for o in &a.overrides {
        match o.split_once('=') {
            Some((k, v)) => {
                if let Err(p) = config.set(k.trim(), v.trim()) {
                    problems.push(p);
                }
            }
            None => problems.push(format!("override {o:?} is not key=value")),
        }
    }
    config.seed = a.seed;
    if let Some(f) = a.ran_discard {
        config.ran_discard_fraction = f;
    }
    problems.extend(config.problems());
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(problems))
    }
}

pub fn cmd_train(a: &TrainArgs, finetune: bool) -> Result<()> {
    let config = resolve_config(a)?;
    let emb = load_embeddings(&a.embeddings)?;
    if emb.dim() < MIN_TRAIN_DIM {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension {} is below {MIN_TRAIN_DIM}; smaller sizes are for tests only",
            emb.dim()
        )));
    }
    let relations = a.relations.infer(&a.train)?;
    let train = load_triples(&a.train, &relations)?;
    let (train, validation) = match &a.val {
        Some(p) => (train, load_triples(p, &relations)?),
        None => split_holdout(train, HOLDOUT_FRACTION, config.seed),
    };
    let kb = match &a.kb {
        Some(p) => load_triples(p, &relations)?,
        None => Vec::new(),
    };
    let dataset = Dataset::new(relations, train, validation, Vec::new())?;
    emb.check_coverage(dataset.all_triples().chain(&kb))?;
    let protos = compute_prototypes(dataset.train.iter().chain(&kb), &emb, &dataset.relations)?;

    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let (params, report) = if finetune {
        let stages = if a.no_meta {
            Stages::FineTuneOnly
        } else {
            Stages::Full
        };
        train_pipeline(&dataset, &emb, &protos, &config, stages)?
    } else {
        let theta = init_params(
            emb.dim(),
            &dataset.relations,
            config.cell_sharing,
            config.seed,
        );
        let (params, meta) = meta_train(theta, &dataset.train, &emb, &protos, &config)?;
        let report = TrainReport {
            meta,
            ..TrainReport::for_relations(&dataset.relations)
        };
        (params, report)
    };

    let ckpt_path = a.out_dir.join("checkpoint.txt");
    let report_path = a.out_dir.join("report.tsv");
    Checkpoint {
        params,
        prototypes: protos,
    }
    .save(&ckpt_path)?;
    let mut w = create(&report_path)?;
    report
        .write_tsv(&mut w)
        .map_err(|e| Error::io(&report_path, e))?;

    let mut m = RunManifest::new(if finetune { "train" } else { "meta-train" });
    m.seed = Some(config.seed);
    m.input("embeddings", &a.embeddings)?;
    m.input("train", &a.train)?;
    if let Some(p) = &a.val {
        m.input("val", p)?;
    } else {
        m.setting("validation", format!("holdout {HOLDOUT_FRACTION} of train"));
    }
    if let Some(p) = &a.kb {
        m.input("kb", p)?;
    }
    a.relations.record(&mut m);
    m.setting("no_meta", a.no_meta);
    m.config = Some(config);
    m.output("checkpoint", &ckpt_path);
    m.output("report", &report_path);
    m.save(&a.out_dir.join("manifest.txt"))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let emb = load_embeddings(&a.embeddings)?;
    let relations = &ckpt.params.relations;
    let triples = load_triples(&a.triples, relations)?;
    let exclude = match &a.exclude {
        Some(name) => Some(
            relations
                .id_of(name)
                .ok_or_else(|| Error::UnknownRelation(name.clone()))?,
        ),
        None => None,
    };
    let report = evaluate(&ckpt.params, &ckpt.prototypes, &triples, &emb, exclude)?;
    match &a.out {
        Some(p) => report.write_tsv(create(p)?).map_err(|e| Error::io(p, e))?,
        None => report
            .write_tsv(io::stdout().lock())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    if let Some(p) = &a.confusion {
        report
            .write_confusion(create(p)?)
            .map_err(|e| Error::io(p, e))?;
    }
    if let Some(path) = &a.manifest {
        let mut m = RunManifest::new("eval");
        m.input("checkpoint", &a.checkpoint)?;
        m.input("embeddings", &a.embeddings)?;
        m.input("triples", &a.triples)?;
        if let Some(x) = &a.exclude {
            m.setting("exclude", x);
        }
        if let Some(p) = &a.out {
            m.output("report", p);
        }
        if let Some(p) = &a.confusion {
            m.output("confusion", p);
        }
        m.save(path)?;
    }
    Ok(())
}

fn read_pairs<R: BufRead>(reader: R, source: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match line.split('\t').collect::<Vec<_>>().as_slice() {
            [x, y] => pairs.push((x.to_string(), y.to_string())),
            _ => return Err(Error::parse(source, i + 1, "expected x<TAB>y")),
        }
    }
    Ok(pairs)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let emb = load_embeddings(&a.embeddings)?;
    let pairs = match &a.input {
        Some(p) => read_pairs(
            BufReader::new(File::open(p).map_err(|e| Error::io(p, e))?),
            p,
        )?,
        None => read_pairs(io::stdin().lock(), Path::new("<stdin>"))?,
    };
    check_pairs(&pairs, &emb)?;
    let mut lines = Vec::with_capacity(pairs.len());
    for (x, y) in &pairs {
        let id = predict(&ckpt.params, &ckpt.prototypes, (x, y), &emb)?;
        lines.push(format!("{x}\t{y}\t{}", ckpt.params.relations.name(id)));
    }
    let write = |mut w: Box<dyn Write>| -> io::Result<()> {
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        w.flush()
    };
    match &a.out {
        Some(p) => write(Box::new(create(p)?)).map_err(|e| Error::io(p, e))?,
        None => write(Box::new(io::stdout().lock())).map_err(|e| Error::io("<stdout>", e))?,
    }
    if let Some(path) = &a.manifest {
        let mut m = RunManifest::new("predict");
        m.input("checkpoint", &a.checkpoint)?;
        m.input("embeddings", &a.embeddings)?;
        if let Some(p) = &a.input {
            m.input("pairs", p)?;
        }
        if let Some(p) = &a.out {
            m.output("predictions", p);
        }
        m.save(path)?;
    }
    Ok(())
}

/// Lists every unresolvable concept at once instead of failing on the first.
fn check_pairs(pairs: &[(String, String)], emb: &EmbeddingTable) -> Result<()> {
    let mut missing: Vec<String> = pairs
        .iter()
        .flat_map(|(x, y)| [x, y])
        .filter(|c| emb.get(c).is_none())
        .cloned()
        .collect();
    missing.sort();
    missing.dedup();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingConcepts(missing))
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let counts = SplitCounts::new(a.train, a.val, a.test);
    let spec = SynthSpec::balanced(a.dim, a.relations, counts, a.noise, a.seed);
    let (emb, dataset) = generate(&spec)?;
    write_dataset(&a.out_dir, &emb, &dataset)?;
    let mut m = RunManifest::new("synth");
    m.seed = Some(a.seed);
    m.setting("dim", a.dim);
    m.setting("relations", a.relations);
    m.setting("per_relation", format!("{} {} {}", a.train, a.val, a.test));
    m.setting("noise", format!("{:?}", a.noise));
    for f in ["embeddings.txt", "train.tsv", "val.tsv", "test.tsv"] {
        m.output(f.split('.').next().unwrap_or(f), &a.out_dir.join(f));
    }
    m.save(&a.out_dir.join("manifest.txt"))
}

pub fn cmd_sample_check(a: &SampleCheckArgs) -> Result<()> {
    let relations = a.relations.infer(&a.train)?;
    let train = load_triples(&a.train, &relations)?;
    let counts = dataset_counts(&train, relations.len());
    let dist = task_distribution(&relations, &counts, a.gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
    for r in sample_tasks(&dist, a.draws, &mut rng) {
        *hits.entry(r).or_default() += 1;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut emit = || -> io::Result<()> {
        writeln!(out, "relation\tcount\tprobability\tempirical")?;
        for (&r, &p) in dist.relations().iter().zip(dist.probs()) {
            let h = hits.get(&r).copied().unwrap_or(0);
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}",
                relations.name(r),
                counts[r],
                p,
                h as f64 / a.draws.max(1) as f64
            )?;
        }
        out.flush()
    };
    emit().map_err(|e| Error::io("<stdout>", e))?;
    if let Some(path) = &a.manifest {
        let mut m = RunManifest::new("sample-check");
        m.seed = Some(a.seed);
        m.input("train", &a.train)?;
        m.setting("gamma", format!("{:?}", a.gamma));
        m.setting("draws", a.draws);
        a.relations.record(&mut m);
        m.save(path)?;
    }
    Ok(())
}

/// Re-reads a prototype export written by `prototypes`.
pub fn load_prototype_export(
    path: &Path,
    relations: &RelationSet,
    counts: Vec<usize>,
) -> Result<PrototypeSet> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    PrototypeSet::read_from(BufReader::new(f), path, relations, counts)
}
