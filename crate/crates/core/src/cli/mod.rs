//! Command implementations behind the `graphsc` binary.
//!
//! Output files of a run directory:
//!
//! | file             | written by | content                                        |
//! |------------------|------------|------------------------------------------------|
//! | `manifest.toml`  | every run  | resolved config, one `key = value` per line     |
//! | `train.csv`      | `train`    | `epoch,l_se,l_fa,l_ma,l_ab,total,seconds`       |
//! | `model.ckpt`     | `train`    | checkpoint                                      |
//! | `embeddings.csv` | `embed`    | `graph,label,h0,..,h{k-1}`                      |
//! | `eval.csv`       | `eval`     | `run,fold,accuracy`                             |
//! | `summary.txt`    | `eval`     | `dataset, mean_acc, std, runs, k` and baseline  |
//!
//! `.lock` exists while a command owns the directory.

pub mod config;

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

pub use config::{FeatureChoice, RunConfig, Variant, CONFIG_VERSION, KEYS};

use crate::augment::AugmentationSpec;
use crate::check::{dataset_gradcheck, DatasetGradCheck};
use crate::error::{Error, Result};
use crate::eval::{embed_dataset, kfold_eval, EmbeddingMatrix, EvalReport};
use crate::graph::Graph;
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::trainer::{train_with, TrainRecord};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TRAIN_CSV: &str = "train.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const LOCK_FILE: &str = ".lock";

/// Gradient checks at or above this relative error fail.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_DRAWS: usize = 20;

#[derive(Debug, Parser)]
#[command(
    name = "graphsc",
    version,
    about = "Graph self-contrast representation learning"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (same as `--set output_dir=...`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for assignment in &self.set {
            config.apply_override(assignment)?;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write a checkpoint and the per-epoch loss CSV.
    Train(RunArgs),
    /// Embed the dataset with a trained checkpoint.
    Embed {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `model.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// k-fold linear SVM evaluation of an embedding file.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `embeddings.csv` in the output directory.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Finite-difference check of the objective on a random batch.
    Gradcheck(RunArgs),
    /// Show what one augmentation does to one graph.
    AugmentPreview {
        /// Directory with the TU files.
        #[arg(long)]
        dataset: PathBuf,
        /// File prefix; defaults to the directory name.
        #[arg(long)]
        name: Option<String>,
        /// `node_drop`, `edge_perturb`, `attr_mask`, `subgraph` or `combo(..)`.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// 0-based graph index.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Argument(format!(
                        "{} is in use by another run (remove {} if it is stale)",
                        dir.display(),
                        path.display()
                    ))
                } else {
                    Error::Io(e)
                }
            })?;
        writeln!(file, "{}", std::process::id())?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_manifest(config: &RunConfig) -> Result<()> {
    fs::write(config.output_dir.join(MANIFEST_FILE), config.manifest())?;
    Ok(())
}

/// Training record as CSV. Durations are written as 0 unless
/// `wall_time` is set, so that identical runs give identical files.
pub fn write_train_csv<W: Write>(out: W, record: &TrainRecord, wall_time: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "l_se", "l_fa", "l_ma", "l_ab", "total", "seconds"])?;
    for e in &record.epochs {
        let l = &e.loss;
        let seconds = if wall_time { e.seconds } else { 0.0 };
        w.write_record([
            e.epoch.to_string(),
            l.l_se.to_string(),
            l.l_fa.to_string(),
            l.l_ma.to_string(),
            l.l_ab.to_string(),
            l.total.to_string(),
            seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub record: TrainRecord,
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    let dataset = config.load_dataset()?;
    let train_config = config.train_config(&dataset);
    train_config.validate()?;
    let _lock = DirLock::acquire(&config.output_dir)?;
    write_manifest(config)?;
    info!(
        "training {} ({} graphs, {} features), variant {}",
        dataset.name,
        dataset.len(),
        dataset.feature_dim,
        config.variant
    );
    let (params, record) = train_with(&dataset, &train_config, |rec, _| {
        info!("epoch {}: total {:.6}", rec.epoch, rec.loss.total);
        Ok(())
    })?;
    write_train_csv(
        create(&config.output_dir.join(TRAIN_CSV))?,
        &record,
        config.record_wall_time,
    )?;
    save_checkpoint(config.output_dir.join(CHECKPOINT_FILE), &params)?;
    Ok(TrainOutcome { params, record })
}

pub fn write_embeddings<W: Write>(out: W, emb: &EmbeddingMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["graph".to_string(), "label".to_string()];
    header.extend((0..emb.rows.cols()).map(|j| format!("h{j}")));
    w.write_record(&header)?;
    for (i, label) in emb.labels.iter().enumerate() {
        let mut rec = vec![i.to_string(), label.to_string()];
        rec.extend(emb.rows.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(|source| Error::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |msg: String| Error::MalformedDataset(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_reader(file);
    let width = reader.headers()?.len();
    if width < 3 {
        return Err(bad(
            "expected graph, label and at least one embedding column".into(),
        ));
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(bad(format!(
                "row {} has {} fields, expected {width}",
                line + 1,
                rec.len()
            )));
        }
        labels.push(
            rec[1]
                .parse()
                .map_err(|_| bad(format!("bad label `{}`", &rec[1])))?,
        );
        for field in rec.iter().skip(2) {
            data.push(
                field
                    .parse()
                    .map_err(|_| bad(format!("bad value `{field}`")))?,
            );
        }
    }
    EmbeddingMatrix::new(Tensor::new(vec![labels.len(), width - 2], data)?, labels)
}

pub fn cmd_embed(config: &RunConfig, checkpoint: Option<&Path>) -> Result<EmbeddingMatrix> {
    let dataset = config.load_dataset()?;
    let default_ckpt = config.output_dir.join(CHECKPOINT_FILE);
    let params = load_checkpoint(checkpoint.unwrap_or(&default_ckpt))?;
    if params.config.input_dim != dataset.feature_dim {
        return Err(Error::dim(
            "checkpoint input_dim vs dataset features",
            &[params.config.input_dim],
            &[dataset.feature_dim],
        ));
    }
    let _lock = DirLock::acquire(&config.output_dir)?;
    write_manifest(config)?;
    let emb = embed_dataset(&dataset, &params)?;
    write_embeddings(create(&config.output_dir.join(EMBEDDINGS_FILE))?, &emb)?;
    Ok(emb)
}

pub fn cmd_eval(config: &RunConfig, embeddings: Option<&Path>) -> Result<EvalReport> {
    let default_emb = config.output_dir.join(EMBEDDINGS_FILE);
    let emb = read_embeddings(embeddings.unwrap_or(&default_emb))?;
    let _lock = DirLock::acquire(&config.output_dir)?;
    write_manifest(config)?;
    let report = kfold_eval(&emb, &config.eval)?;
    report.write_csv(create(&config.output_dir.join(EVAL_CSV))?)?;
    fs::write(
        config.output_dir.join(SUMMARY_FILE),
        summary_text(config, &report),
    )?;
    Ok(report)
}

fn summary_text(config: &RunConfig, report: &EvalReport) -> String {
    format!(
        "{}\nmajority baseline: {:.4}\n",
        report.summary_line(&config.dataset_name()),
        report.majority_baseline
    )
}

/// Checks on `gradcheck_batch` graphs of the configured dataset; fails with
/// a numeric error when the worst relative error reaches
/// [`GRADCHECK_TOLERANCE`].
pub fn cmd_gradcheck(config: &RunConfig) -> Result<DatasetGradCheck> {
    let dataset = config.load_dataset()?;
    let train_config = config.train_config(&dataset);
    train_config.validate()?;
    dataset_gradcheck(
        &dataset,
        &train_config,
        config.gradcheck_batch,
        config.gradcheck_step,
        GRADCHECK_DRAWS,
    )
}

/// Textual difference between a graph and one augmented view of it. The
/// view's randomness comes from `(seed, index)`.
pub fn augment_preview(
    g: &Graph,
    spec: &AugmentationSpec,
    r: f64,
    seed: u64,
    index: usize,
) -> Result<String> {
    let mut rng = stream(seed, &[index as u64]);
    let kind = spec.choose(&mut rng);
    let view = kind.apply(g, r, &mut rng)?;
    let mut out = format!("graph {index}, {kind} at r = {r}\n");
    let (n0, n1) = (g.num_nodes(), view.num_nodes());
    if n0 != n1 {
        out.push_str(&format!(
            "nodes: {n0} -> {n1} (kept nodes renumbered in order)\n"
        ));
        out.push_str(&format!(
            "edges: {} -> {}\n",
            g.num_edges(),
            view.num_edges()
        ));
        return Ok(out);
    }
    let before: BTreeSet<(usize, usize)> = g.edges().iter().copied().collect();
    let after: BTreeSet<(usize, usize)> = view.edges().iter().copied().collect();
    let mut lines = Vec::new();
    for (u, v) in before.difference(&after) {
        lines.push(format!("- edge ({u}, {v})"));
    }
    for (u, v) in after.difference(&before) {
        lines.push(format!("+ edge ({u}, {v})"));
    }
    for i in 0..n0 {
        if g.node_features().row(i) != view.node_features().row(i) {
            lines.push(format!(
                "~ node {i} features {:?} -> {:?}",
                g.node_features().row(i),
                view.node_features().row(i)
            ));
        }
    }
    if lines.is_empty() {
        out.push_str("no changes\n");
    } else {
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = args.resolve()?;
            let outcome = cmd_train(&config)?;
            if let Some(last) = outcome.record.epochs.last() {
                println!("epoch {}: total loss {:.6}", last.epoch, last.loss.total);
            }
            println!("wrote {}", config.output_dir.display());
        }
        Command::Embed { run, checkpoint } => {
            let config = run.resolve()?;
            let emb = cmd_embed(&config, checkpoint.as_deref())?;
            println!(
                "wrote {} ({} x {})",
                config.output_dir.join(EMBEDDINGS_FILE).display(),
                emb.rows.rows(),
                emb.rows.cols()
            );
        }
        Command::Eval { run, embeddings } => {
            let config = run.resolve()?;
            let report = cmd_eval(&config, embeddings.as_deref())?;
            print!("{}", summary_text(&config, &report));
        }
        Command::Gradcheck(args) => {
            let config = args.resolve()?;
            let check = cmd_gradcheck(&config)?;
            for (term, err) in check.report.rows() {
                println!("{term:<6} {err:.3e}");
            }
            println!(
                "graphs {:?}, {} draws rejected at relu kinks",
                check.graphs, check.rejected
            );
            let worst = check.report.max();
            println!("max relative error {worst:.3e}");
            if !(worst < GRADCHECK_TOLERANCE) {
                return Err(Error::Numeric(format!(
                    "gradient check error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}"
                )));
            }
        }
        Command::AugmentPreview {
            dataset,
            name,
            spec,
            r,
            seed,
            index,
        } => {
            let config = RunConfig {
                dataset,
                dataset_name: name,
                ..RunConfig::default()
            };
            let ds = config.load_dataset()?;
            let g = ds.graphs.get(index).ok_or_else(|| {
                Error::Argument(format!(
                    "graph index {index} out of range (0..{})",
                    ds.len()
                ))
            })?;
            let spec: AugmentationSpec = spec.parse()?;
            print!("{}", augment_preview(g, &spec, r, seed, index)?);
        }
    }
    Ok(())
}
