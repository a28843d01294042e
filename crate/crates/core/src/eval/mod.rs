//! Downstream evaluation of frozen graph embeddings: repeated stratified
//! k-fold cross-validation of a linear SVM whose `C` is picked per fold by
//! an inner 3-fold search on the training portion.

mod svm;

pub use svm::{linear_svm_train, LinearSvm, Standardizer};

use std::io::Write;

use log::warn;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{make_batch, GraphDataset};
use crate::model::{gin_forward, ModelParams};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Tape, Tensor};

/// Encoder outputs `h` for every graph, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Tensor,
    pub labels: Vec<usize>,
}

impl EmbeddingMatrix {
    pub fn new(rows: Tensor, labels: Vec<usize>) -> Result<Self> {
        if rows.rank() != 2 || rows.rows() != labels.len() {
            return Err(Error::dim(
                "embedding matrix",
                rows.shape(),
                &[labels.len()],
            ));
        }
        Ok(EmbeddingMatrix { rows, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row_refs(&self, idx: &[usize]) -> Vec<&[f64]> {
        idx.iter().map(|&i| self.rows.row(i)).collect()
    }

    fn label_subset(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

const EMBED_CHUNK: usize = 256;

/// Deterministic forward pass of the encoder over the whole dataset.
pub fn embed_dataset(dataset: &GraphDataset, params: &ModelParams) -> Result<EmbeddingMatrix> {
    let labels = dataset
        .graphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            g.label()
                .ok_or_else(|| Error::MalformedDataset(format!("graph {i} has no label")))
        })
        .collect::<Result<Vec<_>>>()?;
    let hidden = params.config.hidden_dim;
    let mut data = Vec::with_capacity(dataset.len() * hidden);
    for chunk in dataset.graphs.chunks(EMBED_CHUNK) {
        let batch = make_batch(chunk)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let h = gin_forward(&mut tape, &vars, &batch)?;
        data.extend_from_slice(tape.value(h).data());
    }
    let rows = Tensor::new(vec![dataset.len(), hidden], data)?;
    if !rows.is_finite() {
        return Err(Error::Numeric("non-finite embeddings".into()));
    }
    EmbeddingMatrix::new(rows, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub folds: usize,
    pub runs: usize,
    pub c_grid: Vec<f64>,
    /// Pegasos passes over the training rows.
    pub svm_epochs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 10,
            runs: 5,
            c_grid: vec![0.01, 0.1, 1.0, 10.0],
            svm_epochs: 50,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "folds must be at least 2, got {}",
                self.folds
            )));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config(format!("invalid C grid {:?}", self.c_grid)));
        }
        if self.svm_epochs == 0 {
            return Err(Error::Config("svm_epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Seeds of the individual runs.
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.runs as u64)
            .map(|r| derive_seed(self.seed, &[r]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Test accuracy of every evaluated fold, per run. Folds whose training
    /// part has a single class are left out.
    pub fold_accuracies: Vec<Vec<f64>>,
    /// Mean fold accuracy per run.
    pub run_accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the run accuracies.
    pub std: f64,
    pub run_seeds: Vec<u64>,
    pub folds: usize,
    /// Accuracy of always predicting the most frequent class.
    pub majority_baseline: f64,
}

impl EvalReport {
    /// `dataset, mean_acc, std, runs, k`
    pub fn summary_line(&self, dataset: &str) -> String {
        format!(
            "{dataset}, {:.4}, {:.4}, {}, {}",
            self.mean,
            self.std,
            self.run_accuracies.len(),
            self.folds
        )
    }

    /// CSV with header `run,fold,accuracy`; runs and folds are 1-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run", "fold", "accuracy"])?;
        for (r, folds) in self.fold_accuracies.iter().enumerate() {
            for (f, acc) in folds.iter().enumerate() {
                w.write_record([(r + 1).to_string(), (f + 1).to_string(), acc.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn majority_baseline(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_label + 1];
    for &l in labels {
        counts[l] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / labels.len() as f64
}

/// Splits `indices` into `k` folds. Each class is shuffled and dealt round
/// robin, continuing where the previous class stopped, so fold sizes differ
/// by at most one. If some class has fewer than `k` members the split falls
/// back to a plain shuffle.
pub fn stratified_folds(
    indices: &[usize],
    labels: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in indices {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let mut folds = vec![Vec::new(); k];
    if by_class.values().any(|members| members.len() < k) {
        warn!("a class has fewer than {k} members; using unstratified folds");
        let mut order = indices.to_vec();
        order.shuffle(rng);
        for (pos, i) in order.into_iter().enumerate() {
            folds[pos % k].push(i);
        }
    } else {
        let mut next = 0;
        for members in by_class.values_mut() {
            members.shuffle(rng);
            for &i in members.iter() {
                folds[next % k].push(i);
                next += 1;
            }
        }
    }
    folds
}

fn complement(folds: &[Vec<usize>], held_out: usize) -> Vec<usize> {
    folds
        .iter()
        .enumerate()
        .filter(|(f, _)| *f != held_out)
        .flat_map(|(_, v)| v.iter().copied())
        .collect()
}

fn distinct_classes(labels: &[usize]) -> usize {
    let mut l = labels.to_vec();
    l.sort_unstable();
    l.dedup();
    l.len()
}

/// A fitted fold: the selected `C` and the classifier trained with it on
/// the whole training portion.
#[derive(Debug, Clone)]
pub struct FoldModel {
    pub c: f64,
    pub svm: LinearSvm,
}

/// Selects `C` by inner 3-fold validation on `train` and refits. Only rows
/// in `train` are ever read.
pub fn fit_fold(
    emb: &EmbeddingMatrix,
    train: &[usize],
    config: &EvalConfig,
    seed: u64,
) -> Result<FoldModel> {
    let mut rng = stream(seed, &[0]);
    let inner = stratified_folds(train, &emb.labels, 3, &mut rng);
    let mut best: Option<(f64, f64)> = None;
    for (ci, &c) in config.c_grid.iter().enumerate() {
        let mut accs = Vec::new();
        for f in 0..inner.len() {
            let fit_idx = complement(&inner, f);
            let val_idx = &inner[f];
            let fit_labels = emb.label_subset(&fit_idx);
            if val_idx.is_empty() || distinct_classes(&fit_labels) < 2 {
                continue;
            }
            let mut rng = stream(seed, &[1, ci as u64, f as u64]);
            let svm = linear_svm_train(
                &emb.row_refs(&fit_idx),
                &fit_labels,
                c,
                config.svm_epochs,
                &mut rng,
            )?;
            accs.push(svm.accuracy(&emb.row_refs(val_idx), &emb.label_subset(val_idx)));
        }
        let score = if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        };
        // strict improvement keeps the earliest C on ties
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, c));
        }
    }
    let c = best.map_or(config.c_grid[0], |(_, c)| c);
    let mut rng = stream(seed, &[2]);
    let svm = linear_svm_train(
        &emb.row_refs(train),
        &emb.label_subset(train),
        c,
        config.svm_epochs,
        &mut rng,
    )?;
    Ok(FoldModel { c, svm })
}

/// Repeated k-fold evaluation with the run seeds of `config`.
pub fn kfold_eval(emb: &EmbeddingMatrix, config: &EvalConfig) -> Result<EvalReport> {
    kfold_eval_seeds(emb, config, &config.run_seeds())
}

/// Repeated k-fold evaluation, one run per seed.
pub fn kfold_eval_seeds(
    emb: &EmbeddingMatrix,
    config: &EvalConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    config.validate()?;
    let n = emb.len();
    let k = config.folds;
    if n < k {
        return Err(Error::Config(format!(
            "{n} samples cannot be split into {k} folds"
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    let mut fold_accuracies = Vec::with_capacity(seeds.len());
    let mut run_accuracies = Vec::with_capacity(seeds.len());
    for (run, &seed) in seeds.iter().enumerate() {
        let folds = stratified_folds(&all, &emb.labels, k, &mut stream(seed, &[0]));
        let mut accs = Vec::with_capacity(k);
        for f in 0..k {
            let train = complement(&folds, f);
            if distinct_classes(&emb.label_subset(&train)) < 2 {
                warn!("run {run}, fold {f}: training part has a single class; fold skipped");
                continue;
            }
            let model = fit_fold(emb, &train, config, derive_seed(seed, &[1, f as u64]))?;
            let test = &folds[f];
            accs.push(
                model
                    .svm
                    .accuracy(&emb.row_refs(test), &emb.label_subset(test)),
            );
        }
        if accs.is_empty() {
            return Err(Error::Argument(format!(
                "run {run}: no fold could be evaluated"
            )));
        }
        run_accuracies.push(accs.iter().sum::<f64>() / accs.len() as f64);
        fold_accuracies.push(accs);
    }
    let runs = run_accuracies.len() as f64;
    let mean = run_accuracies.iter().sum::<f64>() / runs;
    let std = (run_accuracies
        .iter()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / runs)
        .sqrt();
    Ok(EvalReport {
        fold_accuracies,
        run_accuracies,
        mean,
        std,
        run_seeds: seeds.to_vec(),
        folds: k,
        majority_baseline: majority_baseline(&emb.labels),
    })
}
