//! Mini-batch training with Adam.
//!
//! Every epoch shuffles the dataset with a seeded stream, cuts it into
//! batches of `batch_size` (a trailing batch is kept only if it has at least
//! two graphs), draws a fresh triple per graph and takes one Adam step per
//! batch. All randomness is derived from `(seed, purpose, epoch, graph)`, so
//! a run is reproducible bit for bit.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{check_rates, AugmentKind, AugmentationSpec};
use crate::error::{Error, Result};
use crate::graph::{make_batch, Graph, GraphDataset};
use crate::losses::{total_loss, AbsRegularizer, LossReport, LossWeights};
use crate::model::{forward_triplets, xavier_init, ModelConfig, ModelParams};
use crate::rng::stream;
use crate::tensor::{Tape, Tensor};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

/// Where the negative view comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    /// A strongly perturbed view of the anchor itself.
    SelfView,
    /// A strongly perturbed view of a different graph of the batch, chosen
    /// uniformly.
    OtherGraph,
}

impl FromStr for NegativeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(NegativeSource::SelfView),
            "other" => Ok(NegativeSource::OtherGraph),
            _ => Err(Error::Config(format!("unknown negative source `{s}`"))),
        }
    }
}

impl fmt::Display for NegativeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeSource::SelfView => "self",
            NegativeSource::OtherGraph => "other",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
    pub r_a: f64,
    pub r_b: f64,
    pub negatives: NegativeSource,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Defaults for a dataset with node feature width `input_dim`.
    pub fn new(input_dim: usize) -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 20,
            learning_rate: 0.001,
            seed: 0,
            augmentation: AugmentationSpec::Combo(vec![
                AugmentKind::Subgraph,
                AugmentKind::NodeDrop,
            ]),
            r_a: 0.1,
            r_b: 0.25,
            negatives: NegativeSource::SelfView,
            model: ModelConfig::new(input_dim),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        check_rates(self.r_a, self.r_b).map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()?;
        self.loss.validate()?;
        if self.loss.lambda1 > 0.0 && self.model.num_factors < 2 {
            return Err(Error::Config(
                "num_factors = 1 leaves the masked weights undefined; set lambda1 = 0".into(),
            ));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over the tensors of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.step
    }

    /// Applies one update. Fails without touching anything if a gradient is
    /// non-finite or misshapen.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        if grads.len() != names.len() {
            return Err(Error::dim("adam", &[names.len()], &[grads.len()]));
        }
        for ((name, g), m) in names.iter().zip(grads).zip(&self.m) {
            if g.shape() != m.shape() {
                return Err(Error::dim("adam", m.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean of the per-batch reports.
    pub loss: LossReport,
    pub seconds: f64,
    pub batches: usize,
    pub skipped_graphs: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
}

/// Anchor, positive and negative graphs of one batch.
#[derive(Debug, Clone)]
pub struct BatchTriples {
    pub anchors: Vec<Graph>,
    pub positives: Vec<Graph>,
    pub negatives: Vec<Graph>,
    pub skipped: usize,
}

const MAX_RESAMPLES: usize = 3;

/// Draws one triple per graph of `batch` (indices into `dataset`). A graph
/// whose augmentation degenerates is resampled up to three times and then
/// skipped.
pub fn batch_triples(
    dataset: &GraphDataset,
    batch: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<BatchTriples> {
    let mut out = BatchTriples {
        anchors: Vec::with_capacity(batch.len()),
        positives: Vec::with_capacity(batch.len()),
        negatives: Vec::with_capacity(batch.len()),
        skipped: 0,
    };
    for (pos, &gi) in batch.iter().enumerate() {
        let mut rng = stream(config.seed, &[STREAM_AUGMENT, epoch as u64, gi as u64]);
        let anchor = &dataset.graphs[gi];
        let mut made = None;
        for attempt in 0..=MAX_RESAMPLES {
            let kind = config.augmentation.choose(&mut rng);
            let source = match config.negatives {
                NegativeSource::SelfView => anchor,
                NegativeSource::OtherGraph => {
                    let mut other = rng.gen_range(0..batch.len() - 1);
                    if other >= pos {
                        other += 1;
                    }
                    &dataset.graphs[batch[other]]
                }
            };
            let views = kind
                .apply(anchor, config.r_a, &mut rng)
                .and_then(|p| Ok((p, kind.apply(source, config.r_b, &mut rng)?)));
            match views {
                Ok(v) => {
                    made = Some(v);
                    break;
                }
                Err(Error::DegenerateAugmentation(msg)) => {
                    debug!("graph {gi}, attempt {attempt}: {msg}");
                }
                Err(e) => return Err(e),
            }
        }
        match made {
            Some((p, n)) => {
                out.anchors.push(anchor.clone());
                out.positives.push(p);
                out.negatives.push(n);
            }
            None => {
                warn!("skipping graph {gi} in epoch {epoch}: augmentation degenerate after {MAX_RESAMPLES} resamples");
                out.skipped += 1;
            }
        }
    }
    Ok(out)
}

/// Batches of dataset indices for one epoch.
pub fn epoch_batches(
    num_graphs: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..num_graphs).collect();
    order.shuffle(&mut stream(seed, &[STREAM_SHUFFLE, epoch as u64]));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Initial parameters of a run.
pub fn initial_params(config: &TrainConfig) -> Result<ModelParams> {
    xavier_init(&config.model, &mut stream(config.seed, &[STREAM_INIT]))
}

/// Forward, loss and gradients for one batch of triples. Returns the report
/// and one gradient per parameter tensor in canonical order.
pub fn batch_gradients(
    params: &ModelParams,
    triples: &BatchTriples,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Tensor>)> {
    let anchor = make_batch(&triples.anchors)?;
    let positive = make_batch(&triples.positives)?;
    let negative = make_batch(&triples.negatives)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let with_abs = weights.regularizer == AbsRegularizer::BarlowTwins;
    let emb = forward_triplets(
        &mut tape,
        &vars,
        &params.config,
        &anchor,
        &positive,
        &negative,
        with_abs,
    )?;
    let (loss, report) = total_loss(&mut tape, &emb, params.config.num_factors, weights)?;
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {report:?}")));
    }
    tape.backward(loss.total)?;
    let grads = vars
        .all()
        .into_iter()
        .zip(params.tensors())
        .map(|(v, (_, t))| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    Ok((report, grads))
}

/// [`train_with`] without a per-epoch callback.
pub fn train(dataset: &GraphDataset, config: &TrainConfig) -> Result<(ModelParams, TrainRecord)> {
    train_with(dataset, config, |_, _| Ok(()))
}

/// Trains from a fresh initialization, calling `on_epoch` after every
/// epoch with its record and the current parameters.
pub fn train_with<F>(
    dataset: &GraphDataset,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainRecord)>
where
    F: FnMut(&EpochRecord, &ModelParams) -> Result<()>,
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    if dataset.feature_dim != config.model.input_dim {
        return Err(Error::dim(
            "train input_dim",
            &[dataset.feature_dim],
            &[config.model.input_dim],
        ));
    }
    let batch_size = config.batch_size.min(dataset.len());
    let mut params = initial_params(config)?;
    let mut adam = Adam::new(&params, config.adam);
    let mut record = TrainRecord::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut reports = Vec::new();
        let mut skipped = 0;
        for batch in epoch_batches(dataset.len(), batch_size, config.seed, epoch) {
            let triples = batch_triples(dataset, &batch, config, epoch)?;
            skipped += triples.skipped;
            if triples.anchors.len() < 2 {
                warn!("epoch {epoch}: batch left with fewer than 2 graphs, skipped");
                continue;
            }
            let (report, grads) = batch_gradients(&params, &triples, &config.loss)?;
            adam.step(&mut params, &grads, config.learning_rate)?;
            reports.push(report);
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!(
                "parameters became non-finite in epoch {epoch}"
            )));
        }
        let rec = EpochRecord {
            epoch,
            loss: LossReport::mean(&reports),
            seconds: started.elapsed().as_secs_f64(),
            batches: reports.len(),
            skipped_graphs: skipped,
        };
        debug!("epoch {epoch}: {:?}", rec.loss);
        on_epoch(&rec, &params)?;
        record.epochs.push(rec);
    }
    Ok((params, record))
}
