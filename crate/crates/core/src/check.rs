//! Finite-difference check of the training objective with respect to every
//! model parameter.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{make_batch, GraphDataset};
use crate::losses::{
    masked_weights, total_loss, total_loss_with_weights, AbsRegularizer, LossWeights,
};
use crate::model::{forward_triplets, ModelParams, ParamVars};
use crate::rng::{derive_seed, stream};
use crate::tensor::{gradient_check_multi, ErrorMeasure, Tape, Tensor};
use crate::trainer::{batch_triples, initial_params, BatchTriples, TrainConfig};

/// Worst relative error per loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub l_se: f64,
    pub l_fa: f64,
    /// `None` with a single factor.
    pub l_ma: Option<f64>,
    pub l_ab: f64,
    pub total: f64,
    /// Smallest distance of a parameter-dependent relu input from its kink
    /// at the unperturbed point.
    pub relu_margin: f64,
    /// Perturbed evaluations that landed on a different smooth piece.
    pub kink_crossings: usize,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        [
            self.l_se,
            self.l_fa,
            self.l_ma.unwrap_or(0.0),
            self.l_ab,
            self.total,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut rows = vec![("l_se", self.l_se), ("l_fa", self.l_fa)];
        if let Some(e) = self.l_ma {
            rows.push(("l_ma", e));
        }
        rows.push(("l_ab", self.l_ab));
        rows.push(("total", self.total));
        rows
    }
}

/// Replaces every bias and GIN `eps` with uniform values in `[-0.5, 0.5]`.
/// Xavier initialization leaves biases at zero, which puts many relu inputs
/// exactly on the kink for graphs with zero features.
pub fn randomize_offsets<R: Rng + ?Sized>(params: &mut ModelParams, rng: &mut R) {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with(".bias") || name.ends_with(".eps") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
}

/// Compares analytic and central-difference gradients of every loss term
/// and of the total. With detached masked weights the weights are frozen at
/// their value in the unperturbed point, so both sides differentiate the
/// same function. The RBF bandwidth is re-estimated at every perturbed
/// point and is not frozen, so the check is meaningful for the linear
/// kernel only.
pub fn objective_gradcheck(
    params: &ModelParams,
    triples: &BatchTriples,
    weights: &LossWeights,
    step: f64,
    measure: ErrorMeasure,
) -> Result<GradCheckReport> {
    let anchor = make_batch(&triples.anchors)?;
    let positive = make_batch(&triples.positives)?;
    let negative = make_batch(&triples.negatives)?;
    let config = params.config.clone();
    let n = config.num_factors;
    let with_abs = weights.regularizer == AbsRegularizer::BarlowTwins;

    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let emb = forward_triplets(
        &mut tape, &vars, &config, &anchor, &positive, &negative, with_abs,
    )?;
    let frozen_w: Option<Tensor> = if weights.detach_weights && n >= 2 {
        let w = masked_weights(&mut tape, emb.q, &emb.q_pos, &emb.q_neg, true)?;
        Some(tape.value(w).clone())
    } else {
        None
    };
    match &frozen_w {
        Some(w) => total_loss_with_weights(&mut tape, &emb, n, weights, w)?,
        None => total_loss(&mut tape, &emb, n, weights)?,
    };
    let relu_margin = tape.min_relu_margin().unwrap_or(f64::INFINITY);

    let inputs: Vec<Tensor> = params
        .tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let check = gradient_check_multi(
        |tape, vars| {
            let pv = ParamVars::from_vars(&config, vars)?;
            let emb =
                forward_triplets(tape, &pv, &config, &anchor, &positive, &negative, with_abs)?;
            let (lv, _) = match &frozen_w {
                Some(w) => total_loss_with_weights(tape, &emb, n, weights, w)?,
                None => total_loss(tape, &emb, n, weights)?,
            };
            let mut outs = vec![lv.l_se, lv.l_fa, lv.l_ab, lv.total];
            outs.extend(lv.l_ma);
            Ok(outs)
        },
        &inputs,
        step,
        measure,
    )?;
    let errs = check.errors;
    Ok(GradCheckReport {
        l_se: errs[0],
        l_fa: errs[1],
        l_ab: errs[2],
        total: errs[3],
        l_ma: errs.get(4).copied(),
        relu_margin,
        kink_crossings: check.kink_crossings,
    })
}

const STREAM_GRADCHECK: u64 = 7;

/// Outcome of [`dataset_gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetGradCheck {
    pub report: GradCheckReport,
    /// Dataset indices of the checked batch.
    pub graphs: Vec<usize>,
    /// Number of draws whose stencil crossed a kink and were discarded.
    pub rejected: usize,
}

/// Gradient check at a random point: `batch` distinct graphs with fresh
/// triples, freshly initialized parameters and random offsets, all derived
/// from `config.seed`. A draw whose finite-difference stencil crosses a
/// relu kink is discarded and redrawn, up to `max_draws` draws in total.
pub fn dataset_gradcheck(
    dataset: &GraphDataset,
    config: &TrainConfig,
    batch: usize,
    step: f64,
    max_draws: usize,
) -> Result<DatasetGradCheck> {
    if batch < 2 || batch > dataset.len() {
        return Err(Error::Config(format!(
            "gradient check batch of {batch} graphs needs 2..={} graphs",
            dataset.len()
        )));
    }
    for draw in 0..max_draws as u64 {
        let mut local = config.clone();
        local.seed = derive_seed(config.seed, &[STREAM_GRADCHECK, draw]);
        let graphs = rand::seq::index::sample(&mut stream(local.seed, &[0]), dataset.len(), batch)
            .into_vec();
        let mut params = initial_params(&local)?;
        randomize_offsets(&mut params, &mut stream(local.seed, &[1]));
        let triples = batch_triples(dataset, &graphs, &local, 1)?;
        if triples.anchors.len() < 2 {
            continue;
        }
        let report = objective_gradcheck(
            &params,
            &triples,
            &local.loss,
            step,
            ErrorMeasure::Tensorwise,
        )?;
        if report.kink_crossings == 0 {
            return Ok(DatasetGradCheck {
                report,
                graphs,
                rejected: draw as usize,
            });
        }
        log::info!(
            "draw {draw}: {} perturbations cross a relu kink, redrawing",
            report.kink_crossings
        );
    }
    Err(Error::Numeric(format!(
        "no kink-free point found in {max_draws} draws; try a smaller step"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::*;
    use crate::model::{xavier_init, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ModelParams, BatchTriples) {
        let mut config = ModelConfig::new(1);
        config.num_layers = 2;
        config.hidden_dim = 4;
        config.embed_dim = 4;
        config.num_factors = 2;
        config.abs_dim = 3;
        config.g2_out_dim = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = xavier_init(&config, &mut rng).unwrap();
        randomize_offsets(&mut p, &mut rng);
        let triples = BatchTriples {
            anchors: vec![triangle(), star(3), path(4)],
            positives: vec![path(3), star(2), path(4)],
            negatives: vec![edgeless(2), path(2), triangle()],
            skipped: 0,
        };
        (p, triples)
    }

    #[test]
    fn default_objective_passes() {
        let (p, t) = small();
        let r = objective_gradcheck(
            &p,
            &t,
            &LossWeights::default(),
            1e-5,
            ErrorMeasure::Elementwise,
        )
        .unwrap();
        assert!(r.max() < 1e-4, "{r:?}");
        assert!(r.l_ma.is_some());
        assert!(r.relu_margin > 0.0 && r.relu_margin.is_finite());
    }

    #[test]
    fn undetached_weights_pass_too() {
        let (p, t) = small();
        let w = LossWeights {
            detach_weights: false,
            ..LossWeights::default()
        };
        let r = objective_gradcheck(&p, &t, &w, 1e-5, ErrorMeasure::Tensorwise).unwrap();
        assert!(r.max() < 1e-4, "{r:?}");
    }

    #[test]
    fn offsets_are_randomized() {
        let (p, _) = small();
        assert!(p.gin[0].eps.data()[0] != 0.0);
        assert!(p.g1.first.bias.data().iter().all(|&b| b != 0.0));
    }
}
