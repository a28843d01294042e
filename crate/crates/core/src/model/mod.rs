//! GIN encoder with sum readout and the three projection heads.
//!
//! Per layer every node is updated as
//! `h_i ← relu(MLP((1 + eps)·h_i + Σ_{j∈N(i)} h_j))` and the graph embedding
//! is the sum of the final layer's node embeddings. The heads are
//! linear-relu-linear MLPs: `g1` (`hidden → d`) and `g2` (`d → g2_out`)
//! produce row-normalized outputs, `g3` (`hidden → d_h`) does not.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Node feature width F.
    pub input_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Width d of `g1` outputs.
    pub embed_dim: usize,
    /// Number of factors n; each is `embed_dim / num_factors` wide.
    pub num_factors: usize,
    /// Width d_h of `g3` outputs.
    pub abs_dim: usize,
    pub g2_out_dim: usize,
}

impl ModelConfig {
    /// Defaults for the given feature width: 3 layers of 32, d = 128, n = 4.
    pub fn new(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            num_layers: 3,
            hidden_dim: 32,
            embed_dim: 128,
            num_factors: 4,
            abs_dim: 128,
            g2_out_dim: 128,
        }
    }

    pub fn factor_dim(&self) -> usize {
        self.embed_dim / self.num_factors
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("num_factors", self.num_factors),
            ("abs_dim", self.abs_dim),
            ("g2_out_dim", self.g2_out_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.embed_dim.is_multiple_of(self.num_factors) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_factors {}",
                self.embed_dim, self.num_factors
            )));
        }
        Ok(())
    }
}

/// `x·W + b` with `W: [in × out]`, `b: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Linear, relu, linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    fn xavier<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp {
            first: Linear::xavier(input, hidden, rng),
            second: Linear::xavier(hidden, output, rng),
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.0.weight"), &self.first.weight));
        out.push((format!("{prefix}.0.bias"), &self.first.bias));
        out.push((format!("{prefix}.1.weight"), &self.second.weight));
        out.push((format!("{prefix}.1.bias"), &self.second.bias));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.first.weight);
        out.push(&mut self.first.bias);
        out.push(&mut self.second.weight);
        out.push(&mut self.second.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer {
    pub mlp: Mlp,
    /// Learnable self-weight offset, shape `[1]`.
    pub eps: Tensor,
}

/// Every learnable tensor of the encoder and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub gin: Vec<GinLayer>,
    pub g1: Mlp,
    pub g2: Mlp,
    pub g3: Mlp,
}

/// Xavier-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases,
/// zero GIN eps.
pub fn xavier_init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    config.validate()?;
    let c = config;
    let gin = (0..c.num_layers)
        .map(|l| {
            let input = if l == 0 { c.input_dim } else { c.hidden_dim };
            GinLayer {
                mlp: Mlp::xavier(input, c.hidden_dim, c.hidden_dim, rng),
                eps: Tensor::zeros(&[1]),
            }
        })
        .collect();
    Ok(ModelParams {
        config: c.clone(),
        gin,
        g1: Mlp::xavier(c.hidden_dim, c.embed_dim, c.embed_dim, rng),
        g2: Mlp::xavier(c.embed_dim, c.g2_out_dim, c.g2_out_dim, rng),
        g3: Mlp::xavier(c.hidden_dim, c.abs_dim, c.abs_dim, rng),
    })
}

impl ModelParams {
    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.gin.iter().enumerate() {
            layer.mlp.tensors(&format!("gin.{l}.mlp"), &mut out);
            out.push((format!("gin.{l}.eps"), &layer.eps));
        }
        self.g1.tensors("g1", &mut out);
        self.g2.tensors("g2", &mut out);
        self.g3.tensors("g3", &mut out);
        out
    }

    /// Mutable tensors in the order of [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.gin {
            layer.mlp.tensors_mut(&mut out);
            out.push(&mut layer.eps);
        }
        self.g1.tensors_mut(&mut out);
        self.g2.tensors_mut(&mut out);
        self.g3.tensors_mut(&mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Places every tensor on the tape, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars::from_vars(&self.config, &vars).expect("canonical order")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub first: LinearVars,
    pub second: LinearVars,
}

#[derive(Debug, Clone, Copy)]
pub struct GinVars {
    pub mlp: MlpVars,
    pub eps: Var,
}

/// Tape handles for a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub gin: Vec<GinVars>,
    pub g1: MlpVars,
    pub g2: MlpVars,
    pub g3: MlpVars,
}

impl ParamVars {
    /// Rebuilds the structure from handles in canonical tensor order.
    pub fn from_vars(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let expected = config.num_layers * 5 + 12;
        if vars.len() != expected {
            return Err(Error::Argument(format!(
                "expected {expected} parameter handles, got {}",
                vars.len()
            )));
        }
        let mlp_at = |base: usize| MlpVars {
            first: LinearVars {
                weight: vars[base],
                bias: vars[base + 1],
            },
            second: LinearVars {
                weight: vars[base + 2],
                bias: vars[base + 3],
            },
        };
        // each GIN layer holds four MLP tensors followed by eps
        let gin = (0..config.num_layers)
            .map(|l| GinVars {
                mlp: mlp_at(l * 5),
                eps: vars[l * 5 + 4],
            })
            .collect();
        let tail = config.num_layers * 5;
        Ok(ParamVars {
            gin,
            g1: mlp_at(tail),
            g2: mlp_at(tail + 4),
            g3: mlp_at(tail + 8),
        })
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let push_mlp = |m: &MlpVars, out: &mut Vec<Var>| {
            out.extend([m.first.weight, m.first.bias, m.second.weight, m.second.bias]);
        };
        for layer in &self.gin {
            push_mlp(&layer.mlp, &mut out);
            out.push(layer.eps);
        }
        push_mlp(&self.g1, &mut out);
        push_mlp(&self.g2, &mut out);
        push_mlp(&self.g3, &mut out);
        out
    }
}

fn linear(tape: &mut Tape, l: &LinearVars, x: Var) -> Result<Var> {
    let xw = tape.matmul(x, l.weight)?;
    tape.add(xw, l.bias)
}

pub fn mlp_forward(tape: &mut Tape, m: &MlpVars, x: Var) -> Result<Var> {
    let a = linear(tape, &m.first, x)?;
    let a = tape.relu(a);
    linear(tape, &m.second, a)
}

/// Graph embeddings `h: [num_graphs × hidden]`.
pub fn gin_forward(tape: &mut Tape, params: &ParamVars, batch: &GraphBatch) -> Result<Var> {
    let (src, dst) = batch.messages();
    let n = batch.total_nodes();
    let mut h = tape.constant(batch.node_features.clone());
    for layer in &params.gin {
        let neighbors = tape.gather_rows(h, src)?;
        let agg = tape.segment_sum(neighbors, dst, n)?;
        let self_weight = tape.add_scalar(layer.eps, 1.0);
        let own = tape.scalar_mul(self_weight, h)?;
        let combined = tape.add(own, agg)?;
        let out = mlp_forward(tape, &layer.mlp, combined)?;
        h = tape.relu(out);
    }
    tape.segment_sum(h, &batch.graph_id, batch.num_graphs)
}

pub fn project_g1(tape: &mut Tape, params: &ParamVars, h: Var) -> Result<Var> {
    let y = mlp_forward(tape, &params.g1, h)?;
    tape.l2_normalize_rows(y)
}

pub fn project_g2(tape: &mut Tape, params: &ParamVars, y: Var) -> Result<Var> {
    let q = mlp_forward(tape, &params.g2, y)?;
    tape.l2_normalize_rows(q)
}

pub fn project_g3(tape: &mut Tape, params: &ParamVars, h: Var) -> Result<Var> {
    mlp_forward(tape, &params.g3, h)
}

fn check_factors(width: usize, n: usize) -> Result<usize> {
    if n == 0 || !width.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "width {width} is not divisible into {n} factors"
        )));
    }
    Ok(width / n)
}

/// Splits `y: [B × d]` into `n` contiguous `[B × d/n]` column blocks.
pub fn factorize(tape: &mut Tape, y: Var, n: usize) -> Result<Vec<Var>> {
    let d = tape.shape(y).last().copied().unwrap_or(0);
    let dc = check_factors(d, n)?;
    (0..n)
        .map(|m| tape.slice(y, 1, m * dc, (m + 1) * dc))
        .collect()
}

/// Zeroes factor block `m` (1-based) of `y: [B × d]`.
pub fn mask_factor(tape: &mut Tape, y: Var, m: usize, n: usize) -> Result<Var> {
    let d = tape.shape(y).last().copied().unwrap_or(0);
    let dc = check_factors(d, n)?;
    if m == 0 || m > n {
        return Err(Error::Argument(format!("factor index {m} outside 1..={n}")));
    }
    let mut mask = vec![1.0; d];
    mask[(m - 1) * dc..m * dc].iter_mut().for_each(|x| *x = 0.0);
    let mask = tape.constant(Tensor::vector(mask));
    tape.mul(y, mask)
}

/// Every representation the objective needs for one batch of triples.
#[derive(Debug, Clone)]
pub struct TripletEmbeddings {
    pub h: Var,
    pub h_pos: Var,
    pub h_neg: Var,
    pub y: Var,
    pub y_pos: Var,
    pub y_neg: Var,
    /// `g2(y)`.
    pub q: Var,
    /// `g2` of `y⁺` with factor `m` masked, for `m = 1..=n`.
    pub q_pos: Vec<Var>,
    pub q_neg: Vec<Var>,
    /// `g3(h)` and `g3(h⁺)`; absent when the absolute-distance term does
    /// not use them.
    pub z: Option<Var>,
    pub z_pos: Option<Var>,
}

/// Runs the shared encoder on the three batches and every head.
pub fn forward_triplets(
    tape: &mut Tape,
    params: &ParamVars,
    config: &ModelConfig,
    anchor: &GraphBatch,
    positive: &GraphBatch,
    negative: &GraphBatch,
    with_abs: bool,
) -> Result<TripletEmbeddings> {
    if anchor.num_graphs != positive.num_graphs || anchor.num_graphs != negative.num_graphs {
        return Err(Error::dim(
            "triplet batches",
            &[anchor.num_graphs, positive.num_graphs],
            &[negative.num_graphs],
        ));
    }
    let h = gin_forward(tape, params, anchor)?;
    let h_pos = gin_forward(tape, params, positive)?;
    let h_neg = gin_forward(tape, params, negative)?;
    let y = project_g1(tape, params, h)?;
    let y_pos = project_g1(tape, params, h_pos)?;
    let y_neg = project_g1(tape, params, h_neg)?;
    let q = project_g2(tape, params, y)?;
    let n = config.num_factors;
    let mut q_pos = Vec::with_capacity(n);
    let mut q_neg = Vec::with_capacity(n);
    for m in 1..=n {
        let masked = mask_factor(tape, y_pos, m, n)?;
        q_pos.push(project_g2(tape, params, masked)?);
        let masked = mask_factor(tape, y_neg, m, n)?;
        q_neg.push(project_g2(tape, params, masked)?);
    }
    let (z, z_pos) = if with_abs {
        (
            Some(project_g3(tape, params, h)?),
            Some(project_g3(tape, params, h_pos)?),
        )
    } else {
        (None, None)
    };
    Ok(TripletEmbeddings {
        h,
        h_pos,
        h_neg,
        y,
        y_pos,
        y_neg,
        q,
        q_pos,
        q_neg,
        z,
        z_pos,
    })
}
