//! Loss terms and the combined objective
//! `L = L_se + λ1·L_ma + λ2·L_fa + λ3·L_ab`.
//!
//! Every term is built on the caller's tape so it can be differentiated.
//! [`hsic_empirical`] is a plain-slice reference estimator.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{factorize, TripletEmbeddings};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbsRegularizer {
    BarlowTwins,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsicKernel {
    Linear,
    /// Gaussian kernel with the median pairwise squared distance as `σ²`.
    Rbf,
}

/// What HSIC treats as its samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsicSamples {
    /// The `d_c` coordinates of one graph's factor block (per-graph HSIC).
    Coords,
    /// The `B` graphs of the batch, each a `d_c`-dimensional sample.
    Batch,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name,)+ })
            }
        }
    };
}

named_enum!(AbsRegularizer, "regularizer", AbsRegularizer::BarlowTwins => "bt", AbsRegularizer::Mse => "mse");
named_enum!(HsicKernel, "hsic kernel", HsicKernel::Linear => "linear", HsicKernel::Rbf => "rbf");
named_enum!(HsicSamples, "hsic sample mode", HsicSamples::Coords => "coords", HsicSamples::Batch => "batch");

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Triplet margin ε.
    pub epsilon: f64,
    /// Barlow Twins off-diagonal weight β.
    pub beta: f64,
    pub regularizer: AbsRegularizer,
    pub hsic_kernel: HsicKernel,
    pub hsic_samples: HsicSamples,
    /// Treat the masked-factor weights as constants during backward.
    pub detach_weights: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.01,
            lambda3: 0.01,
            epsilon: 0.2,
            beta: 0.013,
            regularizer: AbsRegularizer::BarlowTwins,
            hsic_kernel: HsicKernel::Linear,
            hsic_samples: HsicSamples::Coords,
            detach_weights: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-term values for one batch (or their mean over an epoch).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_se: f64,
    pub l_fa: f64,
    pub l_ma: f64,
    pub l_ab: f64,
    pub total: f64,
}

impl LossReport {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.l_se + w.lambda1 * self.l_ma + w.lambda2 * self.l_fa + w.lambda3 * self.l_ab
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.l_se += r.l_se;
            m.l_fa += r.l_fa;
            m.l_ma += r.l_ma;
            m.l_ab += r.l_ab;
            m.total += r.total;
        }
        LossReport {
            l_se: m.l_se / n,
            l_fa: m.l_fa / n,
            l_ma: m.l_ma / n,
            l_ab: m.l_ab / n,
            total: m.total / n,
        }
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn matrix_rows(tape: &Tape, op: &'static str, a: Var) -> Result<usize> {
    match tape.shape(a) {
        [b, _] if *b >= 1 => Ok(*b),
        s => Err(Error::dim(op, s, &[])),
    }
}

/// `‖a_i − b_i‖²` per row, shape `[B]`.
fn row_sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    tape.sum(sq, Some(1))
}

/// `max(‖a − p‖² − ‖a − n‖² + ε, 0)` per row, shape `[B]`.
fn hinge(tape: &mut Tape, a: Var, p: Var, n: Var, epsilon: f64) -> Result<Var> {
    let dp = row_sq_dist(tape, a, p)?;
    let dn = row_sq_dist(tape, a, n)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, epsilon);
    Ok(tape.relu(shifted))
}

/// `(1/B) Σ_i max(‖y_i − y⁺_i‖² − ‖y_i − y⁻_i‖² + ε, 0)`.
pub fn triplet_loss(tape: &mut Tape, y: Var, y_pos: Var, y_neg: Var, epsilon: f64) -> Result<Var> {
    same_shape(tape, "triplet_loss", y, y_pos)?;
    same_shape(tape, "triplet_loss", y, y_neg)?;
    matrix_rows(tape, "triplet_loss", y)?;
    let h = hinge(tape, y, y_pos, y_neg, epsilon)?;
    tape.mean(h, None)
}

/// `(1/B) Σ_i ‖y_i − y⁺_i‖²`.
pub fn mse_abs_loss(tape: &mut Tape, y: Var, y_pos: Var) -> Result<Var> {
    same_shape(tape, "mse_abs_loss", y, y_pos)?;
    let b = matrix_rows(tape, "mse_abs_loss", y)?;
    let d = row_sq_dist(tape, y, y_pos)?;
    let s = tape.sum(d, None)?;
    Ok(tape.scale(s, 1.0 / b as f64))
}

/// `(1/B) Σ_i (1 − C_ii)² + β Σ_i Σ_{j≠i} C_ij²` with `C` the
/// column-normalized cross-correlation of `z` and `z⁺`. Zero-norm columns
/// give zero correlations.
pub fn barlow_twins_loss(tape: &mut Tape, z: Var, z_pos: Var, beta: f64) -> Result<Var> {
    same_shape(tape, "barlow_twins_loss", z, z_pos)?;
    let b = matrix_rows(tape, "barlow_twins_loss", z)?;
    if b < 2 {
        return Err(Error::Argument("Barlow Twins needs at least 2 rows".into()));
    }
    let d = tape.shape(z)[1];
    let zt = tape.transpose(z)?;
    let zn = tape.l2_normalize_rows(zt)?;
    let pt = tape.transpose(z_pos)?;
    let pn = tape.l2_normalize_rows(pt)?;
    let pn_t = tape.transpose(pn)?;
    let c = tape.matmul(zn, pn_t)?;

    let mut eye = Tensor::zeros(&[d, d]);
    let mut off = Tensor::full(&[d, d], 1.0);
    for i in 0..d {
        eye.row_mut(i)[i] = 1.0;
        off.row_mut(i)[i] = 0.0;
    }
    let eye = tape.constant(eye);
    let off = tape.constant(off);

    let diag_only = tape.mul(c, eye)?;
    let diag = tape.sum(diag_only, Some(1))?;
    let neg = tape.scale(diag, -1.0);
    let gap = tape.add_scalar(neg, 1.0);
    let gap_sq = tape.square(gap);
    let on = tape.sum(gap_sq, None)?;
    let on = tape.scale(on, 1.0 / b as f64);

    let c_sq = tape.square(c);
    let off_sq = tape.mul(c_sq, off)?;
    let off_sum = tape.sum(off_sq, None)?;
    let off_term = tape.scale(off_sum, beta);
    tape.add(on, off_term)
}

/// Reference estimator `(m−1)⁻² tr(U H S H)` over two scalar sample
/// sequences, with `H = I − (1/m) 11ᵀ`.
pub fn hsic_empirical(x: &[f64], y: &[f64], kernel: HsicKernel) -> Result<f64> {
    let m = x.len();
    if m != y.len() {
        return Err(Error::dim("hsic_empirical", &[m], &[y.len()]));
    }
    if m < 2 {
        return Err(Error::Argument(format!(
            "HSIC needs at least 2 samples, got {m}"
        )));
    }
    let norm = ((m - 1) * (m - 1)) as f64;
    match kernel {
        HsicKernel::Linear => {
            let mx = x.iter().sum::<f64>() / m as f64;
            let my = y.iter().sum::<f64>() / m as f64;
            let cross: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            Ok(cross * cross / norm)
        }
        HsicKernel::Rbf => {
            let u = rbf_gram(x);
            let s = rbf_gram(y);
            Ok(trace_centered(&u, &s, m) / norm)
        }
    }
}

fn median_heuristic(sq_dists: impl Iterator<Item = f64>) -> f64 {
    let mut d: Vec<f64> = sq_dists.filter(|v| *v > 0.0).collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

fn rbf_gram(x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let sigma2 = median_heuristic(
        (0..m)
            .flat_map(|a| (a + 1..m).map(move |b| (a, b)))
            .map(|(a, b)| (x[a] - x[b]).powi(2)),
    );
    let mut g = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            g[a * m + b] = (-(x[a] - x[b]).powi(2) / (2.0 * sigma2)).exp();
        }
    }
    g
}

/// `tr(U H S H)` for symmetric `m × m` Gram matrices.
fn trace_centered(u: &[f64], s: &[f64], m: usize) -> f64 {
    let mf = m as f64;
    let us: f64 = u.iter().zip(s).map(|(a, b)| a * b).sum();
    let row = |g: &[f64], a: usize| g[a * m..(a + 1) * m].iter().sum::<f64>();
    let rows: f64 = (0..m).map(|a| row(u, a) * row(s, a)).sum();
    let su: f64 = u.iter().sum();
    let ss: f64 = s.iter().sum();
    us - 2.0 / mf * rows + su * ss / (mf * mf)
}

/// Row-wise `tr(U H S H)` for Gram matrices flattened into rows of a
/// `[R × m²]` matrix. Returns `[R]`.
fn trace_centered_rows(tape: &mut Tape, u: Var, s: Var, m: usize) -> Result<Var> {
    let r = tape.shape(u)[0];
    let mf = m as f64;
    let us = tape.mul(u, s)?;
    let us = tape.sum(us, Some(1))?;

    let u_rows = tape.reshape(u, &[r * m, m])?;
    let u_rows = tape.sum(u_rows, Some(1))?;
    let s_rows = tape.reshape(s, &[r * m, m])?;
    let s_rows = tape.sum(s_rows, Some(1))?;
    let rows = tape.mul(u_rows, s_rows)?;
    let rows = tape.reshape(rows, &[r, m])?;
    let rows = tape.sum(rows, Some(1))?;
    let rows = tape.scale(rows, -2.0 / mf);

    let su = tape.sum(u, Some(1))?;
    let ss = tape.sum(s, Some(1))?;
    let tot = tape.mul(su, ss)?;
    let tot = tape.scale(tot, 1.0 / (mf * mf));

    let partial = tape.add(us, rows)?;
    tape.add(partial, tot)
}

/// Pairwise squared differences of the scalar samples in every row of
/// `x: [R × m]`, flattened to `[R × m²]`.
fn row_pairwise_sq(tape: &mut Tape, x: Var, m: usize) -> Result<Var> {
    let left: Vec<usize> = (0..m * m).map(|k| k / m).collect();
    let right: Vec<usize> = (0..m * m).map(|k| k % m).collect();
    let a = tape.gather_cols(x, &left)?;
    let b = tape.gather_cols(x, &right)?;
    let d = tape.sub(a, b)?;
    Ok(tape.square(d))
}

/// `exp(−D / 2σ²)` with a single detached median-heuristic `σ²` for all of
/// `sq: [R × m²]`.
fn rbf_from_sq(tape: &mut Tape, sq: Var, m: usize) -> Var {
    let v = tape.value(sq);
    let sigma2 = median_heuristic((0..v.rows()).flat_map(|r| {
        let row = v.row(r);
        (0..m).flat_map(move |a| (a + 1..m).map(move |b| row[a * m + b]))
    }));
    let scaled = tape.scale(sq, -1.0 / (2.0 * sigma2));
    tape.exp(scaled)
}

fn centering(m: usize) -> Tensor {
    let mut h = Tensor::full(&[m, m], -1.0 / m as f64);
    for i in 0..m {
        h.row_mut(i)[i] += 1.0;
    }
    h
}

/// Per-row HSIC between the coordinates of two `[B × m]` blocks, `[B]`.
pub fn hsic_rows(tape: &mut Tape, x: Var, y: Var, kernel: HsicKernel) -> Result<Var> {
    same_shape(tape, "hsic_rows", x, y)?;
    let m = tape.shape(x)[1];
    if m < 2 {
        return Err(Error::Config(format!(
            "HSIC needs at least 2 samples per factor, got {m}"
        )));
    }
    let norm = 1.0 / ((m - 1) * (m - 1)) as f64;
    let trace = match kernel {
        HsicKernel::Linear => {
            let h = tape.constant(centering(m));
            let xc = tape.matmul(x, h)?;
            let yc = tape.matmul(y, h)?;
            let prod = tape.mul(xc, yc)?;
            let cross = tape.sum(prod, Some(1))?;
            tape.square(cross)
        }
        HsicKernel::Rbf => {
            let dx = row_pairwise_sq(tape, x, m)?;
            let u = rbf_from_sq(tape, dx, m);
            let dy = row_pairwise_sq(tape, y, m)?;
            let s = rbf_from_sq(tape, dy, m);
            trace_centered_rows(tape, u, s, m)?
        }
    };
    Ok(tape.scale(trace, norm))
}

/// HSIC between two `[B × d_c]` blocks with the `B` rows as samples.
pub fn hsic_batch(tape: &mut Tape, x: Var, y: Var, kernel: HsicKernel) -> Result<Var> {
    same_shape(tape, "hsic_batch", x, y)?;
    let b = tape.shape(x)[0];
    if b < 2 {
        return Err(Error::Config(format!(
            "batch HSIC needs at least 2 graphs, got {b}"
        )));
    }
    let norm = 1.0 / ((b - 1) * (b - 1)) as f64;
    let trace = match kernel {
        HsicKernel::Linear => {
            // tr(XXᵀ H YYᵀ H) = ‖(HX)ᵀ(HY)‖²_F
            let h = tape.constant(centering(b));
            let xc = tape.matmul(h, x)?;
            let yc = tape.matmul(h, y)?;
            let xct = tape.transpose(xc)?;
            let cross = tape.matmul(xct, yc)?;
            let sq = tape.square(cross);
            tape.sum(sq, None)?
        }
        HsicKernel::Rbf => {
            let gram = |tape: &mut Tape, v: Var| -> Result<Var> {
                let left: Vec<usize> = (0..b * b).map(|k| k / b).collect();
                let right: Vec<usize> = (0..b * b).map(|k| k % b).collect();
                let a = tape.gather_rows(v, &left)?;
                let c = tape.gather_rows(v, &right)?;
                let d = tape.sub(a, c)?;
                let sq = tape.square(d);
                let dist = tape.sum(sq, Some(1))?;
                let dist = tape.reshape(dist, &[1, b * b])?;
                Ok(rbf_from_sq(tape, dist, b))
            };
            let u = gram(tape, x)?;
            let s = gram(tape, y)?;
            let t = trace_centered_rows(tape, u, s, b)?;
            tape.sum(t, None)?
        }
    };
    Ok(tape.scale(trace, norm))
}

/// Sum over ordered factor pairs `j ≠ k` of HSIC between blocks, for the
/// positive and the negative factors. With per-graph samples the sum is
/// averaged over the batch.
pub fn factor_independence_loss(
    tape: &mut Tape,
    factors_pos: &[Var],
    factors_neg: &[Var],
    kernel: HsicKernel,
    samples: HsicSamples,
) -> Result<Var> {
    if factors_pos.len() != factors_neg.len() || factors_pos.is_empty() {
        return Err(Error::dim(
            "factor_independence_loss",
            &[factors_pos.len()],
            &[factors_neg.len()],
        ));
    }
    let b = matrix_rows(tape, "factor_independence_loss", factors_pos[0])?;
    let n = factors_pos.len();
    let mut terms = Vec::new();
    for factors in [factors_pos, factors_neg] {
        for j in 0..n {
            for k in j + 1..n {
                let t = match samples {
                    HsicSamples::Coords => {
                        let per_row = hsic_rows(tape, factors[j], factors[k], kernel)?;
                        tape.sum(per_row, None)?
                    }
                    HsicSamples::Batch => hsic_batch(tape, factors[j], factors[k], kernel)?,
                };
                terms.push(t);
            }
        }
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut total = first;
    for &t in rest {
        total = tape.add(total, t)?;
    }
    // HSIC is symmetric, so each unordered pair stands for two ordered ones
    let scale = match samples {
        HsicSamples::Coords => 2.0 / b as f64,
        HsicSamples::Batch => 2.0,
    };
    Ok(tape.scale(total, scale))
}

/// `w_im = (1 − softmax_m(e_i·))/(n − 1)` with
/// `e_im = q_i · (q⁺_im − q⁻_im)`. Returns `[B × n]`.
pub fn masked_weights(
    tape: &mut Tape,
    q: Var,
    q_pos: &[Var],
    q_neg: &[Var],
    detach: bool,
) -> Result<Var> {
    let n = q_pos.len();
    if n != q_neg.len() {
        return Err(Error::dim("masked_weights", &[n], &[q_neg.len()]));
    }
    if n < 2 {
        return Err(Error::Config(format!(
            "masked weights need at least 2 factors, got {n}"
        )));
    }
    let b = matrix_rows(tape, "masked_weights", q)?;
    let mut scores = Vec::with_capacity(n);
    for m in 0..n {
        same_shape(tape, "masked_weights", q, q_pos[m])?;
        same_shape(tape, "masked_weights", q, q_neg[m])?;
        let diff = tape.sub(q_pos[m], q_neg[m])?;
        let prod = tape.mul(q, diff)?;
        let e = tape.sum(prod, Some(1))?;
        scores.push(tape.reshape(e, &[b, 1])?);
    }
    let mut e = tape.concat(&scores, 1)?;
    if detach {
        e = tape.detach(e);
    }
    let s = tape.softmax(e, 1)?;
    let neg = tape.scale(s, -1.0);
    let comp = tape.add_scalar(neg, 1.0);
    Ok(tape.scale(comp, 1.0 / (n - 1) as f64))
}

/// `(1/B) Σ_i Σ_m w_im · max(‖q_i − q⁺_im‖² − ‖q_i − q⁻_im‖² + ε, 0)`.
pub fn masked_triplet_loss(
    tape: &mut Tape,
    q: Var,
    q_pos: &[Var],
    q_neg: &[Var],
    w: Var,
    epsilon: f64,
) -> Result<Var> {
    let n = q_pos.len();
    let b = matrix_rows(tape, "masked_triplet_loss", q)?;
    if q_neg.len() != n || tape.shape(w) != [b, n] {
        return Err(Error::dim("masked_triplet_loss", &[b, n], tape.shape(w)));
    }
    let mut hinges = Vec::with_capacity(n);
    for m in 0..n {
        same_shape(tape, "masked_triplet_loss", q, q_pos[m])?;
        same_shape(tape, "masked_triplet_loss", q, q_neg[m])?;
        let h = hinge(tape, q, q_pos[m], q_neg[m], epsilon)?;
        hinges.push(tape.reshape(h, &[b, 1])?);
    }
    let h = tape.concat(&hinges, 1)?;
    let weighted = tape.mul(h, w)?;
    let s = tape.sum(weighted, None)?;
    Ok(tape.scale(s, 1.0 / b as f64))
}

/// The individual terms as tape variables. `l_ma` and `w` are `None` when a
/// single factor makes the masked weights undefined and `λ1 = 0`.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_se: Var,
    pub l_fa: Var,
    pub l_ma: Option<Var>,
    pub l_ab: Var,
    pub total: Var,
    /// Masked-factor weights `[B × n]`.
    pub w: Option<Var>,
}

/// Builds every term and the weighted total. Terms whose weight is zero are
/// still evaluated for reporting but left out of the differentiated total.
pub fn total_loss(
    tape: &mut Tape,
    emb: &TripletEmbeddings,
    num_factors: usize,
    weights: &LossWeights,
) -> Result<(LossVars, LossReport)> {
    objective(tape, emb, num_factors, weights, None)
}

/// [`total_loss`] with the masked-factor weights fixed to `w` instead of
/// computed from the embeddings.
pub fn total_loss_with_weights(
    tape: &mut Tape,
    emb: &TripletEmbeddings,
    num_factors: usize,
    weights: &LossWeights,
    w: &Tensor,
) -> Result<(LossVars, LossReport)> {
    objective(tape, emb, num_factors, weights, Some(w))
}

fn objective(
    tape: &mut Tape,
    emb: &TripletEmbeddings,
    num_factors: usize,
    weights: &LossWeights,
    fixed_w: Option<&Tensor>,
) -> Result<(LossVars, LossReport)> {
    weights.validate()?;
    let l_se = triplet_loss(tape, emb.y, emb.y_pos, emb.y_neg, weights.epsilon)?;

    let fp = factorize(tape, emb.y_pos, num_factors)?;
    let fn_ = factorize(tape, emb.y_neg, num_factors)?;
    let l_fa =
        factor_independence_loss(tape, &fp, &fn_, weights.hsic_kernel, weights.hsic_samples)?;

    let (l_ma, w) = if num_factors >= 2 {
        let w = match fixed_w {
            Some(t) => tape.constant(t.clone()),
            None => masked_weights(tape, emb.q, &emb.q_pos, &emb.q_neg, weights.detach_weights)?,
        };
        let l = masked_triplet_loss(tape, emb.q, &emb.q_pos, &emb.q_neg, w, weights.epsilon)?;
        (Some(l), Some(w))
    } else if weights.lambda1 > 0.0 {
        return Err(Error::Config(
            "the masked self-contrast term needs at least 2 factors".into(),
        ));
    } else {
        (None, None)
    };

    let l_ab = match weights.regularizer {
        AbsRegularizer::BarlowTwins => {
            let (Some(z), Some(z_pos)) = (emb.z, emb.z_pos) else {
                return Err(Error::Argument(
                    "Barlow Twins needs g3 outputs; compute embeddings with the absolute head"
                        .into(),
                ));
            };
            barlow_twins_loss(tape, z, z_pos, weights.beta)?
        }
        AbsRegularizer::Mse => mse_abs_loss(tape, emb.y, emb.y_pos)?,
    };

    let mut total = l_se;
    for (lambda, term) in [
        (weights.lambda1, l_ma),
        (weights.lambda2, Some(l_fa)),
        (weights.lambda3, Some(l_ab)),
    ] {
        if let (true, Some(term)) = (lambda != 0.0, term) {
            let scaled = tape.scale(term, lambda);
            total = tape.add(total, scaled)?;
        }
    }

    let value = |tape: &Tape, v: Var| tape.value(v).item();
    let report = LossReport {
        l_se: value(tape, l_se)?,
        l_fa: value(tape, l_fa)?,
        l_ma: l_ma.map(|v| value(tape, v)).transpose()?.unwrap_or(0.0),
        l_ab: value(tape, l_ab)?,
        total: value(tape, total)?,
    };
    Ok((
        LossVars {
            l_se,
            l_fa,
            l_ma,
            l_ab,
            total,
            w,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(data: &[&[f64]]) -> Tensor {
        Tensor::from_rows(data).unwrap()
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn triplet_examples() {
        let mut t = Tape::new();
        let y = t.constant(rows(&[&[0.0, 0.0]]));
        let p = t.constant(rows(&[&[0.3, 0.0]]));
        let n = t.constant(rows(&[&[0.5, 0.0]]));
        let l = triplet_loss(&mut t, y, p, n, 0.2).unwrap();
        assert!((scalar(&t, l) - 0.04).abs() < 1e-12);

        let far = t.constant(rows(&[&[1.0, 0.0]]));
        let l = triplet_loss(&mut t, y, y, far, 0.2).unwrap();
        assert_eq!(scalar(&t, l), 0.0);

        let l = triplet_loss(&mut t, y, p, p, 0.2).unwrap();
        assert_eq!(scalar(&t, l), 0.2);
    }

    #[test]
    fn triplet_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            triplet_loss(&mut t, a, a, b, 0.2),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mse_examples() {
        let mut t = Tape::new();
        let y = t.constant(rows(&[&[1.0, 0.0]]));
        let z = t.constant(rows(&[&[0.0, 0.0]]));
        let l = mse_abs_loss(&mut t, y, z).unwrap();
        assert_eq!(scalar(&t, l), 1.0);
        let l = mse_abs_loss(&mut t, y, y).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let a = t.constant(rows(&[&[0.5, 0.0], &[0.0, 0.0]]));
        let b = t.constant(rows(&[&[0.0, 0.0], &[0.75f64.sqrt(), 0.0]]));
        let l = mse_abs_loss(&mut t, a, b).unwrap();
        assert!((scalar(&t, l) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hsic_examples() {
        assert_eq!(
            hsic_empirical(&[2.0; 5], &[1.0, 4.0, 2.0, 0.0, 3.0], HsicKernel::Linear).unwrap(),
            0.0
        );
        let v = hsic_empirical(&[1.0, -1.0], &[1.0, -1.0], HsicKernel::Linear).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        assert!(hsic_empirical(&[1.0], &[1.0], HsicKernel::Linear).is_err());
        assert!(hsic_empirical(&[1.0, 2.0], &[1.0], HsicKernel::Linear).is_err());
    }

    #[test]
    fn hsic_rbf_constant_is_zero() {
        let v =
            hsic_empirical(&[3.0; 6], &[0.1, 0.5, 0.2, 0.9, 0.3, 0.7], HsicKernel::Rbf).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn tape_hsic_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kernel in [HsicKernel::Linear, HsicKernel::Rbf] {
            let x = random(&[3, 6], &mut rng);
            let y = random(&[3, 6], &mut rng);
            let mut t = Tape::new();
            let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
            let h = hsic_rows(&mut t, xv, yv, kernel).unwrap();
            for r in 0..3 {
                let want = match kernel {
                    HsicKernel::Linear => hsic_empirical(x.row(r), y.row(r), kernel).unwrap(),
                    // the tape shares σ² across rows, so rebuild it here
                    HsicKernel::Rbf => continue,
                };
                assert!((t.value(h).data()[r] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_trace_path_matches_linear_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = 5;
        let x = random(&[2, m], &mut rng);
        let y = random(&[2, m], &mut rng);
        let mut t = Tape::new();
        let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
        let gram = |t: &mut Tape, v: Var| {
            let left: Vec<usize> = (0..m * m).map(|k| k / m).collect();
            let right: Vec<usize> = (0..m * m).map(|k| k % m).collect();
            let a = t.gather_cols(v, &left).unwrap();
            let b = t.gather_cols(v, &right).unwrap();
            t.mul(a, b).unwrap()
        };
        let u = gram(&mut t, xv);
        let s = gram(&mut t, yv);
        let tr = trace_centered_rows(&mut t, u, s, m).unwrap();
        for r in 0..2 {
            let want = hsic_empirical(x.row(r), y.row(r), HsicKernel::Linear).unwrap()
                * ((m - 1) * (m - 1)) as f64;
            assert!((t.value(tr).data()[r] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_hsic_matches_explicit_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, dc) = (5, 3);
        let x = random(&[b, dc], &mut rng);
        let y = random(&[b, dc], &mut rng);
        let mut t = Tape::new();
        let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
        let got = hsic_batch(&mut t, xv, yv, HsicKernel::Linear).unwrap();
        let u = x.matmul(&x.transpose().unwrap()).unwrap();
        let s = y.matmul(&y.transpose().unwrap()).unwrap();
        let h = centering(b);
        let prod = u
            .matmul(&h)
            .unwrap()
            .matmul(&s)
            .unwrap()
            .matmul(&h)
            .unwrap();
        let trace: f64 = (0..b).map(|i| prod.get(i, i)).sum();
        let want = trace / ((b - 1) * (b - 1)) as f64;
        assert!((scalar(&t, got) - want).abs() < 1e-10);

        let rbf = hsic_batch(&mut t, xv, yv, HsicKernel::Rbf).unwrap();
        assert!(scalar(&t, rbf).is_finite());
        assert!(scalar(&t, rbf) >= -1e-12);
    }

    #[test]
    fn factor_independence_examples() {
        let mut t = Tape::new();
        let c = t.constant(rows(&[&[1.0, -1.0]]));
        let l = factor_independence_loss(
            &mut t,
            &[c, c],
            &[c, c],
            HsicKernel::Linear,
            HsicSamples::Coords,
        )
        .unwrap();
        assert!((scalar(&t, l) - 16.0).abs() < 1e-12);

        let l =
            factor_independence_loss(&mut t, &[c], &[c], HsicKernel::Linear, HsicSamples::Coords)
                .unwrap();
        assert_eq!(scalar(&t, l), 0.0);

        let k = t.constant(rows(&[&[0.3, 0.3, 0.3], &[-1.0, -1.0, -1.0]]));
        let r = t.constant(rows(&[&[0.1, 0.9, 0.4], &[0.5, -0.2, 0.3]]));
        let l = factor_independence_loss(
            &mut t,
            &[k, r, k],
            &[k, k, k],
            HsicKernel::Linear,
            HsicSamples::Coords,
        )
        .unwrap();
        assert!(scalar(&t, l).abs() < 1e-15);

        let narrow = t.constant(rows(&[&[1.0]]));
        assert!(matches!(
            factor_independence_loss(
                &mut t,
                &[narrow, narrow],
                &[narrow, narrow],
                HsicKernel::Linear,
                HsicSamples::Coords
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn masked_weight_examples() {
        let mut t = Tape::new();
        let q = t.constant(rows(&[&[1.0, 0.0]]));
        let a = t.constant(rows(&[&[0.5, 0.5]]));
        let b = t.constant(rows(&[&[0.0, 0.5]]));
        let w = masked_weights(&mut t, q, &[a, a], &[b, b], true).unwrap();
        assert_eq!(t.value(w).data(), &[0.5, 0.5]);

        let big = t.constant(rows(&[&[10.0, 0.0]]));
        let zero = t.constant(rows(&[&[0.0, 0.0]]));
        let w = masked_weights(&mut t, q, &[big, zero, zero], &[zero, zero, zero], true).unwrap();
        let wv = t.value(w).data().to_vec();
        assert!(wv[0] < wv[1] && wv[1] == wv[2]);

        assert!(matches!(
            masked_weights(&mut t, q, &[a], &[b], true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn masked_triplet_examples() {
        let mut t = Tape::new();
        let q = t.constant(rows(&[&[0.0, 0.0]]));
        // hinges 0.04 and 0.10
        let p1 = t.constant(rows(&[&[0.3, 0.0]]));
        let n1 = t.constant(rows(&[&[0.5, 0.0]]));
        let p2 = t.constant(rows(&[&[0.0, 0.1]]));
        let n2 = t.constant(rows(&[&[0.0, 0.11f64.sqrt()]]));
        let w = t.constant(rows(&[&[0.5, 0.5]]));
        let l = masked_triplet_loss(&mut t, q, &[p1, p2], &[n1, n2], w, 0.2).unwrap();
        assert!((scalar(&t, l) - 0.07).abs() < 1e-12);

        let l = masked_triplet_loss(&mut t, q, &[p1, p2], &[p1, p2], w, 0.2).unwrap();
        assert!((scalar(&t, l) - 0.2).abs() < 1e-15);

        let far = t.constant(rows(&[&[5.0, 0.0]]));
        let l = masked_triplet_loss(&mut t, q, &[q, q], &[far, far], w, 0.2).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
    }

    #[test]
    fn barlow_examples() {
        let mut t = Tape::new();
        let z = t.constant(rows(&[&[1.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]]));
        let l = barlow_twins_loss(&mut t, z, z, 0.013).unwrap();
        assert!(scalar(&t, l).abs() < 1e-15);

        let neg = t.scale(z, -1.0);
        let l = barlow_twins_loss(&mut t, z, neg, 0.013).unwrap();
        assert!((scalar(&t, l) - 4.0 * 2.0 / 3.0).abs() < 1e-12);

        let c = t.constant(rows(&[&[1.0, 0.0], &[-1.0, 0.0]]));
        let l = barlow_twins_loss(&mut t, c, c, 0.013).unwrap();
        // constant zero column: C_11 = 1, C_22 = 0
        assert!((scalar(&t, l) - 0.5).abs() < 1e-12);

        let one = t.constant(rows(&[&[1.0, 0.0]]));
        assert!(barlow_twins_loss(&mut t, one, one, 0.013).is_err());
    }

    #[test]
    fn weights_validation() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.epsilon = 0.0;
        assert!(w.validate().is_err());
        w = LossWeights {
            lambda2: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn names_round_trip() {
        for k in [HsicKernel::Linear, HsicKernel::Rbf] {
            assert_eq!(k.to_string().parse::<HsicKernel>().unwrap(), k);
        }
        assert_eq!("batch".parse::<HsicSamples>().unwrap(), HsicSamples::Batch);
        assert_eq!(
            "mse".parse::<AbsRegularizer>().unwrap(),
            AbsRegularizer::Mse
        );
        assert!("cosine".parse::<HsicKernel>().is_err());
    }

    #[test]
    fn report_mean() {
        let a = LossReport {
            l_se: 1.0,
            l_fa: 2.0,
            l_ma: 3.0,
            l_ab: 4.0,
            total: 5.0,
        };
        let b = LossReport {
            l_se: 3.0,
            l_fa: 0.0,
            l_ma: 1.0,
            l_ab: 0.0,
            total: 1.0,
        };
        let m = LossReport::mean(&[a, b]);
        assert_eq!(
            m,
            LossReport {
                l_se: 2.0,
                l_fa: 1.0,
                l_ma: 2.0,
                l_ab: 2.0,
                total: 3.0
            }
        );
    }
}
