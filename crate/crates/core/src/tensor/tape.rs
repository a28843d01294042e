use super::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Lower bound on the norm used by [`Tape::l2_normalize_rows`]; a row whose
/// norm falls below it is divided by this value instead, so zero rows stay zero.
pub const NORM_GUARD: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScalarMul(Var, Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    L2NormalizeRows(Var),
    Softmax(Var, usize),
    SegmentSum(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so a node's inputs always have
/// smaller indices and the reverse of insertion order is a valid topological
/// order for backpropagation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Registers a leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest `|x|` over the inputs of every relu that depends on a
    /// parameter.
    pub fn min_relu_margin(&self) -> Option<f64> {
        self.relu_inputs().map(f64::abs).reduce(f64::min)
    }

    /// Which parameter-dependent relu inputs are positive, in tape order.
    /// Two evaluations of one function lie on the same smooth piece when
    /// their patterns agree.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.relu_inputs().map(|x| x > 0.0).collect()
    }

    fn relu_inputs(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) if self.nodes[a.0].requires_grad => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().copied())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Records a copy of `v` that no gradient flows through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ----- ops -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Checks `b` is either the same shape as `a`, or a row vector (`[n]`
    /// or `[1, n]`) broadcast over the rows of matrix `a` (`[m, n]`).
    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        let row_vector = match sb {
            [n] => Some(*n),
            [1, n] => Some(*n),
            _ => None,
        };
        match (sa, row_vector) {
            ([_, n], Some(bn)) if *n == bn => Ok(true),
            _ => Err(Error::dim(op, sa, sb)),
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let broadcast = self.broadcast_kind(op_name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data: Vec<f64> = if broadcast {
            let n = bv.numel();
            av.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i % n]))
                .collect()
        } else {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Addition of a fixed constant to every element.
    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x + shift).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::dim("scalar_mul", sv.shape(), self.shape(a)));
        }
        let k = sv.data()[0];
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * k).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ScalarMul(s, a), &[s, a]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Sum over one axis of a rank ≤ 2 tensor, or over everything when
    /// `axis` is `None` (yielding a scalar).
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let value = reduce_sum(self.value(a), axis)?;
        Ok(self.push(value, Op::Sum(a, axis), &[a]))
    }

    /// Mean over `axis`, or over all elements. The full mean is a running
    /// mean, so a constant tensor averages to its value exactly.
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let av = self.value(a);
        let count = reduced_count(av, axis)?;
        let value = match axis {
            None => {
                let mut m = 0.0;
                for (k, x) in av.data().iter().enumerate() {
                    m += (x - m) / (k + 1) as f64;
                }
                Tensor::scalar(m)
            }
            Some(_) => {
                let mut value = reduce_sum(av, axis)?;
                let inv = 1.0 / count as f64;
                value.data_mut().iter_mut().for_each(|x| *x *= inv);
                value
            }
        };
        Ok(self.push(value, Op::Mean(a, axis), &[a]))
    }

    /// Concatenation of matrices along rows (`axis = 0`) or columns
    /// (`axis = 1`), or of vectors along `axis = 0`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let rank = self.value(*first).rank();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::Argument(format!(
                "concat along axis {axis} of rank-{rank} tensors"
            )));
        }
        let base = self.shape(*first).to_vec();
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
        }
        let value = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            let mut len = 0;
            for p in parts {
                let v = self.value(*p);
                data.extend_from_slice(v.data());
                len += v.shape()[0];
            }
            let mut shape = base.clone();
            shape[0] = len;
            Tensor::new(shape, data)?
        } else {
            let rows = base[0];
            let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[1]).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let rank = av.rank();
        if rank == 0 || rank > 2 || axis >= rank || start > end || end > av.shape()[axis] {
            return Err(Error::Argument(format!(
                "slice {start}..{end} along axis {axis} of shape {:?}",
                av.shape()
            )));
        }
        let value = if rank == 1 {
            Tensor::vector(av.data()[start..end].to_vec())
        } else if axis == 0 {
            let c = av.cols();
            Tensor::new(vec![end - start, c], av.data()[start * c..end * c].to_vec())?
        } else {
            let rows = av.rows();
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&av.row(r)[start..end]);
            }
            Tensor::new(vec![rows, end - start], data)?
        };
        Ok(self.push(value, Op::Slice(a, axis, start, end), &[a]))
    }

    /// Divides each row of a matrix by its Euclidean norm (at least
    /// [`NORM_GUARD`]).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Argument(format!(
                "l2_normalize_rows needs a matrix, got {:?}",
                av.shape()
            )));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = row
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(NORM_GUARD);
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(self.push(value, Op::L2NormalizeRows(a), &[a]))
    }

    /// Numerically stable softmax along `axis` of a matrix.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || axis > 1 {
            return Err(Error::Argument(format!(
                "softmax along axis {axis} of shape {:?}",
                av.shape()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = av.data().to_vec();
        let lanes: Vec<Vec<usize>> = if axis == 1 {
            (0..m)
                .map(|i| (0..n).map(|j| i * n + j).collect())
                .collect()
        } else {
            (0..n)
                .map(|j| (0..m).map(|i| i * n + j).collect())
                .collect()
        };
        for lane in lanes {
            let max = lane
                .iter()
                .map(|&k| out[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &k in &lane {
                out[k] = (out[k] - max).exp();
                total += out[k];
            }
            for &k in &lane {
                out[k] /= total;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Softmax(a, axis), &[a]))
    }

    /// Sums rows of `values` into `num_segments` output rows. `segment_ids`
    /// must be non-decreasing with one id per input row; segments with no
    /// rows come out as zeros.
    pub fn segment_sum(
        &mut self,
        values: Var,
        segment_ids: &[usize],
        num_segments: usize,
    ) -> Result<Var> {
        let vv = self.value(values);
        if vv.rank() == 0 || vv.rank() > 2 || vv.shape()[0] != segment_ids.len() {
            return Err(Error::dim("segment_sum", vv.shape(), &[segment_ids.len()]));
        }
        if segment_ids.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Argument("segment ids must be non-decreasing".into()));
        }
        if let Some(&last) = segment_ids.last() {
            if last >= num_segments {
                return Err(Error::Argument(format!(
                    "segment id {last} out of range for {num_segments} segments"
                )));
            }
        }
        let c = if vv.rank() == 2 { vv.cols() } else { 1 };
        let mut out = vec![0.0; num_segments * c];
        for (r, &s) in segment_ids.iter().enumerate() {
            let src = &vv.data()[r * c..(r + 1) * c];
            for (o, x) in out[s * c..(s + 1) * c].iter_mut().zip(src) {
                *o += x;
            }
        }
        let shape = if vv.rank() == 2 {
            vec![num_segments, c]
        } else {
            vec![num_segments]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::SegmentSum(values, segment_ids.to_vec()),
            &[values],
        ))
    }

    /// Selects rows of a matrix by index (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Argument(format!(
                "gather_rows needs a matrix, got {:?}",
                av.shape()
            )));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= av.rows() {
                return Err(Error::Argument(format!(
                    "row index {i} out of range for {:?}",
                    av.shape()
                )));
            }
            data.extend_from_slice(av.row(i));
        }
        let value = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(value, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    /// Selects columns of a matrix by index (repetition allowed).
    pub fn gather_cols(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Argument(format!(
                "gather_cols needs a matrix, got {:?}",
                av.shape()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= av.cols()) {
            return Err(Error::Argument(format!(
                "column index {bad} out of range for {:?}",
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(av.rows() * index.len());
        for r in 0..av.rows() {
            let row = av.row(r);
            data.extend(index.iter().map(|&j| row[j]));
        }
        let value = Tensor::new(vec![av.rows(), index.len()], data)?;
        Ok(self.push(value, Op::GatherCols(a, index.to_vec()), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    // ----- backward ------------------------------------------------------

    /// Backpropagates from a one-element `loss`, adding ∂loss/∂leaf into the
    /// gradient accumulator of every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                continue;
            }
            for (input, contribution) in self.local_backward(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_backward(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        let result = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut res = Vec::new();
                if needs(*a) {
                    // dA = G · Bᵀ
                    let bt = bv.transpose()?;
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, bt.data(), &mut da, m, n, k);
                    res.push((*a, da));
                }
                if needs(*b) {
                    // dB = Aᵀ · G
                    let at = av.transpose()?;
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g, &mut db, k, m, n);
                    res.push((*b, db));
                }
                res
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bn = bv.numel();
                let broadcast = av.shape() != bv.shape();
                let mut ga = g.to_vec();
                let mut gb = vec![0.0; bn];
                match &node.op {
                    Op::Add(..) => {
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % bn] += gi;
                        }
                    }
                    Op::Sub(..) => {
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % bn] -= gi;
                        }
                    }
                    _ => {
                        for (i, gi) in g.iter().enumerate() {
                            let bvi = bv.data()[i % bn];
                            ga[i] = gi * bvi;
                            gb[i % bn] += gi * av.data()[i];
                        }
                    }
                }
                debug_assert!(broadcast || bn == g.len());
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, k) => vec![(*a, g.iter().map(|x| x * k).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::ScalarMul(s, a) => {
                let k = val(*s).data()[0];
                let ds: f64 = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                vec![(*s, vec![ds]), (*a, g.iter().map(|x| x * k).collect())]
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::Square(a) => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gi, x)| 2.0 * x * gi)
                    .collect();
                vec![(*a, d)]
            }
            Op::Sqrt(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(gi, y)| gi / (2.0 * y))
                    .collect();
                vec![(*a, d)]
            }
            Op::Exp(a) => {
                let d = g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect();
                vec![(*a, d)]
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let av = val(*a);
                let scale = match &node.op {
                    Op::Mean(..) => 1.0 / reduced_count(av, *axis)? as f64,
                    _ => 1.0,
                };
                let mut d = vec![0.0; av.numel()];
                match (axis, av.rank()) {
                    (None, _) | (Some(_), 1) => d.iter_mut().for_each(|x| *x = g[0] * scale),
                    (Some(0), _) => {
                        let c = av.cols();
                        for (i, x) in d.iter_mut().enumerate() {
                            *x = g[i % c] * scale;
                        }
                    }
                    (Some(_), _) => {
                        let c = av.cols();
                        for (i, x) in d.iter_mut().enumerate() {
                            *x = g[i / c] * scale;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Concat(parts, axis) => {
                let mut res = Vec::with_capacity(parts.len());
                if out.rank() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let n = val(*p).numel();
                        res.push((*p, g[offset..offset + n].to_vec()));
                        offset += n;
                    }
                } else {
                    let total = out.cols();
                    let mut col = 0;
                    for p in parts {
                        let pv = val(*p);
                        let w = pv.cols();
                        let mut d = Vec::with_capacity(pv.numel());
                        for r in 0..pv.rows() {
                            d.extend_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        res.push((*p, d));
                        col += w;
                    }
                }
                res
            }
            Op::Slice(a, axis, start, end) => {
                let av = val(*a);
                let mut d = vec![0.0; av.numel()];
                if av.rank() == 1 {
                    d[*start..*end].copy_from_slice(g);
                } else if *axis == 0 {
                    let c = av.cols();
                    d[start * c..end * c].copy_from_slice(g);
                } else {
                    let c = av.cols();
                    let w = end - start;
                    for r in 0..av.rows() {
                        d[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                }
                vec![(*a, d)]
            }
            Op::L2NormalizeRows(a) => {
                let av = val(*a);
                let c = av.cols();
                let mut d = vec![0.0; av.numel()];
                for r in 0..av.rows() {
                    let x = av.row(r);
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dr = &mut d[r * c..(r + 1) * c];
                    if norm > NORM_GUARD {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = (gr[j] - y[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..c {
                            dr[j] = gr[j] / NORM_GUARD;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Softmax(a, axis) => {
                let (m, n) = (out.rows(), out.cols());
                let s = out.data();
                let mut d = vec![0.0; m * n];
                let lanes: Vec<Vec<usize>> = if *axis == 1 {
                    (0..m)
                        .map(|i| (0..n).map(|j| i * n + j).collect())
                        .collect()
                } else {
                    (0..n)
                        .map(|j| (0..m).map(|i| i * n + j).collect())
                        .collect()
                };
                for lane in lanes {
                    let dot: f64 = lane.iter().map(|&k| g[k] * s[k]).sum();
                    for &k in &lane {
                        d[k] = s[k] * (g[k] - dot);
                    }
                }
                vec![(*a, d)]
            }
            Op::SegmentSum(a, ids) => {
                let av = val(*a);
                let c = if av.rank() == 2 { av.cols() } else { 1 };
                let mut d = Vec::with_capacity(av.numel());
                for &s in ids {
                    d.extend_from_slice(&g[s * c..(s + 1) * c]);
                }
                vec![(*a, d)]
            }
            Op::GatherRows(a, index) => {
                let av = val(*a);
                let c = av.cols();
                let mut d = vec![0.0; av.numel()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[k * c + j];
                    }
                }
                vec![(*a, d)]
            }
            Op::GatherCols(a, index) => {
                let av = val(*a);
                let (c, w) = (av.cols(), index.len());
                let mut d = vec![0.0; av.numel()];
                for r in 0..av.rows() {
                    for (k, &j) in index.iter().enumerate() {
                        d[r * c + j] += g[r * w + k];
                    }
                }
                vec![(*a, d)]
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec())?.transpose()?;
                vec![(*a, gt.into_data())]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
        };
        Ok(result)
    }
}

fn reduced_count(t: &Tensor, axis: Option<usize>) -> Result<usize> {
    match (axis, t.rank()) {
        (None, _) => Ok(t.numel()),
        (Some(0), 1) => Ok(t.numel()),
        (Some(ax), 2) if ax < 2 => Ok(t.shape()[ax]),
        _ => Err(Error::Argument(format!(
            "cannot reduce axis {axis:?} of shape {:?}",
            t.shape()
        ))),
    }
}

fn reduce_sum(t: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    reduced_count(t, axis)?;
    Ok(match (axis, t.rank()) {
        (None, _) | (Some(_), 1) => Tensor::scalar(t.data().iter().sum()),
        (Some(0), _) => {
            let c = t.cols();
            let mut out = vec![0.0; c];
            for r in 0..t.rows() {
                out.iter_mut().zip(t.row(r)).for_each(|(o, x)| *o += x);
            }
            Tensor::vector(out)
        }
        (Some(_), _) => Tensor::vector((0..t.rows()).map(|r| t.row(r).iter().sum()).collect()),
    })
}
