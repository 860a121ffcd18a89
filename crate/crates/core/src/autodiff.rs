//! Reverse-mode differentiation over a recorded tape.
//!
//! Only the operations the attention stack uses are supported. Nodes are
//! appended in evaluation order, so walking reachable node ids from the root
//! downward is a reverse topological order and visits each node once.

use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{self, AxisPlan, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f32),
    AddColBias(Var, Var),
    AddRowBias(Var, Var),
    SoftmaxRows(Var),
    Sigmoid(Var),
    Reshape(Var),
    Resize(Var, Box<(AxisPlan, AxisPlan)>),
    ConcatCols(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        labels: Arc<[u16]>,
        ignore: u16,
        count: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Mul(a, b) | AddColBias(a, b) | AddRowBias(a, b) => {
                vec![*a, *b]
            }
            Transpose(a)
            | Affine(a, _)
            | SoftmaxRows(a)
            | Sigmoid(a)
            | Reshape(a)
            | Resize(a, _)
            | GatherCols(a, _)
            | Sum(a) => vec![*a],
            CrossEntropy { logits, .. } => vec![*logits],
            ConcatCols(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Full-precision value of scalar reductions.
    wide: Option<f64>,
}

/// A recorded forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape if `v` did not influence
    /// the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()).expect("shape already valid"))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, wide: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f32, shift: f32) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f32) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// Adds `bias[r]` to every entry of row `r` of the 2-D `x`.
    pub fn add_col_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).len() != m {
            return shape_err(format!(
                "row bias {:?} for matrix {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v += b[r]);
        }
        Ok(self.push(out, Op::AddColBias(x, bias)))
    }

    /// Adds `bias[c]` to every entry of column `c` of the 2-D `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return shape_err(format!(
                "column bias {:?} for matrix {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        if let Some(v) = self.value(bias).data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite bias entry {v}")));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, e)| *v += e);
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        let out = tensor::bilinear_resize(self.value(x), out_h, out_w)?;
        let plans = Box::new((AxisPlan::new(h, out_h), AxisPlan::new(w, out_w)));
        Ok(self.push(out, Op::Resize(x, plans)))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat of zero tensors");
        };
        let rows = self.value(first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, n) = self.value(p).dims2()?;
            if r != rows {
                return shape_err(format!("concat of {:?} with {:?}", self.shape(first), self.shape(p)));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &n) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * n..(r + 1) * n]);
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Selects (possibly repeated) columns of a 2-D tensor.
    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (rows, n) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err(format!("column {bad} out of range for {:?}", self.shape(x)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            out.extend(idx.iter().map(|&i| src[r * n + i]));
        }
        let out = Tensor::new(&[rows, idx.len()], out)?;
        Ok(self.push(out, Op::GatherCols(x, idx)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let v = self.push(Tensor::scalar(s as f32), Op::Sum(x));
        self.nodes[v.0].wide = Some(s);
        v
    }

    /// First element of `v`, at full precision when `v` is a reduction.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.wide.unwrap_or(n.value.data()[0] as f64)
    }

    /// Mean pixelwise cross-entropy of `K×…` logits (softmax over the first
    /// axis) against integer labels; pixels labelled `ignore` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[u16]>, ignore: u16) -> Result<Var> {
        let lt = self.value(logits);
        let k = lt.shape()[0];
        let n = lt.len() / k;
        if labels.len() != n || lt.rank() < 2 {
            return shape_err(format!("{} labels for logits {:?}", labels.len(), lt.shape()));
        }
        let src = lt.data();
        let mut probs = vec![0.0f32; k * n];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for p in 0..n {
            let max = (0..k).map(|c| src[c * n + p]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = (0..k).map(|c| (src[c * n + p] as f64 - max).exp()).sum();
            for c in 0..k {
                probs[c * n + p] = ((src[c * n + p] as f64 - max).exp() / z) as f32;
            }
            let y = labels[p];
            if y == ignore {
                continue;
            }
            if y as usize >= k {
                return invalid(format!("label {y} out of range for {k} classes"));
            }
            total += max + z.ln() - src[y as usize * n + p] as f64;
            count += 1;
        }
        if !total.is_finite() {
            return Err(Error::Numeric("cross-entropy overflowed".into()));
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let out = self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                ignore,
                count,
            },
        );
        self.nodes[out.0].wide = Some(loss);
        Ok(out)
    }

    /// `W·x + b` with `W: out×in`, `b: [out]`, `x: in×N`.
    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let y = self.matmul(w, x)?;
        self.add_col_bias(y, b)
    }

    /// Tape counterpart of [`tensor::cross_attention`], composed from
    /// differentiable primitives.
    pub fn cross_attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, residual: bool) -> Result<Var> {
        let (c, _) = self.value(q).dims2()?;
        if self.value(k).dims2()?.0 != c || self.shape(k) != self.shape(v) {
            return shape_err(format!(
                "attention over q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        let qt = self.transpose(q)?;
        let scores = self.matmul(qt, k)?;
        let mut scores = self.scale(scores, (1.0 / (c as f64).sqrt()) as f32);
        if let Some(b) = bias {
            scores = self.add_row_bias(scores, b)?;
        }
        let weights = self.softmax_rows(scores)?;
        let wt = self.transpose(weights)?;
        let out = self.matmul(v, wt)?;
        if residual {
            self.add(out, q)
        } else {
            Ok(out)
        }
    }

    /// Ids reachable from `root`, in the order backward visits them.
    pub fn visit_order(&self, root: Var) -> Vec<Var> {
        let mut reach = vec![false; root.0 + 1];
        reach[root.0] = true;
        let mut order = Vec::new();
        for id in (0..=root.0).rev() {
            if !reach[id] {
                continue;
            }
            order.push(Var(id));
            for p in self.nodes[id].op.parents() {
                reach[p.0] = true;
            }
        }
        order
    }

    /// Backpropagates from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for v in self.visit_order(root) {
            let Some(g) = grads[v.0].take() else { continue };
            self.propagate(v, &g, &mut grads)?;
            if let Some(bad) = g.data().iter().find(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient {bad}")));
            }
            grads[v.0] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, v: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul(&self.value(*b).transpose()?)?;
                let gb = self.value(*a).transpose()?.matmul(g)?;
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()?),
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Affine(a, s) => accumulate(&mut grads[a.0], g.map(|x| x * s)),
            Op::AddColBias(x, b) => {
                let (m, n) = g.dims2()?;
                let gb: Vec<f32> = (0..m)
                    .map(|r| g.data()[r * n..(r + 1) * n].iter().map(|&x| x as f64).sum::<f64>() as f32)
                    .collect();
                accumulate(&mut grads[x.0], g.clone());
                let shape = self.shape(*b).to_vec();
                accumulate(&mut grads[b.0], Tensor::new(&shape, gb)?);
            }
            Op::AddRowBias(x, b) => {
                let (m, n) = g.dims2()?;
                let gb: Vec<f32> = (0..n)
                    .map(|c| (0..m).map(|r| g.data()[r * n + c] as f64).sum::<f64>() as f32)
                    .collect();
                accumulate(&mut grads[x.0], g.clone());
                let shape = self.shape(*b).to_vec();
                accumulate(&mut grads[b.0], Tensor::new(&shape, gb)?);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, n) = y.dims2()?;
                let mut out = vec![0.0f32; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for c in 0..n {
                        out[r * n + c] = (yr[c] as f64 * (gr[c] as f64 - dot)) as f32;
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(&[m, n], out)?);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |d, y| d * y * (1.0 - y))?;
                accumulate(&mut grads[x.0], gx);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                accumulate(&mut grads[x.0], g.clone().reshape(&shape)?);
            }
            Op::Resize(x, plans) => {
                let (py, px) = plans.as_ref();
                let (c, h, w) = self.value(*x).dims3()?;
                let (_, oh, ow) = g.dims3()?;
                let mut acc = vec![0.0f64; c * h * w];
                for ch in 0..c {
                    let dst = &mut acc[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1, fy) = (py.lo[oy], py.hi[oy], py.frac[oy]);
                        for ox in 0..ow {
                            let (x0, x1, fx) = (px.lo[ox], px.hi[ox], px.frac[ox]);
                            let d = g.data()[(ch * oh + oy) * ow + ox] as f64;
                            dst[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += d * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += d * fy * (1.0 - fx);
                            dst[y1 * w + x1] += d * fy * fx;
                        }
                    }
                }
                let gx = Tensor::new(&[c, h, w], acc.into_iter().map(|v| v as f32).collect())?;
                accumulate(&mut grads[x.0], gx);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[1];
                    let mut part = Vec::with_capacity(rows * n);
                    for r in 0..rows {
                        part.extend_from_slice(&g.data()[r * total + offset..r * total + offset + n]);
                    }
                    accumulate(&mut grads[p.0], Tensor::new(&[rows, n], part)?);
                    offset += n;
                }
            }
            Op::GatherCols(x, idx) => {
                let (rows, n) = self.value(*x).dims2()?;
                let m = idx.len();
                let mut acc = vec![0.0f64; rows * n];
                for r in 0..rows {
                    for (j, &i) in idx.iter().enumerate() {
                        acc[r * n + i] += g.data()[r * m + j] as f64;
                    }
                }
                let gx = Tensor::new(&[rows, n], acc.into_iter().map(|v| v as f32).collect())?;
                accumulate(&mut grads[x.0], gx);
            }
            Op::Sum(x) => {
                let d = g.data()[0];
                let shape = self.shape(*x).to_vec();
                accumulate(&mut grads[x.0], Tensor::full(&shape, d)?);
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                ignore,
                count,
            } => {
                let shape = self.shape(*logits).to_vec();
                let k = shape[0];
                let n = labels.len();
                let mut out = vec![0.0f32; k * n];
                if *count > 0 {
                    let d = g.data()[0] as f64 / *count as f64;
                    for p in 0..n {
                        if labels[p] == *ignore {
                            continue;
                        }
                        let y = labels[p] as usize;
                        for c in 0..k {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            out[c * n + p] = ((probs[c * n + p] as f64 - onehot) * d) as f32;
                        }
                    }
                }
                accumulate(&mut grads[logits.0], Tensor::new(&shape, out)?);
            }
        }
        Ok(())
    }
}

/// Compares tape gradients against central differences for every coordinate
/// of every input and returns the worst
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return invalid(format!("grad_check eps {eps} outside [1e-4, 1e-2]"));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, (&var, x)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(var, x);
        for i in 0..x.len() {
            let orig = x.data()[i];
            let hi = orig + eps;
            let lo = orig - eps;
            probe[slot].data_mut()[i] = hi;
            let f_hi = eval(&probe)?;
            probe[slot].data_mut()[i] = lo;
            let f_lo = eval(&probe)?;
            probe[slot].data_mut()[i] = orig;
            let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
            let a = analytic.data()[i] as f64;
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at input {slot}[{i}]")));
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps)
}
