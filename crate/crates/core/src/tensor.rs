//! Dense rank-1..3 `f32` tensors and the handful of kernels the attention
//! stack needs.
//!
//! Reductions accumulate in `f64` and always run in the same sequential order,
//! so every kernel here is bit-reproducible.

use std::fmt;

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 3 {
        return shape_err(format!("rank must be 1..=3, got shape {shape:?}"));
    }
    if shape.contains(&0) {
        return shape_err(format!("zero extent in shape {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} elements, buffer has {}", data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// `n × n` identity.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return shape_err("ragged rows");
        }
        Self::new(&[m, n], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => shape_err(format!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(format!("expected rank-3 tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at2(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(format!("elementwise op on {:?} and {:?}", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    /// Standard matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return shape_err(format!(
                "matmul of {:?} and {:?}: inner extents differ",
                self.shape, rhs.shape
            ));
        }
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in row.iter().enumerate() {
                let a = a as f64;
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (s, &b) in acc.iter_mut().zip(b_row) {
                    *s += a * b as f64;
                }
            }
            for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = *s as f32;
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// Flattens a `c×h×w` map into `c×(h·w)`.
    pub fn flatten_spatial(self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        self.reshape(&[c, h * w])
    }
}

fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = x.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value {v} in {what}")));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    ensure_finite(x, "softmax input")?;
    let mut out = vec![0.0f32; m * n];
    let mut buf = vec![0.0f64; n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let mut total = 0.0f64;
        for (e, &v) in buf.iter_mut().zip(row) {
            *e = (v as f64 - max).exp();
            total += *e;
        }
        for (o, e) in out[i * n..(i + 1) * n].iter_mut().zip(&buf) {
            *o = (e / total) as f32;
        }
    }
    Tensor::new(&[m, n], out)
}

/// Attention weights `softmax(qᵀk/√c + bias)` of shape `Nq×Nk`.
pub fn attention_weights(q: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (c, _nq) = q.dims2()?;
    let (ck, nk) = k.dims2()?;
    if c != ck {
        return shape_err(format!(
            "query {:?} and key {:?} channel extents differ",
            q.shape, k.shape
        ));
    }
    let mut scores = q.transpose()?.matmul(k)?;
    let scale = 1.0 / (c as f64).sqrt();
    scores.data.iter_mut().for_each(|s| *s = (*s as f64 * scale) as f32);
    if let Some(b) = bias {
        if b.len() != nk {
            return shape_err(format!("bias of length {} for {nk} keys", b.len()));
        }
        ensure_finite(b, "attention bias")?;
        for row in scores.data.chunks_mut(nk) {
            for (s, &e) in row.iter_mut().zip(&b.data) {
                *s += e;
            }
        }
    }
    softmax_rows(&scores)
}

/// Single-head cross-attention over column-major token sets.
///
/// `q` is `c×Nq`, `k` and `v` are `c×Nk`. Returns
/// `(softmax(qᵀk/√c + bias) · vᵀ)ᵀ`, plus `q` when `residual` is set. The
/// optional bias has one entry per key and is added to every query row.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>, residual: bool) -> Result<Tensor> {
    if k.shape != v.shape {
        return shape_err(format!("key {:?} and value {:?} shapes differ", k.shape, v.shape));
    }
    let weights = attention_weights(q, k, bias)?;
    let mut out = v.matmul(&weights.transpose()?)?;
    if residual {
        out = out.add(q)?;
    }
    Ok(out)
}

/// Per-axis interpolation plan for half-pixel-centre bilinear resampling.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AxisPlan {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisPlan {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut plan = AxisPlan {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            plan.lo.push(lo);
            plan.hi.push((lo + 1).min(src - 1));
            plan.frac.push(pos - lo as f64);
        }
        plan
    }
}

/// Bilinear resize of a `c×h×w` tensor (align-corners off).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return invalid(format!("zero resize target {out_h}×{out_w}"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let py = AxisPlan::new(h, out_h);
    let px = AxisPlan::new(w, out_w);
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        let src = &x.data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (py.lo[oy], py.hi[oy], py.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (px.lo[ox], px.hi[ox], px.frac[ox]);
                let top = src[y0 * w + x0] as f64 * (1.0 - fx) + src[y0 * w + x1] as f64 * fx;
                let bot = src[y1 * w + x0] as f64 * (1.0 - fx) + src[y1 * w + x1] as f64 * fx;
                dst[oy * out_w + ox] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}
