//! Contextualized motion attention: class queries attend over the local
//! context and then the augmented dynamic context, both with the proximity
//! map as a per-key bias. The result gates a blend of the context and detail
//! predictions.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::layers::Qkv;
use crate::raster::IGNORE_LABEL;
use crate::tensor::{bilinear_resize, cross_attention, sigmoid, Tensor};

/// Residual attention with the proximity bias added to every query row.
pub fn ca_e(q: &Tensor, k: &Tensor, v: &Tensor, bias: &Tensor) -> Result<Tensor> {
    cross_attention(q, k, v, Some(bias), true)
}

fn flat(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    x.clone().reshape(&[c, h * w])
}

fn block(queries: &Tensor, keys: &Tensor, bias: &Tensor, proj: &Qkv) -> Result<Tensor> {
    ca_e(
        &proj.q.apply(queries)?,
        &proj.k.apply(keys)?,
        &proj.v.apply(keys)?,
        bias,
    )
}

/// `queries: c×K`, `local: c×h×w`, `bias: [h·w]`.
pub fn contextualize_queries(queries: &Tensor, local: &Tensor, bias: &Tensor, proj: &Qkv) -> Result<Tensor> {
    block(queries, &flat(local)?, bias, proj)
}

/// Stacked attention blocks over the augmented dynamic context. With no
/// layers the contextualized queries pass through.
pub fn motion_attention(queries: &Tensor, augmented: &Tensor, bias: &Tensor, layers: &[Qkv]) -> Result<Tensor> {
    let keys = flat(augmented)?;
    let mut x = queries.clone();
    for proj in layers {
        x = block(&x, &keys, bias, proj)?;
    }
    Ok(x)
}

/// Raw detail attention `K×h×w` (inner products of merged queries and local
/// features) and its logistic squash.
pub fn detail_attention_map(merged: &Tensor, local: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = local.dims3()?;
    let (cm, k) = merged.dims2()?;
    if cm != c {
        return shape_err(format!(
            "merged context {:?} and local features {:?} differ in channels",
            merged.shape(),
            local.shape()
        ));
    }
    let raw = merged.transpose()?.matmul(&flat(local)?)?.reshape(&[k, h, w])?;
    let squashed = raw.map(sigmoid);
    Ok((raw, squashed))
}

/// `(1 − O)·P_c + O·P_d` at the detail resolution; `O` and `P_c` are resized
/// to match `P_d`.
pub fn fuse_predictions(context: &Tensor, detail: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let (k, h, w) = detail.dims3()?;
    let (kc, _, _) = context.dims3()?;
    let (ko, _, _) = gate.dims3()?;
    if kc != k || ko != k {
        return shape_err(format!(
            "fusing context {:?}, detail {:?}, gate {:?}",
            context.shape(),
            detail.shape(),
            gate.shape()
        ));
    }
    let pc = bilinear_resize(context, h, w)?;
    let o = bilinear_resize(gate, h, w)?;
    let data = pc
        .data()
        .iter()
        .zip(detail.data())
        .zip(o.data())
        .map(|((&c, &d), &g)| ((1.0 - g as f64) * c as f64 + g as f64 * d as f64) as f32)
        .collect();
    Tensor::new(&[k, h, w], data)
}

/// Mean cross-entropy of `K×H×W` logits (softmax over classes), skipping
/// [`IGNORE_LABEL`].
pub fn cross_entropy(logits: &Tensor, labels: &[u16]) -> Result<f64> {
    let (k, h, w) = logits.dims3()?;
    let n = h * w;
    if labels.len() != n {
        return shape_err(format!("{} labels for logits {:?}", labels.len(), logits.shape()));
    }
    let d = logits.data();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (p, &y) in labels.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        if y as usize >= k {
            return invalid(format!("label {y} out of range for {k} classes"));
        }
        let max = (0..k).map(|c| d[c * n + p] as f64).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (d[c * n + p] as f64 - max).exp()).sum();
        total += max + z.ln() - d[y as usize * n + p] as f64;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// `(1 − λ)·CE(P_f) + λ·CE(P_d)`.
pub fn total_loss(fused: &Tensor, detail: &Tensor, labels: &[u16], lambda_d: f64) -> Result<f64> {
    check_lambda(lambda_d)?;
    Ok((1.0 - lambda_d) * cross_entropy(fused, labels)? + lambda_d * cross_entropy(detail, labels)?)
}

fn check_lambda(lambda_d: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_d) {
        return invalid(format!("detail loss weight {lambda_d} outside [0, 1]"));
    }
    Ok(())
}

/// Tape-side counterparts. Maps are `c×(h·w)` variables, the bias `[h·w]`.
pub mod tape {
    use super::*;

    fn block(t: &mut Tape, queries: Var, keys: Var, bias: Var, proj: &Qkv<Var>) -> Result<Var> {
        let q = proj.q.apply(t, queries)?;
        let k = proj.k.apply(t, keys)?;
        let v = proj.v.apply(t, keys)?;
        t.cross_attention(q, k, v, Some(bias), true)
    }

    pub fn contextualize_queries(t: &mut Tape, queries: Var, local: Var, bias: Var, proj: &Qkv<Var>) -> Result<Var> {
        block(t, queries, local, bias, proj)
    }

    pub fn motion_attention(t: &mut Tape, queries: Var, augmented: Var, bias: Var, layers: &[Qkv<Var>]) -> Result<Var> {
        let mut x = queries;
        for proj in layers {
            x = block(t, x, augmented, bias, proj)?;
        }
        Ok(x)
    }

    /// Squashed detail attention `K×h×w`.
    pub fn detail_attention_map(t: &mut Tape, merged: Var, local: Var, h: usize, w: usize) -> Result<Var> {
        let mt = t.transpose(merged)?;
        let raw = t.matmul(mt, local)?;
        let k = t.shape(raw)[0];
        let raw = t.reshape(raw, &[k, h, w])?;
        Ok(t.sigmoid(raw))
    }

    pub fn fuse_predictions(t: &mut Tape, context: Var, detail: Var, gate: Var) -> Result<Var> {
        let (_, h, w) = t.value(detail).dims3()?;
        let pc = t.resize(context, h, w)?;
        let o = t.resize(gate, h, w)?;
        let keep = t.affine(o, -1.0, 1.0);
        let a = t.mul(keep, pc)?;
        let b = t.mul(o, detail)?;
        t.add(a, b)
    }

    pub fn total_loss(t: &mut Tape, fused: Var, detail: Var, labels: Arc<[u16]>, lambda_d: f64) -> Result<Var> {
        check_lambda(lambda_d)?;
        let lf = t.cross_entropy(fused, labels.clone(), IGNORE_LABEL)?;
        let ld = t.cross_entropy(detail, labels, IGNORE_LABEL)?;
        let lf = t.scale(lf, (1.0 - lambda_d) as f32);
        let ld = t.scale(ld, lambda_d as f32);
        t.add(lf, ld)
    }
}
