//! Parameter containers shared by the attention modules.
//!
//! Every container is generic over its leaf type: `Tensor` for inference and
//! storage, [`Var`] once bound to a [`Tape`] for training.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Column-wise affine map `W·x + b`, `W: out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl Linear<Tensor> {
    pub fn identity(c: usize) -> Result<Self> {
        Ok(Linear {
            weight: Tensor::eye(c)?,
            bias: Tensor::zeros(&[c])?,
        })
    }

    /// Weights from `N(0, gain²/in)`, zero bias.
    pub fn seeded<R: Rng>(out: usize, inp: usize, gain: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, gain / (inp as f64).sqrt()).expect("positive std");
        let w = (0..out * inp).map(|_| normal.sample(rng) as f32).collect();
        Ok(Linear {
            weight: Tensor::new(&[out, inp], w)?,
            bias: Tensor::zeros(&[out])?,
        })
    }

    /// Applies the map to every column of the 2-D `x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.weight.matmul(x)?;
        let n = y.shape()[1];
        let b = self.bias.data();
        if b.len() != y.shape()[0] {
            return invalid(format!("bias {:?} for output {:?}", self.bias.shape(), y.shape()));
        }
        for (r, row) in y.data_mut().chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v += b[r]);
        }
        Ok(y)
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Linear<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(self.weight, self.bias, x)
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Query, key and value projections of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv<T = Tensor> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
}

impl Qkv<Tensor> {
    pub fn identity(c: usize) -> Result<Self> {
        Ok(Qkv {
            q: Linear::identity(c)?,
            k: Linear::identity(c)?,
            v: Linear::identity(c)?,
        })
    }

    pub fn seeded<R: Rng>(c: usize, rng: &mut R) -> Result<Self> {
        Ok(Qkv {
            q: Linear::seeded(c, c, 1.0, rng)?,
            k: Linear::seeded(c, c, 1.0, rng)?,
            v: Linear::seeded(c, c, 1.0, rng)?,
        })
    }
}

impl<T> Qkv<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Qkv<U> {
        Qkv {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.q.visit(&format!("{prefix}.q"), out);
        self.k.visit(&format!("{prefix}.k"), out);
        self.v.visit(&format!("{prefix}.v"), out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.q.visit_mut(&format!("{prefix}.q"), out);
        self.k.visit_mut(&format!("{prefix}.k"), out);
        self.v.visit_mut(&format!("{prefix}.v"), out);
    }
}

/// Removes `name` from a loaded tensor set, checking its shape.
pub(crate) fn take(store: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    match store.remove(name) {
        Some(t) if t.shape() == shape => Ok(t),
        Some(t) => invalid(format!(
            "parameter {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )),
        None => invalid(format!("missing parameter {name}")),
    }
}

pub(crate) fn take_linear(
    store: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    out: usize,
    inp: usize,
) -> Result<Linear> {
    Ok(Linear {
        weight: take(store, &format!("{prefix}.weight"), &[out, inp])?,
        bias: take(store, &format!("{prefix}.bias"), &[out])?,
    })
}

pub(crate) fn take_qkv(store: &mut BTreeMap<String, Tensor>, prefix: &str, c: usize) -> Result<Qkv> {
    Ok(Qkv {
        q: take_linear(store, &format!("{prefix}.q"), c, c)?,
        k: take_linear(store, &format!("{prefix}.k"), c, c)?,
        v: take_linear(store, &format!("{prefix}.v"), c, c)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    #[test]
    fn plain_and_tape_agree() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let mut l = Linear::seeded(3, 4, 1.0, &mut rng).unwrap();
        l.bias = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new(&[4, 5], (0..20).map(|v| v as f32 * 0.1).collect()).unwrap();
        let plain = l.apply(&x).unwrap();
        let mut tape = Tape::new();
        let bound = l.map(&mut |t| tape.leaf(t.clone()));
        let xv = tape.leaf(x);
        let y = bound.apply(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &plain);
    }

    #[test]
    fn identity_is_identity() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Linear::identity(2).unwrap().apply(&x).unwrap(), x);
    }

    #[test]
    fn names_are_stable() {
        let qkv = Qkv::identity(2).unwrap();
        let mut names = Vec::new();
        qkv.visit("m", &mut names);
        let names: Vec<String> = names.into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "m.q.weight",
                "m.q.bias",
                "m.k.weight",
                "m.k.bias",
                "m.v.weight",
                "m.v.bias"
            ]
        );
    }
}
