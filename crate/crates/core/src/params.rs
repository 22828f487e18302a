//! Named parameter traversal shared by the optimizer, gradient accumulation,
//! finite-difference checks and checkpoint serialization.
//!
//! Gradients are stored in a value of the same type as the model, so every
//! model doubles as its own gradient container.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Dimension, ShapeBuilder};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub trait Parameters {
    /// Visits every parameter array in a fixed order.
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));

    /// Visits every parameter array mutably, in the same order as [`visit`](Self::visit).
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        out.visit_mut(&mut |_, mut a| a.fill(0.0));
        out
    }

    /// `self += other`, parameter by parameter.
    fn accumulate(&mut self, other: &Self) {
        let mut flat = Vec::new();
        other.visit(&mut |_, a| flat.push(a.to_owned()));
        let mut it = flat.into_iter();
        self.visit_mut(&mut |_, mut a| {
            let src = it.next().expect("parameter layouts differ");
            a += &src;
        });
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, mut a| a.mapv_inplace(|v| v * factor));
    }

    /// Owned copies of all parameters, with names.
    fn named_arrays(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, a| out.push((name.to_string(), a.to_owned())));
        out
    }

    /// Overwrites parameters from named arrays. Names, order and shapes must match.
    fn load_arrays(&mut self, arrays: &[(String, ArrayD<f64>)]) -> Result<()> {
        let expected = self.num_tensors();
        if arrays.len() != expected {
            return Err(Error::Invariant(format!(
                "expected {expected} parameter arrays, got {}",
                arrays.len()
            )));
        }
        let mut idx = 0;
        let mut err = None;
        self.visit_mut(&mut |name, mut a| {
            let (src_name, src) = &arrays[idx];
            idx += 1;
            if err.is_some() {
                return;
            }
            if src_name != name || src.shape() != a.shape() {
                err = Some(Error::Invariant(format!(
                    "parameter {name} {:?} does not match stored {src_name} {:?}",
                    a.shape(),
                    src.shape()
                )));
                return;
            }
            a.assign(src);
        });
        err.map_or(Ok(()), Err)
    }

    fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    /// Flat copy of every scalar parameter.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, a| out.extend(a.iter().copied()));
        out
    }

    /// Adds `delta` to the `index`-th scalar in flattened order.
    fn nudge(&mut self, index: usize, delta: f64) {
        let mut offset = 0;
        self.visit_mut(&mut |_, mut a| {
            let n = a.len();
            if index >= offset && index < offset + n {
                let local = index - offset;
                if let Some(v) = a.iter_mut().nth(local) {
                    *v += delta;
                }
            }
            offset += n;
        });
    }

    /// Bitwise equality of all parameters.
    fn bit_identical(&self, other: &Self) -> bool {
        let a = self.flatten();
        let b = other.flatten();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// Uniform in `±sqrt(6 / fan_in)`, suitable ahead of a rectifier.
pub fn fan_in_uniform<D: Dimension, Sh: ShapeBuilder<Dim = D>>(shape: Sh, fan_in: usize, rng: &mut Rng) -> ndarray::Array<f64, D> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    ndarray::Array::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

/// Uniform in `±1/sqrt(fan_in)`, the usual linear-layer default.
pub fn linear_uniform<D: Dimension, Sh: ShapeBuilder<Dim = D>>(shape: Sh, fan_in: usize, rng: &mut Rng) -> ndarray::Array<f64, D> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ndarray::Array::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

pub fn gaussian<D: Dimension, Sh: ShapeBuilder<Dim = D>>(shape: Sh, std: f64, rng: &mut Rng) -> ndarray::Array<f64, D> {
    let normal = Normal::new(0.0, std).expect("finite std");
    ndarray::Array::from_shape_simple_fn(shape, || normal.sample(rng))
}
