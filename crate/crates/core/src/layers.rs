//! Small shared building blocks on top of the tape.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Weight/bias pair of an affine map `x·W + b` (`W` is `in × out`).
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Registers `name.weight` (truncated normal, given std) and `name.bias`
    /// (zeros).
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(rng, &[fan_in, fan_out], std),
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false)?;
        Ok(Self { weight, bias })
    }

    /// `x` is `(rows, in)`; returns `(rows, out)`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Convolution kernels and bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(rng, &[c_out, c_in, kernel, kernel], std),
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), false)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    /// Like [`Conv::register`] but without a bias term.
    pub fn register_unbiased<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(rng, &[c_out, c_in, kernel, kernel], std),
            true,
        )?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        kind: crate::autodiff::ConvKind,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = match self.bias {
            Some(id) => tape.param(store, id),
            None => {
                let c_out = store.get(self.weight).tensor.shape()[0];
                tape.constant(Tensor::zeros(&[c_out]))
            }
        };
        tape.conv2d(x, w, b, kind)
    }
}

/// He-style standard deviation for a ReLU-followed layer.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Variance-preserving standard deviation for a linear readout.
pub fn lecun_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}
