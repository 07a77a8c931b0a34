//! Box-coordinate encoder, feature fusion and the classification head.
//!
//! ```text
//! C̃   = ReLU(W_4 C_s + b_4) + ReLU(W_5 C_o + b_5)
//! C_so = W_7 ReLU(W_6 C̃ + b_6) + b_7
//! f_so = [C_so; h_so]            (concat)
//!      = α C_so + (1 − α) h_so   (alpha)
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{he_std, lecun_std, Linear};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct SpatialModule {
    pub d_s: usize,
    pub subject: Linear,
    pub object: Linear,
    pub hidden: Linear,
    pub out: Linear,
}

impl SpatialModule {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, d_s: usize) -> Result<Self> {
        Ok(Self {
            d_s,
            subject: Linear::register(store, rng, "spatial.subject", 4, d_s, he_std(4))?,
            object: Linear::register(store, rng, "spatial.object", 4, d_s, he_std(4))?,
            hidden: Linear::register(store, rng, "spatial.hidden", d_s, d_s, he_std(d_s))?,
            out: Linear::register(store, rng, "spatial.out", d_s, d_s, lecun_std(d_s))?,
        })
    }

    /// `c_s`, `c_o` are `(rows, 4)` normalized coordinates; returns
    /// `(rows, d_s)`.
    pub fn spatial_encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        c_s: Var,
        c_o: Var,
    ) -> Result<Var> {
        for v in [c_s, c_o] {
            if tape.shape(v).len() != 2 || tape.shape(v)[1] != 4 {
                return Err(Error::invalid(
                    "spatial_encode",
                    format!("coordinates must be (rows, 4), got {:?}", tape.shape(v)),
                ));
            }
            if let Some(bad) = tape.data(v).iter().find(|&&x| !(x >= T::zero() && x <= T::one())) {
                return Err(Error::invalid(
                    "spatial_encode",
                    format!("coordinate {bad} outside [0, 1]"),
                ));
            }
        }
        let a = self.subject.forward(tape, store, c_s)?;
        let a = tape.relu(a);
        let b = self.object.forward(tape, store, c_o)?;
        let b = tape.relu(b);
        let c = tape.add(a, b)?;
        let h = self.hidden.forward(tape, store, c)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Fusion {
    #[default]
    Concat,
    Alpha(f64),
}

impl FromStr for Fusion {
    type Err = String;

    /// `concat` or `alpha:<value in [0,1]>`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "concat" {
            return Ok(Fusion::Concat);
        }
        let v = s
            .strip_prefix("alpha:")
            .ok_or_else(|| format!("unknown fusion '{s}' (expected concat or alpha:<v>)"))?;
        let a: f64 = v.parse().map_err(|_| format!("invalid alpha '{v}'"))?;
        if !(0.0..=1.0).contains(&a) {
            return Err(format!("alpha {a} outside [0, 1]"));
        }
        Ok(Fusion::Alpha(a))
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fusion::Concat => write!(f, "concat"),
            Fusion::Alpha(a) => write!(f, "alpha:{a}"),
        }
    }
}

impl Serialize for Fusion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fusion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Fusion {
    /// Width of the fused feature.
    pub fn output_dim(&self, d: usize, d_s: usize) -> usize {
        match self {
            Fusion::Concat => d + d_s,
            Fusion::Alpha(_) => d,
        }
    }
}

/// Combines `(rows, d_s)` spatial and `(rows, d)` answer features.
pub fn fuse<T: Real>(tape: &mut Tape<T>, c_so: Var, h_so: Var, fusion: Fusion) -> Result<Var> {
    match fusion {
        Fusion::Concat => tape.concat(&[c_so, h_so], 1),
        Fusion::Alpha(alpha) => {
            if tape.shape(c_so) != tape.shape(h_so) {
                return Err(Error::shape("fuse", tape.shape(c_so), tape.shape(h_so), Some(1)));
            }
            let a = tape.scale(c_so, T::lit(alpha));
            let b = tape.scale(h_so, T::lit(1.0 - alpha));
            tape.add(a, b)
        }
    }
}

/// Zero spatial feature used when the spatial module is disabled.
pub fn zero_spatial<T: Real>(tape: &mut Tape<T>, rows: usize, d_s: usize) -> Var {
    tape.constant(Tensor::zeros(&[rows, d_s]))
}

/// Two affine layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub hidden: Linear,
    pub out: Linear,
}

impl Classifier {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        input: usize,
        hidden: usize,
        classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::register(store, rng, "classifier.hidden", input, hidden, he_std(input))?,
            out: Linear::register(store, rng, "classifier.out", hidden, classes, lecun_std(hidden))?,
        })
    }

    /// Raw logits, `(rows, classes)`.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, f)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }
}
