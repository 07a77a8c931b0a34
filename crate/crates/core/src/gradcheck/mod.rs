//! Central finite-difference verification of tape gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub mod suite;

pub use suite::{run_suite, SuiteDims};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many entries per input (sampled, seeded).
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Negative-control hook: scales the analytic gradient before comparing.
    pub corrupt_analytic: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_entries: None,
            seed: 0,
            corrupt_analytic: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    /// Input with the largest error, if any.
    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Denominator floor of [`relative_error`].
pub const GRADIENT_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    if tape.value(v).len() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function must be scalar-valued, got shape {:?}", tape.shape(v)),
        ));
    }
    let y = tape.value(v).item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(y)
}

/// Checks `f` against finite differences with respect to plain inputs.
pub fn grad_check<F>(name: &str, f: F, inputs: &[Tensor<f64>], opts: &CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t.clone(), false))
        .collect::<Result<_>>()?;
    check_params(
        name,
        &mut store,
        |tape, store| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            f(tape, &vars)
        },
        opts,
    )
}

/// Checks `f` against finite differences with respect to every trainable
/// parameter of `store`. Values are restored before returning.
pub fn check_params<F>(name: &str, store: &mut ParamStore<f64>, f: F, opts: &CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let bound: Vec<(ParamId, Var)> = tape.bound_params().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut inputs = Vec::new();
    for id in ids {
        let len = store.get(id).tensor.len();
        let analytic = match bound.iter().find(|(b, _)| *b == id) {
            Some(&(_, v)) => grads.wrt_or_zeros(&tape, v),
            None => vec![0.0; len],
        };
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < len => {
                let mut e = sample(&mut rng, len, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &entries {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + opts.step;
            let plus = eval(&f, store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - opts.step;
            let minus = eval(&f, store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i] * opts.corrupt_analytic.unwrap_or(1.0);
            worst = worst.max(relative_error(a, numeric));
        }
        inputs.push(InputReport {
            name: store.get(id).name.clone(),
            checked: entries.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        inputs,
        tolerance: opts.tolerance,
    })
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            "square",
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            &CheckOptions {
                tolerance: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            "square",
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            &CheckOptions {
                corrupt_analytic: Some(1.01),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = grad_check(
            "log0",
            |t, v| {
                let y = t.scale(v[0], f64::INFINITY);
                Ok(t.sum(y))
            },
            &[x.map(|_| 1.0)],
            &CheckOptions::default(),
        );
        assert!(r.is_err());
    }
}
