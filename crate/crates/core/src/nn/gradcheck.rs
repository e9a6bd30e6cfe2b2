//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of the backward rules it checks.

use ndarray::Array2;

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn abs_err(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.abs_err() / scale
        }
    }

    /// Passes on relative error, or on absolute error near zero.
    pub fn ok(&self, rtol: f64, atol: f64) -> bool {
        self.abs_err() <= atol || self.rel_err() <= rtol
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: Vec<String>,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self, rtol: f64, atol: f64) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.ok(rtol, atol))
    }

    pub fn failures(&self, rtol: f64, atol: f64) -> Vec<&GradEntry> {
        self.entries.iter().filter(|e| !e.ok(rtol, atol)).collect()
    }

    pub fn max_rel_err(&self, atol: f64) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.abs_err() > atol)
            .map(GradEntry::rel_err)
            .fold(0.0, f64::max)
    }
}

fn eval(store: &ParameterStore, f: &impl Fn(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::Shape("gradient check needs a scalar output".into()));
    }
    Ok(tape.scalar(out))
}

/// Compares tape gradients of `f` against central differences for every
/// entry of the named parameters (all parameters when `names` is `None`).
pub fn check_gradients(
    store: &ParameterStore,
    names: Option<&[&str]>,
    f: impl Fn(&mut Tape) -> Result<Var>,
) -> Result<GradReport> {
    let grads = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    let selected: Vec<String> = match names {
        Some(ns) => ns.iter().map(|s| s.to_string()).collect(),
        None => store.names().map(str::to_string).collect(),
    };
    let mut report = GradReport::default();
    let mut probe = store.clone();
    for name in selected {
        let shape = store
            .values(&name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?
            .dim();
        let zeros = Array2::zeros(shape);
        let analytic = grads.get(&name).unwrap_or(&zeros);
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let orig = store.values(&name).unwrap()[[i, j]];
                probe.values_mut(&name).unwrap()[[i, j]] = orig + STEP;
                let up = eval(&probe, &f)?;
                probe.values_mut(&name).unwrap()[[i, j]] = orig - STEP;
                let down = eval(&probe, &f)?;
                probe.values_mut(&name).unwrap()[[i, j]] = orig;
                report.entries.push(GradEntry {
                    name: name.clone(),
                    index: (i, j),
                    analytic: analytic[[i, j]],
                    numeric: (up - down) / (2.0 * STEP),
                });
            }
        }
        report.checked.push(name);
    }
    Ok(report)
}

/// `sum(y * proj)`: a fixed random scalar projection of a block output.
pub fn random_projection_loss(tape: &mut Tape, y: Var, proj: &Array2<f64>) -> Result<Var> {
    let p = tape.constant(proj.clone());
    let prod = tape.mul(y, p)?;
    Ok(tape.sum(prod))
}
