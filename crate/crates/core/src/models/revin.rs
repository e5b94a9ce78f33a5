//! Reversible instance normalization.
//!
//! Statistics are taken per row (one univariate window) and treated as constants:
//! the forward pass normalizes the history, and the prediction is mapped back with
//! the same statistics.

use super::Module;
use crate::autodiff::{Array, Tape, Var};
use crate::error::{dim_err, Result};

pub const REVIN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct RevIn {
    pub eps: f64,
    /// Per-channel scale and shift, present only when affine mode is on.
    pub affine: Option<(Array, Array)>,
}

/// Per-row mean and ε-stabilized standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct RevInStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct RevInVars {
    pub affine: Option<(Var, Var)>,
}

impl RevIn {
    pub fn new(affine_channels: Option<usize>) -> Self {
        RevIn {
            eps: REVIN_EPS,
            affine: affine_channels.map(|n| (Array::ones(&[n]), Array::zeros(&[n]))),
        }
    }

    pub fn stats(&self, x: &Array) -> Result<RevInStats> {
        let [rows, len] = x.shape() else {
            return Err(dim_err!("RevIN expects [B, L], got {:?}", x.shape()));
        };
        if *len < 2 {
            return Err(dim_err!("RevIN needs at least 2 steps per window"));
        }
        let mut mean = Vec::with_capacity(*rows);
        let mut std = Vec::with_capacity(*rows);
        for row in x.data().chunks(*len) {
            let m = row.iter().sum::<f64>() / *len as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / *len as f64;
            mean.push(m);
            std.push((var + self.eps).sqrt());
        }
        Ok(RevInStats { mean, std })
    }

    /// Row-wise expansion of per-row scalars to `[B, width]`.
    fn expand(values: impl Iterator<Item = f64>, rows: usize, width: usize) -> Array {
        let data: Vec<f64> = values
            .flat_map(|v| std::iter::repeat_n(v, width))
            .collect();
        Array::new(vec![rows, width], data).expect("expand")
    }

    /// Per-channel affine vectors expanded to `[B, width]`; row `r` belongs to channel `r % N`.
    fn expand_channels(tape: &mut Tape, p: Var, rows: usize, width: usize) -> Result<Var> {
        let n = tape.value(p).len();
        if rows % n != 0 {
            return Err(dim_err!("{} rows are not a multiple of {} channels", rows, n));
        }
        let col = tape.reshape(p, &[n, 1])?;
        let reps = vec![col; rows / n];
        let stacked = tape.concat(&reps, 0)?;
        let ones = tape.constant(Array::ones(&[1, width]));
        tape.matmul(stacked, ones)
    }

    pub fn normalize(
        &self,
        tape: &mut Tape,
        vars: &RevInVars,
        x: Var,
    ) -> Result<(Var, RevInStats)> {
        let stats = self.stats(tape.value(x))?;
        let (rows, len) = (tape.value(x).shape()[0], tape.value(x).shape()[1]);
        let mean = tape.constant(Self::expand(stats.mean.iter().copied(), rows, len));
        let inv = tape.constant(Self::expand(stats.std.iter().map(|s| 1.0 / s), rows, len));
        let centered = tape.sub(x, mean)?;
        let mut out = tape.mul(centered, inv)?;
        if let Some((w, b)) = vars.affine {
            let wx = Self::expand_channels(tape, w, rows, len)?;
            let bx = Self::expand_channels(tape, b, rows, len)?;
            let scaled = tape.mul(out, wx)?;
            out = tape.add(scaled, bx)?;
        }
        Ok((out, stats))
    }

    pub fn denormalize(&self, tape: &mut Tape, vars: &RevInVars, y: Var, stats: &RevInStats) -> Result<Var> {
        let (rows, len) = (tape.value(y).shape()[0], tape.value(y).shape()[1]);
        if rows != stats.mean.len() {
            return Err(dim_err!("{} rows vs {} RevIN statistics", rows, stats.mean.len()));
        }
        let mut out = y;
        if let Some((w, b)) = vars.affine {
            let wx = Self::expand_channels(tape, w, rows, len)?;
            let bx = Self::expand_channels(tape, b, rows, len)?;
            let shifted = tape.sub(out, bx)?;
            let eps2 = tape.constant(Array::scalar(self.eps * self.eps));
            let denom = tape.add(wx, eps2)?;
            out = tape.div(shifted, denom)?;
        }
        let std = tape.constant(Self::expand(stats.std.iter().copied(), rows, len));
        let mean = tape.constant(Self::expand(stats.mean.iter().copied(), rows, len));
        let scaled = tape.mul(out, std)?;
        tape.add(scaled, mean)
    }
}

impl Module for RevIn {
    type Vars = RevInVars;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> RevInVars {
        RevInVars {
            affine: self.affine.as_ref().map(|(w, b)| {
                if trainable {
                    (tape.var(w.clone()), tape.var(b.clone()))
                } else {
                    (tape.constant(w.clone()), tape.constant(b.clone()))
                }
            }),
        }
    }

    fn var_list(vars: &RevInVars) -> Vec<Var> {
        vars.affine.map(|(w, b)| vec![w, b]).unwrap_or_default()
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        if let Some((w, b)) = &self.affine {
            f("affine_weight", w);
            f("affine_bias", b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        if let Some((w, b)) = &mut self.affine {
            f("affine_weight", w);
            f("affine_bias", b);
        }
    }
}
