use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_init, Module};
use crate::autodiff::{Array, Tape, Var};
use crate::error::{contract_err, Result};

/// Floor applied to spectral-norm estimates before dividing by them.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Iterations used to warm the power-iteration state of a freshly built layer.
pub const WARMUP_POWER_ITERS: usize = 30;

/// Hard cap on per-step refinement iterations. Usually a handful suffice; when the top
/// two singular values nearly cross, convergence slows to a factor of (σ₂/σ₁)² per
/// iteration and hundreds may be needed to keep ‖W̃‖₂ pinned to |γ|.
pub const MAX_STEP_POWER_ITERS: usize = 5000;

/// Per-step refinement stops once the estimate moves by less than this, relative.
/// The remaining error is about this tolerance divided by 1 − (σ₂/σ₁)².
pub const STEP_POWER_REL_TOL: f64 = 1e-12;

/// Left/right singular vector estimates carried across training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIterState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl PowerIterState {
    pub fn new(out_dim: usize, in_dim: usize) -> Self {
        // deterministic, non-degenerate start
        let v: Vec<f64> = (0..in_dim).map(|i| 1.0 + 0.01 * i as f64).collect();
        let mut s = PowerIterState {
            u: vec![0.0; out_dim],
            v,
        };
        normalize(&mut s.v);
        s
    }

    /// One `u ← Wv/‖Wv‖, v ← Wᵀu/‖Wᵀu‖` round. Returns `‖Wv‖`, the current estimate.
    pub fn step(&mut self, w: &Array) -> f64 {
        let n = w.shape()[1];
        for (ui, row) in self.u.iter_mut().zip(w.data().chunks_exact(n)) {
            *ui = dot(row, &self.v);
        }
        let sigma = normalize(&mut self.u);
        if sigma == 0.0 {
            return 0.0;
        }
        self.v.iter_mut().for_each(|x| *x = 0.0);
        for (ui, row) in self.u.iter().zip(w.data().chunks_exact(n)) {
            for (vj, wij) in self.v.iter_mut().zip(row) {
                *vj += wij * ui;
            }
        }
        normalize(&mut self.v);
        sigma
    }

    /// `uᵀ W v` for the current vectors.
    pub fn sigma(&self, w: &Array) -> f64 {
        let n = w.shape()[1];
        let d = w.data();
        self.u
            .iter()
            .enumerate()
            .map(|(i, ui)| ui * (0..n).map(|j| d[i * n + j] * self.v[j]).sum::<f64>())
            .sum()
    }

    /// Iterates until the estimate moves by less than `rel_tol` relative, at least `min_iters`
    /// and at most `max_iters` times. Returns the final `uᵀWv`.
    pub fn refine(&mut self, w: &Array, min_iters: usize, max_iters: usize, rel_tol: f64) -> f64 {
        let mut prev = f64::NAN;
        for it in 0..max_iters.max(1) {
            let s = self.step(w);
            if s == 0.0 {
                return 0.0;
            }
            if it + 1 >= min_iters && ((s - prev).abs() <= rel_tol * s) {
                break;
            }
            prev = s;
        }
        self.sigma(w)
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Largest singular value of `w` by power iteration on `WᵀW`.
pub fn spectral_norm(w: &Array, max_iters: usize) -> Result<f64> {
    if w.ndim() != 2 {
        return Err(contract_err!("spectral_norm needs a matrix, got {:?}", w.shape()));
    }
    let mut state = PowerIterState::new(w.shape()[0], w.shape()[1]);
    let s = state.refine(w, 1, max_iters, 1e-15);
    Ok(s.max(0.0))
}

/// Fully connected layer `y = x·W̃ᵀ + b`, where `W̃ = γ·W/σ_max(W)` when spectral-norm
/// regularization is enabled and `W̃ = W` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub w: Array,
    pub b: Array,
    pub gamma: Array,
    pub snr: bool,
    pub power: PowerIterState,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
    pub gamma: Option<Var>,
}

impl LinearLayer {
    pub fn new(in_dim: usize, out_dim: usize, snr: bool, rng: &mut impl Rng) -> Self {
        let w = uniform_init(&[out_dim, in_dim], in_dim, rng);
        let mut layer = LinearLayer {
            w,
            b: Array::zeros(&[out_dim]),
            gamma: Array::scalar(1.0),
            snr,
            power: PowerIterState::new(out_dim, in_dim),
        };
        if snr {
            layer.power.refine(&layer.w, WARMUP_POWER_ITERS, MAX_STEP_POWER_ITERS, 1e-12);
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    /// Per-step power-iteration update: one round, continued while the estimate still
    /// moves by more than [`STEP_POWER_REL_TOL`] relative.
    pub fn refresh_spectral_state(&mut self) {
        if self.snr {
            self.power.refine(&self.w, 1, MAX_STEP_POWER_ITERS, STEP_POWER_REL_TOL);
        }
    }

    pub fn sigma_estimate(&self) -> f64 {
        self.power.sigma(&self.w).max(SIGMA_FLOOR)
    }

    /// The weight actually applied, as a plain array.
    pub fn effective_weight_value(&self) -> Array {
        if !self.snr {
            return self.w.clone();
        }
        let sigma = self.power.sigma(&self.w);
        if sigma < SIGMA_FLOOR {
            return Array::zeros(self.w.shape());
        }
        let g = self.gamma.item();
        self.w.map(|x| g * x / sigma)
    }

    /// `W̃` on the tape. σ is `uᵀWv` with `u`, `v` held constant, so gradients pass through `W`.
    pub fn effective_weight(&self, tape: &mut Tape, vars: &LinearVars) -> Result<Var> {
        let Some(gamma) = vars.gamma else {
            return Ok(vars.w);
        };
        let (m, n) = (self.out_dim(), self.in_dim());
        let raw_sigma = self.power.sigma(&self.w);
        let sigma = if raw_sigma < SIGMA_FLOOR {
            tape.constant(Array::scalar(SIGMA_FLOOR))
        } else {
            let ut = tape.constant(Array::new(vec![1, m], self.power.u.clone())?);
            let v = tape.constant(Array::new(vec![n, 1], self.power.v.clone())?);
            let uw = tape.matmul(ut, vars.w)?;
            tape.matmul(uw, v)?
        };
        let factor = tape.div(gamma, sigma)?;
        tape.mul(vars.w, factor)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &LinearVars, x: Var) -> Result<Var> {
        let w = self.effective_weight(tape, vars)?;
        tape.linear(x, w, vars.b)
    }
}

impl Module for LinearLayer {
    type Vars = LinearVars;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        let mut leaf = |a: &Array| {
            if trainable {
                tape.var(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        LinearVars {
            w: leaf(&self.w),
            b: leaf(&self.b),
            gamma: self.snr.then(|| leaf(&self.gamma)),
        }
    }

    fn var_list(vars: &LinearVars) -> Vec<Var> {
        let mut v = vec![vars.w, vars.b];
        v.extend(vars.gamma);
        v
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        f("w", &self.w);
        f("b", &self.b);
        if self.snr {
            f("gamma", &self.gamma);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
        if self.snr {
            f("gamma", &mut self.gamma);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        if self.snr {
            f("power_u", &self.power.u);
            f("power_v", &self.power.v);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        if self.snr {
            f("power_u", &mut self.power.u);
            f("power_v", &mut self.power.v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_and_rank_one_cases() {
        let d = Array::from_rows(&[&[3.0, 0.0], &[0.0, 4.0]]);
        assert!((spectral_norm(&d, 100).unwrap() - 4.0).abs() < 1e-12);
        let mut layer = LinearLayer::new(2, 2, true, &mut ChaCha8Rng::seed_from_u64(0));
        layer.w = d;
        layer.power.refine(&layer.w, 30, 100, 1e-15);
        let eff = layer.effective_weight_value();
        assert!(eff.max_abs_diff(&Array::from_rows(&[&[0.75, 0.0], &[0.0, 1.0]])) < 1e-12);

        let r = Array::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]);
        assert!((spectral_norm(&r, 100).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_gives_zero_weight() {
        let z = Array::zeros(&[3, 2]);
        assert_eq!(spectral_norm(&z, 10).unwrap(), 0.0);
        let mut layer = LinearLayer::new(2, 3, true, &mut ChaCha8Rng::seed_from_u64(0));
        layer.w = z;
        layer.refresh_spectral_state();
        assert_eq!(layer.effective_weight_value(), Array::zeros(&[3, 2]));
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape, true);
        let w = layer.effective_weight(&mut tape, &vars).unwrap();
        assert!(tape.value(w).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tape_weight_matches_plain_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layer = LinearLayer::new(6, 4, true, &mut rng);
        layer.gamma = Array::scalar(-1.3);
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape, true);
        let w = layer.effective_weight(&mut tape, &vars).unwrap();
        assert!(tape.value(w).max_abs_diff(&layer.effective_weight_value()) < 1e-12);
    }
}
