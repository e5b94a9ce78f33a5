//! Loss-landscape sharpness and channel-distribution diagnostics.
//!
//! Hessian-vector products are central differences of first-order gradients, so the
//! autodiff core never needs second derivatives. Block power iteration on those
//! products yields the dominant Hessian eigenvalue, either over the whole parameter
//! vector or restricted to one named component.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape};
use crate::error::{contract_err, Result};
use crate::models::{flatten_grads, load_flat_params, Module, Predictor};

pub const POWER_MAX_ITERS: usize = 100;
pub const POWER_REL_TOL: f64 = 1e-4;
/// Number of vectors iterated together.
pub const POWER_BLOCK: usize = 4;
pub const HISTOGRAM_BINS: usize = 64;
pub const MASS_FLOOR: f64 = 1e-10;

type GradFn<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a;

/// A named contiguous slice of the flattened parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// A deterministic gradient oracle around a fixed parameter vector.
pub struct HvpContext<'a> {
    grad: Box<GradFn<'a>>,
    pub params: Vec<f64>,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Rayleigh quotient after each iteration.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub total: f64,
    pub per_component: BTreeMap<String, f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'a> HvpContext<'a> {
    pub fn new(
        params: Vec<f64>,
        segments: Vec<Segment>,
        grad: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a,
    ) -> Self {
        HvpContext {
            grad: Box::new(grad),
            params,
            segments,
        }
    }

    /// `L(θ) = ½ θᵀAθ` for a dense symmetric `A` (row-major `n×n`), evaluated at `θ = 0`.
    pub fn quadratic(a: Vec<f64>, n: usize, segments: Vec<Segment>) -> HvpContext<'static> {
        HvpContext::new(vec![0.0; n], segments, move |theta: &[f64]| {
            Ok((0..n).map(|i| dot(&a[i * n..(i + 1) * n], theta)).collect())
        })
    }

    /// Sharpness of `mean(|y − f(x)| ⊙ w)` with respect to all predictor parameters.
    /// `weights` selects which output points count (e.g. a fixed mask); RevIN
    /// statistics and spectral-norm power-iteration vectors stay frozen.
    pub fn for_predictor(model: &Predictor, x: Array, y: Array, weights: Array) -> HvpContext<'static> {
        let params = crate::models::flatten_params(model);
        let segments = model
            .component_segments()
            .into_iter()
            .map(|(name, start, len)| Segment { name, start, len })
            .collect();
        let template = model.clone();
        HvpContext::new(params, segments, move |theta: &[f64]| {
            let mut m = template.clone();
            load_flat_params(&mut m, theta);
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let wv = tape.constant(weights.clone());
            let pred = m.forward(&mut tape, &vars, xv)?;
            let d = tape.sub(yv, pred)?;
            let a = tape.abs(d);
            let masked = tape.mul(a, wv)?;
            let loss = tape.mean(masked);
            tape.backward(loss)?;
            Ok(flatten_grads::<Predictor>(&tape, &vars))
        })
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let g = (self.grad)(theta)?;
        if g.len() != theta.len() {
            return Err(contract_err!("gradient length {} vs {} parameters", g.len(), theta.len()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(contract_err!("non-finite gradient"));
        }
        Ok(g)
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| contract_err!("unknown segment {name:?}"))
    }
}

/// `Hv ≈ (∇L(θ + εv̂) − ∇L(θ − εv̂))·‖v‖ / 2ε` with `ε = 1e-4·max(1, ‖θ‖)`.
pub fn hvp(ctx: &HvpContext, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != ctx.dim() {
        return Err(contract_err!("probe length {} vs {} parameters", v.len(), ctx.dim()));
    }
    let vn = norm(v);
    if !(vn > 0.0) {
        return Err(contract_err!("probe vector must be non-zero"));
    }
    let eps = 1e-4 * norm(&ctx.params).max(1.0);
    let shifted = |sign: f64| -> Vec<f64> {
        ctx.params
            .iter()
            .zip(v)
            .map(|(p, d)| p + sign * eps * d / vn)
            .collect()
    };
    let (plus, minus) = (shifted(1.0), shifted(-1.0));
    let (gp, gm) = rayon::join(|| ctx.gradient(&plus), || ctx.gradient(&minus));
    let (gp, gm) = (gp?, gm?);
    let scale = vn / (2.0 * eps);
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) * scale).collect())
}

/// Block power iteration with Rayleigh–Ritz extraction.
///
/// A single random start vector can be nearly orthogonal to the top eigenvector, and
/// its quotient then stalls at the second eigenvalue long enough to pass the stopping
/// test. Iterating a small random block and reading the dominant Ritz value removes
/// that failure mode and makes convergence depend on λ₅/λ₁ instead of λ₂/λ₁.
fn power_iteration(ctx: &HvpContext, start: usize, len: usize, seed: u64) -> Result<PowerResult> {
    if len == 0 || start + len > ctx.dim() {
        return Err(contract_err!("segment [{start}, {}) is empty or out of range", start + len));
    }
    if ctx.params.iter().any(|p| !p.is_finite()) {
        return Err(contract_err!("non-finite parameters"));
    }
    let width = POWER_BLOCK.min(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = DMatrix::<f64>::from_fn(len, width, |_, _| StandardNormal.sample(&mut rng)).qr().q();

    let mut history: Vec<f64> = Vec::new();
    for it in 1..=POWER_MAX_ITERS {
        let columns: Vec<Vec<f64>> = (0..width)
            .into_par_iter()
            .map(|j| {
                let mut full = vec![0.0; ctx.dim()];
                full[start..start + len].copy_from_slice(q.column(j).as_slice());
                Ok(hvp(ctx, &full)?[start..start + len].to_vec())
            })
            .collect::<Result<_>>()?;
        let hq = DMatrix::from_fn(len, width, |i, j| columns[j][i]);
        let projected = q.transpose() * &hq;
        let ritz = SymmetricEigen::new((&projected + projected.transpose()) * 0.5).eigenvalues;
        let value = ritz.iter().copied().fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let prev = history.last().copied();
        history.push(value);
        if hq.iter().all(|v| *v == 0.0) {
            return Ok(PowerResult { value: 0.0, iterations: it, converged: true, history });
        }
        if let Some(p) = prev {
            if (value - p).abs() <= POWER_REL_TOL * value.abs().max(f64::MIN_POSITIVE) {
                return Ok(PowerResult { value, iterations: it, converged: true, history });
            }
        }
        q = hq.qr().q();
    }
    log::warn!("power iteration did not converge in {POWER_MAX_ITERS} iterations");
    let value = *history.last().expect("at least one iteration");
    Ok(PowerResult { value, iterations: POWER_MAX_ITERS, converged: false, history })
}

/// Dominant Hessian eigenvalue over the whole parameter vector.
pub fn lambda_max(ctx: &HvpContext, seed: u64) -> Result<PowerResult> {
    power_iteration(ctx, 0, ctx.dim(), seed)
}

/// Dominant eigenvalue of the Hessian block of one named segment.
pub fn component_sharpness(ctx: &HvpContext, segment: &str, seed: u64) -> Result<PowerResult> {
    let s = ctx.segment(segment)?.clone();
    power_iteration(ctx, s.start, s.len, seed)
}

pub fn sharpness_report(ctx: &HvpContext, seed: u64) -> Result<SharpnessReport> {
    let total = lambda_max(ctx, seed)?;
    let mut per_component = BTreeMap::new();
    let mut iterations = total.iterations;
    let mut converged = total.converged;
    for s in &ctx.segments {
        let r = power_iteration(ctx, s.start, s.len, seed)?;
        iterations = iterations.max(r.iterations);
        converged &= r.converged;
        per_component.insert(s.name.clone(), r.value);
    }
    Ok(SharpnessReport {
        total: total.value,
        per_component,
        iterations,
        converged,
    })
}

/// Dense Hessian (row-major, symmetrized) from one product per basis vector.
pub fn dense_hessian(ctx: &HvpContext) -> Result<Vec<f64>> {
    let n = ctx.dim();
    let mut h = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = hvp(ctx, &e)?;
        e[j] = 0.0;
        for i in 0..n {
            h[i * n + j] = col[i];
        }
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (h[i * n + j] + h[j * n + i]);
            h[i * n + j] = s;
            h[j * n + i] = s;
        }
    }
    Ok(h)
}

/// Probability masses of one channel over bin edges shared with the channels it is
/// compared against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelHistogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

impl ChannelHistogram {
    /// Histograms for each sample set over `bins` uniform bins spanning their pooled
    /// range. Empty bins are floored at [`MASS_FLOOR`] and the remaining mass is
    /// rescaled so every histogram still sums to one.
    pub fn shared(samples: &[&[f64]], bins: usize) -> Result<Vec<ChannelHistogram>> {
        if bins == 0 || samples.is_empty() || samples.iter().any(|s| s.is_empty()) {
            return Err(contract_err!("histograms need bins and non-empty samples"));
        }
        let pooled = samples.iter().flat_map(|s| s.iter().copied());
        let (lo, hi) = pooled.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(contract_err!("non-finite histogram samples"));
        }
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        Ok(samples
            .iter()
            .map(|s| {
                let mut counts = vec![0.0; bins];
                for &v in *s {
                    let idx = (((v - lo) / width) as usize).min(bins - 1);
                    counts[idx] += 1.0;
                }
                let total = s.len() as f64;
                ChannelHistogram {
                    edges: edges.clone(),
                    masses: floor_masses(counts.iter().map(|c| c / total).collect()),
                }
            })
            .collect())
    }

    pub fn from_masses(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if edges.len() != masses.len() + 1 {
            return Err(contract_err!("{} edges for {} bins", edges.len(), masses.len()));
        }
        let total: f64 = masses.iter().sum();
        if masses.iter().any(|m| *m < 0.0) || !(total > 0.0) {
            return Err(contract_err!("masses must be non-negative with positive total"));
        }
        Ok(ChannelHistogram {
            edges,
            masses: floor_masses(masses.iter().map(|m| m / total).collect()),
        })
    }
}

fn floor_masses(mut p: Vec<f64>) -> Vec<f64> {
    let floored = p.iter().filter(|m| **m < MASS_FLOOR).count();
    if floored == 0 {
        return p;
    }
    let big: f64 = p.iter().filter(|m| **m >= MASS_FLOOR).sum();
    let scale = (1.0 - floored as f64 * MASS_FLOOR) / big;
    for m in &mut p {
        *m = if *m < MASS_FLOOR { MASS_FLOOR } else { *m * scale };
    }
    p
}

/// Symmetrized KL divergence `½(KL(a‖b) + KL(b‖a))`.
pub fn kl_alignment(a: &ChannelHistogram, b: &ChannelHistogram) -> Result<f64> {
    if a.edges != b.edges {
        return Err(contract_err!("histograms have different bin edges"));
    }
    // (p − q)(ln p − ln q) is exactly antisymmetric in its two factors, so swapping
    // the arguments reproduces the same sum bit for bit
    let total: f64 = a
        .masses
        .iter()
        .zip(&b.masses)
        .map(|(p, q)| (p - q) * (p.ln() - q.ln()))
        .sum();
    Ok(0.5 * total)
}
