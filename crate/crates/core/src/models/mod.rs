//! Forecasting backbones, the reconstruction network, and their shared parameter plumbing.

mod linear;
mod predictor;
mod recon;
mod revin;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use linear::{
    spectral_norm, LinearLayer, LinearVars, PowerIterState, MAX_STEP_POWER_ITERS, SIGMA_FLOOR,
    WARMUP_POWER_ITERS,
};
pub use predictor::{Predictor, PredictorVars};
pub use recon::{layer_source_position, ReconOutput, ReconVars, ReconstructionNet, CONV_LAYERS};
pub use revin::{RevIn, RevInStats, RevInVars, REVIN_EPS};

use crate::autodiff::{Array, Tape, Var};
use crate::error::{config_err, Result};

/// A parameterized component. Parameters are visited in declaration order, which
/// fixes the layout of flattened vectors, optimizer state and checkpoints.
pub trait Module {
    type Vars;

    /// Places every parameter on `tape`, as trainable leaves or as constants.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Self::Vars;

    /// The bound parameter handles in visit order.
    fn var_list(vars: &Self::Vars) -> Vec<Var>;

    fn visit(&self, f: &mut dyn FnMut(&str, &Array));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array));

    /// Non-trainable state that still affects the forward pass.
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &[f64])) {}

    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut [f64])) {}
}

pub fn param_count<M: Module>(m: &M) -> usize {
    let mut n = 0;
    m.visit(&mut |_, a| n += a.len());
    n
}

pub fn flatten_params<M: Module>(m: &M) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit(&mut |_, a| out.extend_from_slice(a.data()));
    out
}

pub fn load_flat_params<M: Module>(m: &mut M, flat: &[f64]) {
    let mut pos = 0;
    m.visit_mut(&mut |_, a| {
        let n = a.len();
        a.data_mut().copy_from_slice(&flat[pos..pos + n]);
        pos += n;
    });
    assert_eq!(pos, flat.len(), "flat parameter length mismatch");
}

/// Gradients of every bound parameter, flattened in visit order.
pub fn flatten_grads<M: Module>(tape: &Tape, vars: &M::Vars) -> Vec<f64> {
    M::var_list(vars)
        .into_iter()
        .flat_map(|v| tape.grad(v).into_data())
        .collect()
}

/// Named parameter segments `(name, start, len)` over the flattened vector.
pub fn param_segments<M: Module>(m: &M) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut pos = 0;
    m.visit(&mut |name, a| {
        out.push((name.to_string(), pos, a.len()));
        pos += a.len();
    });
    out
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Array::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Mlp,
    Linear,
}

/// Which predictor layers get spectral-norm regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SnrPlacement {
    None,
    Pre,
    Post,
    #[default]
    Both,
}

impl SnrPlacement {
    pub fn first(self) -> bool {
        matches!(self, SnrPlacement::Pre | SnrPlacement::Both)
    }

    pub fn last(self) -> bool {
        matches!(self, SnrPlacement::Post | SnrPlacement::Both)
    }
}

impl std::str::FromStr for SnrPlacement {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SnrPlacement::None),
            "pre" => Ok(SnrPlacement::Pre),
            "post" => Ok(SnrPlacement::Post),
            "both" => Ok(SnrPlacement::Both),
            other => Err(config_err!("unknown SNR placement {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub hidden: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub snr: SnrPlacement,
    pub revin_affine: bool,
    pub dim_multiplier: usize,
    pub recon_hidden: usize,
    pub series: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: Backbone::Mlp,
            hidden: 128,
            lookback: 96,
            horizon: 96,
            snr: SnrPlacement::Both,
            revin_affine: false,
            dim_multiplier: 4,
            recon_hidden: 128,
            series: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback < 2 {
            return Err(config_err!("lookback must be at least 2"));
        }
        if self.horizon == 0 || self.horizon % 16 != 0 {
            return Err(config_err!(
                "horizon {} must be a positive multiple of 16",
                self.horizon
            ));
        }
        if self.hidden == 0 || self.recon_hidden == 0 || self.series == 0 || self.dim_multiplier == 0 {
            return Err(config_err!("hidden sizes, series and dim_multiplier must be positive"));
        }
        // each conv layer unfolds into dim_multiplier / 2 features per horizon step
        if self.dim_multiplier % 2 != 0 {
            return Err(config_err!(
                "dim_multiplier {} must be even",
                self.dim_multiplier
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
