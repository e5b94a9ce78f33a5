use rand::Rng;

use super::{Backbone, LinearLayer, LinearVars, ModelConfig, Module, RevIn, RevInVars};
use crate::autodiff::{Array, Tape, Var};
use crate::error::{dim_err, Result};

/// Channel-independent forecaster `f(x; θ)`: RevIN around either a single linear
/// map or a two-layer ReLU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub backbone: Backbone,
    pub lookback: usize,
    pub horizon: usize,
    pub layers: Vec<LinearLayer>,
    pub revin: RevIn,
}

#[derive(Clone, Debug)]
pub struct PredictorVars {
    pub layers: Vec<LinearVars>,
    pub revin: RevInVars,
}

impl Predictor {
    pub fn new(cfg: &ModelConfig, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = match cfg.backbone {
            Backbone::Mlp => vec![
                LinearLayer::new(cfg.lookback, cfg.hidden, cfg.snr.first(), rng),
                LinearLayer::new(cfg.hidden, cfg.horizon, cfg.snr.last(), rng),
            ],
            Backbone::Linear => vec![LinearLayer::new(
                cfg.lookback,
                cfg.horizon,
                cfg.snr.first() || cfg.snr.last(),
                rng,
            )],
        };
        Ok(Predictor {
            backbone: cfg.backbone,
            lookback: cfg.lookback,
            horizon: cfg.horizon,
            layers,
            revin: RevIn::new(cfg.revin_affine.then_some(channels)),
        })
    }

    /// `x: [B, L]` → `ŷ: [B, H]`.
    pub fn forward(&self, tape: &mut Tape, vars: &PredictorVars, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.lookback {
            return Err(dim_err!(
                "predictor expects [B, {}], got {:?}",
                self.lookback,
                shape
            ));
        }
        let (mut h, stats) = self.revin.normalize(tape, &vars.revin, x)?;
        let last = self.layers.len() - 1;
        for (i, (layer, lv)) in self.layers.iter().zip(&vars.layers).enumerate() {
            h = layer.forward(tape, lv, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        self.revin.denormalize(tape, &vars.revin, h, &stats)
    }

    /// Inference without recording gradients.
    pub fn predict(&self, x: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Layers are independent, so their power iterations run concurrently.
    pub fn refresh_spectral_state(&mut self) {
        use rayon::prelude::*;
        self.layers.par_iter_mut().for_each(LinearLayer::refresh_spectral_state);
    }

    /// Component segments of the flattened parameter vector: `embedding` is the first
    /// linear layer, `projector` the last, `hidden` anything between them.
    pub fn component_segments(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut pos = 0;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let len = super::param_count(layer);
            let name = if i == 0 {
                "embedding"
            } else if i == n - 1 {
                "projector"
            } else {
                "hidden"
            };
            if n == 1 {
                out.push(("embedding".to_string(), pos, len));
                out.push(("projector".to_string(), pos, len));
            } else {
                out.push((name.to_string(), pos, len));
            }
            pos += len;
        }
        out
    }
}

impl Module for Predictor {
    type Vars = PredictorVars;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> PredictorVars {
        PredictorVars {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            revin: self.revin.bind(tape, trainable),
        }
    }

    fn var_list(vars: &PredictorVars) -> Vec<Var> {
        let mut v: Vec<Var> = vars.layers.iter().flat_map(LinearLayer::var_list).collect();
        v.extend(RevIn::var_list(&vars.revin));
        v
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&mut |n, a| f(&format!("layer{i}.{n}"), a));
        }
        self.revin.visit(&mut |n, a| f(&format!("revin.{n}"), a));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&mut |n, a| f(&format!("layer{i}.{n}"), a));
        }
        self.revin.visit_mut(&mut |n, a| f(&format!("revin.{n}"), a));
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_buffers(&mut |n, a| f(&format!("layer{i}.{n}"), a));
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_buffers_mut(&mut |n, a| f(&format!("layer{i}.{n}"), a));
        }
    }
}
