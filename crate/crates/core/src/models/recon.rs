//! Reconstruction network `g(·; φ)`: a conv-concat encoder followed by a point-wise FFN
//! with several parallel single-output heads.
//!
//! Conv layer `l` (1-based, kernel 3, stride 2, padding 1) maps `[B, C_{l-1}, H/2^{l-1}]`
//! to `[B, C_l, H/2^l]` with `C_l = 2^{l-1}·dim_multiplier`, so every layer holds
//! `dim_multiplier·H/2` values. Each output is transposed to time-major order and
//! unfolded to `[B, H, dim_multiplier/2]`; horizon step `j` then reads conv position
//! `floor(j / 2^l)` of layer `l`, whose receptive field is `2^{l+1} − 1` inputs wide.

use rand::Rng;

use super::{uniform_init, LinearLayer, LinearVars, ModelConfig, Module};
use crate::autodiff::{Array, Tape, Var};
use crate::error::{config_err, dim_err, Result};

pub const CONV_LAYERS: usize = 4;
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PADDING: usize = 1;

/// Conv position of layer `layer` (1-based) feeding horizon step `j`.
pub fn layer_source_position(j: usize, layer: usize) -> usize {
    j >> layer
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionNet {
    pub horizon: usize,
    pub dim_multiplier: usize,
    /// `(weight [C_out, C_in, 3], bias [C_out])` per conv layer.
    pub convs: Vec<(Array, Array)>,
    pub ffn_in: LinearLayer,
    /// One row per head: `[S, hidden]`.
    pub heads_w: Array,
    pub heads_b: Array,
    /// Diagnostic `d_feat → 1` readout producing the undecided series `ỹ′`.
    pub readout_w: Array,
    pub readout_b: Array,
}

#[derive(Clone, Debug)]
pub struct ReconVars {
    pub convs: Vec<(Var, Var)>,
    pub ffn_in: LinearVars,
    pub heads_w: Var,
    pub heads_b: Var,
    pub readout_w: Var,
    pub readout_b: Var,
}

#[derive(Clone, Debug)]
pub struct ReconOutput {
    /// Candidate reconstructions `ỹ`: `[B, S, H]`.
    pub series: Var,
    /// Concatenated conv features: `[B, H, d_feat]`.
    pub features: Var,
    /// Raw conv outputs per layer, `[B, C_l, T_l]`.
    pub conv_outputs: Vec<Var>,
    /// Undecided series `ỹ′`: `[B, H]`, computed from gradient-stopped features.
    pub intermediate: Var,
}

impl ReconstructionNet {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let dm = cfg.dim_multiplier;
        let mut convs = Vec::with_capacity(CONV_LAYERS);
        let mut c_in = 1;
        for l in 0..CONV_LAYERS {
            let c_out = dm << l;
            convs.push((
                uniform_init(&[c_out, c_in, KERNEL], c_in * KERNEL, rng),
                Array::zeros(&[c_out]),
            ));
            c_in = c_out;
        }
        let d_feat = CONV_LAYERS * dm / 2;
        let ffn_in = LinearLayer::new(d_feat, cfg.recon_hidden, false, rng);
        Ok(ReconstructionNet {
            horizon: cfg.horizon,
            dim_multiplier: dm,
            convs,
            ffn_in,
            heads_w: uniform_init(&[cfg.series, cfg.recon_hidden], cfg.recon_hidden, rng),
            heads_b: Array::zeros(&[cfg.series]),
            readout_w: uniform_init(&[1, d_feat], d_feat, rng),
            readout_b: Array::zeros(&[1]),
        })
    }

    /// A network whose every head reproduces its input exactly: conv layer 1 copies
    /// even/odd samples into the first feature slot, and the FFN passes it through as
    /// `relu(f) − relu(−f)`. Needs `recon_hidden ≥ 2`.
    pub fn identity(cfg: &ModelConfig) -> Result<Self> {
        if cfg.recon_hidden < 2 {
            return Err(config_err!("identity reconstruction needs recon_hidden >= 2"));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(cfg, &mut rng)?;
        let dm = net.dim_multiplier;
        for (w, b) in &mut net.convs {
            *w = Array::zeros(w.shape());
            *b = Array::zeros(b.shape());
        }
        // unfolded feature 0 of step j is channel 0 (j even) or channel dm/2 (j odd) at position j/2
        let w1 = net.convs[0].0.data_mut();
        w1[1] = 1.0; // channel 0, centre tap -> y[2t]
        w1[(dm / 2) * KERNEL + 2] = 1.0; // channel dm/2, right tap -> y[2t+1]
        let hidden = net.ffn_in.out_dim();
        let d_feat = net.ffn_in.in_dim();
        let mut fw = Array::zeros(&[hidden, d_feat]);
        fw.data_mut()[0] = 1.0;
        fw.data_mut()[d_feat] = -1.0;
        net.ffn_in.w = fw;
        net.ffn_in.b = Array::zeros(&[hidden]);
        let series = net.heads_w.shape()[0];
        let mut hw = Array::zeros(&[series, hidden]);
        for s in 0..series {
            hw.data_mut()[s * hidden] = 1.0;
            hw.data_mut()[s * hidden + 1] = -1.0;
        }
        net.heads_w = hw;
        net.heads_b = Array::zeros(&[series]);
        let mut rw = Array::zeros(&[1, d_feat]);
        rw.data_mut()[0] = 1.0;
        net.readout_w = rw;
        net.readout_b = Array::zeros(&[1]);
        Ok(net)
    }

    pub fn series(&self) -> usize {
        self.heads_w.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        CONV_LAYERS * self.dim_multiplier / 2
    }

    /// Conv-concat encoder: `y: [B, H]` → `([B, H, d_feat], per-layer conv outputs)`.
    pub fn encode(&self, tape: &mut Tape, vars: &ReconVars, y: Var) -> Result<(Var, Vec<Var>)> {
        let shape = tape.value(y).shape().to_vec();
        let [batch, h] = shape[..] else {
            return Err(dim_err!("reconstruction expects [B, H], got {:?}", shape));
        };
        if h != self.horizon {
            return Err(dim_err!("expected horizon {}, got {}", self.horizon, h));
        }
        if h % (1 << CONV_LAYERS) != 0 {
            return Err(config_err!("horizon {} is not divisible by 16", h));
        }
        let per_step = self.dim_multiplier / 2;
        let mut x = tape.reshape(y, &[batch, 1, h])?;
        let mut unfolded = Vec::with_capacity(CONV_LAYERS);
        let mut raw = Vec::with_capacity(CONV_LAYERS);
        for &(w, b) in &vars.convs {
            x = tape.conv1d(x, w, b, STRIDE, PADDING)?;
            raw.push(x);
            let time_major = tape.permute(x, &[0, 2, 1])?;
            unfolded.push(tape.reshape(time_major, &[batch, h, per_step])?);
        }
        let features = tape.concat(&unfolded, 2)?;
        Ok((features, raw))
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ReconVars, y: Var) -> Result<ReconOutput> {
        let (features, conv_outputs) = self.encode(tape, vars, y)?;
        let (batch, h, d) = (
            tape.value(features).shape()[0],
            self.horizon,
            self.feature_dim(),
        );
        let points = tape.reshape(features, &[batch * h, d])?;
        let hidden = self.ffn_in.forward(tape, &vars.ffn_in, points)?;
        let act = tape.relu(hidden);
        let heads = tape.linear(act, vars.heads_w, vars.heads_b)?;
        let s = self.series();
        let grid = tape.reshape(heads, &[batch, h, s])?;
        let series = tape.permute(grid, &[0, 2, 1])?;

        let frozen = tape.stop_gradient(points);
        let readout = tape.linear(frozen, vars.readout_w, vars.readout_b)?;
        let intermediate = tape.reshape(readout, &[batch, h])?;
        Ok(ReconOutput {
            series,
            features,
            conv_outputs,
            intermediate,
        })
    }

    /// Reconstructions `[B, S, H]` and undecided series `[B, H]` without gradients.
    pub fn reconstruct(&self, y: &Array) -> Result<(Array, Array)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let yv = tape.constant(y.clone());
        let out = self.forward(&mut tape, &vars, yv)?;
        Ok((tape.value(out.series).clone(), tape.value(out.intermediate).clone()))
    }
}

impl Module for ReconstructionNet {
    type Vars = ReconVars;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> ReconVars {
        let leaf = |t: &mut Tape, a: &Array| {
            if trainable {
                t.var(a.clone())
            } else {
                t.constant(a.clone())
            }
        };
        let convs = self
            .convs
            .iter()
            .map(|(w, b)| (leaf(tape, w), leaf(tape, b)))
            .collect();
        let ffn_in = self.ffn_in.bind(tape, trainable);
        ReconVars {
            convs,
            ffn_in,
            heads_w: leaf(tape, &self.heads_w),
            heads_b: leaf(tape, &self.heads_b),
            readout_w: leaf(tape, &self.readout_w),
            readout_b: leaf(tape, &self.readout_b),
        }
    }

    fn var_list(vars: &ReconVars) -> Vec<Var> {
        let mut v: Vec<Var> = vars.convs.iter().flat_map(|(w, b)| [*w, *b]).collect();
        v.extend(LinearLayer::var_list(&vars.ffn_in));
        v.extend([vars.heads_w, vars.heads_b, vars.readout_w, vars.readout_b]);
        v
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        for (i, (w, b)) in self.convs.iter().enumerate() {
            f(&format!("conv{i}.w"), w);
            f(&format!("conv{i}.b"), b);
        }
        self.ffn_in.visit(&mut |n, a| f(&format!("ffn_in.{n}"), a));
        f("heads.w", &self.heads_w);
        f("heads.b", &self.heads_b);
        f("readout.w", &self.readout_w);
        f("readout.b", &self.readout_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        for (i, (w, b)) in self.convs.iter_mut().enumerate() {
            f(&format!("conv{i}.w"), w);
            f(&format!("conv{i}.b"), b);
        }
        self.ffn_in.visit_mut(&mut |n, a| f(&format!("ffn_in.{n}"), a));
        f("heads.w", &mut self.heads_w);
        f("heads.b", &mut self.heads_b);
        f("readout.w", &mut self.readout_w);
        f("readout.b", &mut self.readout_b);
    }
}
