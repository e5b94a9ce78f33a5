//! Inspection of trained model pairs: mask snapshots, loss breakdowns per split,
//! reconstruction-correction rates per noise regime, sharpness of the masked
//! supervised terms, and cross-channel distribution alignment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::data::WindowDataset;
use crate::error::{contract_err, Result};
use crate::models::{Predictor, RevIn, ReconstructionNet};
use crate::scam_loss::{self, LossBreakdown, MaskSet};
use crate::sharpness::{kl_alignment, ChannelHistogram, HvpContext, PowerResult, HISTOGRAM_BINS};

const CHUNK: usize = 256;

/// Predictions, reconstructions and masks for one batch of windows.
#[derive(Clone, Debug)]
pub struct MaskSnapshot {
    /// `[R, H]`
    pub target: Array,
    /// `[R, H]`
    pub pred: Array,
    /// `[R, S, H]`
    pub recon: Array,
    /// `[R, H]`
    pub intermediate: Array,
    /// Over `[R, S, H]`.
    pub masks: MaskSet,
}

impl MaskSnapshot {
    pub fn series(&self) -> usize {
        self.recon.shape()[1]
    }

    pub fn tiled_target(&self) -> Result<Array> {
        scam_loss::tile_series_array(&self.target, self.series())
    }

    pub fn tiled_pred(&self) -> Result<Array> {
        scam_loss::tile_series_array(&self.pred, self.series())
    }

    pub fn breakdown(&self) -> Result<LossBreakdown> {
        scam_loss::loss_breakdown(&self.recon, &self.tiled_pred()?, &self.tiled_target()?, &self.masks)
    }

    /// Per `[R, H]` point, the fraction of candidates with `M = 1`.
    pub fn mask_weights(&self) -> Array {
        let (s, h) = (self.series(), self.target.shape()[1]);
        let rows = self.target.shape()[0];
        let mut w = vec![0.0; rows * h];
        for r in 0..rows {
            for k in 0..s {
                for j in 0..h {
                    w[r * h + j] += self.masks.mask.data()[(r * s + k) * h + j] / s as f64;
                }
            }
        }
        Array::new(vec![rows, h], w).expect("mask weights")
    }
}

pub fn mask_snapshot(f: &Predictor, g: &ReconstructionNet, x: &Array, y: &Array) -> Result<MaskSnapshot> {
    let pred = f.predict(x)?;
    let (recon, intermediate) = g.reconstruct(y)?;
    let s = g.series();
    let masks = scam_loss::compute_masks(
        &recon,
        &scam_loss::tile_series_array(&pred, s)?,
        &scam_loss::tile_series_array(y, s)?,
    )?;
    Ok(MaskSnapshot {
        target: y.clone(),
        pred,
        recon,
        intermediate,
        masks,
    })
}

/// Point-weighted breakdown over every window of a split.
pub fn breakdown_over_split(f: &Predictor, g: &ReconstructionNet, data: &WindowDataset) -> Result<LossBreakdown> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = data.batch(chunk);
        let snap = mask_snapshot(f, g, &x, &y)?;
        parts.push((snap.breakdown()?, snap.recon.len()));
    }
    Ok(LossBreakdown::weighted_mean(&parts))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRate {
    pub regime: usize,
    /// Points with `M = 1` and `M_lt = 0`.
    pub corrected: usize,
    pub total: usize,
}

impl RegimeRate {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.corrected as f64 / self.total as f64
        }
    }
}

/// Reconstruction-corrected point counts grouped by the regime of each target's
/// absolute time index, over every window, channel and candidate of `data`.
pub fn correction_rates_by_regime(
    f: &Predictor,
    g: &ReconstructionNet,
    data: &WindowDataset,
    regimes: usize,
    regime_of: impl Fn(usize) -> usize,
) -> Result<Vec<RegimeRate>> {
    let mut out: Vec<RegimeRate> = (0..regimes)
        .map(|regime| RegimeRate { regime, corrected: 0, total: 0 })
        .collect();
    let (n, h, s) = (data.channels(), data.horizon(), g.series());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = data.batch(chunk);
        let snap = mask_snapshot(f, g, &x, &y)?;
        for (p, (mk, lt)) in snap.masks.mask.data().iter().zip(snap.masks.mask_lt.data()).enumerate() {
            let (row, j) = (p / (s * h), p % h);
            let t = data.future_start(chunk[row / n]) + j;
            let r = regime_of(t);
            let slot = out
                .get_mut(r)
                .ok_or_else(|| contract_err!("regime {r} out of range (have {regimes})"))?;
            slot.total += 1;
            if *mk == 1.0 && *lt == 0.0 {
                slot.corrected += 1;
            }
        }
    }
    Ok(out)
}

/// Sharpness of the supervised term split by the mask, over a fixed batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedSharpness {
    /// λ_max of `mean(|y − ŷ| ⊙ M)`.
    pub inside: PowerResult,
    /// λ_max of `mean(|y − ŷ| ⊙ M̄)`.
    pub outside: PowerResult,
    pub mask_fraction: f64,
}

/// Masks are taken from the converged `(f, g)` on this batch and then held fixed
/// while the predictor parameters are perturbed.
pub fn masked_target_sharpness(
    f: &Predictor,
    g: &ReconstructionNet,
    data: &WindowDataset,
    windows: &[usize],
    seed: u64,
) -> Result<MaskedSharpness> {
    let (x, y) = data.batch(windows);
    let snap = mask_snapshot(f, g, &x, &y)?;
    let inside_w = snap.mask_weights();
    let outside_w = inside_w.map(|v| 1.0 - v);
    let inside = crate::sharpness::lambda_max(&HvpContext::for_predictor(f, x.clone(), y.clone(), inside_w.clone()), seed)?;
    let outside = crate::sharpness::lambda_max(&HvpContext::for_predictor(f, x, y, outside_w), seed)?;
    Ok(MaskedSharpness {
        inside,
        outside,
        mask_fraction: inside_w.mean(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub channel_a: usize,
    pub channel_b: usize,
    /// Between RevIN-normalized labels `y`.
    pub raw: f64,
    /// Between the undecided series `ỹ′`.
    pub intermediate: f64,
    /// Between the reconstructions `ỹ` (all candidates pooled).
    pub reconstructed: f64,
}

/// Channel pairs `(c, c+3)`, or every pair when there are fewer than four channels.
pub fn alignment_pairs(channels: usize) -> Vec<(usize, usize)> {
    if channels >= 4 {
        (0..channels - 3).map(|c| (c, c + 3)).collect()
    } else {
        (0..channels)
            .flat_map(|a| (a + 1..channels).map(move |b| (a, b)))
            .collect()
    }
}

/// Symmetrized KL between channel pairs of RevIN-normalized `y`, `ỹ′` and `ỹ`
/// over the given windows.
pub fn kl_alignment_table(g: &ReconstructionNet, data: &WindowDataset, windows: &[usize]) -> Result<Vec<KlRow>> {
    let n = data.channels();
    let revin = RevIn::new(None);
    let normalize = |a: &Array| -> Result<Array> {
        let width = *a.shape().last().expect("non-scalar");
        let rows = a.len() / width;
        let flat = a.clone().reshape(&[rows, width])?;
        let st = revin.stats(&flat)?;
        let mut data = Vec::with_capacity(a.len());
        for (r, row) in flat.data().chunks(width).enumerate() {
            data.extend(row.iter().map(|v| (v - st.mean[r]) / st.std[r]));
        }
        Array::new(a.shape().to_vec(), data)
    };
    // per channel: pooled normalized values of y, ỹ′ and ỹ
    let mut pools = vec![[Vec::new(), Vec::new(), Vec::new()]; n];
    for chunk in windows.chunks(CHUNK) {
        let (_, y) = data.batch(chunk);
        let (recon, inter) = g.reconstruct(&y)?;
        let (yn, inn, rn) = (normalize(&y)?, normalize(&inter)?, normalize(&recon)?);
        let h = data.horizon();
        let per_row = recon.len() / y.shape()[0];
        for row in 0..y.shape()[0] {
            let c = row % n;
            pools[c][0].extend_from_slice(&yn.data()[row * h..(row + 1) * h]);
            pools[c][1].extend_from_slice(&inn.data()[row * h..(row + 1) * h]);
            pools[c][2].extend_from_slice(&rn.data()[row * per_row..(row + 1) * per_row]);
        }
    }
    alignment_pairs(n)
        .into_iter()
        .map(|(a, b)| {
            let kl = |k: usize| -> Result<f64> {
                let h = ChannelHistogram::shared(&[&pools[a][k], &pools[b][k]], HISTOGRAM_BINS)?;
                kl_alignment(&h[0], &h[1])
            };
            Ok(KlRow {
                channel_a: a,
                channel_b: b,
                raw: kl(0)?,
                intermediate: kl(1)?,
                reconstructed: kl(2)?,
            })
        })
        .collect()
}

/// One mask dump per (window, channel) for the first candidate, with absolute time
/// stamps. Returns the written paths.
pub fn dump_masks(
    dir: &Path,
    f: &Predictor,
    g: &ReconstructionNet,
    data: &WindowDataset,
    windows: &[usize],
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (x, y) = data.batch(windows);
    let snap = mask_snapshot(f, g, &x, &y)?;
    let (n, h, s) = (data.channels(), data.horizon(), g.series());
    let mut paths = Vec::new();
    for (row, &w) in windows.iter().flat_map(|w| std::iter::repeat_n(w, n)).enumerate() {
        let c = row % n;
        let pick = |a: &Array, stride: usize| Array::from_vec(a.data()[row * stride..row * stride + h].to_vec());
        let masks = MaskSet {
            m: pick(&snap.masks.m, s * h),
            mask: pick(&snap.masks.mask, s * h),
            mask_lt: pick(&snap.masks.mask_lt, s * h),
        };
        let times: Vec<usize> = (0..h).map(|j| data.future_start(w) + j).collect();
        let path = dir.join(format!("window{w}_channel{c}.csv"));
        scam_loss::write_mask_dump(
            &path,
            Some(&times),
            &pick(&snap.target, h),
            &pick(&snap.pred, h),
            &pick(&snap.recon, s * h),
            &masks,
        )?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, prepare, SplitSpec, SyntheticConfig};
    use crate::models::ModelConfig;
    use crate::training::init_models;

    fn setup() -> (crate::data::PreparedData, Predictor, ReconstructionNet) {
        let series = make_synthetic(&SyntheticConfig { length: 500, ..SyntheticConfig::default() }).unwrap();
        let data = prepare(&series, &SplitSpec::ett(), 32, 16, 1).unwrap();
        let cfg = ModelConfig { lookback: 32, horizon: 16, hidden: 8, recon_hidden: 8, series: 3, ..ModelConfig::default() };
        let (f, g) = init_models(&cfg, 1, 0).unwrap();
        (data, f, g)
    }

    #[test]
    fn split_breakdown_matches_co_objective() {
        let (data, f, g) = setup();
        let b = breakdown_over_split(&f, &g, &data.val).unwrap();
        let idx: Vec<usize> = (0..data.val.len()).collect();
        let (x, y) = data.val.batch(&idx);
        let snap = mask_snapshot(&f, &g, &x, &y).unwrap();
        let co = scam_loss::co_objective_value(&snap.recon, &snap.tiled_pred().unwrap(), &snap.tiled_target().unwrap()).unwrap();
        assert!((b.component_sum() - co).abs() < 1e-10);
    }

    #[test]
    fn regime_rates_cover_every_point() {
        let (data, f, g) = setup();
        let cfg = SyntheticConfig::default();
        let rates = correction_rates_by_regime(&f, &g, &data.train, 2, |t| cfg.regime(t)).unwrap();
        let total: usize = rates.iter().map(|r| r.total).sum();
        assert_eq!(total, data.train.len() * 16 * 3);
        assert!(rates.iter().all(|r| r.total > 0 && r.rate() <= 1.0));
        assert!(correction_rates_by_regime(&f, &g, &data.train, 1, |t| cfg.regime(t)).is_err());
    }

    #[test]
    fn mask_weights_average_candidates() {
        let (data, f, g) = setup();
        let (x, y) = data.train.batch(&[0, 1]);
        let snap = mask_snapshot(&f, &g, &x, &y).unwrap();
        let w = snap.mask_weights();
        assert_eq!(w.shape(), &[2, 16]);
        assert!((w.mean() - snap.masks.active_fraction()).abs() < 1e-12);
    }

    #[test]
    fn masked_sharpness_runs() {
        let (data, f, g) = setup();
        let r = masked_target_sharpness(&f, &g, &data.val, &[0, 3, 6, 9], 0).unwrap();
        assert!(r.inside.value.is_finite() && r.outside.value.is_finite());
        assert!((0.0..=1.0).contains(&r.mask_fraction));
    }

    #[test]
    fn kl_table_pairs() {
        assert_eq!(alignment_pairs(7), vec![(0, 3), (1, 4), (2, 5), (3, 6)]);
        assert_eq!(alignment_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert!(alignment_pairs(1).is_empty());
        let (data, _, g) = setup();
        assert!(kl_alignment_table(&g, &data.val, &[0, 1]).unwrap().is_empty());
    }

    #[test]
    fn mask_dumps_are_written_per_window_and_channel() {
        let (data, f, g) = setup();
        let dir = tempfile::tempdir().unwrap();
        let paths = dump_masks(dir.path(), &f, &g, &data.test, &[0, 4]).unwrap();
        assert_eq!(paths.len(), 2);
        let text = std::fs::read_to_string(&paths[1]).unwrap();
        assert_eq!(text.lines().count(), 17);
        let first_t: usize = text.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
        assert_eq!(first_t, data.test.future_start(4));
    }
}
