//! Adaptive-mask losses.
//!
//! With prediction `ŷ`, target `y` and a reconstruction `ỹ`, write `A = ỹ − ŷ` and
//! `B = ỹ − y`. Pointwise,
//!
//! ```text
//! |A| + |B| = |y − ŷ| + (|A| + |B| − |A − B|)
//!           = |y − ŷ| + 2·min(|A|, |B|)·[AB > 0]
//! ```
//!
//! so the co-objective `|ỹ − y| + |ỹ − ŷ|` splits into a supervised part and a
//! correction that is active only where `ỹ` lies outside the interval between `ŷ`
//! and `y`. The masked SCAM loss drops the supervised term exactly there. Every loss
//! is ℓ1 pointwise and mean-aggregated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Var};
use crate::error::{contract_err, dim_err, Result};

/// Binary masks derived from a `(ỹ, ŷ, y)` snapshot. They are plain arrays, so they
/// enter any loss as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    /// `m = (ỹ − ŷ)(ỹ − y)`.
    pub m: Array,
    /// `[m > 0]`.
    pub mask: Array,
    /// `[|ỹ − ŷ| < |ỹ − y|]`.
    pub mask_lt: Array,
}

impl MaskSet {
    /// Fraction of points with `M = 1`.
    pub fn active_fraction(&self) -> f64 {
        self.mask.mean()
    }
}

fn check_same_shape(arrays: &[&Array]) -> Result<()> {
    let first = arrays[0].shape();
    for a in &arrays[1..] {
        if a.shape() != first {
            return Err(dim_err!("shape mismatch: {:?} vs {:?}", first, a.shape()));
        }
    }
    Ok(())
}

pub fn compute_masks(recon: &Array, pred: &Array, target: &Array) -> Result<MaskSet> {
    check_same_shape(&[recon, pred, target])?;
    let finite = |a: &Array| a.data().iter().all(|v| !v.is_nan());
    if !(finite(recon) && finite(pred) && finite(target)) {
        return Err(contract_err!("NaN in mask inputs"));
    }
    let n = recon.len();
    let (mut m, mut mask, mut mask_lt) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for ((&yt, &yh), &y) in recon.data().iter().zip(pred.data()).zip(target.data()) {
        let (a, b) = (yt - yh, yt - y);
        let mi = a * b;
        m.push(mi);
        mask.push(if mi > 0.0 { 1.0 } else { 0.0 });
        mask_lt.push(if a.abs() < b.abs() { 1.0 } else { 0.0 });
    }
    let shape = recon.shape().to_vec();
    Ok(MaskSet {
        m: Array::new(shape.clone(), m)?,
        mask: Array::new(shape.clone(), mask)?,
        mask_lt: Array::new(shape, mask_lt)?,
    })
}

/// Repeats `[B, H]` (array) along a new series axis: `[B, S, H]`.
pub fn tile_series_array(x: &Array, series: usize) -> Result<Array> {
    let [b, h] = x.shape() else {
        return Err(dim_err!("expected [B, H], got {:?}", x.shape()));
    };
    let mut data = Vec::with_capacity(x.len() * series);
    for row in x.data().chunks(*h) {
        for _ in 0..series {
            data.extend_from_slice(row);
        }
    }
    Array::new(vec![*b, series, *h], data)
}

/// Tape counterpart of [`tile_series_array`]; gradients of the copies are summed.
pub fn tile_series(tape: &mut Tape, x: Var, series: usize) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let [b, h] = shape[..] else {
        return Err(dim_err!("expected [B, H], got {:?}", shape));
    };
    let col = tape.reshape(x, &[b, 1, h])?;
    tape.concat(&vec![col; series], 1)
}

fn abs_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    Ok(tape.abs(d))
}

/// Mean of `|ỹ − y| + |ỹ − ŷ|`.
pub fn co_objective_loss(tape: &mut Tape, recon: Var, pred: Var, target: Var) -> Result<Var> {
    let rec = abs_diff(tape, recon, target)?;
    let prd = abs_diff(tape, recon, pred)?;
    let both = tape.add(rec, prd)?;
    Ok(tape.mean(both))
}

/// Mean of `|y − ŷ|·M̄ + 2(|ỹ − ŷ|·M_lt + |ỹ − y|·M̄_lt)·M` with the masks held fixed.
pub fn scam_masked_loss(
    tape: &mut Tape,
    recon: Var,
    pred: Var,
    target: Var,
    masks: &MaskSet,
) -> Result<Var> {
    let weights = |f: &dyn Fn(f64, f64) -> f64| masks.mask.zip_map(&masks.mask_lt, f);
    let outside = tape.constant(weights(&|m, _| 1.0 - m)?);
    let pred_side = tape.constant(weights(&|m, lt| 2.0 * lt * m)?);
    let rec_side = tape.constant(weights(&|m, lt| 2.0 * (1.0 - lt) * m)?);

    let sup = abs_diff(tape, target, pred)?;
    let sup = tape.mul(sup, outside)?;
    let prd = abs_diff(tape, recon, pred)?;
    let prd = tape.mul(prd, pred_side)?;
    let rec = abs_diff(tape, recon, target)?;
    let rec = tape.mul(rec, rec_side)?;
    let partial = tape.add(sup, prd)?;
    let total = tape.add(partial, rec)?;
    Ok(tape.mean(total))
}

/// Plain supervised ℓ1: mean `|y − ŷ|`.
pub fn supervised_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = abs_diff(tape, target, pred)?;
    Ok(tape.mean(d))
}

/// Array-level co-objective value.
pub fn co_objective_value(recon: &Array, pred: &Array, target: &Array) -> Result<f64> {
    check_same_shape(&[recon, pred, target])?;
    let total: f64 = recon
        .data()
        .iter()
        .zip(pred.data())
        .zip(target.data())
        .map(|((yt, yh), y)| (yt - y).abs() + (yt - yh).abs())
        .sum();
    Ok(total / recon.len() as f64)
}

/// Array-level masked loss value.
pub fn scam_masked_value(recon: &Array, pred: &Array, target: &Array, masks: &MaskSet) -> Result<f64> {
    check_same_shape(&[recon, pred, target, &masks.mask])?;
    let mut total = 0.0;
    for i in 0..recon.len() {
        let (yt, yh, y) = (recon.data()[i], pred.data()[i], target.data()[i]);
        let (mk, lt) = (masks.mask.data()[i], masks.mask_lt.data()[i]);
        total += (y - yh).abs() * (1.0 - mk)
            + 2.0 * ((yt - yh).abs() * lt + (yt - y).abs() * (1.0 - lt)) * mk;
    }
    Ok(total / recon.len() as f64)
}

/// Largest pointwise discrepancy along the chain
/// `|A| + |B|  =  |A−B| + (|A| + |B| − |A−B|)  =  |A−B| + 2·min(|A|,|B|)·[AB > 0]
///  =  |y−ŷ| + 2(|A|·M_lt + |B|·M̄_lt)·M`.
pub fn loss_identity_check(recon: &Array, pred: &Array, target: &Array) -> Result<f64> {
    let masks = compute_masks(recon, pred, target)?;
    let mut worst: f64 = 0.0;
    for i in 0..recon.len() {
        let (yt, yh, y) = (recon.data()[i], pred.data()[i], target.data()[i]);
        let (a, b) = (yt - yh, yt - y);
        let lhs = a.abs() + b.abs();
        let split = (a - b).abs() + (a.abs() + b.abs() - (a - b).abs());
        let min_form = (y - yh).abs() + if a * b > 0.0 { 2.0 * a.abs().min(b.abs()) } else { 0.0 };
        let (mk, lt) = (masks.mask.data()[i], masks.mask_lt.data()[i]);
        let mask_form = (y - yh).abs() + 2.0 * (a.abs() * lt + b.abs() * (1.0 - lt)) * mk;
        for rhs in [split, min_form, mask_form] {
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

/// The four masked components of the co-objective and the three plain ℓ1 totals,
/// all as means over points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_corrected: f64,
    pub pred_corrected: f64,
    pub sup_in_mask: f64,
    pub sup_out_mask: f64,
    /// mean `|ỹ − y|`
    pub l_rec: f64,
    /// mean `|ỹ − ŷ|`
    pub l_pred: f64,
    /// mean `|y − ŷ|`
    pub l_target: f64,
}

impl LossBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.rec_corrected + self.pred_corrected + self.sup_in_mask + self.sup_out_mask
    }

    /// Point-weighted mean of several breakdowns, e.g. over the batches of a split.
    pub fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
        let total: usize = parts.iter().map(|(_, n)| n).sum();
        let mut out = LossBreakdown::default();
        if total == 0 {
            return out;
        }
        for (p, n) in parts {
            let w = *n as f64 / total as f64;
            out.rec_corrected += w * p.rec_corrected;
            out.pred_corrected += w * p.pred_corrected;
            out.sup_in_mask += w * p.sup_in_mask;
            out.sup_out_mask += w * p.sup_out_mask;
            out.l_rec += w * p.l_rec;
            out.l_pred += w * p.l_pred;
            out.l_target += w * p.l_target;
        }
        out
    }
}

pub fn loss_breakdown(recon: &Array, pred: &Array, target: &Array, masks: &MaskSet) -> Result<LossBreakdown> {
    check_same_shape(&[recon, pred, target, &masks.mask, &masks.mask_lt])?;
    let mut b = LossBreakdown::default();
    for i in 0..recon.len() {
        let (yt, yh, y) = (recon.data()[i], pred.data()[i], target.data()[i]);
        let (mk, lt) = (masks.mask.data()[i], masks.mask_lt.data()[i]);
        let (rec, prd, sup) = ((yt - y).abs(), (yt - yh).abs(), (y - yh).abs());
        b.rec_corrected += 2.0 * rec * (1.0 - lt) * mk;
        b.pred_corrected += 2.0 * prd * lt * mk;
        b.sup_in_mask += sup * mk;
        b.sup_out_mask += sup * (1.0 - mk);
        b.l_rec += rec;
        b.l_pred += prd;
        b.l_target += sup;
    }
    let n = recon.len() as f64;
    for v in [
        &mut b.rec_corrected,
        &mut b.pred_corrected,
        &mut b.sup_in_mask,
        &mut b.sup_out_mask,
        &mut b.l_rec,
        &mut b.l_pred,
        &mut b.l_target,
    ] {
        *v /= n;
    }
    Ok(b)
}

/// Mean of the per-candidate losses.
pub fn aggregate_over_series(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(contract_err!("need at least one reconstruction candidate"));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Writes one row per point with columns `t, y, y_hat, y_tilde, m, M, M_lt`.
/// All arrays are flattened in row-major order; `t` comes from `times` when given,
/// otherwise it is the flat index.
pub fn write_mask_dump(
    path: &Path,
    times: Option<&[usize]>,
    target: &Array,
    pred: &Array,
    recon: &Array,
    masks: &MaskSet,
) -> Result<()> {
    check_same_shape(&[target, pred, recon, &masks.m])?;
    if times.is_some_and(|t| t.len() != target.len()) {
        return Err(dim_err!("{} time stamps for {} points", times.map_or(0, <[usize]>::len), target.len()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "y", "y_hat", "y_tilde", "m", "M", "M_lt"])?;
    for i in 0..target.len() {
        w.write_record([
            times.map_or(i, |t| t[i]).to_string(),
            target.data()[i].to_string(),
            pred.data()[i].to_string(),
            recon.data()[i].to_string(),
            masks.m.data()[i].to_string(),
            masks.mask.data()[i].to_string(),
            masks.mask_lt.data()[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
