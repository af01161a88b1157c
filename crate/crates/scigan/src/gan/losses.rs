//! Tape-level loss builders shared by the adversarial stages.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

/// `-(1/B) sum_i sum_c [m ln p + (1-m) ln(1-p)]`: cross-entropy of a
/// probability table against a 0/1 mask, averaged over the batch.
pub fn masked_bce(tape: &mut Tape, probs: Var, mask: &Tensor2) -> Result<Var> {
    let shape = tape.value(probs).shape();
    if mask.shape() != shape {
        return Err(Error::dimension(
            "masked_bce",
            format!("probs {:?} mask {:?}", shape, mask.shape()),
        ));
    }
    let batch = shape.0;
    let term = bce_table(tape, probs, mask)?;
    let total = tape.sum_all(term);
    Ok(tape.scale(total, -1.0 / batch as f64))
}

/// Same cross-entropy but only over rows where `gate` is 1, normalized by
/// the gated count. `None` when the gate selects nothing.
pub fn masked_bce_gated(
    tape: &mut Tape,
    probs: Var,
    mask: &Tensor2,
    gate: &Tensor2,
) -> Result<Option<Var>> {
    let shape = tape.value(probs).shape();
    if mask.shape() != shape {
        return Err(Error::dimension(
            "masked_bce_gated",
            format!("probs {:?} mask {:?}", shape, mask.shape()),
        ));
    }
    if gate.shape() != (shape.0, 1) {
        return Err(Error::dimension(
            "masked_bce_gated",
            format!("gate {:?} for batch {}", gate.shape(), shape.0),
        ));
    }
    let count: f64 = gate.as_slice().iter().sum();
    if count == 0.0 {
        return Ok(None);
    }
    let term = bce_table(tape, probs, mask)?;
    let gate_var = tape.constant(gate.clone());
    let gated = tape.mul_col(term, gate_var)?;
    let total = tape.sum_all(gated);
    Ok(Some(tape.scale(total, -1.0 / count)))
}

fn bce_table(tape: &mut Tape, probs: Var, mask: &Tensor2) -> Result<Var> {
    let shape = tape.value(probs).shape();
    let ones = tape.constant(Tensor2::from_vec(
        shape.0,
        shape.1,
        vec![1.0; shape.0 * shape.1],
    )?);
    let one_minus = tape.sub(ones, probs)?;
    let ln_p = tape.log_clamped(probs);
    let ln_q = tape.log_clamped(one_minus);
    let mask_var = tape.constant(mask.clone());
    let inv_mask_var = tape.constant(mask.map(|m| 1.0 - m));
    let hit = tape.mul(mask_var, ln_p)?;
    let miss = tape.mul(inv_mask_var, ln_q)?;
    tape.add(hit, miss)
}

/// Joint position probabilities from the hierarchical pair: for each
/// treatment the dosage-slot probabilities scaled by that treatment's
/// probability, concatenated treatment-major.
pub fn combine_hierarchical(tape: &mut Tape, p_w: Var, p_d: &[Var]) -> Result<Var> {
    let k = tape.value(p_w).cols();
    if p_d.len() != k {
        return Err(Error::dimension(
            "combine_hierarchical",
            format!("{} treatment columns, {} dosage tables", k, p_d.len()),
        ));
    }
    let mut parts = Vec::with_capacity(k);
    for (w, &probs) in p_d.iter().enumerate() {
        let col = tape.slice_col(p_w, w)?;
        parts.push(tape.mul_col(probs, col)?);
    }
    tape.concat_cols(&parts)
}

/// Select one column per row via 0/1 masks and sum: with disjoint masks this
/// gathers each row's single marked entry.
pub fn gather_masked_sum(tape: &mut Tape, columns: &[Var], masks: &[Tensor2]) -> Result<Var> {
    if columns.len() != masks.len() || columns.is_empty() {
        return Err(Error::contract(
            "gather_masked_sum",
            format!("{} columns vs {} masks", columns.len(), masks.len()),
        ));
    }
    let mut picked = Vec::with_capacity(columns.len());
    for (&col, mask) in columns.iter().zip(masks) {
        let mask_var = tape.constant(mask.clone());
        picked.push(tape.mul(mask_var, col)?);
    }
    tape.sum_elements(&picked)
}

/// Mean squared error of a column against a constant target column.
pub fn mse_to(tape: &mut Tape, pred: Var, target: &Tensor2) -> Result<Var> {
    let target_var = tape.constant(target.clone());
    let diff = tape.sub(pred, target_var)?;
    let sq = tape.square(diff);
    Ok(tape.mean_all(sq))
}
