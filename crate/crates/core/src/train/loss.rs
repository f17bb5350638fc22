//! Pixel-mean cross-entropy, soft Dice and their convex mix.

use std::sync::Arc;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Var};

/// Probability clamp used by the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Smoothing added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-6;

fn target<F: Scalar>(tape: &Tape<'_, F>, prob: Var, gt: &Mask) -> Result<Arc<[F]>> {
    let s = tape.shape(prob);
    if s != [gt.height(), gt.width()] {
        return Err(Error::dim("loss", s, &[gt.height(), gt.width()]));
    }
    Ok(gt.to_target::<F>().into())
}

pub fn cross_entropy<F: Scalar>(tape: &mut Tape<'_, F>, prob: Var, gt: &Mask) -> Result<Var> {
    let y = target(tape, prob, gt)?;
    tape.binary_cross_entropy(prob, y, F::lit(BCE_EPS))
}

pub fn dice_loss<F: Scalar>(tape: &mut Tape<'_, F>, prob: Var, gt: &Mask) -> Result<Var> {
    let y = target(tape, prob, gt)?;
    tape.dice_loss(prob, y, F::lit(DICE_EPS))
}

/// `λ·CE + (1 − λ)·Dice`.
pub fn combined_loss<F: Scalar>(
    tape: &mut Tape<'_, F>,
    prob: Var,
    gt: &Mask,
    lambda: f64,
) -> Result<Var> {
    let ce = cross_entropy(tape, prob, gt)?;
    let dice = dice_loss(tape, prob, gt)?;
    let a = tape.scale(ce, F::lit(lambda));
    let b = tape.scale(dice, F::lit(1.0 - lambda));
    tape.add(a, b)
}
