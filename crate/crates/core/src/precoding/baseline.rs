use std::f64::consts::TAU;

use rand::Rng;

use super::{LinkBudget, PhaseField, UserWeights};
use crate::channel::{ChannelSet, Geometry};
use crate::error::{Error, Result};
use crate::head::{PrecoderMode, WsrHead};
use crate::seed::rng_for;

/// I.i.d. uniform phases in `[0, 2pi)`.
pub fn random_phase_baseline(seed: u64, geometry: Geometry) -> PhaseField {
    let mut rng = rng_for(seed, "random-phase", 0);
    let psi = (0..geometry.ris_elements())
        .map(|_| rng.random_range(0.0..TAU))
        .collect();
    PhaseField::new(geometry.ris_height, geometry.ris_width, psi).expect("finite phases")
}

/// Gradient ascent on the phases of the MMSE-precoded WSR, starting from
/// `psi = 0`. Each step moves the largest-gradient phase by `step_size`
/// radians and the others proportionally. Phases are wrapped into
/// `[0, 2pi)`. Returns the best iterate seen, including the start.
pub fn alternating_gradient_baseline(
    cs: &ChannelSet,
    w: &UserWeights,
    lb: &LinkBudget,
    steps: usize,
    step_size: f64,
) -> Result<PhaseField> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "alternating gradient baseline needs steps >= 1".into(),
        ));
    }
    if !(step_size >= 0.0 && step_size.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step size must be finite and >= 0, got {step_size}"
        )));
    }
    let geo = cs.geometry;
    let head = WsrHead::new(cs, w, *lb, PrecoderMode::Mmse);
    let mut psi = PhaseField::zeros(geo.ris_height, geo.ris_width);
    let mut best = psi.clone();
    let mut best_wsr = f64::NEG_INFINITY;
    for _ in 0..steps {
        let (val, grad) = head.value_and_grad(&psi)?;
        if val.wsr > best_wsr {
            best_wsr = val.wsr;
            best = psi.clone();
        }
        let peak = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if peak == 0.0 || step_size == 0.0 {
            break;
        }
        for (p, g) in psi.as_mut_slice().iter_mut().zip(&grad) {
            *p = (*p + step_size * g / peak).rem_euclid(TAU);
        }
    }
    let last = head.value(&psi)?.wsr;
    if last > best_wsr {
        best = psi;
    }
    Ok(best)
}
