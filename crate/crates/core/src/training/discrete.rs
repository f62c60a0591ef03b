use std::f64::consts::{PI, TAU};

use crate::precoding::PhaseField;

/// Signed circular difference `a - b` wrapped into `[-pi, pi)`.
fn circular_diff(a: f64, b: f64) -> f64 {
    (a - b + PI).rem_euclid(TAU) - PI
}

/// Index of the circular-nearest codebook entry; ties go to the smaller value.
fn nearest(psi: f64, codebook: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in codebook.iter().enumerate() {
        let d = circular_diff(psi, c).abs();
        let closer = d < best_d - 1e-12;
        let tie = (d - best_d).abs() <= 1e-12 && c < codebook[best];
        if closer || tie {
            best = i;
            best_d = d;
        }
    }
    best
}

/// `p = sqrt(sum_n min_c dist(psi_n, c)^2)` with circular distance.
///
/// # Panics
/// If the codebook is empty.
pub fn penalty(psi: &PhaseField, codebook: &[f64]) -> f64 {
    assert!(!codebook.is_empty(), "penalty needs a nonempty codebook");
    psi.as_slice()
        .iter()
        .map(|&p| circular_diff(p, codebook[nearest(p, codebook)]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Gradient of [`penalty`]; zero where the penalty vanishes.
pub fn penalty_gradient(psi: &PhaseField, codebook: &[f64]) -> Vec<f64> {
    let diffs: Vec<f64> = psi
        .as_slice()
        .iter()
        .map(|&p| circular_diff(p, codebook[nearest(p, codebook)]))
        .collect();
    let p = diffs.iter().map(|d| d * d).sum::<f64>().sqrt();
    if p == 0.0 {
        return vec![0.0; diffs.len()];
    }
    diffs.into_iter().map(|d| d / p).collect()
}

/// Snaps every phase to its circular-nearest codebook value.
pub fn round_phases(psi: &PhaseField, codebook: &[f64]) -> PhaseField {
    assert!(!codebook.is_empty(), "rounding needs a nonempty codebook");
    let out = psi
        .as_slice()
        .iter()
        .map(|&p| codebook[nearest(p, codebook)])
        .collect();
    PhaseField::new(psi.height(), psi.width(), out).expect("codebook values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;
    use std::f64::consts::FRAC_PI_2;
    use std::f64::consts::FRAC_PI_4;

    fn field(v: &[f64]) -> PhaseField {
        PhaseField::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn penalty_examples() {
        let cb = [0.0, PI];
        assert_eq!(penalty(&field(&[0.0, PI, -PI, 3.0 * PI]), &cb), 0.0);
        assert!((penalty(&field(&[FRAC_PI_4]), &cb) - FRAC_PI_4).abs() < 1e-15);
        assert!(penalty(&field(&[TAU]), &[0.0]) < 1e-15);
        let p = penalty(&field(&[0.3, 0.4]), &[0.0]);
        assert!((p - 0.5).abs() < 1e-15);
    }

    #[test]
    fn penalty_is_periodic() {
        let a = field(&[0.3, -1.2, 2.5]);
        let b = field(&[0.3 + TAU, -1.2 - 2.0 * TAU, 2.5]);
        assert!((penalty(&a, &[0.0, PI]) - penalty(&b, &[0.0, PI])).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_fd() {
        let psi = field(&[0.3, -1.2, 2.5, 4.0]);
        let cb = [0.0, FRAC_PI_2, PI];
        let g = penalty_gradient(&psi, &cb);
        let fd =
            finite_difference_gradient(|x| penalty(&field(x), &cb), psi.as_slice(), 1e-6).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert!(penalty_gradient(&field(&[0.0, PI]), &[0.0, PI])
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn rounding_examples() {
        let cb = [0.0, PI];
        assert_eq!(round_phases(&field(&[PI, 0.0]), &cb).as_slice(), &[PI, 0.0]);
        assert_eq!(
            round_phases(&field(&[FRAC_PI_2 - 0.01]), &cb).as_slice(),
            &[0.0]
        );
        assert_eq!(round_phases(&field(&[FRAC_PI_2]), &cb).as_slice(), &[0.0]);
        assert_eq!(
            round_phases(&field(&[FRAC_PI_2 + 0.01]), &cb).as_slice(),
            &[PI]
        );
        assert_eq!(round_phases(&field(&[-3.0]), &cb).as_slice(), &[PI]);
        assert_eq!(round_phases(&field(&[6.2]), &cb).as_slice(), &[0.0]);
        // tie with the codebook listed in descending order
        assert_eq!(
            round_phases(&field(&[FRAC_PI_2]), &[PI, 0.0]).as_slice(),
            &[0.0]
        );
    }
}
