//! Iterative WMMSE precoder.
//!
//! Each outer iteration updates, for every user `u` with channel row `c_u`:
//!
//! ```text
//! xi_u = c_u v_u / (sum_nu |c_u v_nu|^2 + 1/rho)
//! w_u  = 1 / (1 - conj(xi_u) c_u v_u)
//! v_u  = alpha_u (sum_nu alpha_nu w_nu |xi_nu|^2 c_nu^H c_nu + mu I)^{-1} c_u^H xi_u w_u
//! ```
//!
//! `mu >= 0` is the smallest multiplier that keeps `sum_u ||v_u||^2 <= E_Tr`.
//! The transmit power is monotone decreasing in `mu`; it is evaluated in
//! the eigenbasis of the Hermitian matrix and `mu` is located by bisection.
//! Iteration stops when `|sum_u w_u - sum_u w'_u| <= eps`, with `w'` starting
//! at zero.

use super::{rates_from_product, LinkBudget, PrecodingMatrix, UserWeights};
use crate::error::{Error, Result};
use crate::numerics::{hermitian_eigen, matmul, ComplexMatrix, C64, ZERO};

const BRACKET_DOUBLINGS: usize = 200;
const BISECTION_STEPS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WmmseOptions {
    pub max_outer: usize,
    pub eps: f64,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self {
            max_outer: 100,
            eps: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WmmseOutcome {
    pub precoder: PrecodingMatrix,
    /// Outer iterations executed.
    pub iterations: usize,
    pub converged: bool,
    /// WSR of the initial precoder followed by the WSR after every outer
    /// iteration.
    pub wsr_trace: Vec<f64>,
    /// `tr(V V^H)` after every outer iteration.
    pub power_trace: Vec<f64>,
    /// Lagrange multiplier used in every outer iteration.
    pub mu_trace: Vec<f64>,
}

fn weighted_sum_rate(
    c_chan: &ComplexMatrix,
    v: &ComplexMatrix,
    alpha: &[f64],
    noise: f64,
) -> Result<f64> {
    let c = matmul(c_chan, v)?;
    Ok(rates_from_product(&c, noise)
        .iter()
        .zip(alpha)
        .map(|(r, a)| r * a)
        .sum())
}

/// Runs Algorithm-1 style WMMSE iterations starting from `v_init`.
pub fn wmmse_precoder(
    c_chan: &ComplexMatrix,
    w: &UserWeights,
    lb: &LinkBudget,
    v_init: &PrecodingMatrix,
    opts: WmmseOptions,
) -> Result<WmmseOutcome> {
    let (users, m) = c_chan.shape();
    if v_init.v.shape() != (m, users) || w.len() != users {
        return Err(Error::dims(
            "wmmse_precoder",
            format!(
                "C {:?}, V_init {:?}, {} weights",
                c_chan.shape(),
                v_init.v.shape(),
                w.len()
            ),
        ));
    }
    if opts.max_outer == 0 || !(opts.eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "WMMSE needs max_outer >= 1 and eps > 0, got {opts:?}"
        )));
    }
    if !v_init.is_feasible() {
        return Err(Error::InvalidArgument(
            "initial precoder violates the power budget".into(),
        ));
    }
    let alpha = w.as_slice();
    let noise = lb.noise();

    let mut v = v_init.v.clone();
    let mut weights = vec![0.0; users];
    let mut outcome = WmmseOutcome {
        precoder: v_init.clone(),
        iterations: 0,
        converged: false,
        wsr_trace: vec![weighted_sum_rate(c_chan, &v, alpha, noise)?],
        power_trace: Vec::new(),
        mu_trace: Vec::new(),
    };

    for _ in 0..opts.max_outer {
        let previous: f64 = weights.iter().map(|x: &f64| x.abs()).sum();
        let cv = matmul(c_chan, &v)?;

        // receive scalars and MSE weights
        let mut xi = vec![ZERO; users];
        for u in 0..users {
            let row = cv.row(u);
            let total: f64 = row.iter().map(|z| z.norm_sqr()).sum::<f64>() + noise;
            xi[u] = row[u] / total;
            weights[u] = 1.0 / (1.0 - (xi[u].conj() * row[u]).re);
        }

        // A = sum_nu alpha_nu w_nu |xi_nu|^2 c_nu^H c_nu, columns b_u
        let mut a = ComplexMatrix::zeros(m, m);
        let mut b = ComplexMatrix::zeros(m, users);
        for nu in 0..users {
            let c_row = c_chan.row(nu);
            let s = alpha[nu] * weights[nu] * xi[nu].norm_sqr();
            if s != 0.0 {
                for i in 0..m {
                    let ci = c_row[i].conj() * s;
                    for j in 0..m {
                        a[(i, j)] += ci * c_row[j];
                    }
                }
            }
            let coeff = xi[nu] * (alpha[nu] * weights[nu]);
            for i in 0..m {
                b[(i, nu)] = c_row[i].conj() * coeff;
            }
        }

        let (mu, v_next) = power_constrained_solve(&a, &b, lb.power)?;
        v = v_next;
        outcome.iterations += 1;
        outcome.mu_trace.push(mu);
        outcome.power_trace.push(v.frobenius_norm_sqr());
        outcome
            .wsr_trace
            .push(weighted_sum_rate(c_chan, &v, alpha, noise)?);

        let current: f64 = weights.iter().map(|x| x.abs()).sum();
        if (current - previous).abs() <= opts.eps {
            outcome.converged = true;
            break;
        }
    }
    outcome.precoder = PrecodingMatrix {
        v,
        budget: lb.power,
    };
    Ok(outcome)
}

/// Solves `(A + mu I) V = B` for the smallest `mu >= 0` with
/// `||V||_F^2 <= budget`. Returns `(mu, V)`.
fn power_constrained_solve(
    a: &ComplexMatrix,
    b: &ComplexMatrix,
    budget: f64,
) -> Result<(f64, ComplexMatrix)> {
    let (m, users) = b.shape();
    let total_b = b.frobenius_norm_sqr();
    if total_b == 0.0 {
        return Ok((0.0, ComplexMatrix::zeros(m, users)));
    }
    let (lambda, q) = hermitian_eigen(a)?;
    let lambda: Vec<f64> = lambda.into_iter().map(|l| l.max(0.0)).collect();
    let lambda_max = lambda.iter().cloned().fold(0.0, f64::max);
    // coefficient energies |q_i^H b_u|^2 summed over users
    let qb = matmul(&q.adjoint(), b)?;
    let energy: Vec<f64> = (0..m)
        .map(|i| qb.row(i).iter().map(|z| z.norm_sqr()).sum())
        .collect();
    let power = |mu: f64| -> f64 {
        lambda
            .iter()
            .zip(&energy)
            .map(|(&l, &e)| {
                if e == 0.0 {
                    0.0
                } else {
                    e / ((l + mu) * (l + mu))
                }
            })
            .sum()
    };

    let invertible = lambda.iter().all(|&l| l > lambda_max * 1e-12);
    let power_at_zero = if invertible {
        power(0.0)
    } else {
        f64::INFINITY
    };
    let mu = if power_at_zero <= budget {
        0.0
    } else {
        // power(mu) <= total_b / mu^2, so sqrt(total_b / budget) is a bracket;
        // start well below it and double.
        let mut hi = (total_b / budget).sqrt() / 1024.0;
        let mut found = false;
        for _ in 0..BRACKET_DOUBLINGS {
            if power(hi) <= budget {
                found = true;
                break;
            }
            hi *= 2.0;
        }
        if !found {
            return Err(Error::BisectionBracket { power_at_zero });
        }
        let mut lo = 0.0;
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if power(mid) > budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };

    // V = Q diag(1 / (lambda + mu)) Q^H B
    let mut scaled = qb;
    for (row, &l) in scaled.as_mut_slice().chunks_mut(users).zip(&lambda) {
        let denom = l + mu;
        let f = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        for z in row {
            *z *= C64::new(f, 0.0);
        }
    }
    Ok((mu, matmul(&q, &scaled)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precoding::mmse_precoder;
    use crate::precoding::tests::random_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_user_converges_to_matched_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lb = LinkBudget::new(2.0, 1.0).unwrap();
        let c = random_matrix(&mut rng, 1, 4);
        let init =
            PrecodingMatrix::new(random_matrix(&mut rng, 4, 1).scaled_real(0.1), 1.0).unwrap();
        let out = wmmse_precoder(
            &c,
            &UserWeights::new(vec![1.0]).unwrap(),
            &lb,
            &init,
            WmmseOptions {
                max_outer: 200,
                eps: 1e-12,
            },
        )
        .unwrap();
        let v = &out.precoder;
        assert!((v.power() - 1.0).abs() < 1e-8);
        let gain = c.frobenius_norm_sqr();
        let expected = (1.0 + lb.power * gain * lb.rho).log2();
        assert!((out.wsr_trace.last().unwrap() - expected).abs() < 1e-6);
        let ratio = v.v[(0, 0)] / c[(0, 0)].conj();
        for mm in 1..4 {
            assert!((v.v[(mm, 0)] - c[(0, mm)].conj() * ratio).norm() < 1e-6);
        }
    }

    #[test]
    fn zero_weight_user_gets_no_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lb = LinkBudget::new(5.0, 2.0).unwrap();
        let c = random_matrix(&mut rng, 2, 3);
        let init = mmse_precoder(&c, &lb).unwrap();
        let out = wmmse_precoder(
            &c,
            &UserWeights::new(vec![1.0, 0.0]).unwrap(),
            &lb,
            &init,
            WmmseOptions::default(),
        )
        .unwrap();
        assert!(out.precoder.user_power(1).sqrt() < 1e-9);
        assert!((out.precoder.power() / 2.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn monotone_and_beats_mmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let lb = LinkBudget::new(rng.random_range(0.5..20.0), 2.0).unwrap();
            let c = random_matrix(&mut rng, 2, 4);
            let init = mmse_precoder(&c, &lb).unwrap();
            let w = UserWeights::new(vec![0.3, 0.7]).unwrap();
            let out = wmmse_precoder(&c, &w, &lb, &init, WmmseOptions::default()).unwrap();
            for pair in out.wsr_trace.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-9, "{:?}", out.wsr_trace);
            }
            for p in &out.power_trace {
                assert!((p / 2.0 - 1.0).abs() < 1e-6);
            }
            assert!(out.wsr_trace.last().unwrap() >= &(out.wsr_trace[0] - 1e-9));
        }
    }

    #[test]
    fn stops_on_eps_or_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lb = LinkBudget::new(3.0, 2.0).unwrap();
        let c = random_matrix(&mut rng, 2, 3);
        let init = mmse_precoder(&c, &lb).unwrap();
        let w = UserWeights::equal(2);
        let capped = wmmse_precoder(
            &c,
            &w,
            &lb,
            &init,
            WmmseOptions {
                max_outer: 5,
                eps: 1e-300,
            },
        )
        .unwrap();
        assert_eq!(capped.iterations, 5);
        assert!(!capped.converged);
        let loose = wmmse_precoder(
            &c,
            &w,
            &lb,
            &init,
            WmmseOptions {
                max_outer: 100,
                eps: 1e-3,
            },
        )
        .unwrap();
        assert!(loose.converged);
        assert!(loose.iterations < 100);
    }

    #[test]
    fn rejects_bad_inputs() {
        let lb = LinkBudget::new(1.0, 1.0).unwrap();
        let c = ComplexMatrix::identity(2);
        let init = PrecodingMatrix::new(ComplexMatrix::identity(2).scaled_real(0.5), 1.0).unwrap();
        let w = UserWeights::equal(2);
        assert!(wmmse_precoder(
            &c,
            &w,
            &lb,
            &init,
            WmmseOptions {
                max_outer: 0,
                eps: 1e-4
            }
        )
        .is_err());
        assert!(wmmse_precoder(
            &c,
            &w,
            &lb,
            &init,
            WmmseOptions {
                max_outer: 1,
                eps: 0.0
            }
        )
        .is_err());
        let bad = PrecodingMatrix {
            v: ComplexMatrix::identity(2),
            budget: 1.0,
        };
        assert!(wmmse_precoder(&c, &w, &lb, &bad, WmmseOptions::default()).is_err());
    }

    #[test]
    fn power_solve_accepts_mu_zero_when_feasible() {
        let a = ComplexMatrix::identity(2).scaled_real(10.0);
        let b = ComplexMatrix::identity(2);
        let (mu, v) = power_constrained_solve(&a, &b, 1.0).unwrap();
        assert_eq!(mu, 0.0);
        assert!(v.max_abs_diff(&ComplexMatrix::identity(2).scaled_real(0.1)) < 1e-14);
        let (mu, v) = power_constrained_solve(&a, &b, 0.001).unwrap();
        assert!(mu > 0.0);
        assert!((v.frobenius_norm_sqr() / 0.001 - 1.0).abs() < 1e-10);
    }
}
