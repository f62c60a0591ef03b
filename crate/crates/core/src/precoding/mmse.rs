use super::{LinkBudget, PrecodingMatrix};
use crate::error::{Error, Result};
use crate::numerics::{hermitian_solve, matmul, ComplexMatrix, C64};

/// Intermediate quantities of the MMSE precoder, kept for differentiation.
#[derive(Clone, Debug)]
pub struct MmseParts {
    /// `A = C^H C + (1/rho) I`.
    pub a: ComplexMatrix,
    /// `X = A^{-1} C^H`, the unnormalized precoder.
    pub x: ComplexMatrix,
    /// `t = tr(X X^H)`.
    pub t: f64,
    pub beta: f64,
    pub precoder: PrecodingMatrix,
}

impl MmseParts {
    pub fn compute(c_chan: &ComplexMatrix, lb: &LinkBudget) -> Result<Self> {
        if c_chan.is_zero() {
            return Err(Error::InvalidArgument(
                "MMSE precoder needs a nonzero channel".into(),
            ));
        }
        let c_h = c_chan.adjoint();
        let mut a = matmul(&c_h, c_chan)?;
        a.add_diagonal(C64::new(lb.noise(), 0.0));
        let x = hermitian_solve(&a, &c_h)?;
        let t = x.frobenius_norm_sqr();
        let beta = (lb.power / t).sqrt();
        let precoder = PrecodingMatrix {
            v: x.scaled_real(beta),
            budget: lb.power,
        };
        Ok(Self {
            a,
            x,
            t,
            beta,
            precoder,
        })
    }
}

/// Closed-form MMSE precoder `V = beta (C^H C + I/rho)^{-1} C^H`, with
/// `beta` chosen so that `tr(V V^H) = E_Tr`.
pub fn mmse_precoder(c_chan: &ComplexMatrix, lb: &LinkBudget) -> Result<PrecodingMatrix> {
    Ok(MmseParts::compute(c_chan, lb)?.precoder)
}

/// Mean squared error `E||beta^{-1}(C V x + n) - x||^2` for unit-power
/// symbols and noise variance `1/rho` per user:
/// `||beta^{-1} C V - I||_F^2 + U / (rho beta^2)`.
pub fn mmse_mse(
    c_chan: &ComplexMatrix,
    v: &ComplexMatrix,
    beta: f64,
    lb: &LinkBudget,
) -> Result<f64> {
    let mut e = matmul(c_chan, v)?.scaled_real(1.0 / beta);
    let users = e.rows();
    e.add_diagonal(C64::new(-1.0, 0.0));
    Ok(e.frobenius_norm_sqr() + users as f64 * lb.noise() / (beta * beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precoding::tests::random_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_channel() {
        let lb = LinkBudget::new(1.0, 2.0).unwrap();
        let parts = MmseParts::compute(&ComplexMatrix::identity(2), &lb).unwrap();
        assert!((parts.beta - 2.0).abs() < 1e-14);
        assert!(parts.precoder.v.max_abs_diff(&ComplexMatrix::identity(2)) < 1e-14);
    }

    #[test]
    fn single_user_is_matched_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lb = LinkBudget::new(3.0, 1.5).unwrap();
        let c = random_matrix(&mut rng, 1, 4);
        let v = mmse_precoder(&c, &lb).unwrap();
        assert!((v.power() / 1.5 - 1.0).abs() < 1e-12);
        // v = s c^H for a positive real scalar s
        let ratio = v.v[(0, 0)] / c[(0, 0)].conj();
        assert!(ratio.im.abs() < 1e-12 && ratio.re > 0.0);
        for m in 1..4 {
            assert!((v.v[(m, 0)] - c[(0, m)].conj() * ratio).norm() < 1e-12);
        }
    }

    #[test]
    fn saturates_power_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let u = rng.random_range(1..4);
            let m = rng.random_range(u..6);
            let lb =
                LinkBudget::new(rng.random_range(0.1..100.0), rng.random_range(0.5..5.0)).unwrap();
            let v = mmse_precoder(&random_matrix(&mut rng, u, m), &lb).unwrap();
            assert!((v.power() / lb.power - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_channel_rejected() {
        let lb = LinkBudget::new(1.0, 1.0).unwrap();
        assert!(mmse_precoder(&ComplexMatrix::zeros(2, 2), &lb).is_err());
    }

    #[test]
    fn beats_random_feasible_probes() {
        // E_Tr = U makes the 1/rho regularizer the exact constrained optimum
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lb = LinkBudget::new(2.0, 2.0).unwrap();
        let c = random_matrix(&mut rng, 2, 3);
        let parts = MmseParts::compute(&c, &lb).unwrap();
        let best = mmse_mse(&c, &parts.precoder.v, parts.beta, &lb).unwrap();
        for _ in 0..1000 {
            let delta = random_matrix(&mut rng, 3, 2).scaled_real(rng.random_range(0.0..0.3));
            let mut v = parts.precoder.v.add(&delta).unwrap();
            let p = v.frobenius_norm_sqr();
            if p > lb.power {
                v = v.scaled_real((lb.power / p).sqrt() * rng.random_range(0.8..1.0));
            }
            let beta = parts.beta * rng.random_range(0.7..1.3);
            assert!(mmse_mse(&c, &v, beta, &lb).unwrap() >= best - 1e-12);
        }
    }
}
