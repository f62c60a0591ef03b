//! Effective channel, weighted sum-rate and the BS precoders.

mod baseline;
mod mmse;
mod wmmse;

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelSet;
use crate::error::{Error, Result};
use crate::numerics::{matmul, ComplexMatrix, C64};

pub use baseline::{alternating_gradient_baseline, random_phase_baseline};
pub use mmse::{mmse_mse, mmse_precoder, MmseParts};
pub use wmmse::{wmmse_precoder, WmmseOptions, WmmseOutcome};

/// RIS phase shifts in radians on the `ris_height x ris_width` grid,
/// flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseField {
    height: usize,
    width: usize,
    psi: Vec<f64>,
}

impl PhaseField {
    pub fn new(height: usize, width: usize, psi: Vec<f64>) -> Result<Self> {
        if psi.len() != height * width {
            return Err(Error::dims(
                "PhaseField::new",
                format!("{} phases for a {height}x{width} grid", psi.len()),
            ));
        }
        if psi.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "phase field contains non-finite values".into(),
            ));
        }
        Ok(Self { height, width, psi })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            psi: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.psi
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.psi
    }

    /// Diagonal of `Phi`: `exp(j psi_n)`.
    pub fn unit_phasors(&self) -> Vec<C64> {
        self.psi.iter().map(|&p| C64::from_polar(1.0, p)).collect()
    }
}

/// BS precoding matrix `V` (`M x U`) with its power budget.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecodingMatrix {
    pub v: ComplexMatrix,
    pub budget: f64,
}

impl PrecodingMatrix {
    pub fn new(v: ComplexMatrix, budget: f64) -> Result<Self> {
        let p = Self { v, budget };
        if !p.is_feasible() {
            return Err(Error::InvalidArgument(format!(
                "precoder power {} exceeds budget {budget}",
                p.power()
            )));
        }
        Ok(p)
    }

    /// `tr(V V^H)`.
    pub fn power(&self) -> f64 {
        self.v.frobenius_norm_sqr()
    }

    pub fn is_feasible(&self) -> bool {
        self.power() <= self.budget * (1.0 + 1e-9)
    }

    /// Squared norm of user `u`'s precoding vector.
    pub fn user_power(&self, u: usize) -> f64 {
        (0..self.v.rows()).map(|m| self.v[(m, u)].norm_sqr()).sum()
    }
}

/// Per-user rate weights, nonnegative and summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UserWeights(Vec<f64>);

impl UserWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("user weights are empty".into()));
        }
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument(format!(
                "user weights must lie in [0, 1]: {alpha:?}"
            )));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "user weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(alpha))
    }

    pub fn equal(users: usize) -> Self {
        Self(vec![1.0 / users as f64; users])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Stable text key, e.g. `0.25,0.75`.
    pub fn key(&self) -> String {
        self.0
            .iter()
            .map(|a| format!("{a}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl TryFrom<Vec<f64>> for UserWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UserWeights> for Vec<f64> {
    fn from(w: UserWeights) -> Self {
        w.0
    }
}

/// Transmit SNR `rho` and power budget `E_Tr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub rho: f64,
    pub power: f64,
}

impl LinkBudget {
    pub fn new(rho: f64, power: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite() && power > 0.0 && power.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "link budget needs rho > 0 and E_Tr > 0, got rho={rho}, E_Tr={power}"
            )));
        }
        Ok(Self { rho, power })
    }

    pub fn noise(&self) -> f64 {
        1.0 / self.rho
    }
}

/// `G Phi H + D`, the end-to-end `U x M` channel.
pub fn effective_channel(cs: &ChannelSet, phi: &PhaseField) -> Result<ComplexMatrix> {
    let n = cs.geometry.ris_elements();
    if phi.len() != n {
        return Err(Error::dims(
            "effective_channel",
            format!("{} phases for {n} RIS antennas", phi.len()),
        ));
    }
    let phasors = phi.unit_phasors();
    let mut g_phi = cs.g.clone();
    for u in 0..g_phi.rows() {
        for (n, p) in phasors.iter().enumerate() {
            g_phi[(u, n)] *= p;
        }
    }
    matmul(&g_phi, &cs.h)?.add(&cs.d)
}

/// Per-user rates `log2(1 + |c_uu|^2 / (sum_{v != u} |c_uv|^2 + 1/rho))`
/// with `c = C_chan V`.
pub fn user_rates(
    c_chan: &ComplexMatrix,
    v: &PrecodingMatrix,
    lb: &LinkBudget,
) -> Result<Vec<f64>> {
    let c = matmul(c_chan, &v.v)?;
    if c.rows() != c.cols() {
        return Err(Error::dims(
            "user_rates",
            format!("C_chan {:?} with V {:?}", c_chan.shape(), v.v.shape()),
        ));
    }
    Ok(rates_from_product(&c, lb.noise()))
}

pub(crate) fn rates_from_product(c: &ComplexMatrix, noise: f64) -> Vec<f64> {
    (0..c.rows())
        .map(|u| {
            let row = c.row(u);
            let total: f64 = row.iter().map(|z| z.norm_sqr()).sum::<f64>() + noise;
            let signal = row[u].norm_sqr();
            let interference = total - signal;
            ((total / interference).ln() / LN_2).max(0.0)
        })
        .collect()
}

/// Weighted sum-rate of `C_chan V`.
pub fn wsr(
    c_chan: &ComplexMatrix,
    v: &PrecodingMatrix,
    w: &UserWeights,
    lb: &LinkBudget,
) -> Result<f64> {
    let rates = user_rates(c_chan, v, lb)?;
    if rates.len() != w.len() {
        return Err(Error::dims(
            "wsr",
            format!("{} users but {} weights", rates.len(), w.len()),
        ));
    }
    Ok(rates.iter().zip(w.as_slice()).map(|(r, a)| r * a).sum())
}
