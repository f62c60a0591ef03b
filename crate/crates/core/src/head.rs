//! Scalar objectives of the RIS phase field and their exact gradients.
//!
//! A head evaluates
//!
//! ```text
//! f(psi) = scale * ( WSR(C(psi), V(C(psi))) - kappa * p(psi) )
//! ```
//!
//! where `C(psi) = G diag(exp(j psi)) H + D`, `V` is either the MMSE
//! precoder (differentiated through) or a frozen matrix, and `p` is the
//! optional discretization penalty.
//!
//! Gradients are propagated by hand with the convention that the adjoint
//! `Z_bar` of a complex quantity `Z` satisfies `df = Re tr(Z_bar^H dZ)`.

use std::f64::consts::LN_2;

use crate::channel::ChannelSet;
use crate::error::{Error, Result};
use crate::numerics::{hermitian_solve, matmul, ComplexMatrix, C64};
use crate::precoding::{
    effective_channel, mmse_precoder, rates_from_product, wmmse_precoder, LinkBudget, MmseParts,
    PhaseField, PrecodingMatrix, UserWeights, WmmseOptions,
};
use crate::training::{penalty, penalty_gradient};

/// How the precoder is obtained from the effective channel.
#[derive(Clone, Debug)]
pub enum PrecoderMode {
    /// Closed-form MMSE, differentiated through.
    Mmse,
    /// A constant precoder; no derivative flows into it.
    Fixed(PrecodingMatrix),
    /// Iterative WMMSE from an MMSE start. Evaluable, not differentiable.
    Wmmse(WmmseOptions),
}

impl PrecoderMode {
    fn name(&self) -> &'static str {
        match self {
            PrecoderMode::Mmse => "mmse_precoder",
            PrecoderMode::Fixed(_) => "fixed_precoder",
            PrecoderMode::Wmmse(_) => "wmmse_precoder",
        }
    }
}

/// Discretization penalty term `kappa * p(psi)`.
#[derive(Clone, Debug)]
pub struct PenaltyTerm {
    pub codebook: Vec<f64>,
    pub kappa: f64,
}

/// Objective head for one channel sample.
#[derive(Clone, Debug)]
pub struct WsrHead<'a> {
    pub channel: &'a ChannelSet,
    pub weights: &'a UserWeights,
    pub link: LinkBudget,
    pub precoder: PrecoderMode,
    pub scale: f64,
    pub penalty: Option<PenaltyTerm>,
}

/// Value of a head together with its components.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadValue {
    /// The scaled objective.
    pub objective: f64,
    /// Unscaled weighted sum-rate.
    pub wsr: f64,
    /// Penalty `p` (zero when the head has no penalty term).
    pub penalty: f64,
}

impl<'a> WsrHead<'a> {
    pub fn new(
        channel: &'a ChannelSet,
        weights: &'a UserWeights,
        link: LinkBudget,
        precoder: PrecoderMode,
    ) -> Self {
        Self {
            channel,
            weights,
            link,
            precoder,
            scale: 1.0,
            penalty: None,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_penalty(mut self, penalty: Option<PenaltyTerm>) -> Self {
        self.penalty = penalty;
        self
    }

    /// Fails when the head contains a primitive without a derivative.
    pub fn check_differentiable(&self) -> Result<()> {
        match self.precoder {
            PrecoderMode::Wmmse(_) => Err(Error::UnsupportedPrimitive(self.precoder.name().into())),
            _ => Ok(()),
        }
    }

    fn precoder_for(&self, c_chan: &ComplexMatrix) -> Result<PrecodingMatrix> {
        match &self.precoder {
            PrecoderMode::Mmse => mmse_precoder(c_chan, &self.link),
            PrecoderMode::Fixed(v) => {
                let users = self.channel.geometry.users;
                if v.v.shape() != (self.channel.geometry.bs_antennas, users) {
                    return Err(Error::dims(
                        "WsrHead",
                        format!("fixed precoder is {:?}", v.v.shape()),
                    ));
                }
                Ok(v.clone())
            }
            PrecoderMode::Wmmse(opts) => {
                let init = mmse_precoder(c_chan, &self.link)?;
                Ok(wmmse_precoder(c_chan, self.weights, &self.link, &init, *opts)?.precoder)
            }
        }
    }

    fn penalty_value(&self, psi: &PhaseField) -> f64 {
        self.penalty
            .as_ref()
            .map_or(0.0, |p| penalty(psi, &p.codebook))
    }

    fn combine(&self, wsr: f64, pen: f64) -> f64 {
        let kappa = self.penalty.as_ref().map_or(0.0, |p| p.kappa);
        self.scale * (wsr - kappa * pen)
    }

    pub fn value(&self, psi: &PhaseField) -> Result<HeadValue> {
        let c_chan = effective_channel(self.channel, psi)?;
        let v = self.precoder_for(&c_chan)?;
        let c = matmul(&c_chan, &v.v)?;
        let wsr = weighted(
            &rates_from_product(&c, self.link.noise()),
            self.weights.as_slice(),
        );
        let pen = self.penalty_value(psi);
        Ok(HeadValue {
            objective: self.combine(wsr, pen),
            wsr,
            penalty: pen,
        })
    }

    /// Value and gradient with respect to every phase.
    pub fn value_and_grad(&self, psi: &PhaseField) -> Result<(HeadValue, Vec<f64>)> {
        self.check_differentiable()?;
        let cs = self.channel;
        let c_chan = effective_channel(cs, psi)?;
        let noise = self.link.noise();
        let alpha = self.weights.as_slice();

        let (v, mmse) = match &self.precoder {
            PrecoderMode::Mmse => {
                let parts = MmseParts::compute(&c_chan, &self.link)?;
                (parts.precoder.v.clone(), Some(parts))
            }
            _ => (self.precoder_for(&c_chan)?.v, None),
        };
        let c = matmul(&c_chan, &v)?;
        let users = c.rows();
        let wsr = weighted(&rates_from_product(&c, noise), alpha);
        let pen = self.penalty_value(psi);
        let value = HeadValue {
            objective: self.combine(wsr, pen),
            wsr,
            penalty: pen,
        };

        // adjoint of the product c = C V
        let mut k = ComplexMatrix::zeros(users, users);
        for u in 0..users {
            let row = c.row(u);
            let total: f64 = row.iter().map(|z| z.norm_sqr()).sum::<f64>() + noise;
            let interference = total - row[u].norm_sqr();
            let a = alpha[u] * self.scale / LN_2;
            for vv in 0..users {
                let q = if vv == u {
                    a / total
                } else {
                    a * (1.0 / total - 1.0 / interference)
                };
                k[(u, vv)] = row[vv] * (2.0 * q);
            }
        }
        let mut c_bar = matmul(&k, &v.adjoint())?;

        if let Some(parts) = mmse {
            let v_bar = matmul(&c_chan.adjoint(), &k)?;
            // V = beta X with beta = sqrt(E / ||X||^2)
            let re_tr: f64 = v_bar
                .as_slice()
                .iter()
                .zip(parts.x.as_slice())
                .map(|(vb, x)| (vb.conj() * x).re)
                .sum();
            let x_bar = v_bar
                .scaled_real(parts.beta)
                .sub(&parts.x.scaled_real(parts.beta / parts.t * re_tr))?;
            // X = A^{-1} C^H
            let y = hermitian_solve(&parts.a, &x_bar)?;
            c_bar = c_bar.add(&y.adjoint())?;
            // A = C^H C + I / rho with A_bar = -Y X^H
            let a_bar = matmul(&y, &parts.x.adjoint())?.scaled_real(-1.0);
            let sym = a_bar.add(&a_bar.adjoint())?;
            c_bar = c_bar.add(&matmul(&c_chan, &sym)?)?;
        }

        // dC/dpsi_n = j phi_n g_{:,n} h_{n,:}
        let phasors = psi.unit_phasors();
        let n_count = phasors.len();
        let m = cs.geometry.bs_antennas;
        let mut grad = vec![0.0; n_count];
        for (n, gn) in grad.iter_mut().enumerate() {
            let h_row = cs.h.row(n);
            let mut z = C64::new(0.0, 0.0);
            for u in 0..users {
                let cb = c_bar.row(u);
                let mut s = C64::new(0.0, 0.0);
                for mm in 0..m {
                    s += cb[mm] * h_row[mm].conj();
                }
                z += cs.g[(u, n)].conj() * s;
            }
            *gn = (C64::new(0.0, 1.0) * phasors[n] * z.conj()).re;
        }

        if let Some(term) = &self.penalty {
            let pg = penalty_gradient(psi, &term.codebook);
            for (g, p) in grad.iter_mut().zip(pg) {
                *g -= self.scale * term.kappa * p;
            }
        }
        Ok((value, grad))
    }
}

fn weighted(rates: &[f64], alpha: &[f64]) -> f64 {
    rates.iter().zip(alpha).map(|(r, a)| r * a).sum()
}
