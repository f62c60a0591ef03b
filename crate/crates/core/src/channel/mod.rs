//! Channel sets: the BS->RIS matrix `H`, the RIS->user matrix `G` and the
//! direct BS->user matrix `D`, plus synthesis, file I/O, estimation-error
//! perturbation and per-antenna featurization.
//!
//! RIS antennas are flattened row-major: the element at grid row `h` and
//! column `w` (both zero-based) has index `n = h * ris_width + w`. The
//! featurizer and [`PhaseField`](crate::precoding::PhaseField) both use this
//! convention.

mod file;
mod synth;

use std::f64::consts::PI;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, pseudoinverse, rank, ComplexMatrix, RealTensor3, C64};
use crate::precoding::{effective_channel, PhaseField};
use crate::seed::rng_for;

pub use file::{load_dataset, save_dataset, FORMAT_VERSION};
pub use synth::{synthesize_dataset, ChannelSpec};

/// Array sizes shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub ris_width: usize,
    pub ris_height: usize,
    pub users: usize,
    pub bs_antennas: usize,
}

impl Geometry {
    pub fn new(
        ris_width: usize,
        ris_height: usize,
        users: usize,
        bs_antennas: usize,
    ) -> Result<Self> {
        let g = Self {
            ris_width,
            ris_height,
            users,
            bs_antennas,
        };
        if ris_width == 0 || ris_height == 0 || users == 0 || bs_antennas == 0 {
            return Err(Error::Geometry(format!(
                "all sizes must be positive: {g:?}"
            )));
        }
        Ok(g)
    }

    /// Number of RIS antennas `N`.
    pub fn ris_elements(&self) -> usize {
        self.ris_width * self.ris_height
    }

    /// Flattened antenna index of grid position `(h, w)`.
    pub fn antenna_index(&self, h: usize, w: usize) -> usize {
        h * self.ris_width + w
    }
}

/// One channel realization.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    /// BS -> RIS, `N x M`. Shared between the samples of a dataset.
    pub h: Arc<ComplexMatrix>,
    /// RIS -> users, `U x N`.
    pub g: ComplexMatrix,
    /// BS -> users (direct), `U x M`.
    pub d: ComplexMatrix,
    pub geometry: Geometry,
}

impl ChannelSet {
    pub fn new(
        h: Arc<ComplexMatrix>,
        g: ComplexMatrix,
        d: ComplexMatrix,
        geometry: Geometry,
    ) -> Result<Self> {
        let n = geometry.ris_elements();
        let (u, m) = (geometry.users, geometry.bs_antennas);
        if h.shape() != (n, m) || g.shape() != (u, n) || d.shape() != (u, m) {
            return Err(Error::dims(
                "ChannelSet::new",
                format!(
                    "H {:?}, G {:?}, D {:?} inconsistent with N={n}, M={m}, U={u}",
                    h.shape(),
                    g.shape(),
                    d.shape()
                ),
            ));
        }
        Ok(Self { h, g, d, geometry })
    }
}

/// Which part of a dataset to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

/// Ordered channel samples sharing one `H` and one geometry. The first
/// `train_count` samples form the train split, the rest the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDataset {
    geometry: Geometry,
    h: Arc<ComplexMatrix>,
    samples: Vec<ChannelSet>,
    train_count: usize,
}

impl ChannelDataset {
    pub fn new(
        geometry: Geometry,
        h: ComplexMatrix,
        pairs: Vec<(ComplexMatrix, ComplexMatrix)>,
        train_count: usize,
    ) -> Result<Self> {
        if train_count > pairs.len() {
            return Err(Error::InvalidArgument(format!(
                "train_count {train_count} exceeds sample count {}",
                pairs.len()
            )));
        }
        let h = Arc::new(h);
        let samples = pairs
            .into_iter()
            .map(|(g, d)| ChannelSet::new(Arc::clone(&h), g, d, geometry))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() && h.shape() != (geometry.ris_elements(), geometry.bs_antennas) {
            return Err(Error::dims(
                "ChannelDataset::new",
                format!("H is {:?}", h.shape()),
            ));
        }
        Ok(Self {
            geometry,
            h,
            samples,
            train_count,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn h(&self) -> &Arc<ComplexMatrix> {
        &self.h
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_count(&self) -> usize {
        self.train_count
    }

    pub fn samples(&self) -> &[ChannelSet] {
        &self.samples
    }

    pub fn split(&self, split: Split) -> &[ChannelSet] {
        match split {
            Split::Train => &self.samples[..self.train_count],
            Split::Test => &self.samples[self.train_count..],
            Split::All => &self.samples,
        }
    }

    /// Keeps the first `train` training samples and the first `test` test
    /// samples.
    pub fn truncated(&self, train: usize, test: usize) -> Self {
        let train = train.min(self.train_count);
        let test_avail = self.samples.len() - self.train_count;
        let mut samples: Vec<ChannelSet> = self.samples[..train].to_vec();
        samples.extend_from_slice(
            &self.samples[self.train_count..self.train_count + test.min(test_avail)],
        );
        Self {
            geometry: self.geometry,
            h: Arc::clone(&self.h),
            samples,
            train_count: train,
        }
    }
}

/// Adds i.i.d. circularly-symmetric complex Gaussian estimation error to `G`
/// and `D` of every sample (and to `H` when `include_h` is set). The
/// standard deviation for a matrix is `gamma` times its mean absolute entry.
pub fn perturb(
    ds: &ChannelDataset,
    gamma: f64,
    seed: u64,
    include_h: bool,
) -> Result<ChannelDataset> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(ds.clone());
    }
    let h = if include_h {
        Arc::new(perturb_matrix(&ds.h, gamma, seed, "perturb-h", 0))
    } else {
        Arc::clone(&ds.h)
    };
    let samples = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| perturb_sample(s, Arc::clone(&h), gamma, seed, i as u64))
        .collect();
    Ok(ChannelDataset {
        geometry: ds.geometry,
        h,
        samples,
        train_count: ds.train_count,
    })
}

/// Per-sample perturbation used by [`perturb`]; exposed so evaluation can
/// perturb one sample at a time with the same stream layout.
pub fn perturb_sample(
    cs: &ChannelSet,
    h: Arc<ComplexMatrix>,
    gamma: f64,
    seed: u64,
    index: u64,
) -> ChannelSet {
    ChannelSet {
        h,
        g: perturb_matrix(&cs.g, gamma, seed, "perturb-g", index),
        d: perturb_matrix(&cs.d, gamma, seed, "perturb-d", index),
        geometry: cs.geometry,
    }
}

fn perturb_matrix(
    m: &ComplexMatrix,
    gamma: f64,
    seed: u64,
    tag: &str,
    index: u64,
) -> ComplexMatrix {
    let count = m.as_slice().len();
    if count == 0 {
        return m.clone();
    }
    let mean_abs = m.as_slice().iter().map(|z| z.norm()).sum::<f64>() / count as f64;
    let sigma = gamma * mean_abs / 2f64.sqrt();
    let mut rng = rng_for(seed, tag, index);
    let mut out = m.clone();
    for z in out.as_mut_slice() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *z += C64::new(re * sigma, im * sigma);
    }
    out
}

/// Phase in `[-pi, pi)`, with `arg(0) = 0`.
pub fn wrapped_arg(z: C64) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        return 0.0;
    }
    let a = z.im.atan2(z.re);
    if a >= PI {
        a - 2.0 * PI
    } else {
        a
    }
}

/// Per-antenna feature tensor of shape `(4U, H_ris, W_ris)`. For antenna `n`
/// the maps hold `|g_1n|, arg g_1n, ..., |g_Un|, arg g_Un, |j_1n|, arg j_1n,
/// ..., |j_Un|, arg j_Un` with `J = D H^+`.
pub fn build_features(cs: &ChannelSet) -> RealTensor3 {
    let h_pinv = pseudoinverse(&cs.h);
    build_features_with_pinv(cs, &h_pinv)
}

/// [`build_features`] with a precomputed `H^+`, for datasets that share `H`.
pub fn build_features_with_pinv(cs: &ChannelSet, h_pinv: &ComplexMatrix) -> RealTensor3 {
    let geo = cs.geometry;
    let u_count = geo.users;
    let n_count = geo.ris_elements();
    let j = matmul(&cs.d, h_pinv).expect("D and H+ shapes follow from the geometry");
    let mut t = RealTensor3::zeros(4 * u_count, geo.ris_height, geo.ris_width);
    for u in 0..u_count {
        for n in 0..n_count {
            let g = cs.g[(u, n)];
            let jv = j[(u, n)];
            let base = n;
            let plane = n_count;
            let data = t.as_mut_slice();
            data[(2 * u) * plane + base] = g.norm();
            data[(2 * u + 1) * plane + base] = wrapped_arg(g);
            data[(2 * u_count + 2 * u) * plane + base] = jv.norm();
            data[(2 * u_count + 2 * u + 1) * plane + base] = wrapped_arg(jv);
        }
    }
    t
}

/// Relative residual `||(G Phi + J) H - (G Phi H + D)||_F / ||G Phi H + D||_F`
/// of the equivalent-channel form. Requires `rank(H) = M`.
pub fn equivalent_channel_check(cs: &ChannelSet, phi: &PhaseField) -> Result<f64> {
    let m = cs.geometry.bs_antennas;
    let r = rank(&cs.h, 1e-10);
    if r != m {
        return Err(Error::RankDeficient {
            rank: r,
            expected: m,
        });
    }
    let j = matmul(&cs.d, &pseudoinverse(&cs.h))?;
    let phases = phi.unit_phasors();
    let mut g_phi = cs.g.clone();
    for u in 0..g_phi.rows() {
        for (n, p) in phases.iter().enumerate() {
            g_phi[(u, n)] *= p;
        }
    }
    let lhs = matmul(&g_phi.add(&j)?, &cs.h)?;
    let rhs = effective_channel(cs, phi)?;
    let denom = rhs.frobenius_norm();
    let num = lhs.sub(&rhs)?.frobenius_norm();
    Ok(if denom == 0.0 { num } else { num / denom })
}
