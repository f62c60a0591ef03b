//! Synthetic geometric channel model.
//!
//! Coordinates are metres. The RIS lies in the plane `x = ris_center.x` and
//! faces `+x`; grid row `h` runs downward along `-z` and column `w` along
//! `+y`. The BS is a square `sqrt(M) x sqrt(M)` planar array in the plane
//! `x = bs_center.x`, rows along `-z` and columns along `+y`.
//!
//! * `H` is the sum of a line-of-sight path and one specular reflection off a
//!   wall `y = bs_wall_y` next to the BS (image-source method). Both paths
//!   use planar wavefronts, so each is rank one and `rank(H) = 2`.
//! * Row `u` of `G` is the far-field steering vector from the RIS toward the
//!   user, optionally mixed with an i.i.d. Rayleigh term.
//! * `D` is a single-bounce path BS -> reflector point -> user, rescaled so
//!   that its mean power is `direct_path_fraction` times the mean power of
//!   the cascaded channel `G H` over the whole dataset.
//!
//! Amplitudes follow free-space path loss `lambda / (4 pi d)` per hop.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ChannelDataset, Geometry};
use crate::error::{Error, Result};
use crate::numerics::{matmul, ComplexMatrix, C64};
use crate::seed::rng_for;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Parameters of the synthetic scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSpec {
    pub ris_width: usize,
    pub ris_height: usize,
    pub users: usize,
    pub bs_antennas: usize,
    pub carrier_hz: f64,
    /// BS element spacing in wavelengths.
    pub bs_spacing: f64,
    /// RIS element spacing in wavelengths.
    pub ris_spacing: f64,
    pub bs_center: [f64; 3],
    pub ris_center: [f64; 3],
    /// Reflecting wall `y = bs_wall_y` producing the second BS->RIS path.
    pub bs_wall_y: f64,
    pub wall_reflection_gain: f64,
    /// Scatterer for the weak direct path.
    pub direct_reflector: [f64; 3],
    pub direct_path_fraction: f64,
    /// Power fraction of the Rayleigh component in `G` (0 = pure LoS).
    pub diffuse_fraction: f64,
    pub user_area_x: [f64; 2],
    pub user_area_y: [f64; 2],
    pub user_height: f64,
    pub min_user_separation: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            ris_width: 16,
            ris_height: 16,
            users: 2,
            bs_antennas: 9,
            carrier_hz: 5.8e9,
            bs_spacing: 0.5,
            ris_spacing: 0.25,
            bs_center: [40.0, -30.0, 15.0],
            ris_center: [0.0, 0.0, 10.0],
            bs_wall_y: -40.0,
            wall_reflection_gain: 0.6,
            direct_reflector: [35.0, 25.0, 5.0],
            direct_path_fraction: 1e-2,
            diffuse_fraction: 0.0,
            user_area_x: [5.0, 35.0],
            user_area_y: [-10.0, 20.0],
            user_height: 1.5,
            min_user_separation: 2.0,
            train_samples: 5000,
            test_samples: 1024,
        }
    }
}

impl ChannelSpec {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(
            self.ris_width,
            self.ris_height,
            self.users,
            self.bs_antennas,
        )
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn validate(&self) -> Result<()> {
        let side = (self.bs_antennas as f64).sqrt().round() as usize;
        if side * side != self.bs_antennas {
            return Err(Error::Geometry(format!(
                "planar BS array needs a square antenna count, got M={}",
                self.bs_antennas
            )));
        }
        if !(self.bs_spacing > 0.0 && self.ris_spacing > 0.0) {
            return Err(Error::InvalidArgument(
                "antenna spacings must be positive".into(),
            ));
        }
        if !(self.carrier_hz > 0.0) {
            return Err(Error::InvalidArgument(
                "carrier frequency must be positive".into(),
            ));
        }
        if self.train_samples + self.test_samples == 0 {
            return Err(Error::InvalidArgument(
                "sample count must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.diffuse_fraction) {
            return Err(Error::InvalidArgument(
                "diffuse_fraction must be in [0, 1)".into(),
            ));
        }
        if !(self.direct_path_fraction >= 0.0) {
            return Err(Error::InvalidArgument(
                "direct_path_fraction must be >= 0".into(),
            ));
        }
        if self.user_area_x[1] < self.user_area_x[0] || self.user_area_y[1] < self.user_area_y[0] {
            return Err(Error::InvalidArgument(
                "user area bounds are reversed".into(),
            ));
        }
        self.geometry().map(|_| ())
    }

    fn ris_offsets(&self) -> Vec<[f64; 3]> {
        let d = self.ris_spacing * self.wavelength();
        let (w_count, h_count) = (self.ris_width, self.ris_height);
        let mut out = Vec::with_capacity(w_count * h_count);
        for h in 0..h_count {
            for w in 0..w_count {
                out.push([
                    0.0,
                    (w as f64 - (w_count as f64 - 1.0) / 2.0) * d,
                    -(h as f64 - (h_count as f64 - 1.0) / 2.0) * d,
                ]);
            }
        }
        out
    }

    fn bs_offsets(&self) -> Vec<[f64; 3]> {
        let side = (self.bs_antennas as f64).sqrt().round() as usize;
        let d = self.bs_spacing * self.wavelength();
        let mut out = Vec::with_capacity(self.bs_antennas);
        for r in 0..side {
            for c in 0..side {
                out.push([
                    0.0,
                    (c as f64 - (side as f64 - 1.0) / 2.0) * d,
                    -(r as f64 - (side as f64 - 1.0) / 2.0) * d,
                ]);
            }
        }
        out
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Planar-wavefront steering phases `exp(j k r . dir)` for element offsets.
fn steering(offsets: &[[f64; 3]], dir: [f64; 3], k: f64) -> Vec<C64> {
    offsets
        .iter()
        .map(|&r| C64::from_polar(1.0, k * dot(r, dir)))
        .collect()
}

fn free_space(lambda: f64, dist: f64) -> f64 {
    lambda / (4.0 * PI * dist)
}

fn bs_ris_channel(spec: &ChannelSpec) -> ComplexMatrix {
    let lambda = spec.wavelength();
    let k = 2.0 * PI / lambda;
    let ris = spec.ris_offsets();
    let bs = spec.bs_offsets();

    let mut h = ComplexMatrix::zeros(ris.len(), bs.len());
    let mut add_path = |source: [f64; 3], bs_elems: &[[f64; 3]], gain: f64| {
        let dist = norm(sub(spec.ris_center, source));
        let depart = unit(sub(spec.ris_center, source));
        let arrive = unit(sub(source, spec.ris_center));
        let a_ris = steering(&ris, arrive, k);
        let a_bs = steering(bs_elems, depart, k);
        let coeff = C64::from_polar(gain * free_space(lambda, dist), -k * dist);
        for (n, &an) in a_ris.iter().enumerate() {
            for (m, &am) in a_bs.iter().enumerate() {
                h[(n, m)] += coeff * an * am;
            }
        }
    };
    add_path(spec.bs_center, &bs, 1.0);
    // image of the BS array mirrored across the wall y = bs_wall_y
    let image = [
        spec.bs_center[0],
        2.0 * spec.bs_wall_y - spec.bs_center[1],
        spec.bs_center[2],
    ];
    let mirrored: Vec<[f64; 3]> = bs.iter().map(|r| [r[0], -r[1], r[2]]).collect();
    add_path(image, &mirrored, spec.wall_reflection_gain);
    h
}

fn draw_users(spec: &ChannelSpec, rng: &mut impl Rng) -> Result<Vec<[f64; 3]>> {
    const MAX_ATTEMPTS: usize = 10_000;
    let mut users: Vec<[f64; 3]> = Vec::with_capacity(spec.users);
    let mut attempts = 0;
    while users.len() < spec.users {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Geometry(format!(
                "cannot place {} users {} m apart inside the user area",
                spec.users, spec.min_user_separation
            )));
        }
        let p = [
            rng.random_range(spec.user_area_x[0]..=spec.user_area_x[1]),
            rng.random_range(spec.user_area_y[0]..=spec.user_area_y[1]),
            spec.user_height,
        ];
        if users
            .iter()
            .all(|&q| norm(sub(p, q)) >= spec.min_user_separation)
        {
            users.push(p);
        }
    }
    Ok(users)
}

fn user_channels(
    spec: &ChannelSpec,
    users: &[[f64; 3]],
    rng: &mut impl Rng,
) -> (ComplexMatrix, ComplexMatrix) {
    let lambda = spec.wavelength();
    let k = 2.0 * PI / lambda;
    let ris = spec.ris_offsets();
    let bs = spec.bs_offsets();
    let los_scale = (1.0 - spec.diffuse_fraction).sqrt();
    let diffuse_scale = (spec.diffuse_fraction / 2.0).sqrt();

    let mut g = ComplexMatrix::zeros(users.len(), ris.len());
    let mut d = ComplexMatrix::zeros(users.len(), bs.len());
    let to_reflector = sub(spec.direct_reflector, spec.bs_center);
    let bs_leg = norm(to_reflector);
    let a_bs = steering(&bs, unit(to_reflector), k);
    for (u, &p) in users.iter().enumerate() {
        let dist = norm(sub(p, spec.ris_center));
        let amp = free_space(lambda, dist);
        let a_ris = steering(&ris, unit(sub(p, spec.ris_center)), k);
        let coeff = C64::from_polar(amp * los_scale, -k * dist);
        for (n, &a) in a_ris.iter().enumerate() {
            let mut v = coeff * a;
            if spec.diffuse_fraction > 0.0 {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                v += C64::new(re, im) * (amp * diffuse_scale);
            }
            g[(u, n)] = v;
        }
        let total = bs_leg + norm(sub(p, spec.direct_reflector));
        let coeff = C64::from_polar(free_space(lambda, total), -k * total);
        for (m, &a) in a_bs.iter().enumerate() {
            d[(u, m)] = coeff * a;
        }
    }
    (g, d)
}

fn mean_power(m: &ComplexMatrix) -> f64 {
    m.frobenius_norm_sqr() / m.as_slice().len().max(1) as f64
}

/// Generates a dataset deterministically from `(spec, seed)`. The first
/// `train_samples` samples form the train split.
pub fn synthesize_dataset(spec: &ChannelSpec, seed: u64) -> Result<ChannelDataset> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let h = bs_ris_channel(spec);
    let count = spec.train_samples + spec.test_samples;

    let mut pairs = Vec::with_capacity(count);
    let mut cascaded_power = 0.0;
    let mut direct_power = 0.0;
    for i in 0..count {
        let mut rng = rng_for(seed, "channel-sample", i as u64);
        let users = draw_users(spec, &mut rng)?;
        let (g, d) = user_channels(spec, &users, &mut rng);
        cascaded_power += mean_power(&matmul(&g, &h)?);
        direct_power += mean_power(&d);
        pairs.push((g, d));
    }
    let scale = if spec.direct_path_fraction == 0.0 || direct_power == 0.0 {
        0.0
    } else {
        (spec.direct_path_fraction * cascaded_power / direct_power).sqrt()
    };
    for (_, d) in &mut pairs {
        *d = d.scaled_real(scale);
    }
    ChannelDataset::new(geometry, h, pairs, spec.train_samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::singular_values;

    fn small_spec() -> ChannelSpec {
        ChannelSpec {
            ris_width: 8,
            ris_height: 8,
            bs_antennas: 4,
            train_samples: 6,
            test_samples: 2,
            ..ChannelSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synthesize_dataset(&small_spec(), 5).unwrap();
        let b = synthesize_dataset(&small_spec(), 5).unwrap();
        assert_eq!(a, b);
        let c = synthesize_dataset(&small_spec(), 6).unwrap();
        assert_ne!(a.samples()[0].g, c.samples()[0].g);
    }

    #[test]
    fn zero_direct_fraction_gives_zero_d() {
        let spec = ChannelSpec {
            direct_path_fraction: 0.0,
            ..small_spec()
        };
        let ds = synthesize_dataset(&spec, 1).unwrap();
        assert!(ds.samples().iter().all(|s| s.d.is_zero()));
    }

    #[test]
    fn direct_path_power_fraction() {
        let ds = synthesize_dataset(&small_spec(), 2).unwrap();
        let (mut pc, mut pd) = (0.0, 0.0);
        for s in ds.samples() {
            pc += mean_power(&matmul(&s.g, &s.h).unwrap());
            pd += mean_power(&s.d);
        }
        assert!((pd / pc / 1e-2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn default_h_has_rank_two() {
        let spec = ChannelSpec {
            train_samples: 1,
            test_samples: 0,
            ..ChannelSpec::default()
        };
        let ds = synthesize_dataset(&spec, 0).unwrap();
        assert_eq!(ds.h().shape(), (256, 9));
        let s = singular_values(ds.h());
        let above = s.iter().filter(|&&x| x > 1e-8 * s[0]).count();
        assert!(above >= 2, "singular values {s:?}");
    }

    #[test]
    fn users_respect_min_separation() {
        let spec = small_spec();
        let mut rng = rng_for(3, "t", 0);
        for _ in 0..50 {
            let u = draw_users(&spec, &mut rng).unwrap();
            assert!(norm(sub(u[0], u[1])) >= 2.0);
        }
        let crowded = ChannelSpec {
            users: 4,
            user_area_x: [0.0, 1.0],
            user_area_y: [0.0, 1.0],
            ..spec
        };
        assert!(matches!(
            draw_users(&crowded, &mut rng),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn rejects_non_square_bs_array() {
        let spec = ChannelSpec {
            bs_antennas: 6,
            ..small_spec()
        };
        assert!(matches!(
            synthesize_dataset(&spec, 0),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn steering_rows_have_unit_modulus_pattern() {
        let ds = synthesize_dataset(&small_spec(), 4).unwrap();
        let g = &ds.samples()[0].g;
        let a0 = g[(0, 0)].norm();
        assert!(g
            .row(0)
            .iter()
            .all(|z| (z.norm() - a0).abs() < 1e-12 * a0.max(1e-300) + 1e-18));
    }
}
