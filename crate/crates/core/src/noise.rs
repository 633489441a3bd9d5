//! Low-dose projection simulation: compound Poisson-Gaussian counts and the
//! log transform back to line integrals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Image, Sinogram, SinogramDomain};
use crate::projector::Projector;

/// Incident intensities evaluated in the low-dose study, photons per ray.
pub const DOSE_LEVELS: [f64; 4] = [1e5, 5e4, 1e4, 5e3];

/// Electronic noise variance (counts²) used when none is configured.
pub const DEFAULT_ELECTRONIC_VARIANCE: f64 = 10.0;

/// Counts are floored at this value before the log transform.
pub const COUNT_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    incident_intensity: f64,
    electronic_variance: f64,
    seed: u64,
}

impl NoiseModel {
    pub fn new(incident_intensity: f64, electronic_variance: f64, seed: u64) -> Result<Self> {
        if !(incident_intensity.is_finite() && incident_intensity > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "incident intensity must be positive, got {incident_intensity}"
            )));
        }
        if !(electronic_variance.is_finite() && electronic_variance >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "electronic variance must be >= 0, got {electronic_variance}"
            )));
        }
        Ok(Self {
            incident_intensity,
            electronic_variance,
            seed,
        })
    }

    pub fn incident_intensity(&self) -> f64 {
        self.incident_intensity
    }

    pub fn electronic_variance(&self) -> f64 {
        self.electronic_variance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Draws `Poisson(I exp(-l_i)) + Normal(0, σ_e²)` independently per bin.
    ///
    /// The generator is ChaCha8 keyed by the model seed, so the draw is a
    /// pure function of (seed, clean sinogram).
    pub fn simulate_counts(&self, clean: &Sinogram) -> Result<Sinogram> {
        if clean.domain() != SinogramDomain::PostLog {
            return Err(Error::InvalidParameter(
                "count simulation expects post-log line integrals".into(),
            ));
        }
        let negatives = clean.values().iter().filter(|&&l| l < 0.0).count();
        if negatives > 0 {
            log::warn!("{negatives} negative line integrals in clean sinogram");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let electronic =
            Normal::new(0.0, self.electronic_variance.sqrt()).map_err(|e| Error::Numeric(e.to_string()))?;
        let counts = clean
            .values()
            .iter()
            .map(|&l| {
                let mean = self.incident_intensity * (-l).exp();
                let photons = if mean > 0.0 && mean.is_finite() {
                    Poisson::new(mean).map(|d| d.sample(&mut rng)).unwrap_or(mean)
                } else {
                    0.0
                };
                let e = if self.electronic_variance > 0.0 {
                    electronic.sample(&mut rng)
                } else {
                    0.0
                };
                photons + e
            })
            .collect();
        Ok(Sinogram::from_raw(
            clean.n_views(),
            clean.n_bins(),
            SinogramDomain::PreLogCounts,
            counts,
        ))
    }

    /// `y_i = ln(I / max(counts_i, 1))`.
    pub fn log_transform(&self, counts: &Sinogram) -> Result<Sinogram> {
        if counts.domain() != SinogramDomain::PreLogCounts {
            return Err(Error::InvalidParameter("log transform expects pre-log counts".into()));
        }
        let values = counts
            .values()
            .iter()
            .map(|&c| (self.incident_intensity / c.max(COUNT_FLOOR)).ln())
            .collect();
        Ok(Sinogram::from_raw(
            counts.n_views(),
            counts.n_bins(),
            SinogramDomain::PostLog,
            values,
        ))
    }

    /// Forward projects `x`, simulates low-dose counts and log transforms,
    /// returning the training pair `(y, x)`.
    pub fn make_low_dose_pair(&self, x: &Image, projector: &Projector) -> Result<(Sinogram, Image)> {
        let clean = projector.forward(x)?;
        let counts = self.simulate_counts(&clean)?;
        Ok((self.log_transform(&counts)?, x.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ImageShape, ScanGeometry};

    fn flat(n: usize, l: f64) -> Sinogram {
        Sinogram::from_values(1, n, SinogramDomain::PostLog, vec![l; n]).unwrap()
    }

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn poisson_mean_at_zero_attenuation() {
        let m = NoiseModel::new(1e5, 0.0, 11).unwrap();
        let c = m.simulate_counts(&flat(10_000, 0.0)).unwrap();
        let (mean, _) = moments(c.values());
        assert!((mean - 1e5).abs() <= 3.0 * (1e5f64 / 1e4).sqrt(), "{mean}");
    }

    #[test]
    fn variance_includes_electronic_noise() {
        let m = NoiseModel::new(1e4, 100.0, 5).unwrap();
        let c = m.simulate_counts(&flat(100_000, 0.0)).unwrap();
        let (_, var) = moments(c.values());
        assert!((var - (1e4 + 100.0)).abs() / (1e4 + 100.0) < 0.1, "{var}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let m = NoiseModel::new(5e4, 10.0, 42).unwrap();
        let s = flat(500, 1.3);
        assert_eq!(m.simulate_counts(&s).unwrap(), m.simulate_counts(&s).unwrap());
        assert_ne!(
            m.simulate_counts(&s).unwrap(),
            m.with_seed(43).simulate_counts(&s).unwrap()
        );
    }

    #[test]
    fn opaque_rays_leave_only_electronic_noise() {
        let m = NoiseModel::new(1e5, 10.0, 1).unwrap();
        let c = m.simulate_counts(&flat(5000, 1e6)).unwrap();
        let (mean, var) = moments(c.values());
        assert!(mean.abs() < 0.3 && (var - 10.0).abs() < 1.5, "{mean} {var}");
    }

    #[test]
    fn log_transform_cases() {
        let m = NoiseModel::new(1e5, 0.0, 0).unwrap();
        let counts = Sinogram::from_values(
            1,
            3,
            SinogramDomain::PreLogCounts,
            vec![1e5, 1e5 / std::f64::consts::E, -5.0],
        )
        .unwrap();
        let y = m.log_transform(&counts).unwrap();
        assert_eq!(y.domain(), SinogramDomain::PostLog);
        assert_eq!(y.values()[0], 0.0);
        assert!((y.values()[1] - 1.0).abs() < 1e-12);
        assert_eq!(y.values()[2], (1e5f64).ln());
        assert!(m.log_transform(&y).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseModel::new(0.0, 1.0, 0).is_err());
        assert!(NoiseModel::new(1.0, -1.0, 0).is_err());
    }

    #[test]
    fn low_dose_pair_limits() {
        let g = ScanGeometry::new(10.0, 20.0, 0.2, 32, 12, std::f64::consts::TAU, 1.6).unwrap();
        let shape = ImageShape::new(8, 8, 0.2).unwrap();
        let p = Projector::new(g, shape);
        let x = Image::new(8, 8, 0.2, 0.3).unwrap();
        let ax = p.forward(&x).unwrap();

        let m = NoiseModel::new(1e12, 0.0, 3).unwrap();
        let (y, x_back) = m.make_low_dose_pair(&x, &p).unwrap();
        assert_eq!(x_back, x);
        let err: f64 = y.values().iter().zip(ax.values()).map(|(a, b)| (a - b).powi(2)).sum();
        let nrm: f64 = ax.values().iter().map(|a| a * a).sum();
        assert!((err / nrm).sqrt() < 1e-3);

        let zero = Image::zeros(shape);
        let m = NoiseModel::new(1e5, 0.0, 3).unwrap();
        let (y0, _) = m.make_low_dose_pair(&zero, &p).unwrap();
        assert!(y0.values().iter().all(|v| v.abs() < 0.02));
        let (y1, _) = m.with_seed(4).make_low_dose_pair(&zero, &p).unwrap();
        assert_ne!(y0, y1);
    }
}
