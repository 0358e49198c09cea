//! Synthetic multicomponent signals and additive noise at a controlled SNR.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RidgeMatrix;
use crate::signal::SampledSignal;

/// Time index at which the default chirp pair crosses.
pub const CROSSING_INDEX: usize = 225;

/// One AM-FM mode `a(n) exp(j φ(n))`, with its analytic instantaneous
/// frequency in cycles per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSpec {
    amplitude: Vec<f64>,
    phase: Vec<f64>,
    inst_freq: Vec<f64>,
}

impl ModeSpec {
    pub fn new(amplitude: Vec<f64>, phase: Vec<f64>, inst_freq: Vec<f64>) -> Result<Self> {
        if phase.len() != amplitude.len() || inst_freq.len() != amplitude.len() {
            return Err(Error::Dimension {
                what: "mode phase/frequency length",
                expected: amplitude.len(),
                actual: phase.len().min(inst_freq.len()),
            });
        }
        if amplitude.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidConfig(
                "mode amplitude must be finite and nonnegative".into(),
            ));
        }
        if phase.iter().chain(&inst_freq).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("mode phase must be finite".into()));
        }
        Ok(Self {
            amplitude,
            phase,
            inst_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.amplitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitude.is_empty()
    }

    pub fn amplitude(&self) -> &[f64] {
        &self.amplitude
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    /// Instantaneous frequency `φ'(n) / 2π`.
    pub fn inst_freq(&self) -> &[f64] {
        &self.inst_freq
    }

    pub fn samples(&self) -> SampledSignal {
        self.amplitude
            .iter()
            .zip(&self.phase)
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect()
    }
}

/// Endpoints of a linear chirp in normalized frequency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChirpParams {
    pub f_start: f64,
    pub f_end: f64,
    #[serde(default = "unit")]
    pub amplitude: f64,
}

fn unit() -> f64 {
    1.0
}

impl ChirpParams {
    pub fn mode(&self, n_samples: usize) -> Result<ModeSpec> {
        linear_chirp(n_samples, self.f_start, self.f_end, self.amplitude)
    }

    /// Instantaneous frequency at sample `n` of an `n_samples`-long chirp.
    pub fn freq_at(&self, n: f64, n_samples: usize) -> f64 {
        self.f_start + (self.f_end - self.f_start) * n / n_samples as f64
    }
}

/// The default pair: one rising and one falling chirp whose instantaneous
/// frequencies meet at [`CROSSING_INDEX`] when `N = 500`.
pub fn crossing_chirps() -> [ChirpParams; 2] {
    [
        ChirpParams {
            f_start: 0.10,
            f_end: 0.35,
            amplitude: 1.0,
        },
        ChirpParams {
            f_start: 0.325,
            f_end: 0.075,
            amplitude: 1.0,
        },
    ]
}

/// `φ(n) = 2π (f₀ n + (f₁ - f₀) n² / 2N)`, so the instantaneous frequency
/// moves linearly from `f₀` at `n = 0` toward `f₁` at `n = N`.
pub fn linear_chirp(n_samples: usize, f_start: f64, f_end: f64, amplitude: f64) -> Result<ModeSpec> {
    for f in [f_start, f_end] {
        if !(0.0..0.5).contains(&f) {
            return Err(Error::InvalidConfig(format!("chirp frequency {f} outside [0, 0.5)")));
        }
    }
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "chirp amplitude must be positive, got {amplitude}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidConfig("chirp needs at least one sample".into()));
    }
    let len = n_samples as f64;
    let rate = (f_end - f_start) / len;
    let phase = (0..n_samples)
        .map(|n| {
            let n = n as f64;
            2.0 * PI * (f_start * n + rate * n * n / 2.0)
        })
        .collect();
    let inst_freq = (0..n_samples).map(|n| f_start + rate * n as f64).collect();
    ModeSpec::new(vec![amplitude; n_samples], phase, inst_freq)
}

/// A noiseless mixture with its per-mode ground truth.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// True ridge bins, `round(M φ'(n) / 2π) mod M`.
    pub ridge_bins: RidgeMatrix,
    pub clean_modes: Vec<SampledSignal>,
    pub mixture: SampledSignal,
}

pub fn synthesize(modes: &[ModeSpec], n_samples: usize, n_bins: usize) -> Result<GroundTruth> {
    if modes.is_empty() {
        return Err(Error::InvalidConfig("need at least one mode".into()));
    }
    if n_bins == 0 {
        return Err(Error::InvalidConfig("need at least one bin".into()));
    }
    if let Some(bad) = modes.iter().find(|m| m.len() != n_samples) {
        return Err(Error::Dimension {
            what: "mode length",
            expected: n_samples,
            actual: bad.len(),
        });
    }
    let clean_modes: Vec<SampledSignal> = modes.iter().map(ModeSpec::samples).collect();
    let mut mixture = SampledSignal::zeros(n_samples);
    for mode in &clean_modes {
        for (acc, z) in mixture.iter_mut().zip(mode.iter()) {
            *acc += z;
        }
    }
    let bins = modes
        .iter()
        .flat_map(|mode| {
            mode.inst_freq()
                .iter()
                .map(|f| ((n_bins as f64 * f).round() as i64).rem_euclid(n_bins as i64) as usize)
        })
        .collect();
    Ok(GroundTruth {
        ridge_bins: RidgeMatrix::from_parts(modes.len(), n_samples, bins)?,
        clean_modes,
        mixture,
    })
}

/// Distribution of the additive noise before scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseFamily {
    /// Independent standard normal real and imaginary parts.
    GaussianComplexWhite,
    /// Poisson counts on each of the real and imaginary parts, then centered.
    Poisson {
        #[serde(default = "unit")]
        rate: f64,
    },
    /// Gamma draws on each of the real and imaginary parts, then centered.
    Gamma {
        #[serde(default = "default_shape")]
        shape: f64,
        #[serde(default = "unit")]
        scale: f64,
    },
    /// Per-sample choice among families.
    Mixture { components: Vec<MixtureComponent> },
}

fn default_shape() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub family: NoiseFamily,
    pub weight: f64,
}

impl NoiseFamily {
    pub fn poisson() -> Self {
        NoiseFamily::Poisson { rate: 1.0 }
    }

    pub fn gamma() -> Self {
        NoiseFamily::Gamma { shape: 2.0, scale: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseFamily::GaussianComplexWhite => "gaussian",
            NoiseFamily::Poisson { .. } => "poisson",
            NoiseFamily::Gamma { .. } => "gamma",
            NoiseFamily::Mixture { .. } => "mixture",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseFamily::GaussianComplexWhite => Ok(()),
            NoiseFamily::Poisson { rate } if *rate > 0.0 && rate.is_finite() => Ok(()),
            NoiseFamily::Poisson { rate } => Err(Error::InvalidConfig(format!(
                "poisson rate must be positive, got {rate}"
            ))),
            NoiseFamily::Gamma { shape, scale }
                if *shape > 0.0 && *scale > 0.0 && shape.is_finite() && scale.is_finite() =>
            {
                Ok(())
            }
            NoiseFamily::Gamma { shape, scale } => Err(Error::InvalidConfig(format!(
                "gamma shape and scale must be positive, got {shape}, {scale}"
            ))),
            NoiseFamily::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidConfig("empty noise mixture".into()));
                }
                let mut total = 0.0;
                for c in components {
                    if !(c.weight >= 0.0 && c.weight.is_finite()) {
                        return Err(Error::InvalidConfig(format!(
                            "mixture weight must be nonnegative, got {}",
                            c.weight
                        )));
                    }
                    total += c.weight;
                    c.family.validate()?;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(format!(
                        "mixture weights sum to {total}, expected 1"
                    )));
                }
                Ok(())
            }
        }
    }

    fn is_centered(&self) -> bool {
        match self {
            NoiseFamily::GaussianComplexWhite => true,
            NoiseFamily::Poisson { .. } | NoiseFamily::Gamma { .. } => false,
            NoiseFamily::Mixture { components } => components.iter().all(|c| c.family.is_centered()),
        }
    }

    fn sampler(&self) -> Result<Sampler> {
        Ok(match self {
            NoiseFamily::GaussianComplexWhite => Sampler::Gaussian,
            NoiseFamily::Poisson { rate } => {
                Sampler::Poisson(Poisson::new(*rate).map_err(|e| Error::InvalidConfig(e.to_string()))?)
            }
            NoiseFamily::Gamma { shape, scale } => {
                Sampler::Gamma(Gamma::new(*shape, *scale).map_err(|e| Error::InvalidConfig(e.to_string()))?)
            }
            NoiseFamily::Mixture { components } => Sampler::Mixture(
                WeightedIndex::new(components.iter().map(|c| c.weight))
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?,
                components.iter().map(|c| c.family.sampler()).collect::<Result<_>>()?,
            ),
        })
    }
}

enum Sampler {
    Gaussian,
    Poisson(Poisson<f64>),
    Gamma(Gamma<f64>),
    Mixture(WeightedIndex<f64>, Vec<Sampler>),
}

impl Sampler {
    fn draw<R: Rng>(&self, rng: &mut R) -> Complex64 {
        match self {
            Sampler::Gaussian => Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)),
            Sampler::Poisson(d) => Complex64::new(d.sample(rng), d.sample(rng)),
            Sampler::Gamma(d) => Complex64::new(d.sample(rng), d.sample(rng)),
            Sampler::Mixture(pick, parts) => {
                let i = pick.sample(rng);
                parts[i].draw(rng)
            }
        }
    }
}

/// Noise family, target SNR in dB (`+inf` disables noise) and RNG seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    #[serde(with = "crate::io::snr_db")]
    pub snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(snr_db: f64, seed: u64) -> Self {
        Self {
            family: NoiseFamily::GaussianComplexWhite,
            snr_db,
            seed,
        }
    }

    pub fn noiseless() -> Self {
        Self::gaussian(f64::INFINITY, 0)
    }
}

#[derive(Clone, Debug)]
pub struct NoisyRealization {
    pub noisy: SampledSignal,
    pub noise: SampledSignal,
    /// `10 log10(‖clean‖² / ‖noise‖²)` of the realized noise.
    pub realized_snr_db: f64,
}

impl NoisyRealization {
    /// Mean noise modulus, the `b` of the weight interpretation
    /// `w = a / (Σ a + M b)`.
    pub fn average_noise_amplitude(&self) -> f64 {
        if self.noise.is_empty() {
            return 0.0;
        }
        self.noise.iter().map(|z| z.norm()).sum::<f64>() / self.noise.len() as f64
    }
}

/// Adds i.i.d. noise rescaled so the realized SNR equals `spec.snr_db`.
pub fn add_noise(clean: &[Complex64], spec: &NoiseSpec) -> Result<NoisyRealization> {
    spec.family.validate()?;
    if spec.snr_db.is_nan() || spec.snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidConfig(format!("invalid SNR {}", spec.snr_db)));
    }
    let clean_energy: f64 = clean.iter().map(|z| z.norm_sqr()).sum();
    if clean_energy <= 0.0 {
        return Err(Error::ZeroSignal);
    }
    if spec.snr_db == f64::INFINITY {
        return Ok(NoisyRealization {
            noisy: clean.to_vec().into(),
            noise: SampledSignal::zeros(clean.len()),
            realized_snr_db: f64::INFINITY,
        });
    }

    let sampler = spec.family.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise: Vec<Complex64> = (0..clean.len()).map(|_| sampler.draw(&mut rng)).collect();
    if !spec.family.is_centered() {
        let mean = noise.iter().sum::<Complex64>() / noise.len() as f64;
        noise.iter_mut().for_each(|z| *z -= mean);
    }
    let noise_energy: f64 = noise.iter().map(|z| z.norm_sqr()).sum();
    if noise_energy <= 0.0 {
        return Err(Error::InvalidConfig("noise realization has zero energy".into()));
    }
    let scale = (clean_energy / (noise_energy * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    noise.iter_mut().for_each(|z| *z *= scale);
    let realized: f64 = noise.iter().map(|z| z.norm_sqr()).sum();
    let noisy = clean.iter().zip(&noise).map(|(c, v)| c + v).collect();
    Ok(NoisyRealization {
        noisy,
        noise: noise.into(),
        realized_snr_db: 10.0 * (clean_energy / realized).log10(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn families() -> Vec<NoiseFamily> {
        vec![
            NoiseFamily::GaussianComplexWhite,
            NoiseFamily::poisson(),
            NoiseFamily::gamma(),
            NoiseFamily::Mixture {
                components: vec![
                    MixtureComponent {
                        family: NoiseFamily::GaussianComplexWhite,
                        weight: 0.3,
                    },
                    MixtureComponent {
                        family: NoiseFamily::gamma(),
                        weight: 0.7,
                    },
                ],
            },
        ]
    }

    #[test]
    fn chirp_validation() {
        assert!(linear_chirp(10, -0.1, 0.2, 1.0).is_err());
        assert!(linear_chirp(10, 0.1, 0.5, 1.0).is_err());
        assert!(linear_chirp(10, 0.1, 0.2, 0.0).is_err());
        assert!(linear_chirp(0, 0.1, 0.2, 1.0).is_err());
    }

    #[test]
    fn degenerate_chirp_is_a_tone() {
        let mode = linear_chirp(64, 0.2, 0.2, 1.0).unwrap();
        assert!(mode.inst_freq().iter().all(|&f| f == 0.2));
        for (n, p) in mode.phase().iter().enumerate() {
            assert!((p - 2.0 * PI * 0.2 * n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn chirp_frequency_is_linear() {
        let mode = linear_chirp(500, 0.1, 0.35, 2.0).unwrap();
        for n in 0..500 {
            assert!((mode.inst_freq()[n] - (0.1 + 0.25 * n as f64 / 500.0)).abs() < 1e-15);
        }
        // Phase increments track the frequency at the midpoint of each step.
        for n in 0..499 {
            let dphi = mode.phase()[n + 1] - mode.phase()[n];
            let mid = 0.1 + 0.25 * (n as f64 + 0.5) / 500.0;
            assert!((dphi - 2.0 * PI * mid).abs() < 1e-9);
        }
        assert!(mode.samples().iter().all(|z| (z.norm() - 2.0).abs() < 1e-12));
    }

    #[test]
    fn default_chirps_cross_at_225() {
        // Root-find the sign change of the frequency difference.
        let [a, b] = crossing_chirps();
        let diff = |n: f64| a.freq_at(n, 500) - b.freq_at(n, 500);
        let (mut lo, mut hi) = (0.0, 499.0);
        assert!(diff(lo) < 0.0 && diff(hi) > 0.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if diff(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((lo - 225.0).abs() < 1e-9);
    }

    #[test]
    fn synthesize_sums_modes() {
        let [pa, pb] = crossing_chirps();
        let modes = [pa.mode(500).unwrap(), pb.mode(500).unwrap()];
        let truth = synthesize(&modes, 500, 500).unwrap();
        for n in 0..500 {
            let rest = truth.mixture[n] - truth.clean_modes[0][n];
            assert!((rest - truth.clean_modes[1][n]).norm() < 1e-12);
        }
        let rb = &truth.ridge_bins;
        assert_eq!(rb.get(0, 0), 50);
        assert_eq!(rb.get(1, 0), 163);
        for n in 0..500 {
            let apart = rb.get(0, n) != rb.get(1, n);
            assert!(apart || (n as i64 - 225).abs() <= 2, "column {n}");
        }
        assert_eq!(rb.get(0, 225), rb.get(1, 225));
    }

    #[test]
    fn single_tone_mixture() {
        let mode = linear_chirp(32, 0.25, 0.25, 1.0).unwrap();
        let truth = synthesize(std::slice::from_ref(&mode), 32, 16).unwrap();
        assert_eq!(truth.mixture, mode.samples());
        assert!(truth.ridge_bins.row(0).iter().all(|&b| b == 4));
        assert!(synthesize(&[], 32, 16).is_err());
    }

    #[test]
    fn noiseless_flag_returns_clean() {
        let clean = linear_chirp(64, 0.1, 0.2, 1.0).unwrap().samples();
        let out = add_noise(&clean, &NoiseSpec::noiseless()).unwrap();
        assert_eq!(out.noisy, clean);
        assert_eq!(out.realized_snr_db, f64::INFINITY);
    }

    #[test]
    fn realized_snr_is_exact() {
        let clean = linear_chirp(300, 0.1, 0.2, 1.5).unwrap().samples();
        for family in families() {
            for snr in [0.0, -7.5, 12.0] {
                let spec = NoiseSpec {
                    family: family.clone(),
                    snr_db: snr,
                    seed: 3,
                };
                let out = add_noise(&clean, &spec).unwrap();
                let ratio = out.noise.energy() / clean.energy();
                assert!((ratio - 10f64.powf(-snr / 10.0)).abs() < 1e-12, "{family:?}");
                assert!((out.realized_snr_db - snr).abs() < 1e-9);
                for n in 0..300 {
                    assert!((out.noisy[n] - clean[n] - out.noise[n]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_gaussian_noise_is_centered() {
        let clean = linear_chirp(400, 0.1, 0.2, 1.0).unwrap().samples();
        for family in [NoiseFamily::poisson(), NoiseFamily::gamma()] {
            let out = add_noise(
                &clean,
                &NoiseSpec {
                    family,
                    snr_db: 0.0,
                    seed: 9,
                },
            )
            .unwrap();
            let mean = out.noise.iter().sum::<Complex64>() / 400.0;
            assert!(mean.norm() < 1e-12);
        }
    }

    #[test]
    fn gaussian_noise_mean_is_small() {
        let clean = linear_chirp(2000, 0.1, 0.2, 1.0).unwrap().samples();
        let out = add_noise(&clean, &NoiseSpec::gaussian(0.0, 17)).unwrap();
        let n = out.noise.len() as f64;
        let mean = out.noise.iter().sum::<Complex64>() / n;
        // Per-part standard deviation of the scaled noise.
        let sigma = (out.noise.energy() / (2.0 * n)).sqrt();
        assert!(mean.re.abs() < 3.0 * sigma / n.sqrt());
        assert!(mean.im.abs() < 3.0 * sigma / n.sqrt());
        assert!(out.average_noise_amplitude() > 0.0);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let clean = linear_chirp(128, 0.1, 0.3, 1.0).unwrap().samples();
        for family in families() {
            let spec = NoiseSpec {
                family,
                snr_db: -3.0,
                seed: 42,
            };
            let a = add_noise(&clean, &spec).unwrap();
            let b = add_noise(&clean, &spec).unwrap();
            assert_eq!(a.noisy, b.noisy);
            let c = add_noise(&clean, &NoiseSpec { seed: 43, ..spec }).unwrap();
            assert_ne!(a.noisy, c.noisy);
        }
    }

    #[test]
    fn noise_errors() {
        let zero = vec![Complex64::new(0.0, 0.0); 16];
        assert!(matches!(
            add_noise(&zero, &NoiseSpec::gaussian(0.0, 1)),
            Err(Error::ZeroSignal)
        ));
        let clean = vec![Complex64::new(1.0, 0.0); 16];
        let bad = NoiseSpec {
            family: NoiseFamily::Mixture {
                components: vec![MixtureComponent {
                    family: NoiseFamily::GaussianComplexWhite,
                    weight: 0.5,
                }],
            },
            snr_db: 0.0,
            seed: 1,
        };
        assert!(add_noise(&clean, &bad).is_err());
        assert!(add_noise(&clean, &NoiseSpec::gaussian(f64::NAN, 1)).is_err());
    }
}
