//! Gaussian-window short-time Fourier transform.
//!
//! Frames are indexed by time `n` in `[0, N)` and bins by `m` in `[0, M)`, bin
//! `m` standing for the normalized frequency `m / M`. The signal is taken to be
//! zero outside `[0, N)` and the window is truncated at `±window_halfwidth`
//! samples, so
//!
//! ```text
//! F[n, m] = Σ_{|n-l| <= H} x(l) θ(n - l) exp(-j 2π l m / M)
//! ```
//!
//! Synthesis inverts this exactly with a per-sample window-compensated overlap
//! sum; see [`istft`].

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SampledSignal;

/// Analysis parameters: `N` samples/frames, `M` frequency bins, time spread `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StftConfigRepr")]
pub struct StftConfig {
    pub n_samples: usize,
    pub n_bins: usize,
    pub time_spread: f64,
    pub window_halfwidth: usize,
}

#[derive(Deserialize)]
struct StftConfigRepr {
    n_samples: usize,
    n_bins: usize,
    time_spread: f64,
    #[serde(default)]
    window_halfwidth: Option<usize>,
}

impl TryFrom<StftConfigRepr> for StftConfig {
    type Error = Error;

    fn try_from(repr: StftConfigRepr) -> Result<Self> {
        let cfg = StftConfig::new(repr.n_samples, repr.n_bins, repr.time_spread)?;
        match repr.window_halfwidth {
            Some(hw) => cfg.with_window_halfwidth(hw),
            None => Ok(cfg),
        }
    }
}

impl StftConfig {
    /// Builds a validated config with the window truncated at `ceil(4L)`.
    pub fn new(n_samples: usize, n_bins: usize, time_spread: f64) -> Result<Self> {
        if !(time_spread > 0.0 && time_spread.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "time spread must be positive and finite, got {time_spread}"
            )));
        }
        let cfg = Self {
            n_samples,
            n_bins,
            time_spread,
            window_halfwidth: (4.0 * time_spread).ceil() as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_window_halfwidth(mut self, halfwidth: usize) -> Result<Self> {
        self.window_halfwidth = halfwidth;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(Error::InvalidConfig("need at least one sample".into()));
        }
        if self.n_bins < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least two frequency bins, got {}",
                self.n_bins
            )));
        }
        if !(self.time_spread > 0.0 && self.time_spread.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "time spread must be positive and finite, got {}",
                self.time_spread
            )));
        }
        let min_hw = (4.0 * self.time_spread).ceil() as usize;
        if self.window_halfwidth < min_hw {
            return Err(Error::InvalidConfig(format!(
                "window half-width {} is below ceil(4L) = {min_hw}",
                self.window_halfwidth
            )));
        }
        Ok(())
    }

    /// Spread of a ridge across bins, `σ_d = sqrt(M / (π L))`.
    pub fn sigma_d(&self) -> f64 {
        (self.n_bins as f64 / (PI * self.time_spread)).sqrt()
    }

    /// Half-width of the neighborhood removed after each ridge extraction,
    /// `ceil(3 σ_d + 1)`.
    pub fn discard_halfwidth(&self) -> usize {
        (3.0 * self.sigma_d() + 1.0).ceil() as usize
    }

    /// Half-height of a reconstruction ribbon, `ceil(3 σ_d)`. Also the margin
    /// kept between admissible ridges and the band edges.
    pub fn ribbon_halfwidth(&self) -> usize {
        (3.0 * self.sigma_d()).ceil() as usize
    }
}

/// Samples of `θ(n) = exp(-n² / 2L²) / (sqrt(2π) L)` for `|n| <= halfwidth`.
#[derive(Clone, Debug)]
pub struct GaussianWindow {
    halfwidth: usize,
    values: Vec<f64>,
}

impl GaussianWindow {
    pub fn new(time_spread: f64, halfwidth: usize) -> Result<Self> {
        if !(time_spread > 0.0 && time_spread.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "time spread must be positive and finite, got {time_spread}"
            )));
        }
        let norm = 1.0 / ((2.0 * PI).sqrt() * time_spread);
        let values = (0..=2 * halfwidth)
            .map(|i| {
                let n = i as f64 - halfwidth as f64;
                norm * (-n * n / (2.0 * time_spread * time_spread)).exp()
            })
            .collect();
        Ok(Self { halfwidth, values })
    }

    pub fn halfwidth(&self) -> usize {
        self.halfwidth
    }

    /// `θ(offset)`, zero beyond the truncation.
    pub fn at(&self, offset: i64) -> f64 {
        if offset.unsigned_abs() as usize > self.halfwidth {
            0.0
        } else {
            self.values[(offset + self.halfwidth as i64) as usize]
        }
    }

    /// Values ordered from `-halfwidth` to `+halfwidth`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn gaussian_window(config: &StftConfig) -> Result<GaussianWindow> {
    GaussianWindow::new(config.time_spread, config.window_halfwidth)
}

/// Complex STFT coefficients, one frame (row) per time index.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeFrequencyMap {
    config: StftConfig,
    coefficients: Vec<Complex64>,
}

impl TimeFrequencyMap {
    /// Wraps a row-major `N × M` coefficient array.
    pub fn from_parts(config: StftConfig, coefficients: Vec<Complex64>) -> Result<Self> {
        config.validate()?;
        let expected = config.n_samples * config.n_bins;
        if coefficients.len() != expected {
            return Err(Error::Dimension {
                what: "time-frequency coefficients",
                expected,
                actual: coefficients.len(),
            });
        }
        Ok(Self { config, coefficients })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn n_frames(&self) -> usize {
        self.config.n_samples
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn frame(&self, n: usize) -> &[Complex64] {
        let m = self.config.n_bins;
        &self.coefficients[n * m..(n + 1) * m]
    }

    pub fn get(&self, n: usize, m: usize) -> Complex64 {
        self.coefficients[n * self.config.n_bins + m]
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        Self {
            config: self.config,
            coefficients: self.coefficients.iter().map(|z| z * factor).collect(),
        }
    }

    /// Keeps coefficients where `keep(n, m)` holds and zeroes the rest.
    pub fn masked(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let m_bins = self.config.n_bins;
        let coefficients = self
            .coefficients
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                if keep(i / m_bins, i % m_bins) {
                    z
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        Self {
            config: self.config,
            coefficients,
        }
    }

    /// `S[n, m] = |F[n, m]|²`.
    pub fn spectrogram(&self) -> Spectrogram {
        Spectrogram {
            n_frames: self.config.n_samples,
            n_bins: self.config.n_bins,
            data: self.coefficients.iter().map(|z| z.norm_sqr()).collect(),
        }
    }
}

/// Nonnegative real `N × M` matrix; column `s_n` is the frame at time `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    n_frames: usize,
    n_bins: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub fn from_parts(n_frames: usize, n_bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_frames * n_bins {
            return Err(Error::Dimension {
                what: "spectrogram entries",
                expected: n_frames * n_bins,
                actual: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "spectrogram entries must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(Self { n_frames, n_bins, data })
    }

    /// Builds a spectrogram from per-frame columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let n_bins = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().find(|c| c.len() != n_bins) {
            return Err(Error::Dimension {
                what: "spectrogram column length",
                expected: n_bins,
                actual: bad.len(),
            });
        }
        Self::from_parts(columns.len(), n_bins, columns.concat())
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, n: usize) -> &[f64] {
        &self.data[n * self.n_bins..(n + 1) * self.n_bins]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_bins)
    }

    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.data[n * self.n_bins + m]
    }

    /// Scales every column to unit sum.
    pub fn normalized_columns(&self) -> Result<Spectrogram> {
        let mut data = self.data.clone();
        for (n, col) in data.chunks_exact_mut(self.n_bins).enumerate() {
            let total: f64 = col.iter().sum();
            if total <= 0.0 || !total.is_finite() {
                return Err(Error::EmptyColumn(n));
            }
            col.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Spectrogram {
            n_frames: self.n_frames,
            n_bins: self.n_bins,
            data,
        })
    }
}

pub fn spectrogram(tfr: &TimeFrequencyMap) -> Spectrogram {
    tfr.spectrogram()
}

/// Forward transform of a length-`N` signal.
pub fn stft(signal: &[Complex64], config: &StftConfig) -> Result<TimeFrequencyMap> {
    config.validate()?;
    if signal.len() != config.n_samples {
        return Err(Error::Dimension {
            what: "signal length",
            expected: config.n_samples,
            actual: signal.len(),
        });
    }
    let window = gaussian_window(config)?;
    let n_bins = config.n_bins;
    let fft = FftPlanner::new().plan_fft_forward(n_bins);

    let frame = |n: usize, out: &mut [Complex64]| {
        out.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        let (lo, hi) = support(n, window.halfwidth(), config.n_samples);
        for l in lo..hi {
            // Folding l onto l mod M keeps the absolute phase reference.
            out[l % n_bins] += signal[l] * window.at(n as i64 - l as i64);
        }
        fft.process(out);
    };

    let mut coefficients = vec![Complex64::new(0.0, 0.0); config.n_samples * n_bins];
    crate::par::for_each_chunk(&mut coefficients, n_bins, frame);
    TimeFrequencyMap::from_parts(*config, coefficients)
}

/// Inverse transform:
///
/// ```text
/// x̂(l) = Σ_n θ(n - l) Σ_m F[n, m] exp(+j 2π l m / M) / (M Σ_n θ(n - l)²)
/// ```
///
/// This is the least-squares inverse and reproduces `x` exactly when the
/// window support does not exceed `M` samples.
pub fn istft(tfr: &TimeFrequencyMap) -> Result<SampledSignal> {
    let config = tfr.config();
    let window = gaussian_window(config)?;
    let n = config.n_samples;
    let n_bins = config.n_bins;
    let ifft = FftPlanner::new().plan_fft_inverse(n_bins);

    let mut frames = tfr.coefficients().to_vec();
    crate::par::for_each_chunk(&mut frames, n_bins, |i, out| {
        out.copy_from_slice(tfr.frame(i));
        ifft.process(out);
    });

    let mut numer = vec![Complex64::new(0.0, 0.0); n];
    let mut denom = vec![0.0; n];
    for (t, frame) in frames.chunks_exact(n_bins).enumerate() {
        let (lo, hi) = support(t, window.halfwidth(), n);
        for l in lo..hi {
            let w = window.at(t as i64 - l as i64);
            numer[l] += frame[l % n_bins] * w;
            denom[l] += w * w;
        }
    }
    numer
        .into_iter()
        .zip(denom)
        .enumerate()
        .map(|(l, (num, den))| {
            if den > 0.0 {
                Ok(num / (n_bins as f64 * den))
            } else {
                Err(Error::SingularSynthesis(l))
            }
        })
        .collect()
}

/// `g(m) = (2 sqrt(π) L / M) exp(-(2π m L / M)²)`: the squared modulus of the
/// window spectrum, normalized to unit mass over bins.
pub fn spectral_kernel(offset: i64, config: &StftConfig) -> f64 {
    let m = config.n_bins as f64;
    let l = config.time_spread;
    let x = 2.0 * PI * offset as f64 * l / m;
    2.0 * PI.sqrt() * l / m * (-x * x).exp()
}

/// Signed circular distance from `center` to `bin`, in `(-M/2, M/2]`.
pub fn circular_offset(bin: usize, center: usize, n_bins: usize) -> i64 {
    let d = (bin as i64 - center as i64).rem_euclid(n_bins as i64);
    if d > n_bins as i64 / 2 {
        d - n_bins as i64
    } else {
        d
    }
}

fn support(center: usize, halfwidth: usize, len: usize) -> (usize, usize) {
    (center.saturating_sub(halfwidth), (center + halfwidth + 1).min(len))
}
