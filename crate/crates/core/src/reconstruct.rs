//! Mode recovery by masking the transform around a ridge and inverting.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::RidgeMatrix;
use crate::signal::SampledSignal;
use crate::tf::{circular_offset, istft, TimeFrequencyMap};

/// Bins within `halfwidth` of a ridge, circularly, in every frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RibbonMask {
    centers: Vec<usize>,
    halfwidth: usize,
    n_bins: usize,
}

impl RibbonMask {
    pub fn contains(&self, n: usize, m: usize) -> bool {
        circular_offset(m, self.centers[n], self.n_bins).unsigned_abs() as usize <= self.halfwidth
    }

    pub fn halfwidth(&self) -> usize {
        self.halfwidth
    }

    pub fn n_frames(&self) -> usize {
        self.centers.len()
    }

    /// Number of bins kept per frame.
    pub fn height(&self) -> usize {
        (2 * self.halfwidth + 1).min(self.n_bins)
    }
}

pub fn ribbon_mask(ridge: &[usize], halfwidth: usize, n_bins: usize) -> Result<RibbonMask> {
    if let Some(b) = ridge.iter().find(|&&b| b >= n_bins) {
        return Err(Error::InvalidRidge(format!("bin {b} outside [0, {n_bins})")));
    }
    Ok(RibbonMask {
        centers: ridge.to_vec(),
        halfwidth,
        n_bins,
    })
}

/// Inverts the transform restricted to a ribbon of half-width `ceil(3 σ_d)`
/// around ridge `k`.
pub fn reconstruct_mode(tfr: &TimeFrequencyMap, ridges: &RidgeMatrix, k: usize) -> Result<SampledSignal> {
    if ridges.n_frames() != tfr.n_frames() {
        return Err(Error::Dimension {
            what: "ridge frames",
            expected: tfr.n_frames(),
            actual: ridges.n_frames(),
        });
    }
    if k >= ridges.n_components() {
        return Err(Error::InvalidRidge(format!(
            "component {k} out of {}",
            ridges.n_components()
        )));
    }
    let mask = ribbon_mask(ridges.row(k), tfr.config().ribbon_halfwidth(), tfr.n_bins())?;
    istft(&tfr.masked(|n, m| mask.contains(n, m)))
}

pub fn reconstruct_modes(tfr: &TimeFrequencyMap, ridges: &RidgeMatrix) -> Result<Vec<SampledSignal>> {
    (0..ridges.n_components())
        .map(|k| reconstruct_mode(tfr, ridges, k))
        .collect()
}

/// Reconstruction quality factor `10 log10(‖x‖² / ‖x - x̂‖²)` in dB.
pub fn rqf(truth: &[Complex64], estimate: &[Complex64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::Dimension {
            what: "estimate length",
            expected: truth.len(),
            actual: estimate.len(),
        });
    }
    let signal: f64 = truth.iter().map(|z| z.norm_sqr()).sum();
    if signal == 0.0 {
        return Err(Error::ZeroSignal);
    }
    let error: f64 = truth.iter().zip(estimate).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(10.0 * (signal / error).log10())
}
