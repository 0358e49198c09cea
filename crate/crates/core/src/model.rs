//! Mixture observation model for spectrogram columns and Markov priors on
//! ridge trajectories.
//!
//! Each column is read as a distribution over bins,
//!
//! ```text
//! p(m | w_n, m̂_n) = Σ_k w_n^k g(m - m̂_n^k) + (1 - Σ_k w_n^k) / M
//! ```
//!
//! and scored against the column's normalized energy `s̄_n` by cross-entropy,
//! `ℓ_n = Σ_m s̄_n[m] ln p(m)`. Offsets are circular so the kernel mass is the
//! same for every ridge position.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tf::{circular_offset, spectral_kernel, Spectrogram, StftConfig};

const FEASIBILITY_SLACK: f64 = 1e-12;

/// Mixture weights, one row of `K` weights per frame.
///
/// `w_n^k` is the share of column `n` explained by component `k`; with
/// component amplitudes `a_n^k` and mean noise amplitude `b_n` it reads
/// `a_n^k / (Σ_k a_n^k + M b_n)`. Every entry lies in `[0, 1]` and each row
/// sums to at most one, the remainder being the noise share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    n_frames: usize,
    n_components: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(n_frames: usize, n_components: usize, data: Vec<f64>) -> Result<Self> {
        let w = Self::new_unchecked(n_frames, n_components, data)?;
        for n in 0..n_frames {
            check_weight_row(n, w.row(n))?;
        }
        Ok(w)
    }

    /// Builds the matrix checking only its shape. Useful for probing how the
    /// model treats infeasible weights.
    pub fn new_unchecked(n_frames: usize, n_components: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_frames * n_components {
            return Err(Error::Dimension {
                what: "weight entries",
                expected: n_frames * n_components,
                actual: data.len(),
            });
        }
        Ok(Self {
            n_frames,
            n_components,
            data,
        })
    }

    pub fn constant(n_frames: usize, n_components: usize, value: f64) -> Result<Self> {
        Self::new(n_frames, n_components, vec![value; n_frames * n_components])
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.n_components..(n + 1) * self.n_components]
    }

    pub(crate) fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.data.chunks_exact_mut(self.n_components)
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.data[n * self.n_components + k]
    }

    /// Noise share `1 - Σ_k w_n^k` of frame `n`, proportional to `M b_n`.
    pub fn noise_mass(&self, n: usize) -> f64 {
        1.0 - self.row(n).iter().sum::<f64>()
    }

    pub fn is_feasible(&self) -> bool {
        (0..self.n_frames).all(|n| check_weight_row(n, self.row(n)).is_ok())
    }
}

fn check_weight_row(frame: usize, row: &[f64]) -> Result<()> {
    if let Some(w) = row.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::InvalidWeights {
            frame,
            reason: format!("weight {w} outside [0, 1]"),
        });
    }
    let total: f64 = row.iter().sum();
    if total > 1.0 + FEASIBILITY_SLACK {
        return Err(Error::InvalidWeights {
            frame,
            reason: format!("weights sum to {total} > 1"),
        });
    }
    Ok(())
}

/// Ridge positions `m̂`: one row of `N` frequency bins per component.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RidgeMatrix {
    n_components: usize,
    n_frames: usize,
    data: Vec<usize>,
}

impl RidgeMatrix {
    pub fn from_parts(n_components: usize, n_frames: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != n_components * n_frames {
            return Err(Error::Dimension {
                what: "ridge entries",
                expected: n_components * n_frames,
                actual: data.len(),
            });
        }
        Ok(Self {
            n_components,
            n_frames,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let n_frames = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_frames) {
            return Err(Error::Dimension {
                what: "ridge row length",
                expected: n_frames,
                actual: bad.len(),
            });
        }
        Self::from_parts(rows.len(), n_frames, rows.concat())
    }

    pub fn constant(n_components: usize, n_frames: usize, bin: usize) -> Self {
        Self {
            n_components,
            n_frames,
            data: vec![bin; n_components * n_frames],
        }
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn row(&self, k: usize) -> &[usize] {
        &self.data[k * self.n_frames..(k + 1) * self.n_frames]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [usize] {
        &mut self.data[k * self.n_frames..(k + 1) * self.n_frames]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.data.chunks_exact(self.n_frames.max(1))
    }

    pub fn get(&self, k: usize, n: usize) -> usize {
        self.data[k * self.n_frames + n]
    }

    pub fn set(&mut self, k: usize, n: usize, bin: usize) {
        self.data[k * self.n_frames + n] = bin;
    }

    /// The `K` bins of frame `n`.
    pub fn column(&self, n: usize) -> Vec<usize> {
        (0..self.n_components).map(|k| self.get(k, n)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<usize>> {
        self.rows().map(<[usize]>::to_vec).collect()
    }

    pub fn is_within(&self, range: &RangeInclusive<usize>) -> bool {
        self.data.iter().all(|b| range.contains(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// `exp(-ε Σ_k Σ_n |m̂_k[n+1] - m̂_k[n]|)`
    Tv,
    /// `exp(-(λ/2) Σ_k Σ_n (m̂_k[n-1] - 2 m̂_k[n] + m̂_k[n+1])²)`
    Laplacian,
}

impl PriorKind {
    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Tv => "tv",
            PriorKind::Laplacian => "laplacian",
        }
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tv" => Ok(PriorKind::Tv),
            "laplacian" => Ok(PriorKind::Laplacian),
            other => Err(Error::Parse(format!("unknown prior '{other}'"))),
        }
    }
}

/// Which ridge prior is active and how strong it is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub epsilon: f64,
    pub lambda: f64,
}

impl PriorConfig {
    pub fn tv(epsilon: f64) -> Self {
        Self {
            kind: PriorKind::Tv,
            epsilon,
            lambda: 0.0,
        }
    }

    pub fn laplacian(lambda: f64) -> Self {
        Self {
            kind: PriorKind::Laplacian,
            epsilon: 0.0,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("epsilon", self.epsilon), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "prior {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Unnormalized log-prior of a ridge configuration.
    pub fn log_prior(&self, ridges: &RidgeMatrix) -> f64 {
        match self.kind {
            PriorKind::Tv if self.epsilon == 0.0 => 0.0,
            PriorKind::Laplacian if self.lambda == 0.0 => 0.0,
            PriorKind::Tv => -self.epsilon * tv_energy(ridges),
            PriorKind::Laplacian => -0.5 * self.lambda * laplacian_energy(ridges),
        }
    }

    /// Negative log-prior terms of one ridge row that involve site `n`, for
    /// each candidate bin in `candidates`. Other terms are constant in the
    /// candidate and left out.
    pub fn site_energies(&self, row: &[usize], n: usize, candidates: RangeInclusive<usize>, out: &mut Vec<f64>) {
        out.clear();
        let len = row.len();
        let at = |j: usize, c: f64| if j == n { c } else { row[j] as f64 };
        match self.kind {
            PriorKind::Tv => {
                let eps = self.epsilon;
                let prev = (n >= 1).then(|| row[n - 1] as f64);
                let next = (n + 1 < len).then(|| row[n + 1] as f64);
                out.extend(candidates.map(|c| {
                    let c = c as f64;
                    let mut e = 0.0;
                    if let Some(p) = prev {
                        e += (c - p).abs();
                    }
                    if let Some(q) = next {
                        e += (q - c).abs();
                    }
                    eps * e
                }));
            }
            PriorKind::Laplacian => {
                let half = 0.5 * self.lambda;
                let centers: Vec<usize> = (n.saturating_sub(1)..=n + 1)
                    .filter(|&j| j >= 1 && j + 1 < len)
                    .collect();
                out.extend(candidates.map(|c| {
                    let c = c as f64;
                    let e: f64 = centers
                        .iter()
                        .map(|&j| {
                            let d2 = at(j - 1, c) - 2.0 * at(j, c) + at(j + 1, c);
                            d2 * d2
                        })
                        .sum();
                    half * e
                }));
            }
        }
    }
}

/// `Σ_k Σ_n |m̂_k[n+1] - m̂_k[n]|`.
pub fn tv_energy(ridges: &RidgeMatrix) -> f64 {
    ridges
        .rows()
        .map(|row| row.windows(2).map(|w| (w[1] as f64 - w[0] as f64).abs()).sum::<f64>())
        .sum()
}

/// `Σ_k Σ_{n=1}^{N-2} (m̂_k[n-1] - 2 m̂_k[n] + m̂_k[n+1])²`.
pub fn laplacian_energy(ridges: &RidgeMatrix) -> f64 {
    ridges
        .rows()
        .map(|row| {
            row.windows(3)
                .map(|w| {
                    let d2 = w[0] as f64 - 2.0 * w[1] as f64 + w[2] as f64;
                    d2 * d2
                })
                .sum::<f64>()
        })
        .sum()
}

/// Column likelihood machinery for one STFT configuration.
#[derive(Clone, Debug)]
pub struct ObservationModel {
    config: StftConfig,
    /// Kernel indexed by circular offset `0..M`, rescaled to unit sum.
    kernel: Vec<f64>,
    /// Offsets beyond this radius carry negligible kernel mass.
    support: usize,
    margin: usize,
}

impl ObservationModel {
    pub fn new(config: &StftConfig) -> Result<Self> {
        config.validate()?;
        let m = config.n_bins;
        let mut kernel: Vec<f64> = (0..m)
            .map(|o| spectral_kernel(circular_offset(o, 0, m), config))
            .collect();
        // The closed form has unit mass only up to discretization error; fix
        // it exactly so every column pmf sums to one.
        let mass: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|g| *g /= mass);
        let peak = kernel[0];
        let support = (1..=m / 2).find(|&r| kernel[r] <= 1e-17 * peak).unwrap_or(m / 2);
        let margin = config.ribbon_halfwidth();
        if 2 * margin >= m {
            return Err(Error::InvalidConfig(format!(
                "admissibility margin {margin} leaves no admissible bins out of {m}"
            )));
        }
        Ok(Self {
            config: *config,
            kernel,
            support,
            margin,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins
    }

    /// Normalized kernel at a signed bin offset.
    pub fn kernel(&self, offset: i64) -> f64 {
        self.kernel[offset.rem_euclid(self.config.n_bins as i64) as usize]
    }

    /// Bins a ridge may occupy: `[h, M - 1 - h]` with `h = ceil(3 σ_d)`.
    pub fn admissible(&self) -> RangeInclusive<usize> {
        self.margin..=self.config.n_bins - 1 - self.margin
    }

    /// Radius beyond which the kernel is negligible.
    pub(crate) fn support(&self) -> usize {
        self.support
    }

    pub fn admissibility_margin(&self) -> usize {
        self.margin
    }

    pub fn check_admissible(&self, ridges: &RidgeMatrix) -> Result<()> {
        let range = self.admissible();
        match ridges.data.iter().find(|b| !range.contains(b)) {
            Some(b) => Err(Error::InvalidRidge(format!(
                "bin {b} outside admissible range {range:?}"
            ))),
            None => Ok(()),
        }
    }

    fn check_bins(&self, bins: &[usize]) -> Result<()> {
        match bins.iter().find(|&&b| b >= self.config.n_bins) {
            Some(b) => Err(Error::InvalidRidge(format!(
                "bin {b} outside [0, {})",
                self.config.n_bins
            ))),
            None => Ok(()),
        }
    }

    /// Column distribution over bins for weights `w` and ridge bins `bins`.
    pub fn column_pmf(&self, w: &[f64], bins: &[usize]) -> Result<Vec<f64>> {
        self.check_column_inputs(w, bins)?;
        Ok(self.pmf_unchecked(w, bins))
    }

    fn check_column_inputs(&self, w: &[f64], bins: &[usize]) -> Result<()> {
        if w.len() != bins.len() {
            return Err(Error::Dimension {
                what: "weights per ridge",
                expected: bins.len(),
                actual: w.len(),
            });
        }
        check_weight_row(0, w)?;
        self.check_bins(bins)
    }

    pub(crate) fn pmf_unchecked(&self, w: &[f64], bins: &[usize]) -> Vec<f64> {
        let m = self.config.n_bins;
        let floor = (1.0 - w.iter().sum::<f64>()) / m as f64;
        let mut p = vec![floor; m];
        for (&wk, &b) in w.iter().zip(bins) {
            if wk == 0.0 {
                continue;
            }
            for (bin, pb) in p.iter_mut().enumerate() {
                *pb += wk * self.kernel[(bin + m - b) % m];
            }
        }
        p
    }

    /// `Σ_m s̄[m] ln p(m)` for a column already normalized to unit sum.
    pub(crate) fn cross_entropy(&self, sbar: &[f64], w: &[f64], bins: &[usize]) -> f64 {
        let p = self.pmf_unchecked(w, bins);
        sbar.iter()
            .zip(&p)
            .filter(|(s, _)| **s > 0.0)
            .map(|(s, p)| s * p.ln())
            .sum()
    }

    /// Cross-entropy score of one raw spectrogram column.
    pub fn column_loglik(&self, column: &[f64], w: &[f64], bins: &[usize]) -> Result<f64> {
        if column.len() != self.config.n_bins {
            return Err(Error::Dimension {
                what: "column length",
                expected: self.config.n_bins,
                actual: column.len(),
            });
        }
        self.check_column_inputs(w, bins)?;
        if column.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig(
                "spectrogram column must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = column.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyColumn(0));
        }
        let sbar: Vec<f64> = column.iter().map(|v| v / total).collect();
        Ok(self.cross_entropy(&sbar, w, bins))
    }

    /// Sum of column scores over all frames.
    pub fn total_loglik(&self, spectrogram: &Spectrogram, weights: &WeightMatrix, ridges: &RidgeMatrix) -> Result<f64> {
        self.check_shapes(spectrogram, weights, ridges)?;
        let normalized = spectrogram.normalized_columns()?;
        for n in 0..weights.n_frames() {
            check_weight_row(n, weights.row(n))?;
        }
        self.check_bins(&ridges.data)?;
        Ok(self.total_loglik_normalized(&normalized, weights, ridges))
    }

    pub(crate) fn total_loglik_normalized(
        &self,
        sbar: &Spectrogram,
        weights: &WeightMatrix,
        ridges: &RidgeMatrix,
    ) -> f64 {
        (0..sbar.n_frames())
            .map(|n| self.cross_entropy(sbar.column(n), weights.row(n), &ridges.column(n)))
            .sum()
    }

    /// `total_loglik + log p(M̂) + log p(W)` up to a constant. The weight prior
    /// is uniform on the feasible set; infeasible weights or inadmissible
    /// ridges give `-inf`.
    pub fn log_posterior(
        &self,
        spectrogram: &Spectrogram,
        weights: &WeightMatrix,
        ridges: &RidgeMatrix,
        prior: &PriorConfig,
    ) -> Result<f64> {
        prior.validate()?;
        self.check_shapes(spectrogram, weights, ridges)?;
        if !weights.is_feasible() || !ridges.is_within(&self.admissible()) {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(self.total_loglik(spectrogram, weights, ridges)? + prior.log_prior(ridges))
    }

    fn check_shapes(&self, spectrogram: &Spectrogram, weights: &WeightMatrix, ridges: &RidgeMatrix) -> Result<()> {
        let checks = [
            ("spectrogram bins", self.config.n_bins, spectrogram.n_bins()),
            ("weight frames", spectrogram.n_frames(), weights.n_frames()),
            ("ridge frames", spectrogram.n_frames(), ridges.n_frames()),
            ("ridge components", weights.n_components(), ridges.n_components()),
        ];
        for (what, expected, actual) in checks {
            if expected != actual {
                return Err(Error::Dimension { what, expected, actual });
            }
        }
        Ok(())
    }

    /// Log-likelihood gain of a single component with weight `w` placed at each
    /// bin over the pure-noise column: `ln p(s̄ | w, m) + ln M`.
    pub(crate) fn lift_column(&self, sbar: &[f64], w: f64, out: &mut [f64]) {
        let m = self.config.n_bins;
        let w = w.clamp(0.0, 1.0 - 1e-12);
        if w == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let mf = m as f64;
        if 2 * self.support + 1 >= m {
            for (center, o) in out.iter_mut().enumerate() {
                *o = sbar
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| **s > 0.0)
                    .map(|(bin, s)| s * (1.0 + w * (mf * self.kernel[(bin + m - center) % m] - 1.0)).ln())
                    .sum();
            }
            return;
        }
        let r = self.support as i64;
        let taps: Vec<f64> = (-r..=r).map(|d| (1.0 + w * (mf * self.kernel(d) - 1.0)).ln()).collect();
        let tail = (1.0 - w).ln();
        for (center, o) in out.iter_mut().enumerate() {
            let mut inside = 0.0;
            let mut acc = 0.0;
            for (i, tap) in taps.iter().enumerate() {
                let bin = (center as i64 + i as i64 - r).rem_euclid(m as i64) as usize;
                let s = sbar[bin];
                inside += s;
                acc += s * tap;
            }
            *o = acc + tail * (1.0 - inside).max(0.0);
        }
    }
}
