//! Monte-Carlo comparison of estimators over an SNR sweep.
//!
//! A cell is one (SNR, realization) pair. Every method sees the same noisy
//! signal in a cell, and each cell draws its noise from a seed derived from
//! the base seed and the cell indices, so results do not depend on how cells
//! are scheduled.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::argmax_ridges;
use crate::error::{Error, Result};
use crate::inference::{run_sem, SemConfig};
use crate::model::{PriorConfig, RidgeMatrix};
use crate::par::{derive_seed, map_range};
use crate::reconstruct::{reconstruct_mode, rqf};
use crate::siggen::{add_noise, crossing_chirps, synthesize, ChirpParams, NoiseFamily, NoiseSpec};
use crate::tf::{stft, StftConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SemTv,
    SemLaplacian,
    Argmax,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SemTv => "sem-tv",
            Method::SemLaplacian => "sem-laplacian",
            Method::Argmax => "argmax",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sem-tv" => Ok(Method::SemTv),
            "sem-laplacian" => Ok(Method::SemLaplacian),
            "argmax" => Ok(Method::Argmax),
            other => Err(Error::Parse(format!("unknown method '{other}'"))),
        }
    }
}

/// Estimator settings shared by the SEM methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemSettings {
    pub epsilon: f64,
    pub lambda: f64,
    pub n_samples: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for SemSettings {
    fn default() -> Self {
        let sem = SemConfig::default();
        Self {
            epsilon: 1e-3,
            lambda: 1e-2,
            n_samples: sem.n_samples,
            max_iter: sem.max_iter,
            rel_tol: sem.rel_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_samples: usize,
    pub n_bins: usize,
    pub time_spread: f64,
    pub chirps: Vec<ChirpParams>,
    #[serde(with = "crate::io::snr_db_list")]
    pub snr_db: Vec<f64>,
    pub realizations: usize,
    pub noise: NoiseFamily,
    pub methods: Vec<Method>,
    pub sem: SemSettings,
    pub base_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_samples: 500,
            n_bins: 500,
            time_spread: 20.0,
            chirps: crossing_chirps().to_vec(),
            snr_db: (-4..=4).map(|i| 5.0 * i as f64).collect(),
            realizations: 50,
            noise: NoiseFamily::GaussianComplexWhite,
            methods: vec![Method::SemTv, Method::SemLaplacian, Method::Argmax],
            sem: SemSettings::default(),
            base_seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn stft(&self) -> Result<StftConfig> {
        StftConfig::new(self.n_samples, self.n_bins, self.time_spread)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft()?;
        self.noise.validate()?;
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods to compare".into()));
        }
        if self.snr_db.is_empty() {
            return Err(Error::InvalidConfig("empty SNR grid".into()));
        }
        if self.snr_db.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::InvalidConfig("SNR values must be numbers or +inf".into()));
        }
        if self.realizations == 0 {
            return Err(Error::InvalidConfig("need at least one realization".into()));
        }
        if self.chirps.is_empty() {
            return Err(Error::InvalidConfig("need at least one chirp".into()));
        }
        self.sem_config(Method::SemTv, 0).validate()?;
        self.sem_config(Method::SemLaplacian, 0).validate()
    }

    fn sem_config(&self, method: Method, seed: u64) -> SemConfig {
        let prior = match method {
            Method::SemLaplacian => PriorConfig::laplacian(self.sem.lambda),
            _ => PriorConfig::tv(self.sem.epsilon),
        };
        SemConfig {
            n_samples: self.sem.n_samples,
            max_iter: self.sem.max_iter,
            rel_tol: self.sem.rel_tol,
            seed,
            ..SemConfig::new(self.chirps.len(), prior)
        }
    }

    /// Seed of the noise in cell `(snr_index, realization)`.
    pub fn cell_seed(&self, snr_index: usize, realization: usize) -> u64 {
        derive_seed(self.base_seed, &[snr_index as u64, realization as u64])
    }
}

/// One reconstructed mode of one method in one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(with = "crate::io::snr_db")]
    pub snr_db: f64,
    pub method: Method,
    pub realization: usize,
    /// Zero-based; written one-based in CSV output.
    pub mode: usize,
    /// `NaN` when the method failed on this cell.
    pub rqf_db: f64,
    /// Mean absolute distance in bins between matched estimated and true ridges.
    pub ridge_error: f64,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    #[serde(with = "crate::io::snr_db")]
    pub snr_db: f64,
    pub method: Method,
    pub mode: usize,
    pub mean_rqf: f64,
    pub std_rqf: f64,
    pub count: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Sorted by SNR, method, realization and mode.
    pub raw: Vec<RawRecord>,
    pub summary: Vec<SummaryRecord>,
    pub elapsed_secs: f64,
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let start = Instant::now();
    let stft_config = config.stft()?;
    let modes = config
        .chirps
        .iter()
        .map(|c| c.mode(config.n_samples))
        .collect::<Result<Vec<_>>>()?;
    let truth = synthesize(&modes, config.n_samples, config.n_bins)?;

    let cells = config.snr_db.len() * config.realizations;
    let per_cell = map_range(cells, |cell| {
        let (snr_index, realization) = (cell / config.realizations, cell % config.realizations);
        run_cell(config, &stft_config, &truth, snr_index, realization)
    });
    let mut raw = Vec::new();
    for rows in per_cell {
        raw.extend(rows?);
    }
    raw.sort_by(|a, b| {
        a.snr_db
            .total_cmp(&b.snr_db)
            .then(a.method.cmp(&b.method))
            .then(a.realization.cmp(&b.realization))
            .then(a.mode.cmp(&b.mode))
    });
    let summary = summarize(&raw);
    Ok(BenchReport {
        raw,
        summary,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

fn run_cell(
    config: &BenchConfig,
    stft_config: &StftConfig,
    truth: &crate::siggen::GroundTruth,
    snr_index: usize,
    realization: usize,
) -> Result<Vec<RawRecord>> {
    let snr_db = config.snr_db[snr_index];
    let seed = config.cell_seed(snr_index, realization);
    let noisy = add_noise(
        &truth.mixture,
        &NoiseSpec {
            family: config.noise.clone(),
            snr_db,
            seed,
        },
    )?;
    let tfr = stft(&noisy.noisy, stft_config)?;
    let spectrogram = tfr.spectrogram();
    let k = config.chirps.len();

    let mut rows = Vec::new();
    for (index, &method) in config.methods.iter().enumerate() {
        let estimate = match method {
            Method::Argmax => argmax_ridges(&spectrogram, stft_config, k),
            _ => run_sem(
                &spectrogram,
                stft_config,
                &config.sem_config(method, derive_seed(seed, &[index as u64])),
            )
            .map(|r| r.ridges),
        };
        let scored = estimate.and_then(|ridges| {
            let matched = match_to_truth(&ridges, &truth.ridge_bins);
            (0..k)
                .map(|mode| {
                    let x = reconstruct_mode(&tfr, &matched, mode)?;
                    Ok((
                        rqf(&truth.clean_modes[mode], &x)?,
                        mean_abs_distance(matched.row(mode), truth.ridge_bins.row(mode)),
                    ))
                })
                .collect::<Result<Vec<_>>>()
        });
        match scored {
            Ok(values) => rows.extend(values.into_iter().enumerate().map(|(mode, (q, e))| RawRecord {
                snr_db,
                method,
                realization,
                mode,
                rqf_db: q,
                ridge_error: e,
                failed: false,
            })),
            Err(_) => rows.extend((0..k).map(|mode| RawRecord {
                snr_db,
                method,
                realization,
                mode,
                rqf_db: f64::NAN,
                ridge_error: f64::NAN,
                failed: true,
            })),
        }
    }
    Ok(rows)
}

fn mean_abs_distance(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.abs_diff(*y) as f64).sum::<f64>() / a.len().max(1) as f64
}

/// Reorders estimated rows so row `k` is the one closest to true mode `k`,
/// choosing the permutation with the smallest total mean distance.
pub fn match_to_truth(estimate: &RidgeMatrix, truth: &RidgeMatrix) -> RidgeMatrix {
    let k = estimate.n_components();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in crate::inference::permutations(k) {
        let cost: f64 = perm
            .iter()
            .enumerate()
            .map(|(mode, &row)| mean_abs_distance(estimate.row(row), truth.row(mode)))
            .sum();
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, perm));
        }
    }
    let perm = best.map(|b| b.1).unwrap_or_default();
    let rows: Vec<Vec<usize>> = perm.iter().map(|&r| estimate.row(r).to_vec()).collect();
    RidgeMatrix::from_rows(&rows).unwrap_or_else(|_| estimate.clone())
}

/// Mean and sample standard deviation of RQF in dB per (SNR, method, mode),
/// over cells that did not fail.
pub fn summarize(raw: &[RawRecord]) -> Vec<SummaryRecord> {
    let mut keys: Vec<(f64, Method, usize)> = raw.iter().map(|r| (r.snr_db, r.method, r.mode)).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    keys.dedup();
    keys.into_iter()
        .map(|(snr_db, method, mode)| {
            let group: Vec<&RawRecord> = raw
                .iter()
                .filter(|r| r.snr_db.total_cmp(&snr_db).is_eq() && r.method == method && r.mode == mode)
                .collect();
            let values: Vec<f64> = group.iter().filter(|r| !r.failed).map(|r| r.rqf_db).collect();
            let (mean_rqf, std_rqf) = mean_std(&values);
            SummaryRecord {
                snr_db,
                method,
                mode,
                mean_rqf,
                std_rqf,
                count: values.len(),
                failures: group.len() - values.len(),
            }
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One point of a mode's RQF-versus-SNR curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    #[serde(with = "crate::io::snr_db")]
    pub snr: f64,
    pub method: Method,
    pub mean_rqf: f64,
    pub std_rqf: f64,
}

/// Curves per mode, in ascending SNR then method order.
pub fn emit_plot_data(summary: &[SummaryRecord]) -> Vec<Vec<PlotPoint>> {
    let modes = summary.iter().map(|s| s.mode + 1).max().unwrap_or(0);
    (0..modes)
        .map(|mode| {
            let mut points: Vec<PlotPoint> = summary
                .iter()
                .filter(|s| s.mode == mode)
                .map(|s| PlotPoint {
                    snr: s.snr_db,
                    method: s.method,
                    mean_rqf: s.mean_rqf,
                    std_rqf: s.std_rqf,
                })
                .collect();
            points.sort_by(|a, b| a.snr.total_cmp(&b.snr).then(a.method.cmp(&b.method)));
            points
        })
        .collect()
}

pub fn raw_csv(raw: &[RawRecord]) -> String {
    let mut out = String::from("snr_db,method,realization,mode,rqf_db,ridge_error,failed\n");
    for r in raw {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.snr_db,
            r.method.name(),
            r.realization,
            r.mode + 1,
            r.rqf_db,
            r.ridge_error,
            r.failed
        );
    }
    out
}

pub fn summary_csv(summary: &[SummaryRecord]) -> String {
    let mut out = String::from("snr_db,method,mode,mean_rqf,std_rqf,count,failures\n");
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.snr_db,
            s.method.name(),
            s.mode + 1,
            s.mean_rqf,
            s.std_rqf,
            s.count,
            s.failures
        );
    }
    out
}

pub fn plot_csv(points: &[PlotPoint]) -> String {
    let mut out = String::from("snr,method,mean_rqf,std_rqf\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.snr, p.method.name(), p.mean_rqf, p.std_rqf);
    }
    out
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    crate_version: &'a str,
    base_seed: u64,
    cells: usize,
    failed_rows: usize,
    elapsed_secs: f64,
    config: &'a BenchConfig,
}

/// Writes `raw.csv`, `summary.csv`, one `mode<k>_plot.csv` per mode (from 1)
/// and `run-metadata.json` into `out_dir`, creating it if needed.
pub fn write_outputs(report: &BenchReport, config: &BenchConfig, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("raw.csv"), raw_csv(&report.raw))?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&report.summary))?;
    for (mode, points) in emit_plot_data(&report.summary).iter().enumerate() {
        std::fs::write(dir.join(format!("mode{}_plot.csv", mode + 1)), plot_csv(points))?;
    }
    crate::io::write_json(
        dir.join("run-metadata.json"),
        &RunMetadata {
            crate_version: env!("CARGO_PKG_VERSION"),
            base_seed: config.base_seed,
            cells: config.snr_db.len() * config.realizations,
            failed_rows: report.raw.iter().filter(|r| r.failed).count(),
            elapsed_secs: report.elapsed_secs,
            config,
        },
    )
}
