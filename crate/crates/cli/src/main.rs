use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ridgeband::bench::{run_bench, write_outputs, BenchConfig};
use ridgeband::inference::{SemConfig, SemTrace};
use ridgeband::io::{read_json, read_signal_csv, write_json, write_signal_csv};
use ridgeband::model::{PriorConfig, PriorKind, RidgeMatrix};
use ridgeband::siggen::{add_noise, crossing_chirps, synthesize, ChirpParams, NoiseSpec};
use ridgeband::{argmax_ridges, reconstruct_mode, run_sem, stft, StftConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "ridgeband",
    version,
    about = "Ridge estimation and mode reconstruction for multicomponent signals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a noisy chirp mixture and its ground truth.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Estimate ridges from a signal.
    Estimate {
        #[arg(long)]
        signal: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::Sem)]
        method: MethodArg,
        #[arg(long, value_enum, default_value_t = PriorArg::Tv)]
        prior: PriorArg,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-2)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frequency bins; defaults to the signal length.
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long, default_value_t = 20.0)]
        time_spread: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild modes from a signal and an estimation result.
    Reconstruct {
        #[arg(long)]
        tfr_from: PathBuf,
        #[arg(long)]
        result: PathBuf,
        /// Output CSV. `{k}` is replaced by the 1-based mode index; without it
        /// the index is appended to the file stem when there are several modes.
        #[arg(long)]
        out_mode: PathBuf,
        /// Only this 1-based mode.
        #[arg(long)]
        mode: Option<usize>,
    },
    /// Run the Monte-Carlo comparison.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sem,
    Argmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Tv,
    Laplacian,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateConfig {
    n_samples: usize,
    n_bins: usize,
    chirps: Vec<ChirpParams>,
    noise: NoiseSpec,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_samples: 500,
            n_bins: 500,
            chirps: crossing_chirps().to_vec(),
            noise: NoiseSpec::noiseless(),
        }
    }
}

#[derive(Serialize)]
struct TruthFile<'a> {
    n_samples: usize,
    n_bins: usize,
    chirps: &'a [ChirpParams],
    noise: &'a NoiseSpec,
    realized_snr_db: Option<f64>,
    ridge_bins: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ResultFile {
    method: String,
    stft: StftConfig,
    seed: u64,
    /// One row per component.
    ridges: Vec<Vec<usize>>,
    /// One row per frame.
    weights: Option<Vec<Vec<f64>>>,
    log_posterior: Option<f64>,
    trace: Option<SemTrace>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { config, out, truth } => generate(&config, &out, &truth),
        Command::Estimate {
            signal,
            k,
            method,
            prior,
            epsilon,
            lambda,
            seed,
            bins,
            time_spread,
            out,
        } => {
            let prior = match prior {
                PriorArg::Tv => PriorConfig::tv(epsilon),
                PriorArg::Laplacian => PriorConfig::laplacian(lambda),
            };
            estimate(&signal, k, method, prior, seed, bins, time_spread, &out)
        }
        Command::Reconstruct {
            tfr_from,
            result,
            out_mode,
            mode,
        } => reconstruct(&tfr_from, &result, &out_mode, mode),
        Command::Bench { config, out_dir } => bench(&config, &out_dir),
    }
}

fn generate(config: &Path, out: &Path, truth: &Path) -> Result<()> {
    let cfg: GenerateConfig = read_json(config).with_context(|| format!("reading {}", config.display()))?;
    let modes = cfg
        .chirps
        .iter()
        .map(|c| c.mode(cfg.n_samples))
        .collect::<ridgeband::Result<Vec<_>>>()?;
    let clean = synthesize(&modes, cfg.n_samples, cfg.n_bins)?;
    let noisy = add_noise(&clean.mixture, &cfg.noise)?;
    write_signal_csv(out, &noisy.noisy)?;
    let realized = noisy.realized_snr_db;
    write_json(
        truth,
        &TruthFile {
            n_samples: cfg.n_samples,
            n_bins: cfg.n_bins,
            chirps: &cfg.chirps,
            noise: &cfg.noise,
            realized_snr_db: realized.is_finite().then_some(realized),
            ridge_bins: clean.ridge_bins.to_rows(),
        },
    )?;
    println!("wrote {} samples to {}", cfg.n_samples, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    signal: &Path,
    k: usize,
    method: MethodArg,
    prior: PriorConfig,
    seed: u64,
    bins: Option<usize>,
    time_spread: f64,
    out: &Path,
) -> Result<()> {
    let x = read_signal_csv(signal).with_context(|| format!("reading {}", signal.display()))?;
    let stft_cfg = StftConfig::new(x.len(), bins.unwrap_or(x.len()), time_spread)?;
    let s = stft(&x, &stft_cfg)?.spectrogram();
    let result = match method {
        MethodArg::Argmax => ResultFile {
            method: "argmax".into(),
            stft: stft_cfg,
            seed,
            ridges: argmax_ridges(&s, &stft_cfg, k)?.to_rows(),
            weights: None,
            log_posterior: None,
            trace: None,
        },
        MethodArg::Sem => {
            let name = match prior.kind {
                PriorKind::Tv => "sem-tv",
                PriorKind::Laplacian => "sem-laplacian",
            };
            let r = run_sem(
                &s,
                &stft_cfg,
                &SemConfig {
                    seed,
                    ..SemConfig::new(k, prior)
                },
            )?;
            ResultFile {
                method: name.into(),
                stft: stft_cfg,
                seed,
                ridges: r.ridges.to_rows(),
                weights: Some(r.weights.data().chunks(k).map(<[f64]>::to_vec).collect()),
                log_posterior: Some(r.log_posterior),
                trace: Some(r.trace),
            }
        }
    };
    write_json(out, &result)?;
    println!("estimated {k} ridges over {} frames", x.len());
    Ok(())
}

fn mode_path(template: &Path, mode: usize, many: bool) -> PathBuf {
    let text = template.to_string_lossy();
    if text.contains("{k}") {
        return PathBuf::from(text.replace("{k}", &mode.to_string()));
    }
    if !many {
        return template.to_path_buf();
    }
    let stem = template
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match template.extension() {
        Some(ext) => format!("{stem}{mode}.{}", ext.to_string_lossy()),
        None => format!("{stem}{mode}"),
    };
    template.with_file_name(name)
}

fn reconstruct(signal: &Path, result: &Path, out: &Path, only: Option<usize>) -> Result<()> {
    let x = read_signal_csv(signal).with_context(|| format!("reading {}", signal.display()))?;
    let r: ResultFile = read_json(result).with_context(|| format!("reading {}", result.display()))?;
    if r.stft.n_samples != x.len() {
        bail!(
            "result covers {} samples but the signal has {}",
            r.stft.n_samples,
            x.len()
        );
    }
    let ridges = RidgeMatrix::from_rows(&r.ridges)?;
    let tfr = stft(&x, &r.stft)?;
    let modes: Vec<usize> = match only {
        Some(0) => bail!("modes are numbered from 1"),
        Some(m) if m > ridges.n_components() => bail!("mode {m} of {}", ridges.n_components()),
        Some(m) => vec![m],
        None => (1..=ridges.n_components()).collect(),
    };
    let many = modes.len() > 1;
    for m in modes {
        let path = mode_path(out, m, many);
        write_signal_csv(&path, &reconstruct_mode(&tfr, &ridges, m - 1)?)?;
        println!("mode {m} -> {}", path.display());
    }
    Ok(())
}

fn bench(config: &Path, out_dir: &Path) -> Result<()> {
    let cfg: BenchConfig = read_json(config).with_context(|| format!("reading {}", config.display()))?;
    let report = run_bench(&cfg)?;
    write_outputs(&report, &cfg, out_dir)?;
    println!("snr_db method mode mean_rqf std_rqf count failures");
    for s in &report.summary {
        println!(
            "{} {} {} {:.3} {:.3} {} {}",
            s.snr_db,
            s.method.name(),
            s.mode + 1,
            s.mean_rqf,
            s.std_rqf,
            s.count,
            s.failures
        );
    }
    println!("wrote results to {} in {:.1} s", out_dir.display(), report.elapsed_secs);
    Ok(())
}
