//! Browser bindings: synthesize two crossing chirps, estimate their ridges,
//! and score the reconstructed modes.

use ridgeband::bench::match_to_truth;
use ridgeband::siggen::{add_noise, crossing_chirps, synthesize, GroundTruth, NoiseFamily, NoiseSpec};
use ridgeband::{
    argmax_ridges, reconstruct_mode, rqf, run_sem, PriorConfig, RidgeMatrix, SemConfig, Spectrogram, StftConfig,
    TimeFrequencyMap,
};
use wasm_bindgen::prelude::*;

fn js_err(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
pub struct Demo {
    config: StftConfig,
    truth: GroundTruth,
    tfr: TimeFrequencyMap,
    spectrogram: Spectrogram,
    ridges: Option<RidgeMatrix>,
}

#[wasm_bindgen]
impl Demo {
    /// Noisy crossing chirps with `n` samples and bins. `noise` is one of
    /// `gaussian`, `gamma` or `poisson`.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, snr_db: f64, noise: &str, seed: u64) -> Result<Demo, JsError> {
        Demo::build(n, snr_db, noise, seed).map_err(js_err)
    }

    pub fn frames(&self) -> usize {
        self.spectrogram.n_frames()
    }

    /// Displayed rows: the lower half of the band, where the chirps live.
    pub fn rows(&self) -> usize {
        self.spectrogram.n_bins() / 2
    }

    /// Log-scaled spectrogram as RGBA pixels, time left to right and
    /// frequency bottom to top, with the current ridges drawn in.
    pub fn image(&self) -> Vec<u8> {
        let (w, h) = (self.frames(), self.rows());
        let m = self.spectrogram.n_bins();
        let logs: Vec<f64> = self.spectrogram.data().iter().map(|v| (v + 1e-12).log10()).collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut px = vec![0u8; w * h * 4];
        for n in 0..w {
            for b in 0..h {
                let level = ((logs[n * m + b] - top + 4.0) / 4.0).clamp(0.0, 1.0);
                let i = ((h - 1 - b) * w + n) * 4;
                let rgba = [
                    (255.0 * level) as u8,
                    (180.0 * level * level) as u8,
                    (90.0 * (1.0 - level)) as u8,
                    255,
                ];
                px[i..i + 4].copy_from_slice(&rgba);
            }
        }
        if let Some(r) = &self.ridges {
            let colors = [[80u8, 220, 255, 255], [255, 255, 255, 255]];
            for (k, row) in r.rows().enumerate() {
                for (n, &b) in row.iter().enumerate().filter(|(_, &b)| b < h) {
                    let i = ((h - 1 - b) * w + n) * 4;
                    px[i..i + 4].copy_from_slice(&colors[k % colors.len()]);
                }
            }
        }
        px
    }

    /// Estimates the two ridges. `method` is `sem-tv`, `sem-laplacian` or
    /// `argmax`; `strength` is the prior's epsilon or lambda.
    pub fn estimate(&mut self, method: &str, strength: f64, seed: u64) -> Result<(), JsError> {
        self.run_estimate(method, strength, seed).map_err(js_err)
    }

    /// RQF in dB of each reconstructed mode against its clean version.
    pub fn score(&self) -> Result<Vec<f64>, JsError> {
        self.scores().map_err(js_err)
    }
}

impl Demo {
    pub fn build(n: usize, snr_db: f64, noise: &str, seed: u64) -> Result<Demo, String> {
        let family = match noise {
            "gaussian" => NoiseFamily::GaussianComplexWhite,
            "gamma" => NoiseFamily::gamma(),
            "poisson" => NoiseFamily::poisson(),
            other => return Err(format!("unknown noise '{other}'")),
        };
        let text = |e: ridgeband::Error| e.to_string();
        let config = StftConfig::new(n, n, 20.0 * n as f64 / 500.0).map_err(text)?;
        let modes = crossing_chirps()
            .iter()
            .map(|c| c.mode(n))
            .collect::<ridgeband::Result<Vec<_>>>()
            .map_err(text)?;
        let truth = synthesize(&modes, n, n).map_err(text)?;
        let noisy = add_noise(&truth.mixture, &NoiseSpec { family, snr_db, seed }).map_err(text)?;
        let tfr = ridgeband::stft(&noisy.noisy, &config).map_err(text)?;
        let spectrogram = tfr.spectrogram();
        Ok(Demo {
            config,
            truth,
            tfr,
            spectrogram,
            ridges: None,
        })
    }

    pub fn run_estimate(&mut self, method: &str, strength: f64, seed: u64) -> Result<(), String> {
        let prior = match method {
            "argmax" => None,
            "sem-tv" => Some(PriorConfig::tv(strength)),
            "sem-laplacian" => Some(PriorConfig::laplacian(strength)),
            other => return Err(format!("unknown method '{other}'")),
        };
        let ridges = match prior {
            None => argmax_ridges(&self.spectrogram, &self.config, 2),
            Some(prior) => {
                let sem = SemConfig {
                    seed,
                    ..SemConfig::new(2, prior)
                };
                run_sem(&self.spectrogram, &self.config, &sem).map(|r| r.ridges)
            }
        }
        .map_err(|e| e.to_string())?;
        self.ridges = Some(match_to_truth(&ridges, &self.truth.ridge_bins));
        Ok(())
    }

    pub fn scores(&self) -> Result<Vec<f64>, String> {
        let ridges = self.ridges.as_ref().ok_or("estimate first")?;
        (0..ridges.n_components())
            .map(|k| rqf(&self.truth.clean_modes[k], &reconstruct_mode(&self.tfr, ridges, k)?))
            .collect::<ridgeband::Result<Vec<_>>>()
            .map_err(|e| e.to_string())
    }
}
