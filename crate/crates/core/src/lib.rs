//! Multicomponent signal analysis on the short-time Fourier transform:
//! synthetic test signals, a probabilistic model of spectrogram columns,
//! stochastic EM estimation of ridges, ribbon reconstruction of modes and
//! a benchmark harness.

pub mod baseline;
pub mod bench;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
mod par;
pub mod reconstruct;
pub mod siggen;
pub mod signal;
pub mod tf;

pub use baseline::argmax_ridges;
pub use error::{Error, Result};
pub use inference::{run_sem, EstimationResult, SemConfig, SemTrace};
pub use model::{ObservationModel, PriorConfig, PriorKind, RidgeMatrix, WeightMatrix};
pub use par::derive_seed;
pub use reconstruct::{reconstruct_mode, rqf};
pub use signal::SampledSignal;
pub use tf::{istft, spectrogram, stft, Spectrogram, StftConfig, TimeFrequencyMap};
