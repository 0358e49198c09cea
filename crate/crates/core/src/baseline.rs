//! Reference estimator: peak picking on the raw spectrogram.

use crate::error::{Error, Result};
use crate::inference::extract_ridges;
use crate::model::{ObservationModel, RidgeMatrix};
use crate::tf::{Spectrogram, StftConfig};

/// Per frame, the `K` largest admissible spectrogram bins at least `d + 1`
/// apart, linked into ridges by the same tracker the estimator uses.
pub fn argmax_ridges(spectrogram: &Spectrogram, stft: &StftConfig, n_components: usize) -> Result<RidgeMatrix> {
    if spectrogram.n_bins() != stft.n_bins {
        return Err(Error::Dimension {
            what: "spectrogram bins",
            expected: stft.n_bins,
            actual: spectrogram.n_bins(),
        });
    }
    let admissible = ObservationModel::new(stft)?.admissible();
    extract_ridges(
        spectrogram.data(),
        stft.n_bins,
        n_components,
        stft.discard_halfwidth(),
        admissible,
    )
}
