use std::ops::{Deref, DerefMut};

use num_complex::Complex64;

/// A complex discrete-time signal `x(0), ..., x(N-1)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampledSignal(Vec<Complex64>);

impl SampledSignal {
    pub fn new(samples: Vec<Complex64>) -> Self {
        Self(samples)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![Complex64::new(0.0, 0.0); len])
    }

    /// Sum of squared moduli.
    pub fn energy(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        Self(self.0.iter().map(|z| z * factor).collect())
    }

    pub fn into_inner(self) -> Vec<Complex64> {
        self.0
    }
}

impl Deref for SampledSignal {
    type Target = [Complex64];

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl DerefMut for SampledSignal {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

impl From<Vec<Complex64>> for SampledSignal {
    fn from(samples: Vec<Complex64>) -> Self {
        Self(samples)
    }
}

impl FromIterator<Complex64> for SampledSignal {
    fn from_iter<I: IntoIterator<Item = Complex64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}
