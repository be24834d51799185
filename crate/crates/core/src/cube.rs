//! In-memory push-broom hypercube.

use thiserror::Error;

use crate::geom::PushBroomIntrinsics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CubeError {
    #[error("HeaderMismatch: {0}")]
    HeaderMismatch(String),
    #[error("NonMonotonicTime: scanline {0}")]
    NonMonotonicTime(usize),
    #[error("NonMonotonicWavelength: band {0}")]
    NonMonotonicWavelength(usize),
}

/// Sample storage; both variants are laid out band-interleaved-by-line.
#[derive(Debug, Clone, PartialEq)]
pub enum CubeData {
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl CubeData {
    pub fn len(&self) -> usize {
        match self {
            CubeData::U16(v) => v.len(),
            CubeData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes per sample.
    pub fn sample_size(&self) -> usize {
        match self {
            CubeData::U16(_) => 2,
            CubeData::F32(_) => 4,
        }
    }

    #[inline]
    fn get(&self, i: usize) -> f32 {
        match self {
            CubeData::U16(v) => v[i] as f32,
            CubeData::F32(v) => v[i],
        }
    }
}

/// `lines × bands × samples` record with one timestamp per scanline.
///
/// Index of (line, band, column) is `(line * bands + band) * samples + column`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    samples: usize,
    lines: usize,
    bands: usize,
    data: CubeData,
    wavelengths: Vec<f64>,
    timestamps: Vec<f64>,
    /// Line-camera geometry, if the source carried it.
    pub lens: Option<PushBroomIntrinsics>,
}

impl HyperCube {
    pub fn new(
        samples: usize,
        lines: usize,
        bands: usize,
        data: CubeData,
        wavelengths: Vec<f64>,
        timestamps: Vec<f64>,
    ) -> Result<Self, CubeError> {
        let expected = samples
            .checked_mul(lines)
            .and_then(|v| v.checked_mul(bands))
            .ok_or_else(|| CubeError::HeaderMismatch("cube dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(CubeError::HeaderMismatch(format!(
                "expected {expected} samples, got {}",
                data.len()
            )));
        }
        if wavelengths.len() != bands {
            return Err(CubeError::HeaderMismatch(format!(
                "{} wavelengths for {bands} bands",
                wavelengths.len()
            )));
        }
        if timestamps.len() != lines {
            return Err(CubeError::HeaderMismatch(format!(
                "{} timestamps for {lines} lines",
                timestamps.len()
            )));
        }
        for i in 0..wavelengths.len() {
            if !wavelengths[i].is_finite() || (i > 0 && wavelengths[i] <= wavelengths[i - 1]) {
                return Err(CubeError::NonMonotonicWavelength(i));
            }
        }
        for i in 0..timestamps.len() {
            if !timestamps[i].is_finite() || (i > 0 && timestamps[i] <= timestamps[i - 1]) {
                return Err(CubeError::NonMonotonicTime(i));
            }
        }
        Ok(Self {
            samples,
            lines,
            bands,
            data,
            wavelengths,
            timestamps,
            lens: None,
        })
    }

    pub fn with_lens(mut self, lens: PushBroomIntrinsics) -> Self {
        self.lens = Some(lens);
        self
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &CubeData {
        &self.data
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    #[inline]
    pub fn sample(&self, line: usize, band: usize, column: usize) -> f32 {
        self.data.get((line * self.bands + band) * self.samples + column)
    }

    /// Copies the spectrum at (line, column) into `out`, which must hold `bands` values.
    pub fn spectrum_into(&self, line: usize, column: usize, out: &mut [f32]) {
        for (b, o) in out.iter_mut().enumerate().take(self.bands) {
            *o = self.sample(line, b, column);
        }
    }

    /// Index of the band whose wavelength is closest to `nm` (lower index on ties).
    pub fn nearest_band(&self, nm: f64) -> usize {
        nearest_band(&self.wavelengths, nm)
    }
}

/// Index of the wavelength closest to `nm`, ties toward the lower index.
pub fn nearest_band(wavelengths: &[f64], nm: f64) -> usize {
    let mut best = 0;
    for (i, w) in wavelengths.iter().enumerate() {
        if (w - nm).abs() < (wavelengths[best] - nm).abs() {
            best = i;
        }
    }
    best
}
