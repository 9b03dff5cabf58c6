//! RGB rasters and the Beer-Lambert optical density transform.
//!
//! Optical density is `V = -ln(X / X0)` per channel, with `X` clamped to at
//! least 1 so that saturated dark pixels map to the finite ceiling `ln(X0)`.

mod ppm;

pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm, PpmError};

use ndarray::Array2;

/// Illuminating light intensity for 8-bit images.
pub const DEFAULT_ILLUMINATION: f64 = 255.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ImagingError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: usize, height: usize },
    #[error("pixel buffer has {got} bytes, expected {expected}")]
    BufferLength { expected: usize, got: usize },
    #[error("illumination intensity must be finite and >= 1, got {0}")]
    Illumination(f64),
    #[error("optical density must have 3 rows and {expected} columns, got {rows}x{cols}")]
    DensityShape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("optical density contains a negative or non-finite entry at ({row}, {col})")]
    DensityValue { row: usize, col: usize },
}

/// An 8-bit RGB raster stored row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::ZeroDimension { width, height });
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or(ImagingError::ZeroDimension { width, height })?;
        if data.len() != expected {
            return Err(ImagingError::BufferLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// A uniformly coloured image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, ImagingError> {
        let n = width.saturating_mul(height);
        let data = rgb.iter().copied().cycle().take(3 * n).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// A 3×n optical density matrix for an image of known dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalDensity {
    width: usize,
    height: usize,
    values: Array2<f64>,
}

impl OpticalDensity {
    /// Wraps a 3×(width·height) matrix. Entries must be finite and non-negative.
    pub fn new(width: usize, height: usize, values: Array2<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::ZeroDimension { width, height });
        }
        let expected = width * height;
        let (rows, cols) = values.dim();
        if rows != 3 || cols != expected {
            return Err(ImagingError::DensityShape {
                expected,
                rows,
                cols,
            });
        }
        if let Some(((row, col), _)) = values
            .indexed_iter()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(ImagingError::DensityValue { row, col });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

fn check_illumination(x0: f64) -> Result<(), ImagingError> {
    if x0.is_finite() && x0 >= 1.0 {
        Ok(())
    } else {
        Err(ImagingError::Illumination(x0))
    }
}

/// Forward Beer-Lambert transform, `V[c, p] = -ln(clamp(X[c, p], 1, x0) / x0)`.
///
/// Intensities above `x0` are clamped to `x0` so every entry stays non-negative.
/// Only an invalid `x0` (non-finite or below 1) is rejected.
pub fn to_optical_density(img: &RgbImage, x0: f64) -> Result<OpticalDensity, ImagingError> {
    check_illumination(x0)?;
    let n = img.pixel_count();
    let ln_x0 = x0.ln();
    let mut values = Array2::<f64>::zeros((3, n));
    for (p, px) in img.data.chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            let x = f64::from(v).clamp(1.0, x0);
            values[[c, p]] = ln_x0 - x.ln();
        }
    }
    Ok(OpticalDensity {
        width: img.width,
        height: img.height,
        values,
    })
}

/// Converts one optical density value back to an 8-bit intensity.
///
/// Rounds to nearest with ties away from zero, then clamps to `[0, 255]`.
pub fn intensity_from_density(v: f64, x0: f64) -> u8 {
    let x = (x0 * (-v).exp()).round();
    if x.is_nan() {
        0
    } else {
        x.clamp(0.0, 255.0) as u8
    }
}

/// Inverse Beer-Lambert transform, `X = clamp(round(x0 · exp(-V)), 0, 255)`.
pub fn from_optical_density(od: &OpticalDensity, x0: f64) -> Result<RgbImage, ImagingError> {
    check_illumination(x0)?;
    let n = od.pixel_count();
    let mut data = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            data.push(intensity_from_density(od.values[[c, p]], x0));
        }
    }
    RgbImage::new(od.width, od.height, data)
}
