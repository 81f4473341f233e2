//! Image ingestion and scleral vessel enhancement.
//!
//! Everything here is a pure function of its inputs. Convolutions clamp at
//! the border instead of zero-padding.

mod enhance;
mod frangi;
mod pipeline;
mod pnm;
mod qc;

pub use enhance::{clahe, normalize_intensity, percentile};
pub use frangi::{frangi, gaussian_kernel, hessian, vesselness_at_scale, FrangiC, FrangiParams, Hessian};
pub use pipeline::{preprocess_view, PreprocessParams, PreprocessedView};
pub use pnm::{decode_pnm, encode_pnm, load_image, save_image};
pub use qc::{binarize, laplacian, otsu_threshold, quality_check, QcReport, QcThresholds};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Non-fatal conditions reported alongside a result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Warning {
    /// The two stretch percentiles coincided.
    DegenerateRange,
    /// The map had no between-class variance.
    ConstantMap,
}

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImgError> {
        if width == 0 || height == 0 {
            return Err(ImgError::InvalidParam("empty image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(ImgError::InvalidParam(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(ImgError::InvalidParam(format!(
                "{} bytes for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Copies out an axis-aligned rectangle.
    pub fn crop(&self, roi: Roi) -> Result<Self, ImgError> {
        if roi.w == 0 || roi.h == 0 || roi.x + roi.w > self.width || roi.y + roi.h > self.height {
            return Err(ImgError::InvalidParam(format!("{roi:?} outside {}x{}", self.width, self.height)));
        }
        let mut data = Vec::with_capacity(roi.w * roi.h * self.channels);
        for y in roi.y..roi.y + roi.h {
            let start = (y * self.width + roi.x) * self.channels;
            data.extend_from_slice(&self.data[start..start + roi.w * self.channels]);
        }
        Ok(Self { width: roi.w, height: roi.h, channels: self.channels, data })
    }
}

/// Crop rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Single-channel image with samples in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImgError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImgError::InvalidParam(format!("{} samples for {width}x{height}", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImgError::InvalidParam(format!("sample {bad} outside [0,1]")));
        }
        Ok(Self { width, height, data })
    }

    pub(crate) fn from_clamped(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self { width, height, data }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::from_clamped(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Rounds to 8-bit single channel.
    pub fn to_raster(&self) -> RasterImage {
        let data = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        RasterImage { width: self.width, height: self.height, channels: 1, data }
    }

    /// Box-averages non-overlapping `factor`×`factor` blocks.
    pub fn downsample(&self, factor: usize) -> Result<Self, ImgError> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(ImgError::InvalidParam(format!(
                "{}x{} not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                out[(y / factor) * w + x / factor] += self.data[y * self.width + x];
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        Ok(Self::from_clamped(w, h, out))
    }
}

/// Luma conversion (0.299, 0.587, 0.114) scaled to [0,1].
pub fn to_gray(img: &RasterImage) -> GrayImage {
    let data = match img.channels {
        1 => img.data.iter().map(|&v| v as f64 / 255.0).collect(),
        _ => img
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect(),
    };
    GrayImage::from_clamped(img.width, img.height, data)
}

/// Vesselness scores in [0,1] and the scales that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct VesselnessMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub scales: Vec<f64>,
}

impl VesselnessMap {
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_clamped(self.width, self.height, self.data.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn crop(&self, roi: Roi) -> Result<Self, ImgError> {
        if roi.w == 0 || roi.h == 0 || roi.x + roi.w > self.width || roi.y + roi.h > self.height {
            return Err(ImgError::InvalidParam(format!("{roi:?} outside {}x{}", self.width, self.height)));
        }
        let bits = (roi.y..roi.y + roi.h)
            .flat_map(|y| self.bits[y * self.width + roi.x..y * self.width + roi.x + roi.w].iter().copied())
            .collect();
        Ok(Self { width: roi.w, height: roi.h, bits })
    }

    pub fn to_raster(&self) -> RasterImage {
        let data = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        RasterImage { width: self.width, height: self.height, channels: 1, data }
    }
}

/// Reads `img[clamp(y)][clamp(x)]`.
#[inline]
pub(crate) fn at_clamped(data: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
    let xc = x.clamp(0, w as isize - 1) as usize;
    let yc = y.clamp(0, h as isize - 1) as usize;
    data[yc * w + xc]
}
