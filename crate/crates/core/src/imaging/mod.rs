//! Float rasters, PGM/PPM decoding and the two input pipelines.
//!
//! An [`Image`] is a row-major, channel-interleaved `f32` buffer. Decoding maps
//! raw 8-bit intensities into `[0, 1]`; everything downstream operates on that
//! range until [`channel_normalize`] standardizes per channel.

mod ops;
mod pnm;
mod warp;

pub use ops::{
    channel_normalize, gaussian_filter_3x3, hist_equalize, median_filter_3x3, replicate_channels,
    resize_bilinear, to_grayscale,
};
pub use pnm::{decode_image, encode_image, read_image};
pub use warp::{affine_warp, flip_horizontal, rotate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed image header: {0}")]
    Header(String),
    #[error("unsupported {field}: {value}")]
    Unsupported { field: &'static str, value: String },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("invalid pipeline spec: {0}")]
    Spec(String),
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ImageError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(ImageError::Invalid(format!("empty raster {height}x{width}")));
        }
        if data.len() != height * width * channels {
            return Err(ImageError::Invalid(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImageError::Invalid("non-finite pixel value".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("filled image shape")
    }

    /// Construct without re-validating; callers guarantee the invariants.
    pub(crate) fn from_parts(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Pixel lookup with edge replication for out-of-range coordinates.
    #[inline]
    pub(crate) fn get_clamped(&self, y: isize, x: isize, c: usize) -> f32 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    /// Extract one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Image::from_parts(self.height, self.width, 1, data)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    Original,
    Preprocessed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Denoise {
    Median3,
    Gaussian3,
}

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub kind: PipelineKind,
    #[serde(default = "default_target_size")]
    pub target_size: usize,
    #[serde(default = "default_denoise")]
    pub denoise: Denoise,
    #[serde(default = "default_mean")]
    pub normalization_mean: [f32; 3],
    #[serde(default = "default_std")]
    pub normalization_std: [f32; 3],
}

fn default_target_size() -> usize {
    224
}
fn default_denoise() -> Denoise {
    Denoise::Median3
}
fn default_mean() -> [f32; 3] {
    IMAGENET_MEAN
}
fn default_std() -> [f32; 3] {
    IMAGENET_STD
}

impl PipelineSpec {
    pub fn new(kind: PipelineKind, target_size: usize) -> Result<Self> {
        let spec = Self {
            kind,
            target_size,
            denoise: Denoise::Median3,
            normalization_mean: IMAGENET_MEAN,
            normalization_std: IMAGENET_STD,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn original(target_size: usize) -> Result<Self> {
        Self::new(PipelineKind::Original, target_size)
    }

    pub fn preprocessed(target_size: usize) -> Result<Self> {
        Self::new(PipelineKind::Preprocessed, target_size)
    }

    pub fn with_denoise(mut self, denoise: Denoise) -> Self {
        self.denoise = denoise;
        self
    }

    pub fn with_normalization(mut self, mean: [f32; 3], std: [f32; 3]) -> Result<Self> {
        self.normalization_mean = mean;
        self.normalization_std = std;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size < 8 {
            return Err(ImageError::Spec(format!("target_size {} < 8", self.target_size)));
        }
        if self.normalization_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(ImageError::Spec("normalization_std components must be > 0".into()));
        }
        if self.normalization_mean.iter().any(|m| !m.is_finite()) {
            return Err(ImageError::Spec("normalization_mean must be finite".into()));
        }
        Ok(())
    }
}

/// Every pipeline step except the final per-channel normalization.
///
/// The result is `target_size × target_size × 3` with values in `[0, 1]`.
/// Test-time augmentation draws its views from this stage.
pub fn run_pipeline_unnormalized(img: &Image, spec: &PipelineSpec) -> Result<Image> {
    spec.validate()?;
    let size = spec.target_size;
    let out = match spec.kind {
        PipelineKind::Original => {
            let resized = resize_bilinear(img, size, size)?;
            replicate_channels(&resized)
        }
        PipelineKind::Preprocessed => {
            let gray = to_grayscale(img);
            let resized = resize_bilinear(&gray, size, size)?;
            let denoised = match spec.denoise {
                Denoise::Median3 => median_filter_3x3(&resized)?,
                Denoise::Gaussian3 => gaussian_filter_3x3(&resized)?,
            };
            let equalized = hist_equalize(&denoised)?;
            replicate_channels(&equalized)
        }
    };
    Ok(out)
}

/// Apply the configured normalization to a pre-normalized pipeline output.
pub fn normalize_for(img: &Image, spec: &PipelineSpec) -> Result<Image> {
    channel_normalize(img, spec.normalization_mean, spec.normalization_std)
}

/// Full input pipeline; output is always `target_size × target_size × 3`.
pub fn run_pipeline(img: &Image, spec: &PipelineSpec) -> Result<Image> {
    let staged = run_pipeline_unnormalized(img, spec)?;
    normalize_for(&staged, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let data = (0..h * w * c).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn pipeline_spec_validation() {
        assert!(PipelineSpec::original(4).is_err());
        assert!(PipelineSpec::original(8).is_ok());
        let spec = PipelineSpec::original(16).unwrap();
        assert!(spec.with_normalization([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn original_on_constant_gray() {
        let img = Image::filled(7, 5, 1, 0.5);
        let spec = PipelineSpec::original(16).unwrap();
        let out = run_pipeline(&img, &spec).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (16, 16, 3));
        for c in 0..3 {
            let expect = (0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            assert!(out.channel(c).data().iter().all(|&v| (v - expect).abs() < 1e-6));
        }
    }

    #[test]
    fn preprocessed_collapses_color() {
        let img = ramp(12, 10, 3);
        let spec = PipelineSpec::preprocessed(8).unwrap();
        let staged = run_pipeline_unnormalized(&img, &spec).unwrap();
        assert_eq!(staged.channels(), 3);
        assert_eq!(staged.channel(0), staged.channel(1));
        assert_eq!(staged.channel(0), staged.channel(2));
    }

    #[test]
    fn preprocessed_matches_manual_composition() {
        let img = ramp(8, 8, 1);
        for denoise in [Denoise::Median3, Denoise::Gaussian3] {
            let spec = PipelineSpec::preprocessed(8).unwrap().with_denoise(denoise);
            let manual = {
                let r = resize_bilinear(&img, 8, 8).unwrap();
                let d = match denoise {
                    Denoise::Median3 => median_filter_3x3(&r).unwrap(),
                    Denoise::Gaussian3 => gaussian_filter_3x3(&r).unwrap(),
                };
                let e = hist_equalize(&d).unwrap();
                channel_normalize(&replicate_channels(&e), IMAGENET_MEAN, IMAGENET_STD).unwrap()
            };
            assert_eq!(run_pipeline(&img, &spec).unwrap(), manual);
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let img = ramp(20, 17, 3);
        for spec in [PipelineSpec::original(9).unwrap(), PipelineSpec::preprocessed(9).unwrap()] {
            let a = run_pipeline(&img, &spec).unwrap();
            let b = run_pipeline(&img, &spec).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn gray_input_yields_identical_channels_before_normalization() {
        let img = ramp(11, 13, 1);
        for spec in [PipelineSpec::original(8).unwrap(), PipelineSpec::preprocessed(8).unwrap()] {
            let staged = run_pipeline_unnormalized(&img, &spec).unwrap();
            assert_eq!(staged.channel(0), staged.channel(1));
            assert_eq!(staged.channel(1), staged.channel(2));
        }
    }
}
