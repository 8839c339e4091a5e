//! Image and flow-field containers, PNG / Middlebury `.flo` persistence and
//! the PSNR / SSIM quality metrics.

mod flo;
mod metrics;

use std::path::Path;

use crate::error::{Error, Result};

pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use metrics::{psnr, psnr_for_report, ssim, PSNR_REPORT_CAP_DB};

/// H x W x 3 linear color image, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// Validated constructor: dimensions >= 1 and every value in [0, 1].
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("image dimensions must be >= 1".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image::new(width, height, data)
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

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Builds an image from arbitrary values, clamping into [0, 1].
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Image::new(width, height, data)
    }

    /// 8-bit quantization, `round(v * 255)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

/// Per-pixel displacement field `(du, dv)` in pixels, row-major interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("flow dimensions must be >= 1".into()));
        }
        if data.len() != width * height * 2 {
            return Err(Error::Shape(format!(
                "{}x{} flow needs {} values, got {}",
                width,
                height,
                width * height * 2,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow component".into()));
        }
        Ok(FlowField { width, height, data })
    }

    pub fn constant(width: usize, height: usize, du: f64, dv: f64) -> Self {
        FlowField {
            width,
            height,
            data: (0..width * height).flat_map(|_| [du, dv]).collect(),
        }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, u: usize, v: usize) -> (f64, f64) {
        let i = (v * self.width + u) * 2;
        (self.data[i], self.data[i + 1])
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn matches(&self, img: &Image) -> bool {
        self.width == img.width() && self.height == img.height()
    }
}

/// Loads an 8-bit RGB or RGBA PNG; alpha is dropped and values are
/// `byte / 255` with no gamma decoding.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let rgb: Vec<u8> = match decoded {
        image::DynamicImage::ImageRgb8(buf) => buf.into_raw(),
        image::DynamicImage::ImageRgba8(buf) => buf
            .into_raw()
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        other => {
            return Err(Error::UnsupportedImage(format!(
                "{}: {:?} (need 8-bit RGB or RGBA)",
                path.display(),
                other.color()
            )))
        }
    };
    Image::from_rgb8(w, h, &rgb)
}

/// Writes an 8-bit RGB PNG, quantizing by `round(v * 255)`.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_conversion() {
        let img = Image::from_rgb8(1, 1, &[255, 128, 0]).unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], 128.0 / 255.0);
        assert_eq!(img.to_rgb8(), vec![255, 128, 0]);
    }

    #[test]
    fn png_roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..5 * 4 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = Image::from_rgb8(5, 4, &bytes).unwrap();
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_rgb8(), bytes);
        let p2 = dir.path().join("b.png");
        save_png(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rgba_alpha_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        image::RgbaImage::from_raw(1, 1, vec![10, 20, 30, 40])
            .unwrap()
            .save(&p)
            .unwrap();
        assert_eq!(load_png(&p).unwrap().to_rgb8(), vec![10, 20, 30]);
    }

    #[test]
    fn sixteen_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(1, 1, vec![1u16, 2, 3])
            .unwrap()
            .save(&p)
            .unwrap();
        assert!(matches!(load_png(&p), Err(Error::UnsupportedImage(_))));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_png("/nonexistent/x.png"), Err(Error::Io { .. })));
    }

    #[test]
    fn invariants_enforced() {
        assert!(Image::new(0, 1, vec![]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(FlowField::new(1, 1, vec![f64::NAN, 0.0]).is_err());
    }
}
