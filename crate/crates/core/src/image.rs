//! Intensity images, file I/O and per-pixel gradients.
//!
//! Pixel `(i, j)` is row `i`, column `j`. [`PixelCoord`] uses `x = j` and `y = i`.

use std::f64::consts::TAU;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid channel count: expected {expected}, found {found}")]
    InvalidChannels { expected: usize, found: usize },
    #[error("image {width}x{height} is smaller than the required {min}x{min}")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("invalid image data: {0}")]
    InvalidData(String),
}

/// Sub-pixel image position. `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PixelCoord) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for PixelCoord {
    fn from(v: [f64; 2]) -> Self {
        Self { x: v[0], y: v[1] }
    }
}

impl From<PixelCoord> for [f64; 2] {
    fn from(p: PixelCoord) -> Self {
        [p.x, p.y]
    }
}

/// Row-major image with 1 or 3 interleaved channels; samples lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidData(format!("zero dimension {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::InvalidChannels { expected: 1, found: channels });
        }
        if data.len() != width * height * channels {
            return Err(ImageError::InvalidData(format!("data length {} does not match {width}x{height}x{channels}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::InvalidData(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Single-channel image filled with `value`, clamped into `[0, 1]`.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self { width, height, channels: 1, data: vec![value.clamp(0.0, 1.0); width * height] }
    }

    /// Builds a gray image from `f(row, col)`; values are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j).clamp(0.0, 1.0));
            }
        }
        Self { width, height, channels: 1, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sample at row `i`, column `j`, channel `c`.
    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.width + j) * self.channels + c]
    }

    /// Gray value at row `i`, column `j`; only valid for single-channel images.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.channels, 1);
        self.data[i * self.width + j]
    }

    /// Returns the image itself when gray, its BT.601 luma otherwise.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            self.clone()
        } else {
            rgb_to_gray(self).expect("three-channel image")
        }
    }

    /// Quantizes samples to bytes with `round(v * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Self {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self { width, height, channels, data }
    }

    /// Maps every sample through `f`, clamping into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Per-pixel gradient magnitude and orientation in `[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    width: usize,
    height: usize,
    magnitude: Vec<f64>,
    orientation: Vec<f64>,
}

impl GradientField {
    /// Assembles a field from raw per-pixel values, validating the invariants.
    pub fn from_parts(width: usize, height: usize, magnitude: Vec<f64>, orientation: Vec<f64>) -> Result<Self, ImageError> {
        let n = width * height;
        if n == 0 || magnitude.len() != n || orientation.len() != n {
            return Err(ImageError::InvalidData(format!(
                "gradient field {width}x{height} with {} magnitudes and {} orientations",
                magnitude.len(),
                orientation.len()
            )));
        }
        if magnitude.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(ImageError::InvalidData("negative or non-finite magnitude".into()));
        }
        if orientation.iter().any(|o| !(0.0..TAU).contains(o)) {
            return Err(ImageError::InvalidData("orientation outside [0, 2π)".into()));
        }
        Ok(Self { width, height, magnitude, orientation })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn magnitude(&self, i: usize, j: usize) -> f64 {
        self.magnitude[i * self.width + j]
    }

    #[inline]
    pub fn orientation(&self, i: usize, j: usize) -> f64 {
        self.orientation[i * self.width + j]
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn orientations(&self) -> &[f64] {
        &self.orientation
    }
}

/// BT.601 luma: `0.299 R + 0.587 G + 0.114 B`.
pub fn rgb_to_gray(img: &Image) -> Result<Image, ImageError> {
    if img.channels != 3 {
        return Err(ImageError::InvalidChannels { expected: 3, found: img.channels });
    }
    let data = img.data.chunks_exact(3).map(|px| (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).clamp(0.0, 1.0)).collect();
    Ok(Image { width: img.width, height: img.height, channels: 1, data })
}

/// Maps `atan2` output into `[0, 2π)`; a zero gradient has orientation 0.
#[inline]
pub(crate) fn full_angle(dy: f64, dx: f64) -> f64 {
    if dy == 0.0 && dx == 0.0 {
        return 0.0;
    }
    let mut a = dy.atan2(dx);
    if a < 0.0 {
        a += TAU;
    }
    if a >= TAU {
        a = 0.0;
    }
    a
}

/// Gradient by central differences in the interior and one-sided differences
/// on the border. Orientation is `atan2(∂f/∂i, ∂f/∂j)` mapped into `[0, 2π)`.
pub fn compute_gradient_field(img: &Image) -> Result<GradientField, ImageError> {
    if img.channels != 1 {
        return Err(ImageError::InvalidChannels { expected: 1, found: img.channels });
    }
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(ImageError::TooSmall { width: w, height: h, min: 3 });
    }
    let f = |i: usize, j: usize| img.data[i * w + j];
    let mut magnitude = Vec::with_capacity(w * h);
    let mut orientation = Vec::with_capacity(w * h);
    for i in 0..h {
        for j in 0..w {
            let di = if i == 0 {
                f(1, j) - f(0, j)
            } else if i == h - 1 {
                f(h - 1, j) - f(h - 2, j)
            } else {
                (f(i + 1, j) - f(i - 1, j)) / 2.0
            };
            let dj = if j == 0 {
                f(i, 1) - f(i, 0)
            } else if j == w - 1 {
                f(i, w - 1) - f(i, w - 2)
            } else {
                (f(i, j + 1) - f(i, j - 1)) / 2.0
            };
            magnitude.push(di.hypot(dj));
            orientation.push(full_angle(di, dj));
        }
    }
    Ok(GradientField { width: w, height: h, magnitude, orientation })
}

/// Reads a binary PGM (P5), binary PPM (P6) or 8-bit gray/RGB PNG.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let bytes = fs::read(path.as_ref())?;
    decode_image(&bytes)
}

/// Decodes an in-memory PGM, PPM or PNG file.
pub fn decode_image(bytes: &[u8]) -> Result<Image, ImageError> {
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else {
        Err(ImageError::UnsupportedFormat("expected P5, P6 or PNG signature".into()))
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<Image, ImageError> {
    let channels = if &bytes[..2] == b"P5" { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (n, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each header field
        let start_ws = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == start_ws {
            return Err(ImageError::MalformedHeader(format!("missing whitespace before field {n}")));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::MalformedHeader(format!("expected a number for field {n}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| ImageError::MalformedHeader(format!("number out of range: {text}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::MalformedHeader("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(ImageError::UnsupportedBitDepth(format!("maxval {maxval}, only 255 is supported")));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| ImageError::MalformedHeader("dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::TruncatedPayload { expected, found: payload.len() });
    }
    Ok(Image::from_bytes(width, height, channels, &payload[..expected]))
}

fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    use image::{DynamicImage, ImageFormat};
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| ImageError::MalformedHeader(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => Ok(Image::from_bytes(w, h, 1, buf.as_raw())),
        DynamicImage::ImageRgb8(buf) => Ok(Image::from_bytes(w, h, 3, buf.as_raw())),
        other => Err(ImageError::UnsupportedBitDepth(format!("PNG color type {:?}", other.color()))),
    }
}

/// Encodes as binary PGM (gray) or PPM (RGB) with maxval 255.
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

/// Writes binary PGM or PPM depending on the channel count.
pub fn save_pnm(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    fs::write(path, encode_pnm(img))?;
    Ok(())
}

/// Encodes an 8-bit PNG; used for previews served over HTTP.
pub fn encode_png(img: &Image) -> Result<Vec<u8>, ImageError> {
    use image::{ExtendedColorType, ImageEncoder};
    let color = if img.channels == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    let mut out = Cursor::new(Vec::new());
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&img.to_bytes(), img.width as u32, img.height as u32, color)
        .map_err(|e| ImageError::InvalidData(e.to_string()))?;
    Ok(out.into_inner())
}
