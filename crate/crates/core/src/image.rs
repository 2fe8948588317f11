//! RGB images with values in `[0, 1]`, raster I/O, and synthetic degradation.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, ImageReader, RgbImage};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::Tensor;

/// Planar RGB image: three `height × width` planes stored R, G, B.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageRGB {
    /// Builds an image from planar data, rejecting values outside `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(shape_err([3, height, width], data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Like [`from_planar`](Self::from_planar) but clamps into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn from_planar_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("non-finite pixel value".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::from_planar(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::from_planar(height, width, vec![value; 3 * height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_planar(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).expect("planar layout")
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Channel-averaged intensity `(R + G + B) / 3` per pixel.
    pub fn intensity(&self) -> Vec<f32> {
        let n = self.pixels();
        (0..n)
            .map(|i| (self.data[i] + self.data[n + i] + self.data[2 * n + i]) / 3.0)
            .collect()
    }

    pub(crate) fn expect_same_dims(&self, other: &ImageRGB) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err(self.dims(), other.dims()));
        }
        Ok(())
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let n = self.pixels();
        let mut buf = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                buf.push(quantize(self.data[c * n + i]));
            }
        }
        RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let n = w * h;
        let raw = img.as_raw();
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = raw[3 * i + c] as f32 / 255.0;
            }
        }
        Self { height: h, width: w, data }
    }

    /// PNG encoding of the quantized image.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let reader = ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| Error::Codec(e.to_string()))?;
        decode(reader)
    }
}

/// `round-half-up(v · 255)`.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn decode<R: std::io::BufRead + std::io::Seek>(reader: ImageReader<R>) -> Result<ImageRGB> {
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(f) => return Err(Error::UnsupportedFormat(format!("{f:?}"))),
        None => return Err(Error::UnsupportedFormat("unrecognized raster data".into())),
    }
    let img = reader.decode().map_err(|e| Error::Codec(e.to_string()))?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => Ok(ImageRGB::from_rgb8(&rgb)),
        other => Err(Error::NotRgb(format!("{:?}", other.color()))),
    }
}

/// Loads an 8-bit RGB PNG or binary PPM, mapping samples by `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    // content sniffing only; a misleading extension must not pick the codec
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let reader = ImageReader::new(file)
        .with_guessed_format()
        .map_err(|e| Error::Codec(e.to_string()))?;
    decode(reader)
}

/// Saves as PNG, or as binary PPM when the extension is `.ppm`.
pub fn save_image(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange(format!("pixel value {v} outside [0, 1]")));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let format = match ext.as_deref() {
        Some("ppm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    let rgb = img.to_rgb8();
    if format == ImageFormat::Pnm {
        let mut buf = Vec::with_capacity(rgb.len() + 32);
        buf.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
        buf.extend_from_slice(rgb.as_raw());
        std::fs::write(path, buf)?;
        return Ok(());
    }
    rgb.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Codec(other.to_string()),
    })
}

/// Lists the PNG/PPM files of a flat directory in name order.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Raises every value to `gamma`, a synthetic low-light degradation.
pub fn gamma_darken(img: &ImageRGB, gamma: f32) -> Result<ImageRGB> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("gamma must be >= 1, got {gamma}")));
    }
    let data = img.data.iter().map(|&v| v.powf(gamma)).collect();
    ImageRGB::from_planar(img.height, img.width, data)
}

/// Square crop at a uniformly drawn offset.
pub fn random_crop<R: Rng + ?Sized>(img: &ImageRGB, size: usize, rng: &mut R) -> Result<ImageRGB> {
    if size == 0 || size > img.height.min(img.width) {
        return Err(Error::InvalidParameter(format!(
            "crop size {size} does not fit a {}x{} image",
            img.height, img.width
        )));
    }
    let y0 = rng.random_range(0..=img.height - size);
    let x0 = rng.random_range(0..=img.width - size);
    Ok(crop(img, y0, x0, size, size))
}

pub fn crop(img: &ImageRGB, y0: usize, x0: usize, h: usize, w: usize) -> ImageRGB {
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in y0..y0 + h {
            let row = (c * img.height + y) * img.width;
            data.extend_from_slice(&img.data[row + x0..row + x0 + w]);
        }
    }
    ImageRGB { height: h, width: w, data }
}
