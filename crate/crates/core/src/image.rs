//! Grayscale image container and the pixel-level plumbing shared by every
//! other module: file IO, normalization, bilinear sampling and pyramid
//! downsampling.
//!
//! Coordinates: `x` indexes columns, `y` indexes rows, origin at the center
//! of the top-left pixel.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};

/// A 2D scalar field stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    /// Builds a grid, checking dimensions and finiteness.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Argument(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Zero image. Panics if either dimension is zero.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds a grid by evaluating `f(x, y)` on every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                left_w: self.width,
                left_h: self.height,
                right_w: other.width,
                right_h: other.height,
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pixel-wise combination of two equally sized grids.
    pub fn zip_map(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<ImageGrid> {
        self.check_same_shape(other)?;
        Ok(ImageGrid {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &ImageGrid) -> Result<ImageGrid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ImageGrid) -> Result<ImageGrid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Maximum absolute pixel difference.
    pub fn max_abs_diff(&self, other: &ImageGrid) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Bilinear sample with replicate-border clamping.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let row0 = y0 * self.width;
        let row1 = y1 * self.width;
        let top = self.data[row0 + x0] * (1.0 - fx) + self.data[row0 + x1] * fx;
        let bottom = self.data[row1 + x0] * (1.0 - fx) + self.data[row1 + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Free-function form of [`ImageGrid::sample_bilinear`].
pub fn sample_bilinear(img: &ImageGrid, x: f64, y: f64) -> f64 {
    img.sample_bilinear(x, y)
}

/// Min-max rescale to [0, 1]. A constant image maps to all zeros.
pub fn normalize(img: &ImageGrid) -> ImageGrid {
    let (lo, hi) = img.min_max();
    let range = hi - lo;
    if range <= 0.0 {
        return ImageGrid::zeros(img.width, img.height);
    }
    img.map(|v| (v - lo) / range)
}

/// 3x3 binomial smoothing ([1 2 1]/4 per axis) with replicate borders.
pub fn smooth3(img: &ImageGrid) -> ImageGrid {
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            let l = row[x.saturating_sub(1)];
            let r = row[(x + 1).min(w - 1)];
            tmp[y * w + x] = 0.25 * l + 0.5 * row[x] + 0.25 * r;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..w {
            out[y * w + x] =
                0.25 * tmp[up * w + x] + 0.5 * tmp[y * w + x] + 0.25 * tmp[down * w + x];
        }
    }
    ImageGrid {
        width: w,
        height: h,
        data: out,
    }
}

/// Gaussian pre-smoothing followed by block-mean decimation.
///
/// Output is `ceil(w / factor) x ceil(h / factor)`; border blocks are
/// truncated. Factor 1 returns the input untouched.
pub fn downsample(img: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 {
        return Err(Error::Argument("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let smoothed = smooth3(img);
    let (w, h) = (img.width, img.height);
    let ow = w.div_ceil(factor);
    let oh = h.div_ceil(factor);
    let mut data = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        let y0 = oy * factor;
        let y1 = (y0 + factor).min(h);
        for ox in 0..ow {
            let x0 = ox * factor;
            let x1 = (x0 + factor).min(w);
            let mut acc = 0.0;
            for y in y0..y1 {
                acc += smoothed.data[y * w + x0..y * w + x1].iter().sum::<f64>();
            }
            data.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    Ok(ImageGrid {
        width: ow,
        height: oh,
        data,
    })
}

/// Loads an 8- or 16-bit grayscale PNG or PGM (P2/P5).
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::Format(format!(
            "{}: {format:?} is not a supported format",
            path.display()
        )));
    }
    let decoded = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: expected grayscale, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    ImageGrid::new(w, h, data)
}

/// Writes a 16-bit grayscale image. Values are clamped to [0, 1] first.
///
/// A `.pgm` extension selects binary PGM, anything else PNG.
pub fn save_image(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, raw)
            .expect("buffer length matches dimensions");
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let format = if is_pgm {
        ImageFormat::Pnm
    } else {
        ImageFormat::Png
    };
    buf.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize, v: &[f64]) -> ImageGrid {
        ImageGrid::new(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageGrid::new(0, 3, vec![]).is_err());
        assert!(ImageGrid::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn normalize_cases() {
        let n = normalize(&grid(4, 1, &[2.0, 4.0, 6.0, 8.0]));
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in n.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(normalize(&grid(2, 2, &[5.0; 4])).data(), &[0.0; 4]);
        let unit = grid(3, 1, &[0.0, 0.25, 1.0]);
        assert_eq!(normalize(&unit), unit);
    }

    #[test]
    fn bilinear_cases() {
        let img = ImageGrid::from_fn(6, 7, |x, y| (x * 10 + y) as f64);
        assert_eq!(img.sample_bilinear(3.0, 5.0), 35.0);
        let quad = grid(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!((quad.sample_bilinear(0.5, 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(img.sample_bilinear(-2.0, 2.5), img.sample_bilinear(0.0, 2.5));
        assert_eq!(img.sample_bilinear(100.0, 100.0), img.get(5, 6));
    }

    #[test]
    fn downsample_cases() {
        let img = ImageGrid::from_fn(5, 3, |x, y| (x + 2 * y) as f64);
        assert_eq!(downsample(&img, 1).unwrap(), img);
        let c = downsample(&ImageGrid::filled(4, 4, 0.7), 2).unwrap();
        assert_eq!((c.width(), c.height()), (2, 2));
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let big = downsample(&ImageGrid::zeros(218, 181), 4).unwrap();
        assert_eq!((big.width(), big.height()), (55, 46));
        assert!(matches!(downsample(&img, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn load_pgm_ascii_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        std::fs::write(&p, "P2\n2 2\n255\n0 255\n128 64\n").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        let bogus = dir.path().join("bogus.png");
        std::fs::write(&bogus, b"not an image at all").unwrap();
        assert!(matches!(load_image(&bogus), Err(Error::Format(_))));
    }

    #[test]
    fn save_clamps_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let img = grid(3, 1, &[1.5, -0.2, 0.123456]);
        for name in ["x.png", "x.pgm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.data()[0], 1.0);
            assert_eq!(back.data()[1], 0.0);
            assert!((back.data()[2] - 0.123456).abs() <= 1.0 / 65535.0);
        }
    }
}
