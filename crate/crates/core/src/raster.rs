//! Dense float rasters with 1 or 3 interleaved channels.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major, channel-interleaved float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty raster {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite sample".into()));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::zero())
    }

    /// Builds an image by evaluating `f(x, y, channel)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
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
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Sample with zero contribution outside the raster.
    #[inline]
    pub fn get_or_zero(&self, x: isize, y: isize, c: usize) -> T {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            T::zero()
        } else {
            self.get(x as usize, y as usize, c)
        }
    }

    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> T {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    /// Bilinear sample at a continuous position with edge replication.
    pub fn sample_clamped(&self, x: T, y: T, c: usize) -> T {
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let x0 = x0f.to_isize().unwrap_or(0);
        let y0 = y0f.to_isize().unwrap_or(0);
        let one = T::one();
        let v00 = self.get_clamped(x0, y0, c);
        let v01 = self.get_clamped(x0 + 1, y0, c);
        let v10 = self.get_clamped(x0, y0 + 1, c);
        let v11 = self.get_clamped(x0 + 1, y0 + 1, c);
        (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Mean absolute difference over all samples.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<T> {
        if !self.same_shape(other) {
            return Err(crate::error::dims_mismatch("image", self.dims(), other.dims()));
        }
        let sum: T = self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).sum();
        Ok(sum / T::from_usize_lossy(self.data.len()))
    }

    /// Single-channel luminance (Rec. 601 weights) or a copy of a gray image.
    pub fn to_gray(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        Self::from_fn(self.width, self.height, 1, |x, y, _| {
            wr * self.get(x, y, 0) + wg * self.get(x, y, 1) + wb * self.get(x, y, 2)
        })
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, edge replication.
    pub fn gaussian_blur(&self, sigma: T) -> Self {
        if sigma <= T::zero() {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as isize;
        let mut tmp = Self::zeros(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let mut acc = T::zero();
                    for (k, &w) in kernel.iter().enumerate() {
                        acc = acc + w * self.get_clamped(x as isize + k as isize - radius, y as isize, c);
                    }
                    tmp.set(x, y, c, acc);
                }
            }
        }
        let mut out = Self::zeros(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let mut acc = T::zero();
                    for (k, &w) in kernel.iter().enumerate() {
                        acc = acc + w * tmp.get_clamped(x as isize, y as isize + k as isize - radius, c);
                    }
                    out.set(x, y, c, acc);
                }
            }
        }
        out
    }

    /// Resamples to `width x height` keeping pixel-center alignment, so the
    /// raster midpoint maps onto the raster midpoint for any parity.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        let sx = T::from_usize_lossy(self.width) / T::from_usize_lossy(width);
        let sy = T::from_usize_lossy(self.height) / T::from_usize_lossy(height);
        let half = T::lit(0.5);
        Self::from_fn(width, height, self.channels, |x, y, c| {
            let srcx = (T::from_usize_lossy(x) + half) * sx - half;
            let srcy = (T::from_usize_lossy(y) + half) * sy - half;
            self.sample_clamped(srcx, srcy, c)
        })
    }

    /// Loads an 8-bit PNG/PPM/PGM file; gray stays 1 channel, everything else becomes RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let dynimg = image::open(path.as_ref())?;
        Ok(Self::from_dynamic(&dynimg))
    }

    pub fn from_dynamic(dynimg: &DynamicImage) -> Self {
        let scale = |v: u8| T::lit(v as f64 / 255.0);
        match dynimg {
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) => {
                let g = dynimg.to_luma8();
                Self::from_fn(g.width() as usize, g.height() as usize, 1, |x, y, _| {
                    scale(g.get_pixel(x as u32, y as u32)[0])
                })
            }
            _ => {
                let rgb = dynimg.to_rgb8();
                Self::from_fn(rgb.width() as usize, rgb.height() as usize, 3, |x, y, c| {
                    scale(rgb.get_pixel(x as u32, y as u32)[c])
                })
            }
        }
    }

    /// Quantizes with `round(v * 255)` after clamping to [0, 1].
    pub fn to_dynamic(&self) -> DynamicImage {
        let q = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        let bytes: Vec<u8> = self.data.iter().map(|&v| q(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("buffer sized"))
        } else {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("buffer sized"))
        }
    }

    /// Writes PNG, PPM or PGM depending on the extension (PNG when absent).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        let fmt = match ext.as_str() {
            "ppm" | "pgm" | "pnm" => image::ImageFormat::Pnm,
            _ => image::ImageFormat::Png,
        };
        let dynimg = self.to_dynamic();
        let mut buf = std::io::Cursor::new(Vec::new());
        dynimg.write_to(&mut buf, fmt)?;
        crate::io::write_atomic(path, buf.get_ref())
    }
}

pub(crate) fn gaussian_kernel<T: Scalar>(sigma: T) -> Vec<T> {
    let radius = (sigma * T::lit(3.0)).ceil().to_usize().unwrap_or(1).max(1);
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let mut k: Vec<T> = (0..=2 * radius)
        .map(|i| {
            let d = T::from_usize_lossy(i) - T::from_usize_lossy(radius);
            (-(d * d) / two_s2).exp()
        })
        .collect();
    let sum: T = k.iter().copied().sum();
    for w in &mut k {
        *w = *w / sum;
    }
    k
}
