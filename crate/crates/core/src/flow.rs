//! Dense displacement fields.
//!
//! Flows use the backward (sampling) convention: the output pixel at column
//! `x`, row `y` pulls the source at `(x + dx, y + dy)`.

use crate::error::{dims_mismatch, Error, Result};
use crate::raster::Image;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    width: usize,
    height: usize,
    /// Interleaved `(dx, dy)` per pixel, row-major.
    data: Vec<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidFlow(format!("flow must be at least 2x2, got {width}x{height}")));
        }
        if data.len() != width * height * 2 {
            return Err(Error::InvalidFlow(format!(
                "expected {} components, got {}",
                width * height * 2,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFlow("non-finite component".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width >= 2 && height >= 2, "flow must be at least 2x2");
        Self { width, height, data: vec![T::zero(); width * height * 2] }
    }

    pub fn constant(width: usize, height: usize, dx: T, dy: T) -> Self {
        Self::from_fn(width, height, |_, _| (dx, dy))
    }

    /// Builds a flow from `f(x, y) -> (dx, dy)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
        assert!(width >= 2 && height >= 2, "flow must be at least 2x2");
        let mut data = Vec::with_capacity(width * height * 2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(x, y);
                data.push(dx);
                data.push(dy);
            }
        }
        Self { width, height, data }
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (T, T) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: (T, T)) {
        let i = 2 * (y * self.width + x);
        self.data[i] = d.0;
        self.data[i + 1] = d.1;
    }

    #[inline]
    fn get_clamped(&self, x: isize, y: isize) -> (T, T) {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    /// Bilinear sample with edge replication.
    pub fn sample(&self, x: T, y: T) -> (T, T) {
        let mut acc = (T::zero(), T::zero());
        for (px, py, w) in bilinear_taps(x, y) {
            let (dx, dy) = self.get_clamped(px, py);
            acc.0 = acc.0 + w * dx;
            acc.1 = acc.1 + w * dy;
        }
        acc
    }

    /// Pixel indices and weights that [`FlowField::sample`] combines, after clamping.
    pub(crate) fn sample_taps(&self, x: T, y: T) -> [(usize, T); 4] {
        let taps = bilinear_taps(x, y);
        taps.map(|(px, py, w)| {
            let xc = px.clamp(0, self.width as isize - 1) as usize;
            let yc = py.clamp(0, self.height as isize - 1) as usize;
            (yc * self.width + xc, w)
        })
    }

    pub fn ensure_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(dims_mismatch("flow", self.dims(), other.dims()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| v * s).collect() }
    }

    /// `self + s * other`, componentwise.
    pub fn axpy(&self, s: T, other: &Self) -> Result<Self> {
        self.ensure_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + s * b).collect();
        Ok(Self { width: self.width, height: self.height, data })
    }

    pub fn mean_magnitude(&self) -> T {
        let sum: T = self.data.chunks_exact(2).map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt()).sum();
        sum / T::from_usize_lossy(self.pixel_count())
    }

    pub fn mean_squared_magnitude(&self) -> T {
        let sum: T = self.data.chunks_exact(2).map(|d| d[0] * d[0] + d[1] * d[1]).sum();
        sum / T::from_usize_lossy(self.pixel_count())
    }

    pub fn max_magnitude(&self) -> T {
        self.data
            .chunks_exact(2)
            .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt())
            .fold(T::zero(), T::max)
    }

    /// Mean Euclidean distance between corresponding displacement vectors.
    pub fn mean_endpoint_error(&self, other: &Self) -> Result<T> {
        self.ensure_same_dims(other)?;
        let sum: T = self
            .data
            .chunks_exact(2)
            .zip(other.data.chunks_exact(2))
            .map(|(a, b)| {
                let ex = a[0] - b[0];
                let ey = a[1] - b[1];
                (ex * ex + ey * ey).sqrt()
            })
            .sum();
        Ok(sum / T::from_usize_lossy(self.pixel_count()))
    }

    /// Resamples onto a `width x height` grid with pixel-center alignment and
    /// scales displacements by the per-axis resolution ratio.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        let sx = T::from_usize_lossy(self.width) / T::from_usize_lossy(width);
        let sy = T::from_usize_lossy(self.height) / T::from_usize_lossy(height);
        let half = T::lit(0.5);
        Self::from_fn(width, height, |x, y| {
            let srcx = (T::from_usize_lossy(x) + half) * sx - half;
            let srcy = (T::from_usize_lossy(y) + half) * sy - half;
            let (dx, dy) = self.sample(srcx, srcy);
            (dx / sx, dy / sy)
        })
    }

    /// Separable Gaussian smoothing of both components, edges clamped.
    pub fn gaussian_blur(&self, sigma: T) -> Self {
        let n = self.pixel_count();
        let component = |k: usize| {
            let plane = (0..n).map(|i| self.data[2 * i + k]).collect();
            Image::new(self.width, self.height, 1, plane).expect("plane matches flow dims").gaussian_blur(sigma)
        };
        let (bx, by) = (component(0), component(1));
        let data = bx.data().iter().zip(by.data()).flat_map(|(&a, &b)| [a, b]).collect();
        Self { width: self.width, height: self.height, data }
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// The four integer neighbours of `(x, y)` with their bilinear weights.
#[inline]
pub(crate) fn bilinear_taps<T: Scalar>(x: T, y: T) -> [(isize, isize, T); 4] {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
    let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
    let one = T::one();
    [
        (x0, y0, (one - fx) * (one - fy)),
        (x0 + 1, y0, fx * (one - fy)),
        (x0, y0 + 1, (one - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ]
}
