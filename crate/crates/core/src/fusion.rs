//! Face crop, translation alignment, masked paste-back and gap filling.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::raster::Image;
use crate::scalar::Scalar;

/// Side length of the square face crops handed to the face corrector.
pub const FACE_CROP_SIZE: usize = 256;
/// Stop once the largest Laplace residual on the gap falls below this.
pub const FILL_TOLERANCE: f64 = 1e-4;
pub const FILL_MAX_SWEEPS: usize = 10_000;
const SOR_OMEGA: f64 = 1.8;

/// Axis-aligned pixel box `[x, x + width) x [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct FaceBox {
    pub x: i64,
    pub y: i64,
    pub width: i64,
    pub height: i64,
}

impl TryFrom<[i64; 4]> for FaceBox {
    type Error = Error;

    fn try_from(v: [i64; 4]) -> Result<Self> {
        FaceBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<FaceBox> for [i64; 4] {
    fn from(b: FaceBox) -> Self {
        [b.x, b.y, b.width, b.height]
    }
}

impl FaceBox {
    pub fn new(x: i64, y: i64, width: i64, height: i64) -> Result<Self> {
        if width <= 0 || height <= 0 {
            return Err(Error::EmptyBox);
        }
        Ok(Self { x, y, width, height })
    }

    /// Intersection with a `width x height` raster, or `None` when empty.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<FaceBox> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = (self.x + self.width).min(width as i64);
        let y1 = (self.y + self.height).min(height as i64);
        (x1 > x0 && y1 > y0).then_some(FaceBox { x: x0, y: y0, width: x1 - x0, height: y1 - y0 })
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

/// Soft single-channel weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask<T>(Image<T>);

impl<T: Scalar> Mask<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::InvalidImage("mask values must lie in [0, 1]".into()));
        }
        Ok(Self(Image::new(width, height, 1, data)?))
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        let v = value.max(T::zero()).min(T::one());
        Self(Image::filled(width, height, 1, v))
    }

    pub fn from_image(img: &Image<T>) -> Result<Self> {
        let gray = img.to_gray();
        Self::new(gray.width(), gray.height(), gray.into_data())
    }

    /// 8-bit grayscale file, 255 = face.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_image(&Image::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.0.save(path)
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.0.get(x, y, 0)
    }

    pub fn as_image(&self) -> &Image<T> {
        &self.0
    }

    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > T::lit(0.5)
    }

    pub fn count_set(&self) -> usize {
        self.0.data().iter().filter(|&&v| v > T::lit(0.5)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceCrop<T> {
    pub image: Image<T>,
    /// Box in source pixels after clamping to the source image.
    pub source_box: FaceBox,
    /// Crop pixels per source pixel along x and y.
    pub scale: (T, T),
}

pub fn crop_face<T: Scalar>(img: &Image<T>, face_box: FaceBox) -> Result<FaceCrop<T>> {
    crop_face_sized(img, face_box, FACE_CROP_SIZE)
}

/// Clamps the box to the image and resamples it bilinearly to `size x size`.
pub fn crop_face_sized<T: Scalar>(img: &Image<T>, face_box: FaceBox, size: usize) -> Result<FaceCrop<T>> {
    let b = face_box.clamp_to(img.width(), img.height()).ok_or(Error::EmptyBox)?;
    let s = T::from_usize_lossy(size);
    let scale = (s / T::lit(b.width as f64), s / T::lit(b.height as f64));
    let half = T::lit(0.5);
    let bx = T::lit(b.x as f64);
    let by = T::lit(b.y as f64);
    let image = Image::from_fn(size, size, img.channels(), |u, v, c| {
        let sx = bx + (T::from_usize_lossy(u) + half) / scale.0 - half;
        let sy = by + (T::from_usize_lossy(v) + half) / scale.1 - half;
        img.sample_clamped(sx, sy, c)
    });
    Ok(FaceCrop { image, source_box: b, scale })
}

/// Where the background correction moved the face: the negated mean of
/// `bg_flow` over the box.
pub fn compute_face_translation<T: Scalar>(bg_flow: &FlowField<T>, face_box: FaceBox) -> Result<(T, T)> {
    let b = face_box.clamp_to(bg_flow.width(), bg_flow.height()).ok_or(Error::EmptyBox)?;
    let mut sx = T::zero();
    let mut sy = T::zero();
    for y in b.y..b.y + b.height {
        for x in b.x..b.x + b.width {
            let (dx, dy) = bg_flow.get(x as usize, y as usize);
            sx = sx + dx;
            sy = sy + dy;
        }
    }
    let n = T::lit((b.width * b.height) as f64);
    Ok((-(sx / n), -(sy / n)))
}

/// Composites the face back over `bg`, shifted by `offset`.
///
/// Returns the composite and a binary gap mask: pixels of the original box
/// that the shifted, masked face leaves uncovered (alpha below one half).
pub fn paste_face<T: Scalar>(
    bg: &Image<T>,
    face: &FaceCrop<T>,
    mask: &Mask<T>,
    offset: (T, T),
) -> Result<(Image<T>, Mask<T>)> {
    if mask.dims() != face.image.dims() {
        return Err(crate::error::dims_mismatch("mask vs face", mask.dims(), face.image.dims()));
    }
    if bg.channels() != face.image.channels() {
        return Err(Error::DimensionMismatch(format!(
            "channels {} vs {}",
            bg.channels(),
            face.image.channels()
        )));
    }
    let b = face.source_box;
    let half = T::lit(0.5);
    let (bx, by) = (T::lit(b.x as f64), T::lit(b.y as f64));
    let (bw, bh) = (T::lit(b.width as f64), T::lit(b.height as f64));
    let mut out = bg.clone();
    let mut gap = vec![T::zero(); bg.pixel_count()];
    for y in 0..bg.height() {
        for x in 0..bg.width() {
            let srcx = T::from_usize_lossy(x) - offset.0;
            let srcy = T::from_usize_lossy(y) - offset.1;
            let inside = srcx >= bx - half && srcx < bx + bw - half && srcy >= by - half && srcy < by + bh - half;
            let mut alpha = T::zero();
            if inside {
                let u = (srcx - bx + half) * face.scale.0 - half;
                let v = (srcy - by + half) * face.scale.1 - half;
                alpha = mask.as_image().sample_clamped(u, v, 0).max(T::zero()).min(T::one());
                if alpha > T::zero() {
                    for c in 0..bg.channels() {
                        let f = face.image.sample_clamped(u, v, c);
                        let g = bg.get(x, y, c);
                        let mixed = alpha * f + (T::one() - alpha) * g;
                        out.set(x, y, c, mixed.max(f.min(g)).min(f.max(g)));
                    }
                }
            }
            if b.contains(x as i64, y as i64) && alpha < half {
                gap[y * bg.width() + x] = T::one();
            }
        }
    }
    Ok((out, Mask::new(bg.width(), bg.height(), gap)?))
}

/// Harmonic fill of the pixels selected by `gap_mask` (weights above one half).
///
/// Successive over-relaxation of the discrete Laplace equation, with
/// unmasked pixels as fixed boundary values and in-image 4-neighbourhoods.
/// A fully masked image comes back uniform mid-gray.
pub fn fill_gaps<T: Scalar>(img: &Image<T>, gap_mask: &Mask<T>) -> Result<Image<T>> {
    Ok(fill_gaps_with_stats(img, gap_mask)?.0)
}

/// Like [`fill_gaps`], also returning the sweep count and final max residual.
pub fn fill_gaps_with_stats<T: Scalar>(img: &Image<T>, gap_mask: &Mask<T>) -> Result<(Image<T>, usize, T)> {
    if gap_mask.dims() != img.dims() {
        return Err(crate::error::dims_mismatch("gap mask vs image", gap_mask.dims(), img.dims()));
    }
    let (w, h) = img.dims();
    let masked: Vec<(usize, usize)> =
        (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| gap_mask.is_set(x, y)).collect();
    if masked.is_empty() {
        return Ok((img.clone(), 0, T::zero()));
    }
    if masked.len() == w * h {
        return Ok((Image::filled(w, h, img.channels(), T::lit(0.5)), 0, T::zero()));
    }
    let mut out = img.clone();
    let omega = T::lit(SOR_OMEGA);
    let tol = T::lit(FILL_TOLERANCE);
    let neighbour_mean = |im: &Image<T>, x: usize, y: usize, c: usize| {
        let mut s = T::zero();
        let mut n = 0usize;
        if x > 0 {
            s = s + im.get(x - 1, y, c);
            n += 1;
        }
        if x + 1 < w {
            s = s + im.get(x + 1, y, c);
            n += 1;
        }
        if y > 0 {
            s = s + im.get(x, y - 1, c);
            n += 1;
        }
        if y + 1 < h {
            s = s + im.get(x, y + 1, c);
            n += 1;
        }
        s / T::from_usize_lossy(n)
    };
    let mut max_residual = T::zero();
    let mut sweeps = 0;
    for c in 0..img.channels() {
        // Start from the mean of the known pixels.
        let (mut sum, mut count) = (T::zero(), 0usize);
        for y in 0..h {
            for x in 0..w {
                if !gap_mask.is_set(x, y) {
                    sum = sum + img.get(x, y, c);
                    count += 1;
                }
            }
        }
        let init = sum / T::from_usize_lossy(count);
        for &(x, y) in &masked {
            out.set(x, y, c, init);
        }
        let mut residual = T::infinity();
        let mut channel_sweeps = 0;
        while channel_sweeps < FILL_MAX_SWEEPS {
            for &(x, y) in &masked {
                let v = out.get(x, y, c);
                let target = neighbour_mean(&out, x, y, c);
                out.set(x, y, c, v + omega * (target - v));
            }
            channel_sweeps += 1;
            residual = masked
                .iter()
                .map(|&(x, y)| (neighbour_mean(&out, x, y, c) - out.get(x, y, c)).abs())
                .fold(T::zero(), T::max);
            if residual < tol {
                break;
            }
        }
        sweeps = sweeps.max(channel_sweeps);
        max_residual = max_residual.max(residual);
    }
    Ok((out, sweeps, max_residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{barrel_flow, LensParams};
    use crate::synthgen::patterns;

    #[test]
    fn full_box_crop_of_crop_sized_image_is_identity() {
        let img = patterns::smooth::<f64>(256, 256, 3);
        let crop = crop_face(&img, FaceBox::new(0, 0, 256, 256).unwrap()).unwrap();
        assert_eq!(crop.image, img);
        assert_eq!(crop.scale, (1.0, 1.0));
    }

    #[test]
    fn crop_clamps_box() {
        let img = patterns::smooth::<f64>(100, 80, 1);
        let crop = crop_face(&img, FaceBox::new(60, -20, 80, 60).unwrap()).unwrap();
        assert_eq!(crop.source_box, FaceBox { x: 60, y: 0, width: 40, height: 40 });
        assert_eq!(crop.image.dims(), (256, 256));
        assert!(matches!(crop_face(&img, FaceBox::new(100, 0, 10, 10).unwrap()), Err(Error::EmptyBox)));
        assert!(FaceBox::new(0, 0, 0, 5).is_err());
    }

    #[test]
    fn crop_paste_round_trip() {
        let img = patterns::smooth::<f64>(160, 120, 3);
        let b = FaceBox::new(30, 20, 90, 70).unwrap();
        let crop = crop_face(&img, b).unwrap();
        let ones = Mask::filled(256, 256, 1.0);
        let (out, gap) = paste_face(&img, &crop, &ones, (0.0, 0.0)).unwrap();
        assert_eq!(gap.count_set(), 0);
        let mut sum = 0.0;
        let mut n = 0;
        for y in 0..img.height() {
            for x in 0..img.width() {
                for c in 0..3 {
                    let d = (out.get(x, y, c) - img.get(x, y, c)).abs();
                    if b.contains(x as i64, y as i64) {
                        sum += d;
                        n += 1;
                    } else {
                        assert_eq!(d, 0.0);
                    }
                }
            }
        }
        assert!(sum / n as f64 <= 0.02);
    }

    #[test]
    fn paste_examples() {
        let bg = Image::<f64>::filled(300, 280, 1, 0.2);
        let face_img = patterns::smooth::<f64>(300, 280, 1);
        let b = FaceBox::new(20, 10, 256, 256).unwrap();
        let crop = crop_face(&face_img, b).unwrap();

        let (out, gap) = paste_face(&bg, &crop, &Mask::filled(256, 256, 0.0), (0.0, 0.0)).unwrap();
        assert_eq!(out, bg);
        assert_eq!(gap.count_set(), 256 * 256);

        let (out, gap) = paste_face(&bg, &crop, &Mask::filled(256, 256, 1.0), (0.0, 0.0)).unwrap();
        assert_eq!(gap.count_set(), 0);
        for y in 10..266 {
            for x in 20..276 {
                assert_eq!(out.get(x, y, 0), face_img.get(x, y, 0));
            }
        }

        let (_, gap) = paste_face(&bg, &crop, &Mask::filled(256, 256, 1.0), (5.0, 0.0)).unwrap();
        assert_eq!(gap.count_set(), 5 * 256);
        for y in 10..266 {
            for x in 20..25 {
                assert!(gap.is_set(x, y));
            }
        }

        assert!(paste_face(&bg, &crop, &Mask::filled(10, 10, 1.0), (0.0, 0.0)).is_err());
    }

    #[test]
    fn composite_stays_between_sources() {
        let bg = patterns::checkerboard::<f64>(64, 64, 5);
        let src = patterns::smooth::<f64>(64, 64, 1);
        let crop = crop_face_sized(&src, FaceBox::new(8, 8, 40, 40).unwrap(), 32).unwrap();
        let mask = Mask::new(32, 32, (0..32 * 32).map(|i| (i % 7) as f64 / 6.0).collect()).unwrap();
        let (out, _) = paste_face(&bg, &crop, &mask, (2.5, -1.5)).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let b = bg.get(x, y, 0);
                let o = out.get(x, y, 0);
                let lo = b.min(0.2);
                let hi = b.max(0.8);
                assert!(o >= lo - 1e-15 && o <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn translation_examples() {
        let b = FaceBox::new(10, 10, 20, 12).unwrap();
        assert_eq!(compute_face_translation(&FlowField::<f64>::zeros(64, 48), b).unwrap(), (0.0, 0.0));
        let c = FlowField::<f64>::constant(64, 48, 2.0, -1.0);
        assert_eq!(compute_face_translation(&c, b).unwrap(), (-2.0, 1.0));
        let radial = barrel_flow(&LensParams::<f64>::centered(0.1, 0.01, 64, 48), 64, 48).unwrap();
        let centered = FaceBox::new(16, 12, 32, 24).unwrap();
        let (tx, ty) = compute_face_translation(&radial, centered).unwrap();
        assert!(tx.abs() < 1e-9 && ty.abs() < 1e-9);
        assert!(matches!(
            compute_face_translation(&c, FaceBox::new(70, 0, 5, 5).unwrap()),
            Err(Error::EmptyBox)
        ));
    }

    #[test]
    fn fill_examples() {
        let img = patterns::smooth::<f64>(20, 20, 3);
        let empty = Mask::filled(20, 20, 0.0);
        assert_eq!(fill_gaps(&img, &empty).unwrap(), img);

        let constant = Image::<f64>::filled(20, 20, 1, 0.35);
        let mut data = vec![0.0; 400];
        for y in 5..12 {
            for x in 3..15 {
                data[y * 20 + x] = 1.0;
            }
        }
        let gap = Mask::new(20, 20, data).unwrap();
        let filled = fill_gaps(&constant, &gap).unwrap();
        assert!(filled.data().iter().all(|&v| (v - 0.35).abs() < 1e-12));

        // Single hole with neighbours {0, 0, 1, 1}.
        let mut vals = vec![0.0f64; 9];
        vals[1] = 0.0; // up
        vals[3] = 0.0; // left
        vals[5] = 1.0; // right
        vals[7] = 1.0; // down
        let img = Image::new(3, 3, 1, vals).unwrap();
        let mut m = vec![0.0; 9];
        m[4] = 1.0;
        let out = fill_gaps(&img, &Mask::new(3, 3, m).unwrap()).unwrap();
        assert!((out.get(1, 1, 0) - 0.5).abs() < 1e-4);

        let all = fill_gaps(&img, &Mask::filled(3, 3, 1.0)).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.5));
    }
}
