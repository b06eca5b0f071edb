//! Synthetic distortion pairs with exact ground-truth correction flows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{barrel_flow, barrel_forward_flow, grid_center, radial_flow, LensParams};
use crate::raster::Image;
use crate::scalar::Scalar;
use crate::warp::warp_image;

const MIN_SIDE: usize = 8;
/// Relative half-width of the seeded strength jitter.
pub const STRENGTH_JITTER: f64 = 0.1;

/// A distorted image together with the flows relating it to the clean one.
#[derive(Debug, Clone)]
pub struct SynthPair<T> {
    pub distorted: Image<T>,
    /// Backward flow that corrects `distorted` back to the clean image.
    pub gt_flow: FlowField<T>,
    /// Backward flow that produced `distorted` from the clean image. Clean
    /// annotation points map into the distorted frame through
    /// [`crate::warp::warp_points`] with this flow.
    pub forward_flow: FlowField<T>,
}

/// Radial outward stretch whose magnitude grows as `(rho / rho_max)^3` and
/// equals `strength` at the farthest corner.
///
/// With `jitter_seed`, the strength is scaled by a factor drawn uniformly from
/// `[0.9, 1.1]`.
pub fn make_corner_stretch_pair<T: Scalar>(
    img: &Image<T>,
    strength: T,
    jitter_seed: Option<u64>,
) -> Result<SynthPair<T>> {
    let (w, h) = img.dims();
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::InvalidImage(format!("synthetic pairs need at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}")));
    }
    if !strength.is_finite() || strength < T::zero() {
        return Err(Error::InvalidConfig(format!("strength must be non-negative, got {strength}")));
    }
    let strength = match jitter_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f: f64 = rng.gen_range(1.0 - STRENGTH_JITTER..=1.0 + STRENGTH_JITTER);
            strength * T::lit(f)
        }
        None => strength,
    };
    let center = grid_center::<T>(w, h);
    let rho_max = center.0.hypot(center.1);
    let a = strength / (rho_max * rho_max * rho_max);
    let gt_flow = radial_flow(w, h, center, |rho| Ok(rho + a * rho * rho * rho))?;
    let forward_flow = radial_flow(w, h, center, |rho| invert_cubic_stretch(rho, a))?;
    let distorted = warp_image(img, &forward_flow)?;
    Ok(SynthPair { distorted, gt_flow, forward_flow })
}

/// Solves `r + a r^3 = target` for `r` in `[0, target]`.
fn invert_cubic_stretch<T: Scalar>(target: T, a: T) -> Result<T> {
    if a == T::zero() {
        return Ok(target);
    }
    // Convex and increasing: Newton from the right converges monotonically.
    let mut r = target;
    for _ in 0..64 {
        let g = r + a * r * r * r - target;
        let step = g / (T::one() + T::lit(3.0) * a * r * r);
        r = r - step;
        if step.abs() <= T::epsilon() * target.max(T::one()) {
            return Ok(r);
        }
    }
    Err(Error::NoConvergence(format!("stretch inversion at radius {target}")))
}

/// Resamples `img` through the lens so that `barrel_flow(lens)` corrects it.
pub fn make_barrel_pair<T: Scalar>(img: &Image<T>, lens: &LensParams<T>) -> Result<SynthPair<T>> {
    let (w, h) = img.dims();
    let forward_flow = barrel_forward_flow(lens, w, h)?;
    let gt_flow = barrel_flow(lens, w, h)?;
    let distorted = warp_image(img, &forward_flow)?;
    Ok(SynthPair { distorted, gt_flow, forward_flow })
}

/// Test patterns used by the generators, the CLI and the benchmarks.
pub mod patterns {
    use crate::raster::Image;
    use crate::scalar::Scalar;

    /// Alternating `square`-pixel cells of 0.1 and 0.9.
    pub fn checkerboard<T: Scalar>(width: usize, height: usize, square: usize) -> Image<T> {
        let square = square.max(1);
        Image::from_fn(width, height, 1, |x, y, _| {
            if (x / square + y / square) % 2 == 0 {
                T::lit(0.9)
            } else {
                T::lit(0.1)
            }
        })
    }

    /// Band-limited pattern: a sum of low-frequency sinusoids in [0.2, 0.8].
    pub fn smooth<T: Scalar>(width: usize, height: usize, channels: usize) -> Image<T> {
        Image::from_fn(width, height, channels, |x, y, c| {
            let (x, y) = (x as f64, y as f64);
            let phase = c as f64 * 0.7;
            let v = 0.5 + 0.15 * (0.11 * x + phase).sin() + 0.15 * (0.09 * y - phase).cos();
            T::lit(v)
        })
    }

    /// Dark background with bright straight grid lines every `spacing` pixels.
    pub fn grid_lines<T: Scalar>(width: usize, height: usize, spacing: usize) -> Image<T> {
        let spacing = spacing.max(2);
        Image::from_fn(width, height, 1, |x, y, _| {
            if x % spacing == spacing / 2 || y % spacing == spacing / 2 {
                T::lit(0.9)
            } else {
                T::lit(0.15)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::sym_loss;
    use crate::warp::warp_points;

    #[test]
    fn zero_strength_is_identity() {
        let img = patterns::smooth::<f64>(20, 16, 3);
        let pair = make_corner_stretch_pair(&img, 0.0, None).unwrap();
        assert_eq!(pair.distorted, img);
        assert!(pair.gt_flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_magnitude_is_exact_and_center_fixed() {
        let img = patterns::smooth::<f64>(33, 25, 1);
        let pair = make_corner_stretch_pair(&img, 5.0, None).unwrap();
        assert_eq!(pair.gt_flow.get(16, 12), (0.0, 0.0));
        for (x, y) in [(0, 0), (32, 0), (0, 24), (32, 24)] {
            let (dx, dy) = pair.gt_flow.get(x, y);
            assert!((dx.hypot(dy) - 5.0).abs() < 1e-12);
        }
        assert!((pair.gt_flow.max_magnitude() - 5.0).abs() < 1e-12);
        assert!(sym_loss(&pair.gt_flow) < 1e-12);
    }

    #[test]
    fn round_trip_recovers_smooth_image() {
        let img = patterns::smooth::<f64>(96, 80, 1);
        let pair = make_corner_stretch_pair(&img, 3.0, None).unwrap();
        let back = warp_image(&pair.distorted, &pair.gt_flow).unwrap();
        // Pixels whose correction samples fall outside the frame have no source.
        let (w, h) = img.dims();
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = pair.gt_flow.get(x, y);
                let (sx, sy) = (x as f64 + dx, y as f64 + dy);
                if sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64 {
                    sum += (back.get(x, y, 0) - img.get(x, y, 0)).abs();
                    n += 1;
                }
            }
        }
        let mad = sum / n as f64;
        assert!(mad <= 0.02, "mad = {mad}");
    }

    #[test]
    fn jitter_is_seeded_and_bounded() {
        let img = patterns::smooth::<f64>(16, 16, 1);
        let a = make_corner_stretch_pair(&img, 4.0, Some(9)).unwrap();
        let b = make_corner_stretch_pair(&img, 4.0, Some(9)).unwrap();
        assert_eq!(a.gt_flow, b.gt_flow);
        assert_eq!(a.distorted, b.distorted);
        let m = a.gt_flow.max_magnitude();
        assert!((3.6..=4.4).contains(&m));
    }

    #[test]
    fn rejects_small_images_and_negative_strength() {
        let small = Image::<f64>::zeros(7, 9, 1);
        assert!(make_corner_stretch_pair(&small, 1.0, None).is_err());
        let ok = Image::<f64>::zeros(8, 8, 1);
        assert!(make_corner_stretch_pair(&ok, -1.0, None).is_err());
    }

    #[test]
    fn identity_lens_pair() {
        let img = patterns::checkerboard::<f64>(24, 18, 4);
        let pair = make_barrel_pair(&img, &LensParams::centered(0.0, 0.0, 24, 18)).unwrap();
        assert!(pair.distorted.mean_abs_diff(&img).unwrap() < 1e-12);
        assert!(pair.gt_flow.max_magnitude() < 1e-12);
    }

    #[test]
    fn barrel_pair_bows_off_center_rows_only() {
        let (w, h) = (129, 97);
        let img = patterns::grid_lines::<f64>(w, h, 16);
        let lens = LensParams::centered(0.1, 0.01, w, h);
        let pair = make_barrel_pair(&img, &lens).unwrap();
        assert!(sym_loss(&pair.gt_flow) < 1e-12);
        let row_deviation = |y: f64| {
            let pts: Vec<(f64, f64)> = (10..w - 10).step_by(4).map(|x| (x as f64, y)).collect();
            let mapped: Vec<(f64, f64)> =
                warp_points(&pts, &pair.forward_flow).into_iter().map(|r| r.unwrap()).collect();
            let ys: Vec<f64> = mapped.iter().map(|p| p.1).collect();
            let max = ys.iter().cloned().fold(f64::MIN, f64::max);
            let min = ys.iter().cloned().fold(f64::MAX, f64::min);
            max - min
        };
        assert!(row_deviation(48.0) < 1e-6);
        assert!(row_deviation(10.0) > 0.5);
    }
}
