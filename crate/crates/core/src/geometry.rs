//! Radial lens model, flow construction and the flips behind the symmetry prior.
//!
//! The lens maps a normalized distorted radius to an undistorted one,
//!
//! ```text
//! r_u = r_d * (1 - k1 * r_d^2 - k2 * r_d^4)
//! ```
//!
//! with radii measured from `center` in units of `r_norm` pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::scalar::Scalar;

/// Number of subintervals used when sampling the derivative for the monotonicity check.
const MONOTONICITY_SAMPLES: usize = 1024;
const INVERT_MAX_ITERS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensParams<T> {
    pub k1: T,
    pub k2: T,
    pub cx: T,
    pub cy: T,
    /// Pixel distance corresponding to a normalized radius of 1.
    pub r_norm: T,
}

impl<T: Scalar> LensParams<T> {
    pub fn new(k1: T, k2: T, center: (T, T), r_norm: T) -> Self {
        Self { k1, k2, cx: center.0, cy: center.1, r_norm }
    }

    /// Lens centered on the grid midpoint `((w-1)/2, (h-1)/2)` with `r_norm`
    /// equal to half the image diagonal.
    pub fn centered(k1: T, k2: T, width: usize, height: usize) -> Self {
        let (cx, cy) = grid_center::<T>(width, height);
        let w = T::from_usize_lossy(width);
        let h = T::from_usize_lossy(height);
        Self { k1, k2, cx, cy, r_norm: (w * w + h * h).sqrt() / T::lit(2.0) }
    }

    pub fn center(&self) -> (T, T) {
        (self.cx, self.cy)
    }

    /// Forward radial map `r_d -> r_u`.
    #[inline]
    pub fn map_radius(&self, r_d: T) -> T {
        barrel_map(r_d, self)
    }

    /// `d r_u / d r_d`.
    #[inline]
    pub fn map_derivative(&self, r_d: T) -> T {
        let r2 = r_d * r_d;
        T::one() - T::lit(3.0) * self.k1 * r2 - T::lit(5.0) * self.k2 * r2 * r2
    }

    /// Normalized distance from the center to the farthest corner pixel.
    pub fn max_radius(&self, width: usize, height: usize) -> T {
        let xs = [T::zero(), T::from_usize_lossy(width - 1)];
        let ys = [T::zero(), T::from_usize_lossy(height - 1)];
        let mut best = T::zero();
        for &x in &xs {
            for &y in &ys {
                best = best.max((x - self.cx).hypot(y - self.cy));
            }
        }
        best / self.r_norm
    }

    /// Smallest positive radius where the map stops increasing, if any.
    pub fn monotone_limit(&self) -> Option<T> {
        // 1 - 3 k1 s - 5 k2 s^2 = 0 with s = r^2.
        let (k1, k2) = (self.k1, self.k2);
        let three = T::lit(3.0);
        let s = if k2 == T::zero() {
            if k1 > T::zero() {
                Some(T::one() / (three * k1))
            } else {
                None
            }
        } else {
            let disc = T::lit(9.0) * k1 * k1 + T::lit(20.0) * k2;
            if disc < T::zero() {
                None
            } else {
                let sq = disc.sqrt();
                let two_a = T::lit(10.0) * k2;
                [(-three * k1 + sq) / two_a, (-three * k1 - sq) / two_a]
                    .into_iter()
                    .filter(|&s| s > T::zero())
                    .fold(None, |acc: Option<T>, s| Some(acc.map_or(s, |a| a.min(s))))
            }
        };
        s.map(|s| s.sqrt())
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let finite = [self.k1, self.k2, self.cx, self.cy, self.r_norm].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidLens("non-finite parameter".into()));
        }
        if self.r_norm <= T::zero() {
            return Err(Error::InvalidLens(format!("r_norm must be positive, got {}", self.r_norm)));
        }
        let r_max = self.max_radius(width, height);
        let n = MONOTONICITY_SAMPLES;
        for i in 0..=n {
            let r = r_max * T::from_usize_lossy(i) / T::from_usize_lossy(n);
            if self.map_derivative(r) <= T::zero() {
                return Err(Error::NonMonotonicLens(format!(
                    "derivative non-positive at r = {r} (r_max = {r_max}, k1 = {}, k2 = {})",
                    self.k1, self.k2
                )));
            }
        }
        Ok(())
    }
}

/// Geometric midpoint of a pixel grid, `((w-1)/2, (h-1)/2)`.
pub fn grid_center<T: Scalar>(width: usize, height: usize) -> (T, T) {
    let half = T::lit(0.5);
    (T::from_usize_lossy(width - 1) * half, T::from_usize_lossy(height - 1) * half)
}

/// Undistorted normalized radius for a distorted one.
#[inline]
pub fn barrel_map<T: Scalar>(r_d: T, lens: &LensParams<T>) -> T {
    let r2 = r_d * r_d;
    r_d * (T::one() - lens.k1 * r2 - lens.k2 * r2 * r2)
}

/// Distorted radius `r_d >= 0` with `barrel_map(r_d) = r_u`.
///
/// Newton's method safeguarded by a bisection bracket on the monotone part of
/// the lens curve.
pub fn barrel_invert<T: Scalar>(r_u: T, lens: &LensParams<T>) -> Result<T> {
    if !r_u.is_finite() || r_u < T::zero() {
        return Err(Error::InvalidLens(format!("radius {r_u} is outside the lens domain")));
    }
    if r_u == T::zero() {
        return Ok(T::zero());
    }
    let mut hi = match lens.monotone_limit() {
        Some(limit) => {
            let top = barrel_map(limit, lens);
            if r_u > top {
                return Err(Error::NonMonotonicLens(format!(
                    "radius {r_u} exceeds the largest attainable value {top} (fold at r_d = {limit})"
                )));
            }
            limit
        }
        None => {
            let mut hi = r_u.max(T::one());
            let mut doublings = 0;
            while barrel_map(hi, lens) < r_u {
                hi = hi + hi;
                doublings += 1;
                if doublings > INVERT_MAX_ITERS {
                    return Err(Error::NoConvergence(format!("could not bracket radius {r_u}")));
                }
            }
            hi
        }
    };
    let mut lo = T::zero();
    let tol = T::epsilon() * T::lit(16.0) * r_u.max(T::one());
    let mut x = r_u.max(lo).min(hi);
    for _ in 0..INVERT_MAX_ITERS {
        let f = barrel_map(x, lens) - r_u;
        if f.abs() <= tol {
            return Ok(x);
        }
        if f < T::zero() {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= T::epsilon() * hi {
            return Ok(x);
        }
        let d = lens.map_derivative(x);
        let newton = x - f / d;
        x = if d > T::zero() && newton > lo && newton < hi { newton } else { (lo + hi) * T::lit(0.5) };
    }
    Err(Error::NoConvergence(format!("radius {r_u} after {INVERT_MAX_ITERS} iterations")))
}

/// Builds a radially symmetric flow: a pixel at pixel-distance `rho` from
/// `center` gets displacement `(profile(rho) / rho - 1) * (p - center)`.
pub fn radial_flow<T: Scalar>(
    width: usize,
    height: usize,
    center: (T, T),
    mut profile: impl FnMut(T) -> Result<T>,
) -> Result<FlowField<T>> {
    let mut flow = FlowField::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let ox = T::from_usize_lossy(x) - center.0;
            let oy = T::from_usize_lossy(y) - center.1;
            let rho = ox.hypot(oy);
            if rho == T::zero() {
                continue;
            }
            let factor = profile(rho)? / rho - T::one();
            flow.set(x, y, (factor * ox, factor * oy));
        }
    }
    Ok(flow)
}

/// Backward flow that undistorts an image captured through `lens`.
///
/// An output pixel at undistorted radius `r_u` samples the distorted image at
/// `barrel_invert(r_u)`. Output radii beyond the largest value the lens can
/// produce have no preimage; they sample at the fold radius, which lies
/// outside the image for any lens that passes validation.
pub fn barrel_flow<T: Scalar>(lens: &LensParams<T>, width: usize, height: usize) -> Result<FlowField<T>> {
    lens.validate(width, height)?;
    let fold = lens.monotone_limit();
    let fold_top = fold.map(|f| barrel_map(f, lens));
    radial_flow(width, height, lens.center(), |rho| {
        let r_u = rho / lens.r_norm;
        let r_d = match (fold, fold_top) {
            (Some(f), Some(top)) if r_u > top => f,
            _ => barrel_invert(r_u, lens)?,
        };
        Ok(r_d * lens.r_norm)
    })
}

/// Backward flow that applies the lens distortion to a clean image: the
/// distorted pixel at radius `r_d` samples the clean image at `barrel_map(r_d)`.
pub fn barrel_forward_flow<T: Scalar>(lens: &LensParams<T>, width: usize, height: usize) -> Result<FlowField<T>> {
    lens.validate(width, height)?;
    radial_flow(width, height, lens.center(), |rho| {
        Ok(barrel_map(rho / lens.r_norm, lens) * lens.r_norm)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    /// Mirror columns, negate `dx`.
    Horizontal,
    /// Mirror rows, negate `dy`.
    Vertical,
    /// Mirror both, negate both.
    Central,
}

impl FlipAxis {
    pub const ALL: [FlipAxis; 3] = [FlipAxis::Vertical, FlipAxis::Horizontal, FlipAxis::Central];

    /// Source pixel of the mirror and the signs applied to `(dx, dy)`.
    #[inline]
    pub(crate) fn mirror(self, x: usize, y: usize, width: usize, height: usize) -> (usize, usize, bool, bool) {
        match self {
            FlipAxis::Horizontal => (width - 1 - x, y, true, false),
            FlipAxis::Vertical => (x, height - 1 - y, false, true),
            FlipAxis::Central => (width - 1 - x, height - 1 - y, true, true),
        }
    }
}

pub fn flip_flow<T: Scalar>(flow: &FlowField<T>, axis: FlipAxis) -> FlowField<T> {
    let (w, h) = flow.dims();
    FlowField::from_fn(w, h, |x, y| {
        let (mx, my, nx, ny) = axis.mirror(x, y, w, h);
        let (dx, dy) = flow.get(mx, my);
        (if nx { -dx } else { dx }, if ny { -dy } else { dy })
    })
}

/// Flow equivalent to warping with `inner` first and then with `outer`.
///
/// `result(p) = outer(p) + inner(p + outer(p))`, with `inner` sampled
/// bilinearly (edge replication outside the grid).
pub fn compose_flows<T: Scalar>(outer: &FlowField<T>, inner: &FlowField<T>) -> Result<FlowField<T>> {
    outer.ensure_same_dims(inner)?;
    let (w, h) = outer.dims();
    Ok(FlowField::from_fn(w, h, |x, y| {
        let (ox, oy) = outer.get(x, y);
        let (ix, iy) = inner.sample(T::from_usize_lossy(x) + ox, T::from_usize_lossy(y) + oy);
        (ox + ix, oy + iy)
    }))
}
