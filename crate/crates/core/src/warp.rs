//! Backward bilinear warping of images and forward mapping of sparse points.

use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::flow::{bilinear_taps, FlowField};
use crate::raster::Image;
use crate::scalar::Scalar;

const POINT_MAX_ITERS: usize = 32;
const POINT_TOLERANCE: f64 = 1e-4;

/// How samples that land outside the source raster are treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Out-of-image neighbours contribute nothing.
    #[default]
    Zero,
    /// Out-of-image neighbours take the nearest edge value.
    Clamp,
}

/// `out(y, x) = sum over the 4 neighbours (h, w) of (y + dy, x + dx) of
/// img(h, w) * max(0, 1 - |y + dy - h|) * max(0, 1 - |x + dx - w|)`.
pub fn warp_image<T: Scalar>(img: &Image<T>, flow: &FlowField<T>) -> Result<Image<T>> {
    warp_image_with(img, flow, Boundary::Zero)
}

pub fn warp_image_with<T: Scalar>(img: &Image<T>, flow: &FlowField<T>, boundary: Boundary) -> Result<Image<T>> {
    if img.dims() != flow.dims() {
        return Err(dims_mismatch("image vs flow", img.dims(), flow.dims()));
    }
    let (w, h) = img.dims();
    let ch = img.channels();
    let mut out = Image::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.get(x, y);
            let sx = T::from_usize_lossy(x) + dx;
            let sy = T::from_usize_lossy(y) + dy;
            let taps = bilinear_taps(sx, sy);
            for c in 0..ch {
                let mut acc = T::zero();
                for &(px, py, wt) in &taps {
                    let v = match boundary {
                        Boundary::Zero => img.get_or_zero(px, py, c),
                        Boundary::Clamp => img.get_clamped(px, py, c),
                    };
                    acc = acc + wt * v;
                }
                out.set(x, y, c, acc);
            }
        }
    }
    Ok(out)
}

/// Maps points given in source coordinates to the output grid of `flow`:
/// each result `q` satisfies `q + flow(q) = p`.
///
/// Solved per point by the fixed-point iteration `q <- p - flow(q)` with the
/// flow sampled bilinearly. Points that do not settle within 32 iterations
/// report [`Error::NoConvergence`].
pub fn warp_points<T: Scalar>(points: &[(T, T)], flow: &FlowField<T>) -> Vec<Result<(T, T)>> {
    points.iter().map(|&p| warp_point(p, flow)).collect()
}

pub fn warp_point<T: Scalar>(p: (T, T), flow: &FlowField<T>) -> Result<(T, T)> {
    let tol = T::lit(POINT_TOLERANCE);
    let mut q = p;
    for _ in 0..POINT_MAX_ITERS {
        let (dx, dy) = flow.sample(q.0, q.1);
        let next = (p.0 - dx, p.1 - dy);
        let step = (next.0 - q.0).hypot(next.1 - q.1);
        q = next;
        if !step.is_finite() {
            break;
        }
        if step <= tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence(format!(
        "point ({}, {}) did not converge in {POINT_MAX_ITERS} iterations",
        p.0, p.1
    )))
}

/// Converged points only, in input order, with their input indices.
pub fn warp_points_lossy<T: Scalar>(points: &[(T, T)], flow: &FlowField<T>) -> Vec<(usize, (T, T))> {
    warp_points(points, flow)
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| r.ok().map(|q| (i, q)))
        .collect()
}
