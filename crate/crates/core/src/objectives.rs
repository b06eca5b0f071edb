//! Loss functionals over correction flows and their analytic gradients.
//!
//! Every squared norm is a mean (over pixels, channels and flow components)
//! so that weights carry over between pyramid levels. Reductions run in a
//! fixed row-major order, which makes results bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::flow::{bilinear_taps, FlowField};
use crate::geometry::FlipAxis;
use crate::metrics::Polyline;
use crate::raster::Image;
use crate::scalar::Scalar;
use crate::warp::{warp_image_with, Boundary};

/// Smoothing constant inside the TV square root.
pub const TV_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    /// Pixel loss weight of the face objective.
    pub lambda1: f64,
    /// TV weight of the face objective.
    pub lambda2: f64,
    /// Pixel loss weight of the line objective.
    pub lambda3: f64,
    /// Symmetry weight of the line objective.
    pub lambda4: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { lambda1: 2.0, lambda2: 0.5, lambda3: 1.0, lambda4: 2.0 }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Which combination of terms is being minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// flow + lambda1 * pixel + lambda2 * tv
    Face,
    /// flow + lambda3 * pixel + lambda4 * sym
    Line,
    /// lambda3 * pixel + lambda4 * sym (no ground-truth flow)
    SelfSupervised,
}

/// Images and optional ground truth an objective is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a, T> {
    /// Image the flow samples from.
    pub source: &'a Image<T>,
    /// Image the warped source should match.
    pub target: &'a Image<T>,
    pub gt_flow: Option<&'a FlowField<T>>,
    pub boundary: Boundary,
}

impl<'a, T: Scalar> ObjectiveInputs<'a, T> {
    pub fn new(source: &'a Image<T>, target: &'a Image<T>, gt_flow: Option<&'a FlowField<T>>) -> Self {
        Self { source, target, gt_flow, boundary: Boundary::Zero }
    }

    fn gt(&self, kind: ObjectiveKind) -> Result<Option<&'a FlowField<T>>> {
        match kind {
            ObjectiveKind::SelfSupervised => Ok(None),
            _ => self
                .gt_flow
                .map(Some)
                .ok_or_else(|| Error::MissingTarget(format!("{kind:?} objective needs a ground-truth flow"))),
        }
    }
}

/// Per-term weights of a linear combination of losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights<T> {
    pub flow: T,
    pub pixel: T,
    pub tv: T,
    pub sym: T,
}

impl<T: Scalar> TermWeights<T> {
    pub fn for_kind(kind: ObjectiveKind, w: &ObjectiveWeights) -> Self {
        let z = T::zero();
        match kind {
            ObjectiveKind::Face => Self { flow: T::one(), pixel: T::lit(w.lambda1), tv: T::lit(w.lambda2), sym: z },
            ObjectiveKind::Line => Self { flow: T::one(), pixel: T::lit(w.lambda3), tv: z, sym: T::lit(w.lambda4) },
            ObjectiveKind::SelfSupervised => Self { flow: z, pixel: T::lit(w.lambda3), tv: z, sym: T::lit(w.lambda4) },
        }
    }
}

fn n_of<T: Scalar>(n: usize) -> T {
    T::from_usize_lossy(n)
}

/// Mean over pixels and both components of `(flow - gt)^2`.
pub fn flow_loss<T: Scalar>(flow: &FlowField<T>, gt: &FlowField<T>) -> Result<T> {
    flow.ensure_same_dims(gt)?;
    let mut acc = T::zero();
    for (&a, &b) in flow.data().iter().zip(gt.data()) {
        let d = a - b;
        acc = acc + d * d;
    }
    Ok(acc / n_of(flow.data().len()))
}

pub fn flow_loss_gradient<T: Scalar>(flow: &FlowField<T>, gt: &FlowField<T>) -> Result<FlowField<T>> {
    flow.ensure_same_dims(gt)?;
    let scale = T::lit(2.0) / n_of(flow.data().len());
    let mut g = FlowField::zeros(flow.width(), flow.height());
    for ((o, &a), &b) in g.data_mut().iter_mut().zip(flow.data()).zip(gt.data()) {
        *o = scale * (a - b);
    }
    Ok(g)
}

/// Mean over pixels and channels of the squared intensity difference.
pub fn pixel_loss<T: Scalar>(warped: &Image<T>, gt: &Image<T>) -> Result<T> {
    if !warped.same_shape(gt) {
        return Err(dims_mismatch("pixel loss images", warped.dims(), gt.dims()));
    }
    let mut acc = T::zero();
    for (&a, &b) in warped.data().iter().zip(gt.data()) {
        let d = a - b;
        acc = acc + d * d;
    }
    Ok(acc / n_of(warped.data().len()))
}

fn check_pixel_inputs<T: Scalar>(source: &Image<T>, target: &Image<T>, flow: &FlowField<T>) -> Result<()> {
    if !source.same_shape(target) {
        return Err(dims_mismatch("source vs target", source.dims(), target.dims()));
    }
    if source.dims() != flow.dims() {
        return Err(dims_mismatch("image vs flow", source.dims(), flow.dims()));
    }
    Ok(())
}

/// Gradient of `pixel_loss(warp(source, flow), target)` with respect to the flow.
///
/// Uses the exact derivative of the bilinear kernel; on integer sample
/// coordinates this is the one-sided derivative towards increasing coordinates.
pub fn pixel_loss_gradient<T: Scalar>(
    source: &Image<T>,
    target: &Image<T>,
    flow: &FlowField<T>,
    boundary: Boundary,
) -> Result<FlowField<T>> {
    check_pixel_inputs(source, target, flow)?;
    let (w, h) = flow.dims();
    let ch = source.channels();
    let scale = T::lit(2.0) / n_of(w * h * ch);
    let one = T::one();
    let fetch = |px: isize, py: isize, c: usize| match boundary {
        Boundary::Zero => source.get_or_zero(px, py, c),
        Boundary::Clamp => source.get_clamped(px, py, c),
    };
    let mut g = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.get(x, y);
            let sx = T::from_usize_lossy(x) + dx;
            let sy = T::from_usize_lossy(y) + dy;
            let taps = bilinear_taps(sx, sy);
            let (x0, y0) = (taps[0].0, taps[0].1);
            let fx = sx - sx.floor();
            let fy = sy - sy.floor();
            let mut gx = T::zero();
            let mut gy = T::zero();
            for c in 0..ch {
                let i00 = fetch(x0, y0, c);
                let i01 = fetch(x0 + 1, y0, c);
                let i10 = fetch(x0, y0 + 1, c);
                let i11 = fetch(x0 + 1, y0 + 1, c);
                let mut warped = T::zero();
                for (&(_, _, wt), v) in taps.iter().zip([i00, i01, i10, i11]) {
                    warped = warped + wt * v;
                }
                let r = scale * (warped - target.get(x, y, c));
                gx = gx + r * ((one - fy) * (i01 - i00) + fy * (i11 - i10));
                gy = gy + r * ((one - fx) * (i10 - i00) + fx * (i11 - i01));
            }
            g.set(x, y, (gx, gy));
        }
    }
    Ok(g)
}

/// Backward differences along rows and forward differences along columns,
/// dropping neighbours outside the grid.
#[inline]
fn tv_diffs<T: Scalar>(flow: &FlowField<T>, x: usize, y: usize, k: usize) -> (T, T) {
    let v = component(flow, x, y, k);
    let a = if x > 0 { component(flow, x - 1, y, k) - v } else { T::zero() };
    let b = if y + 1 < flow.height() { component(flow, x, y + 1, k) - v } else { T::zero() };
    (a, b)
}

#[inline]
fn component<T: Scalar>(flow: &FlowField<T>, x: usize, y: usize, k: usize) -> T {
    flow.data()[2 * (y * flow.width() + x) + k]
}

/// `sum sqrt((f[i,j-1] - f[i,j])^2 + (f[i+1,j] - f[i,j])^2 + eps)` over
/// pixels and both components, divided by the pixel count.
pub fn tv_loss<T: Scalar>(flow: &FlowField<T>) -> T {
    let eps = T::lit(TV_EPSILON);
    let mut acc = T::zero();
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            for k in 0..2 {
                let (a, b) = tv_diffs(flow, x, y, k);
                acc = acc + (a * a + b * b + eps).sqrt();
            }
        }
    }
    acc / n_of(flow.pixel_count())
}

pub fn tv_loss_gradient<T: Scalar>(flow: &FlowField<T>) -> FlowField<T> {
    let eps = T::lit(TV_EPSILON);
    let (w, h) = flow.dims();
    let inv_n = T::one() / n_of(flow.pixel_count());
    let mut g = FlowField::zeros(w, h);
    let data = g.data_mut();
    for y in 0..h {
        for x in 0..w {
            for k in 0..2 {
                let (a, b) = tv_diffs(flow, x, y, k);
                let s = (a * a + b * b + eps).sqrt();
                let here = 2 * (y * w + x) + k;
                data[here] = data[here] - (a + b) / s * inv_n;
                if x > 0 {
                    let left = 2 * (y * w + x - 1) + k;
                    data[left] = data[left] + a / s * inv_n;
                }
                if y + 1 < h {
                    let below = 2 * ((y + 1) * w + x) + k;
                    data[below] = data[below] + b / s * inv_n;
                }
            }
        }
    }
    g
}

/// Sum over the vertical, horizontal and central flips of the mean squared
/// difference between the flipped flow and the flow itself.
pub fn sym_loss<T: Scalar>(flow: &FlowField<T>) -> T {
    let (w, h) = flow.dims();
    let denom = n_of::<T>(flow.data().len());
    let mut total = T::zero();
    for axis in FlipAxis::ALL {
        let mut acc = T::zero();
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = flipped(flow, axis, x, y);
                let (dx, dy) = flow.get(x, y);
                acc = acc + (fx - dx) * (fx - dx) + (fy - dy) * (fy - dy);
            }
        }
        total = total + acc / denom;
    }
    total
}

#[inline]
fn flipped<T: Scalar>(flow: &FlowField<T>, axis: FlipAxis, x: usize, y: usize) -> (T, T) {
    let (mx, my, nx, ny) = axis.mirror(x, y, flow.width(), flow.height());
    let (dx, dy) = flow.get(mx, my);
    (if nx { -dx } else { dx }, if ny { -dy } else { dy })
}

pub fn sym_loss_gradient<T: Scalar>(flow: &FlowField<T>) -> FlowField<T> {
    let (w, h) = flow.dims();
    let scale = T::lit(2.0) / n_of(flow.data().len());
    let mut g = FlowField::zeros(w, h);
    for axis in FlipAxis::ALL {
        for y in 0..h {
            for x in 0..w {
                let (mx, my, nx, ny) = axis.mirror(x, y, w, h);
                // Direct term at this pixel.
                let (fx, fy) = flipped(flow, axis, x, y);
                let (dx, dy) = flow.get(x, y);
                let direct = (-(fx - dx), -(fy - dy));
                // This pixel also appears, sign-flipped, in the term of its mirror.
                let (mfx, mfy) = flipped(flow, axis, mx, my);
                let (mdx, mdy) = flow.get(mx, my);
                let rx = mfx - mdx;
                let ry = mfy - mdy;
                let mirrored = (if nx { -rx } else { rx }, if ny { -ry } else { ry });
                let (gx, gy) = g.get(x, y);
                g.set(x, y, (gx + scale * (direct.0 + mirrored.0), gy + scale * (direct.1 + mirrored.1)));
            }
        }
    }
    g
}

/// `flow_loss + lambda1 * pixel_loss(warp(img, flow), gt_img) + lambda2 * tv_loss(flow)`.
pub fn face_objective<T: Scalar>(
    flow: &FlowField<T>,
    gt_flow: &FlowField<T>,
    img: &Image<T>,
    gt_img: &Image<T>,
    w: &ObjectiveWeights,
) -> Result<T> {
    check_pixel_inputs(img, gt_img, flow)?;
    let warped = warp_image_with(img, flow, Boundary::Zero)?;
    Ok(flow_loss(flow, gt_flow)?
        + T::lit(w.lambda1) * pixel_loss(&warped, gt_img)?
        + T::lit(w.lambda2) * tv_loss(flow))
}

/// `flow_loss + lambda3 * pixel_loss(warp(img, flow), gt_img) + lambda4 * sym_loss(flow)`;
/// the flow term is omitted when no ground-truth flow is given.
pub fn line_objective<T: Scalar>(
    flow: &FlowField<T>,
    gt_flow: Option<&FlowField<T>>,
    img: &Image<T>,
    gt_img: &Image<T>,
    w: &ObjectiveWeights,
) -> Result<T> {
    check_pixel_inputs(img, gt_img, flow)?;
    let warped = warp_image_with(img, flow, Boundary::Zero)?;
    let data = T::lit(w.lambda3) * pixel_loss(&warped, gt_img)? + T::lit(w.lambda4) * sym_loss(flow);
    match gt_flow {
        Some(gt) => Ok(flow_loss(flow, gt)? + data),
        None => Ok(data),
    }
}

/// Value of a weighted term combination. Zero-weight terms are skipped.
pub fn weighted_value<T: Scalar>(
    terms: &TermWeights<T>,
    inputs: &ObjectiveInputs<'_, T>,
    gt: Option<&FlowField<T>>,
    flow: &FlowField<T>,
) -> Result<T> {
    check_pixel_inputs(inputs.source, inputs.target, flow)?;
    let mut total = T::zero();
    if terms.flow != T::zero() {
        let gt = gt.ok_or_else(|| Error::MissingTarget("flow term needs a ground-truth flow".into()))?;
        total = total + terms.flow * flow_loss(flow, gt)?;
    }
    if terms.pixel != T::zero() {
        let warped = warp_image_with(inputs.source, flow, inputs.boundary)?;
        total = total + terms.pixel * pixel_loss(&warped, inputs.target)?;
    }
    if terms.tv != T::zero() {
        total = total + terms.tv * tv_loss(flow);
    }
    if terms.sym != T::zero() {
        total = total + terms.sym * sym_loss(flow);
    }
    Ok(total)
}

pub fn weighted_gradient<T: Scalar>(
    terms: &TermWeights<T>,
    inputs: &ObjectiveInputs<'_, T>,
    gt: Option<&FlowField<T>>,
    flow: &FlowField<T>,
) -> Result<FlowField<T>> {
    check_pixel_inputs(inputs.source, inputs.target, flow)?;
    let mut g = FlowField::zeros(flow.width(), flow.height());
    if terms.flow != T::zero() {
        let gt = gt.ok_or_else(|| Error::MissingTarget("flow term needs a ground-truth flow".into()))?;
        g = g.axpy(terms.flow, &flow_loss_gradient(flow, gt)?)?;
    }
    if terms.pixel != T::zero() {
        let pg = pixel_loss_gradient(inputs.source, inputs.target, flow, inputs.boundary)?;
        g = g.axpy(terms.pixel, &pg)?;
    }
    if terms.tv != T::zero() {
        g = g.axpy(terms.tv, &tv_loss_gradient(flow))?;
    }
    if terms.sym != T::zero() {
        g = g.axpy(terms.sym, &sym_loss_gradient(flow))?;
    }
    Ok(g)
}

/// Value of the objective selected by `kind`.
pub fn objective<T: Scalar>(
    kind: ObjectiveKind,
    inputs: &ObjectiveInputs<'_, T>,
    flow: &FlowField<T>,
    w: &ObjectiveWeights,
) -> Result<T> {
    let gt = inputs.gt(kind)?;
    weighted_value(&TermWeights::for_kind(kind, w), inputs, gt, flow)
}

/// Gradient of [`objective`] with respect to every flow component.
pub fn objective_gradient<T: Scalar>(
    kind: ObjectiveKind,
    inputs: &ObjectiveInputs<'_, T>,
    flow: &FlowField<T>,
    w: &ObjectiveWeights,
) -> Result<FlowField<T>> {
    let gt = inputs.gt(kind)?;
    weighted_gradient(&TermWeights::for_kind(kind, w), inputs, gt, flow)
}

/// Straightness penalty for polylines annotated in the source image.
///
/// Each annotated point `d` is carried to the output frame to first order,
/// `q = d - flow(d)`, and the squared perpendicular distance of every interior
/// point to the endpoint chord is summed. Like the other terms the sum is
/// divided by the pixel count. Lines with fewer than 3 points or a collapsed
/// chord contribute nothing.
pub fn straightness_loss<T: Scalar>(flow: &FlowField<T>, lines: &[Polyline<T>]) -> T {
    let mut acc = T::zero();
    for line in lines {
        let q = carried_points(flow, line);
        if q.len() < 3 {
            continue;
        }
        let q0 = q[0];
        let a = (q[q.len() - 1].0 - q0.0, q[q.len() - 1].1 - q0.1);
        let a2 = a.0 * a.0 + a.1 * a.1;
        if a2 == T::zero() {
            continue;
        }
        for &qk in &q[1..q.len() - 1] {
            let c = (qk.0 - q0.0) * a.1 - (qk.1 - q0.1) * a.0;
            acc = acc + c * c / a2;
        }
    }
    acc / n_of(flow.pixel_count())
}

fn carried_points<T: Scalar>(flow: &FlowField<T>, line: &Polyline<T>) -> Vec<(T, T)> {
    line.points
        .iter()
        .map(|&(x, y)| {
            let (dx, dy) = flow.sample(x, y);
            (x - dx, y - dy)
        })
        .collect()
}

pub fn straightness_loss_gradient<T: Scalar>(flow: &FlowField<T>, lines: &[Polyline<T>]) -> FlowField<T> {
    let inv_n = T::one() / n_of(flow.pixel_count());
    let two = T::lit(2.0);
    let mut g = FlowField::zeros(flow.width(), flow.height());
    for line in lines {
        let q = carried_points(flow, line);
        let n = q.len();
        if n < 3 {
            continue;
        }
        let q0 = q[0];
        let a = (q[n - 1].0 - q0.0, q[n - 1].1 - q0.1);
        let a2 = a.0 * a.0 + a.1 * a.1;
        if a2 == T::zero() {
            continue;
        }
        // Derivatives with respect to the carried points.
        let mut dq = vec![(T::zero(), T::zero()); n];
        for k in 1..n - 1 {
            let b = (q[k].0 - q0.0, q[k].1 - q0.1);
            let c = b.0 * a.1 - b.1 * a.0;
            let s = two * c / a2;
            let db = (s * a.1, -s * a.0);
            let c2 = c * c / (a2 * a2);
            let da = (-s * b.1 - two * c2 * a.0, s * b.0 - two * c2 * a.1);
            dq[k].0 = dq[k].0 + db.0;
            dq[k].1 = dq[k].1 + db.1;
            dq[n - 1].0 = dq[n - 1].0 + da.0;
            dq[n - 1].1 = dq[n - 1].1 + da.1;
            dq[0].0 = dq[0].0 - db.0 - da.0;
            dq[0].1 = dq[0].1 - db.1 - da.1;
        }
        // q = d - flow(d), and flow(d) is a fixed bilinear blend of four pixels.
        let data = g.data_mut();
        for (&(x, y), &(gx, gy)) in line.points.iter().zip(&dq) {
            for (idx, wt) in flow.sample_taps(x, y) {
                data[2 * idx] = data[2 * idx] - wt * gx * inv_n;
                data[2 * idx + 1] = data[2 * idx + 1] - wt * gy * inv_n;
            }
        }
    }
    g
}
