//! Per-image coarse-to-fine minimization of the correction objectives.
//!
//! Each pyramid level runs gradient descent with backtracking: the step is
//! multiplied by `decay` until the objective strictly decreases (at most
//! `max_halvings` times), and grows by `growth` after every accepted step.
//! Gradients are multiplied by the level's pixel count before stepping, so
//! `step_size` is measured in pixels per unit of per-pixel gradient
//! regardless of resolution. The accepted objective values of a level form a
//! strictly decreasing sequence.

use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::flow::FlowField;
use crate::geometry::{flip_flow, FlipAxis};
use crate::metrics::Polyline;
use crate::objectives::{
    flow_loss, flow_loss_gradient, pixel_loss, pixel_loss_gradient, straightness_loss, straightness_loss_gradient,
    sym_loss, sym_loss_gradient, tv_loss, tv_loss_gradient, ObjectiveKind, ObjectiveWeights, TermWeights,
};
use crate::raster::Image;
use crate::scalar::Scalar;
use crate::warp::{warp_image_with, Boundary};

/// Smallest step before a solve that never improved is declared diverged.
pub const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    /// Ground-truth flow available; the flow term is included.
    Supervised,
    /// No ground-truth flow; image and regularization terms only.
    SelfSupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub pyramid_levels: usize,
    pub iterations_per_level: usize,
    pub step_size: f64,
    /// Step multiplier applied after a rejected trial step.
    pub decay: f64,
    /// Step multiplier applied after an accepted step.
    pub growth: f64,
    pub max_halvings: usize,
    /// Stop a level once the relative decrease of an accepted step drops below this.
    pub tolerance: f64,
    /// Recorded with every run; the descent itself draws no random numbers.
    pub seed: u64,
    pub mode: SolveMode,
    /// Gaussian pre-smoothing of the images entering the pixel term.
    pub presmooth: bool,
    pub presmooth_sigma: f64,
    pub boundary: Boundary,
    /// Coarsest level keeps at least this many pixels on its shorter side.
    pub min_level_size: usize,
    /// Weight of the line straightness term when annotations are given.
    pub line_weight: f64,
    /// Gaussian width, in pixels of the current level, applied to the gradient
    /// before stepping. Zero gives plain gradient descent.
    pub gradient_smoothing: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 4,
            iterations_per_level: 200,
            step_size: 1.0,
            decay: 0.5,
            growth: 1.5,
            max_halvings: 30,
            tolerance: 1e-6,
            seed: 0,
            mode: SolveMode::SelfSupervised,
            presmooth: true,
            presmooth_sigma: 1.0,
            boundary: Boundary::Zero,
            min_level_size: 8,
            line_weight: 1.0,
            gradient_smoothing: 2.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.pyramid_levels < 1 {
            return bad("pyramid_levels must be at least 1");
        }
        if self.iterations_per_level < 1 {
            return bad("iterations_per_level must be at least 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0, 1)");
        }
        if !(self.growth >= 1.0 && self.growth.is_finite()) {
            return bad("growth must be at least 1");
        }
        if !(self.tolerance >= 0.0) || !(self.presmooth_sigma >= 0.0) || !(self.line_weight >= 0.0) || !(self.gradient_smoothing >= 0.0) {
            return bad("tolerance, presmooth_sigma, line_weight and gradient_smoothing must be non-negative");
        }
        if self.min_level_size < 2 {
            return bad("min_level_size must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Pyramid level, 0 = full resolution.
    pub level: usize,
    /// 0 is the starting point of the level; later entries are accepted steps.
    pub iteration: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct Solution<T> {
    pub flow: FlowField<T>,
    pub trace: Vec<TraceEntry>,
    /// Full-resolution objective of the returned flow.
    pub objective: T,
    /// Full-resolution objective of the zero flow.
    pub zero_flow_objective: T,
}

impl<T> Solution<T> {
    /// Objective trace as CSV rows `iteration,level,objective`.
    pub fn trace_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "level", "objective"])?;
        for e in &self.trace {
            w.write_record([e.iteration.to_string(), e.level.to_string(), format!("{:e}", e.objective)])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// True when each level's accepted objectives never increase.
    pub fn trace_is_monotone(&self) -> bool {
        self.trace
            .windows(2)
            .all(|w| w[0].level != w[1].level || w[1].objective <= w[0].objective)
    }
}

/// Everything a solve minimizes against.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a, T> {
    pub source: &'a Image<T>,
    pub target: Option<&'a Image<T>>,
    pub gt_flow: Option<&'a FlowField<T>>,
    /// Straight-line annotations in source coordinates.
    pub lines: &'a [Polyline<T>],
}

/// Term weights plus the straightness weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy<T> {
    pub terms: TermWeights<T>,
    pub line: T,
}

struct Level<T> {
    source: Image<T>,
    target: Option<Image<T>>,
    gt: Option<FlowField<T>>,
    lines: Vec<Polyline<T>>,
}

impl<T: Scalar> Level<T> {
    fn dims(&self) -> (usize, usize) {
        self.source.dims()
    }

    fn value(&self, e: &Energy<T>, boundary: Boundary, flow: &FlowField<T>) -> Result<T> {
        let mut total = T::zero();
        if e.terms.flow != T::zero() {
            let gt = self.gt.as_ref().ok_or_else(|| Error::MissingTarget("flow term without ground truth".into()))?;
            total = total + e.terms.flow * flow_loss(flow, gt)?;
        }
        if e.terms.pixel != T::zero() {
            let target = self.target.as_ref().ok_or_else(|| Error::MissingTarget("pixel term without target".into()))?;
            let warped = warp_image_with(&self.source, flow, boundary)?;
            total = total + e.terms.pixel * pixel_loss(&warped, target)?;
        }
        if e.terms.tv != T::zero() {
            total = total + e.terms.tv * tv_loss(flow);
        }
        if e.terms.sym != T::zero() {
            total = total + e.terms.sym * sym_loss(flow);
        }
        if e.line != T::zero() && !self.lines.is_empty() {
            total = total + e.line * straightness_loss(flow, &self.lines);
        }
        Ok(total)
    }

    fn gradient(&self, e: &Energy<T>, boundary: Boundary, flow: &FlowField<T>) -> Result<FlowField<T>> {
        let mut g = FlowField::zeros(flow.width(), flow.height());
        if e.terms.flow != T::zero() {
            let gt = self.gt.as_ref().ok_or_else(|| Error::MissingTarget("flow term without ground truth".into()))?;
            g = g.axpy(e.terms.flow, &flow_loss_gradient(flow, gt)?)?;
        }
        if e.terms.pixel != T::zero() {
            let target = self.target.as_ref().ok_or_else(|| Error::MissingTarget("pixel term without target".into()))?;
            g = g.axpy(e.terms.pixel, &pixel_loss_gradient(&self.source, target, flow, boundary)?)?;
        }
        if e.terms.tv != T::zero() {
            g = g.axpy(e.terms.tv, &tv_loss_gradient(flow))?;
        }
        if e.terms.sym != T::zero() {
            g = g.axpy(e.terms.sym, &sym_loss_gradient(flow))?;
        }
        if e.line != T::zero() && !self.lines.is_empty() {
            g = g.axpy(e.line, &straightness_loss_gradient(flow, &self.lines))?;
        }
        Ok(g)
    }
}

fn level_dims(w: usize, h: usize, levels: usize, min_side: usize) -> Vec<(usize, usize)> {
    let mut dims = vec![(w, h)];
    while dims.len() < levels {
        let (pw, ph) = *dims.last().expect("non-empty");
        let (nw, nh) = (pw.div_ceil(2), ph.div_ceil(2));
        if nw.min(nh) < min_side.max(2) {
            break;
        }
        dims.push((nw, nh));
    }
    dims
}

fn rescale_point<T: Scalar>(p: (T, T), from: (usize, usize), to: (usize, usize)) -> (T, T) {
    let half = T::lit(0.5);
    let sx = T::from_usize_lossy(to.0) / T::from_usize_lossy(from.0);
    let sy = T::from_usize_lossy(to.1) / T::from_usize_lossy(from.1);
    ((p.0 + half) * sx - half, (p.1 + half) * sy - half)
}

fn build_levels<T: Scalar>(problem: &Problem<'_, T>, cfg: &SolverConfig) -> Vec<Level<T>> {
    let (w, h) = problem.source.dims();
    let dims = level_dims(w, h, cfg.pyramid_levels, cfg.min_level_size);
    let sigma = T::lit(cfg.presmooth_sigma);
    let antialias = T::one();
    let mut raw_src = vec![problem.source.clone()];
    let mut raw_tgt = vec![problem.target.cloned()];
    for &(lw, lh) in &dims[1..] {
        let s = raw_src.last().expect("non-empty").gaussian_blur(antialias).resize_bilinear(lw, lh);
        let t = raw_tgt
            .last()
            .expect("non-empty")
            .as_ref()
            .map(|t| t.gaussian_blur(antialias).resize_bilinear(lw, lh));
        raw_src.push(s);
        raw_tgt.push(t);
    }
    let smooth = |img: Image<T>| if cfg.presmooth { img.gaussian_blur(sigma) } else { img };
    dims.iter()
        .zip(raw_src.into_iter().zip(raw_tgt))
        .map(|(&d, (s, t))| Level {
            source: smooth(s),
            target: t.map(smooth),
            gt: problem.gt_flow.map(|g| if g.dims() == d { g.clone() } else { g.resize(d.0, d.1) }),
            lines: problem
                .lines
                .iter()
                .map(|l| Polyline { points: l.points.iter().map(|&p| rescale_point(p, (w, h), d)).collect() })
                .collect(),
        })
        .collect()
}

/// Projection of `flow` onto flip-symmetric fields.
pub fn symmetric_part<T: Scalar>(flow: &FlowField<T>) -> FlowField<T> {
    let quarter = T::lit(0.25);
    let mut acc = flow.clone();
    for axis in FlipAxis::ALL {
        acc = acc.axpy(T::one(), &flip_flow(flow, axis)).expect("flip keeps dims");
    }
    acc.scaled(quarter)
}

/// Damps the antisymmetric part of `grad` by the pixel-count-scaled curvature
/// of the symmetry term, which is `8 * weight` on that subspace and zero on
/// its complement.
fn precondition_symmetry<T: Scalar>(grad: FlowField<T>, weight: T) -> FlowField<T> {
    if weight <= T::zero() {
        return grad;
    }
    let sym = symmetric_part(&grad);
    let anti = grad.axpy(-T::one(), &sym).expect("same dims");
    sym.axpy(T::one() / (T::one() + T::lit(8.0) * weight), &anti).expect("same dims")
}

/// Minimizes `energy` over the flow, coarse to fine.
pub fn solve<T: Scalar>(problem: &Problem<'_, T>, energy: &Energy<T>, cfg: &SolverConfig) -> Result<Solution<T>> {
    cfg.validate()?;
    let (w, h) = problem.source.dims();
    if let Some(t) = problem.target {
        if !t.same_shape(problem.source) {
            return Err(dims_mismatch("source vs target", problem.source.dims(), t.dims()));
        }
    }
    if let Some(g) = problem.gt_flow {
        if g.dims() != (w, h) {
            return Err(dims_mismatch("source vs ground-truth flow", (w, h), g.dims()));
        }
    }
    if w < 2 || h < 2 {
        return Err(Error::InvalidImage(format!("image too small to solve: {w}x{h}")));
    }

    let levels = build_levels(problem, cfg);
    let mut trace = Vec::new();
    let mut flow: Option<FlowField<T>> = None;
    let mut accepted_any = false;
    let mut underflowed = false;
    let decay = T::lit(cfg.decay);
    let growth = T::lit(cfg.growth);
    let tol = T::lit(cfg.tolerance);
    let min_step = T::lit(MIN_STEP);

    for (li, level) in levels.iter().enumerate().rev() {
        let (lw, lh) = level.dims();
        let zero = FlowField::zeros(lw, lh);
        let mut current = match flow.take() {
            Some(prev) => prev.resize(lw, lh),
            None => zero.clone(),
        };
        let mut value = level.value(energy, cfg.boundary, &current)?;
        if li == 0 {
            let zero_value = level.value(energy, cfg.boundary, &zero)?;
            if !(value <= zero_value) {
                current = zero;
                value = zero_value;
            }
        }
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite objective at level {li}")));
        }
        trace.push(TraceEntry { level: li, iteration: 0, objective: value.as_f64() });

        let scale = T::from_usize_lossy(lw * lh);
        let smoothing = T::lit(cfg.gradient_smoothing);
        let mut step = T::lit(cfg.step_size);
        for it in 1..=cfg.iterations_per_level {
            let grad = level.gradient(energy, cfg.boundary, &current)?;
            if grad.data().iter().all(|&g| g == T::zero()) {
                break;
            }
            let grad = precondition_symmetry(grad, energy.terms.sym);
            let dir = if smoothing > T::zero() { grad.gaussian_blur(smoothing) } else { grad }.scaled(scale);
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let candidate = current.axpy(-step, &dir)?;
                let v = level.value(energy, cfg.boundary, &candidate)?;
                if v.is_finite() && v < value {
                    accepted = Some((candidate, v));
                    break;
                }
                step = step * decay;
                if step < min_step {
                    break;
                }
            }
            let Some((candidate, v)) = accepted else {
                if step >= min_step {
                    continue;
                }
                underflowed = true;
                break;
            };
            accepted_any = true;
            let rel = (value - v) / value.abs().max(T::min_positive_value());
            current = candidate;
            value = v;
            trace.push(TraceEntry { level: li, iteration: it, objective: value.as_f64() });
            step = step * growth;
            if rel < tol {
                break;
            }
        }
        flow = Some(current);
    }

    if underflowed && !accepted_any {
        return Err(Error::Diverged(format!("step fell below {MIN_STEP:e} before any accepted step")));
    }
    let flow = flow.expect("at least one level");
    let finest = &levels[0];
    let objective = finest.value(energy, cfg.boundary, &flow)?;
    let zero_flow_objective = finest.value(energy, cfg.boundary, &FlowField::zeros(w, h))?;
    Ok(Solution { flow, trace, objective, zero_flow_objective })
}

/// Minimizes the line objective (supervised) or its self-supervised variant,
/// according to `cfg.mode`.
pub fn optimize_flow<T: Scalar>(
    distorted: &Image<T>,
    target: &Image<T>,
    gt_flow: Option<&FlowField<T>>,
    weights: &ObjectiveWeights,
    cfg: &SolverConfig,
) -> Result<Solution<T>> {
    weights.validate()?;
    let kind = match cfg.mode {
        SolveMode::Supervised => {
            if gt_flow.is_none() {
                return Err(Error::MissingTarget("supervised mode needs a ground-truth flow".into()));
            }
            ObjectiveKind::Line
        }
        SolveMode::SelfSupervised => ObjectiveKind::SelfSupervised,
    };
    let problem = Problem { source: distorted, target: Some(target), gt_flow, lines: &[] };
    let energy = Energy { terms: TermWeights::for_kind(kind, weights), line: T::zero() };
    solve(&problem, &energy, cfg)
}

/// Face-family counterpart of [`optimize_flow`]: flow + lambda1 pixel +
/// lambda2 TV, dropping the flow term in self-supervised mode.
pub fn optimize_face_flow<T: Scalar>(
    face: &Image<T>,
    target: &Image<T>,
    gt_flow: Option<&FlowField<T>>,
    weights: &ObjectiveWeights,
    cfg: &SolverConfig,
) -> Result<Solution<T>> {
    weights.validate()?;
    let mut terms = TermWeights::for_kind(ObjectiveKind::Face, weights);
    match cfg.mode {
        SolveMode::Supervised if gt_flow.is_none() => {
            return Err(Error::MissingTarget("supervised mode needs a ground-truth flow".into()))
        }
        SolveMode::Supervised => {}
        SolveMode::SelfSupervised => terms.flow = T::zero(),
    }
    let problem = Problem { source: face, target: Some(target), gt_flow, lines: &[] };
    solve(&problem, &Energy { terms, line: T::zero() }, cfg)
}

/// Background correction with the symmetry and TV regularizers.
///
/// The data term is the pixel loss against `reference` when given, and the
/// straightness of `lines` (annotated in `img`) when non-empty; at least one
/// is required.
pub fn correct_background<T: Scalar>(
    img: &Image<T>,
    weights: &ObjectiveWeights,
    cfg: &SolverConfig,
    reference: Option<&Image<T>>,
    lines: &[Polyline<T>],
) -> Result<(Image<T>, FlowField<T>, Solution<T>)> {
    weights.validate()?;
    if reference.is_none() && lines.is_empty() {
        return Err(Error::MissingTarget("background correction needs a reference image or line annotations".into()));
    }
    let terms = TermWeights {
        flow: T::zero(),
        pixel: if reference.is_some() { T::lit(weights.lambda3) } else { T::zero() },
        tv: T::lit(weights.lambda2),
        sym: T::lit(weights.lambda4),
    };
    let energy = Energy { terms, line: if lines.is_empty() { T::zero() } else { T::lit(cfg.line_weight) } };
    let problem = Problem { source: img, target: reference, gt_flow: None, lines };
    let solution = solve(&problem, &energy, cfg)?;
    let corrected = warp_image_with(img, &solution.flow, cfg.boundary)?;
    Ok((corrected, solution.flow.clone(), solution))
}
