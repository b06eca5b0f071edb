//! Line straightness and facial landmark scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline<T> {
    pub points: Vec<(T, T)>,
}

impl<T: Scalar> Polyline<T> {
    pub fn new(points: Vec<(T, T)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegenerateLine(format!("need at least 2 points, got {}", points.len())));
        }
        Ok(Self { points })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet<T> {
    pub points: Vec<(T, T)>,
    pub nose_index: usize,
}

impl<T: Scalar> LandmarkSet<T> {
    pub fn new(points: Vec<(T, T)>, nose_index: usize) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegenerateLandmarks(format!("need at least 2 points, got {}", points.len())));
        }
        if nose_index >= points.len() {
            return Err(Error::DegenerateLandmarks(format!(
                "nose index {nose_index} out of range for {} points",
                points.len()
            )));
        }
        Ok(Self { points, nose_index })
    }

    pub fn centroid(&self) -> (T, T) {
        let n = T::from_usize_lossy(self.points.len());
        let (sx, sy) = self
            .points
            .iter()
            .fold((T::zero(), T::zero()), |(ax, ay), &(x, y)| (ax + x, ay + y));
        (sx / n, sy / n)
    }
}

/// Undirected angle between two directions, in `[0, pi/2]`.
fn line_angle_between<T: Scalar>(a: T, b: T) -> T {
    let pi = T::PI();
    let mut d = (a - b).abs() % pi;
    if d > pi - d {
        d = pi - d;
    }
    d
}

/// Straightness score in `[0, 100]`.
///
/// The reference direction is the chord between the first and last ground
/// truth points. Each output segment contributes its undirected angular
/// deviation from that chord, normalized by `pi/2`; the score is
/// `100 * (1 - mean deviation)`. Zero-length output segments are skipped.
pub fn line_acc<T: Scalar>(out_line: &Polyline<T>, gt_line: &Polyline<T>) -> Result<T> {
    if out_line.points.len() < 2 || gt_line.points.len() < 2 {
        return Err(Error::DegenerateLine("lines need at least 2 points".into()));
    }
    let g0 = gt_line.points[0];
    let gn = gt_line.points[gt_line.points.len() - 1];
    if g0 == gn {
        return Err(Error::DegenerateLine("ground-truth chord has zero length".into()));
    }
    let reference = (gn.1 - g0.1).atan2(gn.0 - g0.0);
    let half_pi = T::FRAC_PI_2();
    let mut sum = T::zero();
    let mut count = 0usize;
    for seg in out_line.points.windows(2) {
        let (dx, dy) = (seg[1].0 - seg[0].0, seg[1].1 - seg[0].1);
        if dx == T::zero() && dy == T::zero() {
            continue;
        }
        let err = line_angle_between(dy.atan2(dx), reference) / half_pi;
        sum = sum + err.max(T::zero()).min(T::one());
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateLine("all output points coincide".into()));
    }
    Ok(T::lit(100.0) * (T::one() - sum / T::from_usize_lossy(count)))
}

/// Mean cosine similarity of centroid-relative landmark vectors, times 100.
pub fn shape_acc<T: Scalar>(out_lm: &LandmarkSet<T>, gt_lm: &LandmarkSet<T>) -> Result<T> {
    if out_lm.points.len() != gt_lm.points.len() {
        return Err(Error::DimensionMismatch(format!(
            "landmark counts {} vs {}",
            out_lm.points.len(),
            gt_lm.points.len()
        )));
    }
    let co = out_lm.centroid();
    let cg = gt_lm.centroid();
    let all_coincide = |set: &LandmarkSet<T>| set.points.iter().all(|&p| p == set.points[0]);
    if all_coincide(out_lm) || all_coincide(gt_lm) {
        return Err(Error::DegenerateLandmarks("all points coincide".into()));
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for (&d, &g) in out_lm.points.iter().zip(&gt_lm.points) {
        let vd = (d.0 - co.0, d.1 - co.1);
        let vg = (g.0 - cg.0, g.1 - cg.1);
        let nd = vd.0.hypot(vd.1);
        let ng = vg.0.hypot(vg.1);
        if nd == T::zero() || ng == T::zero() {
            continue;
        }
        sum = sum + (vd.0 * vg.0 + vd.1 * vg.1) / (nd * ng);
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateLandmarks("no landmark away from its centroid".into()));
    }
    Ok(T::lit(100.0) * sum / T::from_usize_lossy(count))
}

/// Mean squared distance between corresponding landmarks after translating
/// the output so its nose lands on the ground-truth nose.
pub fn landmark_distance<T: Scalar>(out_lm: &LandmarkSet<T>, gt_lm: &LandmarkSet<T>) -> Result<T> {
    if out_lm.points.len() != gt_lm.points.len() || out_lm.nose_index != gt_lm.nose_index {
        return Err(Error::DimensionMismatch(format!(
            "landmark sets differ: {} points / nose {} vs {} points / nose {}",
            out_lm.points.len(),
            out_lm.nose_index,
            gt_lm.points.len(),
            gt_lm.nose_index
        )));
    }
    if out_lm.points.is_empty() || out_lm.nose_index >= out_lm.points.len() {
        return Err(Error::DegenerateLandmarks("nose index out of range".into()));
    }
    let nd = out_lm.points[out_lm.nose_index];
    let ng = gt_lm.points[gt_lm.nose_index];
    let (tx, ty) = (ng.0 - nd.0, ng.1 - nd.1);
    let mut sum = T::zero();
    for (&d, &g) in out_lm.points.iter().zip(&gt_lm.points) {
        let ex = g.0 - (d.0 + tx);
        let ey = g.1 - (d.1 + ty);
        sum = sum + ex * ex + ey * ey;
    }
    Ok(sum / T::from_usize_lossy(out_lm.points.len()))
}
