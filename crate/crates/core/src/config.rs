//! Pipeline configuration and annotation files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FaceBox;
use crate::geometry::LensParams;
use crate::metrics::{LandmarkSet, Polyline};
use crate::objectives::ObjectiveWeights;
use crate::solver::SolverConfig;
use crate::warp::Boundary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Correct,
    Synth,
    Eval,
    Warp,
    Flow,
    Distort,
}

/// A lens given either fully or by its coefficients, centered on the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LensSpec {
    Full(LensParams<f64>),
    Centered { k1: f64, k2: f64 },
}

impl LensSpec {
    pub fn resolve(&self, width: usize, height: usize) -> LensParams<f64> {
        match *self {
            LensSpec::Full(l) => l,
            LensSpec::Centered { k1, k2 } => LensParams::centered(k1, k2, width, height),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Face mask PNG, either at crop size or at input size.
    pub mask: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    /// Undistorted reference for the background pixel term.
    pub reference: Option<PathBuf>,
    /// Externally computed face correction flow at crop size.
    pub face_flow: Option<PathBuf>,
    /// Target image for solving the face flow, at input size.
    pub face_reference: Option<PathBuf>,
    /// Ground-truth annotation directory for `eval`.
    pub ground_truth: Option<PathBuf>,
    /// Prediction annotation directory for `eval`.
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Barrel,
    CornerStretch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Checkerboard,
    GridLines,
    Smooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub pattern: Pattern,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub split: String,
    /// Corner displacement in pixels for corner-stretch pairs.
    pub strength: f64,
    pub jitter: bool,
    pub k1_range: [f64; 2],
    pub k2_range: [f64; 2],
    /// Cell size or line spacing of the pattern, in pixels.
    pub spacing: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SynthKind::Barrel,
            pattern: Pattern::Checkerboard,
            count: 10,
            width: 128,
            height: 128,
            split: "train".into(),
            strength: 8.0,
            jitter: true,
            k1_range: [0.05, 0.15],
            k2_range: [0.0, 0.02],
            spacing: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Option<Mode>,
    pub seed: u64,
    pub weights: ObjectiveWeights,
    pub solver: SolverConfig,
    pub lens: Option<LensSpec>,
    pub paths: Paths,
    pub synth: SynthConfig,
    /// Boundary handling of the final warps.
    pub boundary: Boundary,
    /// Write the solver trace next to the outputs.
    pub write_trace: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seed: 0,
            weights: ObjectiveWeights::default(),
            solver: SolverConfig::default(),
            lens: None,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            boundary: Boundary::Zero,
            write_trace: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.solver.validate()?;
        let s = &self.synth;
        if s.width < 8 || s.height < 8 {
            return Err(Error::InvalidConfig("synth images must be at least 8x8".into()));
        }
        if s.k1_range[0] > s.k1_range[1] || s.k2_range[0] > s.k2_range[1] {
            return Err(Error::InvalidConfig("synth coefficient ranges must be ordered".into()));
        }
        if !(s.strength >= 0.0) {
            return Err(Error::InvalidConfig("synth strength must be non-negative".into()));
        }
        if s.split.is_empty() || s.split.contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!("bad split name {:?}", s.split)));
        }
        Ok(())
    }

    /// Input paths that are set must exist.
    pub fn check_inputs(&self) -> Result<()> {
        let p = &self.paths;
        for path in [&p.input, &p.mask, &p.annotations, &p.reference, &p.face_flow, &p.face_reference]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} does not exist", path.display()),
                )));
            }
        }
        Ok(())
    }
}

type Point = [f64; 2];

/// Per-image annotations.
///
/// `lines` are in the frame of the image they accompany. `gt_lines`, when
/// present, are the same lines as they should appear after correction, index
/// for index; otherwise each line's own endpoint chord is the reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Annotations {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<Point>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nose_index: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lines: Vec<Vec<Point>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_lines: Option<Vec<Vec<Point>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_box: Option<FaceBox>,
}

fn to_tuples(points: &[Point]) -> Vec<(f64, f64)> {
    points.iter().map(|p| (p[0], p[1])).collect()
}

pub(crate) fn to_points(points: &[(f64, f64)]) -> Vec<Point> {
    points.iter().map(|p| [p.0, p.1]).collect()
}

impl Annotations {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn polylines(&self) -> Result<Vec<Polyline<f64>>> {
        self.lines.iter().map(|l| Polyline::new(to_tuples(l))).collect()
    }

    /// Reference lines for scoring, paired with `lines`.
    pub fn reference_lines(&self) -> Result<Vec<Polyline<f64>>> {
        match &self.gt_lines {
            Some(gt) if gt.len() != self.lines.len() => Err(Error::DimensionMismatch(format!(
                "{} lines vs {} gt_lines",
                self.lines.len(),
                gt.len()
            ))),
            Some(gt) => gt.iter().map(|l| Polyline::new(to_tuples(l))).collect(),
            None => self.polylines(),
        }
    }

    pub fn landmark_set(&self) -> Result<Option<LandmarkSet<f64>>> {
        match (&self.landmarks, self.nose_index) {
            (Some(pts), Some(nose)) => Ok(Some(LandmarkSet::new(to_tuples(pts), nose)?)),
            (Some(_), None) => Err(Error::InvalidConfig("landmarks without nose_index".into())),
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.weights.lambda4, 2.0);
        assert_eq!(cfg.solver.pyramid_levels, 4);
    }

    #[test]
    fn nested_sections_and_lens_forms() {
        let cfg = PipelineConfig::from_json(
            r#"{"weights": {"lambda4": 0.0}, "solver": {"iterations_per_level": 5, "mode": "supervised"},
                "lens": {"k1": 0.1, "k2": 0.01}, "paths": {"input": "a.png"}, "mode": "correct"}"#,
        )
        .unwrap();
        assert_eq!(cfg.weights.lambda4, 0.0);
        assert_eq!(cfg.weights.lambda1, 2.0);
        assert_eq!(cfg.solver.iterations_per_level, 5);
        assert_eq!(cfg.mode, Some(Mode::Correct));
        let lens = cfg.lens.unwrap().resolve(11, 9);
        assert_eq!((lens.cx, lens.cy), (5.0, 4.0));

        let full = PipelineConfig::from_json(r#"{"lens": {"k1": 0.1, "k2": 0.0, "cx": 1.0, "cy": 2.0, "r_norm": 3.0}}"#)
            .unwrap();
        assert_eq!(full.lens.unwrap().resolve(100, 100).r_norm, 3.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::from_json(r#"{"solver": {"iterations": 3}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"solver": {"step_size": 0.0}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"weights": {"lambda1": -1.0}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"synth": {"split": "../x"}}"#).is_err());
    }

    #[test]
    fn missing_inputs_are_reported() {
        let mut cfg = PipelineConfig::default();
        cfg.paths.input = Some("/definitely/not/here.png".into());
        assert!(cfg.check_inputs().is_err());
    }

    #[test]
    fn annotations_round_trip() {
        let text = r#"{"landmarks": [[1,2],[3,4]], "nose_index": 1, "lines": [[[0,0],[1,1]]],
                       "face_box": [1, 2, 3, 4]}"#;
        let a: Annotations = serde_json::from_str(text).unwrap();
        assert_eq!(a.face_box, Some(FaceBox::new(1, 2, 3, 4).unwrap()));
        assert_eq!(a.landmark_set().unwrap().unwrap().nose_index, 1);
        assert_eq!(a.reference_lines().unwrap(), a.polylines().unwrap());
        let back: Annotations = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn mismatched_gt_lines_are_rejected() {
        let a = Annotations {
            lines: vec![vec![[0.0, 0.0], [1.0, 0.0]]],
            gt_lines: Some(vec![]),
            ..Annotations::default()
        };
        assert!(matches!(a.reference_lines(), Err(Error::DimensionMismatch(_))));
    }
}
