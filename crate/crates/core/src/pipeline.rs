//! End-to-end runs behind the command-line tool: correction, synthetic data
//! generation, dataset evaluation and the small file utilities.
//!
//! Every artifact goes through an atomic write, and nothing time- or
//! host-dependent reaches the outputs, so identical configs give
//! byte-identical output directories.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{to_points, Annotations, Pattern, PipelineConfig, SynthKind};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::fusion::{
    compute_face_translation, crop_face, crop_face_sized, fill_gaps_with_stats, paste_face, FaceBox, FaceCrop, Mask,
    FACE_CROP_SIZE,
};
use crate::geometry::{barrel_flow, LensParams};
use crate::io::{read_flo, write_atomic, write_flo};
use crate::metrics::{landmark_distance, line_acc, shape_acc, LandmarkSet, Polyline};
use crate::raster::Image;
use crate::solver::{correct_background, optimize_face_flow, SolverConfig};
use crate::synthgen::{make_barrel_pair, make_corner_stretch_pair, patterns, SynthPair};
use crate::warp::{warp_image_with, warp_point, warp_points_lossy};

pub const CORRECTED_FILE: &str = "corrected.png";
pub const BACKGROUND_FLOW_FILE: &str = "background_flow.flo";
pub const FACE_FLOW_FILE: &str = "face_flow.flo";
pub const GAP_MASK_FILE: &str = "gap_mask.png";
pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const SKIP_LOG_FILE: &str = "skipped.log";

/// Spacing of annotation points along synthetic lines, in pixels.
const LINE_POINT_SPACING: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub stage: String,
    pub code: String,
    pub message: String,
}

impl ErrorEntry {
    pub fn new(stage: &str, err: &Error) -> Self {
        Self { stage: stage.into(), code: err.code().into(), message: err.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundReport {
    /// `lens` or `solver`.
    pub method: String,
    pub objective: Option<f64>,
    pub zero_flow_objective: Option<f64>,
    pub accepted_steps: usize,
    pub mean_displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceReport {
    pub face_box: FaceBox,
    pub provider: String,
    pub translation: [f64; 2],
    pub gap_pixels: usize,
    pub fill_sweeps: usize,
    pub fill_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub line_acc_before: Option<f64>,
    pub line_acc_after: Option<f64>,
    /// Output landmarks against the input landmarks.
    pub shape_acc: Option<f64>,
    pub landmark_distance: Option<f64>,
    /// Annotation points that could not be carried through the flow.
    pub dropped_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectReport {
    pub input: Option<String>,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub background: Option<BackgroundReport>,
    pub faces: Vec<FaceReport>,
    pub metrics: MetricsReport,
    pub artifacts: Vec<String>,
    pub errors: Vec<ErrorEntry>,
}

impl CorrectReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

fn output_dir(cfg: &PipelineConfig) -> Result<&Path> {
    let out = cfg.paths.output.as_deref().ok_or_else(|| Error::InvalidConfig("no output directory".into()))?;
    std::fs::create_dir_all(out)?;
    Ok(out)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Source of the face correction flow at crop resolution.
///
/// Stands in for a learned face model: implementations may read a flow
/// computed elsewhere or solve for one.
pub trait FaceFlowProvider {
    fn name(&self) -> &str;
    fn face_flow(&self, crop: &FaceCrop<f64>) -> Result<FlowField<f64>>;
}

/// Leaves the face geometry untouched.
pub struct ZeroFaceFlow;

impl FaceFlowProvider for ZeroFaceFlow {
    fn name(&self) -> &str {
        "zero"
    }

    fn face_flow(&self, crop: &FaceCrop<f64>) -> Result<FlowField<f64>> {
        Ok(FlowField::zeros(crop.image.width(), crop.image.height()))
    }
}

/// Reads a `.flo` file computed by an external face model.
pub struct FileFaceFlow(pub PathBuf);

impl FaceFlowProvider for FileFaceFlow {
    fn name(&self) -> &str {
        "file"
    }

    fn face_flow(&self, crop: &FaceCrop<f64>) -> Result<FlowField<f64>> {
        let flow: FlowField<f64> = read_flo(&self.0)?;
        if flow.dims() != crop.image.dims() {
            return Err(crate::error::dims_mismatch("face flow vs crop", flow.dims(), crop.image.dims()));
        }
        Ok(flow)
    }
}

/// Solves the face objective against a target crop.
pub struct SolverFaceFlow {
    pub target: Image<f64>,
    pub weights: crate::objectives::ObjectiveWeights,
    pub solver: SolverConfig,
}

impl FaceFlowProvider for SolverFaceFlow {
    fn name(&self) -> &str {
        "solver"
    }

    fn face_flow(&self, crop: &FaceCrop<f64>) -> Result<FlowField<f64>> {
        Ok(optimize_face_flow(&crop.image, &self.target, None, &self.weights, &self.solver)?.flow)
    }
}

fn mean_line_acc(outs: &[Polyline<f64>], refs: &[Polyline<f64>]) -> Result<Option<f64>> {
    if outs.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for (o, r) in outs.iter().zip(refs) {
        sum += line_acc(o, r)?;
    }
    Ok(Some(sum / outs.len() as f64))
}

/// Carries each line through `flow`; lines left with fewer than two points
/// are dropped together with their reference.
fn carry_lines(
    lines: &[Polyline<f64>],
    refs: Option<&[Polyline<f64>]>,
    flow: &FlowField<f64>,
    dropped: &mut usize,
) -> (Vec<Polyline<f64>>, Vec<Polyline<f64>>) {
    let mut outs = Vec::new();
    let mut kept_refs = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let moved: Vec<_> = warp_points_lossy(&line.points, flow).into_iter().map(|(_, q)| q).collect();
        *dropped += line.points.len() - moved.len();
        let Ok(out) = Polyline::new(moved) else { continue };
        kept_refs.push(match refs {
            Some(r) => r[i].clone(),
            None => out.clone(),
        });
        outs.push(out);
    }
    (outs, kept_refs)
}

struct PlacedFace {
    crop: FaceCrop<f64>,
    flow: FlowField<f64>,
    translation: (f64, f64),
}

impl PlacedFace {
    /// Where an input point inside the face box ends up in the output.
    fn map(&self, p: (f64, f64)) -> Result<(f64, f64)> {
        let b = self.crop.source_box;
        let (sx, sy) = self.crop.scale;
        let u = ((p.0 - b.x as f64 + 0.5) * sx - 0.5, (p.1 - b.y as f64 + 0.5) * sy - 0.5);
        let q = warp_point(u, &self.flow)?;
        Ok((
            (q.0 + 0.5) / sx - 0.5 + b.x as f64 + self.translation.0,
            (q.1 + 0.5) / sy - 0.5 + b.y as f64 + self.translation.1,
        ))
    }
}

fn load_mask(path: Option<&Path>, crop: &FaceCrop<f64>, input_dims: (usize, usize)) -> Result<Mask<f64>> {
    let Some(path) = path else {
        return Ok(Mask::filled(FACE_CROP_SIZE, FACE_CROP_SIZE, 1.0));
    };
    let mask: Mask<f64> = Mask::load(path)?;
    if mask.dims() == crop.image.dims() {
        Ok(mask)
    } else if mask.dims() == input_dims {
        let cropped = crop_face_sized(mask.as_image(), crop.source_box, crop.image.width())?;
        Mask::from_image(&cropped.image.clamp_unit())
    } else {
        Err(crate::error::dims_mismatch("mask vs crop or input", mask.dims(), crop.image.dims()))
    }
}

/// Background correction, face re-composition and gap filling for one image.
///
/// Stage failures are recorded in the returned report (and in the written
/// `report.json`) rather than returned; `Err` means no report could be
/// written at all.
pub fn run_correct(cfg: &PipelineConfig) -> Result<CorrectReport> {
    cfg.validate()?;
    let out = output_dir(cfg)?.to_path_buf();
    let mut report = CorrectReport {
        input: cfg.paths.input.as_ref().map(|p| p.display().to_string()),
        width: 0,
        height: 0,
        seed: cfg.seed,
        background: None,
        faces: Vec::new(),
        metrics: MetricsReport::default(),
        artifacts: Vec::new(),
        errors: Vec::new(),
    };
    if let Err(e) = correct_stages(cfg, &out, &mut report) {
        report.errors.push(e);
    }
    report.artifacts.sort();
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn correct_stages(cfg: &PipelineConfig, out: &Path, report: &mut CorrectReport) -> Result<(), ErrorEntry> {
    let stage = |name: &'static str| move |e: Error| ErrorEntry::new(name, &e);

    cfg.check_inputs().map_err(stage("config"))?;
    let input_path = cfg.paths.input.as_ref().ok_or_else(|| {
        ErrorEntry::new("config", &Error::InvalidConfig("no input image".into()))
    })?;
    let input: Image<f64> = Image::load(input_path).map_err(stage("load"))?;
    let (w, h) = input.dims();
    report.width = w;
    report.height = h;
    let annotations = match &cfg.paths.annotations {
        Some(p) => Annotations::load(p).map_err(stage("annotations"))?,
        None => Annotations::default(),
    };
    let lines = annotations.polylines().map_err(stage("annotations"))?;
    let gt_lines = match annotations.gt_lines {
        Some(_) => Some(annotations.reference_lines().map_err(stage("annotations"))?),
        None => None,
    };

    // Background.
    let (mut corrected, bg_flow) = if let Some(lens) = &cfg.lens {
        let lens: LensParams<f64> = lens.resolve(w, h);
        let flow = barrel_flow(&lens, w, h).map_err(stage("background"))?;
        let img = warp_image_with(&input, &flow, cfg.boundary).map_err(stage("background"))?;
        report.background = Some(BackgroundReport {
            method: "lens".into(),
            objective: None,
            zero_flow_objective: None,
            accepted_steps: 0,
            mean_displacement: flow.mean_magnitude(),
        });
        (img, flow)
    } else {
        let reference = match &cfg.paths.reference {
            Some(p) => Some(Image::<f64>::load(p).map_err(stage("background"))?),
            None => None,
        };
        let solver = SolverConfig { seed: cfg.seed, boundary: cfg.boundary, ..cfg.solver.clone() };
        let (img, flow, sol) = correct_background(&input, &cfg.weights, &solver, reference.as_ref(), &lines)
            .map_err(stage("background"))?;
        if cfg.write_trace {
            let csv = sol.trace_csv().map_err(stage("write"))?;
            write_atomic(&out.join(TRACE_FILE), &csv).map_err(stage("write"))?;
            report.artifacts.push(TRACE_FILE.into());
        }
        report.background = Some(BackgroundReport {
            method: "solver".into(),
            objective: Some(sol.objective),
            zero_flow_objective: Some(sol.zero_flow_objective),
            accepted_steps: sol.trace.iter().filter(|e| e.iteration > 0).count(),
            mean_displacement: flow.mean_magnitude(),
        });
        (img, flow)
    };
    write_flo(out.join(BACKGROUND_FLOW_FILE), &bg_flow).map_err(stage("write"))?;
    report.artifacts.push(BACKGROUND_FLOW_FILE.into());

    // Face.
    let mut placed = None;
    if let Some(face_box) = annotations.face_box {
        let crop = crop_face(&input, face_box).map_err(stage("face"))?;
        let provider: Box<dyn FaceFlowProvider> = if let Some(p) = &cfg.paths.face_flow {
            Box::new(FileFaceFlow(p.clone()))
        } else if let Some(p) = &cfg.paths.face_reference {
            let reference = Image::<f64>::load(p).map_err(stage("face"))?;
            if reference.dims() != (w, h) || reference.channels() != input.channels() {
                return Err(ErrorEntry::new(
                    "face",
                    &crate::error::dims_mismatch("face reference vs input", reference.dims(), (w, h)),
                ));
            }
            let target = crop_face(&reference, face_box).map_err(stage("face"))?.image;
            let solver = SolverConfig { seed: cfg.seed, ..cfg.solver.clone() };
            Box::new(SolverFaceFlow { target, weights: cfg.weights, solver })
        } else {
            Box::new(ZeroFaceFlow)
        };
        let face_flow = provider.face_flow(&crop).map_err(stage("face"))?;
        let face_img = warp_image_with(&crop.image, &face_flow, cfg.boundary).map_err(stage("face"))?;
        let mask = load_mask(cfg.paths.mask.as_deref(), &crop, (w, h)).map_err(stage("face"))?;
        let translation = compute_face_translation(&bg_flow, face_box).map_err(stage("face"))?;
        let corrected_crop = FaceCrop { image: face_img, ..crop.clone() };
        let (composite, gap) = paste_face(&corrected, &corrected_crop, &mask, translation).map_err(stage("fusion"))?;
        let (filled, sweeps, residual) = fill_gaps_with_stats(&composite, &gap).map_err(stage("fusion"))?;
        corrected = filled;
        write_flo(out.join(FACE_FLOW_FILE), &face_flow).map_err(stage("write"))?;
        gap.save(out.join(GAP_MASK_FILE)).map_err(stage("write"))?;
        report.artifacts.push(FACE_FLOW_FILE.into());
        report.artifacts.push(GAP_MASK_FILE.into());
        report.faces.push(FaceReport {
            face_box: crop.source_box,
            provider: provider.name().into(),
            translation: [translation.0, translation.1],
            gap_pixels: gap.count_set(),
            fill_sweeps: sweeps,
            fill_residual: residual,
        });
        placed = Some(PlacedFace { crop, flow: face_flow, translation });
    }

    corrected.save(out.join(CORRECTED_FILE)).map_err(stage("write"))?;
    report.artifacts.push(CORRECTED_FILE.into());

    // Metrics.
    let m = &mut report.metrics;
    if !lines.is_empty() {
        let before_refs = gt_lines.clone().unwrap_or_else(|| lines.clone());
        m.line_acc_before = mean_line_acc(&lines, &before_refs).map_err(stage("metrics"))?;
        let (outs, refs) = carry_lines(&lines, gt_lines.as_deref(), &bg_flow, &mut m.dropped_points);
        m.line_acc_after = mean_line_acc(&outs, &refs).map_err(stage("metrics"))?;
    }
    if let Some(lm) = annotations.landmark_set().map_err(stage("metrics"))? {
        let mut moved = Vec::with_capacity(lm.points.len());
        for &p in &lm.points {
            let in_face = placed.as_ref().filter(|f| f.crop.source_box.contains(p.0.floor() as i64, p.1.floor() as i64));
            let q = match in_face {
                Some(f) => f.map(p),
                None => warp_point(p, &bg_flow),
            };
            match q {
                Ok(q) => moved.push(q),
                Err(e) => return Err(ErrorEntry::new("metrics", &e)),
            }
        }
        let out_lm = LandmarkSet::new(moved, lm.nose_index).map_err(stage("metrics"))?;
        m.shape_acc = Some(shape_acc(&out_lm, &lm).map_err(stage("metrics"))?);
        m.landmark_distance = Some(landmark_distance(&out_lm, &lm).map_err(stage("metrics"))?);
    }
    Ok(())
}

/// Metadata written next to each synthetic pair. Also readable as
/// [`Annotations`]: `lines` are in the distorted frame, `gt_lines` in the
/// clean frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub kind: SynthKind,
    pub pattern: Pattern,
    pub width: usize,
    pub height: usize,
    pub spacing: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lens: Option<LensParams<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter_seed: Option<u64>,
    pub lines: Vec<Vec<[f64; 2]>>,
    pub gt_lines: Vec<Vec<[f64; 2]>>,
}

fn pattern_image(pattern: Pattern, w: usize, h: usize, spacing: usize) -> Image<f64> {
    match pattern {
        Pattern::Checkerboard => patterns::checkerboard(w, h, spacing),
        Pattern::GridLines => patterns::grid_lines(w, h, spacing),
        Pattern::Smooth => patterns::smooth(w, h, 3),
    }
}

/// Straight features of a pattern in the clean frame: full-length rows and
/// columns through the cell edges or grid lines.
pub fn pattern_lines(pattern: Pattern, w: usize, h: usize, spacing: usize) -> Vec<Polyline<f64>> {
    let spacing = spacing.max(2);
    let (xs, ys): (Vec<f64>, Vec<f64>) = match pattern {
        Pattern::Checkerboard => (
            (1..).map(|k| (k * spacing) as f64 - 0.5).take_while(|&v| v < (w - 1) as f64).collect(),
            (1..).map(|k| (k * spacing) as f64 - 0.5).take_while(|&v| v < (h - 1) as f64).collect(),
        ),
        Pattern::GridLines => (
            (0..w).filter(|x| x % spacing == spacing / 2).map(|x| x as f64).collect(),
            (0..h).filter(|y| y % spacing == spacing / 2).map(|y| y as f64).collect(),
        ),
        Pattern::Smooth => (Vec::new(), Vec::new()),
    };
    let along = |n: usize| -> Vec<f64> {
        let mut t: Vec<f64> = (0..n).step_by(LINE_POINT_SPACING).map(|v| v as f64).collect();
        if *t.last().expect("n >= 1") != (n - 1) as f64 {
            t.push((n - 1) as f64);
        }
        t
    };
    let mut lines = Vec::new();
    for &y in &ys {
        lines.push(Polyline { points: along(w).into_iter().map(|x| (x, y)).collect() });
    }
    for &x in &xs {
        lines.push(Polyline { points: along(h).into_iter().map(|y| (x, y)).collect() });
    }
    lines
}

/// Clean-frame lines carried into the distorted frame of `pair`, with their
/// clean counterparts.
pub fn distorted_lines(
    clean_lines: &[Polyline<f64>],
    pair: &SynthPair<f64>,
) -> (Vec<Polyline<f64>>, Vec<Polyline<f64>>) {
    let mut dropped = 0;
    carry_lines(clean_lines, Some(clean_lines), &pair.forward_flow, &mut dropped)
}

fn synth_one(
    cfg: &PipelineConfig,
    clean: &Image<f64>,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<(SynthPair<f64>, SynthRecord)> {
    let s = &cfg.synth;
    let (w, h) = clean.dims();
    let (pair, lens, strength, jitter_seed) = match (s.kind, cfg.lens) {
        (SynthKind::Barrel, Some(spec)) => {
            let lens = spec.resolve(w, h);
            (make_barrel_pair(clean, &lens)?, Some(lens), None, None)
        }
        (SynthKind::Barrel, None) => {
            let k1 = rng.gen_range(s.k1_range[0]..=s.k1_range[1]);
            let k2 = rng.gen_range(s.k2_range[0]..=s.k2_range[1]);
            let lens = LensParams::centered(k1, k2, w, h);
            (make_barrel_pair(clean, &lens)?, Some(lens), None, None)
        }
        (SynthKind::CornerStretch, _) => {
            let seed = s.jitter.then(|| rng.gen::<u64>());
            (make_corner_stretch_pair(clean, s.strength, seed)?, None, Some(s.strength), seed)
        }
    };
    let clean_lines = pattern_lines(s.pattern, w, h, s.spacing);
    let (lines, gt_lines) = distorted_lines(&clean_lines, &pair);
    let record = SynthRecord {
        id,
        kind: s.kind,
        pattern: s.pattern,
        width: w,
        height: h,
        spacing: s.spacing,
        lens,
        strength,
        jitter_seed,
        lines: lines.iter().map(|l| to_points(&l.points)).collect(),
        gt_lines: gt_lines.iter().map(|l| to_points(&l.points)).collect(),
    };
    Ok((pair, record))
}

/// Writes `count` pairs as `{output}/{split}/{id}.png`, `.flo` and `.json`.
pub fn run_synth(cfg: &PipelineConfig) -> Result<Vec<SynthRecord>> {
    cfg.validate()?;
    let s = &cfg.synth;
    let dir = output_dir(cfg)?.join(&s.split);
    std::fs::create_dir_all(&dir)?;
    let clean = match &cfg.paths.input {
        Some(p) => Image::load(p)?,
        None => pattern_image(s.pattern, s.width, s.height, s.spacing),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(s.count);
    for i in 0..s.count {
        let id = format!("{i:05}");
        let (pair, record) = synth_one(cfg, &clean, &mut rng, id.clone())?;
        pair.distorted.save(dir.join(format!("{id}.png")))?;
        write_flo(dir.join(format!("{id}.flo")), &pair.gt_flow)?;
        write_json(&dir.join(format!("{id}.json")), &record)?;
        records.push(record);
    }
    Ok(records)
}

/// Distorts a single input image, writing `distorted.png`, `gt_flow.flo`
/// and `meta.json`.
pub fn run_distort(cfg: &PipelineConfig) -> Result<SynthRecord> {
    cfg.validate()?;
    cfg.check_inputs()?;
    let input_path = cfg.paths.input.as_ref().ok_or_else(|| Error::InvalidConfig("no input image".into()))?;
    let clean: Image<f64> = Image::load(input_path)?;
    let out = output_dir(cfg)?;
    let mut local = cfg.clone();
    local.synth.kind = if cfg.lens.is_some() { SynthKind::Barrel } else { SynthKind::CornerStretch };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (pair, mut record) = synth_one(&local, &clean, &mut rng, "distorted".into())?;
    record.lines.clear();
    record.gt_lines.clear();
    pair.distorted.save(out.join("distorted.png"))?;
    write_flo(out.join("gt_flow.flo"), &pair.gt_flow)?;
    write_json(&out.join("meta.json"), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image_id: String,
    pub line_acc: Option<f64>,
    pub shape_acc: Option<f64>,
    pub landmark_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
    /// `(image_id, reason)` for every skipped image.
    pub skipped: Vec<(String, String)>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn eval_pair(pred: &Annotations, gt: &Annotations) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let gt_lines = gt.reference_lines()?;
    let pred_lines = pred.polylines()?;
    let line = if gt_lines.is_empty() && pred_lines.is_empty() {
        None
    } else if gt_lines.len() != pred_lines.len() {
        return Err(Error::DimensionMismatch(format!("{} lines vs {} gt lines", pred_lines.len(), gt_lines.len())));
    } else {
        mean_line_acc(&pred_lines, &gt_lines)?
    };
    let (shape, dist) = match (pred.landmark_set()?, gt.landmark_set()?) {
        (Some(p), Some(g)) => (Some(shape_acc(&p, &g)?), Some(landmark_distance(&p, &g)?)),
        (None, None) => (None, None),
        _ => return Err(Error::InvalidConfig("landmarks present on one side only".into())),
    };
    Ok((line, shape, dist))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Scores prediction annotations against ground truth, one JSON file per
/// image id in each directory. Writes `eval.csv` and `skipped.log`.
pub fn run_eval(cfg: &PipelineConfig) -> Result<EvalSummary> {
    let gt_dir = cfg.paths.ground_truth.as_ref().ok_or_else(|| Error::InvalidConfig("no ground_truth directory".into()))?;
    let pred_dir = cfg.paths.predictions.as_ref().ok_or_else(|| Error::InvalidConfig("no predictions directory".into()))?;
    let out = output_dir(cfg)?;
    let mut ids: Vec<String> = std::fs::read_dir(gt_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for id in ids {
        let pred_path = pred_dir.join(format!("{id}.json"));
        if !pred_path.exists() {
            skipped.push((id, "missing prediction annotation".into()));
            continue;
        }
        let scored = Annotations::load(gt_dir.join(format!("{id}.json")))
            .and_then(|gt| Annotations::load(&pred_path).and_then(|pred| eval_pair(&pred, &gt)));
        match scored {
            Ok((None, None, None)) => skipped.push((id, "no comparable annotations".into())),
            Ok((line_acc, shape_acc, landmark_distance)) => {
                rows.push(EvalRow { image_id: id, line_acc, shape_acc, landmark_distance })
            }
            Err(e) => skipped.push((id, format!("{}: {e}", e.code()))),
        }
    }
    if rows.is_empty() {
        write_skip_log(out, &skipped)?;
        return Err(Error::EmptyDataset);
    }
    let mean = EvalRow {
        image_id: "mean".into(),
        line_acc: mean_of(rows.iter().map(|r| r.line_acc)),
        shape_acc: mean_of(rows.iter().map(|r| r.shape_acc)),
        landmark_distance: mean_of(rows.iter().map(|r| r.landmark_distance)),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "line_acc", "shape_acc", "landmark_distance"])?;
    for r in rows.iter().chain(std::iter::once(&mean)) {
        w.write_record([r.image_id.clone(), fmt_opt(r.line_acc), fmt_opt(r.shape_acc), fmt_opt(r.landmark_distance)])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&out.join(EVAL_FILE), &bytes)?;
    write_skip_log(out, &skipped)?;
    Ok(EvalSummary { rows, mean, skipped })
}

fn write_skip_log(out: &Path, skipped: &[(String, String)]) -> Result<()> {
    let text: String = skipped.iter().map(|(id, why)| format!("{id}\t{why}\n")).collect();
    write_atomic(&out.join(SKIP_LOG_FILE), text.as_bytes())
}

/// Warps `input` with the flow in `flow_path` and saves the result.
pub fn run_warp(input: &Path, flow_path: &Path, output: &Path, boundary: crate::warp::Boundary) -> Result<()> {
    let img: Image<f64> = Image::load(input)?;
    let flow: FlowField<f64> = read_flo(flow_path)?;
    warp_image_with(&img, &flow, boundary)?.save(output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub width: usize,
    pub height: usize,
    pub mean_magnitude: f64,
    pub max_magnitude: f64,
    pub sym_loss: f64,
}

pub fn inspect_flow(path: &Path) -> Result<FlowStats> {
    let flow: FlowField<f64> = read_flo(path)?;
    Ok(FlowStats {
        width: flow.width(),
        height: flow.height(),
        mean_magnitude: flow.mean_magnitude(),
        max_magnitude: flow.max_magnitude(),
        sym_loss: crate::objectives::sym_loss(&flow),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FlowJson {
    width: usize,
    height: usize,
    /// Interleaved `dx, dy`, row-major.
    data: Vec<f64>,
}

fn read_flow_any(path: &Path) -> Result<FlowField<f64>> {
    if path.extension().is_some_and(|e| e == "json") {
        let j: FlowJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        FlowField::new(j.width, j.height, j.data)
    } else {
        read_flo(path)
    }
}

/// Converts between `.flo` and `.json`; a `.png`/`.ppm` target gets a
/// visualization (dx and dy around mid-gray in red and green, magnitude in
/// blue, all scaled by the largest magnitude).
pub fn convert_flow(input: &Path, output: &Path) -> Result<()> {
    let flow = read_flow_any(input)?;
    let ext = output.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "json" => write_json(
            output,
            &FlowJson { width: flow.width(), height: flow.height(), data: flow.data().to_vec() },
        ),
        "png" | "ppm" => {
            let m = flow.max_magnitude().max(f64::MIN_POSITIVE);
            Image::from_fn(flow.width(), flow.height(), 3, |x, y, c| {
                let (dx, dy) = flow.get(x, y);
                match c {
                    0 => 0.5 + 0.5 * dx / m,
                    1 => 0.5 + 0.5 * dy / m,
                    _ => dx.hypot(dy) / m,
                }
            })
            .save(output)
        }
        _ => write_flo(output, &flow),
    }
}
