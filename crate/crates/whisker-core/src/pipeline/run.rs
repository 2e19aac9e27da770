//! The frame loop: seeds in, staged perception per frame, consensus
//! refinement, QC, rolling-window update, and resumable state.

use super::stages::{
    assign_within_region, derive_region_boxes, detect_regions, naive_assign_view,
    reconcile_frame, StageIssue,
};
use super::{
    AssignmentState, FrameObservation, PipelineError, Provenance, Rect, RollingWindow,
    SeedFrame, ViewAssignments, WindowEntry,
};
use crate::client::PerceptionClient;
use crate::geometry::{triangulate_dlt, CameraModel, PixelPoint};
use crate::keypoints::{Keypoint, Region};
use crate::par;
use crate::refine::{
    qc_filter, refine_frame, FrameContext, Keypoint3DEstimate, QcRecord, QcVerdict, RefineConfig,
    RefineLogEntry,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    /// Region detection and consensus refinement both active.
    #[serde(rename = "full")]
    Full,
    /// No stage-4 refinement; outputs triangulated by plain DLT.
    #[serde(rename = "no-refine")]
    NoRefine,
    /// No region detection and no refinement: one full-frame assignment call
    /// per view over all centroids.
    #[serde(rename = "naive")]
    Naive,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoRefine => "no-refine",
            AblationMode::Naive => "naive",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "full" => Some(AblationMode::Full),
            "no-refine" => Some(AblationMode::NoRefine),
            "naive" => Some(AblationMode::Naive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRunConfig {
    pub ablation: AblationMode,
    pub refine: RefineConfig,
    pub max_retries: u32,
    /// Strict window mode: QC-flagged or degraded frames do not enter the
    /// rolling exemplar window.
    pub strict_window: bool,
}

impl Default for PoseRunConfig {
    fn default() -> Self {
        PoseRunConfig {
            ablation: AblationMode::Full,
            refine: RefineConfig::default(),
            max_retries: 2,
            strict_window: false,
        }
    }
}

/// Everything the frame loop consumes.
#[derive(Debug, Clone)]
pub struct SequenceInput {
    pub cameras: Vec<CameraModel>,
    /// All frames, ascending by frame index, including the seed frames.
    pub frames: Vec<BTreeMap<String, FrameObservation>>,
    /// Exactly three labeled seed frames matching the first three frames.
    pub seeds: Vec<SeedFrame>,
}

/// One completed frame, as persisted to the state file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub region_boxes: BTreeMap<String, BTreeMap<Region, Rect>>,
    pub assignments: AssignmentState,
    pub estimates: Vec<(Keypoint, Option<Keypoint3DEstimate>)>,
    pub qc: Vec<QcRecord>,
    pub issues: BTreeMap<String, Vec<StageIssue>>,
    pub refine_log: Vec<RefineLogEntry>,
    pub entered_window: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub views: Vec<String>,
    pub records: Vec<FrameRecord>,
}

/// Runs the staged pipeline over every frame after the seeds.
///
/// `completed` carries previously persisted records when resuming; they are
/// validated as a prefix and skipped. `on_frame` observes each newly
/// completed record before the window advances, so callers can persist
/// restart state incrementally.
pub fn run_sequence(
    input: &SequenceInput,
    config: &PoseRunConfig,
    client: &PerceptionClient,
    completed: Vec<FrameRecord>,
    mut on_frame: impl FnMut(&FrameRecord) -> Result<(), PipelineError>,
) -> Result<RunOutput, PipelineError> {
    let cameras = validate_cameras(input)?;
    validate_frame_order(&input.frames)?;
    let seed_entries = validate_seeds(input)?;
    let views: Vec<String> = cameras.keys().cloned().collect();

    let mut window = RollingWindow::from_seeds(seed_entries)?;
    let seed_last = input.seeds.iter().map(|s| s.frame).max().unwrap_or(0);
    let pending: Vec<&BTreeMap<String, FrameObservation>> = input
        .frames
        .iter()
        .filter(|f| frame_index_of(f) > Some(seed_last))
        .collect();

    // Resume: verify the completed records form a prefix of the pending
    // frames and replay their window effects.
    if completed.len() > pending.len() {
        return Err(PipelineError::InconsistentInput(format!(
            "state file holds {} records but only {} frames are pending",
            completed.len(),
            pending.len()
        )));
    }
    for (record, frame) in completed.iter().zip(&pending) {
        let expected = frame_index_of(frame).expect("validated non-empty frame");
        if record.frame_index != expected {
            return Err(PipelineError::InconsistentInput(format!(
                "state record for frame {} does not match expected frame {expected}",
                record.frame_index
            )));
        }
        if record.entered_window {
            window.push(window_entry_from_record(record, frame))?;
        }
    }

    let mut records = completed;
    for frame in pending.iter().skip(records.len()) {
        let record = process_frame(frame, &window, config, client, &cameras)?;
        on_frame(&record)?;
        if record.entered_window {
            window.push(window_entry_from_record(&record, frame))?;
        }
        records.push(record);
    }

    Ok(RunOutput { views, records })
}

fn frame_index_of(frame: &BTreeMap<String, FrameObservation>) -> Option<u64> {
    frame.values().next().map(|o| o.frame_index)
}

fn validate_cameras(input: &SequenceInput) -> Result<BTreeMap<String, CameraModel>, PipelineError> {
    let mut cameras = BTreeMap::new();
    for camera in &input.cameras {
        if cameras
            .insert(camera.name().to_string(), camera.clone())
            .is_some()
        {
            return Err(PipelineError::InconsistentInput(format!(
                "duplicate camera name {}",
                camera.name()
            )));
        }
    }
    if cameras.is_empty() {
        return Err(PipelineError::InconsistentInput("no cameras".into()));
    }
    for frame in &input.frames {
        for view in frame.keys() {
            if !cameras.contains_key(view) {
                return Err(PipelineError::InconsistentInput(format!(
                    "observation view {view} has no calibrated camera"
                )));
            }
        }
    }
    Ok(cameras)
}

fn validate_frame_order(
    frames: &[BTreeMap<String, FrameObservation>],
) -> Result<(), PipelineError> {
    let mut previous: Option<u64> = None;
    for frame in frames {
        let index = frame_index_of(frame).ok_or_else(|| {
            PipelineError::InconsistentInput("frame with no observations".into())
        })?;
        for obs in frame.values() {
            if obs.frame_index != index {
                return Err(PipelineError::InconsistentInput(format!(
                    "mixed frame indices within one frame bundle ({index} vs {})",
                    obs.frame_index
                )));
            }
            obs.validate()?;
        }
        if previous.is_some_and(|p| p >= index) {
            return Err(PipelineError::InconsistentInput(
                "frames must be strictly ascending".into(),
            ));
        }
        previous = Some(index);
    }
    Ok(())
}

/// Seeds must label the first three frames completely: every view present,
/// all 12 keypoints per view, injective, indices in range.
fn validate_seeds(input: &SequenceInput) -> Result<Vec<WindowEntry>, PipelineError> {
    if input.seeds.len() != super::WINDOW_CAPACITY {
        return Err(PipelineError::SeedValidation(format!(
            "expected exactly {} seed frames, got {}",
            super::WINDOW_CAPACITY,
            input.seeds.len()
        )));
    }
    let mut entries = Vec::with_capacity(input.seeds.len());
    for (position, seed) in input.seeds.iter().enumerate() {
        let frame = input
            .frames
            .get(position)
            .filter(|f| frame_index_of(f) == Some(seed.frame))
            .ok_or_else(|| {
                PipelineError::SeedValidation(format!(
                    "seed frame {} must be frame number {position} of the dataset",
                    seed.frame
                ))
            })?;
        let mut assignments = AssignmentState::new(seed.frame, &[], Provenance::Seed);
        for (view, observation) in frame {
            let labels = seed.views.get(view).ok_or_else(|| {
                PipelineError::SeedValidation(format!(
                    "seed frame {} lacks labels for view {view}",
                    seed.frame
                ))
            })?;
            let mut va = ViewAssignments::empty(Provenance::Seed);
            for kp in Keypoint::ALL {
                let idx = labels.get(&kp).ok_or_else(|| {
                    PipelineError::SeedValidation(format!(
                        "seed frame {} view {view} lacks keypoint {kp}",
                        seed.frame
                    ))
                })?;
                if let Some(idx) = idx {
                    if observation.centroid(*idx).is_none() {
                        return Err(PipelineError::SeedValidation(format!(
                            "seed frame {} view {view}: centroid index {idx} out of range",
                            seed.frame
                        )));
                    }
                }
                va.entry_mut(kp).centroid = *idx;
            }
            if !va.is_injective() {
                return Err(PipelineError::SeedValidation(format!(
                    "seed frame {} view {view}: duplicate centroid assignment",
                    seed.frame
                )));
            }
            assignments.insert_view(view.clone(), va);
        }
        let region_boxes: BTreeMap<String, BTreeMap<Region, Rect>> = frame
            .iter()
            .map(|(view, obs)| {
                let va = assignments.view(view).expect("just inserted");
                (view.clone(), derive_region_boxes(obs, va))
            })
            .collect();
        entries.push(WindowEntry {
            frame_index: seed.frame,
            observations: frame.clone(),
            region_boxes,
            assignments,
        });
    }
    Ok(entries)
}

fn window_entry_from_record(
    record: &FrameRecord,
    frame: &BTreeMap<String, FrameObservation>,
) -> WindowEntry {
    WindowEntry {
        frame_index: record.frame_index,
        observations: frame.clone(),
        region_boxes: record.region_boxes.clone(),
        assignments: record.assignments.clone(),
    }
}

fn process_frame(
    observations: &BTreeMap<String, FrameObservation>,
    window: &RollingWindow,
    config: &PoseRunConfig,
    client: &PerceptionClient,
    cameras: &BTreeMap<String, CameraModel>,
) -> Result<FrameRecord, PipelineError> {
    let frame_index = frame_index_of(observations)
        .ok_or_else(|| PipelineError::InconsistentInput("frame with no observations".into()))?;

    // Stages 1 and 2: independent per view, run concurrently.
    type ViewStage = (
        String,
        BTreeMap<Region, Rect>,
        (BTreeMap<Keypoint, Option<usize>>, Vec<StageIssue>),
    );
    let view_list: Vec<&FrameObservation> = observations.values().collect();
    let staged: Vec<Result<ViewStage, PipelineError>> = par::map_collect(view_list, |obs| {
        match config.ablation {
            AblationMode::Naive => {
                let (partial, issues) = naive_assign_view(obs, window, client, config.max_retries);
                Ok((obs.view.clone(), BTreeMap::new(), (partial, issues)))
            }
            AblationMode::Full | AblationMode::NoRefine => {
                let (boxes, mut issues) =
                    detect_regions(obs, window, client, config.max_retries)?;
                let mut partial: BTreeMap<Keypoint, Option<usize>> = BTreeMap::new();
                for region in Region::ALL {
                    let (region_partial, mut region_issues) = assign_within_region(
                        region,
                        &boxes[&region],
                        obs,
                        window,
                        client,
                        config.max_retries,
                    );
                    partial.extend(region_partial);
                    issues.append(&mut region_issues);
                }
                Ok((obs.view.clone(), boxes, (partial, issues)))
            }
        }
    });

    let mut region_boxes = BTreeMap::new();
    let mut partials = BTreeMap::new();
    for staged_view in staged {
        let (view, boxes, partial) = staged_view?;
        region_boxes.insert(view.clone(), boxes);
        partials.insert(view, partial);
    }

    // Stage 3: per-view reconciliation (a per-frame barrier).
    let (state, issues) =
        reconcile_frame(observations, &partials, client, config.max_retries, frame_index);
    state.validate_injective()?;

    // Stage 4 or plain triangulation for the ablated variants.
    let ctx = FrameContext {
        cameras,
        observations,
    };
    let (state, estimates, refine_log) = match config.ablation {
        AblationMode::Full => {
            let result = refine_frame(&state, &ctx, &config.refine)
                .map_err(|e| PipelineError::InconsistentInput(e.to_string()))?;
            result.state.validate_injective()?;
            (result.state, result.estimates, result.log)
        }
        AblationMode::NoRefine | AblationMode::Naive => {
            let estimates = plain_estimates(&state, observations, cameras, &config.refine);
            (state, estimates, Vec::new())
        }
    };

    let qc = qc_filter(&estimates, config.refine.tau_qc);
    let flagged = qc.iter().any(|r| r.verdict == QcVerdict::Flag)
        || issues.values().any(|v| !v.is_empty());
    let entered_window = !(config.strict_window && flagged);

    Ok(FrameRecord {
        frame_index,
        region_boxes,
        assignments: state,
        estimates,
        qc,
        issues,
        refine_log,
        entered_window,
    })
}

/// Plain DLT over all assigned views, for the ablation variants that skip the
/// consensus machinery. Inlier bookkeeping still uses the reprojection
/// threshold so QC semantics match the refined path.
fn plain_estimates(
    state: &AssignmentState,
    observations: &BTreeMap<String, FrameObservation>,
    cameras: &BTreeMap<String, CameraModel>,
    refine: &RefineConfig,
) -> Vec<(Keypoint, Option<Keypoint3DEstimate>)> {
    Keypoint::ALL
        .iter()
        .map(|&kp| {
            let mut obs: Vec<(&CameraModel, PixelPoint)> = Vec::new();
            for (view, va) in state.views() {
                let (Some(idx), Some(camera), Some(frame)) =
                    (va.centroid_of(kp), cameras.get(view), observations.get(view))
                else {
                    continue;
                };
                if let Some(pixel) = frame.centroid(idx) {
                    obs.push((camera, *pixel));
                }
            }
            if obs.len() < 2 {
                return (kp, None);
            }
            let Ok(point) = triangulate_dlt(&obs) else {
                return (kp, None);
            };
            let mut per_camera_error = BTreeMap::new();
            let mut inliers = std::collections::BTreeSet::new();
            let mut inlier_total = 0.0;
            let mut total = 0.0;
            for (camera, pixel) in &obs {
                let Ok(err) = camera.reprojection_error(&point, pixel) else {
                    continue;
                };
                per_camera_error.insert(camera.name().to_string(), err);
                total += err;
                if err <= refine.ransac.tau_reproj {
                    inliers.insert(camera.name().to_string());
                    inlier_total += err;
                }
            }
            let mean_inlier_error = if inliers.is_empty() {
                total / obs.len() as f64
            } else {
                inlier_total / inliers.len() as f64
            };
            (
                kp,
                Some(Keypoint3DEstimate {
                    keypoint: kp,
                    point,
                    inlier_cameras: inliers,
                    per_camera_error,
                    mean_inlier_error,
                }),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateHeader {
    pub version: u32,
    pub config_hash: String,
}

pub fn state_header_line(config_hash: &str) -> String {
    serde_json::to_string(&StateHeader {
        version: 1,
        config_hash: config_hash.to_string(),
    })
    .expect("header serializes")
}

pub fn load_state(path: &Path) -> Result<(StateHeader, Vec<FrameRecord>), PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: StateHeader = serde_json::from_str(lines.next().ok_or_else(|| {
        PipelineError::InconsistentInput("state file is empty".into())
    })?)?;
    let records: Result<Vec<FrameRecord>, _> = lines.map(serde_json::from_str).collect();
    Ok((header, records?))
}

impl RunOutput {
    /// Renders the final output files into a directory:
    /// assignments.csv, trajectory.csv, qc_report.csv, review_manifest.jsonl,
    /// and refine_log.jsonl. Rendering is a pure function of the records, so
    /// resumed and uninterrupted runs produce byte-identical files.
    pub fn render_to_dir(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;

        let mut assignments = csv::Writer::from_path(dir.join("assignments.csv"))?;
        assignments.write_record(["frame", "view", "keypoint", "centroid", "provenance", "flags"])?;
        for record in &self.records {
            for (view, va) in record.assignments.views() {
                for (kp, entry) in va.iter() {
                    let flags = entry
                        .flags
                        .iter()
                        .map(|f| f.name())
                        .collect::<Vec<_>>()
                        .join("+");
                    assignments.write_record([
                        record.frame_index.to_string(),
                        view.clone(),
                        kp.name().to_string(),
                        entry.centroid.map(|i| i.to_string()).unwrap_or_default(),
                        entry.provenance.name().to_string(),
                        flags,
                    ])?;
                }
            }
        }
        assignments.flush().map_err(std::io::Error::from)?;

        let mut trajectory = csv::Writer::from_path(dir.join("trajectory.csv"))?;
        trajectory.write_record([
            "frame",
            "keypoint",
            "x",
            "y",
            "z",
            "mean_error_px",
            "inliers",
        ])?;
        for record in &self.records {
            for (kp, estimate) in &record.estimates {
                if let Some(est) = estimate {
                    trajectory.write_record([
                        record.frame_index.to_string(),
                        kp.name().to_string(),
                        est.point.x.to_string(),
                        est.point.y.to_string(),
                        est.point.z.to_string(),
                        est.mean_inlier_error.to_string(),
                        est.inlier_cameras.len().to_string(),
                    ])?;
                }
            }
        }
        trajectory.flush().map_err(std::io::Error::from)?;

        let mut qc = csv::Writer::from_path(dir.join("qc_report.csv"))?;
        qc.write_record(["frame", "keypoint", "verdict", "reason", "mean_error_px", "inliers"])?;
        let mut review = std::fs::File::create(dir.join("review_manifest.jsonl"))?;
        for record in &self.records {
            for qc_record in &record.qc {
                qc.write_record([
                    record.frame_index.to_string(),
                    qc_record.keypoint.name().to_string(),
                    qc_record.verdict.name().to_string(),
                    qc_record.reason.clone().unwrap_or_default(),
                    qc_record
                        .mean_error
                        .map(|e| e.to_string())
                        .unwrap_or_default(),
                    qc_record.inliers.to_string(),
                ])?;
                if qc_record.verdict == QcVerdict::Flag {
                    let per_camera_error = record
                        .estimates
                        .iter()
                        .find(|(kp, _)| *kp == qc_record.keypoint)
                        .and_then(|(_, est)| est.as_ref())
                        .map(|est| est.per_camera_error.clone())
                        .unwrap_or_default();
                    let line = serde_json::json!({
                        "frame": record.frame_index,
                        "keypoint": qc_record.keypoint,
                        "reason": qc_record.reason,
                        "mean_error_px": qc_record.mean_error,
                        "inliers": qc_record.inliers,
                        "per_camera_error": per_camera_error,
                    });
                    writeln!(review, "{line}")?;
                }
            }
        }
        qc.flush().map_err(std::io::Error::from)?;

        let mut refine_log = std::fs::File::create(dir.join("refine_log.jsonl"))?;
        for record in &self.records {
            for entry in &record.refine_log {
                writeln!(refine_log, "{}", serde_json::to_string(entry)?)?;
            }
        }
        Ok(())
    }
}
