//! Pose pipeline: staged perception calls over a rolling exemplar window,
//! cross-view refinement, and the file formats tying them together.
//!
//! Stage 1 detects one box per anatomical region and view, stage 2 assigns
//! numbered centroids to keypoints inside each region crop, stage 3 reconciles
//! the merged per-view assignment, and stage 4 (in [`crate::refine`]) corrects
//! assignments against the triangulated 3D estimate. Completed frames join the
//! rolling window and serve as few-shot exemplars for the next frame.

mod io;
mod run;
mod stages;

pub use io::{
    build_frames, read_bboxes, read_centroids, read_features, read_gt_trajectory, read_seed_file,
    read_segments, read_truth, write_bboxes, write_centroids, write_features, write_gt_trajectory,
    write_seed_file, write_segments, write_truth, BBoxTable, CentroidTable, SeedFile, SeedFrame,
    TruthTable,
};
pub use run::{
    load_state, run_sequence, state_header_line, AblationMode, FrameRecord, PoseRunConfig,
    RunOutput, SequenceInput, StateHeader,
};
pub use stages::{
    assign_within_region, derive_region_boxes, detect_regions, naive_assign_view, reconcile_frame,
    reconcile_view, StageIssue, StageOutcome, DERIVED_REGION_PAD,
};

use crate::geometry::PixelPoint;
use crate::keypoints::{Keypoint, Region};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use thiserror::Error;

/// Crop padding: 16 pixels plus 5% of the bounding-box dimension, per side.
pub const CROP_PAD_PIXELS: f64 = 16.0;
pub const CROP_PAD_FRACTION: f64 = 0.05;

/// Number of exemplar frames kept in the rolling window.
pub const WINDOW_CAPACITY: usize = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty bounding box")]
    EmptyBBox,
    #[error("seed validation: {0}")]
    SeedValidation(String),
    #[error("inconsistent input: {0}")]
    InconsistentInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Axis-aligned rectangle in full-resolution pixel coordinates,
/// `x0 <= x1`, `y0 <= y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn is_empty(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    pub fn contains_point(&self, p: &PixelPoint) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Clamps this rectangle into `bounds`, preserving emptiness semantics.
    pub fn clamped_to(&self, bounds: &Rect) -> Rect {
        Rect {
            x0: self.x0.clamp(bounds.x0, bounds.x1),
            y0: self.y0.clamp(bounds.y0, bounds.y1),
            x1: self.x1.clamp(bounds.x0, bounds.x1),
            y1: self.y1.clamp(bounds.y0, bounds.y1),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Rect {
        Rect::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn of_image(size: (u32, u32)) -> Rect {
        Rect::new(0.0, 0.0, f64::from(size.0), f64::from(size.1))
    }
}

/// Expands a body bounding box into the crop rectangle: each side padded by
/// 16 px plus 5% of the corresponding box dimension, clamped to the image.
pub fn compute_crop(body_bbox: &Rect, image_size: (u32, u32)) -> Result<Rect, PipelineError> {
    if body_bbox.is_empty() {
        return Err(PipelineError::EmptyBBox);
    }
    let pad_x = CROP_PAD_PIXELS + CROP_PAD_FRACTION * body_bbox.width();
    let pad_y = CROP_PAD_PIXELS + CROP_PAD_FRACTION * body_bbox.height();
    let padded = Rect::new(
        body_bbox.x0 - pad_x,
        body_bbox.y0 - pad_y,
        body_bbox.x1 + pad_x,
        body_bbox.y1 + pad_y,
    );
    Ok(padded.clamped_to(&Rect::of_image(image_size)))
}

/// Per-frame, per-view candidate centroids plus crop geometry.
///
/// Centroid identity is the position in `centroids`; indices are local to the
/// view and carry no anatomical meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub frame_index: u64,
    pub view: String,
    pub body_bbox: Rect,
    pub crop: Rect,
    pub centroids: Vec<PixelPoint>,
    pub image_ref: Option<PathBuf>,
}

impl FrameObservation {
    pub fn centroid(&self, index: usize) -> Option<&PixelPoint> {
        self.centroids.get(index)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.crop.contains_rect(&self.body_bbox) {
            return Err(PipelineError::InconsistentInput(format!(
                "frame {} view {}: crop does not contain body bbox",
                self.frame_index, self.view
            )));
        }
        if self
            .centroids
            .iter()
            .any(|c| !c.x.is_finite() || !c.y.is_finite())
        {
            return Err(PipelineError::InconsistentInput(format!(
                "frame {} view {}: non-finite centroid",
                self.frame_index, self.view
            )));
        }
        Ok(())
    }
}

/// Which stage produced an assignment entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "seed")]
    Seed,
    #[serde(rename = "stage-2")]
    Stage2,
    #[serde(rename = "stage-3")]
    Stage3,
    #[serde(rename = "stage-4")]
    Stage4,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Seed => "seed",
            Provenance::Stage2 => "stage-2",
            Provenance::Stage3 => "stage-3",
            Provenance::Stage4 => "stage-4",
        }
    }
}

/// Confidence flags attached to an assignment entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntryFlag {
    /// Stage-1 region detection fell back to the translated previous box.
    #[serde(rename = "degraded-region")]
    DegradedRegion,
    /// Stage-2/3 client failed schema validation; deterministic fallback used.
    #[serde(rename = "schema-fallback")]
    SchemaFallback,
    /// Unassigned by the stage-3 fallback when two keypoints claimed one centroid.
    #[serde(rename = "conflict-unassigned")]
    ConflictUnassigned,
    /// Rewritten by stage-4 consensus refinement.
    #[serde(rename = "corrected")]
    Corrected,
}

impl EntryFlag {
    pub fn name(self) -> &'static str {
        match self {
            EntryFlag::DegradedRegion => "degraded-region",
            EntryFlag::SchemaFallback => "schema-fallback",
            EntryFlag::ConflictUnassigned => "conflict-unassigned",
            EntryFlag::Corrected => "corrected",
        }
    }
}

/// One keypoint's assignment in one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub centroid: Option<usize>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub flags: BTreeSet<EntryFlag>,
}

impl AssignmentEntry {
    pub fn unassigned(provenance: Provenance) -> Self {
        AssignmentEntry {
            centroid: None,
            provenance,
            flags: BTreeSet::new(),
        }
    }

    pub fn assigned(centroid: usize, provenance: Provenance) -> Self {
        AssignmentEntry {
            centroid: Some(centroid),
            provenance,
            flags: BTreeSet::new(),
        }
    }
}

/// Keypoint-to-centroid assignments for one view; every keypoint has exactly
/// one entry (possibly unassigned).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewAssignments {
    entries: BTreeMap<Keypoint, AssignmentEntry>,
}

impl ViewAssignments {
    pub fn empty(provenance: Provenance) -> Self {
        let entries = Keypoint::ALL
            .iter()
            .map(|&k| (k, AssignmentEntry::unassigned(provenance)))
            .collect();
        ViewAssignments { entries }
    }

    pub fn entry(&self, keypoint: Keypoint) -> &AssignmentEntry {
        &self.entries[&keypoint]
    }

    pub fn entry_mut(&mut self, keypoint: Keypoint) -> &mut AssignmentEntry {
        self.entries.get_mut(&keypoint).expect("all keypoints present")
    }

    pub fn centroid_of(&self, keypoint: Keypoint) -> Option<usize> {
        self.entries[&keypoint].centroid
    }

    /// The keypoint currently owning a centroid index, if any.
    pub fn owner_of(&self, centroid: usize) -> Option<Keypoint> {
        Keypoint::ALL
            .iter()
            .copied()
            .find(|&k| self.entries[&k].centroid == Some(centroid))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Keypoint, &AssignmentEntry)> {
        Keypoint::ALL.iter().map(move |&k| (k, &self.entries[&k]))
    }

    /// Centroid indices assigned in this view.
    pub fn assigned_indices(&self) -> BTreeSet<usize> {
        self.entries.values().filter_map(|e| e.centroid).collect()
    }

    /// Checks that no centroid is claimed by two keypoints.
    pub fn is_injective(&self) -> bool {
        let assigned: Vec<usize> = self.entries.values().filter_map(|e| e.centroid).collect();
        let unique: BTreeSet<usize> = assigned.iter().copied().collect();
        assigned.len() == unique.len()
    }
}

/// The evolving keypoint-to-centroid mapping for one frame across all views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentState {
    pub frame_index: u64,
    views: BTreeMap<String, ViewAssignments>,
}

impl AssignmentState {
    pub fn new(frame_index: u64, views: &[String], provenance: Provenance) -> Self {
        AssignmentState {
            frame_index,
            views: views
                .iter()
                .map(|v| (v.clone(), ViewAssignments::empty(provenance)))
                .collect(),
        }
    }

    pub fn view(&self, view: &str) -> Option<&ViewAssignments> {
        self.views.get(view)
    }

    pub fn view_mut(&mut self, view: &str) -> Option<&mut ViewAssignments> {
        self.views.get_mut(view)
    }

    pub fn views(&self) -> impl Iterator<Item = (&String, &ViewAssignments)> {
        self.views.iter()
    }

    pub fn view_names(&self) -> Vec<String> {
        self.views.keys().cloned().collect()
    }

    pub fn insert_view(&mut self, view: String, assignments: ViewAssignments) {
        self.views.insert(view, assignments);
    }

    pub fn validate_injective(&self) -> Result<(), PipelineError> {
        for (view, va) in &self.views {
            if !va.is_injective() {
                return Err(PipelineError::InconsistentInput(format!(
                    "frame {} view {view}: duplicate centroid assignment",
                    self.frame_index
                )));
            }
        }
        Ok(())
    }
}

/// One completed frame as kept in the rolling window: observations, the
/// region boxes used, and the verified assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub frame_index: u64,
    pub observations: BTreeMap<String, FrameObservation>,
    pub region_boxes: BTreeMap<String, BTreeMap<Region, Rect>>,
    pub assignments: AssignmentState,
}

/// The three most recent completed frames, reused as few-shot exemplars.
#[derive(Debug, Clone)]
pub struct RollingWindow {
    entries: VecDeque<WindowEntry>,
}

impl RollingWindow {
    /// Builds the initial window from exactly three seed frames.
    pub fn from_seeds(seeds: Vec<WindowEntry>) -> Result<Self, PipelineError> {
        if seeds.len() != WINDOW_CAPACITY {
            return Err(PipelineError::SeedValidation(format!(
                "expected exactly {WINDOW_CAPACITY} seed frames, got {}",
                seeds.len()
            )));
        }
        let mut window = RollingWindow {
            entries: VecDeque::with_capacity(WINDOW_CAPACITY),
        };
        for seed in seeds {
            window.push(seed)?;
        }
        Ok(window)
    }

    pub fn push(&mut self, entry: WindowEntry) -> Result<(), PipelineError> {
        if let Some(last) = self.entries.back() {
            if entry.frame_index <= last.frame_index {
                return Err(PipelineError::InconsistentInput(format!(
                    "window entries must increase in frame index ({} after {})",
                    entry.frame_index, last.frame_index
                )));
            }
        }
        if self.entries.len() == WINDOW_CAPACITY {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = &WindowEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == WINDOW_CAPACITY
    }

    pub fn latest(&self) -> Option<&WindowEntry> {
        self.entries.back()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_pad_arithmetic() {
        // 200x100 box: pad_x = 16 + 10 = 26, pad_y = 16 + 5 = 21.
        let bbox = Rect::new(100.0, 100.0, 300.0, 200.0);
        let crop = compute_crop(&bbox, (2048, 1400)).unwrap();
        assert_eq!(crop, Rect::new(74.0, 79.0, 326.0, 221.0));
    }

    #[test]
    fn crop_clamps_at_image_corner() {
        let bbox = Rect::new(0.0, 0.0, 100.0, 100.0);
        let crop = compute_crop(&bbox, (2048, 1400)).unwrap();
        assert_eq!(crop.x0, 0.0);
        assert_eq!(crop.y0, 0.0);
        assert!(crop.x1 > 100.0 && crop.y1 > 100.0);
    }

    #[test]
    fn crop_of_full_image_saturates() {
        let bbox = Rect::new(0.0, 0.0, 2048.0, 1400.0);
        let crop = compute_crop(&bbox, (2048, 1400)).unwrap();
        assert_eq!(crop, bbox);
    }

    #[test]
    fn empty_bbox_rejected() {
        let bbox = Rect::new(10.0, 10.0, 10.0, 40.0);
        assert!(matches!(
            compute_crop(&bbox, (100, 100)),
            Err(PipelineError::EmptyBBox)
        ));
    }

    #[test]
    fn view_assignments_track_ownership_and_injectivity() {
        let mut va = ViewAssignments::empty(Provenance::Stage2);
        va.entry_mut(Keypoint::EarL).centroid = Some(3);
        va.entry_mut(Keypoint::EarR).centroid = Some(5);
        assert!(va.is_injective());
        assert_eq!(va.owner_of(3), Some(Keypoint::EarL));
        assert_eq!(va.owner_of(4), None);
        va.entry_mut(Keypoint::TailTip).centroid = Some(3);
        assert!(!va.is_injective());
    }

    #[test]
    fn window_requires_three_seeds_and_rolls() {
        let entry = |i: u64| WindowEntry {
            frame_index: i,
            observations: BTreeMap::new(),
            region_boxes: BTreeMap::new(),
            assignments: AssignmentState::new(i, &[], Provenance::Seed),
        };
        assert!(RollingWindow::from_seeds(vec![entry(0), entry(1)]).is_err());
        let mut w = RollingWindow::from_seeds(vec![entry(0), entry(1), entry(2)]).unwrap();
        assert!(w.is_full());
        w.push(entry(3)).unwrap();
        let indices: Vec<u64> = w.entries().map(|e| e.frame_index).collect();
        assert_eq!(indices, vec![1, 2, 3]);
        assert!(w.push(entry(3)).is_err());
    }
}
