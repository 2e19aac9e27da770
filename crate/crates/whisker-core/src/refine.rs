//! Cross-view consensus refinement.
//!
//! For each keypoint: RANSAC triangulation over camera subsets, partition of
//! cameras into locked (trusted) and target (suspect) sets by reprojection
//! error, hypothesis enumeration over alternative nearby centroids in each
//! target camera, joint scoring, and swap-based conflict resolution. Rigs of
//! up to [`EXHAUSTIVE_CAMERA_LIMIT`] cameras are handled by exhaustive subset
//! enumeration (at most 57 subsets of size >= 2); the seeded randomized path
//! covers larger rigs.

use crate::geometry::{triangulate_dlt, CameraModel, PixelPoint, WorldPoint};
use crate::keypoints::Keypoint;
use crate::pipeline::{AssignmentState, EntryFlag, FrameObservation, Provenance};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Largest rig for which every camera subset is enumerated instead of sampled.
pub const EXHAUSTIVE_CAMERA_LIMIT: usize = 6;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("ransac needs at least 2 observations, got {0}")]
    InsufficientViews(usize),
    #[error("no camera subset reaches consensus for {keypoint}")]
    NoConsensus { keypoint: Keypoint },
    #[error("invalid ransac config: {0}")]
    InvalidConfig(String),
    #[error("inconsistent refine input: {0}")]
    InconsistentInput(String),
}

/// RANSAC triangulation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Inlier threshold on reprojection error, pixels.
    pub tau_reproj: f64,
    /// Cameras per seed subset on the randomized path.
    pub max_subset_size: usize,
    /// Randomized iterations; ignored when exhaustive enumeration is cheaper.
    pub iterations: u32,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            tau_reproj: 5.0,
            max_subset_size: 3,
            iterations: 200,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.tau_reproj > 0.0) {
            return Err(RefineError::InvalidConfig(
                "tau_reproj must be positive".into(),
            ));
        }
        if self.max_subset_size < 2 {
            return Err(RefineError::InvalidConfig(
                "max_subset_size must be at least 2".into(),
            ));
        }
        if self.iterations < 1 {
            return Err(RefineError::InvalidConfig(
                "iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Stage-4 parameters on top of the RANSAC core.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineConfig {
    pub ransac: RansacConfig,
    /// Search radius around the projected estimate for alternative centroids, pixels.
    pub hypothesis_radius: f64,
    /// Quality-control threshold on mean inlier reprojection error, pixels.
    pub tau_qc: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            ransac: RansacConfig::default(),
            hypothesis_radius: 40.0,
            tau_qc: 10.0,
        }
    }
}

/// Triangulated world point with its supporting cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint3DEstimate {
    pub keypoint: Keypoint,
    pub point: WorldPoint,
    pub inlier_cameras: BTreeSet<String>,
    pub per_camera_error: BTreeMap<String, f64>,
    pub mean_inlier_error: f64,
}

/// A proposed reassignment of one keypoint in one target camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub target_camera: String,
    pub keypoint: Keypoint,
    /// Candidate centroid index; `None` keeps the keypoint unassigned.
    pub candidate: Option<usize>,
    /// Reassignments forced on other keypoints to keep the view injective.
    pub implied_swaps: Vec<ImpliedSwap>,
    /// Mean reprojection error after re-triangulation; set by scoring.
    pub score: Option<f64>,
    /// True for the hypothesis that keeps the current assignment.
    pub keeps_current: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpliedSwap {
    pub keypoint: Keypoint,
    pub old_centroid: usize,
    pub new_centroid: Option<usize>,
}

/// Locked/target split of the cameras observing one keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPartition {
    pub locked: BTreeSet<String>,
    pub target: BTreeSet<String>,
}

/// Immutable per-frame context shared by the refinement steps.
pub struct FrameContext<'a> {
    pub cameras: &'a BTreeMap<String, CameraModel>,
    pub observations: &'a BTreeMap<String, FrameObservation>,
}

impl<'a> FrameContext<'a> {
    fn pixel(&self, view: &str, centroid: usize) -> Result<PixelPoint, RefineError> {
        let obs = self.observations.get(view).ok_or_else(|| {
            RefineError::InconsistentInput(format!("no observation for view {view}"))
        })?;
        obs.centroid(centroid).copied().ok_or_else(|| {
            RefineError::InconsistentInput(format!(
                "view {view}: centroid index {centroid} out of range"
            ))
        })
    }

    /// Observations backing a keypoint under the given assignment state.
    fn keypoint_observations(
        &self,
        keypoint: Keypoint,
        state: &AssignmentState,
    ) -> Result<Vec<(&'a CameraModel, PixelPoint, String)>, RefineError> {
        let mut out = Vec::new();
        for (view, assignments) in state.views() {
            let Some(idx) = assignments.centroid_of(keypoint) else {
                continue;
            };
            let Some(camera) = self.cameras.get(view) else {
                return Err(RefineError::InconsistentInput(format!(
                    "no camera model for view {view}"
                )));
            };
            out.push((camera, self.pixel(view, idx)?, view.clone()));
        }
        Ok(out)
    }
}

/// One candidate subset's consensus, used while searching for the best seed.
struct SubsetScore {
    inliers: Vec<String>,
    mean_error: f64,
}

fn evaluate_subset(
    subset: &[usize],
    observations: &[(&CameraModel, PixelPoint)],
    tau: f64,
) -> Option<SubsetScore> {
    let seed: Vec<(&CameraModel, PixelPoint)> =
        subset.iter().map(|&i| observations[i]).collect();
    let point = triangulate_dlt(&seed).ok()?;
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for (camera, pixel) in observations {
        let Ok(err) = camera.reprojection_error(&point, pixel) else {
            continue;
        };
        if err <= tau {
            inliers.push(camera.name().to_string());
            total += err;
        }
    }
    if inliers.len() < 2 {
        return None;
    }
    let mean_error = total / inliers.len() as f64;
    inliers.sort();
    Some(SubsetScore { inliers, mean_error })
}

fn better(candidate: &SubsetScore, incumbent: &SubsetScore) -> bool {
    match candidate.inliers.len().cmp(&incumbent.inliers.len()) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => match candidate
            .mean_error
            .partial_cmp(&incumbent.mean_error)
            .expect("inlier errors are finite")
        {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => candidate.inliers < incumbent.inliers,
        },
    }
}

fn best_subset_exhaustive(
    observations: &[(&CameraModel, PixelPoint)],
    tau: f64,
) -> Option<SubsetScore> {
    let n = observations.len();
    let mut best: Option<SubsetScore> = None;
    for mask in 1u32..(1 << n) {
        if mask.count_ones() < 2 {
            continue;
        }
        let subset: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if let Some(score) = evaluate_subset(&subset, observations, tau) {
            if best.as_ref().is_none_or(|b| better(&score, b)) {
                best = Some(score);
            }
        }
    }
    best
}

fn best_subset_randomized(
    observations: &[(&CameraModel, PixelPoint)],
    config: &RansacConfig,
) -> Option<SubsetScore> {
    let n = observations.len();
    let size = config.max_subset_size.min(n);
    let mut rng = crate::rng::derive(config.seed, &[n as u64]);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut best: Option<SubsetScore> = None;
    for _ in 0..config.iterations {
        indices.shuffle(&mut rng);
        let mut subset: Vec<usize> = indices[..size].to_vec();
        subset.sort_unstable();
        if let Some(score) = evaluate_subset(&subset, observations, config.tau_reproj) {
            if best.as_ref().is_none_or(|b| better(&score, b)) {
                best = Some(score);
            }
        }
    }
    best
}

/// RANSAC triangulation: pick the camera subset maximizing the inlier count
/// under `tau_reproj` (ties broken by lower mean inlier error, then by
/// lexicographic camera-name order), then re-triangulate on all inliers.
///
/// Deterministic given the config seed. Exhaustive subset enumeration is used
/// for rigs of up to [`EXHAUSTIVE_CAMERA_LIMIT`] cameras.
pub fn ransac_triangulate(
    keypoint: Keypoint,
    observations: &[(&CameraModel, PixelPoint)],
    config: &RansacConfig,
) -> Result<Keypoint3DEstimate, RefineError> {
    config.validate()?;
    if observations.len() < 2 {
        return Err(RefineError::InsufficientViews(observations.len()));
    }

    let best = if observations.len() <= EXHAUSTIVE_CAMERA_LIMIT {
        best_subset_exhaustive(observations, config.tau_reproj)
    } else {
        best_subset_randomized(observations, config)
    }
    .ok_or(RefineError::NoConsensus { keypoint })?;

    finalize_estimate(keypoint, observations, &best.inliers, config.tau_reproj)
}

/// Re-triangulates on an inlier set and recomputes errors for every observing
/// camera; the final inlier set is re-derived from the refined point.
fn finalize_estimate(
    keypoint: Keypoint,
    observations: &[(&CameraModel, PixelPoint)],
    inlier_names: &[String],
    tau: f64,
) -> Result<Keypoint3DEstimate, RefineError> {
    let inlier_obs: Vec<(&CameraModel, PixelPoint)> = observations
        .iter()
        .filter(|(c, _)| inlier_names.iter().any(|n| n == c.name()))
        .copied()
        .collect();
    let point =
        triangulate_dlt(&inlier_obs).map_err(|_| RefineError::NoConsensus { keypoint })?;

    let mut per_camera_error = BTreeMap::new();
    let mut inlier_cameras = BTreeSet::new();
    let mut total = 0.0;
    for (camera, pixel) in observations {
        let Ok(err) = camera.reprojection_error(&point, pixel) else {
            continue;
        };
        per_camera_error.insert(camera.name().to_string(), err);
        if err <= tau {
            inlier_cameras.insert(camera.name().to_string());
            total += err;
        }
    }
    if inlier_cameras.len() < 2 {
        return Err(RefineError::NoConsensus { keypoint });
    }
    let mean_inlier_error = total / inlier_cameras.len() as f64;
    Ok(Keypoint3DEstimate {
        keypoint,
        point,
        inlier_cameras,
        per_camera_error,
        mean_inlier_error,
    })
}

/// Splits cameras into locked (error <= tau, trusted) and target (error > tau,
/// to be corrected).
pub fn partition_cameras(all_errors: &BTreeMap<String, f64>, tau: f64) -> CameraPartition {
    let mut locked = BTreeSet::new();
    let mut target = BTreeSet::new();
    for (camera, &err) in all_errors {
        if err <= tau {
            locked.insert(camera.clone());
        } else {
            target.insert(camera.clone());
        }
    }
    CameraPartition { locked, target }
}

/// Enumerates reassignment hypotheses for one keypoint in one target camera:
/// the keep-current hypothesis plus one per centroid within `radius` of the
/// projected 3D estimate. Candidates owned by another keypoint carry the
/// implied swap that keeps the view injective.
///
/// Returns an empty list when the estimate does not project into the camera
/// (the camera is excluded from correction this frame).
pub fn enumerate_hypotheses(
    target_camera: &str,
    camera: &CameraModel,
    frame: &FrameObservation,
    view_assignments: &crate::pipeline::ViewAssignments,
    estimate: &Keypoint3DEstimate,
    radius: f64,
) -> Vec<Hypothesis> {
    let Ok(projected) = camera.project(&estimate.point) else {
        return Vec::new();
    };
    let keypoint = estimate.keypoint;
    let current = view_assignments.centroid_of(keypoint);

    let mut hypotheses = vec![Hypothesis {
        target_camera: target_camera.to_string(),
        keypoint,
        candidate: current,
        implied_swaps: Vec::new(),
        score: None,
        keeps_current: true,
    }];

    for (idx, centroid) in frame.centroids.iter().enumerate() {
        if Some(idx) == current {
            continue;
        }
        if centroid.distance_to(&projected) > radius {
            continue;
        }
        let implied_swaps = match view_assignments.owner_of(idx) {
            Some(owner) if owner != keypoint => vec![ImpliedSwap {
                keypoint: owner,
                old_centroid: idx,
                new_centroid: current,
            }],
            _ => Vec::new(),
        };
        hypotheses.push(Hypothesis {
            target_camera: target_camera.to_string(),
            keypoint,
            candidate: Some(idx),
            implied_swaps,
            score: None,
            keeps_current: false,
        });
    }
    hypotheses
}

/// Applies a hypothesis to the assignment state (target keypoint plus any
/// implied swaps), marking entries as stage-4 corrections.
fn apply_hypothesis(state: &mut AssignmentState, hypothesis: &Hypothesis) {
    let view = state
        .view_mut(&hypothesis.target_camera)
        .expect("hypothesis refers to a known view");
    // Clear swap owners first so the view never goes through a duplicated state.
    for swap in &hypothesis.implied_swaps {
        view.entry_mut(swap.keypoint).centroid = None;
    }
    {
        let entry = view.entry_mut(hypothesis.keypoint);
        entry.centroid = hypothesis.candidate;
        entry.provenance = Provenance::Stage4;
        entry.flags.insert(EntryFlag::Corrected);
    }
    for swap in &hypothesis.implied_swaps {
        let entry = view.entry_mut(swap.keypoint);
        entry.centroid = swap.new_centroid;
        entry.provenance = Provenance::Stage4;
        entry.flags.insert(EntryFlag::Corrected);
    }
}

/// Mean inlier error for one keypoint under a tentative state, or `None` when
/// the keypoint cannot reach consensus.
fn keypoint_score(
    keypoint: Keypoint,
    state: &AssignmentState,
    ctx: &FrameContext<'_>,
    config: &RansacConfig,
) -> Result<Option<f64>, RefineError> {
    let obs = ctx.keypoint_observations(keypoint, state)?;
    let pairs: Vec<(&CameraModel, PixelPoint)> = obs.iter().map(|(c, p, _)| (*c, *p)).collect();
    if pairs.len() < 2 {
        return Ok(None);
    }
    match ransac_triangulate(keypoint, &pairs, config) {
        Ok(est) => Ok(Some(est.mean_inlier_error)),
        Err(RefineError::NoConsensus { .. }) | Err(RefineError::InsufficientViews(_)) => Ok(None),
        Err(other) => Err(other),
    }
}

/// Scores every hypothesis by re-running RANSAC triangulation on the
/// hypothesized assignment (jointly with the displaced keypoint for swap
/// hypotheses, averaging the two mean inlier errors) and returns the minimum;
/// keep-current wins ties.
pub fn score_and_select(
    mut hypotheses: Vec<Hypothesis>,
    state: &AssignmentState,
    ctx: &FrameContext<'_>,
    config: &RansacConfig,
) -> Result<Hypothesis, RefineError> {
    assert!(
        hypotheses.iter().any(|h| h.keeps_current),
        "keep-current hypothesis must be present"
    );
    for hypothesis in &mut hypotheses {
        let mut tentative = state.clone();
        apply_hypothesis(&mut tentative, hypothesis);
        let own = keypoint_score(hypothesis.keypoint, &tentative, ctx, config)?;
        let score = match own {
            None => None,
            Some(own_score) => {
                if let Some(swap) = hypothesis.implied_swaps.first() {
                    keypoint_score(swap.keypoint, &tentative, ctx, config)?
                        .map(|other| (own_score + other) / 2.0)
                } else {
                    Some(own_score)
                }
            }
        };
        hypothesis.score = score;
    }

    // Keep-current first so that on equal scores it is retained.
    hypotheses.sort_by_key(|h| !h.keeps_current);
    let mut best = 0;
    for i in 1..hypotheses.len() {
        let candidate = hypotheses[i].score.unwrap_or(f64::INFINITY);
        let incumbent = hypotheses[best].score.unwrap_or(f64::INFINITY);
        if candidate < incumbent {
            best = i;
        }
    }
    Ok(hypotheses.swap_remove(best))
}

/// One refinement decision, for the JSON-lines refinement log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineLogEntry {
    pub frame_index: u64,
    pub pass: u8,
    pub keypoint: Keypoint,
    pub target_camera: String,
    pub kept_current: bool,
    pub chosen_candidate: Option<usize>,
    /// Keep-current score (mean reprojection error, px); absent when the
    /// current assignment cannot reach consensus.
    pub score_before: Option<f64>,
    pub score_after: Option<f64>,
    pub swaps: Vec<ImpliedSwap>,
}

/// Full result of refining one frame.
#[derive(Debug, Clone)]
pub struct RefineResult {
    pub state: AssignmentState,
    /// Final per-keypoint estimates; `None` marks a keypoint that could not
    /// reach consensus this frame (a flag, not a failure).
    pub estimates: Vec<(Keypoint, Option<Keypoint3DEstimate>)>,
    pub log: Vec<RefineLogEntry>,
}

/// Refines one frame's assignments: per keypoint in canonical order, RANSAC,
/// partition, hypothesis enumeration per target camera, joint scoring, and
/// application of the winning hypothesis. One full pass runs over all 12
/// keypoints; a second pass revisits only keypoints whose assignment changed.
pub fn refine_frame(
    state: &AssignmentState,
    ctx: &FrameContext<'_>,
    config: &RefineConfig,
) -> Result<RefineResult, RefineError> {
    config.ransac.validate()?;
    let mut state = state.clone();
    let mut log = Vec::new();
    let mut changed: BTreeSet<Keypoint> = BTreeSet::new();

    for pass in 0..2u8 {
        let targets: Vec<Keypoint> = if pass == 0 {
            Keypoint::ALL.to_vec()
        } else {
            Keypoint::ALL
                .iter()
                .copied()
                .filter(|k| changed.contains(k))
                .collect()
        };
        for keypoint in targets {
            refine_keypoint(keypoint, pass, &mut state, ctx, config, &mut log, &mut changed)?;
        }
    }

    let mut estimates = Vec::with_capacity(Keypoint::ALL.len());
    for keypoint in Keypoint::ALL {
        let obs = ctx.keypoint_observations(keypoint, &state)?;
        let pairs: Vec<(&CameraModel, PixelPoint)> =
            obs.iter().map(|(c, p, _)| (*c, *p)).collect();
        let estimate = if pairs.len() < 2 {
            None
        } else {
            match ransac_triangulate(keypoint, &pairs, &config.ransac) {
                Ok(est) => Some(est),
                Err(RefineError::NoConsensus { .. }) => None,
                Err(other) => return Err(other),
            }
        };
        estimates.push((keypoint, estimate));
    }

    Ok(RefineResult { state, estimates, log })
}

#[allow(clippy::too_many_arguments)]
fn refine_keypoint(
    keypoint: Keypoint,
    pass: u8,
    state: &mut AssignmentState,
    ctx: &FrameContext<'_>,
    config: &RefineConfig,
    log: &mut Vec<RefineLogEntry>,
    changed: &mut BTreeSet<Keypoint>,
) -> Result<(), RefineError> {
    let obs = ctx.keypoint_observations(keypoint, state)?;
    if obs.len() < 2 {
        return Ok(());
    }
    let pairs: Vec<(&CameraModel, PixelPoint)> = obs.iter().map(|(c, p, _)| (*c, *p)).collect();
    let estimate = match ransac_triangulate(keypoint, &pairs, &config.ransac) {
        Ok(est) => est,
        Err(RefineError::NoConsensus { .. }) => return Ok(()),
        Err(other) => return Err(other),
    };

    let partition = partition_cameras(&estimate.per_camera_error, config.ransac.tau_reproj);
    for target_camera in &partition.target {
        let Some(camera) = ctx.cameras.get(target_camera) else {
            continue;
        };
        let Some(frame) = ctx.observations.get(target_camera) else {
            continue;
        };
        let Some(view_assignments) = state.view(target_camera) else {
            continue;
        };
        let hypotheses = enumerate_hypotheses(
            target_camera,
            camera,
            frame,
            view_assignments,
            &estimate,
            config.hypothesis_radius,
        );
        if hypotheses.is_empty() {
            continue;
        }
        let score_before = keypoint_score(keypoint, state, ctx, &config.ransac)
            .ok()
            .flatten();
        let chosen = score_and_select(hypotheses, state, ctx, &config.ransac)?;
        if !chosen.keeps_current {
            apply_hypothesis(state, &chosen);
            changed.insert(keypoint);
            for swap in &chosen.implied_swaps {
                changed.insert(swap.keypoint);
            }
        }
        log.push(RefineLogEntry {
            frame_index: state.frame_index,
            pass,
            keypoint,
            target_camera: target_camera.clone(),
            kept_current: chosen.keeps_current,
            chosen_candidate: chosen.candidate,
            score_before,
            score_after: chosen.score,
            swaps: chosen.implied_swaps.clone(),
        });
    }
    Ok(())
}

/// Quality-control verdict for one keypoint's final estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QcVerdict {
    #[serde(rename = "accept")]
    Accept,
    #[serde(rename = "flag")]
    Flag,
}

impl QcVerdict {
    pub fn name(self) -> &'static str {
        match self {
            QcVerdict::Accept => "accept",
            QcVerdict::Flag => "flag",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRecord {
    pub keypoint: Keypoint,
    pub verdict: QcVerdict,
    /// `+`-joined reasons when flagged: `no-consensus`, `high-error`, `few-inliers`.
    pub reason: Option<String>,
    pub mean_error: Option<f64>,
    pub inliers: usize,
}

/// Flags estimates with mean inlier error above `tau_qc`, fewer than 3
/// inliers, or no consensus. Flagged labels are emitted for review, never
/// silently dropped.
pub fn qc_filter(
    estimates: &[(Keypoint, Option<Keypoint3DEstimate>)],
    tau_qc: f64,
) -> Vec<QcRecord> {
    estimates
        .iter()
        .map(|(keypoint, estimate)| match estimate {
            None => QcRecord {
                keypoint: *keypoint,
                verdict: QcVerdict::Flag,
                reason: Some("no-consensus".into()),
                mean_error: None,
                inliers: 0,
            },
            Some(est) => {
                let mut reasons = Vec::new();
                if est.mean_inlier_error > tau_qc {
                    reasons.push("high-error");
                }
                if est.inlier_cameras.len() < 3 {
                    reasons.push("few-inliers");
                }
                QcRecord {
                    keypoint: *keypoint,
                    verdict: if reasons.is_empty() {
                        QcVerdict::Accept
                    } else {
                        QcVerdict::Flag
                    },
                    reason: if reasons.is_empty() {
                        None
                    } else {
                        Some(reasons.join("+"))
                    },
                    mean_error: Some(est.mean_inlier_error),
                    inliers: est.inlier_cameras.len(),
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{compute_crop, Rect, ViewAssignments};
    use nalgebra::{Matrix3, Vector3};
    use rand::Rng;

    /// Six cameras ringed around the origin, looking inward.
    fn ring_rig(n: usize) -> Vec<CameraModel> {
        let mut cams = Vec::new();
        for i in 0..n {
            let angle = std::f64::consts::TAU * i as f64 / n as f64;
            let position = Vector3::new(900.0 * angle.cos(), 900.0 * angle.sin(), 650.0);
            let target = Vector3::new(0.0, 0.0, 30.0);
            let z = (target - position).normalize();
            let up = Vector3::new(0.0, 0.0, 1.0);
            let x = z.cross(&up).normalize();
            let y = z.cross(&x);
            // Rows from normalized cross products are orthonormal to machine
            // precision, comfortably within the 1e-9 invariant.
            let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
            let translation = -rotation * position;
            let k = Matrix3::new(1500.0, 0.0, 1024.0, 0.0, 1500.0, 700.0, 0.0, 0.0, 1.0);
            cams.push(
                CameraModel::new(format!("cam{i}"), k, rotation, translation, (2048, 1400))
                    .unwrap(),
            );
        }
        cams
    }

    fn exact_observations<'a>(
        cams: &'a [CameraModel],
        p: &WorldPoint,
    ) -> Vec<(&'a CameraModel, PixelPoint)> {
        cams.iter().map(|c| (c, c.project(p).unwrap())).collect()
    }

    /// Independent oracle: full subset enumeration written as a nested loop,
    /// no shared code with the implementation path.
    fn oracle_best_inliers(
        observations: &[(&CameraModel, PixelPoint)],
        tau: f64,
    ) -> Option<Vec<String>> {
        let n = observations.len();
        let mut best: Option<(usize, f64, Vec<String>)> = None;
        for mask in 0u32..(1 << n) {
            let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            if members.len() < 2 {
                continue;
            }
            let seed: Vec<(&CameraModel, PixelPoint)> =
                members.iter().map(|&i| observations[i]).collect();
            let Ok(point) = triangulate_dlt(&seed) else { continue };
            let mut names = Vec::new();
            let mut total = 0.0;
            for (cam, px) in observations {
                if let Ok(e) = cam.reprojection_error(&point, px) {
                    if e <= tau {
                        names.push(cam.name().to_string());
                        total += e;
                    }
                }
            }
            if names.len() < 2 {
                continue;
            }
            names.sort();
            let mean = total / names.len() as f64;
            let replace = match &best {
                None => true,
                Some((count, best_mean, best_names)) => {
                    names.len() > *count
                        || (names.len() == *count && mean < *best_mean)
                        || (names.len() == *count && mean == *best_mean && names < *best_names)
                }
            };
            if replace {
                best = Some((names.len(), mean, names));
            }
        }
        best.map(|(_, _, names)| names)
    }

    #[test]
    fn noiseless_consensus_uses_all_cameras() {
        let cams = ring_rig(6);
        let p = WorldPoint::new(20.0, -15.0, 40.0);
        let obs = exact_observations(&cams, &p);
        let est = ransac_triangulate(Keypoint::BackTop, &obs, &RansacConfig::default()).unwrap();
        assert_eq!(est.inlier_cameras.len(), 6);
        assert!(est.mean_inlier_error < 1e-6);
        assert!(est.point.distance_to(&p) < 1e-6);
    }

    #[test]
    fn gross_outlier_is_excluded() {
        let cams = ring_rig(6);
        let p = WorldPoint::new(20.0, -15.0, 40.0);
        let mut obs = exact_observations(&cams, &p);
        obs[2].1 = PixelPoint::new(obs[2].1.x + 200.0, obs[2].1.y);
        let est = ransac_triangulate(Keypoint::BackTop, &obs, &RansacConfig::default()).unwrap();
        assert!(!est.inlier_cameras.contains("cam2"));
        assert_eq!(est.inlier_cameras.len(), 5);
        let oracle = oracle_best_inliers(&obs, 5.0).unwrap();
        let got: Vec<String> = est.inlier_cameras.iter().cloned().collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn exhaustive_mode_matches_oracle_over_corruption_trials() {
        let cams = ring_rig(6);
        let mut rng = crate::rng::derive(42, &[1]);
        let config = RansacConfig::default();
        for _ in 0..200 {
            let p = WorldPoint::new(
                rng.random_range(-120.0..120.0),
                rng.random_range(-120.0..120.0),
                rng.random_range(5.0..80.0),
            );
            let mut obs = exact_observations(&cams, &p);
            // Corrupt 1-2 views with large offsets and everything with small noise.
            let n_corrupt = rng.random_range(1..=2);
            for _ in 0..n_corrupt {
                let v = rng.random_range(0..obs.len());
                obs[v].1 = PixelPoint::new(
                    obs[v].1.x + rng.random_range(30.0..300.0),
                    obs[v].1.y + rng.random_range(-300.0..300.0),
                );
            }
            for o in &mut obs {
                o.1 = PixelPoint::new(
                    o.1.x + rng.random_range(-0.5..0.5),
                    o.1.y + rng.random_range(-0.5..0.5),
                );
            }
            let oracle = oracle_best_inliers(&obs, config.tau_reproj);
            let result = ransac_triangulate(Keypoint::TailTip, &obs, &config);
            match (oracle, result) {
                (Some(names), Ok(est)) => {
                    let got: Vec<String> = est.inlier_cameras.iter().cloned().collect();
                    assert_eq!(got, names);
                }
                (None, Err(_)) => {}
                (o, r) => panic!("oracle/impl disagree: {o:?} vs {r:?}"),
            }
        }
    }

    #[test]
    fn randomized_path_agrees_with_exhaustive_on_small_rigs() {
        let cams = ring_rig(6);
        let mut rng = crate::rng::derive(43, &[2]);
        // Plenty of iterations: all 20 subsets of size 3 get sampled.
        let config = RansacConfig {
            iterations: 500,
            ..RansacConfig::default()
        };
        for trial in 0..50 {
            let p = WorldPoint::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(10.0..70.0),
            );
            let mut obs = exact_observations(&cams, &p);
            let v = rng.random_range(0..obs.len());
            obs[v].1 = PixelPoint::new(obs[v].1.x - 150.0, obs[v].1.y + 90.0);
            let exhaustive = best_subset_exhaustive(&obs, config.tau_reproj).unwrap();
            let randomized = best_subset_randomized(&obs, &config).unwrap();
            assert_eq!(exhaustive.inliers, randomized.inliers, "trial {trial}");
        }
    }

    #[test]
    fn insufficient_views_and_no_consensus() {
        let cams = ring_rig(6);
        let p = WorldPoint::new(0.0, 0.0, 30.0);
        let obs = exact_observations(&cams, &p);
        assert!(matches!(
            ransac_triangulate(Keypoint::EarL, &obs[..1], &RansacConfig::default()),
            Err(RefineError::InsufficientViews(1))
        ));
        // Two wildly inconsistent views cannot agree under a tight threshold.
        let mut bad = vec![obs[0], obs[1]];
        bad[1].1 = PixelPoint::new(bad[1].1.x + 400.0, bad[1].1.y - 350.0);
        assert!(matches!(
            ransac_triangulate(Keypoint::EarL, &bad, &RansacConfig::default()),
            Err(RefineError::NoConsensus { .. })
        ));
    }

    #[test]
    fn determinism_same_seed_same_result() {
        let cams = ring_rig(8);
        let p = WorldPoint::new(25.0, 10.0, 35.0);
        let mut obs = exact_observations(&cams, &p);
        obs[5].1 = PixelPoint::new(obs[5].1.x + 120.0, obs[5].1.y);
        let config = RansacConfig {
            seed: 9,
            ..RansacConfig::default()
        };
        let a = ransac_triangulate(Keypoint::EarR, &obs, &config).unwrap();
        let b = ransac_triangulate(Keypoint::EarR, &obs, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partition_splits_by_threshold() {
        let mut errors = BTreeMap::new();
        errors.insert("A".to_string(), 1.0);
        errors.insert("B".to_string(), 2.0);
        errors.insert("C".to_string(), 90.0);
        let partition = partition_cameras(&errors, 5.0);
        assert_eq!(
            partition.locked,
            ["A", "B"].iter().map(|s| s.to_string()).collect()
        );
        assert_eq!(
            partition.target,
            ["C"].iter().map(|s| s.to_string()).collect()
        );

        let zeros: BTreeMap<String, f64> =
            errors.keys().map(|k| (k.clone(), 0.0)).collect();
        let partition = partition_cameras(&zeros, 5.0);
        assert!(partition.target.is_empty());
        assert_eq!(partition.locked.len(), 3);
    }

    /// Builds a one-view frame observation with the given centroids.
    fn frame_obs(view: &str, centroids: Vec<PixelPoint>) -> FrameObservation {
        let bbox = Rect::new(200.0, 200.0, 1800.0, 1200.0);
        FrameObservation {
            frame_index: 0,
            view: view.to_string(),
            crop: compute_crop(&bbox, (2048, 1400)).unwrap(),
            body_bbox: bbox,
            centroids,
            image_ref: None,
        }
    }

    #[test]
    fn hypothesis_enumeration_matches_linear_scan() {
        let cams = ring_rig(6);
        let p = WorldPoint::new(10.0, 5.0, 30.0);
        let obs = exact_observations(&cams, &p);
        let est = ransac_triangulate(Keypoint::EarL, &obs, &RansacConfig::default()).unwrap();

        let cam = &cams[0];
        let projected = cam.project(&est.point).unwrap();
        let mut rng = crate::rng::derive(7, &[3]);
        let centroids: Vec<PixelPoint> = (0..40)
            .map(|_| {
                PixelPoint::new(
                    projected.x + rng.random_range(-120.0..120.0),
                    projected.y + rng.random_range(-120.0..120.0),
                )
            })
            .collect();
        let frame = frame_obs("cam0", centroids.clone());
        let mut va = ViewAssignments::empty(Provenance::Stage2);
        va.entry_mut(Keypoint::EarL).centroid = Some(0);
        va.entry_mut(Keypoint::EarR).centroid = Some(1);

        let radius = 40.0;
        let hyps = enumerate_hypotheses("cam0", cam, &frame, &va, &est, radius);
        // Oracle: linear scan over all centroids.
        let expected: Vec<usize> = centroids
            .iter()
            .enumerate()
            .filter(|(i, c)| *i != 0 && c.distance_to(&projected) <= radius)
            .map(|(i, _)| i)
            .collect();
        let got: Vec<usize> = hyps
            .iter()
            .filter(|h| !h.keeps_current)
            .map(|h| h.candidate.unwrap())
            .collect();
        assert_eq!(got, expected);
        assert!(hyps[0].keeps_current);
        assert_eq!(hyps[0].candidate, Some(0));
        // Candidate 1 is owned by the other keypoint: swap implied.
        if let Some(h) = hyps.iter().find(|h| h.candidate == Some(1)) {
            assert_eq!(h.implied_swaps.len(), 1);
            assert_eq!(h.implied_swaps[0].new_centroid, Some(0));
        }
    }

    #[test]
    fn empty_neighborhood_keeps_only_current() {
        let cams = ring_rig(6);
        let p = WorldPoint::new(0.0, 0.0, 30.0);
        let obs = exact_observations(&cams, &p);
        let est = ransac_triangulate(Keypoint::EarL, &obs, &RansacConfig::default()).unwrap();
        let frame = frame_obs("cam0", vec![PixelPoint::new(0.0, 0.0)]);
        let mut va = ViewAssignments::empty(Provenance::Stage2);
        va.entry_mut(Keypoint::EarL).centroid = Some(0);
        let hyps = enumerate_hypotheses("cam0", &cams[0], &frame, &va, &est, 40.0);
        assert_eq!(hyps.len(), 1);
        assert!(hyps[0].keeps_current);
    }

    #[test]
    fn qc_filter_verdicts() {
        let accept = Keypoint3DEstimate {
            keypoint: Keypoint::EarL,
            point: WorldPoint::new(0.0, 0.0, 0.0),
            inlier_cameras: (0..6).map(|i| format!("cam{i}")).collect(),
            per_camera_error: BTreeMap::new(),
            mean_inlier_error: 1.0,
        };
        let high = Keypoint3DEstimate {
            mean_inlier_error: 25.0,
            ..accept.clone()
        };
        let few = Keypoint3DEstimate {
            inlier_cameras: ["cam0", "cam1"].iter().map(|s| s.to_string()).collect(),
            ..accept.clone()
        };
        let records = qc_filter(
            &[
                (Keypoint::EarL, Some(accept)),
                (Keypoint::EarR, Some(high)),
                (Keypoint::BackTop, Some(few)),
                (Keypoint::BackMiddle, None),
            ],
            10.0,
        );
        assert_eq!(records[0].verdict, QcVerdict::Accept);
        assert_eq!(records[1].reason.as_deref(), Some("high-error"));
        assert_eq!(records[2].reason.as_deref(), Some("few-inliers"));
        assert_eq!(records[3].reason.as_deref(), Some("no-consensus"));
        assert_eq!(records[3].verdict, QcVerdict::Flag);
    }
}
