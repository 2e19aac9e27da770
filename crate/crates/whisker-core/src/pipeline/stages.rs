//! Stages 1-3: region detection, within-region assignment, and cross-region
//! reconciliation, all driven through the perception client with deterministic
//! fallbacks on client failure.

use super::{
    AssignmentEntry, AssignmentState, EntryFlag, FrameObservation, PipelineError, Provenance,
    Rect, RollingWindow, ViewAssignments, WindowEntry,
};
use crate::client::{
    prompts, AttachmentRef, ClientError, PerceptionClient, PerceptionRequest, RequestMeta,
    ResponseSchema, TaskKind,
};
use crate::geometry::PixelPoint;
use crate::keypoints::{Keypoint, Region};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

/// Pad used when deriving a region box from labeled centroids (seed frames and
/// ground-truth style boxes).
pub const DERIVED_REGION_PAD: f64 = 12.0;

/// A degradation event recorded against one view of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StageIssue {
    /// Stage-1 detection failed; the previous frame's box was translated by
    /// the crop offset and reused.
    RegionFallback { region: Region, reason: String },
    /// Stage-2 assignment failed; the region's keypoints were left unassigned.
    AssignFallback {
        region: Option<Region>,
        reason: String,
    },
    /// Stage-3 reconciliation fell back to keeping the lower-region claim.
    ReconcileFallback { reason: String },
}

/// Outcome of one staged view: partial assignments plus any issues hit.
#[derive(Debug, Clone, Default)]
pub struct StageOutcome {
    pub region_boxes: BTreeMap<Region, Rect>,
    pub partial: BTreeMap<Keypoint, Option<usize>>,
    pub issues: Vec<StageIssue>,
}

fn image_attachment(observation: &FrameObservation) -> AttachmentRef {
    let path = observation.image_ref.clone().unwrap_or_else(|| {
        PathBuf::from(format!(
            "synthetic://frame{:06}/{}",
            observation.frame_index, observation.view
        ))
    });
    AttachmentRef::Image(path)
}

fn format_rect(rect: &Rect) -> String {
    format!(
        "({:.1},{:.1})-({:.1},{:.1})",
        rect.x0, rect.y0, rect.x1, rect.y1
    )
}

fn format_candidates(observation: &FrameObservation, indices: &[usize]) -> String {
    if indices.is_empty() {
        return "(none)".into();
    }
    indices
        .iter()
        .filter_map(|&i| observation.centroid(i).map(|p| (i, p)))
        .map(|(i, p)| format!("{i}: ({:.1},{:.1})", p.x, p.y))
        .collect::<Vec<_>>()
        .join("\n")
}

fn keypoint_list(keypoints: &[Keypoint]) -> String {
    keypoints
        .iter()
        .map(|k| k.name())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Stage 1: one bounding box per region for the given view, prompted with the
/// three rolling exemplars. A client failure degrades to the previous frame's
/// box translated by the crop offset.
pub fn detect_regions(
    observation: &FrameObservation,
    window: &RollingWindow,
    client: &PerceptionClient,
    max_retries: u32,
) -> Result<(BTreeMap<Region, Rect>, Vec<StageIssue>), PipelineError> {
    if !window.is_full() {
        return Err(PipelineError::InconsistentInput(
            "stage 1 needs a full rolling window".into(),
        ));
    }
    let view = &observation.view;
    let mut boxes = BTreeMap::new();
    let mut issues = Vec::new();

    for region in Region::ALL {
        let exemplar_boxes: Vec<String> = window
            .entries()
            .map(|entry| {
                let rect = entry
                    .region_boxes
                    .get(view)
                    .and_then(|m| m.get(&region))
                    .copied()
                    .unwrap_or_else(|| fallback_crop(entry, view));
                format!("frame {}: {}", entry.frame_index, format_rect(&rect))
            })
            .collect();
        let prompt = prompts::fill(
            prompts::REGION_DETECT,
            &[
                ("region", region.name().into()),
                ("keypoints", keypoint_list(region.keypoints())),
                ("exemplar_count", window.len().to_string()),
                ("color", prompts::region_color(region).into()),
                ("exemplar_boxes", exemplar_boxes.join("\n")),
                ("crop", format_rect(&observation.crop)),
            ],
        );
        let mut attachments: Vec<AttachmentRef> = window
            .entries()
            .filter_map(|e| e.observations.get(view).map(image_attachment))
            .collect();
        attachments.push(image_attachment(observation));

        let request = PerceptionRequest {
            task: TaskKind::RegionDetect,
            prompt,
            attachments,
            schema: ResponseSchema::RegionBox,
            max_retries,
            meta: RequestMeta {
                frame: Some(observation.frame_index),
                view: Some(view.clone()),
                region: Some(region),
                ..RequestMeta::default()
            },
        };

        match client.call(&request) {
            Ok(response) => {
                let raw_box = rect_from_payload(&response.payload);
                let clamped = raw_box.clamped_to(&observation.crop);
                if clamped != raw_box {
                    log::warn!(
                        "frame {} view {view} region {region}: predicted box {} clamped to crop",
                        observation.frame_index,
                        format_rect(&raw_box)
                    );
                }
                boxes.insert(region, clamped);
            }
            Err(err) => {
                let fallback = translated_previous_box(window, view, region, observation);
                issues.push(StageIssue::RegionFallback {
                    region,
                    reason: degrade_reason(&err),
                });
                boxes.insert(region, fallback);
            }
        }
    }
    Ok((boxes, issues))
}

fn fallback_crop(entry: &WindowEntry, view: &str) -> Rect {
    entry
        .observations
        .get(view)
        .map(|o| o.crop)
        .unwrap_or(Rect::new(0.0, 0.0, 0.0, 0.0))
}

/// Previous frame's region box, translated by the crop offset between the
/// frames and clamped to the current crop.
fn translated_previous_box(
    window: &RollingWindow,
    view: &str,
    region: Region,
    observation: &FrameObservation,
) -> Rect {
    let Some(latest) = window.latest() else {
        return observation.crop;
    };
    let previous_box = latest.region_boxes.get(view).and_then(|m| m.get(&region));
    let previous_crop = latest.observations.get(view).map(|o| o.crop);
    match (previous_box, previous_crop) {
        (Some(rect), Some(crop)) => {
            let dx = observation.crop.x0 - crop.x0;
            let dy = observation.crop.y0 - crop.y0;
            rect.translated(dx, dy).clamped_to(&observation.crop)
        }
        _ => observation.crop,
    }
}

fn rect_from_payload(payload: &Value) -> Rect {
    Rect::new(
        payload["x0"].as_f64().unwrap_or(0.0),
        payload["y0"].as_f64().unwrap_or(0.0),
        payload["x1"].as_f64().unwrap_or(0.0),
        payload["y1"].as_f64().unwrap_or(0.0),
    )
}

fn degrade_reason(err: &ClientError) -> String {
    match err {
        ClientError::Schema { attempts, violation, .. } => {
            format!("schema failure after {attempts} attempts: {violation}")
        }
        ClientError::Unavailable { reason, .. } => format!("client unavailable: {reason}"),
        ClientError::InvalidRequest(reason) => format!("invalid request: {reason}"),
    }
}

fn exemplar_assignment_text(
    window: &RollingWindow,
    view: &str,
    keypoints: &[Keypoint],
) -> String {
    window
        .entries()
        .map(|entry| {
            let line = match (entry.assignments.view(view), entry.observations.get(view)) {
                (Some(assignments), Some(obs)) => keypoints
                    .iter()
                    .map(|kp| match assignments.centroid_of(*kp) {
                        Some(idx) => match obs.centroid(idx) {
                            Some(p) => format!("{kp} -> {idx} at ({:.1},{:.1})", p.x, p.y),
                            None => format!("{kp} -> {idx}"),
                        },
                        None => format!("{kp} -> null"),
                    })
                    .collect::<Vec<_>>()
                    .join("; "),
                _ => "(no exemplar for this view)".into(),
            };
            format!("frame {}: {}", entry.frame_index, line)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Stage 2 for one region: assign the numbered centroids inside the region
/// box to the region's keypoints. An empty candidate set short-circuits to
/// all-unassigned without a client call; a client failure leaves the region
/// unassigned and flagged.
pub fn assign_within_region(
    region: Region,
    region_box: &Rect,
    observation: &FrameObservation,
    window: &RollingWindow,
    client: &PerceptionClient,
    max_retries: u32,
) -> (BTreeMap<Keypoint, Option<usize>>, Vec<StageIssue>) {
    let keypoints = region.keypoints();
    let mut result: BTreeMap<Keypoint, Option<usize>> =
        keypoints.iter().map(|kp| (*kp, None)).collect();

    let candidates: Vec<usize> = observation
        .centroids
        .iter()
        .enumerate()
        .filter(|(_, p)| region_box.contains_point(p))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return (result, Vec::new());
    }

    let prompt = prompts::fill(
        prompts::REGION_ASSIGN,
        &[
            ("region", region.name().into()),
            ("keypoints", keypoint_list(keypoints)),
            ("candidates", format_candidates(observation, &candidates)),
            ("exemplar_count", window.len().to_string()),
            (
                "exemplar_assignments",
                exemplar_assignment_text(window, &observation.view, keypoints),
            ),
        ],
    );
    let mut attachments: Vec<AttachmentRef> = window
        .entries()
        .filter_map(|e| e.observations.get(&observation.view).map(image_attachment))
        .collect();
    attachments.push(image_attachment(observation));

    let request = PerceptionRequest {
        task: TaskKind::RegionAssign,
        prompt,
        attachments,
        schema: ResponseSchema::Assignment {
            keypoints: keypoints.to_vec(),
            valid_indices: candidates,
        },
        max_retries,
        meta: RequestMeta {
            frame: Some(observation.frame_index),
            view: Some(observation.view.clone()),
            region: Some(region),
            ..RequestMeta::default()
        },
    };

    match client.call(&request) {
        Ok(response) => {
            apply_assignment_payload(&mut result, &response.payload);
            (result, Vec::new())
        }
        Err(err) => (
            result,
            vec![StageIssue::AssignFallback {
                region: Some(region),
                reason: degrade_reason(&err),
            }],
        ),
    }
}

/// The ablation variant without region decomposition: one call assigns all 12
/// keypoints over every centroid in the view.
pub fn naive_assign_view(
    observation: &FrameObservation,
    window: &RollingWindow,
    client: &PerceptionClient,
    max_retries: u32,
) -> (BTreeMap<Keypoint, Option<usize>>, Vec<StageIssue>) {
    let keypoints: Vec<Keypoint> = Keypoint::ALL.to_vec();
    let mut result: BTreeMap<Keypoint, Option<usize>> =
        keypoints.iter().map(|kp| (*kp, None)).collect();
    let candidates: Vec<usize> = (0..observation.centroids.len()).collect();
    if candidates.is_empty() {
        return (result, Vec::new());
    }

    let prompt = prompts::fill(
        prompts::REGION_ASSIGN,
        &[
            ("region", "whole-body".into()),
            ("keypoints", keypoint_list(&keypoints)),
            ("candidates", format_candidates(observation, &candidates)),
            ("exemplar_count", window.len().to_string()),
            (
                "exemplar_assignments",
                exemplar_assignment_text(window, &observation.view, &keypoints),
            ),
        ],
    );
    let mut attachments: Vec<AttachmentRef> = window
        .entries()
        .filter_map(|e| e.observations.get(&observation.view).map(image_attachment))
        .collect();
    attachments.push(image_attachment(observation));

    let request = PerceptionRequest {
        task: TaskKind::RegionAssign,
        prompt,
        attachments,
        schema: ResponseSchema::Assignment {
            keypoints: keypoints.clone(),
            valid_indices: candidates,
        },
        max_retries,
        meta: RequestMeta {
            frame: Some(observation.frame_index),
            view: Some(observation.view.clone()),
            region: None,
            ..RequestMeta::default()
        },
    };

    match client.call(&request) {
        Ok(response) => {
            apply_assignment_payload(&mut result, &response.payload);
            (result, Vec::new())
        }
        Err(err) => (
            result,
            vec![StageIssue::AssignFallback {
                region: None,
                reason: degrade_reason(&err),
            }],
        ),
    }
}

fn apply_assignment_payload(result: &mut BTreeMap<Keypoint, Option<usize>>, payload: &Value) {
    if let Some(assignments) = payload.get("assignments").and_then(Value::as_object) {
        for (name, value) in assignments {
            if let Some(kp) = Keypoint::from_name(name) {
                result.insert(kp, value.as_u64().map(|v| v as usize));
            }
        }
    }
}

/// Stage 3 for one view: merge the per-region partial assignments, resolving
/// conflicts and filling gaps through the client. Conflict-free stage-2
/// assignments are never reassigned. With no conflicts and no fillable gaps
/// the merge is the identity and the client is not invoked.
pub fn reconcile_view(
    observation: &FrameObservation,
    partial: &BTreeMap<Keypoint, Option<usize>>,
    stage2_issues: &[StageIssue],
    client: &PerceptionClient,
    max_retries: u32,
) -> (ViewAssignments, Vec<StageIssue>) {
    let mut issues = Vec::new();

    // Conflicts: centroids claimed by more than one keypoint.
    let mut claims: BTreeMap<usize, Vec<Keypoint>> = BTreeMap::new();
    for (kp, idx) in partial {
        if let Some(idx) = idx {
            claims.entry(*idx).or_default().push(*kp);
        }
    }
    let conflicts: BTreeMap<usize, Vec<Keypoint>> = claims
        .iter()
        .filter(|(_, kps)| kps.len() > 1)
        .map(|(i, kps)| (*i, kps.clone()))
        .collect();
    let conflicted_keypoints: BTreeSet<Keypoint> =
        conflicts.values().flatten().copied().collect();
    let unused: Vec<usize> = (0..observation.centroids.len())
        .filter(|i| !claims.contains_key(i))
        .collect();
    let gaps: Vec<Keypoint> = Keypoint::ALL
        .iter()
        .copied()
        .filter(|kp| partial.get(kp).copied().flatten().is_none())
        .collect();

    let needs_client = !conflicts.is_empty() || (!gaps.is_empty() && !unused.is_empty());
    let mut assignments = ViewAssignments::empty(Provenance::Stage2);

    if !needs_client {
        for (kp, idx) in partial {
            *assignments.entry_mut(*kp) = AssignmentEntry {
                centroid: *idx,
                provenance: Provenance::Stage2,
                flags: flags_for(*kp, stage2_issues),
            };
        }
        return (assignments, issues);
    }

    let response = client.call(&reconcile_request(observation, partial, &conflicts, &unused, max_retries));
    match response {
        Ok(response) => {
            // Start from the client's full map, then pin conflict-free
            // stage-2 assignments back in place.
            let mut merged: BTreeMap<Keypoint, Option<usize>> = Keypoint::ALL
                .iter()
                .map(|kp| (*kp, None))
                .collect();
            apply_assignment_payload(&mut merged, &response.payload);
            for (kp, idx) in partial {
                if idx.is_some() && !conflicted_keypoints.contains(kp) {
                    merged.insert(*kp, *idx);
                }
            }
            // Pinning may have re-introduced duplicates: the pinned keypoint
            // wins, later claimants are unassigned and flagged.
            let mut seen: BTreeMap<usize, Keypoint> = BTreeMap::new();
            for kp in Keypoint::ALL {
                let Some(idx) = merged[&kp] else { continue };
                let pinned = partial.get(&kp).copied().flatten() == Some(idx)
                    && !conflicted_keypoints.contains(&kp);
                match seen.get(&idx) {
                    None => {
                        seen.insert(idx, kp);
                    }
                    Some(&holder) => {
                        let holder_pinned = partial.get(&holder).copied().flatten() == Some(idx)
                            && !conflicted_keypoints.contains(&holder);
                        let evict = if pinned && !holder_pinned { holder } else { kp };
                        merged.insert(evict, None);
                        if evict == holder {
                            seen.insert(idx, kp);
                        }
                        let entry = assignments.entry_mut(evict);
                        entry.flags.insert(EntryFlag::ConflictUnassigned);
                    }
                }
            }
            for kp in Keypoint::ALL {
                let entry = assignments.entry_mut(kp);
                entry.centroid = merged[&kp];
                entry.provenance = if merged[&kp] == partial.get(&kp).copied().flatten() {
                    Provenance::Stage2
                } else {
                    Provenance::Stage3
                };
                for flag in flags_for(kp, stage2_issues) {
                    entry.flags.insert(flag);
                }
            }
            (assignments, issues)
        }
        Err(err) => {
            // Deterministic fallback: the claimant from the lower region
            // index (canonical keypoint order) keeps a conflicted centroid,
            // the others are unassigned and flagged. Gaps stay unfilled.
            issues.push(StageIssue::ReconcileFallback {
                reason: degrade_reason(&err),
            });
            let mut taken: BTreeSet<usize> = BTreeSet::new();
            for kp in Keypoint::ALL {
                let entry = assignments.entry_mut(kp);
                entry.provenance = Provenance::Stage3;
                entry.flags.insert(EntryFlag::SchemaFallback);
                for flag in flags_for(kp, stage2_issues) {
                    entry.flags.insert(flag);
                }
                match partial.get(&kp).copied().flatten() {
                    Some(idx) if !taken.contains(&idx) => {
                        taken.insert(idx);
                        entry.centroid = Some(idx);
                    }
                    Some(_) => {
                        entry.centroid = None;
                        entry.flags.insert(EntryFlag::ConflictUnassigned);
                    }
                    None => entry.centroid = None,
                }
            }
            (assignments, issues)
        }
    }
}

fn flags_for(kp: Keypoint, stage2_issues: &[StageIssue]) -> BTreeSet<EntryFlag> {
    let mut flags = BTreeSet::new();
    for issue in stage2_issues {
        match issue {
            StageIssue::RegionFallback { region, .. } if *region == kp.region() => {
                flags.insert(EntryFlag::DegradedRegion);
            }
            StageIssue::AssignFallback { region: Some(region), .. }
                if *region == kp.region() =>
            {
                flags.insert(EntryFlag::SchemaFallback);
            }
            StageIssue::AssignFallback { region: None, .. } => {
                flags.insert(EntryFlag::SchemaFallback);
            }
            _ => {}
        }
    }
    flags
}

fn reconcile_request(
    observation: &FrameObservation,
    partial: &BTreeMap<Keypoint, Option<usize>>,
    conflicts: &BTreeMap<usize, Vec<Keypoint>>,
    unused: &[usize],
    max_retries: u32,
) -> PerceptionRequest {
    let current: String = Keypoint::ALL
        .iter()
        .map(|kp| match partial.get(kp).copied().flatten() {
            Some(idx) => format!("{kp} -> {idx}"),
            None => format!("{kp} -> null"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    let conflict_text = if conflicts.is_empty() {
        "(none)".to_string()
    } else {
        conflicts
            .iter()
            .map(|(idx, kps)| {
                format!(
                    "centroid {idx} claimed by {}",
                    kps.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let all_indices: Vec<usize> = (0..observation.centroids.len()).collect();
    let prompt = prompts::fill(
        prompts::RECONCILE,
        &[
            ("current_assignments", current),
            ("conflicts", conflict_text),
            ("unused", format_candidates(observation, unused)),
            ("candidates", format_candidates(observation, &all_indices)),
            ("keypoints", keypoint_list(&Keypoint::ALL)),
        ],
    );
    PerceptionRequest {
        task: TaskKind::Reconcile,
        prompt,
        attachments: vec![image_attachment(observation)],
        schema: ResponseSchema::Assignment {
            keypoints: Keypoint::ALL.to_vec(),
            valid_indices: all_indices,
        },
        max_retries,
        meta: RequestMeta {
            frame: Some(observation.frame_index),
            view: Some(observation.view.clone()),
            region: None,
            ..RequestMeta::default()
        },
    }
}

/// Stage 3 across all views of a frame.
pub fn reconcile_frame(
    observations: &BTreeMap<String, FrameObservation>,
    partials: &BTreeMap<String, (BTreeMap<Keypoint, Option<usize>>, Vec<StageIssue>)>,
    client: &PerceptionClient,
    max_retries: u32,
    frame_index: u64,
) -> (AssignmentState, BTreeMap<String, Vec<StageIssue>>) {
    let mut state = AssignmentState::new(frame_index, &[], Provenance::Stage2);
    let mut all_issues: BTreeMap<String, Vec<StageIssue>> = BTreeMap::new();
    for (view, observation) in observations {
        let (partial, stage2_issues) = partials
            .get(view)
            .cloned()
            .unwrap_or_else(|| (Keypoint::ALL.iter().map(|k| (*k, None)).collect(), Vec::new()));
        let (assignments, mut issues) =
            reconcile_view(observation, &partial, &stage2_issues, client, max_retries);
        let mut merged_issues = stage2_issues;
        merged_issues.append(&mut issues);
        all_issues.insert(view.clone(), merged_issues);
        state.insert_view(view.clone(), assignments);
    }
    (state, all_issues)
}

/// Derives per-region boxes from labeled assignments (used for seed frames,
/// which carry labels but no stage-1 boxes): the bounding box of the region's
/// assigned centroids plus a fixed pad, clamped to the crop.
pub fn derive_region_boxes(
    observation: &FrameObservation,
    assignments: &ViewAssignments,
) -> BTreeMap<Region, Rect> {
    let mut boxes = BTreeMap::new();
    for region in Region::ALL {
        let pixels: Vec<&PixelPoint> = region
            .keypoints()
            .iter()
            .filter_map(|kp| assignments.centroid_of(*kp))
            .filter_map(|idx| observation.centroid(idx))
            .collect();
        let rect = if pixels.is_empty() {
            observation.crop
        } else {
            let min = |f: fn(&PixelPoint) -> f64| {
                pixels.iter().map(|p| f(p)).fold(f64::INFINITY, f64::min)
            };
            let max = |f: fn(&PixelPoint) -> f64| {
                pixels.iter().map(|p| f(p)).fold(f64::NEG_INFINITY, f64::max)
            };
            Rect::new(
                min(|p| p.x) - DERIVED_REGION_PAD,
                min(|p| p.y) - DERIVED_REGION_PAD,
                max(|p| p.x) + DERIVED_REGION_PAD,
                max(|p| p.y) + DERIVED_REGION_PAD,
            )
            .clamped_to(&observation.crop)
        };
        boxes.insert(region, rect);
    }
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{PerceptionClient, ScriptedBackend, UnavailableBackend};
    use crate::pipeline::compute_crop;

    fn observation(frame: u64, centroids: Vec<PixelPoint>) -> FrameObservation {
        let bbox = Rect::new(200.0, 200.0, 1000.0, 800.0);
        FrameObservation {
            frame_index: frame,
            view: "cam0".into(),
            crop: compute_crop(&bbox, (2048, 1400)).unwrap(),
            body_bbox: bbox,
            centroids,
            image_ref: None,
        }
    }

    fn window_with_boxes(frames: [u64; 3]) -> RollingWindow {
        let entries: Vec<WindowEntry> = frames
            .iter()
            .map(|&f| {
                let obs = observation(f, vec![PixelPoint::new(500.0, 500.0)]);
                let mut region_boxes = BTreeMap::new();
                let per_view: BTreeMap<Region, Rect> = Region::ALL
                    .iter()
                    .map(|r| (*r, Rect::new(400.0, 400.0, 600.0, 600.0)))
                    .collect();
                region_boxes.insert("cam0".to_string(), per_view);
                let mut observations = BTreeMap::new();
                observations.insert("cam0".to_string(), obs);
                WindowEntry {
                    frame_index: f,
                    observations,
                    region_boxes,
                    assignments: AssignmentState::new(f, &["cam0".to_string()], Provenance::Seed),
                }
            })
            .collect();
        RollingWindow::from_seeds(entries).unwrap()
    }

    #[test]
    fn detect_regions_clamps_out_of_crop_box() {
        let window = window_with_boxes([0, 1, 2]);
        let obs = observation(3, vec![PixelPoint::new(500.0, 500.0)]);
        // One valid response per region; the first is far outside the crop.
        let backend = ScriptedBackend::new(vec![
            r#"{"x0": -500.0, "y0": -500.0, "x1": 5000.0, "y1": 5000.0}"#,
            r#"{"x0": 400.0, "y0": 400.0, "x1": 600.0, "y1": 600.0}"#,
            r#"{"x0": 400.0, "y0": 400.0, "x1": 600.0, "y1": 600.0}"#,
            r#"{"x0": 400.0, "y0": 400.0, "x1": 600.0, "y1": 600.0}"#,
        ]);
        let client = PerceptionClient::new(Box::new(backend));
        let (boxes, issues) = detect_regions(&obs, &window, &client, 0).unwrap();
        assert!(issues.is_empty());
        assert_eq!(boxes[&Region::Ears], obs.crop);
        assert_eq!(boxes[&Region::Back], Rect::new(400.0, 400.0, 600.0, 600.0));
    }

    #[test]
    fn detect_regions_retries_then_succeeds() {
        let window = window_with_boxes([0, 1, 2]);
        let obs = observation(3, vec![PixelPoint::new(500.0, 500.0)]);
        let mut responses = vec!["garbage".to_string(), "more garbage".to_string()];
        responses.push(r#"{"x0": 400.0, "y0": 400.0, "x1": 600.0, "y1": 600.0}"#.into());
        for _ in 0..3 {
            responses.push(r#"{"x0": 410.0, "y0": 410.0, "x1": 610.0, "y1": 610.0}"#.into());
        }
        let backend = ScriptedBackend::new(responses);
        let client = PerceptionClient::new(Box::new(backend));
        let (boxes, issues) = detect_regions(&obs, &window, &client, 2).unwrap();
        assert!(issues.is_empty());
        assert_eq!(boxes.len(), 4);
    }

    #[test]
    fn detect_regions_falls_back_to_translated_previous_box() {
        let window = window_with_boxes([0, 1, 2]);
        // Current crop shifted right by 100 px relative to the window frames.
        let bbox = Rect::new(300.0, 200.0, 1100.0, 800.0);
        let obs = FrameObservation {
            frame_index: 3,
            view: "cam0".into(),
            crop: compute_crop(&bbox, (2048, 1400)).unwrap(),
            body_bbox: bbox,
            centroids: vec![PixelPoint::new(500.0, 500.0)],
            image_ref: None,
        };
        let client = PerceptionClient::new(Box::new(UnavailableBackend));
        let (boxes, issues) = detect_regions(&obs, &window, &client, 1).unwrap();
        assert_eq!(issues.len(), 4);
        // Previous box (400,400)-(600,600) translated by the crop-offset delta.
        let prev_crop = compute_crop(&Rect::new(200.0, 200.0, 1000.0, 800.0), (2048, 1400)).unwrap();
        let dx = obs.crop.x0 - prev_crop.x0;
        assert_eq!(
            boxes[&Region::Ears],
            Rect::new(400.0 + dx, 400.0, 600.0 + dx, 600.0).clamped_to(&obs.crop)
        );
    }

    #[test]
    fn assign_empty_region_box_short_circuits() {
        let window = window_with_boxes([0, 1, 2]);
        let obs = observation(3, vec![PixelPoint::new(500.0, 500.0)]);
        let backend = ScriptedBackend::new(Vec::<String>::new());
        let client = PerceptionClient::new(Box::new(backend));
        let empty_box = Rect::new(0.0, 0.0, 1.0, 1.0);
        let (partial, issues) =
            assign_within_region(Region::Ears, &empty_box, &obs, &window, &client, 2);
        assert!(issues.is_empty());
        assert!(partial.values().all(Option::is_none));
    }

    #[test]
    fn assign_duplicate_reply_is_retried() {
        let window = window_with_boxes([0, 1, 2]);
        let obs = observation(
            3,
            vec![PixelPoint::new(500.0, 500.0), PixelPoint::new(520.0, 500.0)],
        );
        let backend = ScriptedBackend::new(vec![
            r#"{"assignments": {"ear_L": 0, "ear_R": 0}}"#,
            r#"{"assignments": {"ear_L": 0, "ear_R": 1}}"#,
        ]);
        let client = PerceptionClient::new(Box::new(backend));
        let region_box = Rect::new(400.0, 400.0, 700.0, 700.0);
        let (partial, issues) =
            assign_within_region(Region::Ears, &region_box, &obs, &window, &client, 2);
        assert!(issues.is_empty());
        assert_eq!(partial[&Keypoint::EarL], Some(0));
        assert_eq!(partial[&Keypoint::EarR], Some(1));
    }

    #[test]
    fn reconcile_without_conflicts_skips_client() {
        let obs = observation(3, vec![PixelPoint::new(1.0, 1.0), PixelPoint::new(2.0, 2.0)]);
        let backend = ScriptedBackend::new(Vec::<String>::new());
        let client = PerceptionClient::new(Box::new(backend));
        let mut partial: BTreeMap<Keypoint, Option<usize>> =
            Keypoint::ALL.iter().map(|k| (*k, None)).collect();
        partial.insert(Keypoint::EarL, Some(0));
        partial.insert(Keypoint::EarR, Some(1));
        // All centroids used, so no fillable gap either.
        let (assignments, issues) = reconcile_view(&obs, &partial, &[], &client, 2);
        assert!(issues.is_empty());
        assert_eq!(assignments.centroid_of(Keypoint::EarL), Some(0));
        assert_eq!(assignments.entry(Keypoint::EarL).provenance, Provenance::Stage2);
    }

    #[test]
    fn reconcile_fallback_keeps_lower_region_claim() {
        let obs = observation(3, vec![PixelPoint::new(1.0, 1.0)]);
        let client = PerceptionClient::new(Box::new(UnavailableBackend));
        let mut partial: BTreeMap<Keypoint, Option<usize>> =
            Keypoint::ALL.iter().map(|k| (*k, None)).collect();
        // Ears (region 0) and tail (region 3) both claim centroid 0.
        partial.insert(Keypoint::EarR, Some(0));
        partial.insert(Keypoint::TailBase, Some(0));
        let (assignments, issues) = reconcile_view(&obs, &partial, &[], &client, 1);
        assert_eq!(issues.len(), 1);
        assert!(matches!(issues[0], StageIssue::ReconcileFallback { .. }));
        assert_eq!(assignments.centroid_of(Keypoint::EarR), Some(0));
        assert_eq!(assignments.centroid_of(Keypoint::TailBase), None);
        assert!(assignments
            .entry(Keypoint::TailBase)
            .flags
            .contains(&EntryFlag::ConflictUnassigned));
        assert!(assignments.is_injective());
    }

    #[test]
    fn reconcile_pins_conflict_free_assignments() {
        let obs = observation(
            3,
            vec![
                PixelPoint::new(1.0, 1.0),
                PixelPoint::new(2.0, 2.0),
                PixelPoint::new(3.0, 3.0),
            ],
        );
        // Client tries to move ear_L (conflict-free at 0) to 2 while
        // resolving the ear_R/tail_base conflict over 1.
        let backend = ScriptedBackend::new(vec![
            r#"{"assignments": {"ear_L": 2, "ear_R": 1, "back_top": null, "back_middle": null,
                 "back_bottom": null, "forepaw_L": null, "forepaw_R": null, "hindpaw_L": null,
                 "hindpaw_R": null, "tail_base": 0, "tail_middle": null, "tail_tip": null}}"#,
        ]);
        let client = PerceptionClient::new(Box::new(backend));
        let mut partial: BTreeMap<Keypoint, Option<usize>> =
            Keypoint::ALL.iter().map(|k| (*k, None)).collect();
        partial.insert(Keypoint::EarL, Some(0));
        partial.insert(Keypoint::EarR, Some(1));
        partial.insert(Keypoint::TailBase, Some(1));
        let (assignments, _) = reconcile_view(&obs, &partial, &[], &client, 1);
        // Conflict-free ear_L stays pinned at 0; tail_base wanted 0 but loses.
        assert_eq!(assignments.centroid_of(Keypoint::EarL), Some(0));
        assert_eq!(assignments.centroid_of(Keypoint::EarR), Some(1));
        assert_eq!(assignments.centroid_of(Keypoint::TailBase), None);
        assert!(assignments.is_injective());
    }
}
