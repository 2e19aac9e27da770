//! Deterministic oracle backend: answers perception requests from ground-truth
//! tables, with seeded corruption to emulate an imperfect model.
//!
//! Corruption model: assignment requests swap a random pair of the keypoints
//! visible to the same request at rate `p_swap` and drop assignments at rate
//! `p_drop`; region boxes are jittered by up to `box_jitter_px`. The swap
//! partner is drawn from the request's own keypoint set, so full-frame
//! requests can confuse keypoints across regions while region-cropped
//! requests only swap within the region.
//!
//! Per-call randomness is derived by hashing (seed, frame, view, task,
//! region), so corruption patterns are reproducible and independent of call
//! order, parallelism, and resumption.

use super::{BackendQuery, ChatBackend, ClientError, TaskKind};
use crate::keypoints::Keypoint;
use crate::pipeline::{FrameObservation, Rect};
use crate::rng;
use rand::Rng;
use serde_json::{json, Value};
use std::collections::BTreeMap;

/// Padding around ground-truth region boxes, pixels.
pub const REGION_BOX_PAD: f64 = 12.0;

#[derive(Debug, Clone)]
pub struct CorruptionSpec {
    /// Probability that one keypoint pair in an assignment request is swapped.
    pub p_swap: f64,
    /// Uniform jitter amplitude applied to region-box edges, pixels.
    pub box_jitter_px: f64,
    /// Per-keypoint dropout probability in assignment requests.
    pub p_drop: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            p_swap: 0.0,
            box_jitter_px: 0.0,
            p_drop: 0.0,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), ClientError> {
        for (name, rate) in [("p_swap", self.p_swap), ("p_drop", self.p_drop)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(ClientError::InvalidRequest(format!(
                    "corruption rate {name} must lie in [0, 1], got {rate}"
                )));
            }
        }
        if self.box_jitter_px < 0.0 {
            return Err(ClientError::InvalidRequest(
                "box_jitter_px must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth the oracle answers from.
#[derive(Debug, Clone, Default)]
pub struct OracleTables {
    /// Per (frame, view): true keypoint-to-centroid-index mapping.
    pub truth: BTreeMap<(u64, String), BTreeMap<Keypoint, usize>>,
    /// Per (frame, view): the observation whose centroid pixels back the
    /// truth indices.
    pub observations: BTreeMap<(u64, String), FrameObservation>,
    /// Scripted caption per clip id.
    pub captions: BTreeMap<usize, (String, String)>,
    /// Planted merge-group id per clip id.
    pub clip_groups: BTreeMap<usize, usize>,
    /// Label and description per merge-group id.
    pub group_labels: BTreeMap<usize, (String, String)>,
}

impl OracleTables {
    pub fn from_rendered(frames: &[crate::synth::RenderedFrame]) -> Self {
        let mut tables = OracleTables::default();
        for frame in frames {
            for (view, obs) in &frame.observations {
                tables
                    .observations
                    .insert((frame.frame_index, view.clone()), obs.clone());
            }
            for (view, truth) in &frame.truth {
                tables
                    .truth
                    .insert((frame.frame_index, view.clone()), truth.clone());
            }
        }
        tables
    }
}

/// A label swap the oracle injected into one assignment reply, journaled so
/// corruption studies can measure downstream correction rates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct InjectedSwap {
    pub frame: u64,
    pub view: String,
    /// Region whose swap decision fired.
    pub group: crate::keypoints::Region,
    pub a: Keypoint,
    pub b: Keypoint,
    /// True centroid indices of `a` and `b` before the swap.
    pub true_a: usize,
    pub true_b: usize,
}

pub struct OracleBackend {
    tables: OracleTables,
    corruption: CorruptionSpec,
    journal: std::sync::Mutex<Vec<InjectedSwap>>,
}

impl OracleBackend {
    pub fn new(tables: OracleTables, corruption: CorruptionSpec) -> Result<Self, ClientError> {
        corruption.validate()?;
        Ok(OracleBackend {
            tables,
            corruption,
            journal: std::sync::Mutex::new(Vec::new()),
        })
    }

    /// Swaps injected so far, sorted for stable iteration regardless of call
    /// scheduling.
    pub fn injected_swaps(&self) -> Vec<InjectedSwap> {
        let mut swaps = self.journal.lock().expect("journal lock").clone();
        swaps.sort();
        swaps
    }

    fn context<'q>(&self, query: &'q BackendQuery<'_>) -> Result<(u64, &'q str), ClientError> {
        let frame = query.meta.frame.ok_or_else(|| ClientError::Unavailable {
            reason: "oracle backend needs meta.frame".into(),
            raw: None,
        })?;
        let view = query
            .meta
            .view
            .as_deref()
            .ok_or_else(|| ClientError::Unavailable {
                reason: "oracle backend needs meta.view".into(),
                raw: None,
            })?;
        Ok((frame, view))
    }

    fn truth_for(
        &self,
        frame: u64,
        view: &str,
    ) -> Result<(&BTreeMap<Keypoint, usize>, &FrameObservation), ClientError> {
        let key = (frame, view.to_string());
        let truth = self
            .tables
            .truth
            .get(&key)
            .ok_or_else(|| ClientError::Unavailable {
                reason: format!("oracle has no truth for frame {frame} view {view}"),
                raw: None,
            })?;
        let obs = self
            .tables
            .observations
            .get(&key)
            .ok_or_else(|| ClientError::Unavailable {
                reason: format!("oracle has no observation for frame {frame} view {view}"),
                raw: None,
            })?;
        Ok((truth, obs))
    }

    fn region_detect(&self, query: &BackendQuery<'_>) -> Result<String, ClientError> {
        let (frame, view) = self.context(query)?;
        let region = query.meta.region.ok_or_else(|| ClientError::Unavailable {
            reason: "region-detect needs meta.region".into(),
            raw: None,
        })?;
        let (truth, obs) = self.truth_for(frame, view)?;

        let pixels: Vec<&crate::geometry::PixelPoint> = region
            .keypoints()
            .iter()
            .filter_map(|kp| truth.get(kp))
            .filter_map(|&idx| obs.centroid(idx))
            .collect();
        let mut rect = if pixels.is_empty() {
            obs.crop
        } else {
            let min = |f: fn(&crate::geometry::PixelPoint) -> f64| {
                pixels.iter().map(|p| f(p)).fold(f64::INFINITY, f64::min)
            };
            let max = |f: fn(&crate::geometry::PixelPoint) -> f64| {
                pixels.iter().map(|p| f(p)).fold(f64::NEG_INFINITY, f64::max)
            };
            Rect::new(
                min(|p| p.x) - REGION_BOX_PAD,
                min(|p| p.y) - REGION_BOX_PAD,
                max(|p| p.x) + REGION_BOX_PAD,
                max(|p| p.y) + REGION_BOX_PAD,
            )
            .clamped_to(&obs.crop)
        };

        if self.corruption.box_jitter_px > 0.0 {
            let a = self.corruption.box_jitter_px;
            let mut rng = rng::derive(
                self.corruption.seed,
                &[
                    rng::hash_str("jitter"),
                    frame,
                    rng::hash_str(view),
                    region.index() as u64,
                ],
            );
            let jittered = Rect::new(
                rect.x0 + rng.random_range(-a..a),
                rect.y0 + rng.random_range(-a..a),
                rect.x1 + rng.random_range(-a..a),
                rect.y1 + rng.random_range(-a..a),
            );
            rect = Rect::new(
                jittered.x0.min(jittered.x1),
                jittered.y0.min(jittered.y1),
                jittered.x0.max(jittered.x1),
                jittered.y0.max(jittered.y1),
            )
            .clamped_to(&obs.crop);
        }

        Ok(json!({"x0": rect.x0, "y0": rect.y0, "x1": rect.x1, "y1": rect.y1}).to_string())
    }

    fn assignment(&self, query: &BackendQuery<'_>, corrupt: bool) -> Result<String, ClientError> {
        let (frame, view) = self.context(query)?;
        let (truth, _) = self.truth_for(frame, view)?;

        let (keypoints, valid_indices) = requested_assignment_shape(query)?;
        let mut values: BTreeMap<Keypoint, Option<usize>> = keypoints
            .iter()
            .map(|kp| {
                let idx = truth.get(kp).copied().filter(|i| valid_indices.contains(i));
                (*kp, idx)
            })
            .collect();

        if corrupt {
            // One swap decision per anatomical region represented in the
            // request, so the error rate per region is the same whether the
            // request covers one region crop or the whole frame. The swap
            // partner is drawn from the request's full keypoint set: in a
            // region crop that keeps confusions within the region, while a
            // full-frame request can confuse keypoints across regions.
            let regions: Vec<crate::keypoints::Region> = {
                let mut seen = Vec::new();
                for kp in keypoints {
                    if !seen.contains(&kp.region()) {
                        seen.push(kp.region());
                    }
                }
                seen
            };
            for group in regions {
                let mut rng = rng::derive(
                    self.corruption.seed,
                    &[
                        rng::hash_str("assign"),
                        frame,
                        rng::hash_str(view),
                        group.index() as u64,
                    ],
                );
                if rng.random::<f64>() < self.corruption.p_swap {
                    let in_group: Vec<Keypoint> = keypoints
                        .iter()
                        .copied()
                        .filter(|kp| kp.region() == group && values[kp].is_some())
                        .collect();
                    let assigned: Vec<Keypoint> = keypoints
                        .iter()
                        .copied()
                        .filter(|kp| values[kp].is_some())
                        .collect();
                    if !in_group.is_empty() && assigned.len() >= 2 {
                        let a = in_group[rng.random_range(0..in_group.len())];
                        let partners: Vec<Keypoint> =
                            assigned.into_iter().filter(|kp| *kp != a).collect();
                        let b = partners[rng.random_range(0..partners.len())];
                        let va = values[&a];
                        let vb = values[&b];
                        values.insert(a, vb);
                        values.insert(b, va);
                        if let (Some(idx_a), Some(idx_b)) = (va, vb) {
                            self.journal.lock().expect("journal lock").push(InjectedSwap {
                                frame,
                                view: view.to_string(),
                                group,
                                a,
                                b,
                                true_a: idx_a,
                                true_b: idx_b,
                            });
                        }
                    }
                }
                if self.corruption.p_drop > 0.0 {
                    for kp in keypoints.iter().filter(|kp| kp.region() == group) {
                        if rng.random::<f64>() < self.corruption.p_drop {
                            values.insert(*kp, None);
                        }
                    }
                }
            }
        }

        let assignments: serde_json::Map<String, Value> = values
            .iter()
            .map(|(kp, idx)| {
                (
                    kp.name().to_string(),
                    idx.map(|i| json!(i)).unwrap_or(Value::Null),
                )
            })
            .collect();
        Ok(json!({ "assignments": assignments }).to_string())
    }

    fn caption(&self, query: &BackendQuery<'_>) -> Result<String, ClientError> {
        let clip = query.meta.clip.ok_or_else(|| ClientError::Unavailable {
            reason: "caption needs meta.clip".into(),
            raw: None,
        })?;
        let (label, description) =
            self.tables
                .captions
                .get(&clip)
                .ok_or_else(|| ClientError::Unavailable {
                    reason: format!("oracle has no scripted caption for clip {clip}"),
                    raw: None,
                })?;
        Ok(json!({"label": label, "description": description}).to_string())
    }

    fn merge(&self, query: &BackendQuery<'_>) -> Result<String, ClientError> {
        let clip_ids = query
            .meta
            .clip_ids
            .as_ref()
            .ok_or_else(|| ClientError::Unavailable {
                reason: "merge needs meta.clip_ids".into(),
                raw: None,
            })?;
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new(); // (group id, positions)
        for (position, clip_id) in clip_ids.iter().enumerate() {
            let group = *self
                .tables
                .clip_groups
                .get(clip_id)
                .ok_or_else(|| ClientError::Unavailable {
                    reason: format!("oracle has no planted group for clip {clip_id}"),
                    raw: None,
                })?;
            match groups.last_mut() {
                Some((g, positions)) if *g == group => positions.push(position),
                _ => groups.push((group, vec![position])),
            }
        }
        let rendered: Vec<Value> = groups
            .into_iter()
            .map(|(group, positions)| {
                let (label, description) = self
                    .tables
                    .group_labels
                    .get(&group)
                    .cloned()
                    .unwrap_or_else(|| (format!("behavior {group}"), format!("group {group}")));
                json!({"clips": positions, "label": label, "description": description})
            })
            .collect();
        Ok(json!({ "groups": rendered }).to_string())
    }
}

fn requested_assignment_shape<'q>(
    query: &'q BackendQuery<'_>,
) -> Result<(&'q [Keypoint], &'q [usize]), ClientError> {
    match query.schema {
        super::ResponseSchema::Assignment {
            keypoints,
            valid_indices,
        } => Ok((keypoints, valid_indices)),
        _ => Err(ClientError::Unavailable {
            reason: "assignment task carries a non-assignment schema".into(),
            raw: None,
        }),
    }
}

impl ChatBackend for OracleBackend {
    fn complete(&self, query: &BackendQuery<'_>) -> Result<String, ClientError> {
        match query.task {
            TaskKind::RegionDetect => self.region_detect(query),
            TaskKind::RegionAssign => self.assignment(query, true),
            TaskKind::Reconcile => self.assignment(query, false),
            TaskKind::Caption => self.caption(query),
            TaskKind::Merge => self.merge(query),
        }
    }

    fn name(&self) -> &'static str {
        "oracle"
    }
}
