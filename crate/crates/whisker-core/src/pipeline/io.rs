//! Line-oriented file formats for the pose pipeline.
//!
//! Inputs:
//! - centroids.csv: `frame,view,index,x,y` — per-view candidate centroids,
//!   indices 0..n-1 per (frame, view).
//! - bboxes.csv: `frame,view,x0,y0,x1,y1` — upstream body bounding boxes.
//! - seeds.json: `{"version": 1, "seeds": [{"frame": 0, "views": {"cam0":
//!   {"ear_L": 3, ...}}}]}` — the three labeled seed frames.
//! - gt_assignments.csv / gt_trajectory.csv: simulator ground truth (same
//!   column layout as the outputs below).
//!
//! Outputs are rendered by [`super::RunOutput`]; feature/segment tables for
//! the behavior pipeline are here too.

use super::{compute_crop, FrameObservation, PipelineError, Rect};
use crate::dec::{ClipSegment, FeatureSequence};
use crate::geometry::{PixelPoint, WorldPoint};
use crate::keypoints::Keypoint;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedFile {
    pub version: u32,
    pub seeds: Vec<SeedFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedFrame {
    pub frame: u64,
    pub views: BTreeMap<String, BTreeMap<Keypoint, Option<usize>>>,
}

pub fn write_seed_file(path: &Path, seeds: &SeedFile) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(seeds)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_seed_file(path: &Path) -> Result<SeedFile, PipelineError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Per-frame, per-view centroid lists.
pub type CentroidTable = BTreeMap<u64, BTreeMap<String, Vec<PixelPoint>>>;
/// Per-frame, per-view body bounding boxes.
pub type BBoxTable = BTreeMap<u64, BTreeMap<String, Rect>>;

pub fn write_centroids(path: &Path, table: &CentroidTable) -> Result<(), PipelineError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["frame", "view", "index", "x", "y"])?;
    for (frame, views) in table {
        for (view, centroids) in views {
            for (index, point) in centroids.iter().enumerate() {
                writer.write_record([
                    frame.to_string(),
                    view.clone(),
                    index.to_string(),
                    point.x.to_string(),
                    point.y.to_string(),
                ])?;
            }
        }
    }
    writer.flush().map_err(std::io::Error::from)?;
    Ok(())
}

pub fn read_centroids(path: &Path) -> Result<CentroidTable, PipelineError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut table: CentroidTable = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize, what: &str| -> Result<f64, PipelineError> {
            record
                .get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PipelineError::InconsistentInput(format!("centroids.csv: bad {what}")))
        };
        let frame = parse(0, "frame")? as u64;
        let view = record
            .get(1)
            .ok_or_else(|| PipelineError::InconsistentInput("centroids.csv: missing view".into()))?
            .to_string();
        let index = parse(2, "index")? as usize;
        let point = PixelPoint::new(parse(3, "x")?, parse(4, "y")?);
        let list = table.entry(frame).or_default().entry(view).or_default();
        if list.len() != index {
            return Err(PipelineError::InconsistentInput(format!(
                "centroids.csv: frame {frame}: indices must run 0..n-1 in order, got {index} at position {}",
                list.len()
            )));
        }
        list.push(point);
    }
    Ok(table)
}

pub fn write_bboxes(path: &Path, table: &BBoxTable) -> Result<(), PipelineError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["frame", "view", "x0", "y0", "x1", "y1"])?;
    for (frame, views) in table {
        for (view, rect) in views {
            writer.write_record([
                frame.to_string(),
                view.clone(),
                rect.x0.to_string(),
                rect.y0.to_string(),
                rect.x1.to_string(),
                rect.y1.to_string(),
            ])?;
        }
    }
    writer.flush().map_err(std::io::Error::from)?;
    Ok(())
}

pub fn read_bboxes(path: &Path) -> Result<BBoxTable, PipelineError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut table: BBoxTable = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| -> Result<f64, PipelineError> {
            record
                .get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PipelineError::InconsistentInput("bboxes.csv: bad number".into()))
        };
        let frame = parse(0)? as u64;
        let view = record
            .get(1)
            .ok_or_else(|| PipelineError::InconsistentInput("bboxes.csv: missing view".into()))?
            .to_string();
        let rect = Rect::new(parse(2)?, parse(3)?, parse(4)?, parse(5)?);
        table.entry(frame).or_default().insert(view, rect);
    }
    Ok(table)
}

/// Ground-truth assignments: per frame, per view, keypoint to centroid index.
pub type TruthTable = BTreeMap<u64, BTreeMap<String, BTreeMap<Keypoint, usize>>>;

pub fn write_truth(path: &Path, table: &TruthTable) -> Result<(), PipelineError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["frame", "view", "keypoint", "centroid"])?;
    for (frame, views) in table {
        for (view, truth) in views {
            for (kp, idx) in truth {
                writer.write_record([
                    frame.to_string(),
                    view.clone(),
                    kp.name().to_string(),
                    idx.to_string(),
                ])?;
            }
        }
    }
    writer.flush().map_err(std::io::Error::from)?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<TruthTable, PipelineError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut table: TruthTable = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let frame: u64 = record
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| PipelineError::InconsistentInput("gt_assignments: bad frame".into()))?;
        let view = record.get(1).unwrap_or_default().to_string();
        let kp = record
            .get(2)
            .and_then(Keypoint::from_name)
            .ok_or_else(|| PipelineError::InconsistentInput("gt_assignments: bad keypoint".into()))?;
        let idx: usize = record
            .get(3)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| PipelineError::InconsistentInput("gt_assignments: bad index".into()))?;
        table
            .entry(frame)
            .or_default()
            .entry(view)
            .or_default()
            .insert(kp, idx);
    }
    Ok(table)
}

pub fn write_gt_trajectory(path: &Path, trajectory: &[[WorldPoint; 12]]) -> Result<(), PipelineError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["frame", "keypoint", "x", "y", "z"])?;
    for (frame, pose) in trajectory.iter().enumerate() {
        for kp in Keypoint::ALL {
            let p = pose[kp.index()];
            writer.write_record([
                frame.to_string(),
                kp.name().to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.z.to_string(),
            ])?;
        }
    }
    writer.flush().map_err(std::io::Error::from)?;
    Ok(())
}

pub fn read_gt_trajectory(path: &Path) -> Result<Vec<[WorldPoint; 12]>, PipelineError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut by_frame: BTreeMap<u64, [WorldPoint; 12]> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let bad = || PipelineError::InconsistentInput("gt_trajectory: bad record".into());
        let frame: u64 = record.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let kp = record.get(1).and_then(Keypoint::from_name).ok_or_else(bad)?;
        let x: f64 = record.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let y: f64 = record.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let z: f64 = record.get(4).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        by_frame.entry(frame).or_insert([WorldPoint::new(0.0, 0.0, 0.0); 12])[kp.index()] =
            WorldPoint::new(x, y, z);
    }
    Ok(by_frame.into_values().collect())
}

/// Assembles per-frame observations from centroid and bbox tables. Every
/// (frame, view) in the centroid table must carry a bbox.
pub fn build_frames(
    centroids: &CentroidTable,
    bboxes: &BBoxTable,
    image_sizes: &BTreeMap<String, (u32, u32)>,
) -> Result<Vec<BTreeMap<String, FrameObservation>>, PipelineError> {
    let mut frames = Vec::with_capacity(centroids.len());
    for (frame, views) in centroids {
        let mut per_view = BTreeMap::new();
        for (view, points) in views {
            let bbox = bboxes
                .get(frame)
                .and_then(|m| m.get(view))
                .copied()
                .ok_or_else(|| {
                    PipelineError::InconsistentInput(format!(
                        "no bbox for frame {frame} view {view}"
                    ))
                })?;
            let image_size = image_sizes.get(view).copied().ok_or_else(|| {
                PipelineError::InconsistentInput(format!("no camera for view {view}"))
            })?;
            let observation = FrameObservation {
                frame_index: *frame,
                view: view.clone(),
                crop: compute_crop(&bbox, image_size)?,
                body_bbox: bbox,
                centroids: points.clone(),
                image_ref: None,
            };
            observation.validate()?;
            per_view.insert(view.clone(), observation);
        }
        frames.push(per_view);
    }
    Ok(frames)
}

/// Feature matrix file: `animal,fps,frame,f0..f{D-1}`, one row per frame,
/// each animal's rows contiguous and frame-ordered.
pub fn write_features(path: &Path, sequences: &[FeatureSequence]) -> Result<(), PipelineError> {
    let dims = sequences.first().map_or(0, FeatureSequence::dims);
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["animal".to_string(), "fps".to_string(), "frame".to_string()];
    header.extend((0..dims).map(|d| format!("f{d}")));
    writer.write_record(&header)?;
    for seq in sequences {
        for (frame, row) in seq.features.outer_iter().enumerate() {
            let mut record = vec![seq.animal.clone(), seq.fps.to_string(), frame.to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            writer.write_record(&record)?;
        }
    }
    writer.flush().map_err(std::io::Error::from)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureSequence>, PipelineError> {
    let mut reader = csv::Reader::from_path(path)?;
    let dims = reader.headers()?.len().saturating_sub(3);
    if dims == 0 {
        return Err(PipelineError::InconsistentInput(
            "features file has no feature columns".into(),
        ));
    }
    let mut order: Vec<String> = Vec::new();
    let mut data: BTreeMap<String, (f64, Vec<f64>)> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let bad = |what: &str| PipelineError::InconsistentInput(format!("features file: bad {what}"));
        let animal = record.get(0).ok_or_else(|| bad("animal"))?.to_string();
        let fps: f64 = record
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("fps"))?;
        if !data.contains_key(&animal) {
            order.push(animal.clone());
        }
        let entry = data.entry(animal).or_insert((fps, Vec::new()));
        for d in 0..dims {
            let v: f64 = record
                .get(3 + d)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("feature value"))?;
            entry.1.push(v);
        }
    }
    order
        .into_iter()
        .map(|animal| {
            let (fps, flat) = data.remove(&animal).expect("animal present");
            let frames = flat.len() / dims;
            let features = Array2::from_shape_vec((frames, dims), flat)
                .map_err(|e| PipelineError::InconsistentInput(format!("ragged features: {e}")))?;
            let seq = FeatureSequence { animal, fps, features };
            seq.validate()
                .map_err(|e| PipelineError::InconsistentInput(e.to_string()))?;
            Ok(seq)
        })
        .collect()
}

pub fn write_segments(path: &Path, segments: &[ClipSegment]) -> Result<(), PipelineError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["animal", "start_frame", "end_frame", "cluster", "duration_s"])?;
    for seg in segments {
        writer.write_record([
            seg.animal.clone(),
            seg.start_frame.to_string(),
            seg.end_frame.to_string(),
            seg.cluster.to_string(),
            seg.duration_s.to_string(),
        ])?;
    }
    writer.flush().map_err(std::io::Error::from)?;
    Ok(())
}

pub fn read_segments(path: &Path) -> Result<Vec<ClipSegment>, PipelineError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let bad = || PipelineError::InconsistentInput("segments file: bad record".into());
        out.push(ClipSegment {
            animal: record.get(0).ok_or_else(bad)?.to_string(),
            start_frame: record.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            end_frame: record.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            cluster: record.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            duration_s: record.get(4).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn centroid_and_bbox_tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rig = synth::generate_rig(&synth::RigConfig::default()).unwrap();
        let traj = synth::generate_skeleton_trajectory(&synth::SkeletonConfig {
            frames: 4,
            ..synth::SkeletonConfig::default()
        });
        let rendered =
            synth::render_observations(&traj, &rig, &synth::RenderConfig::default()).unwrap();

        let mut centroids: CentroidTable = BTreeMap::new();
        let mut bboxes: BBoxTable = BTreeMap::new();
        for frame in &rendered {
            for (view, obs) in &frame.observations {
                centroids
                    .entry(frame.frame_index)
                    .or_default()
                    .insert(view.clone(), obs.centroids.clone());
                bboxes
                    .entry(frame.frame_index)
                    .or_default()
                    .insert(view.clone(), obs.body_bbox);
            }
        }
        let cpath = dir.path().join("centroids.csv");
        let bpath = dir.path().join("bboxes.csv");
        write_centroids(&cpath, &centroids).unwrap();
        write_bboxes(&bpath, &bboxes).unwrap();
        assert_eq!(read_centroids(&cpath).unwrap(), centroids);
        let read_b = read_bboxes(&bpath).unwrap();
        assert_eq!(read_b, bboxes);

        let sizes: BTreeMap<String, (u32, u32)> = rig
            .iter()
            .map(|c| (c.name().to_string(), c.image_size()))
            .collect();
        let frames = build_frames(&centroids, &bboxes, &sizes).unwrap();
        assert_eq!(frames.len(), 4);
        for (frame, rendered_frame) in frames.iter().zip(&rendered) {
            for (view, obs) in frame {
                assert_eq!(obs.centroids, rendered_frame.observations[view].centroids);
                assert_eq!(obs.crop, rendered_frame.observations[view].crop);
            }
        }
    }

    #[test]
    fn out_of_order_centroid_indices_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("centroids.csv");
        std::fs::write(
            &path,
            "frame,view,index,x,y\n0,cam0,1,10.0,10.0\n0,cam0,0,20.0,20.0\n",
        )
        .unwrap();
        assert!(read_centroids(&path).is_err());
    }

    #[test]
    fn seed_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seeds.json");
        let mut views = BTreeMap::new();
        let mut assignments: BTreeMap<Keypoint, Option<usize>> =
            Keypoint::ALL.iter().map(|k| (*k, None)).collect();
        assignments.insert(Keypoint::EarL, Some(4));
        views.insert("cam0".to_string(), assignments);
        let file = SeedFile {
            version: 1,
            seeds: vec![SeedFrame { frame: 0, views }],
        };
        write_seed_file(&path, &file).unwrap();
        let read = read_seed_file(&path).unwrap();
        assert_eq!(read.seeds.len(), 1);
        assert_eq!(read.seeds[0].views["cam0"][&Keypoint::EarL], Some(4));
    }

    #[test]
    fn features_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        let session = synth::generate_feature_session(&synth::FeatureSessionConfig {
            frames: 30,
            n_animals: 2,
            dims: 4,
            ..synth::FeatureSessionConfig::default()
        })
        .unwrap();
        write_features(&path, &session.sequences).unwrap();
        let read = read_features(&path).unwrap();
        assert_eq!(read.len(), 2);
        for (a, b) in read.iter().zip(&session.sequences) {
            assert_eq!(a.animal, b.animal);
            assert_eq!(a.fps, b.fps);
            assert_eq!(a.features, b.features);
        }
    }

    #[test]
    fn segments_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("segments.csv");
        let segments = vec![
            ClipSegment::new("a0", 0, 30, 2, 10.0),
            ClipSegment::new("a0", 30, 45, 0, 10.0),
        ];
        write_segments(&path, &segments).unwrap();
        assert_eq!(read_segments(&path).unwrap(), segments);
    }
}
