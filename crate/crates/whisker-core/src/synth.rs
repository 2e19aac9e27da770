//! Ground-truth generator for desk-scale verification.
//!
//! Produces articulated 12-keypoint trajectories with fixed bone lengths, a
//! calibrated camera ring, rendered centroid observations with noise,
//! occlusion, and shuffled local indices, and synthetic behavioral feature
//! sessions with planted segments. Everything is reproducible bit-for-bit
//! from (config, seed); per-frame randomness is derived by hashing so frames
//! can be generated in parallel or resumed without shifting any stream.

use crate::dec::{ClipSegment, FeatureSequence};
use crate::geometry::{CameraModel, GeometryError, PixelPoint, WorldPoint};
use crate::keypoints::Keypoint;
use crate::pipeline::{compute_crop, FrameObservation, Rect};
use crate::{par, rng};
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Upper bound on per-frame keypoint displacement produced by the trajectory
/// generator, in millimeters. Tests hold the generator to this contract.
pub const VELOCITY_CAP_MM: f64 = 60.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonConfig {
    pub frames: usize,
    pub fps: f64,
    /// Radius of the roaming area for the body center, millimeters.
    pub roam_radius: f64,
    pub seed: u64,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        SkeletonConfig {
            frames: 500,
            fps: 30.0,
            roam_radius: 240.0,
            seed: 0,
        }
    }
}

/// Band-limited scalar signal: a few seeded sinusoids with amplitudes summing
/// to 1 and frequencies at or below `f_max`.
struct SmoothSignal {
    terms: Vec<(f64, f64, f64)>, // (amplitude, frequency_hz, phase)
}

impl SmoothSignal {
    fn new(rng: &mut impl Rng, f_max: f64) -> Self {
        let n = 4;
        let mut amps: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = amps.iter().sum();
        for a in &mut amps {
            *a /= total;
        }
        let terms = amps
            .into_iter()
            .map(|a| {
                (
                    a,
                    rng.random_range(0.05..f_max),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        SmoothSignal { terms }
    }

    /// Value in [-1, 1] at time `t` seconds.
    fn at(&self, t: f64) -> f64 {
        self.terms
            .iter()
            .map(|(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin())
            .sum()
    }
}

/// Body plan constants, millimeters. Offsets rotate with the heading and the
/// articulation angles, so every bone length is constant by construction.
mod plan {
    pub const BACK_MIDDLE_HEIGHT: f64 = 36.0;
    pub const SPINE_HALF: f64 = 26.0;
    pub const BACK_TOP_RISE: f64 = 6.0;
    pub const BACK_BOTTOM_DROP: f64 = 4.0;
    pub const HEAD_REACH: f64 = 16.0;
    pub const HEAD_RISE: f64 = 6.0;
    pub const EAR_SPREAD: f64 = 11.0;
    pub const EAR_RISE: f64 = 3.0;
    pub const FOREPAW_SPREAD: f64 = 12.0;
    pub const FOREPAW_DROP: f64 = 34.0;
    pub const HINDPAW_SPREAD: f64 = 13.0;
    pub const HINDPAW_DROP: f64 = 28.0;
    pub const TAIL_BASE_REACH: f64 = 10.0;
    pub const TAIL_BASE_DROP: f64 = 10.0;
    pub const TAIL_MID_REACH: f64 = 30.0;
    pub const TAIL_MID_DROP: f64 = 8.0;
    pub const TAIL_TIP_REACH: f64 = 34.0;
    pub const TAIL_TIP_DROP: f64 = 6.0;
}

/// Skeleton edges whose lengths the generator keeps constant.
pub fn bone_edges() -> Vec<(Keypoint, Keypoint)> {
    use Keypoint::*;
    vec![
        (BackMiddle, BackTop),
        (BackMiddle, BackBottom),
        (BackTop, EarL),
        (BackTop, EarR),
        (BackTop, ForepawL),
        (BackTop, ForepawR),
        (BackBottom, HindpawL),
        (BackBottom, HindpawR),
        (BackBottom, TailBase),
        (TailBase, TailMiddle),
        (TailMiddle, TailTip),
    ]
}

fn dir(angle: f64) -> (f64, f64) {
    (angle.cos(), angle.sin())
}

fn offset(base: WorldPoint, reach: f64, angle: f64, dz: f64) -> WorldPoint {
    let (dx, dy) = dir(angle);
    WorldPoint::new(base.x + reach * dx, base.y + reach * dy, base.z + dz)
}

/// Smooth articulated trajectory for the 12 keypoints: a band-limited random
/// walk of the body center and heading, with jointed offsets for head, paws,
/// and tail. Deterministic per seed.
pub fn generate_skeleton_trajectory(config: &SkeletonConfig) -> Vec<[WorldPoint; 12]> {
    assert!(config.frames >= 1, "need at least one frame");
    let mut rng = rng::derive(config.seed, &[rng::hash_str("skeleton")]);
    let pos_x = SmoothSignal::new(&mut rng, 0.25);
    let pos_y = SmoothSignal::new(&mut rng, 0.25);
    let heading = SmoothSignal::new(&mut rng, 0.20);
    let bend = SmoothSignal::new(&mut rng, 0.45);
    let swing_fore = SmoothSignal::new(&mut rng, 0.9);
    let swing_hind = SmoothSignal::new(&mut rng, 0.9);
    let tail_first = SmoothSignal::new(&mut rng, 0.5);
    let tail_second = SmoothSignal::new(&mut rng, 0.5);

    (0..config.frames)
        .map(|frame| {
            let t = frame as f64 / config.fps;
            let root_x = config.roam_radius * pos_x.at(t);
            let root_y = config.roam_radius * pos_y.at(t);
            let theta = std::f64::consts::PI * heading.at(t);
            let b = 0.35 * bend.at(t);

            let back_middle = WorldPoint::new(root_x, root_y, plan::BACK_MIDDLE_HEIGHT);
            let back_top = offset(back_middle, plan::SPINE_HALF, theta + b, plan::BACK_TOP_RISE);
            let back_bottom = offset(
                back_middle,
                plan::SPINE_HALF,
                theta - b + std::f64::consts::PI,
                -plan::BACK_BOTTOM_DROP,
            );
            let head = offset(back_top, plan::HEAD_REACH, theta + 2.0 * b, plan::HEAD_RISE);
            let half_pi = std::f64::consts::FRAC_PI_2;
            let ear_l = offset(head, plan::EAR_SPREAD, theta + 2.0 * b + half_pi, plan::EAR_RISE);
            let ear_r = offset(head, plan::EAR_SPREAD, theta + 2.0 * b - half_pi, plan::EAR_RISE);
            let sf = 0.6 * swing_fore.at(t);
            let forepaw_l = offset(
                back_top,
                plan::FOREPAW_SPREAD,
                theta + b + half_pi + sf,
                -plan::FOREPAW_DROP,
            );
            let forepaw_r = offset(
                back_top,
                plan::FOREPAW_SPREAD,
                theta + b - half_pi - sf,
                -plan::FOREPAW_DROP,
            );
            let sh = 0.6 * swing_hind.at(t);
            let hindpaw_l = offset(
                back_bottom,
                plan::HINDPAW_SPREAD,
                theta - b + half_pi + sh,
                -plan::HINDPAW_DROP,
            );
            let hindpaw_r = offset(
                back_bottom,
                plan::HINDPAW_SPREAD,
                theta - b - half_pi - sh,
                -plan::HINDPAW_DROP,
            );
            let tail_dir = theta + std::f64::consts::PI;
            let tail_base = offset(
                back_bottom,
                plan::TAIL_BASE_REACH,
                tail_dir - b,
                -plan::TAIL_BASE_DROP,
            );
            let psi1 = 0.5 * tail_first.at(t);
            let tail_middle = offset(
                tail_base,
                plan::TAIL_MID_REACH,
                tail_dir + psi1,
                -plan::TAIL_MID_DROP,
            );
            let psi2 = 0.5 * tail_second.at(t);
            let tail_tip = offset(
                tail_middle,
                plan::TAIL_TIP_REACH,
                tail_dir + psi1 + psi2,
                -plan::TAIL_TIP_DROP,
            );

            // Canonical keypoint order.
            [
                ear_l, ear_r, back_top, back_middle, back_bottom, forepaw_l, forepaw_r,
                hindpaw_l, hindpaw_r, tail_base, tail_middle, tail_tip,
            ]
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigConfig {
    pub n_cameras: usize,
    /// Radius of the camera ring, millimeters.
    pub ring_radius: f64,
    /// Camera height above the arena floor, millimeters.
    pub height: f64,
    pub focal_px: f64,
    pub image_size: (u32, u32),
    pub seed: u64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            n_cameras: 6,
            ring_radius: 900.0,
            height: 650.0,
            focal_px: 1500.0,
            image_size: (2048, 1400),
            seed: 0,
        }
    }
}

/// Cameras ringed around the arena, all aimed at its center. Position and
/// focal length carry small seeded perturbations so the rig is never exactly
/// symmetric.
pub fn generate_rig(config: &RigConfig) -> Result<Vec<CameraModel>, SynthError> {
    if config.n_cameras < 2 {
        return Err(SynthError::InvalidConfig(format!(
            "need at least 2 cameras, got {}",
            config.n_cameras
        )));
    }
    let mut cameras = Vec::with_capacity(config.n_cameras);
    for i in 0..config.n_cameras {
        let mut rng = rng::derive(config.seed, &[rng::hash_str("rig"), i as u64]);
        let angle = std::f64::consts::TAU * i as f64 / config.n_cameras as f64
            + rng.random_range(-0.03..0.03);
        let radius = config.ring_radius * rng.random_range(0.98..1.02);
        let position = Vector3::new(
            radius * angle.cos(),
            radius * angle.sin(),
            config.height * rng.random_range(0.97..1.03),
        );
        let target = Vector3::new(0.0, 0.0, 30.0);

        let z = (target - position).normalize();
        let up = Vector3::new(0.0, 0.0, 1.0);
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -rotation * position;

        let f = config.focal_px * rng.random_range(0.97..1.03);
        let k = Matrix3::new(
            f,
            0.0,
            f64::from(config.image_size.0) / 2.0,
            0.0,
            f,
            f64::from(config.image_size.1) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        cameras.push(CameraModel::new(
            format!("cam{i}"),
            k,
            rotation,
            translation,
            config.image_size,
        )?);
    }
    Ok(cameras)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Gaussian pixel noise applied to each rendered centroid.
    pub sigma_px: f64,
    /// Independent per keypoint-view dropout probability.
    pub occlusion_rate: f64,
    /// Assign randomized local indices instead of canonical order.
    pub shuffle_indices: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            sigma_px: 1.0,
            occlusion_rate: 0.0,
            shuffle_indices: true,
            seed: 0,
        }
    }
}

/// One rendered frame: per-view observations plus the hidden ground truth
/// mapping each visible keypoint to its local centroid index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedFrame {
    pub frame_index: u64,
    pub observations: BTreeMap<String, FrameObservation>,
    pub truth: BTreeMap<String, BTreeMap<Keypoint, usize>>,
}

const BBOX_MARGIN_PX: f64 = 10.0;

/// Projects the trajectory into every camera, applying noise, occlusion, and
/// index shuffling. Frames are independent given the seed and render in
/// parallel under the `parallel` feature.
pub fn render_observations(
    trajectory: &[[WorldPoint; 12]],
    rig: &[CameraModel],
    config: &RenderConfig,
) -> Result<Vec<RenderedFrame>, SynthError> {
    if !(0.0..=1.0).contains(&config.occlusion_rate) {
        return Err(SynthError::InvalidConfig(
            "occlusion_rate must lie in [0, 1]".into(),
        ));
    }
    if config.sigma_px < 0.0 {
        return Err(SynthError::InvalidConfig("sigma_px must be >= 0".into()));
    }

    let frames: Vec<RenderedFrame> = par::map_range(trajectory.len(), |frame| {
        render_frame(frame as u64, &trajectory[frame], rig, config)
    });
    Ok(frames)
}

fn render_frame(
    frame_index: u64,
    pose: &[WorldPoint; 12],
    rig: &[CameraModel],
    config: &RenderConfig,
) -> RenderedFrame {
    let mut observations = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for camera in rig {
        let mut rng = rng::derive(
            config.seed,
            &[rng::hash_str("render"), frame_index, rng::hash_str(camera.name())],
        );
        let normal = Normal::new(0.0, config.sigma_px.max(f64::MIN_POSITIVE)).unwrap();
        let bounds = Rect::of_image(camera.image_size());

        let mut visible: Vec<(Keypoint, PixelPoint)> = Vec::new();
        for (i, kp) in Keypoint::ALL.iter().enumerate() {
            // Fixed draw schedule per keypoint keeps the stream stable no
            // matter which branches are taken.
            let occluded: bool = rng.random::<f64>() < config.occlusion_rate;
            let nx = normal.sample(&mut rng);
            let ny = normal.sample(&mut rng);
            let Ok(projected) = camera.project(&pose[i]) else {
                continue;
            };
            if !bounds.contains_point(&projected) || occluded {
                continue;
            }
            let noisy = if config.sigma_px > 0.0 {
                PixelPoint::new(projected.x + nx, projected.y + ny)
            } else {
                projected
            };
            visible.push((*kp, noisy));
        }

        let body_bbox = if visible.is_empty() {
            // Fully occluded view: nominal crop at the image center.
            let (w, h) = camera.image_size();
            let (cx, cy) = (f64::from(w) / 2.0, f64::from(h) / 2.0);
            Rect::new(cx - 50.0, cy - 50.0, cx + 50.0, cy + 50.0)
        } else {
            let xs: Vec<f64> = visible.iter().map(|(_, p)| p.x).collect();
            let ys: Vec<f64> = visible.iter().map(|(_, p)| p.y).collect();
            let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Rect::new(
                min(&xs) - BBOX_MARGIN_PX,
                min(&ys) - BBOX_MARGIN_PX,
                max(&xs) + BBOX_MARGIN_PX,
                max(&ys) + BBOX_MARGIN_PX,
            )
            .clamped_to(&bounds)
        };
        let crop = compute_crop(&body_bbox, camera.image_size()).expect("non-empty bbox");

        let mut indices: Vec<usize> = (0..visible.len()).collect();
        if config.shuffle_indices {
            indices.shuffle(&mut rng);
        }
        let mut centroids = vec![PixelPoint::new(0.0, 0.0); visible.len()];
        let mut view_truth = BTreeMap::new();
        for (slot, (kp, pixel)) in indices.iter().zip(visible.iter()) {
            centroids[*slot] = *pixel;
            view_truth.insert(*kp, *slot);
        }

        observations.insert(
            camera.name().to_string(),
            FrameObservation {
                frame_index,
                view: camera.name().to_string(),
                body_bbox,
                crop,
                centroids,
                image_ref: None,
            },
        );
        truth.insert(camera.name().to_string(), view_truth);
    }
    RenderedFrame {
        frame_index,
        observations,
        truth,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSessionConfig {
    pub n_animals: usize,
    pub frames: usize,
    pub fps: f64,
    pub dims: usize,
    pub n_behaviors: usize,
    /// Per-dimension Gaussian noise around each behavior's blob center.
    pub noise: f64,
    /// Scale of the blob centers; chosen so that moderate noise still
    /// separates behaviors cleanly.
    pub separation: f64,
    pub min_segment_s: f64,
    pub max_segment_s: f64,
    pub seed: u64,
}

impl Default for FeatureSessionConfig {
    fn default() -> Self {
        FeatureSessionConfig {
            n_animals: 3,
            frames: 600,
            fps: 10.0,
            dims: 16,
            n_behaviors: 5,
            noise: 1.0,
            separation: 6.0,
            min_segment_s: 1.0,
            max_segment_s: 5.0,
            seed: 0,
        }
    }
}

/// Plants per-animal behavior segments that partition `[0, frames)`, with
/// durations in `[min_segment_s, max_segment_s]` and consecutive segments in
/// different behaviors.
pub fn plant_segments(config: &FeatureSessionConfig) -> Vec<ClipSegment> {
    let mut planted = Vec::new();
    let min_frames = ((config.min_segment_s * config.fps).round() as usize).max(1);
    let max_frames = ((config.max_segment_s * config.fps).round() as usize).max(min_frames);
    for animal in 0..config.n_animals {
        let mut rng = rng::derive(config.seed, &[rng::hash_str("plant"), animal as u64]);
        let name = format!("animal{animal}");
        let mut cursor = 0;
        let mut previous = usize::MAX;
        while cursor < config.frames {
            let mut len = rng.random_range(min_frames..=max_frames);
            let remaining = config.frames - cursor;
            if remaining < len + min_frames {
                len = remaining;
            }
            let mut behavior = rng.random_range(0..config.n_behaviors);
            if config.n_behaviors > 1 {
                while behavior == previous {
                    behavior = rng.random_range(0..config.n_behaviors);
                }
            }
            planted.push(ClipSegment::new(
                &name,
                cursor,
                cursor + len,
                behavior,
                config.fps,
            ));
            previous = behavior;
            cursor += len;
        }
    }
    planted
}

/// A full synthetic behavior session: feature sequences plus the planted
/// ground-truth segments that produced them.
#[derive(Debug, Clone)]
pub struct FeatureSession {
    pub sequences: Vec<FeatureSequence>,
    pub planted: Vec<ClipSegment>,
}

/// Generates Gaussian-blob features for planted segments: each behavior is a
/// blob center in `dims` dimensions, frames sample center plus noise.
pub fn generate_feature_session(config: &FeatureSessionConfig) -> Result<FeatureSession, SynthError> {
    if config.n_animals == 0 || config.frames == 0 || config.dims == 0 || config.n_behaviors == 0 {
        return Err(SynthError::InvalidConfig(
            "animals, frames, dims, and behaviors must all be positive".into(),
        ));
    }
    let planted = plant_segments(config);

    let mut centers_rng = rng::derive(config.seed, &[rng::hash_str("centers")]);
    let centers: Vec<Vec<f64>> = (0..config.n_behaviors)
        .map(|_| {
            (0..config.dims)
                .map(|_| config.separation * centers_rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();

    let mut sequences = Vec::with_capacity(config.n_animals);
    for animal in 0..config.n_animals {
        let name = format!("animal{animal}");
        let mut rng = rng::derive(config.seed, &[rng::hash_str("features"), animal as u64]);
        let normal = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).unwrap();
        let mut flat = vec![0.0f64; config.frames * config.dims];
        for seg in planted.iter().filter(|s| s.animal == name) {
            for frame in seg.start_frame..seg.end_frame {
                for d in 0..config.dims {
                    let noise = if config.noise > 0.0 {
                        normal.sample(&mut rng)
                    } else {
                        let _ = normal.sample(&mut rng);
                        0.0
                    };
                    flat[frame * config.dims + d] = centers[seg.cluster][d] + noise;
                }
            }
        }
        sequences.push(FeatureSequence {
            animal: name,
            fps: config.fps,
            features: Array2::from_shape_vec((config.frames, config.dims), flat)
                .expect("rectangular feature matrix"),
        });
    }
    Ok(FeatureSession { sequences, planted })
}
