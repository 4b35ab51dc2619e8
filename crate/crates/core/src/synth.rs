//! Closed-form synthetic gait with analytically known heel strikes.
//!
//! World frame: `x` lateral (left positive), `y` up, `z` along the walking
//! direction. The pelvis advances at `step_length · cadence / 60` m/s. Each
//! ankle's forward offset from the pelvis is
//! `(step_length / 2) · sin(2π f t + φ)` with stride frequency
//! `f = cadence / 120` Hz and `φ = 0` (right) or `π` (left). Knees come from
//! two-bone inverse kinematics so thigh and shank are exactly
//! `leg_segment_m` long in every frame. A heel strike is a maximum of that
//! forward offset.
//!
//! The camera looks along world `+x` from the walker's right, so the walk
//! crosses the image left to right.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{
    CameraModel, Dims, Frame, Keypoint, PoseSequence, SkeletonError, SkeletonTopology,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid gait parameter: {0}")]
    Param(String),
    #[error(
        "frame {frame}: {side:?} ankle is {distance:.4} m from the hip, beyond reach {reach:.4} m"
    )]
    Unreachable {
        frame: usize,
        side: Side,
        distance: f64,
        reach: f64,
    },
    #[error("noise sigma must be finite and >= 0, got {0}")]
    Sigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn phase(self) -> f64 {
        match self {
            Side::Right => 0.0,
            Side::Left => PI,
        }
    }

    fn lateral(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitParams {
    pub duration_s: f64,
    pub fps: f64,
    pub cadence_steps_per_min: f64,
    pub step_length_m: f64,
    /// Thigh and shank length (equal).
    pub leg_segment_m: f64,
    pub pelvis_height_m: f64,
    pub lateral_sway_amp_m: f64,
    pub noise_seed: u64,
}

impl Default for GaitParams {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            fps: 60.0,
            cadence_steps_per_min: 120.0,
            step_length_m: 0.7,
            leg_segment_m: 0.45,
            pelvis_height_m: 0.8,
            lateral_sway_amp_m: 0.02,
            noise_seed: 0,
        }
    }
}

impl GaitParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let finite = [
            self.duration_s,
            self.fps,
            self.cadence_steps_per_min,
            self.step_length_m,
            self.leg_segment_m,
            self.pelvis_height_m,
            self.lateral_sway_amp_m,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(SynthError::Param("all parameters must be finite".into()));
        }
        let positive = [
            ("duration_s", self.duration_s),
            ("leg_segment_m", self.leg_segment_m),
            ("pelvis_height_m", self.pelvis_height_m),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(SynthError::Param(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("step_length_m", self.step_length_m),
            ("lateral_sway_amp_m", self.lateral_sway_amp_m),
        ] {
            if v < 0.0 {
                return Err(SynthError::Param(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.fps < 1.0 {
            return Err(SynthError::Param(format!(
                "fps must be >= 1, got {}",
                self.fps
            )));
        }
        if !(20.0..=240.0).contains(&self.cadence_steps_per_min) {
            return Err(SynthError::Param(format!(
                "cadence must lie in [20, 240] steps/min, got {}",
                self.cadence_steps_per_min
            )));
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    /// Stride frequency in Hz (one stride = two steps).
    pub fn stride_hz(&self) -> f64 {
        self.cadence_steps_per_min / 120.0
    }

    pub fn speed_mps(&self) -> f64 {
        self.step_length_m * self.cadence_steps_per_min / 60.0
    }

    fn ankle_offset(&self, side: Side, t: f64) -> f64 {
        0.5 * self.step_length_m * (2.0 * PI * self.stride_hz() * t + side.phase()).sin()
    }

    /// Knee interior angle in degrees at time `t`, straight from the IK
    /// triangle: `cos θ = 1 − d² / (2 L²)`.
    pub fn knee_angle_deg(&self, side: Side, t: f64) -> f64 {
        let d = self.ankle_offset(side, t).hypot(self.pelvis_height_m);
        let l = self.leg_segment_m;
        (1.0 - d * d / (2.0 * l * l))
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees()
    }

    /// Analytic heel-strike times for one side, restricted to strikes at
    /// least one frame inside the sampled interval.
    pub fn heel_strike_times(&self, side: Side) -> Vec<f64> {
        let f = self.stride_hz();
        let first = if side == Side::Right { 0.25 } else { 0.75 };
        let lo = 1.0 / self.fps;
        let hi = (self.n_frames() as f64 - 2.0) / self.fps;
        if self.step_length_m == 0.0 {
            return Vec::new();
        }
        (0..)
            .map(|k| (first + k as f64) / f)
            .take_while(|&t| t <= hi)
            .filter(|&t| t >= lo)
            .collect()
    }
}

/// Extrinsic placement of the synthetic camera plus its intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    /// Distance from the walking line along world `x`.
    pub distance_m: f64,
    pub height_m: f64,
    pub intrinsics: CameraModel,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            distance_m: 8.0,
            height_m: 1.0,
            intrinsics: CameraModel::new(1500.0, 1500.0, 1920.0, 1080.0, 3840, 2160)
                .expect("valid intrinsics"),
        }
    }
}

impl CameraRig {
    /// World point to camera frame (`x` right, `y` down, `z` forward).
    pub fn to_camera(&self, w: [f64; 3]) -> [f64; 3] {
        [w[2], self.height_m - w[1], w[0] + self.distance_m]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub heel_strikes_right: Vec<f64>,
    pub heel_strikes_left: Vec<f64>,
    pub cadence_steps_per_min: f64,
    pub step_length_m: f64,
    /// Clean pose in world coordinates, one entry per frame.
    #[serde(skip)]
    pub world_frames: Vec<Frame>,
}

impl GroundTruth {
    /// Both sides merged in time order.
    pub fn all_strikes(&self) -> Vec<(f64, Side)> {
        let mut all: Vec<_> = self
            .heel_strikes_right
            .iter()
            .map(|&t| (t, Side::Right))
            .chain(self.heel_strikes_left.iter().map(|&t| (t, Side::Left)))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        all
    }
}

// Upper-body offsets from the pelvis centre, world frame, (joint, x, y, z).
const RIGID: [(usize, f64, f64, f64); 11] = [
    (0, 0.0, 0.72, 0.10),
    (1, 0.035, 0.76, 0.08),
    (2, -0.035, 0.76, 0.08),
    (3, 0.075, 0.74, 0.0),
    (4, -0.075, 0.74, 0.0),
    (5, 0.18, 0.50, 0.0),
    (6, -0.18, 0.50, 0.0),
    (7, 0.20, 0.22, 0.0),
    (8, -0.20, 0.22, 0.0),
    (9, 0.20, -0.03, 0.05),
    (10, -0.20, -0.03, 0.05),
];
const HIP_HALF_WIDTH: f64 = 0.1;

fn leg_joints(side: Side) -> (usize, usize, usize) {
    match side {
        Side::Left => (11, 13, 15),
        Side::Right => (12, 14, 16),
    }
}

pub fn generate(p: &GaitParams) -> Result<(PoseSequence, GroundTruth), SynthError> {
    generate_with(p, &CameraRig::default())
}

/// Generates the camera-frame 3D sequence and its ground truth.
pub fn generate_with(
    p: &GaitParams,
    rig: &CameraRig,
) -> Result<(PoseSequence, GroundTruth), SynthError> {
    p.validate()?;
    let n = p.n_frames();
    let v = p.speed_mps();
    let z_start = -0.5 * v * p.duration_s;
    let l = p.leg_segment_m;

    let mut world_frames = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / p.fps;
        let sway = p.lateral_sway_amp_m * (2.0 * PI * p.stride_hz() * t).sin();
        let pelvis = [sway, p.pelvis_height_m, z_start + v * t];
        let mut frame = vec![Keypoint::default(); 17];
        for &(j, dx, dy, dz) in &RIGID {
            frame[j] = Keypoint::new3(pelvis[0] + dx, pelvis[1] + dy, pelvis[2] + dz, 1.0);
        }
        for side in [Side::Left, Side::Right] {
            let (hip_j, knee_j, ankle_j) = leg_joints(side);
            let hip = [
                pelvis[0] + side.lateral() * HIP_HALF_WIDTH,
                pelvis[1],
                pelvis[2],
            ];
            let ankle = [hip[0], 0.0, pelvis[2] + p.ankle_offset(side, t)];
            let (dy, dz) = (ankle[1] - hip[1], ankle[2] - hip[2]);
            let d = dy.hypot(dz);
            if d > 2.0 * l {
                return Err(SynthError::Unreachable {
                    frame: i,
                    side,
                    distance: d,
                    reach: 2.0 * l,
                });
            }
            // Perpendicular to hip->ankle in the sagittal plane, pointing forward.
            let h = (l * l - 0.25 * d * d).max(0.0).sqrt();
            let (ny, nz) = (dz / d, -dy / d);
            let knee = [
                hip[0],
                hip[1] + 0.5 * dy + h * ny,
                hip[2] + 0.5 * dz + h * nz,
            ];
            frame[hip_j] = Keypoint::new3(hip[0], hip[1], hip[2], 1.0);
            frame[knee_j] = Keypoint::new3(knee[0], knee[1], knee[2], 1.0);
            frame[ankle_j] = Keypoint::new3(ankle[0], ankle[1], ankle[2], 1.0);
        }
        world_frames.push(frame);
    }

    let frames = world_frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|k| Keypoint {
                    coords: rig.to_camera(k.coords),
                    confidence: k.confidence,
                })
                .collect()
        })
        .collect();
    let seq = PoseSequence::new(SkeletonTopology::coco17(), Dims::Three, p.fps, frames);
    let truth = GroundTruth {
        heel_strikes_right: p.heel_strike_times(Side::Right),
        heel_strikes_left: p.heel_strike_times(Side::Left),
        cadence_steps_per_min: p.cadence_steps_per_min,
        step_length_m: p.step_length_m,
        world_frames,
    };
    Ok((seq, truth))
}

/// Adds i.i.d. Gaussian noise to every coordinate and redraws confidences
/// uniformly from `[0.5, 1]`. `sigma == 0` returns the input untouched.
pub fn add_noise(seq: &PoseSequence, sigma: f64, seed: u64) -> Result<PoseSequence, SynthError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SynthError::Sigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|_| SynthError::Sigma(sigma))?;
    let d = seq.dims.count();
    let mut out = seq.clone();
    for frame in &mut out.frames {
        for k in frame.iter_mut() {
            for c in k.coords.iter_mut().take(d) {
                *c += normal.sample(&mut rng);
            }
            k.confidence = rng.random_range(0.5..=1.0);
        }
    }
    Ok(out)
}

/// Projects every joint of a camera-frame 3D sequence. Missing joints
/// (confidence 0 at the origin) stay missing.
pub fn project_sequence(
    seq: &PoseSequence,
    cam: &CameraModel,
) -> Result<PoseSequence, SkeletonError> {
    seq.require_dims(Dims::Three)?;
    let mut frames = Vec::with_capacity(seq.len());
    for (t, frame) in seq.frames.iter().enumerate() {
        let mut out = Vec::with_capacity(frame.len());
        for (j, k) in frame.iter().enumerate() {
            if k.confidence == 0.0 && k.coords == [0.0; 3] {
                out.push(Keypoint::missing());
                continue;
            }
            let [u, v] = cam.project(k.coords).map_err(|e| match e {
                SkeletonError::NonPositiveDepth { depth, .. } => SkeletonError::NonPositiveDepth {
                    depth,
                    frame: Some(t),
                    joint: Some(j),
                },
                other => other,
            })?;
            out.push(Keypoint::new2(u, v, k.confidence));
        }
        frames.push(out);
    }
    Ok(PoseSequence::new(
        seq.topology.clone(),
        Dims::Two,
        seq.fps,
        frames,
    ))
}
