//! Skeleton topologies, keypoint sequences and pinhole projection.
//!
//! Conventions used throughout the crate:
//! image coordinates have their origin at the top-left corner with `u` to the
//! right and `v` downward, in pixels. The 3D camera frame has `x` right, `y`
//! down and `z` forward, in meters. A missing or occluded joint is stored with
//! confidence `0.0` and zero coordinates so every frame stays rectangular.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("topology: {0}")]
    Topology(String),
    #[error("camera: {0}")]
    Camera(String),
    #[error("non-positive depth z={depth} at frame {frame:?}, joint {joint:?}")]
    NonPositiveDepth {
        depth: f64,
        frame: Option<usize>,
        joint: Option<usize>,
    },
    #[error("expected a {expected}D sequence, got {actual}D")]
    Dims { expected: u8, actual: u8 },
}

/// COCO-17 keypoint names, in model output order.
pub const COCO17_JOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

const COCO17_BONES: [(usize, usize); 16] = [
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

const COCO17_PARENTS: [Option<usize>; 17] = [
    None,
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(11),
    Some(12),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    None,
    Some(11),
    Some(11),
    Some(12),
    Some(13),
    Some(14),
];

/// Named joints plus the bones connecting them.
///
/// Serialized as `{name, joints, parents, bones}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyDoc", into = "TopologyDoc")]
pub struct SkeletonTopology {
    name: String,
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    bones: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct TopologyDoc {
    name: String,
    joints: Vec<String>,
    #[serde(default)]
    parents: Option<Vec<Option<usize>>>,
    #[serde(default)]
    bones: Vec<[usize; 2]>,
}

impl TryFrom<TopologyDoc> for SkeletonTopology {
    type Error = SkeletonError;

    fn try_from(doc: TopologyDoc) -> Result<Self, Self::Error> {
        let n = doc.joints.len();
        let parents = doc.parents.unwrap_or_else(|| vec![None; n]);
        SkeletonTopology::new(
            doc.name,
            doc.joints,
            parents,
            doc.bones.into_iter().map(|[a, b]| (a, b)).collect(),
        )
    }
}

impl From<SkeletonTopology> for TopologyDoc {
    fn from(t: SkeletonTopology) -> Self {
        TopologyDoc {
            name: t.name,
            joints: t.joint_names,
            parents: Some(t.parents),
            bones: t.bones.into_iter().map(|(a, b)| [a, b]).collect(),
        }
    }
}

impl SkeletonTopology {
    /// Builds a skeleton, checking joint count, bone indices, self-loops and
    /// duplicate bones.
    pub fn new(
        name: impl Into<String>,
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        bones: Vec<(usize, usize)>,
    ) -> Result<Self, SkeletonError> {
        let n = joint_names.len();
        if n < 2 {
            return Err(SkeletonError::Topology(format!(
                "a skeleton needs at least 2 joints, got {n}"
            )));
        }
        Self::check_links(n, &parents, &bones)?;
        Ok(Self {
            name: name.into(),
            joint_names,
            parents,
            bones,
        })
    }

    /// A bone-less set of `n >= 1` anonymous points.
    ///
    /// Used when a pose file names a topology that is not registered locally;
    /// joints are named `j0`, `j1`, ...
    pub fn point_set(name: impl Into<String>, n: usize) -> Result<Self, SkeletonError> {
        if n == 0 {
            return Err(SkeletonError::Topology(
                "point set needs at least one joint".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            joint_names: (0..n).map(|i| format!("j{i}")).collect(),
            parents: vec![None; n],
            bones: Vec::new(),
        })
    }

    fn check_links(
        n: usize,
        parents: &[Option<usize>],
        bones: &[(usize, usize)],
    ) -> Result<(), SkeletonError> {
        if parents.len() != n {
            return Err(SkeletonError::Topology(format!(
                "{} parent entries for {n} joints",
                parents.len()
            )));
        }
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n || p == j {
                    return Err(SkeletonError::Topology(format!(
                        "joint {j} has invalid parent {p}"
                    )));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in bones {
            if a >= n || b >= n {
                return Err(SkeletonError::Topology(format!(
                    "bone ({a}, {b}) out of range for {n} joints"
                )));
            }
            if a == b {
                return Err(SkeletonError::Topology(format!(
                    "bone ({a}, {b}) is a self-loop"
                )));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(SkeletonError::Topology(format!(
                    "duplicate bone ({a}, {b})"
                )));
            }
        }
        Ok(())
    }

    pub fn coco17() -> Self {
        Self::new(
            "coco17",
            COCO17_JOINTS.iter().map(|s| s.to_string()).collect(),
            COCO17_PARENTS.to_vec(),
            COCO17_BONES.to_vec(),
        )
        .expect("built-in topology is valid")
    }

    /// Looks up a built-in topology by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "coco17" => Some(Self::coco17()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }
}

/// Spatial dimensionality of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dims {
    Two,
    Three,
}

impl Dims {
    pub fn count(self) -> usize {
        match self {
            Dims::Two => 2,
            Dims::Three => 3,
        }
    }
}

impl TryFrom<u8> for Dims {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            2 => Ok(Dims::Two),
            3 => Ok(Dims::Three),
            other => Err(format!("dims must be 2 or 3, got {other}")),
        }
    }
}

impl From<Dims> for u8 {
    fn from(d: Dims) -> u8 {
        d.count() as u8
    }
}

/// One estimated landmark. 2D keypoints keep `coords[2] == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub coords: [f64; 3],
    pub confidence: f64,
}

impl Keypoint {
    pub fn new2(u: f64, v: f64, confidence: f64) -> Self {
        Self {
            coords: [u, v, 0.0],
            confidence,
        }
    }

    pub fn new3(x: f64, y: f64, z: f64, confidence: f64) -> Self {
        Self {
            coords: [x, y, z],
            confidence,
        }
    }

    pub fn missing() -> Self {
        Self::default()
    }
}

pub type Frame = Vec<Keypoint>;

/// Keypoint frames sampled on a fixed clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub topology: SkeletonTopology,
    pub dims: Dims,
    pub fps: f64,
    pub frames: Vec<Frame>,
}

impl PoseSequence {
    pub fn new(topology: SkeletonTopology, dims: Dims, fps: f64, frames: Vec<Frame>) -> Self {
        Self {
            topology,
            dims,
            fps,
            frames,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.topology.joint_count()
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 / self.fps
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    /// The same sequence played backwards.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.frames.reverse();
        out
    }

    pub(crate) fn require_dims(&self, expected: Dims) -> Result<(), SkeletonError> {
        if self.dims != expected {
            return Err(SkeletonError::Dims {
                expected: expected.count() as u8,
                actual: self.dims.count() as u8,
            });
        }
        Ok(())
    }
}

/// Pinhole intrinsics, no distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraDoc")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct CameraDoc {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<CameraDoc> for CameraModel {
    type Error = SkeletonError;

    fn try_from(d: CameraDoc) -> Result<Self, SkeletonError> {
        CameraModel::new(d.fx, d.fy, d.cx, d.cy, d.width, d.height)
    }
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, SkeletonError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(SkeletonError::Camera(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(SkeletonError::Camera(
                "principal point must be finite".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(SkeletonError::Camera(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Projects a camera-frame point to pixels.
    pub fn project(&self, p: [f64; 3]) -> Result<[f64; 2], SkeletonError> {
        project(p, self)
    }
}

/// `u = fx·x/z + cx`, `v = fy·y/z + cy`.
pub fn project(p: [f64; 3], cam: &CameraModel) -> Result<[f64; 2], SkeletonError> {
    let [x, y, z] = p;
    if !(z > 0.0) {
        return Err(SkeletonError::NonPositiveDepth {
            depth: z,
            frame: None,
            joint: None,
        });
    }
    Ok([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
}

/// Axis-aligned detection box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl BoundingBox {
    /// Intersects the box with the image rectangle. Boxes fully outside
    /// collapse to zero area on the nearest edge.
    pub fn clamp_to(&self, cam: &CameraModel) -> Self {
        let (iw, ih) = (cam.width as f64, cam.height as f64);
        let x0 = self.x.clamp(0.0, iw);
        let y0 = self.y.clamp(0.0, ih);
        let x1 = (self.x + self.w.max(0.0)).clamp(0.0, iw);
        let y1 = (self.y + self.h.max(0.0)).clamp(0.0, ih);
        Self {
            x: x0,
            y: y0,
            w: (x1 - x0).max(0.0),
            h: (y1 - y0).max(0.0),
            confidence: self.confidence.clamp(0.0, 1.0),
        }
    }

    /// Tight box around the confident keypoints of a 2D frame.
    pub fn around(frame: &[Keypoint]) -> Option<Self> {
        let pts: Vec<_> = frame.iter().filter(|k| k.confidence > 0.0).collect();
        if pts.is_empty() {
            return None;
        }
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for k in &pts {
            x0 = x0.min(k.coords[0]);
            y0 = y0.min(k.coords[1]);
            x1 = x1.max(k.coords[0]);
            y1 = y1.max(k.coords[1]);
        }
        let confidence = pts.iter().map(|k| k.confidence).sum::<f64>() / pts.len() as f64;
        Some(Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            confidence,
        })
    }
}

/// Per-frame, per-bone Euclidean lengths of a 3D sequence.
pub fn bone_lengths(seq: &PoseSequence) -> Result<Vec<Vec<f64>>, SkeletonError> {
    seq.require_dims(Dims::Three)?;
    Ok(seq
        .frames
        .iter()
        .map(|f| {
            seq.topology
                .bones()
                .iter()
                .map(|&(a, b)| distance(&f[a].coords, &f[b].coords))
                .collect()
        })
        .collect())
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Frame length differs from the topology's joint count.
    RaggedFrame,
    NonFinite,
    ConfidenceRange,
    /// A 2D keypoint with a nonzero third coordinate.
    StrayDepth,
    /// Sequence-level: `fps` not a positive finite number.
    FrameRate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub frame: Option<usize>,
    pub joint: Option<usize>,
    pub kind: ViolationKind,
}

/// Every structural problem in `seq`, or `Ok(())`.
pub fn validate(seq: &PoseSequence) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if !(seq.fps > 0.0 && seq.fps.is_finite()) {
        out.push(Violation {
            frame: None,
            joint: None,
            kind: ViolationKind::FrameRate,
        });
    }
    let n_joints = seq.joint_count();
    let d = seq.dims.count();
    for (t, frame) in seq.frames.iter().enumerate() {
        if frame.len() != n_joints {
            out.push(Violation {
                frame: Some(t),
                joint: None,
                kind: ViolationKind::RaggedFrame,
            });
        }
        for (j, k) in frame.iter().enumerate() {
            let mut push = |kind| {
                out.push(Violation {
                    frame: Some(t),
                    joint: Some(j),
                    kind,
                })
            };
            if k.coords[..d].iter().any(|c| !c.is_finite()) {
                push(ViolationKind::NonFinite);
            }
            if !(0.0..=1.0).contains(&k.confidence) {
                push(ViolationKind::ConfidenceRange);
            }
            if d == 2 && k.coords[2] != 0.0 {
                push(ViolationKind::StrayDepth);
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
