//! Windowed skeleton classification and gait metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{Dims, Frame, Keypoint, PoseSequence, SkeletonTopology};

#[derive(Debug, Error)]
pub enum GaitError {
    #[error("topology {topology:?} has no joint named {joint:?}")]
    MissingJoint { topology: String, joint: String },
    #[error("degenerate window scale {0:e} (torso length too small)")]
    DegenerateScale(f64),
    #[error("window is empty")]
    EmptyWindow,
    #[error("classifier config: {0}")]
    Config(String),
    #[error("no windows to vote over")]
    NoWindows,
    #[error("insufficient data: {0}")]
    Insufficient(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub window_frames: usize,
    pub stride_frames: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_frames: 90,
            stride_frames: 60,
        }
    }
}

impl WindowSpec {
    /// `floor((n − W) / S) + 1` for `n >= W`, else 0. Zero `W` or `S` yields 0.
    pub fn count(&self, n_frames: usize) -> usize {
        let (w, s) = (self.window_frames, self.stride_frames);
        if w == 0 || s == 0 || n_frames < w {
            return 0;
        }
        (n_frames - w) / s + 1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub start: usize,
    pub frames: &'a [Frame],
}

/// Full windows only; a trailing partial window is dropped.
pub fn make_windows<'a>(seq: &'a PoseSequence, spec: &WindowSpec) -> Vec<Window<'a>> {
    (0..spec.count(seq.len()))
        .map(|i| {
            let start = i * spec.stride_frames;
            Window {
                start,
                frames: &seq.frames[start..start + spec.window_frames],
            }
        })
        .collect()
}

/// Joint indices the analysis needs, resolved by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BodyLandmarks {
    pub left_shoulder: usize,
    pub right_shoulder: usize,
    pub left_hip: usize,
    pub right_hip: usize,
    pub left_knee: usize,
    pub right_knee: usize,
    pub left_ankle: usize,
    pub right_ankle: usize,
}

impl BodyLandmarks {
    pub fn resolve(t: &SkeletonTopology) -> Result<Self, GaitError> {
        let find = |name: &str| {
            t.joint_index(name).ok_or_else(|| GaitError::MissingJoint {
                topology: t.name().to_owned(),
                joint: name.to_owned(),
            })
        };
        Ok(Self {
            left_shoulder: find("left_shoulder")?,
            right_shoulder: find("right_shoulder")?,
            left_hip: find("left_hip")?,
            right_hip: find("right_hip")?,
            left_knee: find("left_knee")?,
            right_knee: find("right_knee")?,
            left_ankle: find("left_ankle")?,
            right_ankle: find("right_ankle")?,
        })
    }
}

fn midpoint(a: &Keypoint, b: &Keypoint) -> [f64; 3] {
    [
        0.5 * (a.coords[0] + b.coords[0]),
        0.5 * (a.coords[1] + b.coords[1]),
        0.5 * (a.coords[2] + b.coords[2]),
    ]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Centres every frame on the hip midpoint and divides by the window's
/// median hip-to-shoulder-midpoint distance. Zero-confidence joints stay at
/// the origin.
pub fn normalize_window(frames: &[Frame], lm: &BodyLandmarks) -> Result<Vec<Frame>, GaitError> {
    if frames.is_empty() {
        return Err(GaitError::EmptyWindow);
    }
    let mut torso: Vec<f64> = frames
        .iter()
        .map(|f| {
            dist(
                midpoint(&f[lm.left_hip], &f[lm.right_hip]),
                midpoint(&f[lm.left_shoulder], &f[lm.right_shoulder]),
            )
        })
        .collect();
    let scale = median(&mut torso);
    if !(scale >= 1e-6) {
        return Err(GaitError::DegenerateScale(scale));
    }
    Ok(frames
        .iter()
        .map(|f| {
            let pelvis = midpoint(&f[lm.left_hip], &f[lm.right_hip]);
            f.iter()
                .map(|k| {
                    if k.confidence == 0.0 {
                        return Keypoint::missing();
                    }
                    let mut out = *k;
                    for c in 0..3 {
                        out.coords[c] = (k.coords[c] - pelvis[c]) / scale;
                    }
                    out
                })
                .collect()
        })
        .collect())
}

/// Parameters of the bundled window classifier: one fixed-adjacency graph
/// convolution, a per-channel temporal convolution, global mean pooling and
/// a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightsDoc", into = "WeightsDoc")]
pub struct ClassifierWeights {
    adjacency: Array2<f64>,
    w1: Array2<f64>,
    temporal_kernel: Array2<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    adjacency: Vec<Vec<f64>>,
    w1: Vec<Vec<f64>>,
    temporal_kernel: Vec<Vec<f64>>,
    w_out: Vec<Vec<f64>>,
    b_out: Vec<f64>,
    class_names: Vec<String>,
}

fn to_array(name: &str, rows: Vec<Vec<f64>>) -> Result<Array2<f64>, GaitError> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(GaitError::Config(format!("{name}: ragged rows")));
    }
    Array2::from_shape_vec((n_rows, n_cols), rows.into_iter().flatten().collect())
        .map_err(|e| GaitError::Config(format!("{name}: {e}")))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl TryFrom<WeightsDoc> for ClassifierWeights {
    type Error = GaitError;

    fn try_from(d: WeightsDoc) -> Result<Self, GaitError> {
        ClassifierWeights::new(
            to_array("adjacency", d.adjacency)?,
            to_array("w1", d.w1)?,
            to_array("temporal_kernel", d.temporal_kernel)?,
            to_array("w_out", d.w_out)?,
            Array1::from(d.b_out),
            d.class_names,
        )
    }
}

impl From<ClassifierWeights> for WeightsDoc {
    fn from(w: ClassifierWeights) -> Self {
        WeightsDoc {
            adjacency: to_rows(&w.adjacency),
            w1: to_rows(&w.w1),
            temporal_kernel: to_rows(&w.temporal_kernel),
            w_out: to_rows(&w.w_out),
            b_out: w.b_out.to_vec(),
            class_names: w.class_names,
        }
    }
}

impl ClassifierWeights {
    pub fn new(
        adjacency: Array2<f64>,
        w1: Array2<f64>,
        temporal_kernel: Array2<f64>,
        w_out: Array2<f64>,
        b_out: Array1<f64>,
        class_names: Vec<String>,
    ) -> Result<Self, GaitError> {
        let cfg = |m: String| Err(GaitError::Config(m));
        let j = adjacency.nrows();
        if j == 0 || adjacency.ncols() != j {
            return cfg(format!(
                "adjacency must be square, got {:?}",
                adjacency.dim()
            ));
        }
        for (r, row) in adjacency.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return cfg(format!("adjacency row {r} sums to {s}, expected 1"));
            }
        }
        let h = w1.ncols();
        if w1.nrows() == 0 || h == 0 {
            return cfg(format!("w1 has empty shape {:?}", w1.dim()));
        }
        if temporal_kernel.nrows() != h {
            return cfg(format!(
                "temporal_kernel has {} rows, hidden width is {h}",
                temporal_kernel.nrows()
            ));
        }
        if temporal_kernel.ncols().is_multiple_of(2) {
            return cfg(format!(
                "temporal kernel length must be odd, got {}",
                temporal_kernel.ncols()
            ));
        }
        if w_out.nrows() != h {
            return cfg(format!(
                "w_out has {} rows, hidden width is {h}",
                w_out.nrows()
            ));
        }
        let c = w_out.ncols();
        if c == 0 || b_out.len() != c || class_names.len() != c {
            return cfg(format!(
                "class count mismatch: w_out {c}, b_out {}, class_names {}",
                b_out.len(),
                class_names.len()
            ));
        }
        let all = adjacency
            .iter()
            .chain(w1.iter())
            .chain(temporal_kernel.iter())
            .chain(w_out.iter())
            .chain(b_out.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return cfg("non-finite weight".into());
        }
        Ok(Self {
            adjacency,
            w1,
            temporal_kernel,
            w_out,
            b_out,
            class_names,
        })
    }

    /// Random weights with a row-normalized `A + I` adjacency built from the
    /// topology's bones. Deterministic in `seed`.
    pub fn seeded(
        topology: &SkeletonTopology,
        dims: Dims,
        hidden: usize,
        kernel: usize,
        class_names: Vec<String>,
        seed: u64,
    ) -> Result<Self, GaitError> {
        let j = topology.joint_count();
        let mut adjacency = Array2::<f64>::eye(j);
        for &(a, b) in topology.bones() {
            adjacency[[a, b]] = 1.0;
            adjacency[[b, a]] = 1.0;
        }
        for mut row in adjacency.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let c_in = dims.count() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize, sd: f64| {
            let normal = Normal::new(0.0, sd).expect("positive sd");
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
        };
        let w1 = draw(c_in, hidden, (2.0 / c_in as f64).sqrt());
        let temporal_kernel = draw(hidden, kernel, (1.0 / kernel as f64).sqrt());
        let w_out = draw(hidden, class_names.len(), (1.0 / hidden as f64).sqrt());
        let b_out = Array1::zeros(class_names.len());
        Self::new(adjacency, w1, temporal_kernel, w_out, b_out, class_names)
    }

    /// The weights shipped with the crate for COCO-17 windows of the given
    /// dimensionality. They are untrained; the class labels are placeholders.
    pub fn bundled(dims: Dims) -> Self {
        let text = match dims {
            Dims::Two => include_str!("../data/weights_coco17_2d.json"),
            Dims::Three => include_str!("../data/weights_coco17_3d.json"),
        };
        serde_json::from_str(text).expect("bundled weights parse")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn n_joints(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Features per joint: coordinates plus confidence.
    pub fn in_channels(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn kernel_len(&self) -> usize {
        self.temporal_kernel.ncols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn w1(&self) -> &Array2<f64> {
        &self.w1
    }

    pub fn temporal_kernel(&self) -> &Array2<f64> {
        &self.temporal_kernel
    }

    pub fn w_out(&self) -> &Array2<f64> {
        &self.w_out
    }

    pub fn b_out(&self) -> &Array1<f64> {
        &self.b_out
    }

    /// Checks a window's joint count and dimensionality against the weights.
    pub fn check_input(&self, n_joints: usize, dims: Dims) -> Result<(), GaitError> {
        if n_joints != self.n_joints() {
            return Err(GaitError::Config(format!(
                "joints: window has {n_joints}, weights expect {}",
                self.n_joints()
            )));
        }
        if dims.count() + 1 != self.in_channels() {
            return Err(GaitError::Config(format!(
                "in_channels: {}D window gives {} features per joint, weights expect {}",
                dims.count(),
                dims.count() + 1,
                self.in_channels()
            )));
        }
        Ok(())
    }
}

/// Class probabilities for one window.
pub fn classify_window(
    frames: &[Frame],
    dims: Dims,
    weights: &ClassifierWeights,
) -> Result<Vec<f64>, GaitError> {
    let t_len = frames.len();
    if t_len == 0 {
        return Err(GaitError::EmptyWindow);
    }
    for f in frames {
        weights.check_input(f.len(), dims)?;
    }
    let j = weights.n_joints();
    let d = dims.count();
    let h = weights.hidden();
    let k_len = weights.kernel_len();
    let radius = k_len / 2;

    let mut h1 = Array3::<f64>::zeros((t_len, j, h));
    for (t, frame) in frames.iter().enumerate() {
        let x = Array2::from_shape_fn((j, d + 1), |(jj, c)| {
            if c < d {
                frame[jj].coords[c]
            } else {
                frame[jj].confidence
            }
        });
        let z = weights.adjacency.dot(&x).dot(&weights.w1);
        h1.index_axis_mut(Axis(0), t)
            .assign(&z.mapv(|v| v.max(0.0)));
    }

    // Same-padded temporal convolution, summed straight into the pool.
    let mut pooled = Array1::<f64>::zeros(h);
    for t in 0..t_len {
        for k in 0..k_len {
            let src = t as isize + k as isize - radius as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let joint_sum = h1.index_axis(Axis(0), src as usize).sum_axis(Axis(0));
            pooled += &(&weights.temporal_kernel.column(k) * &joint_sum);
        }
    }
    pooled /= (t_len * j) as f64;
    let logits = pooled.dot(&weights.w_out) + &weights.b_out;
    Ok(softmax(logits.as_slice().expect("contiguous")))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub start: usize,
    pub class: usize,
    pub scores: Vec<f64>,
}

impl WindowPrediction {
    /// Picks the highest score, lowest index on ties.
    pub fn from_scores(start: usize, scores: Vec<f64>) -> Self {
        Self {
            start,
            class: argmax(&scores),
            scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// Sorted by window start.
    pub per_window: Vec<WindowPrediction>,
    pub trial_class: usize,
    pub vote_counts: Vec<usize>,
}

/// Majority vote over window predictions.
///
/// Ties go to the class with the highest mean score across all windows, then
/// to the lowest class index.
pub fn majority_vote(predictions: &[WindowPrediction]) -> Result<TrialResult, GaitError> {
    let first = predictions.first().ok_or(GaitError::NoWindows)?;
    let n_classes = first.scores.len();
    if predictions
        .iter()
        .any(|p| p.scores.len() != n_classes || p.class >= n_classes)
    {
        return Err(GaitError::Config(
            "inconsistent class counts across windows".into(),
        ));
    }
    let mut votes = vec![0usize; n_classes];
    let mut mean = vec![0.0; n_classes];
    for p in predictions {
        votes[p.class] += 1;
        for (m, s) in mean.iter_mut().zip(&p.scores) {
            *m += s;
        }
    }
    mean.iter_mut().for_each(|m| *m /= predictions.len() as f64);
    let top = *votes.iter().max().expect("non-empty");
    let mut trial_class = usize::MAX;
    for c in (0..n_classes).filter(|&c| votes[c] == top) {
        if trial_class == usize::MAX || mean[c] > mean[trial_class] {
            trial_class = c;
        }
    }
    let mut per_window = predictions.to_vec();
    per_window.sort_by(window_order);
    Ok(TrialResult {
        per_window,
        trial_class,
        vote_counts: votes,
    })
}

fn window_order(a: &WindowPrediction, b: &WindowPrediction) -> std::cmp::Ordering {
    let by_scores = a
        .scores
        .iter()
        .zip(&b.scores)
        .fold(std::cmp::Ordering::Equal, |o, (x, y)| {
            o.then(x.total_cmp(y))
        });
    a.start
        .cmp(&b.start)
        .then(a.class.cmp(&b.class))
        .then(by_scores)
}

/// Windows, normalizes, classifies and votes over a whole sequence. Returns
/// `None` when the sequence is shorter than one window.
pub fn classify_trial(
    seq: &PoseSequence,
    spec: &WindowSpec,
    weights: &ClassifierWeights,
) -> Result<Option<TrialResult>, GaitError> {
    weights.check_input(seq.joint_count(), seq.dims)?;
    let lm = BodyLandmarks::resolve(&seq.topology)?;
    let windows = make_windows(seq, spec);
    if windows.is_empty() {
        return Ok(None);
    }
    let predictions = windows
        .iter()
        .map(|w| {
            let norm = normalize_window(w.frames, &lm)?;
            let scores = classify_window(&norm, seq.dims, weights)?;
            Ok(WindowPrediction::from_scores(w.start, scores))
        })
        .collect::<Result<Vec<_>, GaitError>>()?;
    majority_vote(&predictions).map(Some)
}

/// Interior angle at `center` in degrees, per frame. `None` where a limb
/// vector is shorter than 1e-9 or a joint has zero confidence.
pub fn joint_angle_series(
    seq: &PoseSequence,
    center: usize,
    joint_a: usize,
    joint_b: usize,
) -> Vec<Option<f64>> {
    seq.frames
        .iter()
        .map(|f| {
            let (c, a, b) = (&f[center], &f[joint_a], &f[joint_b]);
            if c.confidence == 0.0 || a.confidence == 0.0 || b.confidence == 0.0 {
                return None;
            }
            let u = [
                a.coords[0] - c.coords[0],
                a.coords[1] - c.coords[1],
                a.coords[2] - c.coords[2],
            ];
            let v = [
                b.coords[0] - c.coords[0],
                b.coords[1] - c.coords[1],
                b.coords[2] - c.coords[2],
            ];
            let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if nu < 1e-9 || nv < 1e-9 {
                return None;
            }
            let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
            let cross = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let cross_norm =
                (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            // atan2 keeps precision near 0° and 180° where acos does not.
            Some(cross_norm.atan2(dot).to_degrees())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeelStrike {
    /// Frame index of the sampled peak.
    pub frame: usize,
    /// Peak time with sub-frame parabolic interpolation.
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitEvents {
    pub left: Vec<HeelStrike>,
    pub right: Vec<HeelStrike>,
    /// Unit walking direction in the plane used for detection.
    pub walking_axis: [f64; 2],
    /// Stride period used for the minimum peak separation, if measurable.
    pub stride_period_s: Option<f64>,
}

impl GaitEvents {
    pub fn all_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .left
            .iter()
            .chain(&self.right)
            .map(|s| s.time_s)
            .collect();
        t.sort_by(f64::total_cmp);
        t
    }
}

/// Minimum peak-to-peak swing of the ankle signal, as a fraction of the mean
/// hip-to-ankle distance, below which no strikes are reported.
const MIN_SWING_FRACTION: f64 = 0.05;

/// Horizontal-plane coordinates used for walking-direction estimation:
/// `(x, z)` for 3D camera-frame data (`y` is vertical), `(u, v)` for 2D.
fn plane(k: &Keypoint, dims: Dims) -> [f64; 2] {
    match dims {
        Dims::Three => [k.coords[0], k.coords[2]],
        Dims::Two => [k.coords[0], k.coords[1]],
    }
}

/// Heel strikes as maxima of each ankle's displacement from the hip midpoint
/// along the walking direction.
///
/// The walking direction is the principal axis of the hip-midpoint track,
/// oriented along its net displacement. Peaks closer than a quarter stride
/// are suppressed, keeping the higher one.
pub fn detect_gait_events(seq: &PoseSequence) -> Result<GaitEvents, GaitError> {
    let lm = BodyLandmarks::resolve(&seq.topology)?;
    let n = seq.len();
    for (name, j) in [
        ("left_hip", lm.left_hip),
        ("right_hip", lm.right_hip),
        ("left_ankle", lm.left_ankle),
        ("right_ankle", lm.right_ankle),
    ] {
        let good = seq.frames.iter().filter(|f| f[j].confidence > 0.0).count();
        if n == 0 || 2 * good < n {
            return Err(GaitError::Insufficient(format!(
                "{name} confident in {good} of {n} frames, need at least half"
            )));
        }
    }
    let usable = |f: &Frame| {
        [lm.left_hip, lm.right_hip]
            .iter()
            .all(|&j| f[j].confidence > 0.0)
    };
    let hips: Vec<Option<[f64; 2]>> = seq
        .frames
        .iter()
        .map(|f| {
            usable(f).then(|| {
                let (a, b) = (
                    plane(&f[lm.left_hip], seq.dims),
                    plane(&f[lm.right_hip], seq.dims),
                );
                [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
            })
        })
        .collect();
    let axis = walking_axis(&hips);

    let mut reach = Vec::new();
    let signal_for = |ankle: usize, reach: &mut Vec<f64>| -> Vec<Option<f64>> {
        seq.frames
            .iter()
            .zip(&hips)
            .map(|(f, hip)| {
                let hip = (*hip)?;
                if f[ankle].confidence == 0.0 {
                    return None;
                }
                let a = plane(&f[ankle], seq.dims);
                let full_hip = midpoint(&f[lm.left_hip], &f[lm.right_hip]);
                reach.push(dist(full_hip, f[ankle].coords));
                Some((a[0] - hip[0]) * axis[0] + (a[1] - hip[1]) * axis[1])
            })
            .collect()
    };
    let left = signal_for(lm.left_ankle, &mut reach);
    let right = signal_for(lm.right_ankle, &mut reach);
    let leg = if reach.is_empty() {
        0.0
    } else {
        reach.iter().sum::<f64>() / reach.len() as f64
    };

    let periods: Vec<f64> = [&left, &right]
        .iter()
        .filter_map(|s| stride_period_frames(s))
        .collect();
    let period = (!periods.is_empty()).then(|| periods.iter().sum::<f64>() / periods.len() as f64);
    let min_sep = period.map_or(1, |p| ((0.25 * p).round() as usize).max(1));

    let strikes = |s: &[Option<f64>]| -> Vec<HeelStrike> {
        find_peaks(s, min_sep, MIN_SWING_FRACTION * leg)
            .into_iter()
            .map(|(frame, offset)| HeelStrike {
                frame,
                time_s: (frame as f64 + offset) / seq.fps,
            })
            .collect()
    };
    Ok(GaitEvents {
        left: strikes(&left),
        right: strikes(&right),
        walking_axis: axis,
        stride_period_s: period.map(|p| p / seq.fps),
    })
}

fn walking_axis(track: &[Option<[f64; 2]>]) -> [f64; 2] {
    let pts: Vec<[f64; 2]> = track.iter().flatten().copied().collect();
    if pts.len() < 2 {
        return [1.0, 0.0];
    }
    let n = pts.len() as f64;
    let mean = [
        pts.iter().map(|p| p[0]).sum::<f64>() / n,
        pts.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &pts {
        let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    // Major eigenvector of the 2x2 covariance.
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut axis = [angle.cos(), angle.sin()];
    let net = [
        pts[pts.len() - 1][0] - pts[0][0],
        pts[pts.len() - 1][1] - pts[0][1],
    ];
    if net[0] * axis[0] + net[1] * axis[1] < 0.0 {
        axis = [-axis[0], -axis[1]];
    }
    axis
}

/// Mean stride period in frames from upward mean crossings with hysteresis.
fn stride_period_frames(signal: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = signal.iter().flatten().copied().collect();
    if vals.len() < 3 {
        return None;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    if sd == 0.0 {
        return None;
    }
    let band = 0.1 * sd;
    let mut below = false;
    let mut ups = Vec::new();
    for (i, v) in signal.iter().enumerate() {
        let Some(v) = *v else { continue };
        if v < mean - band {
            below = true;
        } else if below && v > mean + band {
            ups.push(i);
            below = false;
        }
    }
    (ups.len() >= 2).then(|| (ups[ups.len() - 1] - ups[0]) as f64 / (ups.len() - 1) as f64)
}

/// Local maxima above the signal mean, at least `min_sep` frames apart
/// (greedy by height), with a parabolic sub-frame offset in `[-0.5, 0.5]`.
fn find_peaks(signal: &[Option<f64>], min_sep: usize, min_swing: f64) -> Vec<(usize, f64)> {
    let vals: Vec<f64> = signal.iter().flatten().copied().collect();
    if vals.len() < 3 {
        return Vec::new();
    }
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    if !(hi - lo > min_swing) {
        return Vec::new();
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let mut candidates: Vec<usize> = (1..signal.len().saturating_sub(1))
        .filter(|&i| match (signal[i - 1], signal[i], signal[i + 1]) {
            (Some(a), Some(b), Some(c)) => b > a && b >= c && b > mean,
            _ => false,
        })
        .collect();
    candidates.sort_by(|&a, &b| {
        signal[b]
            .unwrap()
            .total_cmp(&signal[a].unwrap())
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept.iter().all(|&k| k.abs_diff(c) >= min_sep) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept.into_iter()
        .map(|i| {
            let (a, b, c) = (
                signal[i - 1].unwrap(),
                signal[i].unwrap(),
                signal[i + 1].unwrap(),
            );
            let denom = a - 2.0 * b + c;
            let offset = if denom < 0.0 {
                (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            (i, offset)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitMetrics {
    /// `None` when fewer than two strikes were found.
    pub cadence_steps_per_min: Option<f64>,
    pub mean_step_time_s_left: Option<f64>,
    pub mean_step_time_s_right: Option<f64>,
    pub heel_strike_times_left: Vec<f64>,
    pub heel_strike_times_right: Vec<f64>,
    pub fps: f64,
    /// Degrees per frame; `None` marks frames where the angle is undefined.
    pub joint_angle_series: BTreeMap<String, Vec<Option<f64>>>,
}

impl GaitMetrics {
    /// One row per frame: `frame,time_s,<angle columns...>`. Missing values
    /// are empty cells.
    pub fn angles_csv(&self) -> String {
        let names: Vec<&String> = self.joint_angle_series.keys().collect();
        let mut s = String::from("frame,time_s");
        for n in &names {
            write!(s, ",{n}_deg").unwrap();
        }
        s.push('\n');
        let rows = self
            .joint_angle_series
            .values()
            .map(Vec::len)
            .max()
            .unwrap_or(0);
        for i in 0..rows {
            write!(s, "{i},{:.6}", i as f64 / self.fps).unwrap();
            for n in &names {
                match self.joint_angle_series[*n].get(i).copied().flatten() {
                    Some(v) => write!(s, ",{v:.6}").unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Cadence, per-side mean step time, strike times and knee angle series.
///
/// Steps are the intervals between consecutive strikes of either side, each
/// credited to the side whose strike ends it.
pub fn compute_metrics(seq: &PoseSequence) -> Result<GaitMetrics, GaitError> {
    let events = detect_gait_events(seq)?;
    let lm = BodyLandmarks::resolve(&seq.topology)?;
    let mut merged: Vec<(f64, bool)> = events
        .left
        .iter()
        .map(|s| (s.time_s, true))
        .chain(events.right.iter().map(|s| (s.time_s, false)))
        .collect();
    merged.sort_by(|a, b| a.0.total_cmp(&b.0));

    let cadence = (merged.len() >= 2).then(|| {
        let span = merged[merged.len() - 1].0 - merged[0].0;
        60.0 * (merged.len() - 1) as f64 / span
    });
    let (mut left_steps, mut right_steps) = (Vec::new(), Vec::new());
    for w in merged.windows(2) {
        let dt = w[1].0 - w[0].0;
        if w[1].1 {
            left_steps.push(dt);
        } else {
            right_steps.push(dt);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);

    let mut angles = BTreeMap::new();
    angles.insert(
        "left_knee".to_owned(),
        joint_angle_series(seq, lm.left_knee, lm.left_hip, lm.left_ankle),
    );
    angles.insert(
        "right_knee".to_owned(),
        joint_angle_series(seq, lm.right_knee, lm.right_hip, lm.right_ankle),
    );
    Ok(GaitMetrics {
        cadence_steps_per_min: cadence,
        mean_step_time_s_left: mean(&left_steps),
        mean_step_time_s_right: mean(&right_steps),
        heel_strike_times_left: events.left.iter().map(|s| s.time_s).collect(),
        heel_strike_times_right: events.right.iter().map(|s| s.time_s).collect(),
        fps: seq.fps,
        joint_angle_series: angles,
    })
}
