//! Sequence-level 3D pose refinement.
//!
//! Minimizes, over camera-frame joint positions `P[t][j]`,
//!
//! ```text
//! E = Σ_{t,j} w_tj ‖π(P_tj) − k_tj‖²
//!   + λ_bone   Σ_{t,b} (‖P_ta − P_tb‖ − L_b)²
//!   + λ_smooth Σ_{t,j} ‖P_{t+1,j} − 2 P_tj + P_{t−1,j}‖²
//! ```
//!
//! where `π` maps to normalized image coordinates (`x/z`, `y/z`) and the
//! observations are converted the same way (`(u − cx)/fx`, `(v − cy)/fy`), so
//! the weights do not depend on image resolution. `w_tj` is the observation
//! confidence and `L_b` the per-bone median length over the initial
//! trajectory.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{validate, CameraModel, Dims, PoseSequence, SkeletonError, Violation};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("invalid input sequence: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-positive depth z={depth} at frame {frame}, joint {joint}")]
    Depth {
        frame: usize,
        joint: usize,
        depth: f64,
    },
    #[error("optimization diverged after {} accepted iterations", .trace.len().saturating_sub(1))]
    Diverged { trace: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub lambda_bone: f64,
    pub lambda_smooth: f64,
    pub max_iters: usize,
    /// Initial per-coordinate step, meters.
    pub step_size: f64,
    pub rel_tol: f64,
    pub patience: usize,
    /// Objective per unit of observation weight at which the fit counts as
    /// exact. Keeps f32 storage rounding from being optimized forever.
    pub abs_tol: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lambda_bone: 1.0,
            lambda_smooth: 0.1,
            max_iters: 200,
            step_size: 0.01,
            rel_tol: 1e-6,
            patience: 10,
            abs_tol: 1e-12,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let bad = |m: String| Err(RefineError::Config(m));
        if !(self.lambda_bone >= 0.0 && self.lambda_bone.is_finite()) {
            return bad(format!(
                "lambda_bone must be >= 0, got {}",
                self.lambda_bone
            ));
        }
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return bad(format!(
                "lambda_smooth must be >= 0, got {}",
                self.lambda_smooth
            ));
        }
        if self.max_iters < 1 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be > 0, got {}", self.step_size));
        }
        if !(self.rel_tol > 0.0) {
            return bad(format!("rel_tol must be > 0, got {}", self.rel_tol));
        }
        if !(self.abs_tol >= 0.0 && self.abs_tol.is_finite()) {
            return bad(format!("abs_tol must be >= 0, got {}", self.abs_tol));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub refined: PoseSequence,
    /// Objective at the start and after every accepted iteration.
    pub objective_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl RefineResult {
    /// `iteration,objective` rows with a header.
    pub fn trace_csv(&self) -> String {
        trace_csv(&self.objective_trace)
    }
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iteration,objective\n");
    for (i, e) in trace.iter().enumerate() {
        writeln!(s, "{i},{e:.17e}").unwrap();
    }
    s
}

/// Objective terms, reported separately for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Terms {
    pub reprojection: f64,
    pub bone: f64,
    pub smooth: f64,
}

impl Terms {
    pub fn total(&self) -> f64 {
        self.reprojection + self.bone + self.smooth
    }
}

/// Fixed data of one refinement: normalized observations, weights and bone
/// targets. Positions are passed flat, `[t * n_joints + j]`.
#[derive(Debug, Clone)]
pub struct RefineProblem {
    n_frames: usize,
    n_joints: usize,
    obs: Vec<[f64; 2]>,
    weights: Vec<f64>,
    bones: Vec<(usize, usize)>,
    targets: Vec<f64>,
    lambda_bone: f64,
    lambda_smooth: f64,
}

impl RefineProblem {
    /// Bone targets are the per-bone medians over `initial`.
    pub fn new(
        initial: &PoseSequence,
        obs2d: &PoseSequence,
        cam: &CameraModel,
        cfg: &RefineConfig,
    ) -> Result<Self, RefineError> {
        cfg.validate()?;
        initial.require_dims(Dims::Three)?;
        obs2d.require_dims(Dims::Two)?;
        validate(initial).map_err(RefineError::Invalid)?;
        validate(obs2d).map_err(RefineError::Invalid)?;
        if initial.len() != obs2d.len() {
            return Err(RefineError::Shape(format!(
                "{} frames of 3D vs {} frames of 2D",
                initial.len(),
                obs2d.len()
            )));
        }
        if initial.joint_count() != obs2d.joint_count() {
            return Err(RefineError::Shape(format!(
                "{} joints in 3D vs {} in 2D",
                initial.joint_count(),
                obs2d.joint_count()
            )));
        }
        if initial.fps != obs2d.fps {
            return Err(RefineError::Shape(format!(
                "fps {} vs {}",
                initial.fps, obs2d.fps
            )));
        }
        let mut obs = Vec::with_capacity(initial.len() * initial.joint_count());
        let mut weights = Vec::with_capacity(obs.capacity());
        for frame in &obs2d.frames {
            for k in frame {
                obs.push([
                    (k.coords[0] - cam.cx) / cam.fx,
                    (k.coords[1] - cam.cy) / cam.fy,
                ]);
                weights.push(k.confidence);
            }
        }
        let bones = initial.topology.bones().to_vec();
        let positions = flatten(initial);
        let n_joints = initial.joint_count();
        let targets = bones
            .iter()
            .map(|&(a, b)| {
                let mut lens: Vec<f64> = (0..initial.len())
                    .map(|t| {
                        norm(sub(
                            positions[t * n_joints + a],
                            positions[t * n_joints + b],
                        ))
                    })
                    .collect();
                median(&mut lens)
            })
            .collect();
        Ok(Self {
            n_frames: initial.len(),
            n_joints,
            obs,
            weights,
            bones,
            targets,
            lambda_bone: cfg.lambda_bone,
            lambda_smooth: cfg.lambda_smooth,
        })
    }

    pub fn bone_targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.n_frames * self.n_joints
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_shape(&self, p: &[[f64; 3]]) {
        assert_eq!(p.len(), self.len(), "position array has wrong length");
    }

    fn depth_error(&self, i: usize, z: f64) -> RefineError {
        RefineError::Depth {
            frame: i / self.n_joints,
            joint: i % self.n_joints,
            depth: z,
        }
    }

    pub fn terms(&self, p: &[[f64; 3]]) -> Result<Terms, RefineError> {
        self.check_shape(p);
        let mut terms = Terms::default();
        for (i, x) in p.iter().enumerate() {
            if !(x[2] > 0.0) {
                return Err(self.depth_error(i, x[2]));
            }
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let ru = x[0] / x[2] - self.obs[i][0];
            let rv = x[1] / x[2] - self.obs[i][1];
            terms.reprojection += w * (ru * ru + rv * rv);
        }
        if self.lambda_bone != 0.0 {
            let mut acc = 0.0;
            for t in 0..self.n_frames {
                let base = t * self.n_joints;
                for (&(a, b), &target) in self.bones.iter().zip(&self.targets) {
                    let r = norm(sub(p[base + a], p[base + b])) - target;
                    acc += r * r;
                }
            }
            terms.bone = self.lambda_bone * acc;
        }
        if self.lambda_smooth != 0.0 && self.n_frames >= 3 {
            let mut acc = 0.0;
            for t in 1..self.n_frames - 1 {
                for j in 0..self.n_joints {
                    let s = second_diff(p, self.n_joints, t, j);
                    acc += dot(s, s);
                }
            }
            terms.smooth = self.lambda_smooth * acc;
        }
        Ok(terms)
    }

    pub fn objective(&self, p: &[[f64; 3]]) -> Result<f64, RefineError> {
        Ok(self.terms(p)?.total())
    }

    /// Analytic `∂E/∂P`, same layout as `p`.
    pub fn gradient(&self, p: &[[f64; 3]]) -> Result<Vec<[f64; 3]>, RefineError> {
        self.check_shape(p);
        let mut g = vec![[0.0; 3]; p.len()];
        for (i, x) in p.iter().enumerate() {
            if !(x[2] > 0.0) {
                return Err(self.depth_error(i, x[2]));
            }
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let inv_z = 1.0 / x[2];
            let (pu, pv) = (x[0] * inv_z, x[1] * inv_z);
            let ru = pu - self.obs[i][0];
            let rv = pv - self.obs[i][1];
            let s = 2.0 * w * inv_z;
            g[i][0] += s * ru;
            g[i][1] += s * rv;
            g[i][2] -= s * (ru * pu + rv * pv);
        }
        if self.lambda_bone != 0.0 {
            for t in 0..self.n_frames {
                let base = t * self.n_joints;
                for (&(a, b), &target) in self.bones.iter().zip(&self.targets) {
                    let d = sub(p[base + a], p[base + b]);
                    let len = norm(d);
                    if len == 0.0 {
                        continue;
                    }
                    let s = 2.0 * self.lambda_bone * (len - target) / len;
                    for c in 0..3 {
                        g[base + a][c] += s * d[c];
                        g[base + b][c] -= s * d[c];
                    }
                }
            }
        }
        if self.lambda_smooth != 0.0 && self.n_frames >= 3 {
            let nj = self.n_joints;
            for t in 1..self.n_frames - 1 {
                for j in 0..nj {
                    let s = second_diff(p, nj, t, j);
                    for c in 0..3 {
                        let v = 2.0 * self.lambda_smooth * s[c];
                        g[(t - 1) * nj + j][c] += v;
                        g[t * nj + j][c] -= 2.0 * v;
                        g[(t + 1) * nj + j][c] += v;
                    }
                }
            }
        }
        Ok(g)
    }

    /// Largest relative difference between the analytic gradient and central
    /// differences of the objective with step `h`. Components where both are
    /// below `floor` in magnitude are compared against `floor`.
    pub fn check_gradient(&self, p: &[[f64; 3]], h: f64, floor: f64) -> Result<f64, RefineError> {
        let analytic = self.gradient(p)?;
        let mut work = p.to_vec();
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            for c in 0..3 {
                let orig = work[i][c];
                work[i][c] = orig + h;
                let plus = self.objective(&work)?;
                work[i][c] = orig - h;
                let minus = self.objective(&work)?;
                work[i][c] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[i][c];
                let scale = a.abs().max(numeric.abs()).max(floor);
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
        Ok(worst)
    }
}

/// Objective of `p` with bone targets taken from `p` itself.
pub fn objective(
    p: &PoseSequence,
    obs2d: &PoseSequence,
    cam: &CameraModel,
    cfg: &RefineConfig,
) -> Result<f64, RefineError> {
    RefineProblem::new(p, obs2d, cam, cfg)?.objective(&flatten(p))
}

/// Gradient of [`objective`], one `[dx, dy, dz]` per frame and joint.
pub fn gradient(
    p: &PoseSequence,
    obs2d: &PoseSequence,
    cam: &CameraModel,
    cfg: &RefineConfig,
) -> Result<Vec<Vec<[f64; 3]>>, RefineError> {
    let problem = RefineProblem::new(p, obs2d, cam, cfg)?;
    let g = problem.gradient(&flatten(p))?;
    Ok(g.chunks(p.joint_count().max(1))
        .map(|c| c.to_vec())
        .collect())
}

pub fn check_gradient(
    p: &PoseSequence,
    obs2d: &PoseSequence,
    cam: &CameraModel,
    cfg: &RefineConfig,
    h: f64,
) -> Result<f64, RefineError> {
    RefineProblem::new(p, obs2d, cam, cfg)?.check_gradient(&flatten(p), h, 1e-8)
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-12;
const MAX_HALVINGS: usize = 20;
const GRAD_TOL: f64 = 1e-12;

/// Refines `initial` against `obs2d`.
///
/// Each iteration takes a momentum step normalized per coordinate by the
/// running RMS gradient. A step that raises the objective is halved until it
/// does not; the step then grows back by 1.5× per accepted iteration up to
/// `step_size`. If halving never helps, the moments are reset and the plain
/// normalized gradient is tried the same way before giving up.
pub fn refine_sequence(
    initial: &PoseSequence,
    obs2d: &PoseSequence,
    cam: &CameraModel,
    cfg: &RefineConfig,
) -> Result<RefineResult, RefineError> {
    let problem = RefineProblem::new(initial, obs2d, cam, cfg)?;
    let mut x = flatten(initial);
    let mut energy = problem.objective(&x)?;
    let mut trace = vec![energy];
    let n = x.len();
    let mut m = vec![[0.0; 3]; n];
    let mut v = vec![[0.0; 3]; n];
    let mut step = cfg.step_size;
    let mut adam_t = 0i32;
    let mut quiet = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;
    let floor = cfg.abs_tol * problem.weights.iter().sum::<f64>();

    while iterations < cfg.max_iters {
        let g = problem.gradient(&x)?;
        let g_max = g.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
        if g_max <= GRAD_TOL || energy <= floor {
            converged = true;
            break;
        }
        iterations += 1;
        adam_t += 1;
        for i in 0..n {
            for c in 0..3 {
                m[i][c] = BETA1 * m[i][c] + (1.0 - BETA1) * g[i][c];
                v[i][c] = BETA2 * v[i][c] + (1.0 - BETA2) * g[i][c] * g[i][c];
            }
        }
        let bc1 = 1.0 - BETA1.powi(adam_t);
        let bc2 = 1.0 - BETA2.powi(adam_t);
        let direction: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let mut d = [0.0; 3];
                for c in 0..3 {
                    d[c] = (m[i][c] / bc1) / ((v[i][c] / bc2).sqrt() + EPS);
                }
                d
            })
            .collect();

        let mut accepted = line_search(&problem, &x, &direction, energy, &mut step);
        if accepted.is_none() {
            // Momentum can point uphill after a sharp turn; restart from the
            // normalized gradient.
            m.iter_mut().for_each(|e| *e = [0.0; 3]);
            v.iter_mut().for_each(|e| *e = [0.0; 3]);
            adam_t = 0;
            let direction: Vec<[f64; 3]> = g
                .iter()
                .map(|gi| {
                    let mut d = [0.0; 3];
                    for c in 0..3 {
                        d[c] = gi[c].signum() * (gi[c] != 0.0) as u8 as f64;
                    }
                    d
                })
                .collect();
            step = cfg.step_size;
            accepted = line_search(&problem, &x, &direction, energy, &mut step);
        }
        let Some((next, next_energy)) = accepted else {
            // No decrease along a descent direction down to a 2^-20 step:
            // only rounding is left unless the objective is misbehaving.
            if at_precision_floor(&g, energy, step) {
                converged = true;
                break;
            }
            return Err(RefineError::Diverged { trace });
        };

        let rel = (energy - next_energy) / energy.abs().max(f64::MIN_POSITIVE);
        x = next;
        energy = next_energy;
        trace.push(energy);
        step = (step * 1.5).min(cfg.step_size);
        if rel < cfg.rel_tol {
            quiet += 1;
            if quiet >= cfg.patience {
                converged = true;
                break;
            }
        } else {
            quiet = 0;
        }
    }

    let mut refined = initial.clone();
    for (t, frame) in refined.frames.iter_mut().enumerate() {
        for (j, k) in frame.iter_mut().enumerate() {
            k.coords = x[t * problem.n_joints + j];
        }
    }
    Ok(RefineResult {
        refined,
        objective_trace: trace,
        iterations_run: iterations,
        converged,
    })
}

fn line_search(
    problem: &RefineProblem,
    x: &[[f64; 3]],
    direction: &[[f64; 3]],
    energy: f64,
    step: &mut f64,
) -> Option<(Vec<[f64; 3]>, f64)> {
    let mut trial = x.to_vec();
    for _ in 0..=MAX_HALVINGS {
        for ((t, xi), di) in trial.iter_mut().zip(x).zip(direction) {
            for c in 0..3 {
                t[c] = xi[c] - *step * di[c];
            }
        }
        match problem.objective(&trial) {
            Ok(e) if e.is_finite() && e <= energy => return Some((trial, e)),
            _ => *step *= 0.5,
        }
    }
    None
}

fn at_precision_floor(g: &[[f64; 3]], energy: f64, step: f64) -> bool {
    // Predicted first-order decrease of the smallest trial step.
    let predicted: f64 = g.iter().flatten().map(|c| c.abs()).sum::<f64>() * step;
    predicted <= 1e-10 * energy.abs().max(f64::MIN_POSITIVE)
}

pub(crate) fn flatten(seq: &PoseSequence) -> Vec<[f64; 3]> {
    seq.frames.iter().flatten().map(|k| k.coords).collect()
}

fn second_diff(p: &[[f64; 3]], nj: usize, t: usize, j: usize) -> [f64; 3] {
    let (a, b, c) = (p[(t - 1) * nj + j], p[t * nj + j], p[(t + 1) * nj + j]);
    [
        c[0] - 2.0 * b[0] + a[0],
        c[1] - 2.0 * b[1] + a[1],
        c[2] - 2.0 * b[2] + a[2],
    ]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Mean Euclidean distance between corresponding joints of two 3D sequences.
pub fn mean_joint_error(a: &PoseSequence, b: &PoseSequence) -> f64 {
    let pa = flatten(a);
    let pb = flatten(b);
    assert_eq!(pa.len(), pb.len());
    if pa.is_empty() {
        return 0.0;
    }
    pa.iter()
        .zip(&pb)
        .map(|(x, y)| norm(sub(*x, *y)))
        .sum::<f64>()
        / pa.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{bone_lengths, Keypoint, SkeletonTopology};
    use crate::synth::{add_noise, generate, project_sequence, CameraRig, GaitParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraRig::default().intrinsics
    }

    fn clean_clip(frames: usize) -> (PoseSequence, PoseSequence) {
        let p = GaitParams {
            duration_s: frames as f64 / 60.0,
            ..Default::default()
        };
        let (seq, _) = generate(&p).unwrap();
        let obs = project_sequence(&seq, &cam()).unwrap();
        (seq, obs)
    }

    fn no_smooth() -> RefineConfig {
        RefineConfig {
            lambda_smooth: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn perfect_fit_leaves_only_smoothness() {
        let (seq, obs) = clean_clip(120);
        let problem = RefineProblem::new(&seq, &obs, &cam(), &RefineConfig::default()).unwrap();
        let terms = problem.terms(&flatten(&seq)).unwrap();
        assert!(terms.reprojection < 1e-20);
        assert!(terms.bone < 1e-20);
        assert!(terms.smooth > 0.0);
    }

    #[test]
    fn zero_confidence_ignores_observations() {
        let (seq, mut obs) = clean_clip(30);
        obs.frames
            .iter_mut()
            .flatten()
            .for_each(|k| k.confidence = 0.0);
        let e1 = objective(&seq, &obs, &cam(), &RefineConfig::default()).unwrap();
        obs.frames
            .iter_mut()
            .flatten()
            .for_each(|k| k.coords[0] += 57.0);
        let e2 = objective(&seq, &obs, &cam(), &RefineConfig::default()).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn single_frame_has_no_smoothness() {
        let (seq, obs) = clean_clip(1);
        let mut noisy = add_noise(&seq, 0.05, 3).unwrap();
        noisy
            .frames
            .iter_mut()
            .flatten()
            .for_each(|k| k.confidence = 1.0);
        let problem = RefineProblem::new(&noisy, &obs, &cam(), &RefineConfig::default()).unwrap();
        assert_eq!(problem.terms(&flatten(&noisy)).unwrap().smooth, 0.0);
    }

    #[test]
    fn gradient_vanishes_at_perfect_fit() {
        let (seq, obs) = clean_clip(60);
        let g = gradient(&seq, &obs, &cam(), &no_smooth()).unwrap();
        let worst = g
            .iter()
            .flatten()
            .flatten()
            .fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(worst < 1e-12, "{worst}");
    }

    fn random_problem(seed: u64) -> (PoseSequence, PoseSequence, RefineConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (seq, mut obs) = clean_clip(6);
        let p = add_noise(&seq, 0.05, seed).unwrap();
        for k in obs.frames.iter_mut().flatten() {
            k.coords[0] += rng.random_range(-20.0..20.0);
            k.coords[1] += rng.random_range(-20.0..20.0);
            k.confidence = rng.random_range(0.0..=1.0);
        }
        let cfg = RefineConfig {
            lambda_bone: rng.random_range(0.1..10.0),
            lambda_smooth: rng.random_range(0.01..1.0),
            ..Default::default()
        };
        (p, obs, cfg)
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..10 {
            let (p, obs, cfg) = random_problem(seed);
            let err = check_gradient(&p, &obs, &cam(), &cfg, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn gradient_is_linear_in_bone_weight() {
        let (p, obs, cfg) = random_problem(99);
        let with = |lb: f64| {
            let cfg = RefineConfig {
                lambda_bone: lb,
                ..cfg.clone()
            };
            gradient(&p, &obs, &cam(), &cfg).unwrap()
        };
        let (g0, ga, g2a) = (with(0.0), with(1.7), with(3.4));
        for ((a, b), c) in g0
            .iter()
            .flatten()
            .zip(ga.iter().flatten())
            .zip(g2a.iter().flatten())
        {
            for k in 0..3 {
                let lhs = c[k] - a[k];
                let rhs = 2.0 * (b[k] - a[k]);
                assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn regularizers_are_translation_invariant() {
        let (p, mut obs, cfg) = random_problem(5);
        obs.frames
            .iter_mut()
            .flatten()
            .for_each(|k| k.confidence = 0.0);
        let problem = RefineProblem::new(&p, &obs, &cam(), &cfg).unwrap();
        let x = flatten(&p);
        let shifted: Vec<_> = x
            .iter()
            .map(|v| [v[0] + 0.3, v[1] - 1.1, v[2] + 2.0])
            .collect();
        let a = problem.terms(&x).unwrap();
        let b = problem.terms(&shifted).unwrap();
        assert!((a.bone - b.bone).abs() < 1e-10 * a.bone.max(1.0));
        assert!((a.smooth - b.smooth).abs() < 1e-10 * a.smooth.max(1.0));
    }

    #[test]
    fn affine_trajectory_is_a_fixed_point_of_smoothing() {
        let t = SkeletonTopology::coco17();
        let frames: Vec<_> = (0..40)
            .map(|i| {
                let s = i as f64 / 60.0;
                (0..17)
                    .map(|j| {
                        let j = j as f64;
                        Keypoint::new3(
                            0.1 * j + 0.5 * s,
                            -0.2 * j + 0.25 * s,
                            5.0 + 0.01 * j - 0.3 * s,
                            1.0,
                        )
                    })
                    .collect()
            })
            .collect();
        let p = PoseSequence::new(t.clone(), Dims::Three, 60.0, frames);
        let obs = PoseSequence::new(t, Dims::Two, 60.0, vec![vec![Keypoint::missing(); 17]; 40]);
        let cfg = RefineConfig {
            lambda_bone: 0.0,
            ..Default::default()
        };
        let g = gradient(&p, &obs, &cam(), &cfg).unwrap();
        assert!(g.iter().flatten().flatten().all(|v| v.abs() < 1e-12));
        let r = refine_sequence(&p, &obs, &cam(), &cfg).unwrap();
        assert!(r.converged);
        assert!(mean_joint_error(&r.refined, &p) < 1e-12);
    }

    #[test]
    fn clean_start_converges_immediately() {
        let (seq, obs) = clean_clip(600);
        let r = refine_sequence(&seq, &obs, &cam(), &no_smooth()).unwrap();
        assert!(r.converged);
        assert!(r.iterations_run <= 5, "{} iterations", r.iterations_run);
        let worst = flatten(&seq)
            .iter()
            .zip(flatten(&r.refined))
            .map(|(a, b)| norm(sub(*a, b)))
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-6);
    }

    #[test]
    fn f32_rounded_clean_start_stops_at_the_floor() {
        let (mut seq, mut obs) = clean_clip(600);
        for k in seq.frames.iter_mut().chain(obs.frames.iter_mut()).flatten() {
            k.coords = k.coords.map(|c| c as f32 as f64);
        }
        let r = refine_sequence(&seq, &obs, &cam(), &no_smooth()).unwrap();
        assert!(r.converged);
        assert!(r.iterations_run <= 5, "{} iterations", r.iterations_run);

        let exact = RefineConfig {
            abs_tol: 0.0,
            max_iters: 5,
            ..no_smooth()
        };
        let r = refine_sequence(&seq, &obs, &cam(), &exact).unwrap();
        assert!(!r.converged);
    }

    #[test]
    fn noisy_start_halves_error_with_monotone_trace() {
        let (clean, obs) = clean_clip(600);
        let noisy = add_noise(&clean, 0.02, 11).unwrap();
        let r = refine_sequence(&noisy, &obs, &cam(), &RefineConfig::default()).unwrap();
        let before = mean_joint_error(&noisy, &clean);
        let after = mean_joint_error(&r.refined, &clean);
        assert!(after <= 0.5 * before, "{before} -> {after}");
        assert!(r.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.refined.len(), noisy.len());
    }

    fn bone_sd(s: &PoseSequence) -> f64 {
        let l = bone_lengths(s).unwrap();
        let nb = l[0].len();
        (0..nb)
            .map(|b| {
                let m = l.iter().map(|r| r[b]).sum::<f64>() / l.len() as f64;
                (l.iter().map(|r| (r[b] - m).powi(2)).sum::<f64>() / l.len() as f64).sqrt()
            })
            .sum::<f64>()
            / nb as f64
    }

    #[test]
    fn strong_bone_weight_stabilizes_lengths() {
        let (clean, obs) = clean_clip(300);
        let noisy = add_noise(&clean, 0.02, 4).unwrap();
        let cfg = RefineConfig {
            lambda_bone: 1e3,
            ..Default::default()
        };
        let r = refine_sequence(&noisy, &obs, &cam(), &cfg).unwrap();
        assert!(bone_sd(&r.refined) * 10.0 < bone_sd(&noisy));
    }

    #[test]
    fn refinement_is_bit_reproducible() {
        let (clean, obs) = clean_clip(120);
        let noisy = add_noise(&clean, 0.02, 2).unwrap();
        let a = refine_sequence(&noisy, &obs, &cam(), &RefineConfig::default()).unwrap();
        let b = refine_sequence(&noisy, &obs, &cam(), &RefineConfig::default()).unwrap();
        assert_eq!(a.refined, b.refined);
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn input_errors() {
        let (seq, obs) = clean_clip(20);
        let (short, _) = clean_clip(10);
        assert!(matches!(
            refine_sequence(&short, &obs, &cam(), &RefineConfig::default()),
            Err(RefineError::Shape(_))
        ));
        let mut behind = seq.clone();
        behind.frames[4][3].coords[2] = -0.5;
        match objective(&behind, &obs, &cam(), &RefineConfig::default()) {
            Err(RefineError::Depth { frame, joint, .. }) => assert_eq!((frame, joint), (4, 3)),
            other => panic!("{other:?}"),
        }
        let bad = RefineConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(matches!(
            refine_sequence(&seq, &obs, &cam(), &bad),
            Err(RefineError::Config(_))
        ));
        let bad = RefineConfig {
            abs_tol: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            refine_sequence(&seq, &obs, &cam(), &bad),
            Err(RefineError::Config(_))
        ));
        assert!(matches!(
            refine_sequence(&obs, &obs, &cam(), &RefineConfig::default()),
            Err(RefineError::Skeleton(_))
        ));
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let csv = trace_csv(&[2.0, 1.0]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,objective");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,1.0"));
    }
}
