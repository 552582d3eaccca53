//! Synthetic ground truth: camera trajectories, their frame-to-frame motions,
//! and condition vectors standing in for encoded optical flow.
//!
//! The condition encoder lifts a motion through a fixed, seeded random map.
//! Its ambiguity dial attenuates the feature that carries translation scale,
//! which mimics the scale ambiguity of monocular input: at ambiguity 1 two
//! motions that differ only in translation magnitude produce the same
//! condition.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flowmatch::TrainingPair;
use crate::rng;
use crate::se3::{exp_map, pose_to_state, MotionState, RelativePose, Rotation};
use crate::vfnet::{ConditionVector, LineReader};

/// Rotation magnitude cap for generated motions (the so(3) chart is
/// discontinuous at π).
pub const MAX_STEP_ROTATION: f64 = 0.9 * PI;
pub const MIN_STEP_TRANSLATION: f64 = 0.01;
pub const MAX_STEP_TRANSLATION: f64 = 1.0;
pub const FRAME_INTERVAL: f64 = 0.1;

/// Timestamped absolute world-from-camera poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub stamps: Vec<f64>,
    pub poses: Vec<RelativePose>,
}

impl Trajectory {
    pub fn new(stamps: Vec<f64>, poses: Vec<RelativePose>) -> Result<Self> {
        if stamps.len() != poses.len() {
            return Err(Error::LengthMismatch {
                left: stamps.len(),
                right: poses.len(),
            });
        }
        if stamps.iter().any(|s| !s.is_finite()) || stamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "timestamps must be finite and strictly increasing".into(),
            ));
        }
        if poses.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pose".into()));
        }
        Ok(Self { stamps, poses })
    }

    /// Poses stamped `0, Δ, 2Δ, ...` with `Δ` = [`FRAME_INTERVAL`].
    pub fn uniform(poses: Vec<RelativePose>) -> Self {
        let stamps = (0..poses.len()).map(|i| i as f64 * FRAME_INTERVAL).collect();
        Self { stamps, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// `inverse(pose_i) · pose_{i+1}` for each consecutive pair.
    pub fn relative_poses(&self) -> Vec<RelativePose> {
        self.poses
            .windows(2)
            .map(|w| w[0].inverse().compose(&w[1]))
            .collect()
    }

    /// Largest distance between any two positions.
    pub fn diameter(&self) -> f64 {
        let p = self.positions();
        let mut d: f64 = 0.0;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                d = d.max((p[i] - p[j]).norm());
            }
        }
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryKind {
    Line,
    Arc,
    Figure8,
    RandomWalk,
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(Self::Line),
            "arc" => Ok(Self::Arc),
            "figure8" => Ok(Self::Figure8),
            "random-walk" => Ok(Self::RandomWalk),
            other => Err(Error::InvalidArgument(format!("unknown trajectory kind {other:?}"))),
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Line => "line",
            Self::Arc => "arc",
            Self::Figure8 => "figure8",
            Self::RandomWalk => "random-walk",
        })
    }
}

fn yaw_pitch(yaw: f64, pitch: f64) -> Rotation {
    let rz = exp_map(&Vector3::new(0.0, 0.0, yaw)).expect("finite yaw");
    let ry = exp_map(&Vector3::new(0.0, pitch, 0.0)).expect("finite pitch");
    rz.compose(&ry)
}

fn chain(start: RelativePose, rels: impl IntoIterator<Item = RelativePose>) -> Vec<RelativePose> {
    let mut poses = vec![start];
    for r in rels {
        let next = poses.last().expect("nonempty").compose(&r);
        poses.push(next);
    }
    poses
}

// Gerono lemniscate with a vertical undulation; the camera's x axis follows
// the tangent.
fn figure8_point(s: f64, size: f64) -> (Vector3<f64>, Rotation) {
    let p = Vector3::new(size * s.sin(), size * s.sin() * s.cos(), 0.1 * size * (2.0 * s).sin());
    let d = Vector3::new(s.cos(), (2.0 * s).cos(), 0.2 * (2.0 * s).cos());
    let yaw = d.y.atan2(d.x);
    let pitch = -d.z.atan2(d.x.hypot(d.y));
    (p, yaw_pitch(yaw, pitch))
}

fn figure8(n: usize) -> Vec<RelativePose> {
    // one full loop for n ≥ 16 frames, a partial loop otherwise
    let ds = TAU / n.max(16) as f64;
    let s0 = 0.25 * ds;
    let chords: Vec<f64> = (0..n - 1)
        .map(|i| (figure8_point(s0 + (i + 1) as f64 * ds, 1.0).0 - figure8_point(s0 + i as f64 * ds, 1.0).0).norm())
        .collect();
    let (lo, hi) = chords
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), c| (lo.min(*c), hi.max(*c)));
    let size = 4.0f64
        .max(1.01 * MIN_STEP_TRANSLATION / lo)
        .min(0.99 * MAX_STEP_TRANSLATION / hi);
    (0..n)
        .map(|i| {
            let (p, r) = figure8_point(s0 + i as f64 * ds, size);
            RelativePose::new(r, p)
        })
        .collect()
}

/// Generates an `n`-frame absolute trajectory of the given shape.
pub fn make_trajectory<R: Rng + ?Sized>(kind: TrajectoryKind, n: usize, rng: &mut R) -> Result<Trajectory> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("trajectory needs n >= 2, got {n}")));
    }
    let poses = match kind {
        TrajectoryKind::Line => chain(
            RelativePose::identity(),
            std::iter::repeat_n(RelativePose::from_translation(Vector3::x()), n - 1),
        ),
        TrajectoryKind::Arc => {
            let (radius, step): (f64, f64) = (5.0, 0.25);
            let w = step / radius;
            let rel = RelativePose::new(
                exp_map(&Vector3::new(0.0, 0.0, w))?,
                Vector3::new(radius * w.sin(), radius * (1.0 - w.cos()), 0.0),
            );
            chain(RelativePose::identity(), std::iter::repeat_n(rel, n - 1))
        }
        TrajectoryKind::Figure8 => figure8(n),
        TrajectoryKind::RandomWalk => {
            let rels: Vec<RelativePose> = (0..n - 1)
                .map(|_| {
                    let rho = Vector3::from_fn(|_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
                    let dir = Vector3::new(
                        1.0,
                        0.2 * rng.sample::<f64, _>(StandardNormal),
                        0.2 * rng.sample::<f64, _>(StandardNormal),
                    )
                    .normalize();
                    let len = rng.random_range(0.1..0.5);
                    RelativePose::new(exp_map(&rho).expect("finite"), dir * len)
                })
                .collect();
            chain(RelativePose::identity(), rels)
        }
    };
    Ok(Trajectory::uniform(poses))
}

/// Seeded random lift from motion features to condition vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionLift {
    k: usize,
    seed: u64,
    linear: Vec<f64>,
    freq: Vec<f64>,
    phase: Vec<f64>,
}

/// Number of motion features: scaled rotation vector, translation
/// direction, translation scale.
const FEATURES: usize = 7;
const SCALE_FEATURE: usize = 6;
/// Feature normalization: typical frame-to-frame rotation (rad) and translation (m).
pub const ROT_SCALE: f64 = 0.1;
pub const TRANS_SCALE: f64 = 0.25;

impl ConditionLift {
    pub fn new(k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("condition dimension must be positive".into()));
        }
        let mut r = rng::seeded(seed);
        let n_lin = k.div_ceil(2);
        let n_sin = k - n_lin;
        let gain = 1.0 / (FEATURES as f64).sqrt();
        let linear = (0..n_lin * FEATURES)
            .map(|_| gain * r.sample::<f64, _>(StandardNormal))
            .collect();
        let freq = (0..n_sin * FEATURES)
            .map(|_| r.sample::<f64, _>(StandardNormal))
            .collect();
        let phase = (0..n_sin).map(|_| r.random_range(0.0..TAU)).collect();
        Ok(Self {
            k,
            seed,
            linear,
            freq,
            phase,
        })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn features(rel: &RelativePose, ambiguity: f64) -> [f64; FEATURES] {
        let s = pose_to_state(rel);
        let norm = s.trans.norm();
        let dir = if norm > 0.0 { s.trans / norm } else { Vector3::zeros() };
        let mut z = [0.0; FEATURES];
        for i in 0..3 {
            z[i] = s.rho[i] / ROT_SCALE;
            z[3 + i] = dir[i];
        }
        z[SCALE_FEATURE] = (1.0 - ambiguity) * norm / TRANS_SCALE;
        z
    }

    /// Encodes a motion; `noise_sigma > 0` adds Gaussian noise drawn from `rng`.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        rel: &RelativePose,
        ambiguity: f64,
        noise_sigma: f64,
        rng: &mut R,
    ) -> Result<ConditionVector> {
        if !(0.0..=1.0).contains(&ambiguity) {
            return Err(Error::InvalidArgument(format!("ambiguity {ambiguity} outside [0, 1]")));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma} must be >= 0")));
        }
        if !rel.is_finite() {
            return Err(Error::InvalidArgument("non-finite pose".into()));
        }
        let z = Self::features(rel, ambiguity);
        let dot = |row: &[f64]| row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
        let mut c: Vec<f64> = self.linear.chunks_exact(FEATURES).map(dot).collect();
        c.extend(
            self.freq
                .chunks_exact(FEATURES)
                .zip(&self.phase)
                .map(|(row, ph)| (dot(row) + ph).sin()),
        );
        if noise_sigma > 0.0 {
            for v in &mut c {
                *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(ConditionVector(c))
    }
}

/// Encodes `rel` with the given dial settings.
pub fn encode_condition<R: Rng + ?Sized>(
    lift: &ConditionLift,
    rel: &RelativePose,
    ambiguity: f64,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<ConditionVector> {
    lift.encode(rel, ambiguity, noise_sigma, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub gt_trajectory: Trajectory,
    pub pairs: Vec<TrainingPair>,
    pub ambiguity: f64,
    pub noise_sigma: f64,
    pub lift_seed: u64,
}

impl Scenario {
    /// One training pair per consecutive frame pair of `trajectory`.
    pub fn from_trajectory<R: Rng + ?Sized>(
        name: impl Into<String>,
        trajectory: Trajectory,
        lift: &ConditionLift,
        ambiguity: f64,
        noise_sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let pairs = trajectory
            .relative_poses()
            .iter()
            .map(|rel| {
                Ok(TrainingPair {
                    target: pose_to_state(rel),
                    cond: lift.encode(rel, ambiguity, noise_sigma, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.into(),
            gt_trajectory: trajectory,
            pairs,
            ambiguity,
            noise_sigma,
            lift_seed: lift.seed(),
        })
    }

    pub fn dataset(&self, k: usize) -> DatasetFile {
        DatasetFile {
            k,
            lift_seed: self.lift_seed,
            ambiguity: self.ambiguity,
            noise: self.noise_sigma,
            rows: self
                .pairs
                .iter()
                .map(|p| DatasetRow {
                    target: Some(p.target),
                    cond: p.cond.clone(),
                })
                .collect(),
        }
    }
}

/// The two motions of the bimodal dataset.
pub fn bimodal_modes() -> [MotionState; 2] {
    [
        MotionState::new(Vector3::new(0.2, -0.1, 0.05), Vector3::new(0.5, 0.2, -0.3)),
        MotionState::new(Vector3::new(-0.2, 0.1, -0.05), Vector3::new(-0.4, 0.3, 0.3)),
    ]
}

/// `n` pairs sharing one condition; targets are one of two motions, 50/50.
pub fn make_bimodal_dataset<R: Rng + ?Sized>(
    n: usize,
    lift: &ConditionLift,
    rng: &mut R,
) -> Result<Vec<TrainingPair>> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!("bimodal dataset needs an even n >= 2, got {n}")));
    }
    let [a, b] = bimodal_modes();
    let mid = MotionState::from_array(std::array::from_fn(|i| 0.5 * (a.to_array()[i] + b.to_array()[i])));
    let cond = lift.encode(&crate::se3::state_to_pose(&mid)?, 0.0, 0.0, rng)?;
    Ok((0..n)
        .map(|_| TrainingPair {
            target: if rng.random_bool(0.5) { a } else { b },
            cond: cond.clone(),
        })
        .collect())
}

/// The motion used for single-target datasets.
pub fn dirac_target() -> MotionState {
    MotionState::new(Vector3::new(0.05, -0.12, 0.3), Vector3::new(0.4, -0.1, 0.2))
}

/// `n` copies of one pair: a point-mass target distribution.
pub fn make_dirac_dataset(n: usize, target: MotionState, lift: &ConditionLift) -> Result<Vec<TrainingPair>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs n >= 1".into()));
    }
    let cond = lift.encode(&crate::se3::state_to_pose(&target)?, 0.0, 0.0, &mut rng::seeded(0))?;
    Ok(vec![TrainingPair { target, cond }; n])
}

/// Independent random motions whose translation magnitude is uniform in
/// `[0.1, 1.0]` m; the ambiguity dial controls how much of that magnitude the
/// condition reveals.
pub fn make_scale_ambiguity_dataset<R: Rng + ?Sized>(
    n: usize,
    lift: &ConditionLift,
    ambiguity: f64,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Vec<TrainingPair>> {
    (0..n)
        .map(|_| {
            let rho = Vector3::from_fn(|_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
            let dir = Vector3::new(
                1.0,
                0.3 * rng.sample::<f64, _>(StandardNormal),
                0.3 * rng.sample::<f64, _>(StandardNormal),
            )
            .normalize();
            let rel = RelativePose::new(exp_map(&rho)?, dir * rng.random_range(0.1..1.0));
            Ok(TrainingPair {
                target: pose_to_state(&rel),
                cond: lift.encode(&rel, ambiguity, noise_sigma, rng)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRow {
    pub target: Option<MotionState>,
    pub cond: ConditionVector,
}

/// Text dataset: `#key=value` header lines, then one CSV row per pair
/// (`rho_x,rho_y,rho_z,t_x,t_y,t_z,c_1..c_k`, or `c_1..c_k` alone for
/// condition-only rows).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub k: usize,
    pub lift_seed: u64,
    pub ambiguity: f64,
    pub noise: f64,
    pub rows: Vec<DatasetRow>,
}

impl DatasetFile {
    pub fn from_pairs(pairs: &[TrainingPair], k: usize, lift_seed: u64, ambiguity: f64, noise: f64) -> Self {
        Self {
            k,
            lift_seed,
            ambiguity,
            noise,
            rows: pairs
                .iter()
                .map(|p| DatasetRow {
                    target: Some(p.target),
                    cond: p.cond.clone(),
                })
                .collect(),
        }
    }

    pub fn pairs(&self) -> Vec<TrainingPair> {
        self.rows
            .iter()
            .filter_map(|r| {
                r.target.map(|target| TrainingPair {
                    target,
                    cond: r.cond.clone(),
                })
            })
            .collect()
    }

    pub fn conditions(&self) -> Vec<ConditionVector> {
        self.rows.iter().map(|r| r.cond.clone()).collect()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "#k={}", self.k)?;
        writeln!(w, "#lift_seed={}", self.lift_seed)?;
        writeln!(w, "#ambiguity={}", self.ambiguity)?;
        writeln!(w, "#noise={}", self.noise)?;
        for row in &self.rows {
            let mut fields: Vec<String> = Vec::with_capacity(6 + self.k);
            if let Some(t) = row.target {
                fields.extend(t.to_array().iter().map(|v| v.to_string()));
            }
            fields.extend(row.cond.values().iter().map(|v| v.to_string()));
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R, source: &Path) -> Result<Self> {
        let mut r = LineReader::new(reader, source);
        let mut k: Option<usize> = None;
        let mut lift_seed = 0;
        let mut ambiguity = 0.0;
        let mut noise = 0.0;
        let mut rows = Vec::new();
        while let Some(line) = r.next_line()? {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let Some((key, value)) = meta.split_once('=') else {
                    continue;
                };
                let value = value.trim();
                let bad = |r: &LineReader<R>| r.err(format!("bad value for {}: {value:?}", key.trim()));
                match key.trim() {
                    "k" => k = Some(value.parse().map_err(|_| bad(&r))?),
                    "lift_seed" => lift_seed = value.parse().map_err(|_| bad(&r))?,
                    "ambiguity" => ambiguity = value.parse().map_err(|_| bad(&r))?,
                    "noise" => noise = value.parse().map_err(|_| bad(&r))?,
                    _ => {}
                }
                continue;
            }
            let k = k.ok_or_else(|| r.err("data row before the `#k=` header"))?;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| r.err(format!("bad number {s:?}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(r.err(format!("non-finite value {s:?}")))
                }
            };
            let (target, cond_fields) = if fields.len() == k {
                (None, &fields[..])
            } else if fields.len() == 6 + k {
                let gt = &fields[..6];
                if gt.iter().all(|f| f.is_empty()) {
                    (None, &fields[6..])
                } else {
                    let mut a = [0.0; 6];
                    for (slot, f) in a.iter_mut().zip(gt) {
                        *slot = parse(f)?;
                    }
                    (Some(MotionState::from_array(a)), &fields[6..])
                }
            } else {
                return Err(r.err(format!(
                    "expected {k} or {} fields, found {}",
                    k + 6,
                    fields.len()
                )));
            };
            let cond = cond_fields.iter().map(|f| parse(f)).collect::<Result<Vec<_>>>()?;
            rows.push(DatasetRow {
                target,
                cond: ConditionVector(cond),
            });
        }
        let k = k.ok_or_else(|| r.err("missing `#k=` header"))?;
        Ok(Self {
            k,
            lift_seed,
            ambiguity,
            noise,
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f), path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Reads a feature file: every row yields its condition, and rows carrying
/// ground truth also yield a training pair.
pub fn ingest_features(path: &Path) -> Result<Vec<(ConditionVector, Option<TrainingPair>)>> {
    let file = DatasetFile::load(path)?;
    Ok(file
        .rows
        .into_iter()
        .map(|row| {
            let pair = row.target.map(|target| TrainingPair {
                target,
                cond: row.cond.clone(),
            });
            (row.cond, pair)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::se3::{geodesic_angle, state_to_pose};

    fn assert_pose_close(a: &RelativePose, b: &RelativePose, tol: f64) {
        assert!(geodesic_angle(&a.rotation, &b.rotation) < tol);
        assert!((a.translation - b.translation).norm() < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn line_has_unit_x_steps() {
        let t = make_trajectory(TrajectoryKind::Line, 3, &mut seeded(0)).unwrap();
        for rel in t.relative_poses() {
            assert_pose_close(&rel, &RelativePose::from_translation(Vector3::x()), 1e-15);
        }
        assert_eq!(t.stamps.len(), 3);
    }

    #[test]
    fn arc_has_identical_steps() {
        let t = make_trajectory(TrajectoryKind::Arc, 50, &mut seeded(0)).unwrap();
        let rels = t.relative_poses();
        for r in &rels {
            assert_pose_close(r, &rels[0], 1e-9);
        }
    }

    #[test]
    fn random_walk_is_seed_reproducible() {
        let a = make_trajectory(TrajectoryKind::RandomWalk, 30, &mut seeded(4)).unwrap();
        let b = make_trajectory(TrajectoryKind::RandomWalk, 30, &mut seeded(4)).unwrap();
        let c = make_trajectory(TrajectoryKind::RandomWalk, 30, &mut seeded(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn step_magnitudes_are_bounded() {
        for kind in [
            TrajectoryKind::Line,
            TrajectoryKind::Arc,
            TrajectoryKind::Figure8,
            TrajectoryKind::RandomWalk,
        ] {
            for n in [2, 3, 7, 16, 200, 5000] {
                let t = make_trajectory(kind, n, &mut seeded(n as u64)).unwrap();
                assert_eq!(t.len(), n);
                for rel in t.relative_poses() {
                    let s = pose_to_state(&rel);
                    assert!(s.rho.norm() <= MAX_STEP_ROTATION, "{kind} n={n}");
                    let d = s.trans.norm();
                    assert!(
                        (MIN_STEP_TRANSLATION..=MAX_STEP_TRANSLATION).contains(&d),
                        "{kind} n={n}: step {d}"
                    );
                }
            }
        }
        assert!(make_trajectory(TrajectoryKind::Line, 1, &mut seeded(0)).is_err());
        assert!("spiral".parse::<TrajectoryKind>().is_err());
    }

    #[test]
    fn scenario_pairs_chain_back_to_trajectory() {
        let lift = ConditionLift::new(16, 3).unwrap();
        let traj = make_trajectory(TrajectoryKind::Figure8, 200, &mut seeded(1)).unwrap();
        let sc = Scenario::from_trajectory("f8", traj.clone(), &lift, 0.0, 0.0, &mut seeded(2)).unwrap();
        assert_eq!(sc.pairs.len(), traj.len() - 1);
        let mut pose = traj.poses[0];
        for (i, p) in sc.pairs.iter().enumerate() {
            pose = pose.compose(&state_to_pose(&p.target).unwrap());
            assert_pose_close(&pose, &traj.poses[i + 1], 1e-9);
        }
    }

    #[test]
    fn trajectory_validation() {
        let p = vec![RelativePose::identity(); 2];
        assert!(Trajectory::new(vec![0.0, 0.0], p.clone()).is_err());
        assert!(Trajectory::new(vec![0.0], p.clone()).is_err());
        assert!(Trajectory::new(vec![0.0, 1.0], p).is_ok());
    }

    #[test]
    fn noiseless_encoding_is_injective() {
        let lift = ConditionLift::new(16, 11).unwrap();
        let mut rng = seeded(12);
        let mut conds = Vec::new();
        for _ in 0..1000 {
            let rho = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            let t = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let rel = RelativePose::new(exp_map(&rho).unwrap(), t);
            conds.push(lift.encode(&rel, 0.0, 0.0, &mut rng).unwrap());
        }
        let mut min = f64::INFINITY;
        for i in 0..conds.len() {
            for j in i + 1..conds.len() {
                let d: f64 = conds[i].0.iter().zip(&conds[j].0).map(|(a, b)| (a - b).powi(2)).sum();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn full_ambiguity_hides_translation_scale() {
        let lift = ConditionLift::new(16, 11).unwrap();
        let r = exp_map(&Vector3::new(0.02, -0.03, 0.1)).unwrap();
        let dir = Vector3::new(0.8, 0.1, -0.2);
        let a = lift.encode(&RelativePose::new(r, dir * 0.2), 1.0, 0.0, &mut seeded(0)).unwrap();
        let b = lift.encode(&RelativePose::new(r, dir * 0.9), 1.0, 0.0, &mut seeded(0)).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-9);
        }
        let c = lift.encode(&RelativePose::new(r, dir * 0.9), 0.0, 0.0, &mut seeded(0)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_encoding_is_deterministic() {
        let rel = RelativePose::new(exp_map(&Vector3::new(0.1, 0.0, 0.0)).unwrap(), Vector3::new(0.3, 0.0, 0.1));
        let a = ConditionLift::new(16, 5).unwrap().encode(&rel, 0.3, 0.0, &mut seeded(1)).unwrap();
        let b = ConditionLift::new(16, 5).unwrap().encode(&rel, 0.3, 0.0, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        let lift = ConditionLift::new(16, 5).unwrap();
        assert!(lift.encode(&rel, 1.2, 0.0, &mut seeded(1)).is_err());
        assert!(lift.encode(&rel, 0.0, -1.0, &mut seeded(1)).is_err());
    }

    fn spearman(x: &[f64], y: &[f64]) -> f64 {
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = vec![0.0; v.len()];
            for (pos, &i) in idx.iter().enumerate() {
                r[i] = pos as f64;
            }
            r
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    #[test]
    fn ambiguity_increases_neighbourhood_scale_variance() {
        let lift = ConditionLift::new(16, 21).unwrap();
        let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mut spread = Vec::new();
        for (li, &a) in levels.iter().enumerate() {
            let data = make_scale_ambiguity_dataset(1500, &lift, a, 0.05, &mut seeded(100 + li as u64)).unwrap();
            let scales: Vec<f64> = data.iter().map(|p| p.target.trans.norm()).collect();
            let mut total = 0.0;
            for i in 0..data.len() {
                let mut d: Vec<(f64, usize)> = (0..data.len())
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d = data[i].cond.0.iter().zip(&data[j].cond.0).map(|(x, y)| (x - y).powi(2)).sum();
                        (d, j)
                    })
                    .collect();
                d.select_nth_unstable_by(10, |a, b| a.0.total_cmp(&b.0));
                let nn: Vec<f64> = d[..10].iter().map(|(_, j)| scales[*j]).collect();
                let mean = nn.iter().sum::<f64>() / 10.0;
                total += nn.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 10.0;
            }
            spread.push(total / data.len() as f64);
        }
        let rho = spearman(&levels, &spread);
        assert!(rho > 0.9, "spread {spread:?}, spearman {rho}");
    }

    #[test]
    fn bimodal_dataset_properties() {
        let lift = ConditionLift::new(16, 1).unwrap();
        let data = make_bimodal_dataset(1000, &lift, &mut seeded(3)).unwrap();
        assert!(data.iter().all(|p| p.cond == data[0].cond));
        let [a, b] = bimodal_modes();
        let sep: f64 = (0..6).map(|i| (a.to_array()[i] - b.to_array()[i]).powi(2)).sum::<f64>().sqrt();
        assert!(sep >= 0.5);
        let frac_a = data.iter().filter(|p| p.target == a).count() as f64 / 1000.0;
        assert!((frac_a - 0.5).abs() < 0.05, "{frac_a}");
        // 2-means clustering oracle
        let pts: Vec<[f64; 6]> = data.iter().map(|p| p.target.to_array()).collect();
        let mut centers = [pts[0], *pts.iter().find(|p| **p != pts[0]).unwrap()];
        let mut assign = vec![0usize; pts.len()];
        for _ in 0..10 {
            for (i, p) in pts.iter().enumerate() {
                let d = |c: &[f64; 6]| (0..6).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
                assign[i] = usize::from(d(&centers[1]) < d(&centers[0]));
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&[f64; 6]> = pts.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
                *center = std::array::from_fn(|k| members.iter().map(|m| m[k]).sum::<f64>() / members.len() as f64);
            }
        }
        for (p, c) in data.iter().zip(&assign) {
            let t = p.target.to_array();
            assert!((0..6).all(|k| (t[k] - centers[*c][k]).abs() < 1e-12));
        }
        assert!(make_bimodal_dataset(3, &lift, &mut seeded(3)).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let lift = ConditionLift::new(4, 9).unwrap();
        let traj = make_trajectory(TrajectoryKind::RandomWalk, 6, &mut seeded(1)).unwrap();
        let sc = Scenario::from_trajectory("rw", traj, &lift, 0.25, 0.1, &mut seeded(2)).unwrap();
        let mut file = sc.dataset(4);
        file.rows.push(DatasetRow {
            target: None,
            cond: ConditionVector(vec![0.1, 0.2, 0.3, 1e-300]),
        });
        let mut buf = Vec::new();
        file.write(&mut buf).unwrap();
        let back = DatasetFile::read(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.pairs().len(), 5);
        assert_eq!(back.conditions().len(), 6);
    }

    #[test]
    fn ingest_hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        std::fs::write(
            &path,
            "#k=2\n#lift_seed=7\n#ambiguity=0.5\n#noise=0\n\
             0.1,0,0,1,2,3,0.5,-0.5\n\
             ,,,,,,1.5,2.5\n\
             -1e-3,4.25\n",
        )
        .unwrap();
        let rows = ingest_features(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].0, ConditionVector(vec![0.5, -0.5]));
        let p = rows[0].1.as_ref().unwrap();
        assert_eq!(p.target.to_array(), [0.1, 0.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(rows[1], (ConditionVector(vec![1.5, 2.5]), None));
        assert_eq!(rows[2], (ConditionVector(vec![-1e-3, 4.25]), None));
        let file = DatasetFile::load(&path).unwrap();
        assert_eq!((file.lift_seed, file.ambiguity, file.noise), (7, 0.5, 0.0));
    }

    #[test]
    fn ingest_empty_body_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "#k=3\n").unwrap();
        assert!(ingest_features(&path).unwrap().is_empty());

        std::fs::write(&path, "#k=3\n1,2,3\n1,2\n").unwrap();
        match ingest_features(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        std::fs::write(&path, "#k=3\n1,2,x\n").unwrap();
        assert!(matches!(ingest_features(&path), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&path, "1,2,3\n").unwrap();
        assert!(ingest_features(&path).is_err());
        assert!(matches!(
            ingest_features(&dir.path().join("missing.csv")),
            Err(Error::Io { .. })
        ));
    }
}
