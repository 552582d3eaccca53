//! Trajectory evaluation: composing relative motions, translation scale
//! alignment, closed-form similarity alignment and absolute trajectory error.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::se3::{geodesic_angle, RelativePose, Rotation};
use crate::synthworld::Trajectory;
use crate::vfnet::LineReader;

/// Point sets whose spread orthogonal to their principal axis is below this
/// (meters, RMS) are treated as collinear.
pub const COLLINEAR_TOL: f64 = 1e-9;
/// Stamp association window for external trajectory files, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AlignMode {
    None,
    Se3,
    #[default]
    Sim3,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleMode {
    #[default]
    PerPair,
    Global,
    None,
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "se3" => Ok(Self::Se3),
            "sim3" => Ok(Self::Sim3),
            other => Err(Error::InvalidArgument(format!("unknown alignment {other:?}"))),
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Se3 => "se3",
            Self::Sim3 => "sim3",
        })
    }
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_pair" => Ok(Self::PerPair),
            "global" => Ok(Self::Global),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidArgument(format!("unknown scale mode {other:?}"))),
        }
    }
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerPair => "per_pair",
            Self::Global => "global",
            Self::None => "none",
        })
    }
}

/// Similarity transform mapping estimated positions onto ground truth,
/// `p ≈ scale · rotation · p̂ + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentResult {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    pub ate_rmse: f64,
}

impl AlignmentResult {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
            ate_rmse: 0.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation.rotate(p) + self.translation
    }
}

/// `pose_i = start ∘ rel_1 ∘ … ∘ rel_i`, stamped at the frame interval.
pub fn compose_trajectory(start: RelativePose, rels: &[RelativePose]) -> Trajectory {
    let mut poses = Vec::with_capacity(rels.len() + 1);
    poses.push(start);
    for r in rels {
        let next = poses.last().expect("nonempty").compose(r);
        poses.push(next);
    }
    Trajectory::uniform(poses)
}

pub fn scale_align(est: &[RelativePose], gt: &[RelativePose], mode: ScaleMode) -> Result<Vec<RelativePose>> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: est.len(),
            right: gt.len(),
        });
    }
    match mode {
        ScaleMode::None => Ok(est.to_vec()),
        ScaleMode::PerPair => Ok(est
            .iter()
            .zip(gt)
            .map(|(e, g)| {
                let (ne, ng) = (e.translation.norm(), g.translation.norm());
                if ng > 0.0 && ne > 0.0 {
                    RelativePose::new(e.rotation, e.translation * (ng / ne))
                } else {
                    *e
                }
            })
            .collect()),
        ScaleMode::Global => {
            let s = global_scale(est, gt);
            Ok(est
                .iter()
                .map(|e| RelativePose::new(e.rotation, e.translation * s))
                .collect())
        }
    }
}

/// Least-squares scale `Σ⟨t̂,t⟩ / Σ⟨t̂,t̂⟩`; 1 when every estimate is zero.
pub fn global_scale(est: &[RelativePose], gt: &[RelativePose]) -> f64 {
    let num: f64 = est.iter().zip(gt).map(|(e, g)| e.translation.dot(&g.translation)).sum();
    let den: f64 = est.iter().map(|e| e.translation.norm_squared()).sum();
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

fn centered(points: &[Vector3<f64>]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    (mean, points.iter().map(|p| p - mean).collect())
}

fn check_spread(points: &[Vector3<f64>], which: &str) -> Result<()> {
    let n = points.len() as f64;
    let cov = points.iter().map(|p| p * p.transpose()).sum::<Matrix3<f64>>() / n;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[1].max(0.0).sqrt() <= COLLINEAR_TOL {
        return Err(Error::Degenerate(format!("{which} positions are collinear")));
    }
    Ok(())
}

/// Closed-form least-squares similarity (or rigid, without scale) alignment
/// of `est` positions onto `gt` positions.
pub fn umeyama_points(est: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> Result<AlignmentResult> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: est.len(),
            right: gt.len(),
        });
    }
    if est.len() < 3 {
        return Err(Error::Degenerate(format!("alignment needs >= 3 points, got {}", est.len())));
    }
    if est.iter().chain(gt).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidArgument("non-finite position".into()));
    }
    let n = est.len() as f64;
    let (mu_e, ce) = centered(est);
    let (mu_g, cg) = centered(gt);
    check_spread(&ce, "estimated")?;
    check_spread(&cg, "ground-truth")?;

    let sigma = cg.iter().zip(&ce).map(|(g, e)| g * e.transpose()).sum::<Matrix3<f64>>() / n;
    let svd = sigma.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let var_e = ce.iter().map(|p| p.norm_squared()).sum::<f64>() / n;
    let scale = if with_scale {
        (svd.singular_values.component_mul(&s.diagonal())).sum() / var_e
    } else {
        1.0
    };
    let rotation = Rotation::from_matrix(&r)?;
    let translation = mu_g - scale * r * mu_e;
    let mut out = AlignmentResult {
        scale,
        rotation,
        translation,
        ate_rmse: 0.0,
    };
    out.ate_rmse = rmse(est, gt, &out);
    Ok(out)
}

fn rmse(est: &[Vector3<f64>], gt: &[Vector3<f64>], a: &AlignmentResult) -> f64 {
    let sum: f64 = est.iter().zip(gt).map(|(e, g)| (a.apply(e) - g).norm_squared()).sum();
    (sum / est.len() as f64).sqrt()
}

pub fn umeyama_align(est: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<AlignmentResult> {
    umeyama_points(&est.positions(), &gt.positions(), with_scale)
}

/// Alignment for the requested mode (identity for [`AlignMode::None`]).
pub fn align(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<AlignmentResult> {
    match mode {
        AlignMode::None => {
            if est.len() != gt.len() {
                return Err(Error::LengthMismatch {
                    left: est.len(),
                    right: gt.len(),
                });
            }
            let mut a = AlignmentResult::identity();
            a.ate_rmse = rmse(&est.positions(), &gt.positions(), &a);
            Ok(a)
        }
        AlignMode::Se3 => umeyama_align(est, gt, false),
        AlignMode::Sim3 => umeyama_align(est, gt, true),
    }
}

/// Position RMSE after alignment, meters.
pub fn ate(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<f64> {
    if est.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    Ok(align(est, gt, mode)?.ate_rmse)
}

/// RMS geodesic angle between aligned estimated and ground-truth
/// orientations, radians.
pub fn rotation_rmse(est: &Trajectory, gt: &Trajectory, alignment: &AlignmentResult) -> f64 {
    let sum: f64 = est
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(e, g)| {
            // composing with the identity would still renormalize
            let r = if alignment.rotation == Rotation::identity() {
                e.rotation
            } else {
                alignment.rotation.compose(&e.rotation)
            };
            geodesic_angle(&r, &g.rotation).powi(2)
        })
        .sum();
    (sum / est.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub alignment: AlignmentResult,
    pub ate_rmse: f64,
    pub ate_rot_rmse: f64,
}

/// Scale-aligns the estimate's relative motions against ground truth,
/// re-chains them from the estimate's first pose, then aligns and scores.
pub fn evaluate(est: &Trajectory, gt: &Trajectory, align_mode: AlignMode, scale_mode: ScaleMode) -> Result<Evaluation> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: est.len(),
            right: gt.len(),
        });
    }
    if est.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let rels = est.relative_poses();
    let scaled_rels = scale_align(&rels, &gt.relative_poses(), scale_mode)?;
    // re-chaining rounds, so skip it when scaling changed nothing
    let scaled = if scaled_rels == rels {
        est.clone()
    } else {
        let mut t = compose_trajectory(est.poses[0], &scaled_rels);
        t.stamps.clone_from(&est.stamps);
        t
    };
    let alignment = align(&scaled, gt, align_mode)?;
    Ok(Evaluation {
        alignment,
        ate_rmse: alignment.ate_rmse,
        ate_rot_rmse: rotation_rmse(&scaled, gt, &alignment),
    })
}

/// Matches each estimated stamp to the nearest ground-truth stamp within
/// `window` seconds; each ground-truth pose is used at most once. Returns
/// `(est_index, gt_index)` pairs in estimate order.
pub fn associate(est_stamps: &[f64], gt_stamps: &[f64], window: f64) -> Vec<(usize, usize)> {
    let mut used = vec![false; gt_stamps.len()];
    let mut out = Vec::new();
    for (i, &t) in est_stamps.iter().enumerate() {
        let j = gt_stamps.partition_point(|&g| g < t);
        let best = [j.checked_sub(1), Some(j)]
            .into_iter()
            .flatten()
            .filter(|&k| k < gt_stamps.len() && !used[k])
            .min_by(|&a, &b| (gt_stamps[a] - t).abs().total_cmp(&(gt_stamps[b] - t).abs()));
        if let Some(k) = best {
            if (gt_stamps[k] - t).abs() <= window {
                used[k] = true;
                out.push((i, k));
            }
        }
    }
    out
}

/// Restricts both trajectories to associated stamps.
pub fn associated(est: &Trajectory, gt: &Trajectory, window: f64) -> (Trajectory, Trajectory) {
    let pairs = associate(&est.stamps, &gt.stamps, window);
    let pick = |t: &Trajectory, idx: &mut dyn Iterator<Item = usize>| {
        let (s, p): (Vec<f64>, Vec<RelativePose>) = idx.map(|i| (t.stamps[i], t.poses[i])).unzip();
        Trajectory { stamps: s, poses: p }
    };
    (
        pick(est, &mut pairs.iter().map(|p| p.0)),
        pick(gt, &mut pairs.iter().map(|p| p.1)),
    )
}

pub fn write_tum<W: Write>(w: &mut W, traj: &Trajectory) -> std::io::Result<()> {
    for (t, p) in traj.stamps.iter().zip(&traj.poses) {
        let [qw, qx, qy, qz] = p.rotation.wxyz();
        let v = p.translation;
        writeln!(w, "{t} {} {} {} {qx} {qy} {qz} {qw}", v.x, v.y, v.z)?;
    }
    Ok(())
}

fn parse_fields<R: BufRead>(r: &LineReader<R>, line: &str, n: usize) -> Result<Vec<f64>> {
    let vals = line
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| r.err(format!("bad number {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != n {
        return Err(r.err(format!("expected {n} fields, found {}", vals.len())));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(r.err("non-finite value"));
    }
    Ok(vals)
}

pub fn read_tum<R: BufRead>(reader: R, source: &Path) -> Result<Trajectory> {
    let mut r = LineReader::new(reader, source);
    let (mut stamps, mut poses) = (Vec::new(), Vec::new());
    while let Some(line) = r.next_line()? {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_fields(&r, line, 8)?;
        let rot = Rotation::from_wxyz(v[7], v[4], v[5], v[6]).map_err(|e| r.err(e.to_string()))?;
        stamps.push(v[0]);
        poses.push(RelativePose::new(rot, Vector3::new(v[1], v[2], v[3])));
    }
    Trajectory::new(stamps, poses).map_err(|e| r.err(e.to_string()))
}

pub fn write_kitti<W: Write>(w: &mut W, traj: &Trajectory) -> std::io::Result<()> {
    for p in &traj.poses {
        let m = p.matrix();
        let row: Vec<String> = (0..3)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)].to_string())
            .collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

/// KITTI files carry no stamps; poses are stamped at the frame interval.
pub fn read_kitti<R: BufRead>(reader: R, source: &Path) -> Result<Trajectory> {
    let mut r = LineReader::new(reader, source);
    let mut poses = Vec::new();
    while let Some(line) = r.next_line()? {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_fields(&r, line, 12)?;
        let m = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let rot = Rotation::from_matrix(&m).map_err(|e| r.err(e.to_string()))?;
        poses.push(RelativePose::new(rot, Vector3::new(v[3], v[7], v[11])));
    }
    Ok(Trajectory::uniform(poses))
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>> {
    Ok(BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

/// Reads a trajectory; `.kitti` and `.txt` files with 12 columns are KITTI,
/// everything else TUM.
pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'));
    let is_kitti = path.extension().is_some_and(|e| e == "kitti")
        || first.is_some_and(|l| l.split_whitespace().count() == 12);
    if is_kitti {
        read_kitti(open(path)?, path)
    } else {
        read_tum(open(path)?, path)
    }
}

pub fn save_tum(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut buf = Vec::new();
    write_tum(&mut buf, traj).expect("writing to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scenario: String,
    pub align_mode: AlignMode,
    pub scale_mode: ScaleMode,
    pub ate_rmse: f64,
    pub mean_std_rot: f64,
    pub mean_std_trans: f64,
    /// Orientation error after alignment, radians.
    pub ate_rot_rmse: f64,
}

pub const METRICS_HEADER: &str = "scenario,align_mode,scale_mode,ate_rmse,mean_std_rot,mean_std_trans,ate_rot_rmse";

pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.scenario, r.align_mode, r.scale_mode, r.ate_rmse, r.mean_std_rot, r.mean_std_trans, r.ate_rot_rmse
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::se3::{exp_map, sample_uniform_rotation};
    use crate::synthworld::{make_trajectory, TrajectoryKind};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut r = seeded(seed);
        (0..n)
            .map(|_| Vector3::from_fn(|_, _| r.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    fn points_traj(p: &[Vector3<f64>]) -> Trajectory {
        Trajectory::uniform(p.iter().map(|v| RelativePose::from_translation(*v)).collect())
    }

    #[test]
    fn compose_line_and_empty() {
        let t = compose_trajectory(RelativePose::identity(), &[]);
        assert_eq!(t.len(), 1);
        let rels = vec![RelativePose::from_translation(Vector3::x()); 3];
        let t = compose_trajectory(RelativePose::identity(), &rels);
        for (i, p) in t.positions().iter().enumerate() {
            assert_eq!(*p, Vector3::new(i as f64, 0.0, 0.0));
        }
        assert_eq!(t.stamps, vec![0.0, 0.1, 0.2, 0.30000000000000004]);
    }

    #[test]
    fn compose_inverts_relative_poses() {
        let gt = make_trajectory(TrajectoryKind::RandomWalk, 100, &mut seeded(3)).unwrap();
        let t = compose_trajectory(gt.poses[0], &gt.relative_poses());
        for (a, b) in t.poses.iter().zip(&gt.poses) {
            assert!((a.translation - b.translation).norm() < 1e-9);
            assert!(geodesic_angle(&a.rotation, &b.rotation) < 1e-9);
        }
    }

    #[test]
    fn per_pair_scale_alignment() {
        let gt = make_trajectory(TrajectoryKind::RandomWalk, 20, &mut seeded(1)).unwrap().relative_poses();
        assert_eq!(scale_align(&gt, &gt, ScaleMode::PerPair).unwrap(), gt);
        let doubled: Vec<_> = gt.iter().map(|p| RelativePose::new(p.rotation, p.translation * 2.0)).collect();
        let back = scale_align(&doubled, &gt, ScaleMode::PerPair).unwrap();
        for (a, b) in back.iter().zip(&gt) {
            assert!((a.translation - b.translation).norm() < 1e-15);
            assert_eq!(a.rotation, b.rotation);
        }
        let zero_gt = vec![RelativePose::identity()];
        let est = vec![RelativePose::from_translation(Vector3::x())];
        assert_eq!(scale_align(&est, &zero_gt, ScaleMode::PerPair).unwrap(), est);
        assert!(scale_align(&est, &gt, ScaleMode::Global).is_err());
    }

    #[test]
    fn global_scale_matches_line_search() {
        let mut r = seeded(9);
        let est: Vec<_> = (0..30)
            .map(|_| RelativePose::from_translation(Vector3::from_fn(|_, _| r.random_range(-1.0..1.0))))
            .collect();
        let gt: Vec<_> = (0..30)
            .map(|_| RelativePose::from_translation(Vector3::from_fn(|_, _| r.random_range(-1.0..1.0))))
            .collect();
        let cost = |s: f64| -> f64 {
            est.iter()
                .zip(&gt)
                .map(|(e, g)| (e.translation * s - g.translation).norm_squared())
                .sum()
        };
        let (mut lo, mut hi) = (-5.0, 5.0);
        for _ in 0..6 {
            let step = (hi - lo) / 1000.0;
            let best = (0..=1000)
                .map(|i| lo + i as f64 * step)
                .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
                .unwrap();
            (lo, hi) = (best - step, best + step);
        }
        // the cost is flat to rounding within ~1e-8 of its minimum
        let s = global_scale(&est, &gt);
        assert!((s - 0.5 * (lo + hi)).abs() < 1e-6, "{s} vs {lo}");
        assert!(cost(s) <= cost(0.5 * (lo + hi)) + 1e-12);
        let scaled = scale_align(&est, &gt, ScaleMode::Global).unwrap();
        assert_eq!(scaled[3].translation, est[3].translation * s);
    }

    #[test]
    fn umeyama_identity() {
        let p = random_points(20, 1);
        let a = umeyama_points(&p, &p, true).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12);
        assert!(a.rotation.angle() < 1e-9);
        assert!(a.translation.norm() < 1e-12);
        assert!(a.ate_rmse < 1e-12);
    }

    #[test]
    fn umeyama_recovers_known_similarity() {
        let est = random_points(15, 2);
        let rot = exp_map(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)).unwrap();
        let t = Vector3::new(1.0, 2.0, 3.0);
        let gt: Vec<_> = est.iter().map(|p| 2.0 * rot.rotate(p) + t).collect();
        let a = umeyama_points(&est, &gt, true).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-9);
        assert!(geodesic_angle(&a.rotation, &rot) < 1e-9);
        assert!((a.translation - t).norm() < 1e-9);
        assert!(a.ate_rmse < 1e-9);
    }

    #[test]
    fn umeyama_rejects_degenerate_sets() {
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let other = random_points(10, 3);
        assert!(matches!(umeyama_points(&line, &other, true), Err(Error::Degenerate(_))));
        assert!(matches!(umeyama_points(&other, &line, true), Err(Error::Degenerate(_))));
        assert!(umeyama_points(&other[..2], &other[..2], true).is_err());
        assert!(umeyama_points(&other[..5], &other[..4], true).is_err());
    }

    // Coarse-to-fine search over rotation and scale; translation is the
    // centroid offset, which is optimal for any fixed (s, R).
    fn brute_force_rmse(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
        let n = est.len() as f64;
        let me = est.iter().sum::<Vector3<f64>>() / n;
        let mg = gt.iter().sum::<Vector3<f64>>() / n;
        let cost = |s: f64, r: &Rotation| -> f64 {
            let sum: f64 = est
                .iter()
                .zip(gt)
                .map(|(e, g)| (s * r.rotate(&(e - me)) - (g - mg)).norm_squared())
                .sum();
            (sum / n).sqrt()
        };
        let mut rng = seeded(77);
        let mut best_r = Rotation::identity();
        let mut best_s = 1.0;
        let mut best = f64::INFINITY;
        for _ in 0..20_000 {
            let r = sample_uniform_rotation(&mut rng);
            for k in 0..40 {
                let s = 0.1 * 1.1f64.powi(k);
                let c = cost(s, &r);
                if c < best {
                    (best, best_r, best_s) = (c, r, s);
                }
            }
        }
        let mut radius = 0.2;
        let mut log_s_radius = 0.1;
        for _ in 0..60 {
            for _ in 0..400 {
                let d = Vector3::from_fn(|_, _| radius * rng.sample::<f64, _>(StandardNormal));
                let r = best_r.compose(&exp_map(&d).unwrap());
                let s = best_s * (log_s_radius * rng.sample::<f64, _>(StandardNormal)).exp();
                let c = cost(s, &r);
                if c < best {
                    (best, best_r, best_s) = (c, r, s);
                }
            }
            radius *= 0.8;
            log_s_radius *= 0.8;
        }
        best
    }

    #[test]
    fn umeyama_matches_brute_force_search() {
        for seed in 0..3 {
            let est = random_points(10, 10 + seed);
            let rot = sample_uniform_rotation(&mut seeded(20 + seed));
            let noise = random_points(10, 30 + seed);
            let gt: Vec<_> = est
                .iter()
                .zip(&noise)
                .map(|(p, n)| 1.7 * rot.rotate(p) + Vector3::new(0.5, -1.0, 2.0) + 0.2 * n)
                .collect();
            let a = umeyama_points(&est, &gt, true).unwrap();
            let b = brute_force_rmse(&est, &gt);
            assert!((a.ate_rmse - b).abs() < 1e-3, "{} vs {b}", a.ate_rmse);
            assert!(a.ate_rmse <= b + 1e-12);
        }
    }

    #[test]
    fn umeyama_beats_random_similarities() {
        let est = random_points(12, 5);
        let gt: Vec<_> = random_points(12, 6);
        let a = umeyama_points(&est, &gt, true).unwrap();
        let mut rng = seeded(7);
        for _ in 0..10_000 {
            let cand = AlignmentResult {
                scale: rng.random_range(0.01..3.0),
                rotation: sample_uniform_rotation(&mut rng),
                translation: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
                ate_rmse: 0.0,
            };
            assert!(a.ate_rmse <= rmse(&est, &gt, &cand) + 1e-12);
        }
    }

    #[test]
    fn ate_translation_offset() {
        let gt = make_trajectory(TrajectoryKind::Arc, 30, &mut seeded(0)).unwrap();
        assert_eq!(ate(&gt, &gt, AlignMode::None).unwrap(), 0.0);
        let mut shifted = gt.clone();
        for p in &mut shifted.poses {
            p.translation += Vector3::new(3.0, 4.0, 0.0);
        }
        assert!((ate(&gt, &shifted, AlignMode::None).unwrap() - 5.0).abs() < 1e-12);
        assert!(ate(&gt, &shifted, AlignMode::Se3).unwrap() < 1e-9);
    }

    // Straight transcription of the metric: explicit centroids, SVD of the
    // cross-covariance, per-point residuals.
    fn naive_sim3_ate(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
        let n = est.len();
        let mut me = Vector3::zeros();
        let mut mg = Vector3::zeros();
        for i in 0..n {
            me += est[i];
            mg += gt[i];
        }
        me /= n as f64;
        mg /= n as f64;
        let mut cov = Matrix3::zeros();
        let mut var = 0.0;
        for i in 0..n {
            let de = est[i] - me;
            let dg = gt[i] - mg;
            cov += dg * de.transpose();
            var += de.norm_squared();
        }
        cov /= n as f64;
        var /= n as f64;
        let svd = cov.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
        let s_mat = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
        let r = u * s_mat * vt;
        let c = (svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2]) / var;
        let t = mg - c * r * me;
        let mut sum = 0.0;
        for i in 0..n {
            sum += (c * r * est[i] + t - gt[i]).norm_squared();
        }
        (sum / n as f64).sqrt()
    }

    #[test]
    fn fixture_ate_matches_naive_reference() {
        let gt = make_trajectory(TrajectoryKind::Figure8, 60, &mut seeded(0)).unwrap();
        let mut r = seeded(42);
        let est = Trajectory::uniform(
            gt.poses
                .iter()
                .map(|p| RelativePose::from_translation(0.6 * p.translation + Vector3::from_fn(|_, _| 0.05 * r.random_range(-1.0..1.0))))
                .collect(),
        );
        let got = ate(&est, &gt, AlignMode::Sim3).unwrap();
        let want = naive_sim3_ate(&est.positions(), &gt.positions());
        assert!((got - want).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sim3_ate_invariant_to_shared_rigid_motion(seed in 0u64..1000, w in proptest::array::uniform3(-3.0f64..3.0), t in proptest::array::uniform3(-10.0f64..10.0)) {
            let est = random_points(12, seed);
            let gt = random_points(12, seed + 5000);
            let m = RelativePose::new(exp_map(&Vector3::from(w)).unwrap(), Vector3::from(t));
            let base = ate(&points_traj(&est), &points_traj(&gt), AlignMode::Sim3).unwrap();
            let move_all = |p: &[Vector3<f64>]| p.iter().map(|v| m.transform_point(v)).collect::<Vec<_>>();
            let moved = ate(&points_traj(&move_all(&est)), &points_traj(&move_all(&gt)), AlignMode::Sim3).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
        }

        #[test]
        fn sim3_ate_invariant_to_estimate_scale(seed in 0u64..1000, s in 0.01f64..100.0) {
            let est = random_points(12, seed);
            let gt = random_points(12, seed + 5000);
            let base = ate(&points_traj(&est), &points_traj(&gt), AlignMode::Sim3).unwrap();
            let scaled: Vec<_> = est.iter().map(|p| p * s).collect();
            let other = ate(&points_traj(&scaled), &points_traj(&gt), AlignMode::Sim3).unwrap();
            prop_assert!((base - other).abs() < 1e-9);
        }

        #[test]
        fn per_pair_matches_gt_norms(seed in 0u64..1000) {
            let mut r = seeded(seed);
            let mk = |r: &mut crate::rng::Rng| RelativePose::new(
                sample_uniform_rotation(r),
                Vector3::from_fn(|_, _| r.random_range(-1.0..1.0)),
            );
            let est: Vec<_> = (0..10).map(|_| mk(&mut r)).collect();
            let gt: Vec<_> = (0..10).map(|_| mk(&mut r)).collect();
            let out = scale_align(&est, &gt, ScaleMode::PerPair).unwrap();
            for (o, g) in out.iter().zip(&gt) {
                prop_assert!((o.translation.norm() - g.translation.norm()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluate_recovers_scaled_estimate() {
        let gt = make_trajectory(TrajectoryKind::Figure8, 100, &mut seeded(0)).unwrap();
        let rels: Vec<_> = gt
            .relative_poses()
            .iter()
            .map(|p| RelativePose::new(p.rotation, p.translation * 0.3))
            .collect();
        let est = compose_trajectory(gt.poses[0], &rels);
        let e = evaluate(&est, &gt, AlignMode::None, ScaleMode::PerPair).unwrap();
        assert!(e.ate_rmse < 1e-9);
        let same = evaluate(&gt, &gt, AlignMode::None, ScaleMode::PerPair).unwrap();
        assert_eq!((same.ate_rmse, same.ate_rot_rmse), (0.0, 0.0));
        let e = evaluate(&est, &gt, AlignMode::Sim3, ScaleMode::None).unwrap();
        assert!(e.ate_rmse < 1e-9 && e.ate_rot_rmse < 1e-9);
        assert!(evaluate(&est, &points_traj(&random_points(5, 1)), AlignMode::Sim3, ScaleMode::None).is_err());
    }

    #[test]
    fn association_window() {
        let est = [0.0, 0.1, 0.205, 0.5];
        let gt = [0.01, 0.11, 0.2, 0.3];
        assert_eq!(associate(&est, &gt, ASSOCIATION_WINDOW), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(associate(&[0.0, 0.001], &[0.0], 0.02), vec![(0, 0)]);
    }

    #[test]
    fn tum_round_trip_and_parsing() {
        let gt = make_trajectory(TrajectoryKind::Figure8, 40, &mut seeded(0)).unwrap();
        let mut buf = Vec::new();
        write_tum(&mut buf, &gt).unwrap();
        let back = read_tum(&buf[..], Path::new("m")).unwrap();
        assert_eq!(back.stamps, gt.stamps);
        for (a, b) in back.poses.iter().zip(&gt.poses) {
            assert_eq!(a.translation, b.translation);
            let (qa, qb) = (a.rotation.wxyz(), b.rotation.wxyz());
            assert!((0..4).all(|i| (qa[i] - qb[i]).abs() < 1e-15));
        }
        let text = String::from_utf8(buf).unwrap();
        let first: Vec<&str> = text.lines().next().unwrap().split(' ').collect();
        assert_eq!(first.len(), 8);

        let fixture = "# timestamp tx ty tz qx qy qz qw\n0.0 1 2 3 0 0 0 1\n\n0.5 1 2 3 0 0 1 0\n";
        let t = read_tum(fixture.as_bytes(), Path::new("f")).unwrap();
        assert_eq!(t.stamps, vec![0.0, 0.5]);
        assert!((t.poses[1].rotation.angle() - std::f64::consts::PI).abs() < 1e-12);
        assert!(matches!(
            read_tum("0 1 2 3\n".as_bytes(), Path::new("f")),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_tum("0 1 2 3 0 0 0 1\n1 1 2 3 0 0 0 0\n".as_bytes(), Path::new("f")),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn kitti_round_trip() {
        let gt = make_trajectory(TrajectoryKind::RandomWalk, 30, &mut seeded(4)).unwrap();
        let mut buf = Vec::new();
        write_kitti(&mut buf, &gt).unwrap();
        let back = read_kitti(&buf[..], Path::new("k")).unwrap();
        assert_eq!(back.len(), gt.len());
        for (a, b) in back.poses.iter().zip(&gt.poses) {
            assert!(geodesic_angle(&a.rotation, &b.rotation) < 1e-12);
            assert_eq!(a.translation, b.translation);
        }
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line.lines().next().unwrap().split(' ').count(), 12);
    }

    #[test]
    fn metrics_csv_layout() {
        let mut buf = Vec::new();
        let row = MetricsRow {
            scenario: "figure8".into(),
            align_mode: AlignMode::Sim3,
            scale_mode: ScaleMode::PerPair,
            ate_rmse: 0.5,
            mean_std_rot: 0.1,
            mean_std_trans: 0.2,
            ate_rot_rmse: 0.01,
        };
        write_metrics_csv(&mut buf, &[row]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{METRICS_HEADER}\nfigure8,sim3,per_pair,0.5,0.1,0.2,0.01\n")
        );
        assert_eq!("per_pair".parse::<ScaleMode>().unwrap(), ScaleMode::PerPair);
        assert!("sim2".parse::<AlignMode>().is_err());
    }
}
