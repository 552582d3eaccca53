use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use flowvo::config::{train_config, train_config_lines};
use flowvo::flowmatch::{train_from, write_loss_csv, TrainConfig, TrainState};
use flowvo::rng::{self, streams};
use flowvo::sampler::{estimate_sequence, write_estimates_csv, Method, PoseSampleSet, SolverConfig};
use flowvo::se3::{state_to_pose, RelativePose};
use flowvo::synthworld::{
    dirac_target, make_bimodal_dataset, make_dirac_dataset, make_scale_ambiguity_dataset, make_trajectory,
    ConditionLift, DatasetFile, Scenario, Trajectory, TrajectoryKind,
};
use flowvo::trajeval::{
    associated, compose_trajectory, evaluate, load_trajectory, save_tum, write_metrics_csv, AlignMode, MetricsRow,
    ScaleMode, ASSOCIATION_WINDOW,
};
use flowvo::{Error, VectorFieldNet};

use crate::manifest::RunManifest;
use crate::settings::Settings;
use crate::{Common, EvalArgs, SolverArgs};

/// Bad flags, bad config or unusable inputs; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn is_usage(e: &Error) -> bool {
    match e {
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::DimensionMismatch { .. }
        | Error::LengthMismatch { .. }
        | Error::Parse { .. } => true,
        Error::Pair { source, .. } | Error::Sample { source, .. } => is_usage(source),
        _ => false,
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(fe) = cause.downcast_ref::<Error>() {
            return if is_usage(fe) { 2 } else { 1 };
        }
    }
    1
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| usage(format!("--{flag} is required")))?;
    if !p.is_file() {
        return Err(usage(format!("--{flag}: {} does not exist", p.display())));
    }
    Ok(p)
}

fn parse<T: std::str::FromStr<Err = Error>>(value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| usage(e.to_string()))
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Loads settings and resolves the master seed before anything else.
fn setup(common: &Common) -> Result<(Settings, u64)> {
    let mut s = Settings::load(common.config.as_deref())?;
    s.set_opt("seed", common.seed);
    let seed = s.get("seed", 0u64)?;
    Ok((s, seed))
}

fn finish(mut manifest: RunManifest, settings: &Settings, out: &Path, started: Instant) -> Result<()> {
    let cfg = out.join("config.txt");
    write_file(&cfg, settings.snapshot().as_bytes())?;
    manifest.output("config", &cfg);
    manifest.config = settings.resolved.clone();
    manifest.time("total_s", started);
    manifest.write(out)?;
    Ok(())
}

pub struct GenFlags {
    pub kind: Option<String>,
    pub n: Option<usize>,
    pub ambiguity: Option<f64>,
    pub noise: Option<f64>,
    pub k: Option<usize>,
    pub lift_seed: Option<u64>,
}

pub fn gen(common: &Common, flags: GenFlags) -> Result<()> {
    let started = Instant::now();
    let (mut s, seed) = setup(common)?;
    s.set_opt("kind", flags.kind);
    s.set_opt("n", flags.n);
    s.set_opt("ambiguity", flags.ambiguity);
    s.set_opt("noise", flags.noise);
    s.set_opt("k", flags.k);
    s.set_opt("lift_seed", flags.lift_seed);
    let kind: String = s.get("kind", "figure8".to_string())?;
    let n: usize = s.get("n", 200)?;
    let ambiguity: f64 = s.get("ambiguity", 0.0)?;
    let noise: f64 = s.get("noise", 0.0)?;
    let k: usize = s.get("k", 16)?;
    let lift_seed: u64 = s.get("lift_seed", rng::mix(seed, streams::DATASET))?;
    if !(0.0..=1.0).contains(&ambiguity) {
        return Err(usage(format!("--ambiguity must lie in [0, 1], got {ambiguity}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(usage(format!("--noise must be >= 0, got {noise}")));
    }
    if k == 0 {
        return Err(usage("--k must be positive"));
    }

    let lift = ConditionLift::new(k, lift_seed)?;
    let mut cond_rng = rng::derive(seed, streams::CONDITION);
    let (pairs, gt) = match kind.as_str() {
        "dirac" | "bimodal" | "ambiguity" => {
            let pairs = match kind.as_str() {
                "dirac" => make_dirac_dataset(n, dirac_target(), &lift)?,
                "bimodal" => make_bimodal_dataset(n, &lift, &mut cond_rng)?,
                _ => make_scale_ambiguity_dataset(n, &lift, ambiguity, noise, &mut cond_rng)?,
            };
            let rels = pairs
                .iter()
                .map(|p| state_to_pose(&p.target))
                .collect::<flowvo::Result<Vec<_>>>()?;
            let gt = compose_trajectory(RelativePose::identity(), &rels);
            (pairs, gt)
        }
        other => {
            let tk: TrajectoryKind = parse(other)?;
            let traj = make_trajectory(tk, n, &mut rng::derive(seed, streams::TRAJECTORY))?;
            let sc = Scenario::from_trajectory(other, traj, &lift, ambiguity, noise, &mut cond_rng)?;
            (sc.pairs, sc.gt_trajectory)
        }
    };

    create_out(&common.out)?;
    let mut m = RunManifest::new("gen", seed);
    let data_path = common.out.join("dataset.csv");
    DatasetFile::from_pairs(&pairs, k, lift_seed, ambiguity, noise).save(&data_path)?;
    m.output("dataset", &data_path);
    let gt_path = common.out.join("gt.tum");
    save_tum(&gt_path, &gt)?;
    m.output("gt_trajectory", &gt_path);
    println!("wrote {} pairs to {}", pairs.len(), data_path.display());
    finish(m, &s, &common.out, started)
}

fn load_dataset(path: &Path) -> Result<DatasetFile> {
    DatasetFile::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

pub fn train(
    common: &Common,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    train_steps: Option<usize>,
) -> Result<()> {
    let started = Instant::now();
    let dataset = require(dataset, "dataset")?;
    let checkpoint = match checkpoint {
        Some(p) => Some(require(Some(p), "checkpoint")?),
        None => None,
    };
    let (mut s, seed) = setup(common)?;
    s.set_opt("steps", train_steps);
    let file = load_dataset(&dataset)?;
    let pairs = file.pairs();
    if pairs.is_empty() {
        return Err(usage(format!("{} has no ground-truth rows", dataset.display())));
    }
    let mut base = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    base.net.cond_dim = file.k;
    let steps_given = s.kv().raw("steps").is_some();
    let decay_given = s.kv().raw("lr_decay_step").is_some();
    let mut cfg = train_config(s.kv(), base)?;
    if steps_given && !decay_given {
        cfg.lr_decay_step = cfg.steps / 2;
    }
    cfg.validate()?;
    if cfg.net.cond_dim != file.k {
        return Err(Error::DimensionMismatch {
            expected: cfg.net.cond_dim,
            actual: file.k,
            context: "dataset condition dimension",
        }
        .into());
    }
    for (k, v) in train_config_lines(&cfg) {
        s.record(&k, v);
    }

    let mut state = match &checkpoint {
        Some(p) => {
            let f = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let st = TrainState::read_text(std::io::BufReader::new(f), p, &cfg)?;
            if st.net.config() != &cfg.net {
                return Err(usage("checkpoint architecture differs from the configuration"));
            }
            st
        }
        None => TrainState::fresh(&cfg)?,
    };
    let t = Instant::now();
    let history = train_from(&mut state, &pairs, &cfg)?;

    create_out(&common.out)?;
    let mut m = RunManifest::new("train", seed);
    m.time("train_s", t);
    m.input("dataset", &dataset);
    if let Some(p) = &checkpoint {
        m.input("resume_checkpoint", p);
    }
    let ckpt = common.out.join("checkpoint.txt");
    let mut buf = Vec::new();
    state.write_text(&mut buf)?;
    write_file(&ckpt, &buf)?;
    m.output("checkpoint", &ckpt);
    let loss = common.out.join("loss.csv");
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &history)?;
    write_file(&loss, &buf)?;
    m.output("loss", &loss);
    match history.last() {
        Some(r) => println!("step {} loss {}", r.step, r.loss),
        None => println!("checkpoint already at step {}", state.step),
    }
    finish(m, &s, &common.out, started)
}

fn load_net(path: &Path) -> Result<VectorFieldNet> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let st = TrainState::read_text(std::io::BufReader::new(f), path, &TrainConfig::default())
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(st.net)
}

fn solver_settings(s: &mut Settings, args: &SolverArgs) -> Result<(SolverConfig, usize)> {
    s.set_opt("method", args.method.clone());
    s.set_opt("solver_steps", args.steps);
    s.set_opt("samples", args.samples);
    let method: String = s.get("method", Method::default().to_string())?;
    let method: Method = parse(&method)?;
    let steps: usize = s.get("solver_steps", SolverConfig::default().steps)?;
    let samples: usize = s.get("samples", 10)?;
    if samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    Ok((SolverConfig::new(method, steps)?, samples))
}

struct Inference {
    sets: Vec<PoseSampleSet>,
    trajectory: Trajectory,
}

fn run_infer(net: &VectorFieldNet, file: &DatasetFile, cfg: &SolverConfig, samples: usize, seed: u64) -> Result<Inference> {
    if file.k != net.config().cond_dim {
        return Err(Error::DimensionMismatch {
            expected: net.config().cond_dim,
            actual: file.k,
            context: "dataset condition dimension",
        }
        .into());
    }
    let sets = estimate_sequence(net, &file.conditions(), cfg, samples, rng::mix(seed, streams::INFER))?;
    let rels = sets.iter().map(|s| s.estimate()).collect::<flowvo::Result<Vec<_>>>()?;
    let trajectory = compose_trajectory(RelativePose::identity(), &rels);
    Ok(Inference { sets, trajectory })
}

pub fn infer(common: &Common, solver: &SolverArgs, dataset: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    let dataset = require(dataset, "dataset")?;
    let checkpoint = require(checkpoint, "checkpoint")?;
    let (mut s, seed) = setup(common)?;
    let (cfg, samples) = solver_settings(&mut s, solver)?;
    let net = load_net(&checkpoint)?;
    let file = load_dataset(&dataset)?;
    let t = Instant::now();
    let inf = run_infer(&net, &file, &cfg, samples, seed)?;

    create_out(&common.out)?;
    let mut m = RunManifest::new("infer", seed);
    m.time("infer_s", t);
    m.input("dataset", &dataset);
    m.input("checkpoint", &checkpoint);
    let est = common.out.join("estimates.csv");
    let mut buf = Vec::new();
    write_estimates_csv(&mut buf, &inf.sets)?;
    write_file(&est, &buf)?;
    m.output("estimates", &est);
    let traj = common.out.join("trajectory.tum");
    save_tum(&traj, &inf.trajectory)?;
    m.output("trajectory", &traj);
    println!("estimated {} motions", inf.sets.len());
    finish(m, &s, &common.out, started)
}

pub struct EvalFlags {
    pub est: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub estimates: Option<PathBuf>,
    pub scenario: Option<String>,
    pub associate: bool,
}

fn eval_settings(s: &mut Settings, args: &EvalArgs) -> Result<(AlignMode, ScaleMode)> {
    s.set_opt("align", args.align.clone());
    s.set_opt("scale", args.scale.clone());
    let align: String = s.get("align", AlignMode::default().to_string())?;
    let scale: String = s.get("scale", ScaleMode::default().to_string())?;
    Ok((parse(&align)?, parse(&scale)?))
}

/// Mean per-pair spread `(rotation, translation)` from an estimates CSV.
fn spread_from_csv(path: &Path) -> Result<(f64, f64)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = 0usize;
    let (mut rot, mut trans) = (0.0, 0.0);
    for (i, line) in text.lines().enumerate().skip(1) {
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| usage(format!("{}:{}: bad number", path.display(), i + 1)))?;
        if vals.len() != 13 {
            return Err(usage(format!("{}:{}: expected 13 columns", path.display(), i + 1)));
        }
        rot += vals[7..10].iter().sum::<f64>() / 3.0;
        trans += vals[10..13].iter().sum::<f64>() / 3.0;
        rows += 1;
    }
    if rows == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((rot / rows as f64, trans / rows as f64))
}

fn metrics_row(
    scenario: &str,
    est: &Trajectory,
    gt: &Trajectory,
    align: AlignMode,
    scale: ScaleMode,
    spread: (f64, f64),
) -> Result<MetricsRow> {
    let e = evaluate(est, gt, align, scale)?;
    Ok(MetricsRow {
        scenario: scenario.to_string(),
        align_mode: align,
        scale_mode: scale,
        ate_rmse: e.ate_rmse,
        mean_std_rot: spread.0,
        mean_std_trans: spread.1,
        ate_rot_rmse: e.ate_rot_rmse,
    })
}

pub fn eval(common: &Common, args: &EvalArgs, flags: EvalFlags) -> Result<()> {
    let started = Instant::now();
    let est_path = require(flags.est, "est")?;
    let gt_path = require(flags.gt, "gt")?;
    let estimates = match flags.estimates {
        Some(p) => Some(require(Some(p), "estimates")?),
        None => None,
    };
    let (mut s, seed) = setup(common)?;
    s.set_opt("scenario", flags.scenario);
    let scenario: String = s.get("scenario", "unnamed".to_string())?;
    let (align, scale) = eval_settings(&mut s, args)?;
    let mut est = load_trajectory(&est_path)?;
    let mut gt = load_trajectory(&gt_path)?;
    if flags.associate {
        (est, gt) = associated(&est, &gt, ASSOCIATION_WINDOW);
    } else if est.len() != gt.len() {
        return Err(usage(format!(
            "trajectory lengths differ: {} has {} poses, {} has {} (use --associate to match by timestamp)",
            est_path.display(),
            est.len(),
            gt_path.display(),
            gt.len()
        )));
    }
    let spread = match &estimates {
        Some(p) => spread_from_csv(p)?,
        None => (0.0, 0.0),
    };
    let row = metrics_row(&scenario, &est, &gt, align, scale, spread)?;

    create_out(&common.out)?;
    let mut m = RunManifest::new("eval", seed);
    m.input("est", &est_path);
    m.input("gt", &gt_path);
    if let Some(p) = &estimates {
        m.input("estimates", p);
    }
    let path = common.out.join("metrics.csv");
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, std::slice::from_ref(&row))?;
    write_file(&path, &buf)?;
    m.output("metrics", &path);
    println!("ate_rmse {}", row.ate_rmse);
    finish(m, &s, &common.out, started)
}

pub fn ablate_steps(
    common: &Common,
    solver: &SolverArgs,
    eval_args: &EvalArgs,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    step_list: Option<String>,
) -> Result<()> {
    let started = Instant::now();
    let dataset = require(dataset, "dataset")?;
    let checkpoint = require(checkpoint, "checkpoint")?;
    let (mut s, seed) = setup(common)?;
    s.set_opt("step_list", step_list);
    let list: String = s.get("step_list", "2,5,10".to_string())?;
    let counts = list
        .split(',')
        .map(|v| v.trim().parse::<usize>().ok().filter(|n| *n > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| usage(format!("bad --step-list {list:?}")))?;
    let (base, samples) = solver_settings(&mut s, solver)?;
    let (align, scale) = eval_settings(&mut s, eval_args)?;
    let scenario: String = s.get("scenario", "ablation".to_string())?;
    let net = load_net(&checkpoint)?;
    let file = load_dataset(&dataset)?;
    if file.rows.iter().any(|r| r.target.is_none()) {
        return Err(usage("step ablation needs ground truth for every row"));
    }
    let gt_rels = file
        .pairs()
        .iter()
        .map(|p| state_to_pose(&p.target))
        .collect::<flowvo::Result<Vec<_>>>()?;
    let gt = compose_trajectory(RelativePose::identity(), &gt_rels);

    let mut out = Vec::new();
    writeln!(out, "steps,ate_rmse,ate_rot_rmse,mean_std_rot,mean_std_trans")?;
    let mut m = RunManifest::new("ablate-steps", seed);
    for &steps in &counts {
        let t = Instant::now();
        let cfg = SolverConfig::new(base.method, steps)?;
        let inf = run_infer(&net, &file, &cfg, samples, seed)?;
        let n = inf.sets.len() as f64;
        let spread = (
            inf.sets.iter().map(|s| s.mean_std_rot()).sum::<f64>() / n,
            inf.sets.iter().map(|s| s.mean_std_trans()).sum::<f64>() / n,
        );
        let row = metrics_row(&scenario, &inf.trajectory, &gt, align, scale, spread)?;
        writeln!(
            out,
            "{steps},{},{},{},{}",
            row.ate_rmse, row.ate_rot_rmse, row.mean_std_rot, row.mean_std_trans
        )?;
        println!("steps {steps}: ate_rmse {}", row.ate_rmse);
        m.time(&format!("steps_{steps}_s"), t);
    }

    create_out(&common.out)?;
    m.input("dataset", &dataset);
    m.input("checkpoint", &checkpoint);
    let path = common.out.join("ablation.csv");
    write_file(&path, &out)?;
    m.output("ablation", &path);
    finish(m, &s, &common.out, started)
}
