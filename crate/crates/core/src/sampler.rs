//! ODE integration of a learned vector field and Monte Carlo pose estimation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::se3::{pose_to_state, sample_initial, state_to_pose, MotionState, RelativePose};
use crate::vfnet::{ConditionVector, VectorFieldNet};

/// A time-dependent velocity field on the 6-dimensional motion space.
pub trait VectorField {
    fn velocity(&self, x: &[f64; 6], tau: f64) -> Result<[f64; 6]>;
}

/// Adapts a closure `(x, τ) -> velocity` into a [`VectorField`].
pub struct FnField<F>(pub F);

impl<F: Fn(&[f64; 6], f64) -> [f64; 6]> VectorField for FnField<F> {
    fn velocity(&self, x: &[f64; 6], tau: f64) -> Result<[f64; 6]> {
        Ok((self.0)(x, tau))
    }
}

/// A network paired with the condition it is evaluated under.
pub struct ConditionedNet<'a> {
    pub net: &'a VectorFieldNet,
    pub cond: &'a ConditionVector,
}

impl VectorField for ConditionedNet<'_> {
    fn velocity(&self, x: &[f64; 6], tau: f64) -> Result<[f64; 6]> {
        self.net.forward(&MotionState::from_array(*x), tau, self.cond)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    Euler,
    #[default]
    Midpoint,
    Rk4,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "midpoint" => Ok(Method::Midpoint),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::InvalidArgument(format!(
                "unknown solver {other:?} (expected euler, midpoint or rk4)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SolverConfig {
    pub method: Method,
    pub steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Midpoint,
            steps: 5,
        }
    }
}

impl SolverConfig {
    pub fn new(method: Method, steps: usize) -> Result<Self> {
        let cfg = Self { method, steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("solver needs at least one step".into()));
        }
        Ok(())
    }
}

fn axpy(x: &[f64; 6], a: f64, v: &[f64; 6]) -> [f64; 6] {
    std::array::from_fn(|i| x[i] + a * v[i])
}

/// Fixed-step explicit integration of `dx/dτ = u(x, τ)` over `[0, 1]`.
pub fn integrate_field<F: VectorField + ?Sized>(
    field: &F,
    x0: &MotionState,
    cfg: &SolverConfig,
) -> Result<MotionState> {
    cfg.validate()?;
    let n = cfg.steps;
    let h = 1.0 / n as f64;
    let mut x = x0.to_array();
    for k in 0..n {
        let tau = k as f64 / n as f64;
        let next_tau = ((k + 1) as f64 / n as f64).min(1.0);
        let mid_tau = 0.5 * (tau + next_tau);
        x = match cfg.method {
            Method::Euler => axpy(&x, h, &field.velocity(&x, tau)?),
            Method::Midpoint => {
                let k1 = field.velocity(&x, tau)?;
                let k2 = field.velocity(&axpy(&x, 0.5 * h, &k1), mid_tau)?;
                axpy(&x, h, &k2)
            }
            Method::Rk4 => {
                let k1 = field.velocity(&x, tau)?;
                let k2 = field.velocity(&axpy(&x, 0.5 * h, &k1), mid_tau)?;
                let k3 = field.velocity(&axpy(&x, 0.5 * h, &k2), mid_tau)?;
                let k4 = field.velocity(&axpy(&x, h, &k3), next_tau)?;
                std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: k });
        }
    }
    Ok(MotionState::from_array(x))
}

/// Integrates the network's field under `cond` from `x0`.
pub fn integrate(
    net: &VectorFieldNet,
    x0: &MotionState,
    cond: &ConditionVector,
    cfg: &SolverConfig,
) -> Result<MotionState> {
    integrate_field(&ConditionedNet { net, cond }, x0, cfg)
}

/// Samples from `m` independent initializations and their summary.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSampleSet {
    pub samples: Vec<RelativePose>,
    pub mean_state: MotionState,
    /// Per-component population standard deviation in chart coordinates.
    pub std_state: [f64; 6],
}

impl PoseSampleSet {
    pub fn from_samples(samples: Vec<RelativePose>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        let m = samples.len() as f64;
        let states: Vec<[f64; 6]> = samples.iter().map(|p| pose_to_state(p).to_array()).collect();
        let mean: [f64; 6] = std::array::from_fn(|i| states.iter().map(|s| s[i]).sum::<f64>() / m);
        let std: [f64; 6] = std::array::from_fn(|i| {
            (states.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / m).sqrt()
        });
        Ok(Self {
            samples,
            mean_state: MotionState::from_array(mean),
            std_state: std,
        })
    }

    /// The final motion estimate: the chart-coordinate mean mapped back to a pose.
    pub fn estimate(&self) -> Result<RelativePose> {
        state_to_pose(&self.mean_state)
    }

    pub fn mean_std_rot(&self) -> f64 {
        self.std_state[..3].iter().sum::<f64>() / 3.0
    }

    pub fn mean_std_trans(&self) -> f64 {
        self.std_state[3..].iter().sum::<f64>() / 3.0
    }

    pub fn mean_std(&self) -> f64 {
        self.std_state.iter().sum::<f64>() / 6.0
    }
}

/// Draws `m` initial states from `rng` (in order) and integrates each.
pub fn estimate_pose<R: Rng + ?Sized>(
    net: &VectorFieldNet,
    cond: &ConditionVector,
    cfg: &SolverConfig,
    m: usize,
    rng: &mut R,
) -> Result<PoseSampleSet> {
    if m == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    cfg.validate()?;
    let starts: Vec<MotionState> = (0..m).map(|_| sample_initial(rng)).collect();
    let samples = starts
        .iter()
        .enumerate()
        .map(|(i, x0)| {
            integrate(net, x0, cond, cfg)
                .and_then(|x1| state_to_pose(&x1))
                .map_err(|e| Error::Sample {
                    sample: i,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    PoseSampleSet::from_samples(samples)
}

/// Estimates every condition in order; pair `i` draws from `rng::derive(seed, i)`.
pub fn estimate_sequence(
    net: &VectorFieldNet,
    conds: &[ConditionVector],
    cfg: &SolverConfig,
    m: usize,
    seed: u64,
) -> Result<Vec<PoseSampleSet>> {
    conds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut r = rng::derive(seed, i as u64);
            estimate_pose(net, c, cfg, m, &mut r).map_err(|e| Error::Pair {
                pair: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// CSV: `pair_index,rho_x,rho_y,rho_z,t_x,t_y,t_z,std_1..std_6`.
pub fn write_estimates_csv<W: Write>(w: &mut W, sets: &[PoseSampleSet]) -> std::io::Result<()> {
    writeln!(
        w,
        "pair_index,rho_x,rho_y,rho_z,t_x,t_y,t_z,std_1,std_2,std_3,std_4,std_5,std_6"
    )?;
    for (i, s) in sets.iter().enumerate() {
        let vals: Vec<String> = s
            .mean_state
            .to_array()
            .iter()
            .chain(&s.std_state)
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{i},{}", vals.join(","))?;
    }
    Ok(())
}
