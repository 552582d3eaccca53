//! Conditional flow matching on straight-line (optimal transport) paths.
//!
//! A training pair `(x1, c)` is turned into a regression example by drawing
//! `τ ~ U[0, 1]` and `x0` from the initial distribution; the network is
//! asked to predict the constant path velocity `x1 − x0` at
//! `x_τ = (1 − τ) x0 + τ x1`. Rotation coordinates are interpolated
//! linearly in the so(3) chart.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::se3::{sample_initial, MotionState};
use crate::vfnet::{fmt_f64, write_row, ConditionVector, Gradients, LineReader, NetConfig, VectorFieldNet};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub target: MotionState,
    pub cond: ConditionVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub tau: f64,
    pub x0: MotionState,
    pub x_tau: MotionState,
    pub target_velocity: [f64; 6],
    pub cond: ConditionVector,
}

/// Builds the path sample for given endpoints and time.
pub fn path_sample_at(pair: &TrainingPair, x0: MotionState, tau: f64) -> PathSample {
    let a = x0.to_array();
    let b = pair.target.to_array();
    let mut xt = [0.0; 6];
    let mut v = [0.0; 6];
    for i in 0..6 {
        xt[i] = (1.0 - tau) * a[i] + tau * b[i];
        v[i] = b[i] - a[i];
    }
    PathSample {
        tau,
        x0,
        x_tau: MotionState::from_array(xt),
        target_velocity: v,
        cond: pair.cond.clone(),
    }
}

/// Draws `x0` from the initial distribution, then `τ ~ U[0, 1]`.
pub fn sample_path<R: Rng + ?Sized>(pair: &TrainingPair, rng: &mut R) -> PathSample {
    let x0 = sample_initial(rng);
    let tau = rng.random::<f64>();
    path_sample_at(pair, x0, tau)
}

/// Per-block weights of the squared error (rotation, translation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rot: f64,
    pub trans: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rot: 1.0, trans: 1.0 }
    }
}

impl LossWeights {
    fn get(&self, i: usize) -> f64 {
        if i < 3 {
            self.rot
        } else {
            self.trans
        }
    }
}

/// Mean squared velocity error over the batch and its exact gradient.
///
/// `step` is only used to label a non-finite-loss diagnostic.
pub fn cfm_loss_weighted(
    net: &VectorFieldNet,
    batch: &[PathSample],
    weights: LossWeights,
    step: usize,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = net.zero_gradients();
    for (i, s) in batch.iter().enumerate() {
        let trace = net.forward_trace(&s.x_tau, s.tau, &s.cond)?;
        let out = trace.velocity();
        let mut upstream = [0.0; 6];
        let mut err = 0.0;
        for c in 0..6 {
            let d = out[c] - s.target_velocity[c];
            err += weights.get(c) * d * d;
            upstream[c] = 2.0 * weights.get(c) * d * scale;
        }
        if !err.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch_index: i });
        }
        loss += err * scale;
        net.accumulate_backward(&trace, &upstream, &mut grads);
    }
    Ok((loss, grads))
}

pub fn cfm_loss(net: &VectorFieldNet, batch: &[PathSample]) -> Result<(f64, Gradients)> {
    cfm_loss_weighted(net, batch, LossWeights::default(), 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [f64], grads: &Gradients, lr: f64) -> Result<()> {
        let g = grads.values();
        if g.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                actual: g.len(),
                context: "optimizer gradients",
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Applies one Adam update to the network.
pub fn adam_step(net: &mut VectorFieldNet, grads: &Gradients, state: &mut Adam, lr: f64) -> Result<()> {
    state.step(net.params_mut(), grads, lr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub batch_size: usize,
    /// Total optimizer steps; each step draws a fresh minibatch of pairs,
    /// path times and initial states.
    pub steps: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            batch_size: 64,
            steps: 2000,
            lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_step: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("invalid Adam hyper-parameters".into()));
        }
        if self.weights.rot < 0.0 || self.weights.trans < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Step-decay schedule: `lr` before `lr_decay_step`, `lr · factor` after.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.lr_decay_step {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn adam(&self, n: usize) -> Adam {
        Adam::new(n, self.beta1, self.beta2, self.eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: VectorFieldNet,
    pub adam: Adam,
    /// Number of optimizer steps already taken.
    pub step: usize,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = rng::derive(config.seed, rng::streams::INIT);
        let net = VectorFieldNet::init(config.net.clone(), &mut init_rng)?;
        let adam = config.adam(net.param_count());
        Ok(Self { net, adam, step: 0 })
    }
}

fn validate_dataset(dataset: &[TrainingPair], cond_dim: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for (i, p) in dataset.iter().enumerate() {
        if p.cond.dim() != cond_dim {
            return Err(Error::Pair {
                pair: i,
                source: Box::new(Error::DimensionMismatch {
                    expected: cond_dim,
                    actual: p.cond.dim(),
                    context: "training condition",
                }),
            });
        }
        if !p.target.is_finite() || !p.cond.is_finite() {
            return Err(Error::Pair {
                pair: i,
                source: Box::new(Error::InvalidArgument("non-finite training pair".into())),
            });
        }
    }
    Ok(())
}

/// Runs optimizer steps `state.step .. config.steps`.
///
/// Step `s` draws its minibatch from `rng::derive(seed, s)` only, so a run
/// resumed from a saved [`TrainState`] reproduces the uninterrupted loss
/// history exactly.
pub fn train_from(
    state: &mut TrainState,
    dataset: &[TrainingPair],
    config: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    validate_dataset(dataset, state.net.config().cond_dim)?;
    let train_seed = rng::mix(config.seed, rng::streams::TRAIN);
    let mut history = Vec::with_capacity(config.steps.saturating_sub(state.step));
    let mut batch = Vec::with_capacity(config.batch_size);
    while state.step < config.steps {
        let step = state.step;
        let mut step_rng = rng::derive(train_seed, step as u64);
        batch.clear();
        for _ in 0..config.batch_size {
            let pair = &dataset[step_rng.random_range(0..dataset.len())];
            batch.push(sample_path(pair, &mut step_rng));
        }
        let (loss, grads) = cfm_loss_weighted(&state.net, &batch, config.weights, step)?;
        let lr = config.lr_at(step);
        adam_step(&mut state.net, &grads, &mut state.adam, lr)?;
        if !state.net.is_finite() {
            return Err(Error::NonFiniteParameter { step });
        }
        history.push(LossRecord { step, lr, loss });
        state.step += 1;
    }
    Ok(history)
}

/// Trains a freshly initialized network.
pub fn train(dataset: &[TrainingPair], config: &TrainConfig) -> Result<(VectorFieldNet, Vec<LossRecord>)> {
    let mut state = TrainState::fresh(config)?;
    let history = train_from(&mut state, dataset, config)?;
    Ok((state.net, history))
}

pub fn write_loss_csv<W: Write>(w: &mut W, history: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,lr,loss")?;
    for r in history {
        writeln!(w, "{},{},{}", r.step, r.lr, r.loss)?;
    }
    Ok(())
}

/// Mean loss of the last `window` records.
pub fn tail_loss(history: &[LossRecord], window: usize) -> f64 {
    let n = window.min(history.len()).max(1);
    history[history.len().saturating_sub(n)..]
        .iter()
        .map(|r| r.loss)
        .sum::<f64>()
        / n as f64
}

impl TrainState {
    /// Network checkpoint followed by the optimizer section.
    pub fn write_text<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        self.net.write_text(w)?;
        writeln!(w, "optimizer adam")?;
        writeln!(w, "step={}", self.step)?;
        writeln!(w, "t={}", self.adam.t)?;
        writeln!(w, "beta1={}", fmt_f64(self.adam.beta1))?;
        writeln!(w, "beta2={}", fmt_f64(self.adam.beta2))?;
        writeln!(w, "eps={}", fmt_f64(self.adam.eps))?;
        for (name, buf) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            writeln!(w, "{name}")?;
            for chunk in buf.chunks(16) {
                write_row(w, chunk)?;
            }
        }
        writeln!(w, "end")
    }

    /// Reads a checkpoint; a network-only file yields a fresh optimizer at step 0.
    pub fn read_text<R: BufRead>(reader: R, source: &std::path::Path, config: &TrainConfig) -> Result<Self> {
        let mut r = LineReader::new(reader, source);
        let net = VectorFieldNet::read_text_from(&mut r)?;
        let n = net.param_count();
        match r.next_line()? {
            None => {
                let adam = config.adam(n);
                return Ok(Self { net, adam, step: 0 });
            }
            Some(l) if l == "optimizer adam" => {}
            Some(l) => return Err(r.err(format!("unexpected line {l:?}"))),
        }
        let int = |r: &mut LineReader<R>, key: &str| -> Result<u64> {
            let v = r.key_value(key)?;
            v.parse().map_err(|_| r.err(format!("bad integer {v:?}")))
        };
        let float = |r: &mut LineReader<R>, key: &str| -> Result<f64> {
            let v = r.key_value(key)?;
            v.parse().map_err(|_| r.err(format!("bad float {v:?}")))
        };
        let step = int(&mut r, "step")? as usize;
        let t = int(&mut r, "t")?;
        let beta1 = float(&mut r, "beta1")?;
        let beta2 = float(&mut r, "beta2")?;
        let eps = float(&mut r, "eps")?;
        let mut bufs = Vec::new();
        for name in ["m", "v"] {
            if r.expect_line()? != name {
                return Err(r.err(format!("expected `{name}`")));
            }
            let mut buf = Vec::with_capacity(n);
            while buf.len() < n {
                buf.extend(r.floats((n - buf.len()).min(16))?);
            }
            bufs.push(buf);
        }
        if r.expect_line()? != "end" {
            return Err(r.err("expected `end`"));
        }
        let v = bufs.pop().expect("two buffers");
        let m = bufs.pop().expect("two buffers");
        Ok(Self {
            net,
            adam: Adam {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            },
            step,
        })
    }
}
