//! The conditioned time-dependent vector field.
//!
//! Architecture: a fixed sinusoidal time embedding, a linear state projection
//! and a two-layer condition MLP are concatenated, passed through a tanh
//! trunk, and split into a rotation head and a translation head (tanh hidden
//! layers, linear 3-vector output). Output layers start at zero, so a fresh
//! network predicts zero velocity everywhere.
//!
//! All parameters live in one flat buffer; [`Layout`] records where each
//! dense layer's weights (row-major, `out × in`) and biases sit. Gradients use
//! the same layout.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::se3::MotionState;

/// Fixed-dimension guidance vector standing in for encoded visual input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector(pub Vec<f64>);

impl ConditionVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub cond_dim: usize,
    pub time_embed_dim: usize,
    pub state_embed_dim: usize,
    pub cond_hidden_dim: usize,
    pub cond_embed_dim: usize,
    pub trunk: Vec<usize>,
    pub head: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            cond_dim: 16,
            time_embed_dim: 16,
            state_embed_dim: 16,
            cond_hidden_dim: 16,
            cond_embed_dim: 16,
            trunk: vec![64, 64],
            head: vec![32, 32],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("cond_dim", self.cond_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("state_embed_dim", self.state_embed_dim),
            ("cond_hidden_dim", self.cond_hidden_dim),
            ("cond_embed_dim", self.cond_embed_dim),
        ];
        for (name, v) in scalars {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even".into()));
        }
        if self.trunk.is_empty() {
            return Err(Error::Config("trunk needs at least one layer".into()));
        }
        if self.trunk.iter().chain(&self.head).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        self.time_embed_dim + self.state_embed_dim + self.cond_embed_dim
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let dense = |i: usize, o: usize| o * i + o;
        let mut n = dense(MotionState::DIM, self.state_embed_dim)
            + dense(self.cond_dim, self.cond_hidden_dim)
            + dense(self.cond_hidden_dim, self.cond_embed_dim);
        let mut prev = self.fused_dim();
        for &w in &self.trunk {
            n += dense(prev, w);
            prev = w;
        }
        let trunk_out = prev;
        for _ in 0..2 {
            let mut prev = trunk_out;
            for &w in &self.head {
                n += dense(prev, w);
                prev = w;
            }
            n += dense(prev, 3);
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseSpec {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// Offset of the weight block in the flat buffer; biases follow it.
    pub offset: usize,
}

impl DenseSpec {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }

    fn len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub layers: Vec<DenseSpec>,
    state_embed: usize,
    cond_embed: [usize; 2],
    trunk: Vec<usize>,
    heads: [Vec<usize>; 2],
    len: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let mut layers: Vec<DenseSpec> = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, inputs: usize, outputs: usize, activation: Activation| {
            let spec = DenseSpec {
                name,
                inputs,
                outputs,
                activation,
                offset,
            };
            offset += spec.len();
            layers.push(spec);
            layers.len() - 1
        };
        use Activation::*;
        let state_embed = push(
            "state_embed".into(),
            MotionState::DIM,
            cfg.state_embed_dim,
            Identity,
        );
        let c0 = push(
            "cond_embed.0".into(),
            cfg.cond_dim,
            cfg.cond_hidden_dim,
            Tanh,
        );
        let c1 = push(
            "cond_embed.1".into(),
            cfg.cond_hidden_dim,
            cfg.cond_embed_dim,
            Identity,
        );
        let mut prev = cfg.fused_dim();
        let mut trunk = Vec::new();
        for (i, &w) in cfg.trunk.iter().enumerate() {
            trunk.push(push(format!("trunk.{i}"), prev, w, Tanh));
            prev = w;
        }
        let trunk_out = prev;
        let mut heads: [Vec<usize>; 2] = Default::default();
        for (h, head_name) in ["head_rot", "head_trans"].iter().enumerate() {
            let mut prev = trunk_out;
            for (i, &w) in cfg.head.iter().enumerate() {
                heads[h].push(push(format!("{head_name}.{i}"), prev, w, Tanh));
                prev = w;
            }
            heads[h].push(push(format!("{head_name}.out"), prev, 3, Identity));
        }
        Self {
            layers,
            state_embed,
            cond_embed: [c0, c1],
            trunk,
            heads,
            len: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Indices of the two zero-initialized output layers.
    pub fn output_layers(&self) -> [usize; 2] {
        [
            *self.heads[0].last().expect("head has an output layer"),
            *self.heads[1].last().expect("head has an output layer"),
        ]
    }
}

/// Per-parameter gradient, laid out like [`VectorFieldNet::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

/// Activations recorded by a forward pass, consumed by backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    // inputs[l] and outputs[l] for every layer index l
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    velocity: [f64; 6],
}

impl Trace {
    pub fn velocity(&self) -> [f64; 6] {
        self.velocity
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldNet {
    config: NetConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Sinusoidal features `[sin(2^j π τ), cos(2^j π τ)]` for `j = 0..dim/2`.
pub fn time_embedding(tau: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let arg = (1u64 << j) as f64 * PI * tau;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

impl VectorFieldNet {
    /// He-style uniform initialization; output layers start at zero.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.len()];
        let zeroed = layout.output_layers();
        for (i, spec) in layout.layers.iter().enumerate() {
            if zeroed.contains(&i) {
                continue;
            }
            let bound = (6.0 / spec.inputs as f64).sqrt();
            for w in &mut params[spec.weight_range()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: NetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                actual: params.len(),
                context: "parameter buffer",
            });
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros(self.params.len())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_inputs(&self, tau: f64, cond: &ConditionVector) -> Result<()> {
        if cond.dim() != self.config.cond_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.cond_dim,
                actual: cond.dim(),
                context: "condition vector",
            });
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
        }
        Ok(())
    }

    fn dense(&self, layer: usize, x: &[f64]) -> Vec<f64> {
        let spec = &self.layout.layers[layer];
        let w = &self.params[spec.weight_range()];
        let b = &self.params[spec.bias_range()];
        let mut y: Vec<f64> = w
            .chunks_exact(spec.inputs)
            .zip(b)
            .map(|(row, bias)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias)
            .collect();
        if spec.activation == Activation::Tanh {
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        y
    }

    /// Forward pass recording every layer's input and output.
    pub fn forward_trace(
        &self,
        state: &MotionState,
        tau: f64,
        cond: &ConditionVector,
    ) -> Result<Trace> {
        self.check_inputs(tau, cond)?;
        let n = self.layout.layers.len();
        let mut inputs = vec![Vec::new(); n];
        let mut outputs = vec![Vec::new(); n];
        let mut run = |layer: usize, x: Vec<f64>| -> Vec<f64> {
            let y = self.dense(layer, &x);
            inputs[layer] = x;
            outputs[layer] = y.clone();
            y
        };

        let te = time_embedding(tau, self.config.time_embed_dim);
        let se = run(self.layout.state_embed, state.to_array().to_vec());
        let ch = run(self.layout.cond_embed[0], cond.values().to_vec());
        let ce = run(self.layout.cond_embed[1], ch);

        let mut h = te;
        h.extend_from_slice(&se);
        h.extend_from_slice(&ce);
        for &l in &self.layout.trunk {
            h = run(l, h);
        }
        let mut velocity = [0.0; 6];
        for (k, head) in self.layout.heads.iter().enumerate() {
            let mut x = h.clone();
            for &l in head {
                x = run(l, x);
            }
            velocity[3 * k..3 * k + 3].copy_from_slice(&x);
        }
        Ok(Trace {
            inputs,
            outputs,
            velocity,
        })
    }

    /// Predicted velocity: rotation head in `[0..3]`, translation head in `[3..6]`.
    pub fn forward(&self, state: &MotionState, tau: f64, cond: &ConditionVector) -> Result<[f64; 6]> {
        Ok(self.forward_trace(state, tau, cond)?.velocity)
    }

    fn dense_backward(&self, layer: usize, trace: &Trace, gy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let spec = &self.layout.layers[layer];
        let x = &trace.inputs[layer];
        let y = &trace.outputs[layer];
        let gpre: Vec<f64> = match spec.activation {
            Activation::Identity => gy.to_vec(),
            Activation::Tanh => gy.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
        };
        let w = &self.params[spec.weight_range()];
        let (gw, gb) = grads[spec.offset..spec.offset + spec.len()].split_at_mut(spec.inputs * spec.outputs);
        let mut gx = vec![0.0; spec.inputs];
        for (o, &g) in gpre.iter().enumerate() {
            gb[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = o * spec.inputs;
            for i in 0..spec.inputs {
                gw[row + i] += g * x[i];
                gx[i] += g * w[row + i];
            }
        }
        gx
    }

    /// Adds the gradient of `⟨velocity, upstream⟩` w.r.t. every parameter into `grads`.
    pub fn accumulate_backward(&self, trace: &Trace, upstream: &[f64; 6], grads: &mut Gradients) {
        let g = &mut grads.0;
        let trunk_out = self.layout.layers[*self.layout.trunk.last().expect("nonempty trunk")].outputs;
        let mut gh = vec![0.0; trunk_out];
        for (k, head) in self.layout.heads.iter().enumerate() {
            let mut gx = upstream[3 * k..3 * k + 3].to_vec();
            for &l in head.iter().rev() {
                gx = self.dense_backward(l, trace, &gx, g);
            }
            gh.iter_mut().zip(&gx).for_each(|(a, b)| *a += b);
        }
        for &l in self.layout.trunk.iter().rev() {
            gh = self.dense_backward(l, trace, &gh, g);
        }
        let t = self.config.time_embed_dim;
        let s = self.config.state_embed_dim;
        self.dense_backward(self.layout.state_embed, trace, &gh[t..t + s], g);
        let gc = self.dense_backward(self.layout.cond_embed[1], trace, &gh[t + s..], g);
        self.dense_backward(self.layout.cond_embed[0], trace, &gc, g);
    }

    /// Exact gradient of `⟨forward(state, tau, cond), upstream⟩`.
    pub fn backward(
        &self,
        state: &MotionState,
        tau: f64,
        cond: &ConditionVector,
        upstream: &[f64; 6],
    ) -> Result<Gradients> {
        let trace = self.forward_trace(state, tau, cond)?;
        let mut grads = self.zero_gradients();
        self.accumulate_backward(&trace, upstream, &mut grads);
        Ok(grads)
    }
}

// Checkpoint text format:
//
//   flowvo-checkpoint 1
//   cond_dim=16
//   ...
//   trunk=64,64
//   head=32,32
//   param_count=<n>
//   layer <name> <rows> <cols> <activation>
//   <one weight row per line>
//   <bias row>
//   ...
//   end
//
// Floats use 17 significant digits so reading back is exact.

const MAGIC: &str = "flowvo-checkpoint 1";

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_row<W: Write>(w: &mut W, row: &[f64]) -> std::io::Result<()> {
    let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
    writeln!(w, "{}", line.join(" "))
}

fn join_widths(ws: &[usize]) -> String {
    ws.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

/// Line reader that tracks line numbers for diagnostics.
pub(crate) struct LineReader<R> {
    inner: R,
    pub line: usize,
    source: std::path::PathBuf,
}

impl<R: BufRead> LineReader<R> {
    pub(crate) fn new(inner: R, source: impl Into<std::path::PathBuf>) -> Self {
        Self {
            inner,
            line: 0,
            source: source.into(),
        }
    }

    pub(crate) fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.source.clone(), self.line, msg)
    }

    pub(crate) fn next_line(&mut self) -> Result<Option<String>> {
        let mut buf = String::new();
        let n = self
            .inner
            .read_line(&mut buf)
            .map_err(|e| Error::io(self.source.clone(), e))?;
        if n == 0 {
            return Ok(None);
        }
        self.line += 1;
        Ok(Some(buf.trim_end_matches(['\n', '\r']).to_string()))
    }

    pub(crate) fn expect_line(&mut self) -> Result<String> {
        self.next_line()?
            .ok_or_else(|| self.err("unexpected end of file"))
    }

    pub(crate) fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let line = self.expect_line()?;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| self.err(format!("bad float {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != n {
            return Err(self.err(format!("expected {n} values, found {}", vals.len())));
        }
        Ok(vals)
    }

    pub(crate) fn key_value(&mut self, key: &str) -> Result<String> {
        let line = self.expect_line()?;
        match line.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok(v.trim().to_string()),
            _ => Err(self.err(format!("expected `{key}=...`, found {line:?}"))),
        }
    }
}

impl VectorFieldNet {
    pub fn write_text<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let c = &self.config;
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "cond_dim={}", c.cond_dim)?;
        writeln!(w, "time_embed_dim={}", c.time_embed_dim)?;
        writeln!(w, "state_embed_dim={}", c.state_embed_dim)?;
        writeln!(w, "cond_hidden_dim={}", c.cond_hidden_dim)?;
        writeln!(w, "cond_embed_dim={}", c.cond_embed_dim)?;
        writeln!(w, "trunk={}", join_widths(&c.trunk))?;
        writeln!(w, "head={}", join_widths(&c.head))?;
        writeln!(w, "param_count={}", self.params.len())?;
        for spec in &self.layout.layers {
            writeln!(
                w,
                "layer {} {} {} {}",
                spec.name,
                spec.outputs,
                spec.inputs,
                spec.activation.name()
            )?;
            for row in self.params[spec.weight_range()].chunks_exact(spec.inputs) {
                write_row(w, row)?;
            }
            write_row(w, &self.params[spec.bias_range()])?;
        }
        writeln!(w, "end")
    }

    pub(crate) fn read_text_from<R: BufRead>(r: &mut LineReader<R>) -> Result<Self> {
        if r.expect_line()? != MAGIC {
            return Err(r.err("not a flowvo checkpoint"));
        }
        let usize_key = |r: &mut LineReader<R>, key: &str| -> Result<usize> {
            let v = r.key_value(key)?;
            v.parse().map_err(|_| r.err(format!("bad integer for {key}: {v:?}")))
        };
        let cond_dim = usize_key(r, "cond_dim")?;
        let time_embed_dim = usize_key(r, "time_embed_dim")?;
        let state_embed_dim = usize_key(r, "state_embed_dim")?;
        let cond_hidden_dim = usize_key(r, "cond_hidden_dim")?;
        let cond_embed_dim = usize_key(r, "cond_embed_dim")?;
        let widths = |r: &mut LineReader<R>, key: &str| -> Result<Vec<usize>> {
            let v = r.key_value(key)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|t| t.trim().parse().map_err(|_| r.err(format!("bad width {t:?}"))))
                .collect()
        };
        let trunk = widths(r, "trunk")?;
        let head = widths(r, "head")?;
        let config = NetConfig {
            cond_dim,
            time_embed_dim,
            state_embed_dim,
            cond_hidden_dim,
            cond_embed_dim,
            trunk,
            head,
        };
        config.validate()?;
        let count = usize_key(r, "param_count")?;
        let layout = Layout::new(&config);
        if count != layout.len() {
            return Err(r.err(format!(
                "param_count {count} disagrees with the declared widths ({})",
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for spec in &layout.layers {
            let header = r.expect_line()?;
            let expected = format!(
                "layer {} {} {} {}",
                spec.name,
                spec.outputs,
                spec.inputs,
                spec.activation.name()
            );
            if header != expected {
                return Err(r.err(format!("expected {expected:?}, found {header:?}")));
            }
            for _ in 0..spec.outputs {
                params.extend(r.floats(spec.inputs)?);
            }
            params.extend(r.floats(spec.outputs)?);
        }
        if r.expect_line()? != "end" {
            return Err(r.err("expected `end`"));
        }
        Self::from_params(config, params)
    }

    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        Self::read_text_from(&mut LineReader::new(reader, "<checkpoint>"))
    }
}
