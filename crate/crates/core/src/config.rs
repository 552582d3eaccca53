//! Plain-text `key=value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique; a
//! repeated key is an error. Values that a caller never consumes are
//! reported by [`KeyValues::finish`] so typos do not pass silently.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flowmatch::{LossWeights, TrainConfig};
use crate::sampler::{Method, SolverConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    source: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
    used: std::collections::BTreeSet<String>,
}

impl KeyValues {
    pub fn parse(text: &str, source: impl Into<PathBuf>) -> Result<Self> {
        let source = source.into();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(source, i + 1, format!("expected key=value, found {line:?}")));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(source, i + 1, "empty key"));
            }
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(source, i + 1, format!("duplicate key {key:?}")));
            }
        }
        Ok(Self {
            source,
            entries,
            used: Default::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Sets `key`, replacing any value read from the file.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn raw(&mut self, key: &str) -> Option<&str> {
        let (_, v) = self.entries.get(key)?;
        self.used.insert(key.to_string());
        Some(v)
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some((line, v)) = self.entries.get(key) else {
            return Ok(None);
        };
        self.used.insert(key.to_string());
        v.parse()
            .map(Some)
            .map_err(|_| Error::parse(self.source.clone(), *line, format!("bad value for {key}: {v:?}")))
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((line, v)) = self.entries.get(key).cloned() else {
            return Ok(None);
        };
        self.used.insert(key.to_string());
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::parse(self.source.clone(), line, format!("bad list item for {key}: {s:?}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Errors on the first key no caller asked for.
    pub fn finish(&self) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !self.used.contains(*k)) {
            Some((k, (line, _))) => Err(Error::parse(self.source.clone(), *line, format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, (_, v))| (k.as_str(), v.as_str()))
    }
}

/// Reads training settings, starting from `base`.
pub fn train_config(kv: &mut KeyValues, base: TrainConfig) -> Result<TrainConfig> {
    let mut c = base;
    c.batch_size = kv.get_or("batch_size", c.batch_size)?;
    c.steps = kv.get_or("steps", c.steps)?;
    c.lr = kv.get_or("lr", c.lr)?;
    c.lr_decay_factor = kv.get_or("lr_decay_factor", c.lr_decay_factor)?;
    c.lr_decay_step = kv.get_or("lr_decay_step", c.lr_decay_step)?;
    c.beta1 = kv.get_or("beta1", c.beta1)?;
    c.beta2 = kv.get_or("beta2", c.beta2)?;
    c.eps = kv.get_or("eps", c.eps)?;
    c.weights = LossWeights {
        rot: kv.get_or("weight_rot", c.weights.rot)?,
        trans: kv.get_or("weight_trans", c.weights.trans)?,
    };
    c.seed = kv.get_or("seed", c.seed)?;
    c.net.cond_dim = kv.get_or("cond_dim", c.net.cond_dim)?;
    c.net.time_embed_dim = kv.get_or("time_embed_dim", c.net.time_embed_dim)?;
    c.net.state_embed_dim = kv.get_or("state_embed_dim", c.net.state_embed_dim)?;
    c.net.cond_hidden_dim = kv.get_or("cond_hidden_dim", c.net.cond_hidden_dim)?;
    c.net.cond_embed_dim = kv.get_or("cond_embed_dim", c.net.cond_embed_dim)?;
    if let Some(t) = kv.get_list("trunk")? {
        c.net.trunk = t;
    }
    if let Some(h) = kv.get_list("head")? {
        c.net.head = h;
    }
    c.validate()?;
    Ok(c)
}

/// Reads `method` and `steps` (solver steps, key `solver_steps`).
pub fn solver_config(kv: &mut KeyValues, base: SolverConfig) -> Result<SolverConfig> {
    let method: Method = kv.get_or("method", base.method)?;
    let steps = kv.get_or("solver_steps", base.steps)?;
    SolverConfig::new(method, steps)
}

/// `key=value` lines for a training configuration, in a fixed order.
pub fn train_config_lines(c: &TrainConfig) -> Vec<(String, String)> {
    let list = |v: &[usize]| v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
    [
        ("batch_size", c.batch_size.to_string()),
        ("steps", c.steps.to_string()),
        ("lr", c.lr.to_string()),
        ("lr_decay_factor", c.lr_decay_factor.to_string()),
        ("lr_decay_step", c.lr_decay_step.to_string()),
        ("beta1", c.beta1.to_string()),
        ("beta2", c.beta2.to_string()),
        ("eps", c.eps.to_string()),
        ("weight_rot", c.weights.rot.to_string()),
        ("weight_trans", c.weights.trans.to_string()),
        ("seed", c.seed.to_string()),
        ("cond_dim", c.net.cond_dim.to_string()),
        ("time_embed_dim", c.net.time_embed_dim.to_string()),
        ("state_embed_dim", c.net.state_embed_dim.to_string()),
        ("cond_hidden_dim", c.net.cond_hidden_dim.to_string()),
        ("cond_embed_dim", c.net.cond_embed_dim.to_string()),
        ("trunk", list(&c.net.trunk)),
        ("head", list(&c.net.head)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}
