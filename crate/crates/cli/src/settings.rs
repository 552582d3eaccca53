//! Merged configuration: a key=value file overlaid with command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::Result;
use flowvo::config::KeyValues;

use crate::commands::usage;

/// Every key any subcommand understands.
const KNOWN: &[&str] = &[
    "seed",
    // gen
    "kind",
    "n",
    "ambiguity",
    "noise",
    "k",
    "lift_seed",
    // train
    "batch_size",
    "steps",
    "lr",
    "lr_decay_factor",
    "lr_decay_step",
    "beta1",
    "beta2",
    "eps",
    "weight_rot",
    "weight_trans",
    "cond_dim",
    "time_embed_dim",
    "state_embed_dim",
    "cond_hidden_dim",
    "cond_embed_dim",
    "trunk",
    "head",
    // infer, eval, ablate-steps
    "method",
    "solver_steps",
    "samples",
    "align",
    "scale",
    "scenario",
    "step_list",
];

pub struct Settings {
    kv: KeyValues,
    /// Resolved values, recorded for the manifest and the config snapshot.
    pub resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(config: Option<&Path>) -> Result<Self> {
        let kv = match config {
            Some(p) => {
                if !p.is_file() {
                    return Err(usage(format!("config file {} does not exist", p.display())));
                }
                KeyValues::load(p)?
            }
            None => KeyValues::default(),
        };
        if let Some((k, _)) = kv.iter().find(|(k, _)| !KNOWN.contains(k)) {
            return Err(usage(format!("unknown config key {k:?}")));
        }
        Ok(Self {
            kv,
            resolved: BTreeMap::new(),
        })
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, flag: Option<T>) {
        if let Some(v) = flag {
            self.kv.set(key, v);
        }
    }

    pub fn get<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T> {
        let v = self.kv.get_or(key, default)?;
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn kv(&mut self) -> &mut KeyValues {
        &mut self.kv
    }

    pub fn record(&mut self, key: &str, value: impl ToString) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    /// `key=value` lines of the resolved configuration.
    pub fn snapshot(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
