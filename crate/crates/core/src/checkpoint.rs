//! Checkpoint container and run-state persistence.
//!
//! A checkpoint is a directory holding
//!
//! * `manifest.json`: format tag, one entry per array (`name`, `shape`,
//!   `dtype = "f64le"`, byte `offset` into the data file, element count
//!   `len`), and a free-form `meta` object;
//! * `arrays.bin`: the arrays back to back as little-endian `f64`, row-major.
//!
//! Networks are stored layer by layer as `<net>.layer<i>.weight` (`out × in`)
//! and `<net>.layer<i>.bias`; activations are listed under
//! `meta.activations.<net>`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::approx::{Activation, Layer, MlpParams};
use crate::config::RunConfig;
use crate::env::Transition;
use crate::error::{Error, Result};
use crate::model::{CertainSetThresholds, EnsembleModel};
use crate::orchestrator::{IterationMetrics, IterationState, TrajectoryStore};
use crate::rl::{AgentBundle, AgentConfig};

pub const CHECKPOINT_FORMAT: &str = "dynasaur.checkpoint.v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARRAYS_FILE: &str = "arrays.bin";
pub const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data file.
    pub offset: usize,
    /// Number of elements.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub meta: Value,
}

/// Named, shape-annotated flat arrays plus network activations.
#[derive(Clone, Debug, Default)]
pub struct ArrayStore {
    entries: Vec<ArrayEntry>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
    activations: BTreeMap<String, Vec<Activation>>,
}

impl ArrayStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::Checkpoint(format!(
                "array `{name}`: shape {shape:?} needs {len} values, got {}",
                values.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate array `{name}`")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ArrayEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: DTYPE.into(),
            offset: 8 * self.data.len(),
            len,
        });
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let &k = self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        let e = &self.entries[k];
        let start = e.offset / 8;
        Ok((&e.shape, &self.data[start..start + e.len]))
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let (shape, v) = self.get(name)?;
        if shape.len() != 1 {
            return Err(Error::Checkpoint(format!("array `{name}` has shape {shape:?}, expected 1-D")));
        }
        Ok(v.to_vec())
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let (shape, v) = self.get(name)?;
        if shape.len() != 2 {
            return Err(Error::Checkpoint(format!("array `{name}` has shape {shape:?}, expected 2-D")));
        }
        Ok(Array2::from_shape_vec((shape[0], shape[1]), v.to_vec()).expect("shape checked on insert"))
    }

    pub fn insert_rows(&mut self, name: &str, rows: &[Vec<f64>], width: usize) -> Result<()> {
        let mut flat = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::Checkpoint(format!("array `{name}`: ragged rows")));
            }
            flat.extend_from_slice(r);
        }
        self.insert(name, &[rows.len(), width], &flat)
    }

    pub fn rows(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        Ok(self.matrix(name)?.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    pub fn insert_mlp(&mut self, prefix: &str, net: &MlpParams) -> Result<()> {
        for (i, l) in net.layers.iter().enumerate() {
            let w = l.weight.as_standard_layout();
            self.insert(&format!("{prefix}.layer{i}.weight"), &[l.out_dim(), l.in_dim()], w.as_slice().unwrap())?;
            self.insert(&format!("{prefix}.layer{i}.bias"), &[l.out_dim()], l.bias.as_slice().unwrap())?;
        }
        self.activations
            .insert(prefix.to_string(), net.layers.iter().map(|l| l.activation).collect());
        Ok(())
    }

    pub fn mlp(&self, prefix: &str) -> Result<MlpParams> {
        let acts = self
            .activations
            .get(prefix)
            .ok_or_else(|| Error::Checkpoint(format!("missing network `{prefix}`")))?;
        let layers = acts
            .iter()
            .enumerate()
            .map(|(i, &activation)| {
                Ok(Layer {
                    weight: self.matrix(&format!("{prefix}.layer{i}.weight"))?,
                    bias: Array1::from(self.vector(&format!("{prefix}.layer{i}.bias"))?),
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers).map_err(|e| Error::Checkpoint(format!("network `{prefix}`: {e}")))
    }

    /// Write `manifest.json` and `arrays.bin` into `dir`, creating it.
    pub fn write(&self, dir: &Path, meta: Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(8 * self.data.len());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(ARRAYS_FILE), bytes)?;
        let mut meta = match meta {
            Value::Object(m) => m,
            Value::Null => serde_json::Map::new(),
            other => return Err(Error::Checkpoint(format!("checkpoint meta must be an object, got {other}"))),
        };
        meta.insert("activations".into(), serde_json::to_value(&self.activations).expect("activations"));
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            arrays: self.entries.clone(),
            meta: Value::Object(meta),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest");
        let mut f = std::fs::File::create(dir.join(MANIFEST_FILE))?;
        f.write_all(text.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Read a checkpoint directory; returns the arrays and the `meta` object.
    pub fn read(dir: &Path) -> Result<(Self, Value)> {
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", dir.display()));
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| bad(format!("cannot read {MANIFEST_FILE}: {e}")))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(format!("bad manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format `{}`", manifest.format)));
        }
        let bytes = std::fs::read(dir.join(ARRAYS_FILE))?;
        if bytes.len() % 8 != 0 {
            return Err(bad("data file length is not a multiple of 8".into()));
        }
        let data: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let mut index = HashMap::new();
        for (k, e) in manifest.arrays.iter().enumerate() {
            if e.dtype != DTYPE {
                return Err(bad(format!("array `{}` has unsupported dtype `{}`", e.name, e.dtype)));
            }
            if e.offset % 8 != 0 || e.shape.iter().product::<usize>() != e.len || e.offset / 8 + e.len > data.len() {
                return Err(bad(format!("array `{}` is inconsistent with the data file", e.name)));
            }
            if index.insert(e.name.clone(), k).is_some() {
                return Err(bad(format!("duplicate array `{}`", e.name)));
            }
        }
        let activations = match manifest.meta.get("activations") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| bad(format!("bad activations: {e}")))?,
            None => BTreeMap::new(),
        };
        let store = Self {
            entries: manifest.arrays,
            data,
            index,
            activations,
        };
        Ok((store, manifest.meta))
    }
}

fn put_agent(store: &mut ArrayStore, prefix: &str, agent: &AgentBundle) -> Result<Value> {
    store.insert_mlp(&format!("{prefix}.actor"), &agent.actor)?;
    store.insert_mlp(&format!("{prefix}.critic0"), &agent.critics[0])?;
    store.insert_mlp(&format!("{prefix}.critic1"), &agent.critics[1])?;
    Ok(serde_json::to_value(&agent.config).expect("agent config"))
}

fn take_agent(store: &ArrayStore, prefix: &str, config: &Value) -> Result<AgentBundle> {
    let config: AgentConfig =
        serde_json::from_value(config.clone()).map_err(|e| Error::Checkpoint(format!("{prefix} config: {e}")))?;
    let critics = [store.mlp(&format!("{prefix}.critic0"))?, store.mlp(&format!("{prefix}.critic1"))?];
    Ok(AgentBundle::from_networks(config, store.mlp(&format!("{prefix}.actor"))?, critics))
}

fn put_model(store: &mut ArrayStore, model: &EnsembleModel) -> Result<Value> {
    for (k, m) in model.members.iter().enumerate() {
        store.insert_mlp(&format!("model.member{k}"), m)?;
    }
    let ns = model.state_dim;
    let ni = ns + model.action_dim;
    store.insert("model.max_logvar", &[ns], &model.max_logvar)?;
    store.insert("model.min_logvar", &[ns], &model.min_logvar)?;
    store.insert("model.input_mean", &[ni], &model.input_mean)?;
    store.insert("model.input_std", &[ni], &model.input_std)?;
    store.insert("model.target_mean", &[ns], &model.target_mean)?;
    store.insert("model.target_std", &[ns], &model.target_std)?;
    Ok(json!({
        "state_dim": model.state_dim,
        "action_dim": model.action_dim,
        "members": model.members.len(),
        "thresholds": model.thresholds,
    }))
}

fn take_model(store: &ArrayStore, meta: &Value) -> Result<EnsembleModel> {
    let field = |k: &str| {
        meta.get(k)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint(format!("model meta lacks `{k}`")))
    };
    let members = (0..field("members")?)
        .map(|k| store.mlp(&format!("model.member{k}")))
        .collect::<Result<Vec<_>>>()?;
    let thresholds: Option<CertainSetThresholds> = serde_json::from_value(meta["thresholds"].clone())
        .map_err(|e| Error::Checkpoint(format!("model thresholds: {e}")))?;
    Ok(EnsembleModel {
        state_dim: field("state_dim")?,
        action_dim: field("action_dim")?,
        members,
        max_logvar: store.vector("model.max_logvar")?,
        min_logvar: store.vector("model.min_logvar")?,
        input_mean: store.vector("model.input_mean")?,
        input_std: store.vector("model.input_std")?,
        target_mean: store.vector("model.target_mean")?,
        target_std: store.vector("model.target_std")?,
        thresholds,
    })
}

fn put_transitions(store: &mut ArrayStore, prefix: &str, data: &[Transition], ns: usize, na: usize) -> Result<()> {
    let s: Vec<Vec<f64>> = data.iter().map(|t| t.s.clone()).collect();
    let a: Vec<Vec<f64>> = data.iter().map(|t| t.a.clone()).collect();
    let s2: Vec<Vec<f64>> = data.iter().map(|t| t.s_next.clone()).collect();
    store.insert_rows(&format!("{prefix}.s"), &s, ns)?;
    store.insert_rows(&format!("{prefix}.a"), &a, na)?;
    store.insert_rows(&format!("{prefix}.s_next"), &s2, ns)?;
    let r: Vec<f64> = data.iter().map(|t| t.r).collect();
    store.insert(&format!("{prefix}.r"), &[data.len()], &r)?;
    let flags: Vec<f64> = data
        .iter()
        .map(|t| f64::from(u8::from(t.terminated) | (u8::from(t.truncated) << 1)))
        .collect();
    store.insert(&format!("{prefix}.flags"), &[data.len()], &flags)
}

fn take_transitions(store: &ArrayStore, prefix: &str) -> Result<Vec<Transition>> {
    let s = store.rows(&format!("{prefix}.s"))?;
    let a = store.rows(&format!("{prefix}.a"))?;
    let s2 = store.rows(&format!("{prefix}.s_next"))?;
    let r = store.vector(&format!("{prefix}.r"))?;
    let flags = store.vector(&format!("{prefix}.flags"))?;
    if [a.len(), s2.len(), r.len(), flags.len()].iter().any(|&n| n != s.len()) {
        return Err(Error::Checkpoint(format!("`{prefix}` arrays disagree in length")));
    }
    Ok((0..s.len())
        .map(|k| Transition {
            s: s[k].clone(),
            a: a[k].clone(),
            s_next: s2[k].clone(),
            r: r[k],
            terminated: flags[k] as u8 & 1 != 0,
            truncated: flags[k] as u8 & 2 != 0,
        })
        .collect())
}

fn store_rows(store: &TrajectoryStore) -> Vec<Vec<f64>> {
    store.states().cloned().collect()
}

/// Persist the full run state after an iteration.
pub fn save_run(dir: &Path, config: &RunConfig, state: &IterationState) -> Result<()> {
    let env = config.env.make(config.episode_steps);
    let (ns, na) = (env.spec().state_dim, env.spec().action_dim);
    let mut store = ArrayStore::new();
    let model = state.model.as_ref().map(|m| put_model(&mut store, m)).transpose()?;
    let filter = state.filter_agent.as_ref().map(|a| put_agent(&mut store, "filter", a)).transpose()?;
    let control = state.control_agent.as_ref().map(|a| put_agent(&mut store, "control", a)).transpose()?;
    put_transitions(&mut store, "data", &state.model_data, ns, na)?;
    store.insert_rows("rho0", &state.rho0, ns)?;
    store.insert_rows("store.failed", &store_rows(&state.failed), ns)?;
    store.insert_rows("store.high", &store_rows(&state.high), ns)?;
    let meta = json!({
        "env": config.env.as_str(),
        "state_dim": ns,
        "action_dim": na,
        "iteration": state.j,
        "seed": config.seed,
        "config": config.to_toml_string()?,
        "model": model,
        "filter": filter,
        "control": control,
        "failures_cum": state.failures_cum,
        "eval_failures_cum": state.eval_failures_cum,
        "env_steps_cum": state.env_steps_cum,
        "history": state.history,
    });
    store.write(dir, meta)
}

/// Restore what [`save_run`] wrote.
pub fn load_run(dir: &Path) -> Result<(RunConfig, IterationState)> {
    let (store, meta) = ArrayStore::read(dir)?;
    let config_text = meta["config"]
        .as_str()
        .ok_or_else(|| Error::Checkpoint("meta lacks the run configuration".into()))?;
    let config = RunConfig::from_toml_str(config_text)?;
    let count = |k: &str| {
        meta[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint(format!("meta lacks `{k}`")))
    };
    let mut failed = TrajectoryStore::new(config.filter.store_capacity);
    for s in store.rows("store.failed")? {
        failed.push(s);
    }
    let mut high = TrajectoryStore::new(config.filter.store_capacity);
    for s in store.rows("store.high")? {
        high.push(s);
    }
    let history: Vec<IterationMetrics> = serde_json::from_value(meta["history"].clone())
        .map_err(|e| Error::Checkpoint(format!("history: {e}")))?;
    let state = IterationState {
        j: count("iteration")?,
        model: (!meta["model"].is_null()).then(|| take_model(&store, &meta["model"])).transpose()?,
        filter_agent: (!meta["filter"].is_null()).then(|| take_agent(&store, "filter", &meta["filter"])).transpose()?,
        control_agent: (!meta["control"].is_null()).then(|| take_agent(&store, "control", &meta["control"])).transpose()?,
        model_data: take_transitions(&store, "data")?,
        rho0: store.rows("rho0")?,
        failed,
        high,
        failures_cum: count("failures_cum")?,
        eval_failures_cum: count("eval_failures_cum")?,
        env_steps_cum: count("env_steps_cum")?,
        history,
        training_log: Vec::new(),
    };
    Ok((config, state))
}
