//! Checkpoints are NPZ archives: one float32 array per parameter, optional
//! Adam moments under `optim/`, the model config as `config.json` and an
//! opaque JSON training state as `train_state.json`.

use std::collections::BTreeMap;
use std::path::Path;

use boxseg_tensor::Tensor;

use super::npy::{NpyArray, NpyData};
use super::npz::Npz;
use crate::error::{CoreError, Result};
use crate::model::{describe, ModelConfig, ParamStore};

const CONFIG_ENTRY: &str = "config.json";
const STATE_ENTRY: &str = "train_state.json";
const OPTIM_PREFIX: &str = "optim/";

/// AdamW moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub train_state: Option<serde_json::Value>,
}

fn ckpt_err(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint { msg: msg.into(), missing: Vec::new() }
}

fn to_npy(t: &Tensor) -> NpyArray {
    NpyArray::f32(t.shape().to_vec(), t.data().to_vec())
}

fn from_npy(name: &str, a: &NpyArray) -> Result<Tensor> {
    match &a.data {
        NpyData::F32(v) => Ok(Tensor::new(a.shape.clone(), v.clone())?),
        other => Err(ckpt_err(format!("'{name}' has dtype {}, expected <f4", other.descr()))),
    }
}

pub fn checkpoint_to_npz(ck: &Checkpoint) -> Result<Npz> {
    let mut npz = Npz::new();
    for (name, p) in ck.params.iter() {
        npz.insert(name.clone(), to_npy(&p.value));
    }
    if let Some(opt) = &ck.optimizer {
        npz.insert(format!("{OPTIM_PREFIX}step"), NpyArray::new(vec![], NpyData::I64(vec![opt.step as i64])));
        for (k, t) in &opt.m {
            npz.insert(format!("{OPTIM_PREFIX}m/{k}"), to_npy(t));
        }
        for (k, t) in &opt.v {
            npz.insert(format!("{OPTIM_PREFIX}v/{k}"), to_npy(t));
        }
    }
    let cfg = serde_json::to_vec_pretty(&ck.config).map_err(|e| ckpt_err(e.to_string()))?;
    npz.extras.insert(CONFIG_ENTRY.into(), cfg);
    if let Some(st) = &ck.train_state {
        let st = serde_json::to_vec_pretty(st).map_err(|e| ckpt_err(e.to_string()))?;
        npz.extras.insert(STATE_ENTRY.into(), st);
    }
    Ok(npz)
}

/// Parses a checkpoint archive. Parameters are checked against the
/// network described by the stored config; `fallback` supplies the config
/// when the archive has none.
pub fn checkpoint_from_npz(npz: &Npz, fallback: Option<&ModelConfig>) -> Result<Checkpoint> {
    let config: ModelConfig = match (npz.extras.get(CONFIG_ENTRY), fallback) {
        (Some(b), _) => serde_json::from_slice(b).map_err(|e| ckpt_err(format!("bad {CONFIG_ENTRY}: {e}")))?,
        (None, Some(c)) => c.clone(),
        (None, None) => return Err(ckpt_err(format!("no {CONFIG_ENTRY} entry and no config given"))),
    };
    config.validate()?;
    let plan = describe(&config);
    let mut params = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut step = None;
    for (name, a) in &npz.arrays {
        if let Some(rest) = name.strip_prefix(OPTIM_PREFIX) {
            if rest == "step" {
                step = a.data.to_f64().first().map(|&s| s as u64);
            } else if let Some(k) = rest.strip_prefix("m/") {
                m.insert(k.to_string(), from_npy(name, a)?);
            } else if let Some(k) = rest.strip_prefix("v/") {
                v.insert(k.to_string(), from_npy(name, a)?);
            } else {
                return Err(ckpt_err(format!("unknown optimizer entry '{name}'")));
            }
            continue;
        }
        params.insert(name, from_npy(name, a)?, true);
    }
    params.check_against(&plan.specs)?;
    for s in &plan.specs {
        if let Some(p) = params.get_mut(&s.name) {
            p.trainable = s.trainable;
        }
    }
    let optimizer = step.map(|step| OptimizerState { step, m, v });
    let train_state = match npz.extras.get(STATE_ENTRY) {
        Some(b) => Some(serde_json::from_slice(b).map_err(|e| ckpt_err(format!("bad {STATE_ENTRY}: {e}")))?),
        None => None,
    };
    Ok(Checkpoint { config, params, optimizer, train_state })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    checkpoint_to_npz(ck)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_npz(&Npz::read(path)?, None)
}
