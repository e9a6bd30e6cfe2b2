//! On-disk model checkpoints and resumable training state.
//!
//! A checkpoint directory holds `manifest.json` and `params.bin`. The
//! manifest lists every parameter entry with its shape and byte offset into
//! `params.bin`, which is a flat run of little-endian f64 values. Training
//! state for resumption lives next to it in `state.json` + `state.bin`
//! (current parameters, then Adam first and second moments, all in the
//! manifest's entry order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{Dims, ModelConfig};
use crate::nn::ParameterStore;
use crate::train::{EpochRecord, OptimizerState, Setup, TrainConfig, TrainState};

pub const FORMAT: &str = "ntsimpute-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const STATE_JSON: &str = "state.json";
pub const STATE_BIN: &str = "state.bin";

const H0_NOTE: &str = "decoder initial state H0 ~ N(0, s^2) with standard deviation s = 1/sqrt(hidden); zero in mean mode";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    pub dims: Dims,
    pub train: TrainConfig,
    pub seed: u64,
    pub window: usize,
    pub anchors: Vec<usize>,
    pub num_nodes: usize,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub dataset_digest: Option<String>,
    pub h0: String,
    pub entries: Vec<Entry>,
}

/// A trained model as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParameterStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    next_epoch: usize,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    best_epoch: Option<usize>,
    best_val_mae: Option<f64>,
    bad_epochs: usize,
    stopped: bool,
    log: Vec<EpochRecord>,
}

fn entries_of(params: &ParameterStore) -> Vec<Entry> {
    let mut offset = 0;
    params
        .iter()
        .map(|(name, p)| {
            let (r, c) = p.values.dim();
            let e = Entry {
                name: name.clone(),
                shape: [r, c],
                offset,
            };
            offset += 8 * r * c;
            e
        })
        .collect()
}

fn push_values<'a>(buf: &mut Vec<u8>, arrays: impl Iterator<Item = &'a Array2<f64>>) {
    for a in arrays {
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

/// Decodes one section of `bytes` laid out by `entries`, starting at `base`.
fn decode(
    path: &Path,
    bytes: &[u8],
    base: usize,
    entries: &[Entry],
) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut out = BTreeMap::new();
    for e in entries {
        let [r, c] = e.shape;
        let start = base + e.offset;
        let end = start + 8 * r * c;
        if end > bytes.len() {
            return Err(Error::schema(path, format!("entry {} runs past the end of the file", e.name)));
        }
        let vals: Vec<f64> = bytes[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let a = Array2::from_shape_vec((r, c), vals).expect("shape matches length");
        if out.insert(e.name.clone(), a).is_some() {
            return Err(Error::schema(path, format!("duplicate entry {}", e.name)));
        }
    }
    Ok(out)
}

fn section_len(entries: &[Entry]) -> usize {
    entries.iter().map(|e| 8 * e.shape[0] * e.shape[1]).sum()
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Writes the best parameters of `state` as a checkpoint and, when
/// `with_state` is set, the full training state for resumption.
pub fn save(
    dir: &Path,
    setup: &Setup,
    state: &TrainState,
    dataset_digest: Option<&str>,
    with_state: bool,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = entries_of(&state.best_params);
    let manifest = Manifest {
        format: FORMAT.to_string(),
        model: setup.model.clone(),
        dims: setup.dims,
        train: setup.train.clone(),
        seed: setup.seed,
        window: setup.window,
        anchors: setup.positions.anchors.clone(),
        num_nodes: setup.positions.scores.shape()[1],
        best_epoch: state.best_epoch,
        best_val_mae: finite(state.best_val_mae),
        dataset_digest: dataset_digest.map(str::to_string),
        h0: H0_NOTE.to_string(),
        entries,
    };
    if with_state {
        let mut buf = Vec::new();
        push_values(&mut buf, state.params.iter().map(|(_, p)| &p.values));
        push_values(&mut buf, state.opt.m.values());
        push_values(&mut buf, state.opt.v.values());
        write_atomic(&dir.join(STATE_BIN), &buf)?;
        let meta = StateMeta {
            next_epoch: state.next_epoch,
            step: state.opt.step,
            beta1: state.opt.beta1,
            beta2: state.opt.beta2,
            eps: state.opt.eps,
            best_epoch: state.best_epoch,
            best_val_mae: finite(state.best_val_mae),
            bad_epochs: state.bad_epochs,
            stopped: state.stopped,
            log: state.log.clone(),
        };
        let text = serde_json::to_string_pretty(&meta).expect("state serializes");
        write_atomic(&dir.join(STATE_JSON), text.as_bytes())?;
    }
    let mut buf = Vec::new();
    push_values(&mut buf, state.best_params.iter().map(|(_, p)| &p.values));
    write_atomic(&dir.join(PARAMS), &buf)?;
    // the manifest goes last so a complete manifest implies complete data
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), text.as_bytes())
}

fn check_entries(path: &Path, manifest: &Manifest, expected: &ParameterStore) -> Result<()> {
    let want = entries_of(expected);
    if want != manifest.entries {
        let names: Vec<&str> = manifest.entries.iter().map(|e| e.name.as_str()).collect();
        let missing: Vec<&str> = expected.names().filter(|n| !names.contains(n)).collect();
        return Err(Error::schema(
            path,
            format!("parameter entries do not match the model (missing {missing:?})"),
        ));
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.format != FORMAT {
        return Err(Error::schema(&mpath, format!("unknown format {:?}", manifest.format)));
    }
    let mut template = crate::model::build_params(&manifest.dims, manifest.seed)?;
    check_entries(&mpath, &manifest, &template)?;
    let ppath = dir.join(PARAMS);
    let bytes = read_bytes(&ppath)?;
    if bytes.len() != section_len(&manifest.entries) {
        return Err(Error::schema(&ppath, "size does not match the manifest"));
    }
    for (name, a) in decode(&ppath, &bytes, 0, &manifest.entries)? {
        *template.values_mut(&name).expect("checked above") = a;
    }
    Ok(Checkpoint {
        manifest,
        params: template,
    })
}

/// Reloads the training state saved by [`save`] with `with_state`.
pub fn load_state(dir: &Path, ckpt: &Checkpoint) -> Result<TrainState> {
    let spath = dir.join(STATE_JSON);
    let meta: StateMeta = read_json(&spath)?;
    let bpath = dir.join(STATE_BIN);
    let bytes = read_bytes(&bpath)?;
    let entries = &ckpt.manifest.entries;
    let len = section_len(entries);
    if bytes.len() != 3 * len {
        return Err(Error::schema(&bpath, "size does not match the manifest"));
    }
    let mut params = ckpt.params.clone();
    for (name, a) in decode(&bpath, &bytes, 0, entries)? {
        *params.values_mut(&name).expect("entries checked on load") = a;
    }
    let opt = OptimizerState {
        m: decode(&bpath, &bytes, len, entries)?,
        v: decode(&bpath, &bytes, 2 * len, entries)?,
        step: meta.step,
        beta1: meta.beta1,
        beta2: meta.beta2,
        eps: meta.eps,
    };
    Ok(TrainState {
        params,
        opt,
        next_epoch: meta.next_epoch,
        best_params: ckpt.params.clone(),
        best_epoch: meta.best_epoch,
        best_val_mae: meta.best_val_mae.unwrap_or(f64::INFINITY),
        bad_epochs: meta.bad_epochs,
        stopped: meta.stopped,
        log: meta.log,
    })
}
