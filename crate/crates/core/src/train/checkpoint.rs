//! Binary checkpoint: `DFFN1\n`, a little-endian `u64` header length, a JSON
//! header, then raw little-endian `f32` payload in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamParams};
use super::config::TrainConfig;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::network::{init_params, DffnConfig, DffnParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"DFFN1\n";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net_cfg: DffnConfig,
    pub train_cfg: TrainConfig,
    pub epoch: usize,
    pub iteration: usize,
    pub store: ParamStore<f32>,
    pub adam: Adam,
}

impl TrainState {
    pub fn fresh(net_cfg: &DffnConfig, train_cfg: &TrainConfig) -> Result<(DffnParams, Self)> {
        let (params, store) = init_params(net_cfg)?;
        let hyper = AdamParams { beta1: train_cfg.beta1, beta2: train_cfg.beta2, eps: train_cfg.eps };
        let adam = Adam::new(&store, hyper);
        let state =
            Self { net_cfg: net_cfg.clone(), train_cfg: train_cfg.clone(), epoch: 0, iteration: 0, store, adam };
        Ok((params, state))
    }

    /// Bitwise comparison of every tensor and counter.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let same = |a: &Tensor<f32>, b: &Tensor<f32>| {
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.net_cfg == other.net_cfg
            && self.train_cfg == other.train_cfg
            && (self.epoch, self.iteration, self.adam.step) == (other.epoch, other.iteration, other.adam.step)
            && self.store.len() == other.store.len()
            && self.store.iter().zip(other.store.iter()).all(|((_, a), (_, b))| a.name == b.name && same(&a.value, &b.value))
            && self.adam.m.iter().zip(&other.adam.m).all(|(a, b)| same(a, b))
            && self.adam.v.iter().zip(&other.adam.v).all(|(a, b)| same(a, b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    /// Byte length.
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    net_config: DffnConfig,
    train_config: TrainConfig,
    epoch: usize,
    iteration: usize,
    adam_step: u64,
    manifest: Vec<ManifestEntry>,
}

fn tensors(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::with_capacity(3 * state.store.len());
    for (_, p) in state.store.iter() {
        out.push((format!("p/{}", p.name), &p.value));
    }
    for ((_, p), m) in state.store.iter().zip(&state.adam.m) {
        out.push((format!("m/{}", p.name), m));
    }
    for ((_, p), v) in state.store.iter().zip(&state.adam.v) {
        out.push((format!("v/{}", p.name), v));
    }
    out
}

pub fn write_checkpoint(w: &mut impl Write, state: &TrainState) -> Result<()> {
    let items = tensors(state);
    let mut manifest = Vec::with_capacity(items.len());
    let mut offset = 0;
    for (name, t) in &items {
        let len = 4 * t.numel();
        manifest.push(ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len });
        offset += len;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        net_config: state.net_cfg.clone(),
        train_config: state.train_cfg.clone(),
        epoch: state.epoch,
        iteration: state.iteration,
        adam_step: state.adam.step,
        manifest,
    };
    let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::Manifest(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut payload = Vec::with_capacity(offset);
    for (_, t) in &items {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(&mut f, state)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(DffnParams, TrainState)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(Error::PayloadSizeMismatch { expected: 8, found: rest.len() });
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(Error::PayloadSizeMismatch { expected: hlen, found: rest.len() });
    }
    let header: Header = serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::Manifest(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(header.format_version));
    }
    let payload = &rest[hlen..];

    let (params, mut state) = TrainState::fresh(&header.net_config, &header.train_config)?;
    let expected: Vec<(String, Vec<usize>)> =
        tensors(&state).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != header.manifest.len() {
        return Err(Error::Manifest(format!(
            "manifest lists {} tensors, the configured model has {}",
            header.manifest.len(),
            expected.len()
        )));
    }
    let mut offset = 0;
    for (e, (name, shape)) in header.manifest.iter().zip(&expected) {
        if &e.name != name || &e.shape != shape {
            return Err(Error::Manifest(format!(
                "entry `{}` {:?} does not match model tensor `{name}` {shape:?}",
                e.name, e.shape
            )));
        }
        if e.offset != offset || e.len != 4 * shape.iter().product::<usize>() {
            return Err(Error::Manifest(format!("entry `{}` does not tile the payload", e.name)));
        }
        offset += e.len;
    }
    if payload.len() != offset {
        return Err(Error::PayloadSizeMismatch { expected: offset, found: payload.len() });
    }

    let decode = |e: &ManifestEntry| -> Result<Tensor<f32>> {
        let data = payload[e.offset..e.offset + e.len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(&e.shape, data)
    };
    let n = state.store.len();
    let ids: Vec<_> = state.store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        state.store.set_value(id, decode(&header.manifest[k])?)?;
        state.adam.m[k] = decode(&header.manifest[n + k])?;
        state.adam.v[k] = decode(&header.manifest[2 * n + k])?;
    }
    state.epoch = header.epoch;
    state.iteration = header.iteration;
    state.adam.step = header.adam_step;
    Ok((params, state))
}

pub fn load_checkpoint(path: &Path) -> Result<(DffnParams, TrainState)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}
