//! Checkpoint serialization.
//!
//! A checkpoint is a text manifest plus a binary payload. Manifest lines are
//! `key=value` pairs; tensor entries look like
//!
//! ```text
//! tensor name=encoder.sub.embed shape=40x16 offset=0
//! ```
//!
//! where `offset` counts bytes into the payload, which holds little-endian
//! `f32` values in manifest order. Optimizer moments are appended as tensors
//! named `adam.m.<param>` / `adam.v.<param>` and the step counter as the
//! `meta adam.step=<n>` line.

use std::fs;
use std::path::Path;

use super::{Adam, OptimizerState, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PAYLOAD_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Parameters and optional optimizer state read back from disk.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub first_moment: Vec<(String, Tensor)>,
    pub second_moment: Vec<(String, Tensor)>,
    pub adam_step: Option<usize>,
}

impl Checkpoint {
    /// Overwrites every parameter of `store` from this checkpoint. All names
    /// and shapes must match exactly.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    store.value(id).shape(),
                    value.shape()
                )));
            }
            *store.value_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Optimizer state aligned with `store`'s registration order.
    pub fn optimizer_state(&self, store: &ParamStore) -> Option<OptimizerState> {
        let step = self.adam_step?;
        let lookup =
            |list: &[(String, Tensor)], name: &str| list.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            m.push(lookup(&self.first_moment, &p.name)?);
            v.push(lookup(&self.second_moment, &p.name)?);
        }
        Some(OptimizerState {
            first_moment: m,
            second_moment: v,
            step,
        })
    }
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

/// Writes `store` (and `adam`, when given) into `dir`.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, adam: Option<&Adam>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("format=entangler-checkpoint-v1\n");
    let mut payload: Vec<u8> = Vec::with_capacity(store.numel() * 4);
    let mut push = |name: &str, t: &Tensor, manifest: &mut String| {
        manifest.push_str(&format!(
            "tensor name={} shape={} offset={}\n",
            name,
            shape_str(t.shape()),
            payload.len()
        ));
        for &x in t.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for (_, p) in store.iter() {
        push(&p.name, &p.value, &mut manifest);
    }
    if let Some(adam) = adam {
        manifest.push_str(&format!("meta adam.step={}\n", adam.state.step));
        for (i, (_, p)) in store.iter().enumerate() {
            push(
                &format!("adam.m.{}", p.name),
                &adam.state.first_moment[i],
                &mut manifest,
            );
        }
        for (i, (_, p)) in store.iter().enumerate() {
            push(
                &format!("adam.v.{}", p.name),
                &adam.state.second_moment[i],
                &mut manifest,
            );
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PAYLOAD_FILE);
    fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))?;
    Ok(())
}

pub fn read_manifest(text: &str) -> Result<(Vec<ManifestEntry>, Option<usize>)> {
    let mut entries = Vec::new();
    let mut step = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("format=") {
            continue;
        }
        let bad = || Error::Checkpoint(format!("malformed manifest line {}: {line}", ln + 1));
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("tensor") => {
                let (mut name, mut shape, mut offset) = (None, None, None);
                for kv in parts {
                    let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                    match k {
                        "name" => name = Some(v.to_string()),
                        "shape" => shape = parse_shape(v),
                        "offset" => offset = v.parse().ok(),
                        _ => return Err(bad()),
                    }
                }
                entries.push(ManifestEntry {
                    name: name.ok_or_else(bad)?,
                    shape: shape.ok_or_else(bad)?,
                    offset: offset.ok_or_else(bad)?,
                });
            }
            Some("meta") => {
                let kv = parts.next().ok_or_else(bad)?;
                if let Some(v) = kv.strip_prefix("adam.step=") {
                    step = Some(v.parse().map_err(|_| bad())?);
                }
            }
            _ => return Err(bad()),
        }
    }
    Ok((entries, step))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let (entries, adam_step) = read_manifest(&text)?;
    let mut ckpt = Checkpoint {
        adam_step,
        ..Default::default()
    };
    for e in entries {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past payload end", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::new(e.shape, data)?;
        if let Some(p) = e.name.strip_prefix("adam.m.") {
            ckpt.first_moment.push((p.to_string(), t));
        } else if let Some(p) = e.name.strip_prefix("adam.v.") {
            ckpt.second_moment.push((p.to_string(), t));
        } else {
            ckpt.params.push((e.name, t));
        }
    }
    Ok(ckpt)
}
