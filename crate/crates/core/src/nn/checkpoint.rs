//! Directory checkpoints: `manifest.json` plus `params.bin`, a flat list of
//! named f32 blocks (`count u32`, then per block `name_len u32, name,
//! ndim u32, dims u32..., values f32...`, all little-endian).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::optim::AdamW;
use super::params::ParamStore;
use super::{NnError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

pub fn encode_blocks(blocks: &[(String, &Array2<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, a) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(a.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(a.ncols() as u32).to_le_bytes());
        for &v in a.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(NnError::Format("truncated parameter file".into()));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

pub fn decode_blocks(mut buf: &[u8]) -> Result<Vec<(String, Array2<f64>)>> {
    let count = take_u32(&mut buf)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = take_u32(&mut buf)? as usize;
        let name = String::from_utf8(take(&mut buf, len)?.to_vec())
            .map_err(|_| NnError::Format("block name is not UTF-8".into()))?;
        let ndim = take_u32(&mut buf)? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| take_u32(&mut buf).map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(NnError::Format(format!("block {name} has {ndim} dimensions"))),
        };
        let raw = take(&mut buf, rows * cols * 4)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let a = Array2::from_shape_vec((rows, cols), values).map_err(|e| NnError::Format(e.to_string()))?;
        out.push((name, a));
    }
    if !buf.is_empty() {
        return Err(NnError::Format("trailing bytes in parameter file".into()));
    }
    Ok(out)
}

const STEP_BLOCK: &str = "adam.step";

/// Rounds parameters (and optimizer state) to the precision a checkpoint
/// stores, so that a run continuing in memory matches one resumed from disk.
pub fn quantize(store: &mut ParamStore, opt: Option<&mut AdamW>) {
    let round = |a: &mut Array2<f64>| a.mapv_inplace(|v| v as f32 as f64);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        round(&mut store.block_mut(id).value);
    }
    if let Some(opt) = opt {
        for a in opt.m.iter_mut().chain(opt.v.iter_mut()).chain(opt.vmax.iter_mut()) {
            round(a);
        }
    }
}

/// Writes parameters (and optionally optimizer moments and step count) with a
/// manifest. The step count is stored as an f32 and so is exact below 2^24.
pub fn save<M: Serialize>(dir: &Path, manifest: &M, store: &ParamStore, opt: Option<&AdamW>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blocks: Vec<(String, &Array2<f64>)> = store.blocks().iter().map(|b| (b.name.clone(), &b.value)).collect();
    let step = opt.map(|o| Array2::from_elem((1, 1), o.step as f64));
    if let (Some(opt), Some(step)) = (opt, step.as_ref()) {
        blocks.push((STEP_BLOCK.to_string(), step));
        for (i, b) in store.blocks().iter().enumerate() {
            blocks.push((format!("adam.m/{}", b.name), &opt.m[i]));
            blocks.push((format!("adam.v/{}", b.name), &opt.v[i]));
            blocks.push((format!("adam.vmax/{}", b.name), &opt.vmax[i]));
        }
    }
    let json = serde_json::to_string_pretty(manifest).map_err(|e| NnError::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    let mut f = fs::File::create(dir.join(PARAMS_FILE))?;
    f.write_all(&encode_blocks(&blocks))?;
    Ok(())
}

pub fn load_manifest<M: DeserializeOwned>(dir: &Path) -> Result<M> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| NnError::Format(format!("manifest: {e}")))
}

pub fn load_blocks(dir: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let mut buf = Vec::new();
    fs::File::open(dir.join(PARAMS_FILE))?.read_to_end(&mut buf)?;
    decode_blocks(&buf)
}

/// Copies every block of `store` from `blocks` by name; optimizer moments are
/// restored into `opt` when present.
pub fn restore(blocks: &[(String, Array2<f64>)], store: &mut ParamStore, opt: Option<&mut AdamW>) -> Result<()> {
    let lookup = |name: &str| blocks.iter().find(|(n, _)| n == name).map(|(_, a)| a);
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let name = store.block(id).name.clone();
        let a = lookup(&name).ok_or_else(|| NnError::MissingBlock(name.clone()))?;
        if a.dim() != store.block(id).value.dim() {
            return Err(NnError::ShapeMismatch(format!(
                "block {name}: checkpoint {:?}, model {:?}",
                a.dim(),
                store.block(id).value.dim()
            )));
        }
        store.block_mut(id).value.assign(a);
    }
    if let Some(opt) = opt {
        let step = lookup(STEP_BLOCK).ok_or(NnError::MissingBlock(STEP_BLOCK.into()))?;
        opt.step = step[[0, 0]] as u64;
        for (i, &id) in ids.iter().enumerate() {
            let name = store.block(id).name.clone();
            for (prefix, target) in [("adam.m/", &mut opt.m[i]), ("adam.v/", &mut opt.v[i]), ("adam.vmax/", &mut opt.vmax[i])] {
                let key = format!("{prefix}{name}");
                let a = lookup(&key).ok_or(NnError::MissingBlock(key))?;
                target.assign(a);
            }
        }
    }
    Ok(())
}
