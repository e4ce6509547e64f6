//! Checkpoint container: a directory holding a JSON manifest plus named
//! parameter/optimizer arrays in a small raw little-endian format.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::model::NetConfig;
use crate::tensor::Elem;
use crate::{Error, Result};

use super::{EvalReport, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"DMTLARR1";
pub const FORMAT_VERSION: u32 = 1;

/// The JSON half of a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub seed: u64,
    pub dtype: String,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub opt_gen_t: u64,
    pub opt_critic_t: u64,
    /// Latest evaluation at save time, if one was run.
    pub metrics: Option<EvalReport>,
}

/// Writes named arrays: magic, count, then per array a length-prefixed name,
/// the element dtype tag, the shape, and raw little-endian data.
pub fn write_arrays<E: Elem>(path: &Path, arrays: &[(String, ArrayD<E>)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, arr) in arrays {
        let name_b = name.as_bytes();
        buf.extend_from_slice(&(name_b.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_b);
        let dt = E::DTYPE.as_bytes();
        buf.push(dt.len() as u8);
        buf.extend_from_slice(dt);
        buf.push(arr.ndim() as u8);
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let arr = if arr.is_standard_layout() {
            arr.view()
        } else {
            return Err(Error::Checkpoint(format!("array {name} is not contiguous")));
        };
        for &x in arr.iter() {
            buf.extend_from_slice(&x.to_le_bytes_vec());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a file written by [`write_arrays`] with the same element type.
pub fn read_arrays<E: Elem>(path: &Path) -> Result<Vec<(String, ArrayD<E>)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated array file {}",
                path.display()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not an array container",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad array name: {e}")))?;
        let dt_len = take(&mut pos, 1)?[0] as usize;
        let dtype = String::from_utf8(take(&mut pos, dt_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad dtype tag: {e}")))?;
        if dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "array {name} holds {dtype} but {} was requested",
                E::DTYPE
            )));
        }
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize,
            );
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut pos, len * E::BYTE_LEN)?;
        let data: Vec<E> = raw
            .chunks_exact(E::BYTE_LEN)
            .map(E::from_le_slice)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
        out.push((name, arr));
    }
    Ok(out)
}

/// Saves a full training state under `dir` (created if absent).
pub fn save_checkpoint<E: Elem>(
    dir: &Path,
    state: &TrainState<E>,
    metrics: Option<&EvalReport>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        step: state.step,
        seed: state.cfg.seed,
        dtype: E::DTYPE.to_string(),
        net: state.net_cfg.clone(),
        train: state.cfg.clone(),
        opt_gen_t: state.opt_gen.t(),
        opt_critic_t: state.opt_critic.t(),
        metrics: metrics.cloned(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    let named = |store: &crate::model::ParamStore<E>| {
        store
            .iter()
            .map(|(n, a)| (n.to_string(), a.to_owned()))
            .collect::<Vec<_>>()
    };
    write_arrays(&dir.join("gen.params"), &named(&state.gen_store))?;
    write_arrays(&dir.join("critic.params"), &named(&state.critic_store))?;
    write_arrays(
        &dir.join("opt_gen.state"),
        &state.opt_gen.state_arrays(&state.gen_store),
    )?;
    write_arrays(
        &dir.join("opt_critic.state"),
        &state.opt_critic.state_arrays(&state.critic_store),
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
    })?;
    let m: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("bad manifest {}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            m.format_version
        )));
    }
    Ok(m)
}

/// Rebuilds a [`TrainState`] from a checkpoint directory. The architecture
/// and dtype recorded in the manifest must match what the caller expects;
/// pass `expect` to demand an exact config match (the resume path).
pub fn load_checkpoint<E: Elem>(
    dir: &Path,
    expect: Option<(&NetConfig, &TrainConfig)>,
) -> Result<TrainState<E>> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != E::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype,
            E::DTYPE
        )));
    }
    if let Some((net, train)) = expect {
        if *net != manifest.net {
            return Err(Error::Checkpoint(
                "checkpoint architecture differs from the requested one".into(),
            ));
        }
        if *train != manifest.train {
            return Err(Error::Checkpoint(
                "checkpoint training configuration differs from the requested one".into(),
            ));
        }
    }
    let mut state = TrainState::<E>::new(&manifest.net, &manifest.train)?;
    let as_map = |v: Vec<(String, ArrayD<E>)>| -> HashMap<String, ArrayD<E>> {
        v.into_iter().collect()
    };
    let gen = as_map(read_arrays(&dir.join("gen.params"))?);
    if state.gen_store.load_named(&gen)? != state.gen_store.len() {
        return Err(Error::Checkpoint(
            "checkpoint misses generator parameters".into(),
        ));
    }
    let critic = as_map(read_arrays(&dir.join("critic.params"))?);
    if state.critic_store.load_named(&critic)? != state.critic_store.len() {
        return Err(Error::Checkpoint(
            "checkpoint misses critic parameters".into(),
        ));
    }
    let og = read_arrays(&dir.join("opt_gen.state"))?;
    state
        .opt_gen
        .load_state(&state.gen_store, &og, manifest.opt_gen_t)?;
    let oc = read_arrays(&dir.join("opt_critic.state"))?;
    state
        .opt_critic
        .load_state(&state.critic_store, &oc, manifest.opt_critic_t)?;
    state.step = manifest.step;
    Ok(state)
}
