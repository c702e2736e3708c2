//! Checkpoint files.
//!
//! `<name>.ckpt` holds the magic `PRVDCKP1`, a `u32` entry count, then per
//! entry a length-prefixed name, `u32` rank, `u32` dims and little-endian
//! `f32` values. `<name>.ckpt.manifest` is a key=value text file with the
//! architecture hash, step count and the SHA-256 of the `.ckpt` bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::Model;
use crate::binio::{put_f32s, put_str, put_u32, read_file, read_text, write_file, Reader};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"PRVDCKP1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointManifest {
    pub kind: String,
    pub arch_hash: String,
    pub step: u64,
    pub params: usize,
    pub content_hash: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_params<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, params.len() as u32);
    for (name, t) in params.iter() {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.ndim() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        let values: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
        put_f32s(&mut buf, &values);
    }
    buf
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ParamStore<f32>> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let data = r.f32s(shape.iter().product())?;
        store.insert(name, Tensor::from_vec(&shape, data));
    }
    r.finish()?;
    Ok(store)
}

/// Writes `model` to `path` and its manifest; returns the content hash.
pub fn save<M: Model<f32>>(model: &M, path: &Path, step: u64) -> Result<String> {
    let bytes = encode_params(model.params());
    let hash = sha256_hex(&bytes);
    write_file(path, &bytes)?;
    let manifest = format!(
        "kind={}\narch_hash={}\nstep={}\nparams={}\ncontent_hash={}\n",
        M::KIND,
        model.arch_hash(),
        step,
        model.params().num_scalars(),
        hash
    );
    write_file(&manifest_path(path), manifest.as_bytes())?;
    Ok(hash)
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let mpath = manifest_path(path);
    let text = read_text(&mpath)?;
    let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| -> Result<String> {
        kv.get(k)
            .map(|v| v.to_string())
            .ok_or_else(|| Error::format(&mpath, format!("missing key `{k}`")))
    };
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::format(&mpath, format!("bad `{k}`"))) };
    Ok(CheckpointManifest {
        kind: get("kind")?,
        arch_hash: get("arch_hash")?,
        step: num("step")?,
        params: num("params")? as usize,
        content_hash: get("content_hash")?,
    })
}

/// Replaces the parameters of `model` with those stored at `path` after
/// checking kind, architecture hash, content hash and every tensor shape.
pub fn load_into<M: Model<f32>>(model: &mut M, path: &Path) -> Result<CheckpointManifest> {
    let manifest = read_manifest(path)?;
    if manifest.kind != M::KIND {
        return Err(Error::format(path, format!("checkpoint holds `{}`, expected `{}`", manifest.kind, M::KIND)));
    }
    if manifest.arch_hash != model.arch_hash() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different {} configuration",
            path.display(),
            M::KIND
        )));
    }
    let bytes = read_file(path)?;
    if sha256_hex(&bytes) != manifest.content_hash {
        return Err(Error::format(path, "content hash does not match manifest"));
    }
    let loaded = decode_params(&bytes, path)?;
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let loaded_names: Vec<&str> = loaded.names().collect();
    if names.iter().map(String::as_str).ne(loaded_names.iter().copied()) {
        return Err(Error::format(path, "parameter names do not match the architecture"));
    }
    for name in &names {
        let want = model.params().get(name).unwrap().shape().to_vec();
        let got = loaded.get(name).unwrap();
        if got.shape() != want.as_slice() {
            return Err(Error::format(path, format!("`{name}` has shape {:?}, expected {want:?}", got.shape())));
        }
    }
    *model.params_mut() = loaded;
    Ok(manifest)
}
