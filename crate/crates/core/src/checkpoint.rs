//! Checkpoint directories: `manifest.json` plus a little-endian `f64` blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::ParamStore;
use crate::error::{config, Result};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub model_config: Value,
    #[serde(default)]
    pub training: Option<Value>,
    pub params: Vec<ParamShape>,
    pub num_scalars: usize,
    pub weights_file: String,
    pub crate_version: String,
}

pub fn save(
    dir: &Path,
    kind: &str,
    model_config: &impl Serialize,
    training: Option<Value>,
    store: &ParamStore,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let params: Vec<ParamShape> = store
        .iter()
        .map(|(_, name, m)| ParamShape {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        model_config: serde_json::to_value(model_config)?,
        training,
        params,
        num_scalars: store.num_scalars(),
        weights_file: WEIGHTS_FILE.to_string(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    for (_, _, m) in store.iter() {
        for v in m.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(dir.join(WEIGHTS_FILE))?;
    f.write_all(&blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path, expected_kind: &str) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return config(format!("no checkpoint manifest at {}", path.display()));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return config(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        ));
    }
    if manifest.kind != expected_kind {
        return config(format!(
            "checkpoint at {} holds a {} model, expected {expected_kind}",
            dir.display(),
            manifest.kind
        ));
    }
    Ok(manifest)
}

/// Overwrite `store` with the blob, after checking every shape against both
/// the manifest and the freshly built model.
pub fn load_weights(dir: &Path, manifest: &Manifest, store: &mut ParamStore) -> Result<()> {
    if manifest.params.len() != store.len() {
        return config(format!(
            "manifest lists {} tensors but the model has {}",
            manifest.params.len(),
            store.len()
        ));
    }
    for ((_, name, m), shape) in store.iter().zip(&manifest.params) {
        if name != shape.name || m.rows() != shape.rows || m.cols() != shape.cols {
            return config(format!(
                "tensor mismatch: model {name} {}x{} vs manifest {} {}x{}",
                m.rows(),
                m.cols(),
                shape.name,
                shape.rows,
                shape.cols
            ));
        }
    }
    let blob = fs::read(dir.join(&manifest.weights_file))?;
    if blob.len() != manifest.num_scalars * 8 || manifest.num_scalars != store.num_scalars() {
        return config(format!(
            "weight blob has {} bytes, expected {}",
            blob.len(),
            store.num_scalars() * 8
        ));
    }
    let mut chunks = blob.chunks_exact(8);
    for m in store.values_mut() {
        let (r, c) = m.shape();
        let data: Vec<f64> = chunks
            .by_ref()
            .take(r * c)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        *m = Matrix::from_vec(r, c, data);
    }
    Ok(())
}
