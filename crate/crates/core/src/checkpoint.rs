//! Checkpoints: a network spec, a flat little-endian `f64` parameter blob and
//! a JSON manifest locating each parameter in it. Prune masks are stored in
//! the manifest next to their parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::NetworkSpec;
use crate::model::Network;
use crate::param::{ParamRole, ParamSet, Parameter};
use crate::tensor::Tensor;

pub const SPEC_FILE: &str = "spec.json";
pub const BLOB_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Offset in `f64` elements from the start of the blob.
    pub offset: usize,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: ParamRole,
    pub trainable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Parameter ids in blob order.
    pub order: Vec<String>,
    pub params: BTreeMap<String, ManifestEntry>,
}

/// Writes `net` into `dir`, creating it if needed.
pub fn save(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SPEC_FILE), net.spec.to_json()?)?;
    let mut blob = Vec::new();
    let mut manifest = Manifest {
        version: 1,
        order: Vec::new(),
        params: BTreeMap::new(),
    };
    let mut offset = 0;
    for p in net.params.iter() {
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        manifest.order.push(p.id.clone());
        manifest.params.insert(
            p.id.clone(),
            ManifestEntry {
                offset,
                shape: p.value.shape().to_vec(),
                dtype: "f64".into(),
                role: p.role,
                trainable: p.trainable,
                mask: p.mask.clone(),
            },
        );
        offset += p.value.len();
    }
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a checkpoint written by [`save`] and checks it against its spec.
pub fn load(dir: &Path) -> Result<Network> {
    let spec = NetworkSpec::from_json(&fs::read_to_string(dir.join(SPEC_FILE))?)?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() % 8 != 0 {
        return Err(Error::Format(format!("parameter blob has {} bytes, not a multiple of 8", blob.len())));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = ParamSet::new();
    for id in &manifest.order {
        let e = manifest
            .params
            .get(id)
            .ok_or_else(|| Error::Format(format!("manifest lists `{id}` without an entry")))?;
        if e.dtype != "f64" {
            return Err(Error::Format(format!("`{id}` has unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Format(format!("`{id}` runs past the end of the blob")))?;
        let mut p = Parameter::new(id.clone(), Tensor::new(e.shape.clone(), data.to_vec())?, e.role, e.trainable);
        if let Some(m) = &e.mask {
            p.set_mask(m.clone())?;
        }
        params.insert(p)?;
    }
    Network::new(spec, params)
}
