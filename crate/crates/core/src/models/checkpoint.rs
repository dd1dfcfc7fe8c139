use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Provenance;
use crate::error::{ensure, Error, Result};
use crate::optim::{Parameter, Role};
use crate::scenegen::{read_f32, write_f32};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub file: String,
    /// Momentum buffer blob, present in resumable checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub kind: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub params: Vec<BlobEntry>,
}

/// A loaded checkpoint: manifest plus float32 values (and momenta) by name.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    values: HashMap<String, Tensor<f32>>,
    momenta: HashMap<String, Tensor<f32>>,
}

fn blob_name(name: &str, suffix: &str) -> String {
    format!("{}{suffix}.f32", name.replace(['/', '\\'], "_"))
}

/// Writes `params` as little-endian float32 blobs plus `manifest.json`.
pub fn save_checkpoint<'a, T: Real + 'a>(
    dir: &Path,
    kind: &str,
    provenance: &Provenance,
    params: impl IntoIterator<Item = &'a Parameter<T>>,
    with_momentum: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for p in params {
        ensure!(seen.insert(p.name.clone()), Contract, "duplicate parameter name {}", p.name);
        let file = blob_name(&p.name, "");
        write_f32(&dir.join(&file), p.value().data().iter().map(|v| v.as_f64() as f32))?;
        let momentum_file = if with_momentum {
            let f = blob_name(&p.name, ".momentum");
            write_f32(&dir.join(&f), p.momentum.data().iter().map(|v| v.as_f64() as f32))?;
            Some(f)
        } else {
            None
        };
        entries.push(BlobEntry {
            name: p.name.clone(),
            shape: p.value().shape().to_vec(),
            role: p.role,
            file,
            momentum_file,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        kind: kind.to_string(),
        provenance: provenance.clone(),
        params: entries,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: "no checkpoint here; run the corresponding train mode first".into(),
        });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    ensure!(
        manifest.format == CHECKPOINT_FORMAT,
        Data,
        "checkpoint format {} unsupported",
        manifest.format
    );
    let read = |file: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let data = read_f32(&dir.join(file))?;
        Tensor::new(shape.to_vec(), data).map_err(|_| Error::Data(format!("{file} does not match shape {shape:?}")))
    };
    let mut values = HashMap::new();
    let mut momenta = HashMap::new();
    for e in &manifest.params {
        values.insert(e.name.clone(), read(&e.file, &e.shape)?);
        if let Some(f) = &e.momentum_file {
            momenta.insert(e.name.clone(), read(f, &e.shape)?);
        }
    }
    Ok(Checkpoint {
        manifest,
        values,
        momenta,
    })
}

impl Checkpoint {
    pub fn roles(&self) -> Vec<Role> {
        let mut r: Vec<Role> = Vec::new();
        for e in &self.manifest.params {
            if !r.contains(&e.role) {
                r.push(e.role);
            }
        }
        r
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.values.get(name)
    }

    /// Copies stored values (and momenta, when stored) into `params`. With
    /// `strict`, every parameter must be present in the checkpoint.
    /// Returns how many parameters were assigned.
    pub fn assign<'a, T: Real + 'a>(
        &self,
        params: impl IntoIterator<Item = &'a mut Parameter<T>>,
        strict: bool,
    ) -> Result<usize> {
        let mut n = 0;
        for p in params {
            let Some(v) = self.values.get(&p.name) else {
                if strict {
                    return Err(Error::Data(format!("checkpoint lacks parameter {}", p.name)));
                }
                continue;
            };
            p.set_value(v.cast())?;
            if let Some(m) = self.momenta.get(&p.name) {
                p.momentum = m.cast();
            }
            n += 1;
        }
        Ok(n)
    }
}
