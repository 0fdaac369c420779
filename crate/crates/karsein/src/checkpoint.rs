//! Checkpoints: a JSON manifest (schema version, model hyperparameters,
//! vocabulary sizes, seed, parameter shapes in declared order) plus one
//! binary blob of all parameters as little-endian 32-bit floats.
//! Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kan::{KanCtrModel, MlpCtrModel};
use crate::model::{KarseinHyper, KarseinModel};
use crate::optim::ParamGrads;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model_type", rename_all = "snake_case")]
pub enum ModelSpec {
    Karsein {
        hyper: KarseinHyper,
    },
    KanCtr {
        embed_dim: usize,
        hidden: Vec<usize>,
        grid: usize,
        kappa: usize,
    },
    MlpCtr {
        embed_dim: usize,
        hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskInfo {
    pub tower: String,
    pub layer: usize,
    pub frozen_rows: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(flatten)]
    pub model: ModelSpec,
    pub vocab_sizes: Vec<usize>,
    pub seed: u64,
    pub params: Vec<ParamInfo>,
    #[serde(default)]
    pub masks: Vec<MaskInfo>,
    pub blob_file: String,
}

/// A model the checkpoint store knows how to rebuild.
#[derive(Debug)]
pub enum AnyModel {
    Karsein(KarseinModel<f32>),
    KanCtr(KanCtrModel<f32>),
    MlpCtr(MlpCtrModel<f32>),
}

fn param_infos<M: ParamGrads<f32>>(model: &M) -> Vec<ParamInfo> {
    (0..model.param_count())
        .map(|i| {
            let p = &model.param(i).value;
            ParamInfo {
                name: model.param_name(i),
                rows: p.rows(),
                cols: p.cols(),
            }
        })
        .collect()
}

fn write_blob<M: ParamGrads<f32>>(path: &Path, model: &M) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..model.param_count() {
        for &v in model.param(i).value.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_blob<M: ParamGrads<f32>>(path: &Path, model: &mut M, manifest: &Manifest) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let expected: usize = manifest.params.iter().map(|p| p.rows * p.cols * 4).sum();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "blob is {} bytes, manifest declares {}",
            bytes.len(),
            expected
        )));
    }
    if model.param_count() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} parameters, manifest {}",
            model.param_count(),
            manifest.params.len()
        )));
    }
    let mut offset = 0usize;
    for (i, info) in manifest.params.iter().enumerate() {
        let slot = model.param_mut(i);
        if slot.value.rows() != info.rows || slot.value.cols() != info.cols {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' is {}x{} but manifest declares {}x{}",
                info.name,
                slot.value.rows(),
                slot.value.cols(),
                info.rows,
                info.cols
            )));
        }
        for v in slot.value.data_mut() {
            *v = f32::from_le_bytes([
                bytes[offset],
                bytes[offset + 1],
                bytes[offset + 2],
                bytes[offset + 3],
            ]);
            offset += 4;
        }
    }
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut f = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn save_karsein(dir: &Path, model: &KarseinModel<f32>, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut masks = Vec::new();
    for (tower, layers) in [
        ("explicit", &model.explicit_tower),
        ("implicit", &model.implicit_tower),
    ] {
        for (l, layer) in layers.iter().enumerate() {
            if layer.mask.iter().any(|&m| m) {
                masks.push(MaskInfo {
                    tower: tower.to_string(),
                    layer: l,
                    frozen_rows: layer
                        .mask
                        .iter()
                        .enumerate()
                        .filter_map(|(i, &m)| m.then_some(i))
                        .collect(),
                });
            }
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        model: ModelSpec::Karsein {
            hyper: model.hyper.clone(),
        },
        vocab_sizes: model.embedding.vocab_sizes().to_vec(),
        seed,
        params: param_infos(model),
        masks,
        blob_file: BLOB_FILE.to_string(),
    };
    write_manifest(dir, &manifest)?;
    write_blob(&dir.join(BLOB_FILE), model)
}

pub fn save_kan_ctr(
    dir: &Path,
    model: &KanCtrModel<f32>,
    hidden: &[usize],
    grid: usize,
    kappa: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        model: ModelSpec::KanCtr {
            embed_dim: model.embedding.dim(),
            hidden: hidden.to_vec(),
            grid,
            kappa,
        },
        vocab_sizes: model.embedding.vocab_sizes().to_vec(),
        seed,
        params: param_infos(model),
        masks: Vec::new(),
        blob_file: BLOB_FILE.to_string(),
    };
    write_manifest(dir, &manifest)?;
    write_blob(&dir.join(BLOB_FILE), model)
}

pub fn save_mlp_ctr(dir: &Path, model: &MlpCtrModel<f32>, hidden: &[usize], seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        model: ModelSpec::MlpCtr {
            embed_dim: model.embedding.dim(),
            hidden: hidden.to_vec(),
        },
        vocab_sizes: model.embedding.vocab_sizes().to_vec(),
        seed,
        params: param_infos(model),
        masks: Vec::new(),
        blob_file: BLOB_FILE.to_string(),
    };
    write_manifest(dir, &manifest)?;
    write_blob(&dir.join(BLOB_FILE), model)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema version {}",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

/// Rebuilds the model named by the manifest and fills its parameters
/// bit-exactly from the blob.
pub fn load(dir: &Path) -> Result<(AnyModel, Manifest)> {
    let manifest = load_manifest(dir)?;
    let blob = dir.join(&manifest.blob_file);
    let model = match &manifest.model {
        ModelSpec::Karsein { hyper } => {
            let mut model =
                KarseinModel::<f32>::new(hyper.clone(), &manifest.vocab_sizes, manifest.seed)?;
            read_blob(&blob, &mut model, &manifest)?;
            for info in &manifest.masks {
                let layers = match info.tower.as_str() {
                    "explicit" => &mut model.explicit_tower,
                    "implicit" => &mut model.implicit_tower,
                    other => return Err(Error::Checkpoint(format!("unknown tower '{other}'"))),
                };
                let layer = layers.get_mut(info.layer).ok_or_else(|| {
                    Error::Checkpoint(format!("mask layer {} out of range", info.layer))
                })?;
                layer.mask = vec![false; layer.eff_in];
                for &r in &info.frozen_rows {
                    if r >= layer.eff_in {
                        return Err(Error::Checkpoint(format!("mask row {r} out of range")));
                    }
                    layer.mask[r] = true;
                }
            }
            AnyModel::Karsein(model)
        }
        ModelSpec::KanCtr {
            embed_dim,
            hidden,
            grid,
            kappa,
        } => {
            let mut model = KanCtrModel::<f32>::new(
                &manifest.vocab_sizes,
                *embed_dim,
                hidden,
                *grid,
                *kappa,
                manifest.seed,
            )?;
            read_blob(&blob, &mut model, &manifest)?;
            AnyModel::KanCtr(model)
        }
        ModelSpec::MlpCtr { embed_dim, hidden } => {
            let mut model = MlpCtrModel::<f32>::new(
                &manifest.vocab_sizes,
                *embed_dim,
                hidden,
                manifest.seed,
            )?;
            read_blob(&blob, &mut model, &manifest)?;
            AnyModel::MlpCtr(model)
        }
    };
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::KarseinHyper;

    fn model_f32(seed: u64) -> KarseinModel<f32> {
        let hyper = KarseinHyper {
            embed_dim: 4,
            kappa: 2,
            grid: 5,
            explicit_hidden: vec![4],
            implicit_hidden: vec![4],
            ..KarseinHyper::default()
        };
        KarseinModel::new(hyper, &[3, 4, 2], seed).unwrap()
    }

    #[test]
    fn karsein_roundtrip_is_bit_exact() {
        let model = model_f32(3);
        let dir = tempfile::tempdir().unwrap();
        save_karsein(dir.path(), &model, 3).unwrap();
        let (loaded, manifest) = load(dir.path()).unwrap();
        let AnyModel::Karsein(loaded) = loaded else {
            panic!("expected a karsein checkpoint")
        };
        assert_eq!(manifest.seed, 3);
        for i in 0..model.param_count() {
            let a = model.param(i).value.data();
            let b = loaded.param(i).value.data();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {} differs", model.param_name(i));
            }
        }
    }

    #[test]
    fn masks_survive_roundtrip() {
        let mut model = model_f32(5);
        let eff = model.explicit_tower[0].eff_in;
        model.explicit_tower[0].mask = vec![false; eff];
        model.explicit_tower[0].mask[2] = true;
        let dir = tempfile::tempdir().unwrap();
        save_karsein(dir.path(), &model, 5).unwrap();
        let (AnyModel::Karsein(loaded), _) = load(dir.path()).unwrap() else {
            panic!()
        };
        assert!(loaded.explicit_tower[0].is_masked(2));
        assert!(!loaded.explicit_tower[0].is_masked(0));
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let model = model_f32(7);
        let dir = tempfile::tempdir().unwrap();
        save_karsein(dir.path(), &model, 7).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn baseline_roundtrips() {
        let kan = crate::kan::KanCtrModel::<f32>::new(&[3, 4], 3, &[4], 3, 1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_kan_ctr(dir.path(), &kan, &[4], 3, 1, 2).unwrap();
        let (AnyModel::KanCtr(loaded), _) = load(dir.path()).unwrap() else {
            panic!()
        };
        for i in 0..kan.param_count() {
            assert_eq!(kan.param(i).value, loaded.param(i).value);
        }

        let mlp = crate::kan::MlpCtrModel::<f32>::new(&[3, 4], 3, &[4], 2).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_mlp_ctr(dir2.path(), &mlp, &[4], 2).unwrap();
        let (AnyModel::MlpCtr(loaded), _) = load(dir2.path()).unwrap() else {
            panic!()
        };
        for i in 0..mlp.param_count() {
            assert_eq!(mlp.param(i).value, loaded.param(i).value);
        }
    }
}
