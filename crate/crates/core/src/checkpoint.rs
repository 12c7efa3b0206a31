//! Checkpoint directories: `manifest.json` plus one raw little-endian `f32`
//! file per named parameter, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterParams};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};
use crate::util::{read_json, replace_dir, write_json};
use crate::vocab::{OovList, Vocabulary};

pub const FORMAT: &str = "fedvocab-checkpoint-v1";
pub const MANIFEST: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const OOV_FILE: &str = "oov.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    /// Vocabulary file, relative to the checkpoint directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oov_list: Option<String>,
    pub parameters: Vec<ParamEntry>,
}

fn staging_dir(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.staging"))
}

fn write_tensors<T: Scalar, P: ParamSet<T>>(dir: &Path, params: &P) -> Result<Vec<ParamEntry>> {
    params
        .names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let file = format!("{name}.f32");
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for x in &t.data {
                let v = x.to_f32().unwrap_or(f32::NAN);
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(ParamEntry {
                name,
                shape: t.shape.clone(),
                file,
            })
        })
        .collect()
}

fn read_tensors<T: Scalar, P: ParamSet<T>>(dir: &Path, entries: &[ParamEntry], params: &mut P) -> Result<()> {
    let names = params.names();
    if names.len() != entries.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, expected {}",
            entries.len(),
            names.len()
        )));
    }
    for ((name, t), entry) in names.iter().zip(params.tensors_mut()).zip(entries) {
        if *name != entry.name || t.shape != entry.shape {
            return Err(Error::Config(format!(
                "checkpoint parameter {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, name, t.shape
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != t.len() * 4 {
            return Err(Error::Config(format!(
                "{} holds {} bytes, expected {}",
                path.display(),
                bytes.len(),
                t.len() * 4
            )));
        }
        for (x, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("chunk of four"));
            *x = T::from_f32(v).unwrap_or_else(T::nan);
        }
    }
    Ok(())
}

/// Writes the directory under a staging name and renames it into place.
fn write_dir(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let staging = staging_dir(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    fill(&staging)?;
    replace_dir(&staging, dir)
}

/// A model together with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub vocab: Vocabulary,
}

pub fn save_model<T: Scalar>(dir: &Path, config: &ModelConfig, params: &ModelParams<T>, vocab: &Vocabulary) -> Result<()> {
    config.check_vocab(vocab)?;
    params.check_shapes(config)?;
    write_dir(dir, |tmp| {
        vocab.save(&tmp.join(VOCAB_FILE))?;
        let parameters = write_tensors(tmp, params)?;
        write_json(
            &tmp.join(MANIFEST),
            &Manifest {
                format: FORMAT.into(),
                model: Some(config.clone()),
                adapter: None,
                vocabulary: Some(VOCAB_FILE.into()),
                oov_list: None,
                parameters,
            },
        )
    })
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join(MANIFEST))?;
    if m.format != FORMAT {
        return Err(Error::Config(format!("unsupported checkpoint format {:?}", m.format)));
    }
    Ok(m)
}

pub fn load_model<T: Scalar>(dir: &Path) -> Result<ModelCheckpoint<T>> {
    let m = read_manifest(dir)?;
    let config = m
        .model
        .ok_or_else(|| Error::Config(format!("{} is not a model checkpoint", dir.display())))?;
    config.validate()?;
    let vocab_file = m
        .vocabulary
        .ok_or_else(|| Error::Config("model checkpoint lacks a vocabulary".into()))?;
    let vocab = Vocabulary::load(&dir.join(vocab_file))?;
    config.check_vocab(&vocab)?;
    let mut params = ModelParams::zeros(&config);
    read_tensors(dir, &m.parameters, &mut params)?;
    Ok(ModelCheckpoint { config, params, vocab })
}

/// A client's adapter and the OOV list it scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCheckpoint<T> {
    pub config: AdapterConfig,
    pub params: AdapterParams<T>,
    pub oov: OovList,
}

pub fn save_adapter<T: Scalar>(dir: &Path, config: &AdapterConfig, params: &AdapterParams<T>, oov: &OovList) -> Result<()> {
    params.check_shapes(config)?;
    write_dir(dir, |tmp| {
        fs::write(tmp.join(OOV_FILE), oov.to_file_string()).map_err(|e| Error::io(tmp.join(OOV_FILE), e))?;
        let parameters = write_tensors(tmp, params)?;
        write_json(
            &tmp.join(MANIFEST),
            &Manifest {
                format: FORMAT.into(),
                model: None,
                adapter: Some(config.clone()),
                vocabulary: None,
                oov_list: Some(OOV_FILE.into()),
                parameters,
            },
        )
    })
}

pub fn load_adapter<T: Scalar>(dir: &Path) -> Result<AdapterCheckpoint<T>> {
    let m = read_manifest(dir)?;
    let config = m
        .adapter
        .ok_or_else(|| Error::Config(format!("{} is not an adapter checkpoint", dir.display())))?;
    config.validate()?;
    let oov_path = dir.join(m.oov_list.as_deref().unwrap_or(OOV_FILE));
    let text = fs::read_to_string(&oov_path).map_err(|e| Error::io(&oov_path, e))?;
    let oov = OovList::parse_file_string(&text, &oov_path)?;
    let mut params = AdapterParams::zeros(&config);
    read_tensors(dir, &m.parameters, &mut params)?;
    Ok(AdapterCheckpoint { config, params, oov })
}

/// Shape table of a parameter set, for reports.
pub fn shape_table<T: Scalar, P: ParamSet<T>>(params: &P) -> Vec<(String, Vec<usize>)> {
    params
        .names()
        .into_iter()
        .zip(params.tensors().iter().map(|t: &&Tensor<T>| t.shape.clone()))
        .collect()
}
