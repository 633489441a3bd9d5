//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.json` and one TOMO1
//! `kind=tensor` file per named tensor: every CNN parameter, every batch-norm
//! running statistic and, for training checkpoints, both Adam moment buffers
//! of every parameter group. Step scalars are stored in the manifest itself.
//! The manifest records the model config, the geometry and its fingerprint,
//! the image grid and, for training checkpoints, the training config, the
//! Adam step count and the log so far.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, UnrolledModel};
use super::train::{EpochRecord, Trainer, TrainingConfig};
use crate::container::{Container, Dtype};
use crate::error::{Error, Result};
use crate::geometry::{ImageShape, ScanGeometry};
use crate::nn::Adam;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT: &str = "ldct-checkpoint-1";
pub const WEIGHT_INIT: &str = "kaiming-uniform";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    pub config: TrainingConfig,
    pub epochs_done: usize,
    pub adam_step: u64,
    pub adam_first: Vec<TensorEntry>,
    pub adam_second: Vec<TensorEntry>,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub weight_init: String,
    pub geometry: ScanGeometry,
    pub geometry_fingerprint: String,
    pub image_shape: ImageShape,
    pub step_scalars: Vec<f64>,
    pub parameters: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub training: Option<TrainingState>,
}

fn write_tensors(
    dir: &Path,
    prefix: &str,
    names: &[String],
    shapes: &[Vec<usize>],
    values: &[&[f64]],
) -> Result<Vec<TensorEntry>> {
    let mut entries = Vec::with_capacity(names.len());
    for ((name, shape), v) in names.iter().zip(shapes).zip(values) {
        let file = format!("{prefix}{name}.tomo");
        Container {
            kind: "tensor".into(),
            dims: shape.clone(),
            dtype: Dtype::F64,
            meta: vec![("name".into(), name.clone())],
            values: v.to_vec(),
        }
        .write(&dir.join(&file))?;
        entries.push(TensorEntry {
            name: name.clone(),
            file,
            shape: shape.clone(),
        });
    }
    Ok(entries)
}

/// Reads `entries` into `targets`, checking names and lengths.
fn read_tensors(dir: &Path, entries: &[TensorEntry], names: &[String], targets: Vec<&mut [f64]>) -> Result<()> {
    if entries.len() != targets.len() {
        return Err(Error::Data(format!(
            "checkpoint lists {} tensors, the model has {}",
            entries.len(),
            targets.len()
        )));
    }
    for ((entry, name), target) in entries.iter().zip(names).zip(targets) {
        if &entry.name != name {
            return Err(Error::Data(format!("expected tensor {name}, found {}", entry.name)));
        }
        let c = Container::read(&dir.join(&entry.file))?;
        if c.kind != "tensor" || c.dims != entry.shape || c.values.len() != target.len() {
            return Err(Error::Data(format!(
                "tensor {name}: expected {} values, file has dims {:?}",
                target.len(),
                c.dims
            )));
        }
        target.copy_from_slice(&c.values);
    }
    Ok(())
}

fn manifest_for(model: &UnrolledModel, dir: &Path) -> Result<CheckpointManifest> {
    let names = model.parameter_names();
    let shapes = model.parameter_shapes();
    let params = model.parameters();
    let parameters = write_tensors(dir, "", &names[1..], &shapes[1..], &params[1..])?;
    let buffer_names = model.buffer_names();
    let buffer_shapes: Vec<Vec<usize>> = model.buffers().iter().map(|b| vec![b.len()]).collect();
    let buffers = write_tensors(dir, "", &buffer_names, &buffer_shapes, &model.buffers())?;
    Ok(CheckpointManifest {
        format: FORMAT.into(),
        model: *model.config(),
        weight_init: WEIGHT_INIT.into(),
        geometry: *model.geometry(),
        geometry_fingerprint: model.geometry().fingerprint(),
        image_shape: model.image_shape(),
        step_scalars: model.step_scalars.clone(),
        parameters,
        buffers,
        training: None,
    })
}

fn write_manifest(dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Data(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    if manifest.geometry_fingerprint != manifest.geometry.fingerprint() {
        return Err(Error::Data(
            "checkpoint geometry fingerprint does not match its geometry".into(),
        ));
    }
    Ok(manifest)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the model weights and buffers.
pub fn save_model(dir: &Path, model: &UnrolledModel) -> Result<()> {
    create_dir(dir)?;
    let manifest = manifest_for(model, dir)?;
    write_manifest(dir, &manifest)
}

/// Writes the model together with optimizer state and log.
pub fn save_trainer(dir: &Path, trainer: &Trainer) -> Result<()> {
    create_dir(dir)?;
    let model = &trainer.model;
    let mut manifest = manifest_for(model, dir)?;
    let names = model.parameter_names();
    let shapes = model.parameter_shapes();
    let first: Vec<&[f64]> = trainer.adam.first.iter().map(|v| v.as_slice()).collect();
    let second: Vec<&[f64]> = trainer.adam.second.iter().map(|v| v.as_slice()).collect();
    manifest.training = Some(TrainingState {
        config: trainer.config,
        epochs_done: trainer.epochs_done(),
        adam_step: trainer.adam.step,
        adam_first: write_tensors(dir, "adam.m.", &names, &shapes, &first)?,
        adam_second: write_tensors(dir, "adam.v.", &names, &shapes, &second)?,
        log: trainer.log.clone(),
    });
    write_manifest(dir, &manifest)
}

fn model_from_manifest(dir: &Path, manifest: &CheckpointManifest) -> Result<UnrolledModel> {
    let mut model = UnrolledModel::new(manifest.model, manifest.geometry, manifest.image_shape)?;
    if manifest.step_scalars.len() != model.stages() {
        return Err(Error::Data(format!(
            "{} step scalars for {} stages",
            manifest.step_scalars.len(),
            model.stages()
        )));
    }
    model.step_scalars.clone_from(&manifest.step_scalars);
    let names = model.parameter_names();
    let targets = model.parameters_mut().into_iter().skip(1).collect();
    read_tensors(dir, &manifest.parameters, &names[1..], targets)?;
    let buffer_names = model.buffer_names();
    read_tensors(dir, &manifest.buffers, &buffer_names, model.buffers_mut())?;
    Ok(model)
}

pub fn load_model(dir: &Path) -> Result<UnrolledModel> {
    let manifest = read_manifest(dir)?;
    model_from_manifest(dir, &manifest)
}

/// Loads a model and checks that it was trained for `geometry` and `shape`.
pub fn load_model_for(dir: &Path, geometry: &ScanGeometry, shape: ImageShape) -> Result<UnrolledModel> {
    let manifest = read_manifest(dir)?;
    if manifest.geometry_fingerprint != geometry.fingerprint() {
        return Err(Error::Data(format!(
            "checkpoint geometry {} does not match {}",
            manifest.geometry_fingerprint,
            geometry.fingerprint()
        )));
    }
    if manifest.image_shape != shape {
        return Err(Error::Data(format!(
            "checkpoint image grid {:?} does not match {shape:?}",
            manifest.image_shape
        )));
    }
    model_from_manifest(dir, &manifest)
}

/// Restores a trainer from a training checkpoint.
pub fn load_trainer(dir: &Path) -> Result<Trainer> {
    let manifest = read_manifest(dir)?;
    let state = manifest
        .training
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{} holds no training state", dir.display())))?;
    let model = model_from_manifest(dir, &manifest)?;
    let names = model.parameter_names();
    let mut trainer = Trainer::new(model, state.config)?;
    let mut first = std::mem::take(&mut trainer.adam.first);
    let mut second = std::mem::take(&mut trainer.adam.second);
    read_tensors(
        dir,
        &state.adam_first,
        &names,
        first.iter_mut().map(|v| v.as_mut_slice()).collect(),
    )?;
    read_tensors(
        dir,
        &state.adam_second,
        &names,
        second.iter_mut().map(|v| v.as_mut_slice()).collect(),
    )?;
    trainer.adam = Adam {
        config: state.config.adam(),
        step: state.adam_step,
        first,
        second,
    };
    if state.log.len() != state.epochs_done {
        return Err(Error::Data("training log length disagrees with epochs_done".into()));
    }
    trainer.log.clone_from(&state.log);
    Ok(trainer)
}
