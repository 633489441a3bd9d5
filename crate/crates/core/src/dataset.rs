//! Phantom datasets on disk.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.jsonl
//! images/phantom_00000.tomo
//! sinograms/dose_50000/phantom_00000.tomo
//! ```
//!
//! `manifest.jsonl` holds one JSON object per line. The first line has
//! `"record": "header"` with the geometry, its fingerprint, the phantom spec,
//! the electronic noise variance, the noise seed and the test fraction. Each
//! following line has `"record": "sample"` with the phantom index, split,
//! dose, noise seed and the relative paths and SHA-256 digests of the image
//! and sinogram files.
//!
//! The split is a hash split: phantom indices are ranked by
//! `SHA-256(phantom seed, index)` and the first `round(0.2·n)` go to the test
//! split, so each index lands in exactly one split and the test share is
//! exact.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{read_image, read_sinogram, write_image, write_sinogram};
use crate::error::{Error, Result};
use crate::geometry::ScanGeometry;
use crate::noise::NoiseModel;
use crate::pfbs::TrainingPair;
use crate::phantom::EllipsePhantomSpec;
use crate::projector::Projector;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub geometry: ScanGeometry,
    pub geometry_fingerprint: String,
    pub phantom: EllipsePhantomSpec,
    pub count: usize,
    pub doses: Vec<f64>,
    pub electronic_variance: f64,
    pub noise_seed: u64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: u64,
    pub split: Split,
    pub dose: f64,
    pub seed: u64,
    pub image: String,
    pub image_sha256: String,
    pub sinogram: String,
    pub sinogram_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ManifestLine {
    Header(DatasetHeader),
    Sample(SampleRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: DatasetHeader,
    pub samples: Vec<SampleRecord>,
}

/// Everything that determines a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub phantom: EllipsePhantomSpec,
    pub doses: Vec<f64>,
    pub electronic_variance: f64,
    pub noise_seed: u64,
}

fn split_key(seed: u64, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// Split of every index in `0..n` under the hash rule.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut ranked: Vec<(usize, [u8; 32])> = (0..n).map(|i| (i, split_key(seed, i as u64))).collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1));
    let n_test = (TEST_FRACTION * n as f64).round() as usize;
    let mut splits = vec![Split::Train; n];
    for (i, _) in ranked.into_iter().take(n_test) {
        splits[i] = Split::Test;
    }
    splits
}

/// Noise seed of sample `index` at dose position `dose_slot`.
pub fn sample_seed(noise_seed: u64, index: u64, dose_slot: usize, n_doses: usize) -> u64 {
    noise_seed.wrapping_add(index * n_doses as u64 + dose_slot as u64)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn dose_dir(dose: f64) -> String {
    format!("dose_{dose}")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates `spec.count` phantoms, simulates one low-dose sinogram per dose
/// and writes files plus the manifest under `out_dir`, which must exist.
pub fn build_dataset(spec: &DatasetSpec, geometry: &ScanGeometry, out_dir: &Path) -> Result<DatasetManifest> {
    spec.phantom.validate()?;
    if spec.doses.is_empty() {
        return Err(Error::Config("at least one dose level is required".into()));
    }
    for &dose in &spec.doses {
        NoiseModel::new(dose, spec.electronic_variance, 0)?;
    }
    if !out_dir.is_dir() {
        return Err(Error::Data(format!(
            "output directory {} does not exist",
            out_dir.display()
        )));
    }
    let shape = spec.phantom.shape();
    let projector = Projector::new(*geometry, shape);
    create_dir(&out_dir.join("images"))?;
    for &dose in &spec.doses {
        create_dir(&out_dir.join("sinograms").join(dose_dir(dose)))?;
    }
    let splits = assign_splits(spec.count, spec.phantom.seed);
    let per_index: Vec<Vec<SampleRecord>> = (0..spec.count)
        .into_par_iter()
        .map(|i| -> Result<Vec<SampleRecord>> {
            let index = i as u64;
            let x = spec.phantom.generate(index);
            let image = format!("images/phantom_{i:05}.tomo");
            let image_path = out_dir.join(&image);
            write_image(&image_path, &x)?;
            let image_sha256 = sha256_file(&image_path)?;
            let clean = projector.forward(&x)?;
            let mut records = Vec::with_capacity(spec.doses.len());
            for (slot, &dose) in spec.doses.iter().enumerate() {
                let seed = sample_seed(spec.noise_seed, index, slot, spec.doses.len());
                let model = NoiseModel::new(dose, spec.electronic_variance, seed)?;
                let y = model.log_transform(&model.simulate_counts(&clean)?)?;
                let sinogram = format!("sinograms/{}/phantom_{i:05}.tomo", dose_dir(dose));
                let path = out_dir.join(&sinogram);
                write_sinogram(&path, &y)?;
                records.push(SampleRecord {
                    index,
                    split: splits[i],
                    dose,
                    seed,
                    image: image.clone(),
                    image_sha256: image_sha256.clone(),
                    sinogram_sha256: sha256_file(&path)?,
                    sinogram,
                });
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        header: DatasetHeader {
            geometry: *geometry,
            geometry_fingerprint: geometry.fingerprint(),
            phantom: spec.phantom.clone(),
            count: spec.count,
            doses: spec.doses.clone(),
            electronic_variance: spec.electronic_variance,
            noise_seed: spec.noise_seed,
            test_fraction: TEST_FRACTION,
        },
        samples: per_index.into_iter().flatten().collect(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let encode = |line: &ManifestLine| serde_json::to_string(line).map_err(|e| Error::Data(e.to_string()));
        let mut out = encode(&ManifestLine::Header(self.header.clone()))?;
        out.push('\n');
        for s in &self.samples {
            out.push_str(&encode(&ManifestLine::Sample(s.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: ManifestLine =
                serde_json::from_str(line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            match parsed {
                ManifestLine::Header(h) if header.is_none() && samples.is_empty() => header = Some(h),
                ManifestLine::Header(_) => {
                    return Err(Error::Data(format!("{}:{}: unexpected header", path.display(), n + 1)))
                }
                ManifestLine::Sample(s) => samples.push(s),
            }
        }
        let header = header.ok_or_else(|| Error::Data(format!("{} has no header", path.display())))?;
        Ok(Self { header, samples })
    }

    /// Checks file digests, split disjointness and the geometry fingerprint.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        if self.header.geometry_fingerprint != self.header.geometry.fingerprint() {
            return Err(Error::Data("manifest geometry fingerprint mismatch".into()));
        }
        let mut split_of = std::collections::HashMap::new();
        for s in &self.samples {
            if *split_of.entry(s.index).or_insert(s.split) != s.split {
                return Err(Error::Data(format!("phantom {} appears in both splits", s.index)));
            }
            for (file, digest) in [(&s.image, &s.image_sha256), (&s.sinogram, &s.sinogram_sha256)] {
                if &sha256_file(&dir.join(file))? != digest {
                    return Err(Error::Data(format!("{file} does not match its recorded digest")));
                }
            }
        }
        Ok(())
    }

    pub fn records(&self, dose: f64, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.dose == dose && s.split == split)
    }

    /// Loads the `(y, x)` pairs of one dose and split, in index order.
    pub fn load_pairs(&self, dir: &Path, dose: f64, split: Split) -> Result<Vec<TrainingPair>> {
        self.records(dose, split)
            .map(|s| {
                Ok(TrainingPair {
                    y: read_sinogram(&dir.join(&s.sinogram))?,
                    x: read_image(&dir.join(&s.image))?,
                })
            })
            .collect()
    }
}

/// Directory that holds `manifest`.
pub fn dataset_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_exact_and_deterministic() {
        for n in [1, 5, 10, 11, 250] {
            let s = assign_splits(n, 9);
            let test = s.iter().filter(|&&x| x == Split::Test).count();
            assert_eq!(test, (0.2 * n as f64).round() as usize);
            assert_eq!(s, assign_splits(n, 9));
        }
        assert_ne!(assign_splits(50, 1), assign_splits(50, 2));
    }

    #[test]
    fn sample_seeds_are_distinct() {
        let mut seeds: Vec<u64> = (0..20)
            .flat_map(|i| (0..3).map(move |d| sample_seed(5, i, d, 3)))
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 60);
    }
}
