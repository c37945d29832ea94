//! On-disk dataset directory: params.jsonl, img_%06d.ppm, label_%06d.pgm,
//! split.json and a manifest with the seed and schema hash.

use crate::imgio::{self, Image, LabelMap};
use crate::renderer::{self, ParamVector, Sample, Split};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub seed: u64,
    pub schema_hash: u32,
}

#[derive(Debug)]
pub enum DatasetError {
    Io(io::Error),
    Img(imgio::ImgError),
    Invalid(String),
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Io(e) => write!(f, "io error: {e}"),
            DatasetError::Img(e) => write!(f, "{e}"),
            DatasetError::Invalid(s) => write!(f, "invalid dataset: {s}"),
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<io::Error> for DatasetError {
    fn from(e: io::Error) -> Self {
        DatasetError::Io(e)
    }
}

impl From<imgio::ImgError> for DatasetError {
    fn from(e: imgio::ImgError) -> Self {
        DatasetError::Img(e)
    }
}

fn img_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("img_{i:06}.ppm"))
}

fn label_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("label_{i:06}.pgm"))
}

pub fn write_dataset(
    dir: &Path,
    samples: &[Sample],
    split: &Split,
    seed: u64,
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let mut jsonl = fs::File::create(dir.join("params.jsonl"))?;
    for (i, s) in samples.iter().enumerate() {
        let line = serde_json::to_string(&s.params.flatten())
            .map_err(|e| DatasetError::Invalid(e.to_string()))?;
        writeln!(jsonl, "{line}")?;
        imgio::write_ppm(&img_path(dir, i), &s.image)?;
        imgio::write_pgm(&label_path(dir, i), &s.labels)?;
    }
    let split_json =
        serde_json::to_string_pretty(split).map_err(|e| DatasetError::Invalid(e.to_string()))?;
    fs::write(dir.join("split.json"), split_json)?;
    let manifest = Manifest { n: samples.len(), seed, schema_hash: renderer::schema_hash() };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Invalid(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest_json)?;
    Ok(())
}

pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub manifest: Manifest,
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
        .map_err(|e| DatasetError::Invalid(format!("manifest: {e}")))?;
    if manifest.schema_hash != renderer::schema_hash() {
        return Err(DatasetError::Invalid(format!(
            "schema hash mismatch: dataset {:#010x}, binary {:#010x}",
            manifest.schema_hash,
            renderer::schema_hash()
        )));
    }
    let split: Split = serde_json::from_str(&fs::read_to_string(dir.join("split.json"))?)
        .map_err(|e| DatasetError::Invalid(format!("split: {e}")))?;
    let file = fs::File::open(dir.join("params.jsonl"))?;
    let mut samples = Vec::with_capacity(manifest.n);
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let flat: Vec<f32> = serde_json::from_str(&line)
            .map_err(|e| DatasetError::Invalid(format!("params line {i}: {e}")))?;
        let params = ParamVector::from_flat(&flat)
            .ok_or_else(|| DatasetError::Invalid(format!("params line {i}: wrong dimension")))?;
        let image: Image = imgio::read_ppm(&img_path(dir, i))?;
        let labels: LabelMap = imgio::read_pgm(&label_path(dir, i))?;
        samples.push(Sample { params, image, labels });
    }
    if samples.len() != manifest.n {
        return Err(DatasetError::Invalid(format!(
            "manifest says {} samples, found {}",
            manifest.n,
            samples.len()
        )));
    }
    let max_index = split.train.iter().chain(&split.val).max().copied().unwrap_or(0);
    if !samples.is_empty() && max_index >= samples.len() {
        return Err(DatasetError::Invalid("split indexes out of range".into()));
    }
    Ok(Dataset { samples, split, manifest })
}

/// Generates and writes a dataset in one step (the gen-data command body).
pub fn generate(dir: &Path, n: usize, seed: u64) -> Result<(), DatasetError> {
    let (samples, split) = renderer::sample_dataset(n, seed);
    write_dataset(dir, &samples, &split, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempdir().unwrap();
        let (samples, split) = renderer::sample_dataset(10, 21);
        write_dataset(dir.path(), &samples, &split, 21).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 10);
        assert_eq!(back.split, split);
        assert_eq!(back.manifest.seed, 21);
        for (a, b) in samples.iter().zip(&back.samples) {
            // Params go through JSON (exact for f32) and images through
            // 8-bit quantization; labels are exact.
            assert_eq!(a.params, b.params);
            assert_eq!(a.labels, b.labels);
            assert!(a.image.mean_abs_diff(&b.image) <= 0.5 / 255.0);
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate(d1.path(), 5, 3).unwrap();
        generate(d2.path(), 5, 3).unwrap();
        for name in ["params.jsonl", "split.json", "manifest.json", "img_000003.ppm", "label_000003.pgm"] {
            assert_eq!(
                fs::read(d1.path().join(name)).unwrap(),
                fs::read(d2.path().join(name)).unwrap(),
                "{name} differs between identical runs"
            );
        }
    }

    #[test]
    fn schema_hash_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        generate(dir.path(), 2, 1).unwrap();
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        manifest.schema_hash ^= 1;
        fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Invalid(_))));
    }
}
