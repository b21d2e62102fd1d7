//! JSONL dataset ingestion, persistence, and deterministic splits.
//!
//! One record per line, schema `crystensor/1`: a crystal as
//! `(lattice, frac_coords, atomic_numbers)` plus a Voigt-form tensor label.
//! Floats serialize at full precision (shortest-roundtrip), so
//! save→load is the identity on values. Dielectric/elastic labels may
//! carry small input asymmetry (≤ the input tolerance) and are
//! symmetrized on load; anything worse is a validation error.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::Crystal;
use crate::tensor::{TensorKind, TensorProperty};
use crate::tol;

pub const DATASET_SCHEMA: &str = "crystensor/1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("invalid record {id:?}: {reason}")]
    Validation { id: String, reason: String },
    #[error("split ratios {ratios:?} must be non-negative and sum to 1")]
    InvalidRatios { ratios: [f64; 3] },
}

fn default_schema() -> String {
    DATASET_SCHEMA.to_string()
}

/// The Voigt-form label carried by a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub kind: TensorKind,
    pub voigt: Vec<Vec<f64>>,
    pub units: String,
}

/// One JSONL line. Lattice rows are lattice vectors in Å; fractional
/// coordinates are rows against that basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub id: String,
    pub lattice: [[f64; 3]; 3],
    pub frac_coords: Vec<[f64; 3]>,
    pub atomic_numbers: Vec<u8>,
    pub target: TargetRecord,
}

/// A prediction line: the label block with its crystal id, no geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub id: String,
    pub target: TargetRecord,
}

/// A validated (crystal, label) pair — the in-memory dataset element.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCrystal {
    pub crystal: Crystal,
    pub property: TensorProperty,
}

#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub samples: Vec<LabeledCrystal>,
    pub warnings: Vec<String>,
}

impl DatasetRecord {
    pub fn from_labeled(sample: &LabeledCrystal) -> Self {
        Self {
            schema: DATASET_SCHEMA.to_string(),
            id: sample.crystal.id.clone(),
            lattice: sample.crystal.lattice,
            frac_coords: sample.crystal.frac_coords.clone(),
            atomic_numbers: sample.crystal.species.clone(),
            target: TargetRecord {
                kind: sample.property.kind,
                voigt: sample.property.voigt.clone(),
                units: sample.property.units.clone(),
            },
        }
    }

    /// Validates the record into a [`LabeledCrystal`], appending any
    /// non-fatal observations to `warnings`.
    pub fn into_labeled(self, warnings: &mut Vec<String>) -> Result<LabeledCrystal, DatasetError> {
        let invalid = |reason: String| DatasetError::Validation {
            id: self.id.clone(),
            reason,
        };
        if self.schema != DATASET_SCHEMA {
            return Err(invalid(format!(
                "schema {:?} is not {DATASET_SCHEMA:?}",
                self.schema
            )));
        }
        let crystal = Crystal::new(
            &self.id,
            self.atomic_numbers.clone(),
            self.frac_coords.clone(),
            self.lattice,
        )
        .map_err(|e| invalid(e.to_string()))?;

        let kind = self.target.kind;
        let (rows, cols) = kind.voigt_shape();
        if self.target.voigt.len() != rows || self.target.voigt.iter().any(|r| r.len() != cols) {
            return Err(invalid(format!(
                "target voigt shape does not match {rows}x{cols} for kind {kind}"
            )));
        }
        let mut voigt = self.target.voigt.clone();
        if kind != TensorKind::Piezoelectric {
            let mut defect: f64 = 0.0;
            for i in 0..rows {
                for j in 0..i {
                    defect = defect.max((voigt[i][j] - voigt[j][i]).abs());
                }
            }
            if defect > tol::INPUT_SYM {
                return Err(invalid(format!(
                    "target asymmetry {defect:.3e} exceeds input tolerance {:.0e}",
                    tol::INPUT_SYM
                )));
            }
            for i in 0..rows {
                for j in 0..i {
                    let mean = (voigt[i][j] + voigt[j][i]) / 2.0;
                    voigt[i][j] = mean;
                    voigt[j][i] = mean;
                }
            }
        }
        let mut property =
            TensorProperty::new(kind, voigt).map_err(|e| invalid(e.to_string()))?;
        if self.target.units != kind.default_units() {
            warnings.push(format!(
                "record {:?}: units {:?} differ from the conventional {:?} for {kind}; \
                 values are recorded, not converted",
                self.id,
                self.target.units,
                kind.default_units()
            ));
        }
        property.units = self.target.units;
        Ok(LabeledCrystal { crystal, property })
    }
}

/// Parses a JSONL dataset from a string (line numbers are 1-based).
pub fn parse_dataset(text: &str, origin: &str) -> Result<LoadedDataset, DatasetError> {
    let mut out = LoadedDataset::default();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(line).map_err(|source| DatasetError::Parse {
                line: idx + 1,
                source,
            })?;
        out.samples.push(record.into_labeled(&mut out.warnings)?);
    }
    if out.samples.is_empty() {
        out.warnings.push(format!("dataset {origin} is empty"));
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn dataset_to_jsonl(samples: &[LabeledCrystal]) -> String {
    let mut out = String::new();
    for s in samples {
        let record = DatasetRecord::from_labeled(s);
        out.push_str(&serde_json::to_string(&record).expect("record serialization cannot fail"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(samples: &[LabeledCrystal], path: &Path) -> Result<(), DatasetError> {
    fs::write(path, dataset_to_jsonl(samples)).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Seeded shuffle followed by contiguous slicing: `floor(n·r_train)` /
/// `floor(n·r_val)` / remainder. Disjoint and exhaustive by construction.
pub fn split<T: Clone>(
    samples: &[T],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), DatasetError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios { ratios });
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (n as f64 * ratios[0]).floor() as usize;
    let n_val = (n as f64 * ratios[1]).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}
