//! Run configuration: one flat-key JSON object covering the task, data
//! split, graph construction, model dimensions, optimizer schedule, and
//! canonicalization method. Command-line flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::CanonMethod;
use crate::graph::{AtomEmbeddingTable, GraphError, GraphParams, DEFAULT_RBF_C};
use crate::predictor::{MaskMode, ModelConfig, OutputClamp, TrainConfig};
use crate::tensor::{CrystalSystem, SymmetryMask, TensorError, TensorKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse config: {source}")]
    Parse { source: serde_json::Error },
    #[error("invalid config: {reason}")]
    Invalid { reason: String },
    #[error(transparent)]
    Mask(#[from] TensorError),
    #[error(transparent)]
    Table(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: TensorKind,
    pub seed: u64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub k_neighbors: usize,
    pub max_offset_shells: i32,
    pub rbf_c: f64,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub layers: usize,
    pub output_clamp: OutputClamp,
    pub mask_mode: MaskMode,
    /// Selects the built-in mask for `kind` when set.
    pub crystal_system: Option<CrystalSystem>,
    /// JSON mask file for systems without a built-in table.
    pub mask_path: Option<PathBuf>,
    /// Atom embedding table; one-hot over Z = 1..=92 when unset.
    pub atom_table_path: Option<PathBuf>,
    pub canon_method: CanonMethod,
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub huber_delta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk(TensorKind::Dielectric);
        let train = TrainConfig::default();
        let graph = GraphParams::default();
        Self {
            kind: TensorKind::Dielectric,
            seed: 0,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            k_neighbors: graph.k_neighbors,
            max_offset_shells: graph.max_offset_shells,
            rbf_c: DEFAULT_RBF_C,
            node_dim: model.node_dim,
            edge_dim: model.edge_dim,
            layers: model.layers,
            output_clamp: model.output_clamp,
            mask_mode: model.mask_mode,
            crystal_system: None,
            mask_path: None,
            atom_table_path: None,
            canon_method: CanonMethod::Polar,
            lr0: train.lr0,
            epochs: train.epochs,
            batch_size: train.batch_size,
            weight_decay: train.weight_decay,
            poly_power: train.poly_power,
            huber_delta: train.huber_delta,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Self =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse { source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let ratios = [self.split_train, self.split_val, self.split_test];
        let sum: f64 = ratios.iter().sum();
        if ratios.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid {
                reason: format!("split ratios {ratios:?} must be non-negative and sum to 1"),
            });
        }
        if self.mask_mode != MaskMode::Off {
            match (&self.crystal_system, &self.mask_path) {
                (None, None) => {
                    return Err(ConfigError::Invalid {
                        reason: format!(
                            "mask_mode {:?} requires crystal_system or mask_path",
                            self.mask_mode
                        ),
                    })
                }
                (Some(_), Some(_)) => {
                    return Err(ConfigError::Invalid {
                        reason: "set crystal_system or mask_path, not both".to_string(),
                    })
                }
                _ => {}
            }
        }
        for path in [&self.mask_path, &self.atom_table_path].into_iter().flatten() {
            if !path.exists() {
                return Err(ConfigError::Invalid {
                    reason: format!("referenced file {} does not exist", path.display()),
                });
            }
        }
        Ok(())
    }

    /// Switches model dimensions and schedule to the published scale for
    /// the configured task kind.
    pub fn apply_paper_scale(&mut self) {
        let model = ModelConfig::paper(self.kind);
        self.node_dim = model.node_dim;
        self.edge_dim = model.edge_dim;
        self.layers = model.layers;
        self.epochs = TrainConfig::paper().epochs;
    }

    pub fn split_ratios(&self) -> [f64; 3] {
        [self.split_train, self.split_val, self.split_test]
    }

    pub fn graph_params(&self) -> GraphParams {
        GraphParams {
            k_neighbors: self.k_neighbors,
            max_offset_shells: self.max_offset_shells,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            poly_power: self.poly_power,
            huber_delta: self.huber_delta,
            seed: self.seed,
        }
    }

    /// Resolves the configured symmetry mask (built-in or from file).
    pub fn resolve_mask(&self) -> Result<Option<SymmetryMask>, ConfigError> {
        if self.mask_mode == MaskMode::Off {
            return Ok(None);
        }
        let mask = match (&self.crystal_system, &self.mask_path) {
            (Some(system), None) => {
                SymmetryMask::builtin(self.kind, *system).ok_or_else(|| ConfigError::Invalid {
                    reason: format!(
                        "no built-in {} mask for the {system} system; supply mask_path",
                        self.kind
                    ),
                })?
            }
            (None, Some(path)) => SymmetryMask::from_path(path)?,
            _ => unreachable!("enforced by validate"),
        };
        if mask.kind() != self.kind {
            return Err(ConfigError::Invalid {
                reason: format!(
                    "mask kind {} does not match task kind {}",
                    mask.kind(),
                    self.kind
                ),
            });
        }
        Ok(Some(mask))
    }

    pub fn atom_table(&self) -> Result<AtomEmbeddingTable, ConfigError> {
        Ok(match &self.atom_table_path {
            Some(path) => AtomEmbeddingTable::from_path(path)?,
            None => AtomEmbeddingTable::one_hot(),
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let mask = self.resolve_mask()?;
        Ok(ModelConfig {
            kind: self.kind,
            node_feat_dim: self.atom_table()?.dim(),
            node_dim: self.node_dim,
            edge_dim: self.edge_dim,
            layers: self.layers,
            output_clamp: self.output_clamp,
            mask_mode: self.mask_mode,
            mask,
            seed: self.seed,
        })
    }
}
