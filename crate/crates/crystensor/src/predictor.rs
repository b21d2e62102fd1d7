//! Reference property predictor: a simplified node-wise transformer over
//! the crystal graph, with global mean pooling, an MLP head, optional
//! non-negativity clamping, symmetry-mask weighting, and a deterministic
//! AdamW training loop.
//!
//! Per layer, for each edge `(i, j)`:
//! `q = W_Q f_i`, `k = [W_K f_i, W_K f_j]`, `v = [W_V f_i, W_V f_j, W_E ê_ij]`,
//! `α = q ∘ ξ_K(k)/√d`, `msg_ij = sigmoid(LN(α)) ∘ ξ_V(v)`, aggregated by
//! sum over neighbors, then `f_i ← softplus(f_i + LN(Σ msg))`. `ξ_K`/`ξ_V`
//! are linear–softplus–linear. Normalization is per-feature layer norm
//! with learned gain/bias and no running statistics, so inference is a
//! pure per-sample function — batch composition can never leak into a
//! prediction.
//!
//! The backbone is intentionally not equivariant: rotating the input
//! frame changes raw edge geometry and therefore the output. Exact
//! equivariance is restored outside, by predicting in the canonical
//! frame and rotating the tensor back.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::graph::{CrystalGraph, RBF_DIM};
use crate::tensor::{
    apply_mask, reconstruct_from_independent, SymmetryMask, TensorError, TensorKind,
    TensorProperty,
};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid model configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("training requires a nonempty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("failed to access checkpoint {path}: {source}")]
    CheckpointIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse checkpoint: {source}")]
    CheckpointParse { source: serde_json::Error },
    #[error("checkpoint schema {found:?} is not {expected:?}")]
    CheckpointSchema { found: String, expected: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Optional non-negativity clamp on the raw output vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputClamp {
    None,
    NonNegative,
}

impl std::str::FromStr for OutputClamp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(OutputClamp::None),
            "non_negative" => Ok(OutputClamp::NonNegative),
            other => Err(format!(
                "unknown output clamp {other:?} (expected none or non_negative)"
            )),
        }
    }
}

/// How crystal-symmetry masks participate in prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Predict the full flat output.
    Off,
    /// Predict the full flat output, then project onto the mask's
    /// constraint subspace inside the model.
    Weighted,
    /// Predict only the mask's independent components.
    IndependentOnly,
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(MaskMode::Off),
            "weighted" => Ok(MaskMode::Weighted),
            "independent_only" => Ok(MaskMode::IndependentOnly),
            other => Err(format!(
                "unknown mask mode {other:?} (expected off, weighted, or independent_only)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: TensorKind,
    /// Input node-feature width (92 for the one-hot/CGCNN table).
    pub node_feat_dim: usize,
    /// Hidden node dimension `d`.
    pub node_dim: usize,
    /// Projected edge dimension `d_e`.
    pub edge_dim: usize,
    /// Number of message-passing layers.
    pub layers: usize,
    pub output_clamp: OutputClamp,
    pub mask_mode: MaskMode,
    /// Required when `mask_mode != Off`.
    pub mask: Option<SymmetryMask>,
    /// Parameter-initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough to train in minutes on a CPU.
    pub fn desk(kind: TensorKind) -> Self {
        Self {
            kind,
            node_feat_dim: 92,
            node_dim: 64,
            edge_dim: 64,
            layers: 2,
            output_clamp: OutputClamp::None,
            mask_mode: MaskMode::Off,
            mask: None,
            seed: 0,
        }
    }

    /// Published-scale dims: 128-d edge projection (256 for elastic) and
    /// 4 layers for rank-2/3 tasks, 2 for rank-4.
    pub fn paper(kind: TensorKind) -> Self {
        let (edge_dim, layers) = match kind {
            TensorKind::Dielectric | TensorKind::Piezoelectric => (128, 4),
            TensorKind::Elastic => (256, 2),
        };
        Self {
            edge_dim,
            layers,
            ..Self::desk(kind)
        }
    }

    /// Width of the model output vector.
    pub fn output_len(&self) -> usize {
        match self.mask_mode {
            MaskMode::IndependentOnly => self
                .mask
                .as_ref()
                .map_or(0, SymmetryMask::independent_count),
            _ => self.kind.flat_len(),
        }
    }

    fn validate(&self) -> Result<(), PredictorError> {
        for (what, v) in [
            ("node_feat_dim", self.node_feat_dim),
            ("node_dim", self.node_dim),
            ("edge_dim", self.edge_dim),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return Err(PredictorError::InvalidConfig {
                    reason: format!("{what} must be positive"),
                });
            }
        }
        match (&self.mask_mode, &self.mask) {
            (MaskMode::Off, _) => Ok(()),
            (_, None) => Err(PredictorError::InvalidConfig {
                reason: format!("mask_mode {:?} requires a mask", self.mask_mode),
            }),
            (_, Some(mask)) if mask.kind() != self.kind => Err(PredictorError::InvalidConfig {
                reason: format!(
                    "mask kind {} does not match task kind {}",
                    mask.kind(),
                    self.kind
                ),
            }),
            _ => Ok(()),
        }
    }
}

/// Optimizer and schedule settings for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Exponent `p` of the polynomial decay `lr(t) = lr0·(1 − t/T)^p`.
    pub poly_power: f64,
    pub huber_delta: f64,
    /// Shuffle-stream seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults (50 epochs); [`TrainConfig::paper`] restores
    /// the published 200-epoch schedule.
    fn default() -> Self {
        Self {
            lr0: 0.001,
            epochs: 50,
            batch_size: 64,
            weight_decay: 1e-5,
            poly_power: 1.0,
            huber_delta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 200,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), PredictorError> {
        let all_positive = self.lr0 > 0.0
            && self.epochs > 0
            && self.batch_size > 0
            && self.weight_decay >= 0.0
            && self.poly_power >= 0.0
            && self.huber_delta > 0.0;
        if all_positive {
            Ok(())
        } else {
            Err(PredictorError::InvalidConfig {
                reason: "train config values must be positive".to_string(),
            })
        }
    }
}

/// One supervised example: a featurized canonical-frame graph and the flat
/// target vector in the model's output layout.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub graph: CrystalGraph,
    pub target: Vec<f64>,
}

/// Per-epoch loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// Empty when training ran without a validation split.
    pub val_loss: Vec<f64>,
}

/// A named parameter block; `data` is row-major `rows × cols` (vectors use
/// `cols = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

const CHECKPOINT_SCHEMA: &str = "crystensor-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    config: ModelConfig,
    params: Vec<ParamBlock>,
}

/// The trainable predictor. Parameters live in named blocks whose declared
/// order is fixed by the configuration, making checkpoints diffable.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub config: ModelConfig,
    params: Vec<ParamBlock>,
}

/// The fixed parameter layout for a configuration: `(name, rows, cols)`.
fn layout(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = config.node_dim;
    let de = config.edge_dim;
    let out = config.output_len();
    let mut blocks = vec![
        ("embed.w".to_string(), d, config.node_feat_dim),
        ("embed.b".to_string(), d, 1),
        ("edge.w".to_string(), de, RBF_DIM),
        ("edge.b".to_string(), de, 1),
    ];
    for l in 0..config.layers {
        let p = |suffix: &str| format!("layer{l}.{suffix}");
        blocks.extend([
            (p("q.w"), d, d),
            (p("q.b"), d, 1),
            (p("k.w"), d, d),
            (p("k.b"), d, 1),
            (p("v.w"), d, d),
            (p("v.b"), d, 1),
            (p("e.w"), de, de),
            (p("e.b"), de, 1),
            (p("xi_k.w1"), d, 2 * d),
            (p("xi_k.b1"), d, 1),
            (p("xi_k.w2"), d, d),
            (p("xi_k.b2"), d, 1),
            (p("xi_v.w1"), d, 2 * d + de),
            (p("xi_v.b1"), d, 1),
            (p("xi_v.w2"), d, d),
            (p("xi_v.b2"), d, 1),
            (p("ln_alpha.g"), d, 1),
            (p("ln_alpha.b"), d, 1),
            (p("ln_msg.g"), d, 1),
            (p("ln_msg.b"), d, 1),
        ]);
    }
    blocks.extend([
        ("head.w1".to_string(), d, d),
        ("head.b1".to_string(), d, 1),
        ("head.w2".to_string(), out, d),
        ("head.b2".to_string(), out, 1),
    ]);
    blocks
}

impl PredictorModel {
    /// Deterministically initializes parameters from `config.seed`:
    /// Xavier-uniform weights, zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig) -> Result<Self, PredictorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layout(&config)
            .into_iter()
            .map(|(name, rows, cols)| {
                let data = if name.ends_with(".g") {
                    vec![1.0; rows * cols]
                } else if cols == 1 {
                    vec![0.0; rows]
                } else {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    (0..rows * cols)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect()
                };
                ParamBlock {
                    name,
                    rows,
                    cols,
                    data,
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[ParamBlock] {
        &self.params
    }

    fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("parameter block {name} missing"))
    }

    fn check_graph(&self, graph: &CrystalGraph) -> Result<(), PredictorError> {
        if graph.n_nodes == 0 {
            return Err(PredictorError::DimMismatch {
                context: "graph nodes".to_string(),
                expected: 1,
                got: 0,
            });
        }
        if graph.node_feats.len() != graph.n_nodes {
            return Err(PredictorError::DimMismatch {
                context: "node feature rows".to_string(),
                expected: graph.n_nodes,
                got: graph.node_feats.len(),
            });
        }
        for row in &graph.node_feats {
            if row.len() != self.config.node_feat_dim {
                return Err(PredictorError::DimMismatch {
                    context: "node feature width".to_string(),
                    expected: self.config.node_feat_dim,
                    got: row.len(),
                });
            }
        }
        if graph.edge_feats.len() != graph.edges.len() {
            return Err(PredictorError::DimMismatch {
                context: "edge feature rows".to_string(),
                expected: graph.edges.len(),
                got: graph.edge_feats.len(),
            });
        }
        for row in &graph.edge_feats {
            if row.len() != RBF_DIM {
                return Err(PredictorError::DimMismatch {
                    context: "edge feature width".to_string(),
                    expected: RBF_DIM,
                    got: row.len(),
                });
            }
        }
        Ok(())
    }

    /// Builds the forward computation on `tape`; returns the parameter
    /// leaves (in declared order) and the output node.
    fn build_forward(
        &self,
        tape: &mut Tape,
        graph: &CrystalGraph,
    ) -> Result<(Vec<NodeId>, NodeId), PredictorError> {
        self.check_graph(graph)?;
        let d = self.config.node_dim;
        let de = self.config.edge_dim;
        let n = graph.n_nodes;

        let param_ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.data.clone()))
            .collect();
        let pid = |name: &str| param_ids[self.param_index(name)];

        // Node embedding.
        let embed_w = pid("embed.w");
        let embed_b = pid("embed.b");
        let mut f: Vec<NodeId> = graph
            .node_feats
            .iter()
            .map(|nf| {
                let x = tape.leaf(nf.clone());
                tape.linear(embed_w, embed_b, x, d, self.config.node_feat_dim)
            })
            .collect();

        // Edge projection 512 → d_e (linear + softplus), once per edge.
        let edge_w = pid("edge.w");
        let edge_b = pid("edge.b");
        let edge_proj: Vec<NodeId> = graph
            .edge_feats
            .iter()
            .map(|ef| {
                let x = tape.leaf(ef.clone());
                let lin = tape.linear(edge_w, edge_b, x, de, RBF_DIM);
                tape.softplus(lin)
            })
            .collect();

        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for l in 0..self.config.layers {
            let p = |suffix: &str| pid(&format!("layer{l}.{suffix}"));
            let (qw, qb) = (p("q.w"), p("q.b"));
            let (kw, kb) = (p("k.w"), p("k.b"));
            let (vw, vb) = (p("v.w"), p("v.b"));
            let (ew, eb) = (p("e.w"), p("e.b"));

            // Per-node projections, shared across that node's edges.
            let q_n: Vec<NodeId> = f.iter().map(|&fi| tape.linear(qw, qb, fi, d, d)).collect();
            let k_n: Vec<NodeId> = f.iter().map(|&fi| tape.linear(kw, kb, fi, d, d)).collect();
            let v_n: Vec<NodeId> = f.iter().map(|&fi| tape.linear(vw, vb, fi, d, d)).collect();

            let mut msgs: Vec<Vec<NodeId>> = vec![Vec::new(); n];
            for (eidx, edge) in graph.edges.iter().enumerate() {
                let k = tape.concat(&[k_n[edge.i], k_n[edge.j]]);
                let kh = tape.linear(p("xi_k.w1"), p("xi_k.b1"), k, d, 2 * d);
                let kh = tape.softplus(kh);
                let xi_k = tape.linear(p("xi_k.w2"), p("xi_k.b2"), kh, d, d);

                let alpha = tape.mul(q_n[edge.i], xi_k);
                let alpha = tape.scale(alpha, inv_sqrt_d);
                let ln_alpha = tape.layer_norm(alpha, p("ln_alpha.g"), p("ln_alpha.b"));
                let gate = tape.sigmoid(ln_alpha);

                let v_e = tape.linear(ew, eb, edge_proj[eidx], de, de);
                let v = tape.concat(&[v_n[edge.i], v_n[edge.j], v_e]);
                let vh = tape.linear(p("xi_v.w1"), p("xi_v.b1"), v, d, 2 * d + de);
                let vh = tape.softplus(vh);
                let xi_v = tape.linear(p("xi_v.w2"), p("xi_v.b2"), vh, d, d);

                msgs[edge.i].push(tape.mul(gate, xi_v));
            }

            let mut f_next = Vec::with_capacity(n);
            for (i, node_msgs) in msgs.iter().enumerate() {
                let agg = if node_msgs.is_empty() {
                    tape.leaf(vec![0.0; d])
                } else {
                    tape.sum(node_msgs)
                };
                let ln = tape.layer_norm(agg, p("ln_msg.g"), p("ln_msg.b"));
                let res = tape.add(f[i], ln);
                f_next.push(tape.softplus(res));
            }
            f = f_next;
        }

        // Mean pooling over nodes, then the MLP head.
        let pooled = tape.sum(&f);
        let pooled = tape.scale(pooled, 1.0 / n as f64);
        let h = tape.linear(pid("head.w1"), pid("head.b1"), pooled, d, d);
        let h = tape.softplus(h);
        let out_len = self.config.output_len();
        let mut out = tape.linear(pid("head.w2"), pid("head.b2"), h, out_len, d);

        if self.config.output_clamp == OutputClamp::NonNegative {
            out = tape.relu(out);
        }
        if self.config.mask_mode == MaskMode::Weighted {
            let mask = self.config.mask.as_ref().expect("validated config");
            let proj = mask_projection_matrix(self.config.kind, mask)?;
            let w = tape.leaf(proj);
            let b = tape.leaf(vec![0.0; out_len]);
            out = tape.linear(w, b, out, out_len, out_len);
        }
        Ok((param_ids, out))
    }

    /// Runs the model on a featurized graph, returning the flat output.
    pub fn forward(&self, graph: &CrystalGraph) -> Result<Vec<f64>, PredictorError> {
        let mut tape = Tape::new();
        let (_, out) = self.build_forward(&mut tape, graph)?;
        Ok(tape.value(out).to_vec())
    }

    /// Runs the model and assembles the canonical-frame tensor property.
    pub fn predict_property(&self, graph: &CrystalGraph) -> Result<TensorProperty, PredictorError> {
        let out = self.forward(graph)?;
        let p = match self.config.mask_mode {
            MaskMode::IndependentOnly => {
                let mask = self.config.mask.as_ref().expect("validated config");
                reconstruct_from_independent(&out, mask)?
            }
            _ => TensorProperty::from_flat(self.config.kind, &out)?,
        };
        Ok(p)
    }

    /// Loss and parameter gradients (in declared block order) for one
    /// sample.
    pub fn loss_and_gradients(
        &self,
        sample: &TrainSample,
        huber_delta: f64,
    ) -> Result<(f64, Vec<Vec<f64>>), PredictorError> {
        self.check_target(&sample.target)?;
        let mut tape = Tape::new();
        let (param_ids, out) = self.build_forward(&mut tape, &sample.graph)?;
        let loss = tape.huber_loss(out, &sample.target, huber_delta);
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss);
        let per_block = param_ids
            .iter()
            .map(|&id| grads.get(id).to_vec())
            .collect();
        Ok((value, per_block))
    }

    /// Mean loss over a set of samples (no gradients).
    pub fn mean_loss(
        &self,
        samples: &[TrainSample],
        huber_delta: f64,
    ) -> Result<f64, PredictorError> {
        if samples.is_empty() {
            return Err(PredictorError::EmptyDataset);
        }
        let mut total = 0.0;
        for s in samples {
            self.check_target(&s.target)?;
            let mut tape = Tape::new();
            let (_, out) = self.build_forward(&mut tape, &s.graph)?;
            let loss = tape.huber_loss(out, &s.target, huber_delta);
            total += tape.value(loss)[0];
        }
        Ok(total / samples.len() as f64)
    }

    fn check_target(&self, target: &[f64]) -> Result<(), PredictorError> {
        let expected = self.config.output_len();
        if target.len() != expected {
            return Err(PredictorError::DimMismatch {
                context: "target vector".to_string(),
                expected,
                got: target.len(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            config: self.config.clone(),
            params: self.params.clone(),
        })
        .expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, PredictorError> {
        let ckpt: Checkpoint =
            serde_json::from_str(s).map_err(|source| PredictorError::CheckpointParse { source })?;
        if ckpt.schema != CHECKPOINT_SCHEMA {
            return Err(PredictorError::CheckpointSchema {
                found: ckpt.schema,
                expected: CHECKPOINT_SCHEMA.to_string(),
            });
        }
        ckpt.config.validate()?;
        let expected = layout(&ckpt.config);
        if ckpt.params.len() != expected.len() {
            return Err(PredictorError::DimMismatch {
                context: "checkpoint parameter blocks".to_string(),
                expected: expected.len(),
                got: ckpt.params.len(),
            });
        }
        for (block, (name, rows, cols)) in ckpt.params.iter().zip(&expected) {
            if &block.name != name || block.rows != *rows || block.cols != *cols {
                return Err(PredictorError::InvalidConfig {
                    reason: format!(
                        "checkpoint block {:?} ({}x{}) does not match expected {name:?} ({rows}x{cols})",
                        block.name, block.rows, block.cols
                    ),
                });
            }
            if block.data.len() != rows * cols {
                return Err(PredictorError::DimMismatch {
                    context: format!("checkpoint block {name}"),
                    expected: rows * cols,
                    got: block.data.len(),
                });
            }
        }
        Ok(Self {
            config: ckpt.config,
            params: ckpt.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        std::fs::write(path, self.to_json()).map_err(|source| PredictorError::CheckpointIo {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let s = std::fs::read_to_string(path).map_err(|source| PredictorError::CheckpointIo {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&s)
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut Vec<ParamBlock> {
        &mut self.params
    }
}

/// The mask projection as an `out×out` matrix acting on the flat layout:
/// column `s` is the projection of the `s`-th basis vector. Rows of tied
/// slots are exact sign-scaled copies of each other, so projecting twice
/// is bitwise idempotent.
fn mask_projection_matrix(kind: TensorKind, mask: &SymmetryMask) -> Result<Vec<f64>, TensorError> {
    let out = kind.flat_len();
    let mut proj = vec![0.0; out * out];
    for s in 0..out {
        let mut basis = vec![0.0; out];
        basis[s] = 1.0;
        let p = TensorProperty::from_flat(kind, &basis)?;
        let masked = apply_mask(&p, mask)?;
        for (r, v) in masked.to_flat().into_iter().enumerate() {
            proj[r * out + s] = v;
        }
    }
    Ok(proj)
}

/// Trains the model in place with AdamW (decoupled weight decay, bias
/// correction, zero-initialized moments) under a per-step polynomial
/// learning-rate decay. Deterministic for a fixed config: one shuffle
/// stream drives the epoch permutations and summation orders are fixed.
pub fn train(
    model: &mut PredictorModel,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory, PredictorError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }

    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    let mut m: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    let mut v: Vec<Vec<f64>> = m.clone();

    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;
    let mut step = 0usize;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::new(),
    };

    for epoch in 0..cfg.epochs {
        // Fisher–Yates over one persistent stream.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch_loss = 0.0;
            let mut grads: Vec<Vec<f64>> =
                model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            for &si in batch {
                let (loss, sample_grads) =
                    model.loss_and_gradients(&train_set[si], cfg.huber_delta)?;
                batch_loss += loss;
                for (acc, g) in grads.iter_mut().zip(&sample_grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(PredictorError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }

            let lr = cfg.lr0 * (1.0 - step as f64 / total_steps).powf(cfg.poly_power);
            step += 1;
            let t = step as f64;
            let bc1 = 1.0 - BETA1.powf(t);
            let bc2 = 1.0 - BETA2.powf(t);
            for (pi, block) in model.params.iter_mut().enumerate() {
                for (k, theta) in block.data.iter_mut().enumerate() {
                    let g = grads[pi][k] * scale;
                    m[pi][k] = BETA1 * m[pi][k] + (1.0 - BETA1) * g;
                    v[pi][k] = BETA2 * v[pi][k] + (1.0 - BETA2) * g * g;
                    let m_hat = m[pi][k] / bc1;
                    let v_hat = v[pi][k] / bc2;
                    *theta -= lr * (m_hat / (v_hat.sqrt() + EPS) + cfg.weight_decay * *theta);
                }
            }
            epoch_loss += batch_loss;
        }
        history.train_loss.push(epoch_loss / batches_per_epoch as f64);
        if !val_set.is_empty() {
            history.val_loss.push(model.mean_loss(val_set, cfg.huber_delta)?);
        }
    }
    Ok(history)
}
