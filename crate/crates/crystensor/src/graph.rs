//! Periodic crystal-graph construction and node/edge featurization.
//!
//! The graph is built on the canonical crystal, so everything downstream
//! of it sees a frame-invariant input. Each atom is connected to every
//! periodic image within a per-structure cutoff `R`, chosen as the largest
//! of the atoms' k-th-nearest-neighbor distances (k = 16 by default) so
//! that every atom has at least k neighbors. Edges carry the exact
//! Cartesian displacement `e_ij = x_j + k₁l₁ + k₂l₂ + k₃l₃ − x_i` for an
//! integer image offset `k`, and are listed deterministically by
//! `(i, j, lexicographic offset)`.
//!
//! The offset search is exact: a ball of radius `R` around an atom spans
//! at most `R·‖L⁻¹ column‖ + 1` cells along each axis, so the search box
//! grows until it provably covers the candidate cutoff, erroring out past
//! `max_offset_shells` rather than silently truncating. Ties at exactly
//! `R` are included, with a hair of relative slack so the edge multiset
//! is stable across algebraically-equivalent frames.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{frac_to_cart, Crystal, CrystalError};
use crate::linalg;
use crate::{tol, Vec3};

/// Number of radial basis functions in the raw edge embedding.
pub const RBF_DIM: usize = 512;
/// RBF centers span `[−4, 0]`, the range of the softened inverse length
/// `−c/‖e_ij‖` for lengths down to `c/4` Å.
pub const RBF_CENTER_MIN: f64 = -4.0;
pub const RBF_CENTER_MAX: f64 = 0.0;
/// Default softening constant `c` in `−c/‖e_ij‖`.
pub const DEFAULT_RBF_C: f64 = 0.75;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error(
        "neighbor search needs {required} offset shells along axis {axis}, \
         more than the allowed {max}"
    )]
    NeighborSearchOverflow {
        axis: usize,
        required: i64,
        max: i32,
    },
    #[error("edge length must be positive, got {length}")]
    NonpositiveLength { length: f64 },
    #[error("no embedding for atomic number {z}")]
    UnknownSpecies { z: u8 },
    #[error("failed to read embedding table {path}: {source}")]
    TableIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse embedding table: {source}")]
    TableParse { source: serde_json::Error },
    #[error("invalid embedding table: {reason}")]
    InvalidTable { reason: String },
}

/// Neighbor-search knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    /// The cutoff is the k-th-nearest-neighbor distance, pooled over atoms.
    pub k_neighbors: usize,
    /// Hard bound on the per-axis image search; exceeding it is an error.
    pub max_offset_shells: i32,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            k_neighbors: 16,
            // Comfortable for any cell with condition number ≲ 10; true
            // degenerate slabs still trip the bound quickly.
            max_offset_shells: 12,
        }
    }
}

/// A directed edge to the periodic image of atom `j` offset by `k` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub offset: [i32; 3],
    /// Cartesian displacement `x_j + k·L − x_i` in Å.
    pub vec: Vec3,
}

impl Edge {
    pub fn length(&self) -> f64 {
        linalg::norm(&self.vec)
    }
}

/// Periodic crystal graph. `build_graph` fills the topology; node and edge
/// features are attached separately by [`embed_nodes`] / [`embed_edges`]
/// (or [`featurize`] for both).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalGraph {
    pub n_nodes: usize,
    /// Per-structure cutoff radius `R` in Å.
    pub cutoff: f64,
    pub edges: Vec<Edge>,
    /// `n_nodes × d_node`; empty until node features are attached.
    pub node_feats: Vec<Vec<f64>>,
    /// `edges.len() × RBF_DIM`; empty until edge features are attached.
    pub edge_feats: Vec<Vec<f64>>,
}

/// Euclidean norms of the columns of `L⁻¹`: the fractional extent of a
/// unit Cartesian ball along each lattice axis.
fn inverse_column_norms(lattice: &crate::Mat3) -> [f64; 3] {
    let inv = linalg::inverse(lattice).expect("validated lattice is invertible");
    let mut norms = [0.0; 3];
    for (a, norm) in norms.iter_mut().enumerate() {
        *norm = (0..3).map(|b| inv[b][a] * inv[b][a]).sum::<f64>().sqrt();
    }
    norms
}

/// Distance from atom `i` to the image of atom `j` shifted by `offset`.
fn image_distance(carts: &[Vec3], lattice: &crate::Mat3, i: usize, j: usize, offset: [i32; 3]) -> f64 {
    linalg::norm(&image_vec(carts, lattice, i, j, offset))
}

fn image_vec(carts: &[Vec3], lattice: &crate::Mat3, i: usize, j: usize, offset: [i32; 3]) -> Vec3 {
    let k = [offset[0] as f64, offset[1] as f64, offset[2] as f64];
    let shift = linalg::row_times_mat(&k, lattice);
    linalg::vec_sub(&linalg::vec_add(&carts[j], &shift), &carts[i])
}

/// The k-th-nearest-neighbor distance of each atom within the given search
/// box, pooled over atoms by max. `None` when some atom has fewer than k
/// candidates in the box.
fn pooled_kth_distance(
    carts: &[Vec3],
    lattice: &crate::Mat3,
    shells: [i32; 3],
    k: usize,
) -> Option<f64> {
    let n = carts.len();
    let mut pooled: f64 = 0.0;
    for i in 0..n {
        let mut dists = Vec::new();
        for j in 0..n {
            for k1 in -shells[0]..=shells[0] {
                for k2 in -shells[1]..=shells[1] {
                    for k3 in -shells[2]..=shells[2] {
                        let offset = [k1, k2, k3];
                        if i == j && offset == [0, 0, 0] {
                            continue;
                        }
                        dists.push(image_distance(carts, lattice, i, j, offset));
                    }
                }
            }
        }
        if dists.len() < k {
            return None;
        }
        dists.sort_unstable_by(f64::total_cmp);
        pooled = pooled.max(dists[k - 1]);
    }
    Some(pooled)
}

/// Builds the periodic graph topology: cutoff `R` = pooled k-th-neighbor
/// distance, all images within `R` (ties included), no `(i, i, 0)`
/// self-loops, edges ordered by `(i, j, lexicographic offset)`.
pub fn build_graph(crystal: &Crystal, params: &GraphParams) -> Result<CrystalGraph, GraphError> {
    crystal.validate()?;
    let carts = frac_to_cart(crystal);
    let lattice = &crystal.lattice;
    let col_norms = inverse_column_norms(lattice);

    // Grow the search box until it provably covers the candidate cutoff:
    // a displacement of length R spans at most R·‖L⁻¹ column‖ cells, plus
    // one for the in-cell fractional difference. Enlarging the box can
    // only shrink the k-th-neighbor distance, so this terminates.
    let mut shells = [1i32, 1, 1];
    let cutoff = loop {
        let candidate = pooled_kth_distance(&carts, lattice, shells, params.k_neighbors);
        let needed: [i64; 3] = match candidate {
            None => [
                i64::from(shells[0]) + 1,
                i64::from(shells[1]) + 1,
                i64::from(shells[2]) + 1,
            ],
            Some(r) => {
                let mut needed = [0i64; 3];
                for a in 0..3 {
                    needed[a] = (r * col_norms[a]).ceil() as i64 + 1;
                }
                needed
            }
        };
        if let Some(axis) = (0..3).find(|&a| needed[a] > i64::from(params.max_offset_shells)) {
            return Err(GraphError::NeighborSearchOverflow {
                axis,
                required: needed[axis],
                max: params.max_offset_shells,
            });
        }
        if candidate.is_some() && (0..3).all(|a| needed[a] <= i64::from(shells[a])) {
            break candidate.unwrap();
        }
        for a in 0..3 {
            shells[a] = shells[a].max(needed[a] as i32);
        }
    };

    let threshold = cutoff * (1.0 + tol::EDGE_TIE_REL);
    let n = crystal.n_atoms();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k1 in -shells[0]..=shells[0] {
                for k2 in -shells[1]..=shells[1] {
                    for k3 in -shells[2]..=shells[2] {
                        let offset = [k1, k2, k3];
                        if i == j && offset == [0, 0, 0] {
                            continue;
                        }
                        let vec = image_vec(&carts, lattice, i, j, offset);
                        let d = linalg::norm(&vec);
                        if d > 0.0 && d <= threshold {
                            edges.push(Edge { i, j, offset, vec });
                        }
                    }
                }
            }
        }
    }

    Ok(CrystalGraph {
        n_nodes: n,
        cutoff,
        edges,
        node_feats: Vec::new(),
        edge_feats: Vec::new(),
    })
}

/// Evenly spaced RBF centers over `[RBF_CENTER_MIN, RBF_CENTER_MAX]`.
pub fn rbf_centers() -> Vec<f64> {
    let span = RBF_CENTER_MAX - RBF_CENTER_MIN;
    (0..RBF_DIM)
        .map(|m| RBF_CENTER_MIN + span * m as f64 / (RBF_DIM - 1) as f64)
        .collect()
}

/// Gaussian RBF expansion of the softened inverse length `−c/length`,
/// with σ equal to the center spacing. Components are mathematically in
/// `(0, 1]`; far-off centers underflow to `0.0`.
pub fn rbf_embed(length: f64, c: f64) -> Result<Vec<f64>, GraphError> {
    if !(length > 0.0) {
        return Err(GraphError::NonpositiveLength { length });
    }
    let x = -c / length;
    let sigma = (RBF_CENTER_MAX - RBF_CENTER_MIN) / (RBF_DIM - 1) as f64;
    let denom = 2.0 * sigma * sigma;
    Ok(rbf_centers()
        .into_iter()
        .map(|mu| (-(x - mu) * (x - mu) / denom).exp())
        .collect())
}

/// Per-species node embedding vectors, keyed by atomic number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomEmbeddingTable {
    dim: usize,
    entries: BTreeMap<u8, Vec<f64>>,
}

impl AtomEmbeddingTable {
    /// Fallback table: atomic number `z ≤ 92` maps to a one-hot 92-vector.
    pub fn one_hot() -> Self {
        let mut entries = BTreeMap::new();
        for z in 1..=92u8 {
            let mut v = vec![0.0; 92];
            v[usize::from(z) - 1] = 1.0;
            entries.insert(z, v);
        }
        Self { dim: 92, entries }
    }

    /// Loads a JSON object mapping atomic-number strings to equal-length
    /// embedding vectors (the CGCNN `atom_init.json` layout).
    pub fn from_json_str(s: &str) -> Result<Self, GraphError> {
        let raw: BTreeMap<String, Vec<f64>> =
            serde_json::from_str(s).map_err(|source| GraphError::TableParse { source })?;
        let mut entries = BTreeMap::new();
        let mut dim: Option<usize> = None;
        for (key, v) in raw {
            let z: u8 = key.parse().map_err(|_| GraphError::InvalidTable {
                reason: format!("key {key:?} is not an atomic number"),
            })?;
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(GraphError::InvalidTable {
                        reason: format!(
                            "embedding for atomic number {z} has length {}, expected {d}",
                            v.len()
                        ),
                    });
                }
                _ => {}
            }
            entries.insert(z, v);
        }
        let dim = dim.ok_or_else(|| GraphError::InvalidTable {
            reason: "table is empty".to_string(),
        })?;
        Ok(Self { dim, entries })
    }

    pub fn from_path(path: &Path) -> Result<Self, GraphError> {
        let s = std::fs::read_to_string(path).map_err(|source| GraphError::TableIo {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, z: u8) -> Option<&[f64]> {
        self.entries.get(&z).map(Vec::as_slice)
    }
}

/// Node feature matrix: row `i` is the table embedding of species `i`.
pub fn embed_nodes(
    crystal: &Crystal,
    table: &AtomEmbeddingTable,
) -> Result<Vec<Vec<f64>>, GraphError> {
    crystal
        .species
        .iter()
        .map(|&z| {
            table
                .get(z)
                .map(<[f64]>::to_vec)
                .ok_or(GraphError::UnknownSpecies { z })
        })
        .collect()
}

/// Raw RBF edge features for every edge of the graph.
pub fn embed_edges(graph: &CrystalGraph, c: f64) -> Result<Vec<Vec<f64>>, GraphError> {
    graph
        .edges
        .iter()
        .map(|e| rbf_embed(e.length(), c))
        .collect()
}

/// Builds the graph and attaches node and edge features in one pass.
pub fn featurize(
    crystal: &Crystal,
    table: &AtomEmbeddingTable,
    params: &GraphParams,
    rbf_c: f64,
) -> Result<CrystalGraph, GraphError> {
    let mut graph = build_graph(crystal, params)?;
    graph.node_feats = embed_nodes(crystal, table)?;
    graph.edge_feats = embed_edges(&graph, rbf_c)?;
    Ok(graph)
}
