//! O(3)-equivariant crystal tensor property prediction.
//!
//! The pipeline wraps any graph-based property predictor in an exact
//! equivariance layer: canonicalize the crystal by polar decomposition of
//! its lattice (`L = QH`), predict the tensor on the canonical crystal
//! `(A, F, H)`, then rotate the prediction back with `Q` using the rank-2/3/4
//! tensor transformation rules. Equivariance then holds by algebra, for any
//! backbone.
//!
//! Modules mirror the pipeline stages:
//! - [`crystal`]: crystal data model and the O(3) group action
//! - [`canon`]: polar/QR canonicalization (R&R module)
//! - [`tensor`]: tensor properties, transforms, Voigt codecs, symmetry masks
//! - [`graph`]: periodic crystal graphs and featurization
//! - [`autodiff`]: minimal reverse-mode tape used by the reference predictor
//! - [`predictor`]: reference transformer-style backbone + training loop
//! - [`harness`]: equivariance verification, synthetic data, studies
//! - [`dataset`], [`config`], [`cli`]: JSONL ingestion, run config, CLI

pub mod autodiff;
pub mod canon;
pub mod cli;
pub mod config;
pub mod crystal;
pub mod dataset;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod predictor;
pub mod tensor;

/// Concrete scalar for the pipeline: all production arithmetic is f64
/// (the equivariance tolerances require double precision). The generic
/// kernels in [`linalg`] also instantiate at f32.
pub type Vec3 = linalg::Vector3<f64>;
pub type Mat3 = linalg::Matrix3<f64>;

/// Shared numeric-policy constants.
pub mod tol {
    /// Relative rank tolerance: a lattice is full-rank iff
    /// `σ_min ≥ RANK_REL × σ_max` (scale-free degeneracy rejection).
    pub const RANK_REL: f64 = 1e-8;
    /// Max-abs deviation allowed in `QᵀQ − I` and `|det Q| − 1`.
    pub const ORTH: f64 = 1e-10;
    /// Fractional↔Cartesian roundtrip accuracy.
    pub const COORD_ROUNDTRIP: f64 = 1e-12;
    /// Index-symmetry tolerance when encoding a full tensor to Voigt form.
    pub const VOIGT_SYM: f64 = 1e-9;
    /// Mask-consistency tolerance for independent-component extraction.
    pub const MASK_CONSISTENT: f64 = 1e-9;
    /// Relative band for the inclusive edge-tie rule `d ≤ R·(1+EDGE_TIE_REL)`:
    /// keeps the edge multiset identical across algebraically-equivalent
    /// frames, where rounding perturbs exact ties by ~1e-15.
    pub const EDGE_TIE_REL: f64 = 1e-9;
    /// Input symmetrization tolerance for dielectric/elastic Voigt labels.
    pub const INPUT_SYM: f64 = 1e-6;
    /// EwT compares `‖pred−label‖_F/‖label‖_F ≤ t` inclusively; this relative
    /// slack absorbs last-ulp rounding so mathematically-on-the-boundary
    /// ratios land inside (the boundary itself is measure-zero).
    pub const EWT_BOUNDARY_REL: f64 = 1e-12;
    /// End-to-end equivariance acceptance threshold (relative).
    pub const EQUIVARIANCE: f64 = 1e-9;
}
