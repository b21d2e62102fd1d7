//! Tensor properties, their O(3) transformation rules, Voigt codecs,
//! crystal-system symmetry masks, and evaluation metrics.
//!
//! Three property ranks are supported: the rank-2 dielectric tensor `ε`
//! (3×3 symmetric), the rank-3 piezoelectric tensor `e` (symmetric in its
//! strain index pair, stored 3×6 in Voigt form), and the rank-4 elastic
//! tensor `C` (minor and major symmetries, stored 6×6 symmetric in Voigt
//! form). Under an orthogonal change of frame `Q` each rank transforms by
//! contracting every free index with `Q`; rotating a canonical-frame
//! prediction back into the input frame is exactly one such transform.
//!
//! Voigt encoding is a pure relabelling (`11→1, 22→2, 33→3, 23→4, 31→5,
//! 12→6`); no engineering-strain factors are applied anywhere, so
//! encode/decode roundtrips are bitwise exact on tensors with exact index
//! symmetries.
//!
//! Crystal-system symmetry is expressed as integer-pattern masks over the
//! Voigt matrix: `0` pins a slot to zero, `±k` ties it to the k-th
//! independent component with a sign. Applying a mask is the least-squares
//! projection onto the constraint subspace (signed mean over each tied
//! group), which makes it idempotent and safe to stack after a model head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::OrthogonalMatrix;
use crate::linalg::{matmul, transpose};
use crate::{tol, Mat3};

/// Dense rank-3 tensor over 3D indices.
pub type Rank3 = [[[f64; 3]; 3]; 3];
/// Dense rank-4 tensor over 3D indices.
pub type Rank4 = [[[[f64; 3]; 3]; 3]; 3];

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor kind mismatch: expected {expected}, got {got}")]
    KindMismatch {
        expected: TensorKind,
        got: TensorKind,
    },
    #[error("voigt matrix for {kind} must be {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        kind: TensorKind,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("index symmetry violated by {defect:.3e} (tolerance {tol:.1e})")]
    SymmetryViolation { defect: f64, tol: f64 },
    #[error("input violates the symmetry mask by {defect:.3e} (tolerance {tol:.1e})")]
    MaskInconsistent { defect: f64, tol: f64 },
    #[error("expected {expected} independent components, got {got}")]
    ComponentCount { expected: usize, got: usize },
    #[error("invalid symmetry mask: {reason}")]
    InvalidMask { reason: String },
    #[error("failed to read mask file {path}: {source}")]
    MaskIo {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse mask file: {source}")]
    MaskParse { source: serde_json::Error },
    #[error("EwT is undefined for a zero-norm label")]
    ZeroLabelNorm,
}

/// Which physical property a tensor describes; fixes rank, Voigt shape,
/// and default units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Dielectric,
    Piezoelectric,
    Elastic,
}

impl TensorKind {
    pub fn rank(self) -> usize {
        match self {
            TensorKind::Dielectric => 2,
            TensorKind::Piezoelectric => 3,
            TensorKind::Elastic => 4,
        }
    }

    /// (rows, cols) of the Voigt matrix.
    pub fn voigt_shape(self) -> (usize, usize) {
        match self {
            TensorKind::Dielectric => (3, 3),
            TensorKind::Piezoelectric => (3, 6),
            TensorKind::Elastic => (6, 6),
        }
    }

    /// Width of the flat layout used by model heads and training targets:
    /// 6 unique entries for the symmetric dielectric tensor (Voigt order),
    /// 18 / 36 row-major entries for piezoelectric / elastic.
    pub fn flat_len(self) -> usize {
        match self {
            TensorKind::Dielectric => 6,
            TensorKind::Piezoelectric => 18,
            TensorKind::Elastic => 36,
        }
    }

    pub fn default_units(self) -> &'static str {
        match self {
            TensorKind::Dielectric => "unitless",
            TensorKind::Piezoelectric => "C·m⁻²",
            TensorKind::Elastic => "GPa",
        }
    }
}

impl fmt::Display for TensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TensorKind::Dielectric => "dielectric",
            TensorKind::Piezoelectric => "piezoelectric",
            TensorKind::Elastic => "elastic",
        };
        f.write_str(s)
    }
}

impl FromStr for TensorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dielectric" => Ok(TensorKind::Dielectric),
            "piezoelectric" => Ok(TensorKind::Piezoelectric),
            "elastic" => Ok(TensorKind::Elastic),
            other => Err(format!(
                "unknown tensor kind {other:?} (expected dielectric, piezoelectric or elastic)"
            )),
        }
    }
}

/// The seven lattice symmetry families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrystalSystem {
    Cubic,
    Tetragonal,
    Hexagonal,
    Trigonal,
    Orthorhombic,
    Monoclinic,
    Triclinic,
}

impl fmt::Display for CrystalSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CrystalSystem::Cubic => "cubic",
            CrystalSystem::Tetragonal => "tetragonal",
            CrystalSystem::Hexagonal => "hexagonal",
            CrystalSystem::Trigonal => "trigonal",
            CrystalSystem::Orthorhombic => "orthorhombic",
            CrystalSystem::Monoclinic => "monoclinic",
            CrystalSystem::Triclinic => "triclinic",
        };
        f.write_str(s)
    }
}

impl FromStr for CrystalSystem {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cubic" => Ok(CrystalSystem::Cubic),
            "tetragonal" => Ok(CrystalSystem::Tetragonal),
            "hexagonal" => Ok(CrystalSystem::Hexagonal),
            "trigonal" => Ok(CrystalSystem::Trigonal),
            "orthorhombic" => Ok(CrystalSystem::Orthorhombic),
            "monoclinic" => Ok(CrystalSystem::Monoclinic),
            "triclinic" => Ok(CrystalSystem::Triclinic),
            other => Err(format!("unknown crystal system {other:?}")),
        }
    }
}

/// A tensor property in Voigt form: 3×3 symmetric (dielectric), 3×6
/// (piezoelectric) or 6×6 symmetric (elastic).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorProperty {
    pub kind: TensorKind,
    pub voigt: Vec<Vec<f64>>,
    pub units: String,
}

impl TensorProperty {
    /// Builds a property with the kind's default units, validating shape
    /// and (for dielectric/elastic) Voigt symmetry to 1e-12.
    pub fn new(kind: TensorKind, voigt: Vec<Vec<f64>>) -> Result<Self, TensorError> {
        let p = Self {
            kind,
            voigt,
            units: kind.default_units().to_string(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let (rows, cols) = self.kind.voigt_shape();
        if self.voigt.len() != rows || self.voigt.iter().any(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                kind: self.kind,
                expected_rows: rows,
                expected_cols: cols,
                rows: self.voigt.len(),
                cols: self.voigt.first().map_or(0, |r| r.len()),
            });
        }
        if self.kind != TensorKind::Piezoelectric {
            let mut defect: f64 = 0.0;
            for i in 0..rows {
                for j in 0..i {
                    defect = defect.max((self.voigt[i][j] - self.voigt[j][i]).abs());
                }
            }
            if defect > 1e-12 {
                return Err(TensorError::SymmetryViolation {
                    defect,
                    tol: 1e-12,
                });
            }
        }
        Ok(())
    }

    /// Zero property of the given kind.
    pub fn zeros(kind: TensorKind) -> Self {
        let (rows, cols) = kind.voigt_shape();
        Self {
            kind,
            voigt: vec![vec![0.0; cols]; rows],
            units: kind.default_units().to_string(),
        }
    }

    /// Flattens to the model-head layout: the six unique dielectric
    /// entries in Voigt order `[ε11, ε22, ε33, ε23, ε31, ε12]`, or the
    /// row-major Voigt matrix for piezoelectric/elastic.
    pub fn to_flat(&self) -> Vec<f64> {
        match self.kind {
            TensorKind::Dielectric => VOIGT_PAIRS
                .iter()
                .map(|&(i, j)| self.voigt[i][j])
                .collect(),
            _ => self.voigt.iter().flatten().copied().collect(),
        }
    }

    /// Inverse of [`to_flat`](Self::to_flat). The elastic 36-vector is
    /// symmetrized by `(v + vᵀ)/2` so unconstrained head outputs always
    /// yield a valid property.
    pub fn from_flat(kind: TensorKind, flat: &[f64]) -> Result<Self, TensorError> {
        if flat.len() != kind.flat_len() {
            return Err(TensorError::ComponentCount {
                expected: kind.flat_len(),
                got: flat.len(),
            });
        }
        let (rows, cols) = kind.voigt_shape();
        let mut voigt = vec![vec![0.0; cols]; rows];
        match kind {
            TensorKind::Dielectric => {
                for (v, &(i, j)) in flat.iter().zip(&VOIGT_PAIRS) {
                    voigt[i][j] = *v;
                    voigt[j][i] = *v;
                }
            }
            TensorKind::Piezoelectric => {
                for i in 0..rows {
                    voigt[i].copy_from_slice(&flat[i * cols..(i + 1) * cols]);
                }
            }
            TensorKind::Elastic => {
                for i in 0..rows {
                    voigt[i].copy_from_slice(&flat[i * cols..(i + 1) * cols]);
                }
                for i in 0..rows {
                    for j in 0..i {
                        let m = 0.5 * (voigt[i][j] + voigt[j][i]);
                        voigt[i][j] = m;
                        voigt[j][i] = m;
                    }
                }
            }
        }
        Self::new(kind, voigt)
    }
}

/// A dense rank-2/3/4 tensor over 3D indices, the full-space counterpart
/// of a [`TensorProperty`].
#[derive(Debug, Clone, PartialEq)]
pub enum FullTensor {
    Rank2(Mat3),
    Rank3(Rank3),
    Rank4(Rank4),
}

impl FullTensor {
    pub fn rank(&self) -> usize {
        match self {
            FullTensor::Rank2(_) => 2,
            FullTensor::Rank3(_) => 3,
            FullTensor::Rank4(_) => 4,
        }
    }

    /// Frobenius norm over all `3^rank` entries. Orthogonal transforms
    /// preserve this norm (unlike the Voigt-matrix norm, which weights
    /// paired indices once instead of twice).
    pub fn fnorm(&self) -> f64 {
        self.fold(0.0, |acc, v| acc + v * v).sqrt()
    }

    /// Largest entrywise deviation; `None` when ranks differ.
    pub fn max_abs_diff(&self, other: &FullTensor) -> Option<f64> {
        match (self, other) {
            (FullTensor::Rank2(a), FullTensor::Rank2(b)) => {
                Some(crate::linalg::max_abs_diff(a, b))
            }
            (FullTensor::Rank3(a), FullTensor::Rank3(b)) => {
                let mut d: f64 = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        for k in 0..3 {
                            d = d.max((a[i][j][k] - b[i][j][k]).abs());
                        }
                    }
                }
                Some(d)
            }
            (FullTensor::Rank4(a), FullTensor::Rank4(b)) => {
                let mut d: f64 = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        for k in 0..3 {
                            for l in 0..3 {
                                d = d.max((a[i][j][k][l] - b[i][j][k][l]).abs());
                            }
                        }
                    }
                }
                Some(d)
            }
            _ => None,
        }
    }

    /// Largest violation of the rank's required index symmetries
    /// (`ε_ij = ε_ji`; `e_ijk = e_ikj`; minor `C_ijkl = C_jikl = C_ijlk`
    /// and major `C_ijkl = C_klij`).
    pub fn symmetry_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        match self {
            FullTensor::Rank2(t) => {
                for i in 0..3 {
                    for j in 0..3 {
                        d = d.max((t[i][j] - t[j][i]).abs());
                    }
                }
            }
            FullTensor::Rank3(t) => {
                for i in 0..3 {
                    for j in 0..3 {
                        for k in 0..3 {
                            d = d.max((t[i][j][k] - t[i][k][j]).abs());
                        }
                    }
                }
            }
            FullTensor::Rank4(t) => {
                for i in 0..3 {
                    for j in 0..3 {
                        for k in 0..3 {
                            for l in 0..3 {
                                d = d.max((t[i][j][k][l] - t[j][i][k][l]).abs());
                                d = d.max((t[i][j][k][l] - t[i][j][l][k]).abs());
                                d = d.max((t[i][j][k][l] - t[k][l][i][j]).abs());
                            }
                        }
                    }
                }
            }
        }
        d
    }

    fn fold<T, F: FnMut(T, f64) -> T>(&self, init: T, mut f: F) -> T {
        let mut acc = init;
        match self {
            FullTensor::Rank2(t) => {
                for row in t {
                    for &v in row {
                        acc = f(acc, v);
                    }
                }
            }
            FullTensor::Rank3(t) => {
                for a in t {
                    for b in a {
                        for &v in b {
                            acc = f(acc, v);
                        }
                    }
                }
            }
            FullTensor::Rank4(t) => {
                for a in t {
                    for b in a {
                        for c in b {
                            for &v in c {
                                acc = f(acc, v);
                            }
                        }
                    }
                }
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// O(3) transformation rules
// ---------------------------------------------------------------------------

/// `ε′ = Q ε Qᵀ`.
pub fn transform_rank2(eps: &Mat3, q: &OrthogonalMatrix) -> Mat3 {
    let qm = q.matrix();
    matmul(&matmul(qm, eps), &transpose(qm))
}

/// Brute-force `ε′_ij = Σ_mn Q_im Q_jn ε_mn`, kept as an independent
/// cross-check of the factored implementation.
pub fn transform_rank2_naive(eps: &Mat3, q: &OrthogonalMatrix) -> Mat3 {
    let qm = q.matrix();
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for m in 0..3 {
                for n in 0..3 {
                    s += qm[i][m] * qm[j][n] * eps[m][n];
                }
            }
            out[i][j] = s;
        }
    }
    out
}

/// `e′_ijk = Σ_lmn Q_il Q_jm Q_kn e_lmn`, computed as three successive
/// single-index contractions.
pub fn transform_rank3(e: &Rank3, q: &OrthogonalMatrix) -> Rank3 {
    let qm = q.matrix();
    let mut a = [[[0.0; 3]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                let mut s = 0.0;
                for l in 0..3 {
                    s += qm[i][l] * e[l][j][k];
                }
                a[i][j][k] = s;
            }
        }
    }
    let mut b = [[[0.0; 3]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                let mut s = 0.0;
                for m in 0..3 {
                    s += qm[j][m] * a[i][m][k];
                }
                b[i][j][k] = s;
            }
        }
    }
    let mut out = [[[0.0; 3]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                let mut s = 0.0;
                for n in 0..3 {
                    s += qm[k][n] * b[i][j][n];
                }
                out[i][j][k] = s;
            }
        }
    }
    out
}

/// Brute-force six-loop form of [`transform_rank3`].
pub fn transform_rank3_naive(e: &Rank3, q: &OrthogonalMatrix) -> Rank3 {
    let qm = q.matrix();
    let mut out = [[[0.0; 3]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                let mut s = 0.0;
                for l in 0..3 {
                    for m in 0..3 {
                        for n in 0..3 {
                            s += qm[i][l] * qm[j][m] * qm[k][n] * e[l][m][n];
                        }
                    }
                }
                out[i][j][k] = s;
            }
        }
    }
    out
}

/// `C′_ijkl = Σ_mnpq Q_im Q_jn Q_kp Q_lq C_mnpq`, computed as four
/// successive single-index contractions.
pub fn transform_rank4(c: &Rank4, q: &OrthogonalMatrix) -> Rank4 {
    let qm = q.matrix();
    let mut t = *c;
    for mode in 0..4 {
        let prev = t;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let mut s = 0.0;
                        for m in 0..3 {
                            let src = match mode {
                                0 => prev[m][j][k][l],
                                1 => prev[i][m][k][l],
                                2 => prev[i][j][m][l],
                                _ => prev[i][j][k][m],
                            };
                            let row = match mode {
                                0 => i,
                                1 => j,
                                2 => k,
                                _ => l,
                            };
                            s += qm[row][m] * src;
                        }
                        t[i][j][k][l] = s;
                    }
                }
            }
        }
    }
    t
}

/// Brute-force eight-loop form of [`transform_rank4`].
pub fn transform_rank4_naive(c: &Rank4, q: &OrthogonalMatrix) -> Rank4 {
    let qm = q.matrix();
    let mut out = [[[[0.0; 3]; 3]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    let mut s = 0.0;
                    for m in 0..3 {
                        for n in 0..3 {
                            for p in 0..3 {
                                for qq in 0..3 {
                                    s += qm[i][m] * qm[j][n] * qm[k][p] * qm[l][qq]
                                        * c[m][n][p][qq];
                                }
                            }
                        }
                    }
                    out[i][j][k][l] = s;
                }
            }
        }
    }
    out
}

/// Rank-dispatching transform (factored path).
pub fn transform(t: &FullTensor, q: &OrthogonalMatrix) -> FullTensor {
    match t {
        FullTensor::Rank2(eps) => FullTensor::Rank2(transform_rank2(eps, q)),
        FullTensor::Rank3(e) => FullTensor::Rank3(transform_rank3(e, q)),
        FullTensor::Rank4(c) => FullTensor::Rank4(transform_rank4(c, q)),
    }
}

// ---------------------------------------------------------------------------
// Voigt codecs
// ---------------------------------------------------------------------------

/// Voigt index → unordered index pair: `1→11, 2→22, 3→33, 4→23, 5→31, 6→12`
/// (zero-based here).
pub const VOIGT_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (1, 2), (2, 0), (0, 1)];

/// Inverse of [`VOIGT_PAIRS`]: `PAIR_INDEX[i][j]` is the Voigt index of
/// the unordered pair `{i, j}`.
pub const PAIR_INDEX: [[usize; 3]; 3] = [[0, 5, 4], [5, 1, 3], [4, 3, 2]];

/// Encodes a full tensor into Voigt form. The required index symmetries
/// must hold within 1e-9; mirror-related slots are averaged, so the
/// roundtrip through [`voigt_decode`] is bitwise exact on tensors whose
/// symmetries hold exactly.
pub fn voigt_encode(t: &FullTensor) -> Result<TensorProperty, TensorError> {
    let defect = t.symmetry_defect();
    if defect > tol::VOIGT_SYM {
        return Err(TensorError::SymmetryViolation {
            defect,
            tol: tol::VOIGT_SYM,
        });
    }
    let voigt = match t {
        FullTensor::Rank2(eps) => (0..3)
            .map(|i| (0..3).map(|j| 0.5 * (eps[i][j] + eps[j][i])).collect())
            .collect(),
        FullTensor::Rank3(e) => (0..3)
            .map(|i| {
                VOIGT_PAIRS
                    .iter()
                    .map(|&(j, k)| 0.5 * (e[i][j][k] + e[i][k][j]))
                    .collect()
            })
            .collect(),
        FullTensor::Rank4(c) => VOIGT_PAIRS
            .iter()
            .map(|&(i, j)| {
                VOIGT_PAIRS
                    .iter()
                    .map(|&(k, l)| {
                        // Pairwise sums keep the average bitwise-exact when
                        // all eight symmetry-related entries are equal.
                        let s1 = (c[i][j][k][l] + c[j][i][k][l])
                            + (c[i][j][l][k] + c[j][i][l][k]);
                        let s2 = (c[k][l][i][j] + c[l][k][i][j])
                            + (c[k][l][j][i] + c[l][k][j][i]);
                        (s1 + s2) / 8.0
                    })
                    .collect()
            })
            .collect(),
    };
    let kind = match t.rank() {
        2 => TensorKind::Dielectric,
        3 => TensorKind::Piezoelectric,
        _ => TensorKind::Elastic,
    };
    Ok(TensorProperty {
        kind,
        voigt,
        units: kind.default_units().to_string(),
    })
}

/// Decodes a Voigt-form property into the full dense tensor, scattering
/// each entry to all of its symmetry-related slots. Symmetric kinds read
/// the upper triangle so the output symmetries hold exactly.
pub fn voigt_decode(p: &TensorProperty) -> FullTensor {
    match p.kind {
        TensorKind::Dielectric => {
            let mut eps = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    let (a, b) = if i <= j { (i, j) } else { (j, i) };
                    eps[i][j] = p.voigt[a][b];
                }
            }
            FullTensor::Rank2(eps)
        }
        TensorKind::Piezoelectric => {
            let mut e = [[[0.0; 3]; 3]; 3];
            for i in 0..3 {
                for (a, &(j, k)) in VOIGT_PAIRS.iter().enumerate() {
                    e[i][j][k] = p.voigt[i][a];
                    e[i][k][j] = p.voigt[i][a];
                }
            }
            FullTensor::Rank3(e)
        }
        TensorKind::Elastic => {
            let mut c = [[[[0.0; 3]; 3]; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        for l in 0..3 {
                            let a = PAIR_INDEX[i][j];
                            let b = PAIR_INDEX[k][l];
                            let (a, b) = if a <= b { (a, b) } else { (b, a) };
                            c[i][j][k][l] = p.voigt[a][b];
                        }
                    }
                }
            }
            FullTensor::Rank4(c)
        }
    }
}

// ---------------------------------------------------------------------------
// Symmetry masks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawMask {
    kind: TensorKind,
    crystal_system: CrystalSystem,
    pattern: Vec<Vec<i32>>,
}

/// Integer-pattern symmetry mask over the Voigt matrix: entry `0` pins a
/// slot to zero; entry `±k` ties the slot to independent component `k`
/// with that sign. Components are numbered by first appearance in
/// row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMask", into = "RawMask")]
pub struct SymmetryMask {
    kind: TensorKind,
    crystal_system: CrystalSystem,
    pattern: Vec<Vec<i32>>,
}

impl TryFrom<RawMask> for SymmetryMask {
    type Error = TensorError;
    fn try_from(raw: RawMask) -> Result<Self, Self::Error> {
        Self::new(raw.kind, raw.crystal_system, raw.pattern)
    }
}

impl From<SymmetryMask> for RawMask {
    fn from(mask: SymmetryMask) -> Self {
        RawMask {
            kind: mask.kind,
            crystal_system: mask.crystal_system,
            pattern: mask.pattern,
        }
    }
}

impl SymmetryMask {
    /// Validates and builds a mask: shape must match the kind, component
    /// indices must cover `1..=n` with no gaps, and masks for symmetric
    /// Voigt matrices must themselves be symmetric.
    pub fn new(
        kind: TensorKind,
        crystal_system: CrystalSystem,
        pattern: Vec<Vec<i32>>,
    ) -> Result<Self, TensorError> {
        let (rows, cols) = kind.voigt_shape();
        if pattern.len() != rows || pattern.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidMask {
                reason: format!("pattern for {kind} must be {rows}x{cols}"),
            });
        }
        let n = pattern
            .iter()
            .flatten()
            .map(|e| e.unsigned_abs() as usize)
            .max()
            .unwrap_or(0);
        if n == 0 {
            return Err(TensorError::InvalidMask {
                reason: "mask has no independent components".to_string(),
            });
        }
        let mut seen = vec![false; n];
        for &e in pattern.iter().flatten() {
            if e != 0 {
                seen[e.unsigned_abs() as usize - 1] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(TensorError::InvalidMask {
                reason: format!("component index {} never appears", missing + 1),
            });
        }
        if kind != TensorKind::Piezoelectric {
            for i in 0..rows {
                for j in 0..i {
                    if pattern[i][j] != pattern[j][i] {
                        return Err(TensorError::InvalidMask {
                            reason: format!(
                                "mask for symmetric {kind} Voigt matrix must be symmetric \
                                 (slots ({i},{j}) and ({j},{i}) differ)"
                            ),
                        });
                    }
                }
            }
        }
        Ok(Self {
            kind,
            crystal_system,
            pattern,
        })
    }

    /// The tabulated mask for a (kind, system) pair, or `None` when the
    /// catalogue has no entry (untabulated masks are loaded from files via
    /// [`from_path`](Self::from_path), not invented). Piezoelectric entries
    /// correspond to point groups 32 (trigonal), 2 (monoclinic) and
    /// 1 (triclinic).
    pub fn builtin(kind: TensorKind, system: CrystalSystem) -> Option<Self> {
        use CrystalSystem::*;
        let pattern: Vec<Vec<i32>> = match (kind, system) {
            (TensorKind::Dielectric, Cubic) => {
                vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]
            }
            (TensorKind::Dielectric, Tetragonal | Hexagonal | Trigonal) => {
                vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]
            }
            (TensorKind::Dielectric, Orthorhombic) => {
                vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 3]]
            }
            (TensorKind::Dielectric, Monoclinic) => {
                vec![vec![1, 0, 2], vec![0, 3, 0], vec![2, 0, 4]]
            }
            (TensorKind::Dielectric, Triclinic) => {
                vec![vec![1, 2, 3], vec![2, 4, 5], vec![3, 5, 6]]
            }
            (TensorKind::Elastic, Cubic) => vec![
                vec![1, 2, 2, 0, 0, 0],
                vec![2, 1, 2, 0, 0, 0],
                vec![2, 2, 1, 0, 0, 0],
                vec![0, 0, 0, 3, 0, 0],
                vec![0, 0, 0, 0, 3, 0],
                vec![0, 0, 0, 0, 0, 3],
            ],
            (TensorKind::Elastic, Tetragonal) => vec![
                vec![1, 2, 3, 0, 0, 0],
                vec![2, 1, 3, 0, 0, 0],
                vec![3, 3, 4, 0, 0, 0],
                vec![0, 0, 0, 5, 0, 0],
                vec![0, 0, 0, 0, 5, 0],
                vec![0, 0, 0, 0, 0, 6],
            ],
            (TensorKind::Elastic, Triclinic) => vec![
                vec![1, 2, 3, 4, 5, 6],
                vec![2, 7, 8, 9, 10, 11],
                vec![3, 8, 12, 13, 14, 15],
                vec![4, 9, 13, 16, 17, 18],
                vec![5, 10, 14, 17, 19, 20],
                vec![6, 11, 15, 18, 20, 21],
            ],
            (TensorKind::Piezoelectric, Trigonal) => vec![
                vec![1, -1, 0, 2, 0, 0],
                vec![0, 0, 0, 0, -2, -1],
                vec![0, 0, 0, 0, 0, 0],
            ],
            (TensorKind::Piezoelectric, Monoclinic) => vec![
                vec![0, 0, 0, 1, 0, 2],
                vec![3, 4, 5, 0, 6, 0],
                vec![0, 0, 0, 7, 0, 8],
            ],
            (TensorKind::Piezoelectric, Triclinic) => vec![
                vec![1, 2, 3, 4, 5, 6],
                vec![7, 8, 9, 10, 11, 12],
                vec![13, 14, 15, 16, 17, 18],
            ],
            _ => return None,
        };
        Some(Self::new(kind, system, pattern).expect("builtin mask is valid"))
    }

    pub fn from_json_str(s: &str) -> Result<Self, TensorError> {
        serde_json::from_str(s).map_err(|source| TensorError::MaskParse { source })
    }

    pub fn from_path(path: &Path) -> Result<Self, TensorError> {
        let s = std::fs::read_to_string(path).map_err(|source| TensorError::MaskIo {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&s)
    }

    pub fn kind(&self) -> TensorKind {
        self.kind
    }

    pub fn crystal_system(&self) -> CrystalSystem {
        self.crystal_system
    }

    pub fn pattern(&self) -> &[Vec<i32>] {
        &self.pattern
    }

    /// Number of independent components under this mask.
    pub fn independent_count(&self) -> usize {
        self.pattern
            .iter()
            .flatten()
            .map(|e| e.unsigned_abs() as usize)
            .max()
            .unwrap_or(0)
    }

    /// Signed mean of each tied group over the given Voigt matrix. When
    /// every sign-corrected member of a group is bitwise identical the
    /// common value is returned directly, making projection idempotent.
    fn group_means(&self, voigt: &[Vec<f64>]) -> Vec<f64> {
        let n = self.independent_count();
        let mut means = Vec::with_capacity(n);
        for k in 1..=n as i32 {
            let mut values = Vec::new();
            for (r, row) in self.pattern.iter().enumerate() {
                for (c, &e) in row.iter().enumerate() {
                    if e.abs() == k {
                        values.push(f64::from(e.signum()) * voigt[r][c]);
                    }
                }
            }
            let first = values[0];
            if values.iter().all(|&v| v == first) {
                means.push(first);
            } else {
                means.push(values.iter().sum::<f64>() / values.len() as f64);
            }
        }
        means
    }

    fn scatter(&self, means: &[f64]) -> Vec<Vec<f64>> {
        self.pattern
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&e| {
                        if e == 0 {
                            0.0
                        } else {
                            f64::from(e.signum()) * means[e.unsigned_abs() as usize - 1]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Projects a property onto the mask's constraint subspace: zero slots
/// become exactly `0.0` and each tied group is replaced by its signed
/// mean. Idempotent.
pub fn apply_mask(p: &TensorProperty, mask: &SymmetryMask) -> Result<TensorProperty, TensorError> {
    if p.kind != mask.kind {
        return Err(TensorError::KindMismatch {
            expected: mask.kind,
            got: p.kind,
        });
    }
    let means = mask.group_means(&p.voigt);
    Ok(TensorProperty {
        kind: p.kind,
        voigt: mask.scatter(&means),
        units: p.units.clone(),
    })
}

/// Extracts the independent components of a mask-consistent property.
/// Exact inverse of [`reconstruct_from_independent`] on consistent input.
pub fn independent_components(
    p: &TensorProperty,
    mask: &SymmetryMask,
) -> Result<Vec<f64>, TensorError> {
    if p.kind != mask.kind {
        return Err(TensorError::KindMismatch {
            expected: mask.kind,
            got: p.kind,
        });
    }
    let means = mask.group_means(&p.voigt);
    let projected = mask.scatter(&means);
    let mut defect: f64 = 0.0;
    for (row, prow) in p.voigt.iter().zip(&projected) {
        for (&a, &b) in row.iter().zip(prow) {
            defect = defect.max((a - b).abs());
        }
    }
    if defect > tol::MASK_CONSISTENT {
        return Err(TensorError::MaskInconsistent {
            defect,
            tol: tol::MASK_CONSISTENT,
        });
    }
    Ok(means)
}

/// Rebuilds the full Voigt property from independent components.
pub fn reconstruct_from_independent(
    values: &[f64],
    mask: &SymmetryMask,
) -> Result<TensorProperty, TensorError> {
    let n = mask.independent_count();
    if values.len() != n {
        return Err(TensorError::ComponentCount {
            expected: n,
            got: values.len(),
        });
    }
    Ok(TensorProperty {
        kind: mask.kind,
        voigt: mask.scatter(values),
        units: mask.kind.default_units().to_string(),
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Frobenius norm of the Voigt matrix.
pub fn fnorm(p: &TensorProperty) -> f64 {
    p.voigt
        .iter()
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// `‖pred − label‖_F` over the Voigt matrices.
pub fn fnorm_error(pred: &TensorProperty, label: &TensorProperty) -> Result<f64, TensorError> {
    if pred.kind != label.kind {
        return Err(TensorError::KindMismatch {
            expected: label.kind,
            got: pred.kind,
        });
    }
    let s = pred
        .voigt
        .iter()
        .flatten()
        .zip(label.voigt.iter().flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    Ok(s.sqrt())
}

/// Error-within-threshold: true iff `‖pred−label‖_F / ‖label‖_F ≤ t`,
/// inclusive at the boundary (a hair of relative slack absorbs last-ulp
/// rounding in the ratio).
pub fn ewt(
    pred: &TensorProperty,
    label: &TensorProperty,
    threshold: f64,
) -> Result<bool, TensorError> {
    let label_norm = fnorm(label);
    if label_norm == 0.0 {
        return Err(TensorError::ZeroLabelNorm);
    }
    let ratio = fnorm_error(pred, label)? / label_norm;
    Ok(ratio <= threshold * (1.0 + tol::EWT_BOUNDARY_REL))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canon::{decompose, CanonMethod};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_orthogonal(rng: &mut impl Rng) -> OrthogonalMatrix {
        let mut m = [[0.0; 3]; 3];
        for row in &mut m {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        decompose(&m, CanonMethod::Polar).expect("gaussian matrix is full rank").q
    }

    fn random_symmetric_voigt(kind: TensorKind, rng: &mut impl Rng) -> TensorProperty {
        let (rows, cols) = kind.voigt_shape();
        let mut voigt = vec![vec![0.0; cols]; rows];
        for i in 0..rows {
            for j in 0..cols {
                voigt[i][j] = rng.gen_range(-2.0..2.0);
            }
        }
        if kind != TensorKind::Piezoelectric {
            for i in 0..rows {
                for j in 0..i {
                    voigt[i][j] = voigt[j][i];
                }
            }
        }
        TensorProperty::new(kind, voigt).unwrap()
    }

    const KINDS: [TensorKind; 3] = [
        TensorKind::Dielectric,
        TensorKind::Piezoelectric,
        TensorKind::Elastic,
    ];

    #[test]
    fn rank2_identity_and_permutation() {
        let eps = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let id = OrthogonalMatrix::identity();
        assert_eq!(transform_rank2(&eps, &id), eps);

        let swap_xy =
            OrthogonalMatrix::new([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let got = transform_rank2(&eps, &swap_xy);
        assert_eq!(got, [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]]);
    }

    #[test]
    fn rank3_parity_flips_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let e = match voigt_decode(&random_symmetric_voigt(TensorKind::Piezoelectric, &mut rng)) {
            FullTensor::Rank3(e) => e,
            _ => unreachable!(),
        };
        let inv =
            OrthogonalMatrix::new([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]).unwrap();
        let flipped = transform_rank3(&e, &inv);
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    assert!((flipped[i][j][k] + e[i][j][k]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn rank4_parity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let c = match voigt_decode(&random_symmetric_voigt(TensorKind::Elastic, &mut rng)) {
            FullTensor::Rank4(c) => c,
            _ => unreachable!(),
        };
        let inv =
            OrthogonalMatrix::new([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]).unwrap();
        let same = transform_rank4(&c, &inv);
        assert!(FullTensor::Rank4(same)
            .max_abs_diff(&FullTensor::Rank4(c))
            .unwrap()
            .abs()
            < 1e-15);
    }

    #[test]
    fn factored_matches_naive_all_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..25 {
            let q = random_orthogonal(&mut rng);
            for kind in KINDS {
                let t = voigt_decode(&random_symmetric_voigt(kind, &mut rng));
                let (fast, slow) = match &t {
                    FullTensor::Rank2(eps) => (
                        FullTensor::Rank2(transform_rank2(eps, &q)),
                        FullTensor::Rank2(transform_rank2_naive(eps, &q)),
                    ),
                    FullTensor::Rank3(e) => (
                        FullTensor::Rank3(transform_rank3(e, &q)),
                        FullTensor::Rank3(transform_rank3_naive(e, &q)),
                    ),
                    FullTensor::Rank4(c) => (
                        FullTensor::Rank4(transform_rank4(c, &q)),
                        FullTensor::Rank4(transform_rank4_naive(c, &q)),
                    ),
                };
                let d = fast.max_abs_diff(&slow).unwrap();
                assert!(d < 1e-12, "trial {trial} {kind}: |factored − naive| = {d:e}");
                assert!(fast.symmetry_defect() < 1e-12);
            }
        }
    }

    #[test]
    fn transform_is_group_homomorphism_and_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..10 {
            let q1 = random_orthogonal(&mut rng);
            let q2 = random_orthogonal(&mut rng);
            let q12 = q1.compose(&q2);
            for kind in KINDS {
                let t = voigt_decode(&random_symmetric_voigt(kind, &mut rng));
                let sequential = transform(&transform(&t, &q2), &q1);
                let composed = transform(&t, &q12);
                assert!(sequential.max_abs_diff(&composed).unwrap() < 1e-10);
                assert!((transform(&t, &q1).fnorm() - t.fnorm()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn voigt_roundtrip_is_bitwise_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for kind in KINDS {
            for _ in 0..20 {
                let p = random_symmetric_voigt(kind, &mut rng);
                let t = voigt_decode(&p);
                assert_eq!(t.symmetry_defect(), 0.0);
                let back = voigt_encode(&t).unwrap();
                assert_eq!(back.voigt, p.voigt);
                assert_eq!(voigt_decode(&back), t);
            }
        }
    }

    #[test]
    fn voigt_spot_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let p = random_symmetric_voigt(TensorKind::Elastic, &mut rng);
        let c = match voigt_decode(&p) {
            FullTensor::Rank4(c) => c,
            _ => unreachable!(),
        };
        // C_1123 ↔ Voigt (1,4) in one-based labels.
        assert_eq!(c[0][0][1][2], p.voigt[0][3]);
        assert_eq!(c[0][0][2][1], p.voigt[0][3]);
        assert_eq!(c[1][2][0][0], p.voigt[0][3]);

        let e = random_symmetric_voigt(TensorKind::Piezoelectric, &mut rng);
        let e3 = match voigt_decode(&e) {
            FullTensor::Rank3(e3) => e3,
            _ => unreachable!(),
        };
        assert_eq!(e3[2][0][1], e.voigt[2][5]);
        assert_eq!(e3[2][1][0], e.voigt[2][5]);
    }

    #[test]
    fn symmetrized_identity_tensor_has_known_voigt_form() {
        // T_ijkl = (δ_ik δ_jl + δ_il δ_jk)/2 → Voigt diag(1,1,1,1/2,1/2,1/2).
        let mut t = [[[[0.0; 3]; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                        t[i][j][k][l] = 0.5 * (d(i, k) * d(j, l) + d(i, l) * d(j, k));
                    }
                }
            }
        }
        let p = voigt_encode(&FullTensor::Rank4(t)).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let expect = if a != b {
                    0.0
                } else if a < 3 {
                    1.0
                } else {
                    0.5
                };
                assert_eq!(p.voigt[a][b], expect);
            }
        }
        assert_eq!(voigt_decode(&p), FullTensor::Rank4(t));
    }

    #[test]
    fn encode_rejects_broken_symmetry() {
        let mut e = [[[0.0; 3]; 3]; 3];
        e[0][1][2] = 1.0;
        e[0][2][1] = 1.0 + 1e-6;
        match voigt_encode(&FullTensor::Rank3(e)) {
            Err(TensorError::SymmetryViolation { defect, .. }) => {
                assert!((defect - 1e-6).abs() < 1e-12);
            }
            other => panic!("expected SymmetryViolation, got {other:?}"),
        }
        e[0][2][1] = 1.0 + 1e-12;
        assert!(voigt_encode(&FullTensor::Rank3(e)).is_ok());
    }

    #[test]
    fn zero_matrix_decodes_to_zero_tensor() {
        let p = TensorProperty::zeros(TensorKind::Piezoelectric);
        match voigt_decode(&p) {
            FullTensor::Rank3(e) => {
                assert!(e.iter().flatten().flatten().all(|&v| v == 0.0));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn voigt_commutes_with_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for kind in KINDS {
            for _ in 0..10 {
                let p = random_symmetric_voigt(kind, &mut rng);
                let q = random_orthogonal(&mut rng);
                let via_factored = voigt_encode(&transform(&voigt_decode(&p), &q)).unwrap();
                let via_naive = match voigt_decode(&p) {
                    FullTensor::Rank2(eps) => {
                        voigt_encode(&FullTensor::Rank2(transform_rank2_naive(&eps, &q)))
                    }
                    FullTensor::Rank3(e) => {
                        voigt_encode(&FullTensor::Rank3(transform_rank3_naive(&e, &q)))
                    }
                    FullTensor::Rank4(c) => {
                        voigt_encode(&FullTensor::Rank4(transform_rank4_naive(&c, &q)))
                    }
                }
                .unwrap();
                for (ra, rb) in via_factored.voigt.iter().zip(&via_naive.voigt) {
                    for (&a, &b) in ra.iter().zip(rb) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn builtin_mask_counts_match_tables() {
        use CrystalSystem::*;
        let dielectric = [
            (Cubic, 1),
            (Tetragonal, 2),
            (Hexagonal, 2),
            (Trigonal, 2),
            (Orthorhombic, 3),
            (Monoclinic, 4),
            (Triclinic, 6),
        ];
        for (system, count) in dielectric {
            let mask = SymmetryMask::builtin(TensorKind::Dielectric, system).unwrap();
            assert_eq!(mask.independent_count(), count, "dielectric {system}");
        }
        let elastic = [(Cubic, 3), (Tetragonal, 6), (Triclinic, 21)];
        for (system, count) in elastic {
            let mask = SymmetryMask::builtin(TensorKind::Elastic, system).unwrap();
            assert_eq!(mask.independent_count(), count, "elastic {system}");
        }
        let piezo = [(Trigonal, 2), (Monoclinic, 8), (Triclinic, 18)];
        for (system, count) in piezo {
            let mask = SymmetryMask::builtin(TensorKind::Piezoelectric, system).unwrap();
            assert_eq!(mask.independent_count(), count, "piezoelectric {system}");
        }
        assert!(SymmetryMask::builtin(TensorKind::Elastic, Hexagonal).is_none());
        assert!(SymmetryMask::builtin(TensorKind::Piezoelectric, Cubic).is_none());
    }

    #[test]
    fn cubic_dielectric_mask_averages_diagonal() {
        let pred = TensorProperty::new(
            TensorKind::Dielectric,
            vec![
                vec![2.252, 0.016, 0.008],
                vec![0.016, 2.230, 0.007],
                vec![0.008, 0.007, 2.262],
            ],
        )
        .unwrap();
        let mask = SymmetryMask::builtin(TensorKind::Dielectric, CrystalSystem::Cubic).unwrap();
        let masked = apply_mask(&pred, &mask).unwrap();
        let a = (2.252 + 2.230 + 2.262) / 3.0;
        assert_eq!(masked.voigt[0][0], a);
        assert_eq!(masked.voigt[1][1], a);
        assert_eq!(masked.voigt[2][2], a);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(masked.voigt[i][j], 0.0);
                }
            }
        }
        // Projection is idempotent.
        assert_eq!(apply_mask(&masked, &mask).unwrap().voigt, masked.voigt);
    }

    #[test]
    fn triclinic_mask_is_identity_on_symmetric_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for kind in KINDS {
            let p = random_symmetric_voigt(kind, &mut rng);
            let mask = SymmetryMask::builtin(kind, CrystalSystem::Triclinic).unwrap();
            assert_eq!(apply_mask(&p, &mask).unwrap().voigt, p.voigt);
        }
    }

    #[test]
    fn trigonal_piezo_mask_applies_signs() {
        let mask =
            SymmetryMask::builtin(TensorKind::Piezoelectric, CrystalSystem::Trigonal).unwrap();
        let (e11, e14) = (0.73, -0.41);
        let p = reconstruct_from_independent(&[e11, e14], &mask).unwrap();
        let expect = [
            [e11, -e11, 0.0, e14, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, -e14, -e11],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ];
        for (row, erow) in p.voigt.iter().zip(&expect) {
            for (&a, &b) in row.iter().zip(erow) {
                assert_eq!(a, b);
            }
        }
        assert_eq!(independent_components(&p, &mask).unwrap(), vec![e11, e14]);
    }

    #[test]
    fn independent_component_roundtrips() {
        // Single-component cubic dielectric case.
        let mask = SymmetryMask::builtin(TensorKind::Dielectric, CrystalSystem::Cubic).unwrap();
        let p = reconstruct_from_independent(&[2.357], &mask).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p.voigt[i][j], if i == j { 2.357 } else { 0.0 });
            }
        }
        assert_eq!(independent_components(&p, &mask).unwrap(), vec![2.357]);

        // Orthorhombic diag(a, b, c) ↔ [a, b, c].
        let mask =
            SymmetryMask::builtin(TensorKind::Dielectric, CrystalSystem::Orthorhombic).unwrap();
        let p = TensorProperty::new(
            TensorKind::Dielectric,
            vec![
                vec![1.5, 0.0, 0.0],
                vec![0.0, 2.5, 0.0],
                vec![0.0, 0.0, 3.5],
            ],
        )
        .unwrap();
        assert_eq!(
            independent_components(&p, &mask).unwrap(),
            vec![1.5, 2.5, 3.5]
        );

        // Random triclinic ε ↔ its six upper-triangle entries.
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let p = random_symmetric_voigt(TensorKind::Dielectric, &mut rng);
        let mask = SymmetryMask::builtin(TensorKind::Dielectric, CrystalSystem::Triclinic).unwrap();
        let vals = independent_components(&p, &mask).unwrap();
        let v = &p.voigt;
        assert_eq!(
            vals,
            vec![v[0][0], v[0][1], v[0][2], v[1][1], v[1][2], v[2][2]]
        );
        let back = reconstruct_from_independent(&vals, &mask).unwrap();
        assert_eq!(back.voigt, p.voigt);
    }

    #[test]
    fn extraction_rejects_mask_violations() {
        let mask = SymmetryMask::builtin(TensorKind::Dielectric, CrystalSystem::Cubic).unwrap();
        let p = TensorProperty::new(
            TensorKind::Dielectric,
            vec![
                vec![2.0, 0.1, 0.0],
                vec![0.1, 2.0, 0.0],
                vec![0.0, 0.0, 2.0],
            ],
        )
        .unwrap();
        match independent_components(&p, &mask) {
            Err(TensorError::MaskInconsistent { defect, .. }) => {
                assert!((defect - 0.1).abs() < 1e-15);
            }
            other => panic!("expected MaskInconsistent, got {other:?}"),
        }
    }

    #[test]
    fn mask_kind_mismatch_is_rejected() {
        let mask = SymmetryMask::builtin(TensorKind::Dielectric, CrystalSystem::Cubic).unwrap();
        let p = TensorProperty::zeros(TensorKind::Piezoelectric);
        assert!(matches!(
            apply_mask(&p, &mask),
            Err(TensorError::KindMismatch { .. })
        ));
    }

    #[test]
    fn cubic_masked_tensors_are_invariant_under_cubic_generators() {
        let rz90 =
            OrthogonalMatrix::new([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let cyclic =
            OrthogonalMatrix::new([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();

        let mask = SymmetryMask::builtin(TensorKind::Dielectric, CrystalSystem::Cubic).unwrap();
        let eps = voigt_decode(&reconstruct_from_independent(&[2.357], &mask).unwrap());
        for g in [&rz90, &cyclic] {
            assert!(transform(&eps, g).max_abs_diff(&eps).unwrap() < 1e-10);
        }

        let mask = SymmetryMask::builtin(TensorKind::Elastic, CrystalSystem::Cubic).unwrap();
        let c = voigt_decode(&reconstruct_from_independent(&[215.3, 144.6, 98.2], &mask).unwrap());
        for g in [&rz90, &cyclic] {
            assert!(transform(&c, g).max_abs_diff(&c).unwrap() < 1e-10);
        }
    }

    #[test]
    fn mask_json_roundtrip_and_validation() {
        // Untabulated system supplied as a user mask file: orthorhombic
        // elastic with nine independent components.
        let json = r#"{
            "kind": "elastic",
            "crystal_system": "orthorhombic",
            "pattern": [
                [1, 2, 3, 0, 0, 0],
                [2, 4, 5, 0, 0, 0],
                [3, 5, 6, 0, 0, 0],
                [0, 0, 0, 7, 0, 0],
                [0, 0, 0, 0, 8, 0],
                [0, 0, 0, 0, 0, 9]
            ]
        }"#;
        let mask = SymmetryMask::from_json_str(json).unwrap();
        assert_eq!(mask.kind(), TensorKind::Elastic);
        assert_eq!(mask.crystal_system(), CrystalSystem::Orthorhombic);
        assert_eq!(mask.independent_count(), 9);
        let serialized = serde_json::to_string(&mask).unwrap();
        assert_eq!(SymmetryMask::from_json_str(&serialized).unwrap(), mask);

        // Component index 2 missing.
        let gap = SymmetryMask::new(
            TensorKind::Dielectric,
            CrystalSystem::Cubic,
            vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 3]],
        );
        assert!(matches!(gap, Err(TensorError::InvalidMask { .. })));

        // Asymmetric pattern for a symmetric Voigt matrix.
        let asym = SymmetryMask::new(
            TensorKind::Dielectric,
            CrystalSystem::Triclinic,
            vec![vec![1, 2, 0], vec![0, 3, 0], vec![0, 0, 4]],
        );
        assert!(matches!(asym, Err(TensorError::InvalidMask { .. })));

        // Wrong shape.
        let shape = SymmetryMask::new(
            TensorKind::Piezoelectric,
            CrystalSystem::Triclinic,
            vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]],
        );
        assert!(matches!(shape, Err(TensorError::InvalidMask { .. })));
    }

    #[test]
    fn metrics_match_direct_arithmetic() {
        let label = TensorProperty::new(
            TensorKind::Dielectric,
            vec![
                vec![2.0, 0.0, 0.0],
                vec![0.0, 2.0, 0.0],
                vec![0.0, 0.0, 2.0],
            ],
        )
        .unwrap();
        let pred = TensorProperty::new(
            TensorKind::Dielectric,
            vec![
                vec![2.2, 0.0, 0.0],
                vec![0.0, 2.2, 0.0],
                vec![0.0, 0.0, 2.2],
            ],
        )
        .unwrap();

        assert_eq!(fnorm_error(&label, &label).unwrap(), 0.0);
        assert!(ewt(&label, &label, 0.0).unwrap());

        // ‖pred−label‖/‖label‖ = 0.1 exactly.
        assert!(ewt(&pred, &label, 0.25).unwrap());
        assert!(ewt(&pred, &label, 0.10).unwrap());
        assert!(!ewt(&pred, &label, 0.05).unwrap());

        let zero = TensorProperty::zeros(TensorKind::Dielectric);
        assert!(matches!(
            ewt(&pred, &zero, 0.25),
            Err(TensorError::ZeroLabelNorm)
        ));
        assert!(matches!(
            fnorm_error(&pred, &TensorProperty::zeros(TensorKind::Elastic)),
            Err(TensorError::KindMismatch { .. })
        ));
    }

    #[test]
    fn property_validation_rejects_bad_shapes_and_asymmetry() {
        let bad_shape = TensorProperty::new(TensorKind::Elastic, vec![vec![0.0; 3]; 3]);
        assert!(matches!(bad_shape, Err(TensorError::ShapeMismatch { .. })));

        let asym = TensorProperty::new(
            TensorKind::Dielectric,
            vec![
                vec![1.0, 0.1, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        );
        assert!(matches!(asym, Err(TensorError::SymmetryViolation { .. })));
    }

    #[test]
    fn flat_roundtrip_symmetrizes_head_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        for kind in KINDS {
            let p = random_symmetric_voigt(kind, &mut rng);
            let flat = p.to_flat();
            assert_eq!(flat.len(), kind.flat_len());
            let back = TensorProperty::from_flat(kind, &flat).unwrap();
            assert_eq!(back.voigt, p.voigt);
        }
        // Dielectric heads emit the six unique entries in Voigt order.
        assert_eq!(TensorKind::Dielectric.flat_len(), 6);
        let p = TensorProperty::from_flat(
            TensorKind::Dielectric,
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        assert_eq!(p.voigt[1][2], 4.0);
        assert_eq!(p.voigt[2][0], 5.0);
        assert_eq!(p.voigt[0][1], 6.0);
        // Unconstrained 36-vector lands on the symmetric subspace.
        let raw: Vec<f64> = (0..36).map(|i| i as f64).collect();
        let p = TensorProperty::from_flat(TensorKind::Elastic, &raw).unwrap();
        assert!(p.validate().is_ok());
        assert_eq!(p.voigt[0][1], (1.0 + 6.0) / 2.0);
    }
}
