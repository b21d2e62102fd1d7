//! R&R module: canonicalize a lattice by polar decomposition (`L = QH` with
//! `H` symmetric positive-definite), plus the QR alternative used by the
//! robustness comparison and `Q₀H` re-canonicalization.
//!
//! `H = (LᵀL)^{1/2}` is invariant under the lattice action `L → gL` while
//! `Q` is equivariant (`Q(gL) = g·Q(L)`), which is the entire source of the
//! pipeline's O(3) equivariance. `Q` keeps its natural determinant: a
//! left-handed lattice canonicalizes through a reflection, and forcing
//! `det = +1` would break uniqueness.

use crate::crystal::{Crystal, CrystalError, OrthogonalMatrix};
use crate::linalg;
use crate::tol;
use crate::Mat3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CanonError {
    #[error("lattice is rank deficient (smallest singular value {sigma_min:e} below tolerance {tol:e}); 2D/degenerate structures have no unique canonical form")]
    RankDeficientLattice { sigma_min: f64, tol: f64 },
    #[error(transparent)]
    Crystal(#[from] CrystalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonMethod {
    Polar,
    Qr,
}

impl std::fmt::Display for CanonMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CanonMethod::Polar => write!(f, "polar"),
            CanonMethod::Qr => write!(f, "qr"),
        }
    }
}

impl std::str::FromStr for CanonMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "polar" => Ok(CanonMethod::Polar),
            "qr" => Ok(CanonMethod::Qr),
            other => Err(format!(
                "unknown canonicalization method {other:?} (expected polar or qr)"
            )),
        }
    }
}

/// Factorization `L = q · h` of a lattice into an orthogonal registration
/// matrix and a canonical lattice (`h` SPD for `Polar`, upper-triangular
/// with positive diagonal for `Qr`).
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalDecomposition {
    pub q: OrthogonalMatrix,
    pub h: Mat3,
    pub method: CanonMethod,
}

fn check_rank(lattice: &Mat3) -> Result<linalg::Svd<f64>, CanonError> {
    let f = linalg::svd(lattice);
    let tol = tol::RANK_REL * f.s[0];
    if !(f.s[2] >= tol) || f.s[0] == 0.0 {
        return Err(CanonError::RankDeficientLattice {
            sigma_min: f.s[2],
            tol,
        });
    }
    Ok(f)
}

/// Unique polar factorization `L = QH` via the SVD route:
/// `L = UΣVᵀ → Q = UVᵀ, H = VΣVᵀ`.
pub fn polar_decompose(lattice: &Mat3) -> Result<CanonicalDecomposition, CanonError> {
    let f = check_rank(lattice)?;
    let q = linalg::matmul(&f.u, &linalg::transpose(&f.v));
    // H = V Σ Vᵀ, assembled symmetrically so h = hᵀ holds bitwise.
    let mut h = linalg::zero_matrix();
    for i in 0..3 {
        for j in i..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += f.v[i][k] * f.s[k] * f.v[j][k];
            }
            h[i][j] = s;
            h[j][i] = s;
        }
    }
    Ok(CanonicalDecomposition {
        q: OrthogonalMatrix::new(q)?,
        h,
        method: CanonMethod::Polar,
    })
}

/// QR factorization `L = QR` with positive diagonal on `R`, the comparison
/// canonicalization for the discontinuity study.
pub fn qr_decompose(lattice: &Mat3) -> Result<CanonicalDecomposition, CanonError> {
    check_rank(lattice)?;
    let (q, r) = linalg::qr(lattice);
    Ok(CanonicalDecomposition {
        q: OrthogonalMatrix::new(q)?,
        h: r,
        method: CanonMethod::Qr,
    })
}

pub fn decompose(lattice: &Mat3, method: CanonMethod) -> Result<CanonicalDecomposition, CanonError> {
    match method {
        CanonMethod::Polar => polar_decompose(lattice),
        CanonMethod::Qr => qr_decompose(lattice),
    }
}

/// Shift to another canonical form `Q₀H`: `h' = q₀·h`, `q' = q·q₀ᵀ`, so the
/// product still reconstructs the original lattice.
pub fn recanonicalize(
    decomp: &CanonicalDecomposition,
    q0: &OrthogonalMatrix,
) -> CanonicalDecomposition {
    CanonicalDecomposition {
        q: decomp.q.compose(&q0.transpose()),
        h: linalg::matmul(q0.matrix(), &decomp.h),
        method: decomp.method,
    }
}

/// Canonical form of a crystal: `(A, F, H)` plus the registration matrix
/// `Q` with `act(Q, canonical) = original`.
pub fn canonical_form(
    crystal: &Crystal,
    method: CanonMethod,
) -> Result<(Crystal, OrthogonalMatrix), CanonError> {
    let d = decompose(&crystal.lattice, method)?;
    let canonical = Crystal {
        id: crystal.id.clone(),
        species: crystal.species.clone(),
        frac_coords: crystal.frac_coords.clone(),
        lattice: d.h,
    };
    Ok((canonical, d.q))
}
