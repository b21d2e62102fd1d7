//! Crystal data model, coordinate conversions, and the O(3) group action.
//!
//! A crystal is `M = (A, F, L)`: species `A`, fractional coordinates `F`
//! (each row in `[0,1)`), and a full-rank lattice matrix `L` whose rows are
//! the lattice vectors in Å. The group acts on the lattice only:
//! `g·M = (A, F, Q·L)` — fractional coordinates are invariant.

use crate::linalg;
use crate::tol;
use crate::{Mat3, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CrystalError {
    #[error("lattice is rank deficient (smallest singular value {sigma_min:e} below tolerance {tol:e})")]
    RankDeficientLattice { sigma_min: f64, tol: f64 },
    #[error("fractional coordinate out of range at atom {atom}: {value}")]
    CoordinateOutOfRange { atom: usize, value: f64 },
    #[error("crystal has no atoms")]
    EmptyCell,
    #[error("atomic number {z} outside 1..=118 at atom {atom}")]
    InvalidSpecies { atom: usize, z: u16 },
    #[error("species list length {species} does not match coordinate rows {coords}")]
    LengthMismatch { species: usize, coords: usize },
    #[error("matrix is not orthogonal (max |QᵀQ − I| = {defect:e}, |det| − 1 = {det_defect:e})")]
    NotOrthogonal { defect: f64, det_defect: f64 },
}

/// Validated element of O(3): `QᵀQ = I` within `tol::ORTH`, `|det Q| = 1`.
/// Reflections (`det = −1`) are legitimate members.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mat3", into = "Mat3")]
pub struct OrthogonalMatrix {
    q: Mat3,
}

impl OrthogonalMatrix {
    pub fn new(q: Mat3) -> Result<Self, CrystalError> {
        let defect = linalg::orthogonality_defect(&q);
        let det_defect = (linalg::det(&q).abs() - 1.0).abs();
        if defect > tol::ORTH || det_defect > tol::ORTH {
            return Err(CrystalError::NotOrthogonal { defect, det_defect });
        }
        Ok(Self { q })
    }

    pub fn identity() -> Self {
        Self {
            q: linalg::identity(),
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.q
    }

    pub fn det(&self) -> f64 {
        linalg::det(&self.q)
    }

    /// The inverse element (transpose of an orthogonal matrix).
    pub fn transpose(&self) -> Self {
        Self {
            q: linalg::transpose(&self.q),
        }
    }

    /// Group composition `self · other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            q: linalg::matmul(&self.q, &other.q),
        }
    }
}

impl TryFrom<Mat3> for OrthogonalMatrix {
    type Error = CrystalError;
    fn try_from(m: Mat3) -> Result<Self, Self::Error> {
        Self::new(m)
    }
}

impl From<OrthogonalMatrix> for Mat3 {
    fn from(o: OrthogonalMatrix) -> Mat3 {
        o.q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crystal {
    pub id: String,
    pub species: Vec<u8>,
    pub frac_coords: Vec<Vec3>,
    pub lattice: Mat3,
}

/// Canonical periodic wrap of a fractional coordinate into `[0,1)`.
fn wrap_frac(x: f64) -> f64 {
    let w = x - x.floor();
    if w >= 1.0 {
        w - 1.0
    } else {
        w
    }
}

/// Smallest/largest singular value of a lattice for the shared rank policy.
fn singular_extremes(lattice: &Mat3) -> (f64, f64) {
    let f = linalg::svd(lattice);
    (f.s[2], f.s[0])
}

impl Crystal {
    /// Construct a crystal, wrapping fractional coordinates into `[0,1)` and
    /// enforcing every type invariant.
    pub fn new(
        id: impl Into<String>,
        species: Vec<u8>,
        frac_coords: Vec<Vec3>,
        lattice: Mat3,
    ) -> Result<Self, CrystalError> {
        let frac_coords = frac_coords
            .into_iter()
            .map(|f| [wrap_frac(f[0]), wrap_frac(f[1]), wrap_frac(f[2])])
            .collect();
        let c = Self {
            id: id.into(),
            species,
            frac_coords,
            lattice,
        };
        c.validate()?;
        Ok(c)
    }

    /// Check every invariant on the stored representation (used both by the
    /// constructor and on deserialized records, which bypass wrapping).
    pub fn validate(&self) -> Result<(), CrystalError> {
        if self.species.is_empty() || self.frac_coords.is_empty() {
            return Err(CrystalError::EmptyCell);
        }
        if self.species.len() != self.frac_coords.len() {
            return Err(CrystalError::LengthMismatch {
                species: self.species.len(),
                coords: self.frac_coords.len(),
            });
        }
        for (atom, &z) in self.species.iter().enumerate() {
            if z == 0 || z > 118 {
                return Err(CrystalError::InvalidSpecies { atom, z: z as u16 });
            }
        }
        for (atom, f) in self.frac_coords.iter().enumerate() {
            for &x in f {
                if !(0.0..1.0).contains(&x) {
                    return Err(CrystalError::CoordinateOutOfRange { atom, value: x });
                }
            }
        }
        let (sigma_min, sigma_max) = singular_extremes(&self.lattice);
        let tol = tol::RANK_REL * sigma_max;
        if !(sigma_min >= tol) || sigma_max == 0.0 {
            return Err(CrystalError::RankDeficientLattice { sigma_min, tol });
        }
        Ok(())
    }

    pub fn n_atoms(&self) -> usize {
        self.species.len()
    }
}

/// Cartesian positions, row `i` = `fᵢ · L` (row-vector convention).
pub fn frac_to_cart(crystal: &Crystal) -> Vec<Vec3> {
    crystal
        .frac_coords
        .iter()
        .map(|f| linalg::row_times_mat(f, &crystal.lattice))
        .collect()
}

/// Invert `frac_to_cart`: solve `F = X · L⁻¹` and wrap rows into `[0,1)`.
pub fn cart_to_frac(x: &[Vec3], lattice: &Mat3) -> Result<Vec<Vec3>, CrystalError> {
    let (sigma_min, sigma_max) = singular_extremes(lattice);
    let tol = tol::RANK_REL * sigma_max;
    if !(sigma_min >= tol) || sigma_max == 0.0 {
        return Err(CrystalError::RankDeficientLattice { sigma_min, tol });
    }
    let inv = linalg::inverse(lattice).expect("full-rank lattice must invert");
    Ok(x.iter()
        .map(|row| {
            let f = linalg::row_times_mat(row, &inv);
            [wrap_frac(f[0]), wrap_frac(f[1]), wrap_frac(f[2])]
        })
        .collect())
}

/// The O(3) action `g·M = (A, F, Q·L)`: species and fractional coordinates
/// are carried over unchanged, the lattice is left-multiplied by `Q`.
pub fn act(g: &OrthogonalMatrix, crystal: &Crystal) -> Crystal {
    Crystal {
        id: crystal.id.clone(),
        species: crystal.species.clone(),
        frac_coords: crystal.frac_coords.clone(),
        lattice: linalg::matmul(g.matrix(), &crystal.lattice),
    }
}
