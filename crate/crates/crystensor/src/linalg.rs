//! Small dense 3-vector / 3×3-matrix kernel, generic over the scalar type.
//!
//! Everything downstream (lattices, rotations, tensor transforms) runs on
//! these fixed-size arrays; the crate root re-exports `f64` aliases. The
//! row-vector convention applies throughout: a lattice matrix stores the
//! lattice vectors as rows and Cartesian positions are `frac · L`.

use num_traits::{Float, FromPrimitive};

/// Scalar types accepted by the math kernel (`f32`, `f64`).
pub trait Real: Float + FromPrimitive + std::fmt::Debug + Default + 'static {}
impl<T> Real for T where T: Float + FromPrimitive + std::fmt::Debug + Default + 'static {}

pub type Vector3<T> = [T; 3];
pub type Matrix3<T> = [[T; 3]; 3];

pub fn zero_matrix<T: Real>() -> Matrix3<T> {
    [[T::zero(); 3]; 3]
}

pub fn identity<T: Real>() -> Matrix3<T> {
    let mut m = zero_matrix();
    for i in 0..3 {
        m[i][i] = T::one();
    }
    m
}

pub fn transpose<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let mut t = zero_matrix();
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn matmul<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> Matrix3<T> {
    let mut c = zero_matrix();
    for i in 0..3 {
        for j in 0..3 {
            let mut s = T::zero();
            for k in 0..3 {
                s = s + a[i][k] * b[k][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn mat_add<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> Matrix3<T> {
    let mut c = zero_matrix();
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][j] + b[i][j];
        }
    }
    c
}

pub fn mat_sub<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> Matrix3<T> {
    let mut c = zero_matrix();
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][j] - b[i][j];
        }
    }
    c
}

pub fn mat_scale<T: Real>(a: &Matrix3<T>, s: T) -> Matrix3<T> {
    let mut c = zero_matrix();
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][j] * s;
        }
    }
    c
}

/// Row vector times matrix: `(v M)_j = Σ_k v_k M_kj`.
///
/// This is the Cartesian-position map under the row-vector convention.
pub fn row_times_mat<T: Real>(v: &Vector3<T>, m: &Matrix3<T>) -> Vector3<T> {
    let mut r = [T::zero(); 3];
    for j in 0..3 {
        let mut s = T::zero();
        for k in 0..3 {
            s = s + v[k] * m[k][j];
        }
        r[j] = s;
    }
    r
}

pub fn vec_add<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> Vector3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vec_sub<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> Vector3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vec_scale<T: Real>(a: &Vector3<T>, s: T) -> Vector3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm<T: Real>(v: &Vector3<T>) -> T {
    dot(v, v).sqrt()
}

pub fn cross<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> Vector3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn det<T: Real>(m: &Matrix3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse via the adjugate; `None` when the determinant vanishes.
pub fn inverse<T: Real>(m: &Matrix3<T>) -> Option<Matrix3<T>> {
    let d = det(m);
    if d == T::zero() || !d.is_finite() {
        return None;
    }
    let inv_d = T::one() / d;
    let mut inv = zero_matrix();
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_d;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_d;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_d;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_d;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_d;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_d;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_d;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_d;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_d;
    Some(inv)
}

pub fn frobenius<T: Real>(m: &Matrix3<T>) -> T {
    let mut s = T::zero();
    for row in m {
        for &x in row {
            s = s + x * x;
        }
    }
    s.sqrt()
}

pub fn max_abs_diff<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    let mut m = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            let d = (a[i][j] - b[i][j]).abs();
            if d > m {
                m = d;
            }
        }
    }
    m
}

/// Largest absolute deviation of `QᵀQ` from the identity.
pub fn orthogonality_defect<T: Real>(q: &Matrix3<T>) -> T {
    let qtq = matmul(&transpose(q), q);
    max_abs_diff(&qtq, &identity())
}

/// Singular value decomposition `M = U · diag(s) · Vᵀ` of a 3×3 matrix.
///
/// Singular values are sorted descending and non-negative; `U` and `V` are
/// orthogonal with `det(U)·det(V) = sign(det(M))` (no determinant fix-up).
#[derive(Debug, Clone)]
pub struct Svd<T> {
    pub u: Matrix3<T>,
    pub s: Vector3<T>,
    pub v: Matrix3<T>,
}

/// One-sided Jacobi SVD: orthogonalize the columns of `M` by right-hand
/// Givens rotations. Quadratically convergent and accurate for the small
/// condition numbers a lattice matrix can carry.
pub fn svd<T: Real>(m: &Matrix3<T>) -> Svd<T> {
    let mut b = *m;
    let mut v = identity::<T>();
    let eps = T::epsilon();
    for _ in 0..60 {
        let mut off = T::zero();
        for p in 0..2 {
            for q in (p + 1)..3 {
                let mut app = T::zero();
                let mut aqq = T::zero();
                let mut apq = T::zero();
                for i in 0..3 {
                    app = app + b[i][p] * b[i][p];
                    aqq = aqq + b[i][q] * b[i][q];
                    apq = apq + b[i][p] * b[i][q];
                }
                let scale = (app * aqq).sqrt();
                if apq.abs() <= eps * scale || scale == T::zero() {
                    continue;
                }
                off = off.max(apq.abs() / scale);
                // Jacobi rotation zeroing the (p,q) entry of the column Gram matrix.
                let tau = (aqq - app) / (apq + apq);
                let t = {
                    let sign = if tau >= T::zero() { T::one() } else { -T::one() };
                    sign / (tau.abs() + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..3 {
                    let bp = b[i][p];
                    let bq = b[i][q];
                    b[i][p] = c * bp - s * bq;
                    b[i][q] = s * bp + c * bq;
                    let vp = v[i][p];
                    let vq = v[i][q];
                    v[i][p] = c * vp - s * vq;
                    v[i][q] = s * vp + c * vq;
                }
            }
        }
        if off == T::zero() {
            break;
        }
    }

    let mut s = [T::zero(); 3];
    let mut u = zero_matrix::<T>();
    let mut order = [0usize, 1, 2];
    for k in 0..3 {
        let mut n = T::zero();
        for i in 0..3 {
            n = n + b[i][k] * b[i][k];
        }
        s[k] = n.sqrt();
    }
    order.sort_by(|&a, &bb| s[bb].partial_cmp(&s[a]).unwrap());
    let sorted_s = [s[order[0]], s[order[1]], s[order[2]]];
    let mut sorted_v = zero_matrix::<T>();
    for k in 0..3 {
        let src = order[k];
        for i in 0..3 {
            sorted_v[i][k] = v[i][src];
        }
        if s[src] > T::zero() {
            let inv = T::one() / s[src];
            for i in 0..3 {
                u[i][k] = b[i][src] * inv;
            }
        }
    }
    // Complete U for (near-)zero singular values so it stays orthogonal.
    let tiny = T::from_f64(1e-300).unwrap_or(T::zero());
    if sorted_s[2] <= tiny {
        let c0 = [u[0][0], u[1][0], u[2][0]];
        let c1 = [u[0][1], u[1][1], u[2][1]];
        let c2 = cross(&c0, &c1);
        for i in 0..3 {
            u[i][2] = c2[i];
        }
    }
    Svd {
        u,
        s: sorted_s,
        v: sorted_v,
    }
}

/// Householder QR factorization `M = Q R` with the diagonal of `R` forced
/// non-negative (sign flips absorbed into the columns of `Q`).
pub fn qr<T: Real>(m: &Matrix3<T>) -> (Matrix3<T>, Matrix3<T>) {
    let mut r = *m;
    let mut q = identity::<T>();
    for k in 0..2 {
        // Householder vector for column k below the diagonal.
        let mut alpha = T::zero();
        for i in k..3 {
            alpha = alpha + r[i][k] * r[i][k];
        }
        let alpha = alpha.sqrt();
        if alpha == T::zero() {
            continue;
        }
        let alpha = if r[k][k] > T::zero() { -alpha } else { alpha };
        let mut v = [T::zero(); 3];
        for i in k..3 {
            v[i] = r[i][k];
        }
        v[k] = v[k] - alpha;
        let mut vnorm2 = T::zero();
        for i in k..3 {
            vnorm2 = vnorm2 + v[i] * v[i];
        }
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::one() + T::one();
        // R ← (I − 2vvᵀ/‖v‖²) R, Q ← Q (I − 2vvᵀ/‖v‖²)
        for j in 0..3 {
            let mut s = T::zero();
            for i in k..3 {
                s = s + v[i] * r[i][j];
            }
            let f = two * s / vnorm2;
            for i in k..3 {
                r[i][j] = r[i][j] - f * v[i];
            }
        }
        for i in 0..3 {
            let mut s = T::zero();
            for j in k..3 {
                s = s + q[i][j] * v[j];
            }
            let f = two * s / vnorm2;
            for j in k..3 {
                q[i][j] = q[i][j] - f * v[j];
            }
        }
    }
    // Zero the strict lower triangle (it holds rounding dust only).
    r[1][0] = T::zero();
    r[2][0] = T::zero();
    r[2][1] = T::zero();
    // Force a non-negative diagonal.
    for k in 0..3 {
        if r[k][k] < T::zero() {
            for j in 0..3 {
                r[k][j] = -r[k][j];
                q[j][k] = -q[j][k];
            }
        }
    }
    (q, r)
}
