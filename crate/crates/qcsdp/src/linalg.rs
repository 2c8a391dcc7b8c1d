//! Dense complex linear algebra kernels: operator norms, PSD square roots,
//! Gram factorizations, subspace projectors, the commutator-power and
//! square-root-closeness inequality checkers, and the Voiculescu pair.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Dimension threshold above which `operator_norm` switches from a full SVD
/// to power iteration on `M† M`.
const SVD_DIM_LIMIT: usize = 512;

/// Commutator `[a, b] = ab - ba`.
pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

/// Deviation from Hermitian symmetry, `max |m - m†|` entrywise.
pub fn hermitian_deviation(m: &CMatrix) -> f64 {
    let adj = m.adjoint();
    (m - adj).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn require_hermitian(m: &CMatrix, tol: f64) -> Result<()> {
    let dev = hermitian_deviation(m);
    if dev > tol {
        return Err(Error::NotHermitian(dev));
    }
    Ok(())
}

/// Largest singular value. Full SVD up to dimension 512, power iteration on
/// `M† M` above that (convergence tolerance 1e-12).
pub fn operator_norm(m: &CMatrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows().max(m.ncols()) <= SVD_DIM_LIMIT {
        m.singular_values().iter().cloned().fold(0.0, f64::max)
    } else {
        power_iteration_norm(m, 1e-12, 100_000)
    }
}

/// Power iteration on `M† M`; returns the square root of its top eigenvalue.
fn power_iteration_norm(m: &CMatrix, tol: f64, max_iter: usize) -> f64 {
    let n = m.ncols();
    // Deterministic start with no special alignment.
    let mut v = CVector::from_fn(n, |i, _| {
        Complex64::new(1.0 + (i as f64 * 0.7391).sin(), (i as f64 * 1.173).cos())
    });
    v /= Complex64::new(v.norm(), 0.0);
    let mut lambda = 0.0f64;
    for _ in 0..max_iter {
        let w = m.adjoint() * (m * &v);
        let next = w.norm();
        if next == 0.0 {
            return 0.0;
        }
        v = w / Complex64::new(next, 0.0);
        if (next - lambda).abs() <= tol * next.max(1.0) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

/// Trace norm (sum of singular values).
pub fn trace_norm(m: &CMatrix) -> f64 {
    m.singular_values().iter().sum()
}

/// Eigendecomposition of a Hermitian matrix; eigenvalues ascending.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let se = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..se.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| se.eigenvalues[i].partial_cmp(&se.eigenvalues[j]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let vecs = CMatrix::from_fn(m.nrows(), m.ncols(), |r, c| se.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Hermitian PSD square root. Eigenvalues in `[-1e-9, 0)` are clamped to
/// zero; anything lower is rejected.
pub fn psd_sqrt(m: &CMatrix) -> Result<CMatrix> {
    require_hermitian(m, 1e-10)?;
    let (vals, vecs) = hermitian_eigen(m);
    if let Some(&min) = vals.first() {
        if min < -1e-9 {
            return Err(Error::NotPsd(min));
        }
    }
    let d = m.nrows();
    let mut out = CMatrix::zeros(d, d);
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= 0.0 {
            continue;
        }
        let col = vecs.column(k);
        let s = Complex64::new(lam.sqrt(), 0.0);
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += s * col[i] * col[j].conj();
            }
        }
    }
    Ok(out)
}

/// Fractional power `m^r` of a Hermitian PSD matrix, small negatives clamped.
pub fn psd_power(m: &CMatrix, r: f64) -> Result<CMatrix> {
    require_hermitian(m, 1e-10)?;
    let (vals, vecs) = hermitian_eigen(m);
    if let Some(&min) = vals.first() {
        if min < -1e-9 {
            return Err(Error::NotPsd(min));
        }
    }
    let d = m.nrows();
    let mut out = CMatrix::zeros(d, d);
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= 0.0 {
            continue;
        }
        let s = Complex64::new(lam.powf(r), 0.0);
        let col = vecs.column(k);
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += s * col[i] * col[j].conj();
            }
        }
    }
    Ok(out)
}

/// Gram-vector factorization of a PSD matrix.
#[derive(Debug, Clone)]
pub struct Factorization {
    /// One vector per row/column index of the input; length = `rank`.
    pub vectors: Vec<CVector>,
    pub rank: usize,
    /// Absolute eigenvalue cutoff that was applied (`clamp * lambda_max`).
    pub clamp_threshold: f64,
}

/// Factor a Hermitian PSD matrix into Gram vectors via eigendecomposition.
/// Eigenvalues below `clamp * lambda_max` are dropped.
pub fn gram_vectors(gamma: &CMatrix, clamp: f64) -> Result<Factorization> {
    require_hermitian(gamma, 1e-8)?;
    let n = gamma.nrows();
    let (vals, vecs) = hermitian_eigen(gamma);
    let lam_max = vals.last().cloned().unwrap_or(0.0).max(0.0);
    if let Some(&min) = vals.first() {
        if min < -1e-7 * lam_max.max(1.0) {
            return Err(Error::NotPsd(min));
        }
    }
    let cutoff = clamp * lam_max;
    let kept: Vec<usize> = (0..n).filter(|&k| vals[k] > cutoff && vals[k] > 0.0).collect();
    let rank = kept.len();
    let mut vectors = Vec::with_capacity(n);
    for s in 0..n {
        let mut v = CVector::zeros(rank);
        for (out_k, &k) in kept.iter().enumerate() {
            v[out_k] = Complex64::new(vals[k].sqrt(), 0.0) * vecs[(s, k)].conj();
        }
        vectors.push(v);
    }
    Ok(Factorization { vectors, rank, clamp_threshold: cutoff })
}

/// Orthogonal projector onto the span of the given vectors, all of length
/// `dim`. Singular directions below `1e-8 * sigma_max` are discarded; an
/// empty list yields the zero projector.
pub fn subspace_projector(dim: usize, vectors: &[CVector]) -> CMatrix {
    if vectors.is_empty() {
        return CMatrix::zeros(dim, dim);
    }
    let mut a = CMatrix::zeros(dim, vectors.len());
    for (j, v) in vectors.iter().enumerate() {
        assert_eq!(v.len(), dim, "subspace_projector: inconsistent vector length");
        a.set_column(j, v);
    }
    let svd = a.svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = 1e-8 * smax;
    let mut p = CMatrix::zeros(dim, dim);
    for k in 0..svd.singular_values.len() {
        if svd.singular_values[k] <= cutoff {
            continue;
        }
        let col = u.column(k);
        for i in 0..dim {
            for j in 0..dim {
                p[(i, j)] += col[i] * col[j].conj();
            }
        }
    }
    p
}

/// Result of checking `||[A, B^r]|| <= 2 ||B||^(1-r) ||[A, B]||^r`.
#[derive(Debug, Clone, Copy)]
pub struct ComPowerReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Check the commutator-power inequality for Hermitian PSD `a`, `b` and
/// exponent `0 <= r <= 1`.
pub fn check_com_power_bound(a: &CMatrix, b: &CMatrix, r: f64) -> Result<ComPowerReport> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidInput(format!("exponent r={r} outside [0,1]")));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!("{}x{} vs {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols())));
    }
    let b_pow = psd_power(b, r)?;
    let lhs = operator_norm(&commutator(a, &b_pow));
    let rhs = 2.0 * operator_norm(b).powf(1.0 - r) * operator_norm(&commutator(a, b)).powf(r);
    Ok(ComPowerReport { lhs, rhs, holds: lhs <= rhs + 1e-9 })
}

/// Constant in the square-closeness bound `2e + C_SQ * delta^(1/8) * M`.
pub const SQ_BOUND_CONST: f64 = 12.0;

/// Constant in the trace-norm bound `2 sqrt(2e) + C * delta^(1/16) * sqrt(M)`,
/// obtained by pushing the square bound through Cauchy-Schwarz:
/// `2 sqrt(2e + 12 d^(1/8) M) <= 2 sqrt(2e) + 2 sqrt(12) d^(1/16) sqrt(M)`.
pub const SQ_BOUND_TRACE_CONST: f64 = 6.928203230275509; // 2 sqrt(12)

/// Measured and bound quantities for the two square-root closeness
/// inequalities of near-commuting POVM families.
#[derive(Debug, Clone)]
pub struct SqBoundReport {
    pub eps: f64,
    pub delta: f64,
    pub families: usize,
    pub sq_lhs: f64,
    pub sq_rhs: f64,
    pub sq_holds: bool,
    pub trace_lhs: f64,
    pub trace_rhs: f64,
    pub trace_holds: bool,
}

/// Check the square-root closeness bounds for sub-POVM families `(A_i)`,
/// `(B_i)` against a density matrix `rho`.
pub fn check_sq_bound(a_fam: &[CMatrix], b_fam: &[CMatrix], rho: &CMatrix) -> Result<SqBoundReport> {
    if a_fam.len() != b_fam.len() || a_fam.is_empty() {
        return Err(Error::DimensionMismatch("family lengths differ or empty".into()));
    }
    let d = rho.nrows();
    require_hermitian(rho, 1e-9)?;
    for fam in [a_fam, b_fam] {
        let mut sum = CMatrix::zeros(d, d);
        for m in fam {
            if m.nrows() != d {
                return Err(Error::DimensionMismatch("family element vs rho".into()));
            }
            require_hermitian(m, 1e-9)?;
            sum += m;
        }
        let excess = hermitian_eigen(&sum).0.last().cloned().unwrap_or(0.0) - 1.0;
        if excess > 1e-9 {
            return Err(Error::InvalidInput(format!("family sum exceeds identity by {excess:.3e}")));
        }
    }
    let m_count = a_fam.len();
    let sqrt_a: Vec<CMatrix> = a_fam.iter().map(psd_sqrt).collect::<Result<_>>()?;
    let sqrt_b: Vec<CMatrix> = b_fam.iter().map(psd_sqrt).collect::<Result<_>>()?;

    let mut completeness = 0.0;
    for i in 0..m_count {
        completeness += (&a_fam[i] * &sqrt_b[i] * rho * &sqrt_b[i]).trace().re;
    }
    let eps = 1.0 - completeness;
    let mut delta = 0.0f64;
    for a in a_fam {
        for b in b_fam {
            delta = delta.max(operator_norm(&commutator(a, b)));
        }
    }

    let mut sq_lhs = 0.0;
    for i in 0..m_count {
        let diff = &sqrt_a[i] - &sqrt_b[i];
        sq_lhs += (&diff * &diff * rho).trace().re;
    }
    let sq_rhs = 2.0 * eps.max(0.0) + SQ_BOUND_CONST * delta.powf(0.125) * m_count as f64;

    let mut acc = CMatrix::zeros(d, d);
    for i in 0..m_count {
        acc += &sqrt_a[i] * rho * &sqrt_a[i];
        acc -= &sqrt_b[i] * rho * &sqrt_b[i];
    }
    let trace_lhs = trace_norm(&acc);
    let trace_rhs = 2.0 * (2.0 * eps.max(0.0)).sqrt()
        + SQ_BOUND_TRACE_CONST * delta.powf(1.0 / 16.0) * (m_count as f64).sqrt();

    Ok(SqBoundReport {
        eps,
        delta,
        families: m_count,
        sq_lhs,
        sq_rhs,
        sq_holds: sq_lhs <= sq_rhs + 1e-9,
        trace_lhs,
        trace_rhs,
        trace_holds: trace_lhs <= trace_rhs + 1e-9,
    })
}

/// The Voiculescu pair in dimension `d`: a cyclic shift and the diagonal of
/// d-th roots of unity. Their commutator has operator norm `2 sin(pi/d)`
/// yet no exactly commuting pair is nearby.
pub fn voiculescu_pair(d: usize) -> Result<(CMatrix, CMatrix)> {
    if d < 2 {
        return Err(Error::InvalidInput(format!("voiculescu pair needs d >= 2, got {d}")));
    }
    let mut u1 = CMatrix::zeros(d, d);
    for j in 0..d {
        u1[(j, (j + 1) % d)] = Complex64::new(1.0, 0.0);
    }
    let mut u2 = CMatrix::zeros(d, d);
    for k in 0..d {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / d as f64;
        u2[(k, k)] = Complex64::new(theta.cos(), theta.sin());
    }
    Ok((u1, u2))
}

/// Hermitian quadratures `M0 = (U + U†)/2`, `M1 = -i (U - U†)/2` of a unitary.
pub fn hermitian_quadratures(u: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    let d = u.nrows();
    let dev = operator_norm(&(u.adjoint() * u - CMatrix::identity(d, d)));
    if dev > 1e-10 {
        return Err(Error::InvalidInput(format!("matrix not unitary (deviation {dev:.3e})")));
    }
    let adj = u.adjoint();
    let half = Complex64::new(0.5, 0.0);
    let m0 = (u + &adj) * half;
    let m1 = (u - &adj) * Complex64::new(0.0, -0.5);
    Ok((m0, m1))
}

/// Matrix with independent entries uniform on the complex square
/// `[-1,1] x [-1,1]i`; deterministic given the generator state.
pub fn random_cmatrix(rng: &mut impl rand::Rng, d: usize) -> CMatrix {
    CMatrix::from_fn(d, d, |_, _| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    })
}

/// Random PSD matrix `G G^dagger` built from [`random_cmatrix`].
pub fn random_psd(rng: &mut impl rand::Rng, d: usize) -> CMatrix {
    let m = random_cmatrix(rng, d);
    &m * m.adjoint()
}
