//! Dense interior-point solver for the moment problem. The equality
//! constraints are eliminated exactly up front (union-find over two-term
//! equalities, pins, sparse Gaussian elimination for the rest), leaving an
//! unconstrained linear matrix inequality `M(z) = A0 + sum z_k A_k >= 0`
//! whose every point satisfies the original equalities to machine
//! precision. The LMI is then solved by a primal-dual path-following
//! method with Nesterov-Todd scaling.

use nalgebra::DMatrix;
use std::collections::HashMap;
use std::fmt::Write as _;

use crate::games::{Game, Strategy};
use crate::hierarchy::{gram_from_strategy, GramSolution, MomentProblem, WordIndex};
use crate::{Error, Result};

/// Cap on the number of free variables after reduction; the Schur
/// complement is dense, so larger instances must use strategy-induced
/// feasible points instead.
const FREE_VAR_CAP: usize = 6_000;

const MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Solved,
    MaxIter,
    InfeasibleDetected,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Solved => "solved",
            Status::MaxIter => "max-iter",
            Status::InfeasibleDetected => "infeasible-detected",
        }
    }

    pub fn from_label(s: &str) -> Option<Status> {
        [Status::Solved, Status::MaxIter, Status::InfeasibleDetected]
            .into_iter()
            .find(|st| st.label() == s)
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    /// Gram-coordinate moment matrix, symmetric `dim x dim`.
    pub gamma: DMatrix<f64>,
    pub optimum: f64,
    pub gap_estimate: f64,
    pub iterations: usize,
    pub status: Status,
    pub level: usize,
    pub game_hash: String,
}

// ---------------------------------------------------------------------
// Exact reduction to an LMI.
// ---------------------------------------------------------------------

/// Entry id for the unordered pair (i, j), i <= j, of an n x n symmetric
/// matrix.
fn entry_id(i: u32, j: u32) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    let j = j as usize;
    j * (j + 1) / 2 + i as usize
}

fn entry_pair(e: usize) -> (u32, u32) {
    let mut j = ((2.0 * e as f64 + 0.25).sqrt() - 0.5) as usize;
    while j * (j + 1) / 2 > e {
        j -= 1;
    }
    while (j + 1) * (j + 2) / 2 <= e {
        j += 1;
    }
    ((e - j * (j + 1) / 2) as u32, j as u32)
}

struct UnionFind {
    parent: Vec<usize>,
    pin: Vec<Option<f64>>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
            pin: vec![None; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> Result<()> {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return Ok(());
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        match (self.pin[lo], self.pin[hi]) {
            (Some(u), Some(v)) if (u - v).abs() > 1e-12 => Err(Error::Solver(format!(
                "inconsistent pins {u} vs {v}"
            ))),
            (None, Some(v)) => {
                self.pin[lo] = Some(v);
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn set_pin(&mut self, x: usize, v: f64) -> Result<()> {
        let r = self.find(x);
        match self.pin[r] {
            Some(u) if (u - v).abs() > 1e-12 => {
                Err(Error::Solver(format!("inconsistent pins {u} vs {v}")))
            }
            _ => {
                self.pin[r] = Some(v);
                Ok(())
            }
        }
    }
}

/// Affine expression over free variables.
#[derive(Debug, Clone, Default)]
struct Affine {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl Affine {
    fn normalize(&mut self) {
        self.terms.sort_by_key(|&(v, _)| v);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(v, c) in &self.terms {
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => out.push((v, c)),
            }
        }
        out.retain(|&(_, c)| c.abs() > 1e-13);
        self.terms = out;
    }
}

/// The reduced problem: every entry of the symmetric matrix is an affine
/// function of `m` free variables.
pub(crate) struct ReducedLmi {
    pub n: usize,
    pub m: usize,
    /// Constant part, entries (i, j, c) with i <= j.
    pub a0: Vec<(u32, u32, f64)>,
    /// Basis matrices, one per free variable.
    pub basis: Vec<Vec<(u32, u32, f64)>>,
    /// Representative entry of each free variable (coefficient exactly 1).
    pub rep_entry: Vec<(u32, u32)>,
    pub f0: f64,
    pub f: Vec<f64>,
}

fn reduce(p: &MomentProblem) -> Result<ReducedLmi> {
    let n = p.dim;
    let nvars = n * (n + 1) / 2;
    let mut uf = UnionFind::new(nvars);
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();

    for c in &p.constraints {
        match c.terms.len() {
            0 => {
                if c.rhs.abs() > 1e-12 {
                    return Err(Error::Solver("empty constraint with nonzero rhs".into()));
                }
            }
            1 => {
                let (i, j, coef) = c.terms[0];
                uf.set_pin(entry_id(i, j), c.rhs / coef)?;
            }
            2 if c.rhs == 0.0 && (c.terms[0].2 + c.terms[1].2).abs() < 1e-13 => {
                let a = entry_id(c.terms[0].0, c.terms[0].1);
                let b = entry_id(c.terms[1].0, c.terms[1].1);
                uf.union(a, b)?;
            }
            _ => {
                rows.push((
                    c.terms
                        .iter()
                        .map(|&(i, j, coef)| (entry_id(i, j), coef))
                        .collect(),
                    c.rhs,
                ));
            }
        }
    }

    // Gaussian elimination over class representatives. `subst` maps an
    // eliminated representative to an affine expression in surviving ones.
    let mut subst: HashMap<usize, Affine> = HashMap::new();
    let resolve = |uf: &mut UnionFind,
                   subst: &HashMap<usize, Affine>,
                   terms: &[(usize, f64)],
                   rhs: f64|
     -> Affine {
        let mut expr = Affine {
            terms: Vec::new(),
            constant: -rhs,
        };
        let mut stack: Vec<(usize, f64)> = terms.to_vec();
        while let Some((e, c)) = stack.pop() {
            let r = uf.find(e);
            if let Some(v) = uf.pin[r] {
                expr.constant += c * v;
            } else if let Some(s) = subst.get(&r) {
                expr.constant += c * s.constant;
                for &(v, cc) in &s.terms {
                    stack.push((v, c * cc));
                }
            } else {
                expr.terms.push((r, c));
            }
        }
        expr.normalize();
        expr
    };

    for (terms, rhs) in &rows {
        let mut expr = resolve(&mut uf, &subst, terms, *rhs);
        // expr = 0 constraint.
        if expr.terms.is_empty() {
            if expr.constant.abs() > 1e-9 {
                return Err(Error::Solver(format!(
                    "inconsistent equalities (residual {:.3e})",
                    expr.constant
                )));
            }
            continue;
        }
        if expr.terms.len() == 1 {
            let (v, c) = expr.terms[0];
            uf.pin[v] = match uf.pin[v] {
                Some(u) if (u + expr.constant / c).abs() > 1e-12 => {
                    return Err(Error::Solver("inconsistent pin".into()))
                }
                other => other.or(Some(-expr.constant / c)),
            };
            continue;
        }
        // Pivot: largest coefficient, ties to the largest id.
        let (pos, &(pivot, pc)) = expr
            .terms
            .iter()
            .enumerate()
            .max_by(|a, b| {
                (a.1 .1.abs(), a.1 .0)
                    .partial_cmp(&(b.1 .1.abs(), b.1 .0))
                    .unwrap()
            })
            .unwrap();
        expr.terms.remove(pos);
        let mut rhs_expr = Affine {
            terms: expr.terms.iter().map(|&(v, c)| (v, -c / pc)).collect(),
            constant: -expr.constant / pc,
        };
        rhs_expr.normalize();
        subst.insert(pivot, rhs_expr);
    }

    // Resolve substitution chains and late pins until expressions refer
    // only to free variables.
    loop {
        let mut changed = false;
        let keys: Vec<usize> = subst.keys().copied().collect();
        for k in keys {
            let expr = subst[&k].clone();
            let needs = expr
                .terms
                .iter()
                .any(|&(v, _)| subst.contains_key(&v) || uf.pin[v].is_some());
            if needs {
                let mut flat = resolve(&mut uf, &subst, &expr.terms, -expr.constant);
                // resolve treats input as constraint lhs minus rhs; undo.
                flat.normalize();
                subst.insert(k, flat);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Collect free variables: unpinned, unsubstituted class reps that back
    // at least one matrix entry.
    let mut free_index: HashMap<usize, usize> = HashMap::new();
    let mut rep_entry: Vec<(u32, u32)> = Vec::new();
    let mut a0: Vec<(u32, u32, f64)> = Vec::new();
    let mut basis_map: Vec<Vec<(u32, u32, f64)>> = Vec::new();
    let mut entry_exprs: Vec<Affine> = Vec::with_capacity(nvars);

    for e in 0..nvars {
        let r = uf.find(e);
        let expr = if let Some(v) = uf.pin[r] {
            Affine {
                terms: vec![],
                constant: v,
            }
        } else if let Some(s) = subst.get(&r) {
            s.clone()
        } else {
            let next = free_index.len();
            let id = *free_index.entry(r).or_insert(next);
            if id == rep_entry.len() {
                rep_entry.push(entry_pair(r));
                basis_map.push(Vec::new());
            }
            Affine {
                terms: vec![(r, 1.0)],
                constant: 0.0,
            }
        };
        entry_exprs.push(expr);
    }
    let m = free_index.len();
    if m > FREE_VAR_CAP {
        return Err(Error::TooLarge(format!(
            "{m} free moments after reduction exceeds the dense-solver cap {FREE_VAR_CAP}"
        )));
    }

    for e in 0..nvars {
        let (i, j) = entry_pair(e);
        let expr = &entry_exprs[e];
        if expr.constant != 0.0 {
            a0.push((i, j, expr.constant));
        }
        for &(v, c) in &expr.terms {
            let k = free_index[&v];
            basis_map[k].push((i, j, c));
        }
    }

    let mut f0 = 0.0;
    let mut f = vec![0.0; m];
    for &(i, j, w) in &p.objective {
        let expr = &entry_exprs[entry_id(i, j)];
        f0 += w * expr.constant;
        for &(v, c) in &expr.terms {
            f[free_index[&v]] += w * c;
        }
    }

    Ok(ReducedLmi {
        n,
        m,
        a0,
        basis: basis_map,
        rep_entry,
        f0,
        f,
    })
}

// ---------------------------------------------------------------------
// Interior-point method.
// ---------------------------------------------------------------------

fn sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let se = m.clone().symmetric_eigen();
    let vals: Vec<f64> = se.eigenvalues.iter().copied().collect();
    (vals, se.eigenvectors)
}

fn sym_func(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        vals.len(),
        vals.iter().map(|&v| f(v)),
    ));
    &vecs * d * vecs.transpose()
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).0.into_iter().fold(f64::INFINITY, f64::min)
}

/// Largest step `alpha <= 1` with `X + alpha D` staying positive definite,
/// damped by 0.98.
fn pd_step(x: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
    let xinv_sqrt = sym_func(x, |v| 1.0 / v.max(1e-300).sqrt());
    let y = &xinv_sqrt * d * &xinv_sqrt;
    let lam = min_eig(&y);
    if lam >= 0.0 {
        1.0
    } else {
        (0.98 / -lam).min(1.0)
    }
}

fn sparse_to_dense(n: usize, entries: &[(u32, u32, f64)]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for &(i, j, c) in entries {
        m[(i as usize, j as usize)] += c;
        if i != j {
            m[(j as usize, i as usize)] += c;
        }
    }
    m
}

/// `Tr(A M)` for sparse symmetric `A` (entries i <= j) and dense symmetric `M`.
fn dot_sparse(a: &[(u32, u32, f64)], m: &DMatrix<f64>) -> f64 {
    let mut v = 0.0;
    for &(i, j, c) in a {
        let t = m[(i as usize, j as usize)];
        v += if i == j { c * t } else { 2.0 * c * t };
    }
    v
}

/// `Tr(Sym_pq W Sym_rs W)` where `Sym_pq` is the symmetrized unit matrix.
#[inline]
fn sym_trace(w: &DMatrix<f64>, p: usize, q: usize, r: usize, s: usize) -> f64 {
    match (p == q, r == s) {
        (true, true) => w[(p, r)] * w[(p, r)],
        (true, false) => 2.0 * w[(p, r)] * w[(p, s)],
        (false, true) => 2.0 * w[(r, p)] * w[(r, q)],
        (false, false) => {
            2.0 * (w[(q, r)] * w[(p, s)] + w[(q, s)] * w[(p, r)])
        }
    }
}

struct IpmOutcome {
    z: Vec<f64>,
    gap_estimate: f64,
    iterations: usize,
    status: Status,
}

fn run_ipm(lmi: &ReducedLmi, z0: &[f64], tol: f64) -> Result<IpmOutcome> {
    let n = lmi.n;
    let m = lmi.m;
    let a0 = sparse_to_dense(n, &lmi.a0);
    let mat_of = |z: &[f64]| -> DMatrix<f64> {
        let mut s = a0.clone();
        for (k, a) in lmi.basis.iter().enumerate() {
            let c = z[k];
            if c == 0.0 {
                continue;
            }
            for &(i, j, v) in a {
                s[(i as usize, j as usize)] += c * v;
                if i != j {
                    s[(j as usize, i as usize)] += c * v;
                }
            }
        }
        s
    };

    let b: Vec<f64> = lmi.f.iter().map(|&v| -v).collect();
    let mut z = z0.to_vec();
    let mut s = mat_of(&z) + DMatrix::identity(n, n) * 0.5;
    let mut x = DMatrix::<f64>::identity(n, n);

    let bnorm = 1.0 + b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let a0norm = 1.0 + a0.norm();

    let mut best_z = z.clone();
    let mut best_gap = f64::INFINITY;
    let mut best_iter = 0usize;
    for iter in 0..MAX_ITER {
        let rd = mat_of(&z) - &s;
        let rp: Vec<f64> = (0..m)
            .map(|k| b[k] - dot_sparse(&lmi.basis[k], &x))
            .collect();
        let gap = (&x * &s).trace();
        let primal_obj = (&a0 * &x).trace();
        let dual_obj: f64 = lmi.f.iter().zip(&z).map(|(fk, zk)| fk * zk).sum();
        let rel_gap = gap.abs() / (1.0 + primal_obj.abs() + dual_obj.abs());
        let pinf = rp.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
        let dinf = rd.norm() / a0norm;
        let gap_estimate = rel_gap.max(pinf).max(dinf);
        if gap_estimate < best_gap {
            best_gap = gap_estimate;
            best_z = z.clone();
            best_iter = iter;
        }
        if std::env::var_os("QCSDP_TRACE").is_some() {
            eprintln!(
                "iter {iter}: gap {rel_gap:.3e} pinf {pinf:.3e} dinf {dinf:.3e} mu {:.3e}",
                gap / n as f64
            );
        }
        if gap_estimate <= tol {
            return Ok(IpmOutcome {
                z,
                gap_estimate,
                iterations: iter,
                status: Status::Solved,
            });
        }

        // Nesterov-Todd scaling W with W S W = X. Eigenvalues of S are
        // floored relative to its spectral radius so roundoff-negative
        // eigenvalues near convergence cannot produce infinities.
        let (s_vals, s_vecs) = sym_eigen(&s);
        let s_max = s_vals.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let s_floor = (s_max * 1e-14).max(1e-300);
        let diag_of = |f: &dyn Fn(f64) -> f64| {
            let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                s_vals.len(),
                s_vals.iter().map(|&v| f(v.max(s_floor))),
            ));
            &s_vecs * d * s_vecs.transpose()
        };
        let s_half = diag_of(&|v| v.sqrt());
        let s_half_inv = diag_of(&|v| 1.0 / v.sqrt());
        let mid = sym_func(&(&s_half * &x * &s_half), |v| v.max(0.0).sqrt());
        let w = &s_half_inv * mid * &s_half_inv;

        // Schur complement H[j][k] = Tr(A_j W A_k W).
        let mut h = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            for k in j..m {
                let mut v = 0.0;
                for &(p, q, cj) in &lmi.basis[j] {
                    for &(r, sdx, ck) in &lmi.basis[k] {
                        v += cj
                            * ck
                            * sym_trace(&w, p as usize, q as usize, r as usize, sdx as usize);
                    }
                }
                h[(j, k)] = v;
                h[(k, j)] = v;
            }
        }
        let mut chol = None;
        for jitter in [1e-13, 1e-10, 1e-7, 1e-5] {
            let mut hj = h.clone();
            for j in 0..m {
                hj[(j, j)] += jitter * (1.0 + h[(j, j)].abs());
            }
            if let Some(c) = hj.cholesky() {
                chol = Some(c);
                break;
            }
        }
        let chol = match chol {
            Some(c) => c,
            None => {
                // No usable Newton system: stop and report the best iterate.
                if std::env::var_os("QCSDP_TRACE").is_some() {
                    eprintln!("schur factorization failed at iter {iter}; stopping");
                }
                return Ok(IpmOutcome {
                    z: best_z,
                    gap_estimate: best_gap,
                    iterations: best_iter + 1,
                    status: if best_gap <= tol {
                        Status::Solved
                    } else {
                        Status::MaxIter
                    },
                });
            }
        };

        let mu = gap / n as f64;
        let s_inv = diag_of(&|v| 1.0 / v);
        let wrdw = &w * &rd * &w;

        let direction = |sigma: f64| -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
            let base = &s_inv * (sigma * mu) - &x - &wrdw;
            let mut rhs = nalgebra::DVector::<f64>::zeros(m);
            for j in 0..m {
                rhs[j] = dot_sparse(&lmi.basis[j], &base) - rp[j];
            }
            let dz = chol.solve(&rhs);
            let mut ds = rd.clone();
            for (k, a) in lmi.basis.iter().enumerate() {
                let c = dz[k];
                if c == 0.0 {
                    continue;
                }
                for &(i, j, v) in a {
                    ds[(i as usize, j as usize)] += c * v;
                    if i != j {
                        ds[(j as usize, i as usize)] += c * v;
                    }
                }
            }
            let dx = &base - &w * &ds * &w + &wrdw;
            (dz.iter().copied().collect(), dx, ds)
        };

        // Predictor.
        let (_, dx_aff, ds_aff) = direction(0.0);
        let ap = pd_step(&x, &dx_aff);
        let ad = pd_step(&s, &ds_aff);
        let mu_aff = ((&x + &dx_aff * ap) * (&s + &ds_aff * ad)).trace() / n as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(1e-4, 0.9);

        // Corrector.
        let (dz, dx, ds) = direction(sigma);
        let ap = pd_step(&x, &dx);
        let ad = pd_step(&s, &ds);
        if std::env::var_os("QCSDP_TRACE").is_some() {
            eprintln!("    sigma {sigma:.3e} ap {ap:.3e} ad {ad:.3e}");
        }
        // On degenerate instances an eigenvalue of X (or S) can collapse far
        // below mu, freezing every later step at the cone boundary. When a
        // step length vanishes, lift the offending matrix's spectrum back to
        // a small multiple of mu instead of taking the dead step; the
        // perturbation is re-absorbed by the residuals afterwards.
        let lift = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let (vals, vecs) = sym_eigen(m);
            let floor = 1e-4 * mu;
            let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                vals.len(),
                vals.iter().map(|&v| v.max(floor)),
            ));
            &vecs * d * vecs.transpose()
        };
        if ap < 1e-8 {
            x = lift(&x);
        } else {
            x += &dx * ap;
        }
        if ad < 1e-8 {
            s = lift(&s);
        } else {
            for k in 0..m {
                z[k] += ad * dz[k];
            }
            s += &ds * ad;
        }

        // Stop once the iterate stops improving; the best point is kept.
        if iter >= best_iter + 8 {
            return Ok(IpmOutcome {
                z: best_z,
                gap_estimate: best_gap,
                iterations: iter + 1,
                status: if best_gap <= tol {
                    Status::Solved
                } else {
                    Status::MaxIter
                },
            });
        }
        if mu < 1e-16 && gap_estimate > 1e-3 {
            return Ok(IpmOutcome {
                z,
                gap_estimate,
                iterations: iter + 1,
                status: Status::InfeasibleDetected,
            });
        }
    }
    Ok(IpmOutcome {
        z: best_z,
        gap_estimate: best_gap,
        iterations: MAX_ITER,
        status: if best_gap <= tol {
            Status::Solved
        } else {
            Status::MaxIter
        },
    })
}

// ---------------------------------------------------------------------
// Public interface.
// ---------------------------------------------------------------------

/// Feasible warm start: the average of the Gram matrices of deterministic
/// strategies, capped at 64 of them, read off at the representative entry
/// of each free variable.
fn warm_start(g: &Game, p: &MomentProblem, lmi: &ReducedLmi) -> Result<Vec<f64>> {
    let total_a: usize = (g.ax as f64).powi(g.qx as i32).min(1e9) as usize;
    let total_b: usize = (g.ay as f64).powi(g.qy as i32).min(1e9) as usize;
    let total = total_a.saturating_mul(total_b).max(1);
    let take = total.min(64);
    let mut avg = DMatrix::<f64>::zeros(p.dim, p.dim);
    let mut used = 0usize;
    let stride = (total / take).max(1);
    for pick in (0..total).step_by(stride).take(take) {
        let code_a = pick % total_a;
        let code_b = pick / total_a;
        let mut answers_a = vec![0usize; g.qx];
        let mut ca = code_a;
        for slot in answers_a.iter_mut() {
            *slot = ca % g.ax;
            ca /= g.ax;
        }
        let mut answers_b = vec![0usize; g.qy];
        let mut cb = code_b;
        for slot in answers_b.iter_mut() {
            *slot = cb % g.ay;
            cb /= g.ay;
        }
        let s = Strategy::deterministic(g, &answers_a, &answers_b);
        let sol = gram_from_strategy(g, &s, p.level)?;
        avg += sol.gamma();
        used += 1;
    }
    avg /= used as f64;
    Ok(lmi
        .rep_entry
        .iter()
        .map(|&(i, j)| avg[(i as usize, j as usize)])
        .collect())
}

pub fn solve(g: &Game, p: &MomentProblem, tol: f64) -> Result<SdpSolution> {
    if !(1e-10..=1e-4).contains(&tol) {
        return Err(Error::InvalidInput(format!(
            "tolerance {tol} outside [1e-10, 1e-4]"
        )));
    }
    let lmi = reduce(p)?;
    let z0 = warm_start(g, p, &lmi)?;
    let out = run_ipm(&lmi, &z0, tol)?;

    // Rebuild the matrix exactly from the affine map so every equality
    // constraint holds to machine precision.
    let mut gamma = sparse_to_dense(p.dim, &lmi.a0);
    for (k, a) in lmi.basis.iter().enumerate() {
        let c = out.z[k];
        for &(i, j, v) in a {
            gamma[(i as usize, j as usize)] += c * v;
            if i != j {
                gamma[(j as usize, i as usize)] += c * v;
            }
        }
    }
    let optimum = lmi.f0 + lmi.f.iter().zip(&out.z).map(|(fk, zk)| fk * zk).sum::<f64>();
    Ok(SdpSolution {
        gamma,
        optimum,
        gap_estimate: out.gap_estimate,
        iterations: out.iterations,
        status: out.status,
        level: p.level,
        game_hash: p.game_hash.clone(),
    })
}

/// Number of free variables the dense solver would face at this level.
pub fn free_moment_count(p: &MomentProblem) -> Result<usize> {
    reduce(p).map(|l| l.m)
}

/// Real Gram factorization of a solved moment matrix. Eigenvalues below
/// `clamp * lambda_max` are dropped as solver noise.
pub fn extract_gram(sol: &SdpSolution, index: &WordIndex, clamp: f64) -> Result<GramSolution> {
    if sol.gamma.nrows() != index.len() {
        return Err(Error::DimensionMismatch(format!(
            "gamma is {} but the word index has {} words",
            sol.gamma.nrows(),
            index.len()
        )));
    }
    let (vals, vecs) = sym_eigen(&sol.gamma);
    let lam_max = vals.iter().cloned().fold(0.0, f64::max);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-7 * lam_max.max(1.0) {
        return Err(Error::NotPsd(min));
    }
    let cutoff = clamp * lam_max;
    let kept: Vec<usize> = (0..vals.len())
        .filter(|&k| vals[k] > cutoff && vals[k] > 0.0)
        .collect();
    let n = index.len();
    let mut vectors = DMatrix::<f64>::zeros(n, kept.len());
    for (col, &k) in kept.iter().enumerate() {
        let scale = vals[k].sqrt();
        for row in 0..n {
            vectors[(row, col)] = scale * vecs[(row, k)];
        }
    }
    Ok(GramSolution {
        index: index.clone(),
        vectors,
    })
}

/// Solution file: header metadata plus the lower triangle of gamma.
pub fn solution_to_text(sol: &SdpSolution) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "qcsdp-solution v1");
    let _ = writeln!(s, "dim {}", sol.gamma.nrows());
    let _ = writeln!(s, "level {}", sol.level);
    let _ = writeln!(s, "game {}", sol.game_hash);
    let _ = writeln!(s, "optimum {:.17e}", sol.optimum);
    let _ = writeln!(s, "gap {:.17e}", sol.gap_estimate);
    let _ = writeln!(s, "iterations {}", sol.iterations);
    let _ = writeln!(s, "status {}", sol.status.label());
    for i in 0..sol.gamma.nrows() {
        for j in 0..=i {
            if j > 0 {
                let _ = write!(s, " ");
            }
            let _ = write!(s, "{:.17e}", sol.gamma[(i, j)]);
        }
        let _ = writeln!(s);
    }
    s
}

pub fn solution_from_text(text: &str) -> Result<SdpSolution> {
    let perr = |m: &str| Error::Parse(format!("solution file: {m}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("qcsdp-solution v1") {
        return Err(perr("bad header"));
    }
    let mut grab = |name: &str| -> Result<String> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(name))
            .map(|v| v.trim().to_string())
            .ok_or_else(|| perr(name))
    };
    let dim: usize = grab("dim ")?.parse().map_err(|_| perr("dim"))?;
    let level: usize = grab("level ")?.parse().map_err(|_| perr("level"))?;
    let game_hash = grab("game ")?;
    let optimum: f64 = grab("optimum ")?.parse().map_err(|_| perr("optimum"))?;
    let gap_estimate: f64 = grab("gap ")?.parse().map_err(|_| perr("gap"))?;
    let iterations: usize = grab("iterations ")?.parse().map_err(|_| perr("iterations"))?;
    let status = Status::from_label(&grab("status ")?).ok_or_else(|| perr("status"))?;
    let mut gamma = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        let line = lines.next().ok_or_else(|| perr("truncated gamma"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != i + 1 {
            return Err(perr("gamma row arity"));
        }
        for (j, t) in toks.iter().enumerate() {
            let v: f64 = t.parse().map_err(|_| perr("gamma entry"))?;
            gamma[(i, j)] = v;
            gamma[(j, i)] = v;
        }
    }
    Ok(SdpSolution {
        gamma,
        optimum,
        gap_estimate,
        iterations,
        status,
        level,
        game_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{chsh, chsh_commuting_strategy, strategy_value};
    use crate::hierarchy::{build_level, build_word_index, vector_sum_residual};

    fn trivial_game(v: bool) -> Game {
        Game {
            qx: 1,
            qy: 1,
            ax: 1,
            ay: 1,
            mu: vec![vec![1.0]],
            predicate: vec![vec![vec![vec![v]]]],
        }
    }

    #[test]
    fn entry_id_roundtrip() {
        let mut e = 0usize;
        for j in 0..40u32 {
            for i in 0..=j {
                assert_eq!(entry_id(i, j), e);
                assert_eq!(entry_id(j, i), e);
                assert_eq!(entry_pair(e), (i, j));
                e += 1;
            }
        }
    }

    #[test]
    fn trivial_game_solves_to_all_ones() {
        let g = trivial_game(true);
        let p = build_level(&g, 1).unwrap();
        let sol = solve(&g, &p, 1e-7).unwrap();
        assert_eq!(sol.status, Status::Solved);
        assert!((sol.optimum - 1.0).abs() < 1e-8, "optimum {}", sol.optimum);
        for i in 0..3 {
            for j in 0..3 {
                assert!((sol.gamma[(i, j)] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn chsh_level_one_reaches_tsirelson() {
        let g = chsh();
        let p = build_level(&g, 1).unwrap();
        let sol = solve(&g, &p, 1e-7).unwrap();
        assert_eq!(sol.status, Status::Solved);
        let want = (2.0 + 2f64.sqrt()) / 4.0;
        assert!((sol.optimum - want).abs() < 1e-6, "optimum {}", sol.optimum);
        // Upper bound on any exactly commuting strategy's value.
        let sv = strategy_value(&g, &chsh_commuting_strategy()).unwrap();
        assert!(sol.optimum >= sv - 1e-6);
    }

    #[test]
    fn chsh_level_two_matches_level_one() {
        let g = chsh();
        let p = build_level(&g, 2).unwrap();
        let sol = solve(&g, &p, 1e-6).unwrap();
        assert_eq!(sol.status, Status::Solved);
        let want = (2.0 + 2f64.sqrt()) / 4.0;
        assert!((sol.optimum - want).abs() < 1e-6, "optimum {}", sol.optimum);
        assert!((sol.gamma[(0, 0)] - 1.0).abs() < 1e-8);

        let idx = build_word_index(&g, 2).unwrap();
        let gram = extract_gram(&sol, &idx, 1e-9).unwrap();
        // Reconstruction error.
        let mut worst = 0.0f64;
        for i in 0..idx.len() {
            for j in 0..idx.len() {
                worst = worst.max((gram.entry(i, j) - sol.gamma[(i, j)]).abs());
            }
        }
        assert!(worst < 1e-6, "reconstruction {worst}");
        assert!(vector_sum_residual(&gram) < 1e-5);
        assert!((gram.vectors.row(0).norm() - 1.0).abs() < 1e-6);
        // The solved point satisfies the constraint families.
        let res = gram.verify(&g).unwrap();
        assert!(res.max < 1e-7, "residual {}", res.max);
    }

    #[test]
    fn solver_is_deterministic() {
        let g = chsh();
        let p = build_level(&g, 1).unwrap();
        let a = solve(&g, &p, 1e-7).unwrap();
        let b = solve(&g, &p, 1e-7).unwrap();
        assert!((a.optimum - b.optimum).abs() < 1e-12);
        assert_eq!(a.iterations, b.iterations);
        assert!((&a.gamma - &b.gamma).norm() < 1e-12);
    }

    #[test]
    fn solution_text_roundtrip() {
        let g = chsh();
        let p = build_level(&g, 1).unwrap();
        let sol = solve(&g, &p, 1e-7).unwrap();
        let text = solution_to_text(&sol);
        let back = solution_from_text(&text).unwrap();
        assert_eq!(back.status, sol.status);
        assert_eq!(back.level, sol.level);
        assert_eq!(back.game_hash, sol.game_hash);
        assert!((back.optimum - sol.optimum).abs() < 1e-15);
        assert!((&back.gamma - &sol.gamma).norm() < 1e-12);
    }

    #[test]
    fn extract_gram_identity_and_ones() {
        let g = chsh();
        let idx = build_word_index(&g, 1).unwrap();
        let base = SdpSolution {
            gamma: DMatrix::identity(9, 9),
            optimum: 0.0,
            gap_estimate: 0.0,
            iterations: 0,
            status: Status::Solved,
            level: 1,
            game_hash: String::new(),
        };
        let gram = extract_gram(&base, &idx, 1e-9).unwrap();
        assert_eq!(gram.rank(), 9);
        for i in 0..9 {
            for j in 0..9 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.entry(i, j) - want).abs() < 1e-10);
            }
        }
        let ones = SdpSolution {
            gamma: DMatrix::from_element(9, 9, 1.0),
            ..base
        };
        let gram = extract_gram(&ones, &idx, 1e-9).unwrap();
        assert_eq!(gram.rank(), 1);
    }
}
