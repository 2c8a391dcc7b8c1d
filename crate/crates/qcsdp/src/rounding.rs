//! Graded rounding of a feasible Gram solution into an explicit measurement
//! strategy with small cross-party commutators.
//!
//! From the Gram vectors `v_s` of a level-`N` moment matrix we build nested
//! level projectors `Pi_{<=j}` (onto the span of words of length at most `j`)
//! and label projectors `Pi_{P_x^a}`, `Pi_{Q_y^b}` (onto the span of vectors
//! whose word starts with that symbol). Averaging the compressions
//! `Pi_{<=i} Pi_label Pi_{<=i}` with interior weights yields sub-POVM elements
//! whose cross-party commutators decay like `1/sqrt(N-1)` while the value on
//! the state `|v_phi>` is preserved exactly.

use nalgebra::{DMatrix, DVector};

use crate::games::{Game, Strategy};
use crate::hierarchy::{
    build_level, gram_from_strategy, vector_sum_residual, GramSolution,
};
use crate::solver::{extract_gram, solve};
use crate::{Error, Result};

/// Frozen constant for the cross-party commutator bound
/// `max ||[Ptilde, Qtilde]|| <= ROUNDING_COMMUTATOR_CONST / sqrt(N-1)`
/// with uniform interior weights. It covers the three surviving terms of the
/// telescoping expansion: the diagonal term `2 * sum_i p_i q_i` plus two
/// off-diagonal cross terms, each bounded by
/// `||sum_i p_i Pi_{<=i} Pi_label Pi_{=i+1}|| <= sqrt(sum_i p_i^2)` and an
/// operator of norm at most one, giving `2/(N-1) + 4/sqrt(N-1) <= 6/sqrt(N-1)`
/// for `N >= 2`.
pub const ROUNDING_COMMUTATOR_CONST: f64 = 6.0;

/// Weight profiles must satisfy `max(sum p_i^2, sum q_j^2, sum p_i q_i) <=
/// WEIGHT_PROFILE_CONST / N`; uniform interior weights give `1/(N-1) <= 3/N`
/// for every `N >= 2`.
pub const WEIGHT_PROFILE_CONST: f64 = 3.0;

// ---------------------------------------------------------------------
// Real-matrix helpers on the Gram-vector space.
// ---------------------------------------------------------------------

/// Largest singular value of a real matrix.
pub fn real_operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0f64, |a, &v| a.max(v))
}

/// Relative singular-value cutoff for span rank detection. Directions this
/// far below the leading singular value are treated as numerical noise from
/// the solve; promoting them to full projector directions would let the two
/// answers of one question share a noise direction and break the sub-POVM
/// property. Any genuinely discarded direction shows up in the reported
/// projector-action residual, which is verified separately.
const SPAN_CUTOFF: f64 = 1e-5;

/// Orthogonal projector onto the span of the given vectors (columns), with a
/// relative singular-value cutoff for rank detection.
fn span_projector(cols: &[DVector<f64>], ambient: usize) -> DMatrix<f64> {
    if cols.is_empty() {
        return DMatrix::zeros(ambient, ambient);
    }
    let m = DMatrix::from_columns(cols);
    let svd = m.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &v| a.max(v));
    let mut p = DMatrix::zeros(ambient, ambient);
    if smax <= 0.0 {
        return p;
    }
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > SPAN_CUTOFF * smax {
            let uk = u.column(k);
            p += uk * uk.transpose();
        }
    }
    p
}

fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &v| a.min(v))
}

// ---------------------------------------------------------------------
// Projector family.
// ---------------------------------------------------------------------

/// Nested level projectors and per-label projectors on the Gram-vector space.
pub struct ProjectorFamily {
    /// Hierarchy level `N`.
    pub level: usize,
    /// Ambient dimension (the Gram rank).
    pub rank: usize,
    /// `level_projectors[j]` projects onto span{v_s : |s| <= j}, except
    /// `level_projectors[0] = 0` by convention (the weight at index 0 is
    /// always zero, so the empty-word level never enters the rounding).
    pub level_projectors: Vec<DMatrix<f64>>,
    /// `label_p[x][a]` projects onto span{v_{P_x^a s} : s in W_{N-1}}.
    pub label_p: Vec<Vec<DMatrix<f64>>>,
    /// `label_q[y][b]` projects onto span{v_{Q_y^b s} : s in W_{N-1}}.
    pub label_q: Vec<Vec<DMatrix<f64>>>,
}

/// Builds the level and label projectors from a Gram solution.
pub fn build_projectors(gs: &GramSolution) -> Result<ProjectorFamily> {
    let idx = &gs.index;
    let n = idx.level;
    let rank = gs.rank();
    if n == 0 {
        return Err(Error::InvalidInput(
            "projector family needs level >= 1".into(),
        ));
    }

    let row_vec = |s: usize| -> DVector<f64> { gs.vectors.row(s).transpose() };

    let mut level_projectors = Vec::with_capacity(n + 1);
    level_projectors.push(DMatrix::zeros(rank, rank));
    for j in 1..=n {
        let cols: Vec<DVector<f64>> = (0..idx.count_up_to(j)).map(row_vec).collect();
        level_projectors.push(span_projector(&cols, rank));
    }

    let inner = idx.count_up_to(n - 1);
    let label_for = |sym: usize| -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> =
            (0..inner).map(|s| row_vec(idx.prepend(sym, s))).collect();
        span_projector(&cols, rank)
    };

    let label_p: Vec<Vec<DMatrix<f64>>> = (0..idx.qx)
        .map(|x| (0..idx.ax).map(|a| label_for(idx.symbol_p(x, a))).collect())
        .collect();
    let label_q: Vec<Vec<DMatrix<f64>>> = (0..idx.qy)
        .map(|y| (0..idx.ay).map(|b| label_for(idx.symbol_q(y, b))).collect())
        .collect();

    Ok(ProjectorFamily {
        level: n,
        rank,
        level_projectors,
        label_p,
        label_q,
    })
}

impl ProjectorFamily {
    fn all_labels(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.label_p
            .iter()
            .flatten()
            .chain(self.label_q.iter().flatten())
    }
}

/// Worst-case residuals for the structural identities the projector family
/// must satisfy.
#[derive(Debug, Clone)]
pub struct IdentityReport {
    /// max over all projectors of `||P - P^T||` and `||P^2 - P||`.
    pub hermitian_idempotent: f64,
    /// max over `i, j` of `||Pi_{<=i} Pi_{<=j} - Pi_{<=min(i,j)}||`.
    pub level_identity: f64,
    /// max over labels and `j < N` of `||(Id - Pi_{<=j+1}) Pi_label Pi_{<=j}||`:
    /// a label projector raises the word length by at most one.
    pub one_shift: f64,
    /// max over label pairs and `i, j < N` of
    /// `||Pi_{<=i} [Pi_P, Pi_Q] Pi_{<=j}||`: cross-party label projectors
    /// commute when compressed below the top level.
    pub commutation_cancellation: f64,
    /// max over labels and `s in W_{N-1}` of `||Pi_label v_s - v_{label.s}||`.
    pub projector_action: f64,
    /// max over `s in W_{N-1}` and questions of `||v_s - sum_a v_{label.s}||`.
    pub vector_sum: f64,
}

impl IdentityReport {
    /// Largest residual across all identity families.
    pub fn max_residual(&self) -> f64 {
        self.hermitian_idempotent
            .max(self.level_identity)
            .max(self.one_shift)
            .max(self.commutation_cancellation)
            .max(self.projector_action)
            .max(self.vector_sum)
    }
}

/// Evaluates every structural identity of the family against the Gram data.
pub fn verify_identities(pf: &ProjectorFamily, gs: &GramSolution) -> IdentityReport {
    let n = pf.level;
    let idx = &gs.index;
    let eye = DMatrix::<f64>::identity(pf.rank, pf.rank);

    let mut hermitian_idempotent = 0.0f64;
    for p in pf.level_projectors.iter().chain(pf.all_labels()) {
        hermitian_idempotent =
            hermitian_idempotent.max(real_operator_norm(&(p - p.transpose())));
        hermitian_idempotent = hermitian_idempotent.max(real_operator_norm(&(p * p - p)));
    }

    let mut level_identity = 0.0f64;
    for i in 0..=n {
        for j in 0..=n {
            let prod = &pf.level_projectors[i] * &pf.level_projectors[j];
            let want = &pf.level_projectors[i.min(j)];
            level_identity = level_identity.max(real_operator_norm(&(prod - want)));
        }
    }

    let mut one_shift = 0.0f64;
    for lab in pf.all_labels() {
        for j in 0..n {
            let raised = (&eye - &pf.level_projectors[j + 1])
                * lab
                * &pf.level_projectors[j];
            one_shift = one_shift.max(real_operator_norm(&raised));
        }
    }

    let mut commutation_cancellation = 0.0f64;
    for pp in pf.label_p.iter().flatten() {
        for qq in pf.label_q.iter().flatten() {
            let comm = pp * qq - qq * pp;
            for i in 0..n {
                for j in 0..n {
                    let compressed =
                        &pf.level_projectors[i] * &comm * &pf.level_projectors[j];
                    commutation_cancellation =
                        commutation_cancellation.max(real_operator_norm(&compressed));
                }
            }
        }
    }

    let inner = idx.count_up_to(n - 1);
    let row_vec = |s: usize| -> DVector<f64> { gs.vectors.row(s).transpose() };
    let mut projector_action = 0.0f64;
    for sym in 0..idx.alphabet_size {
        let lab = if idx.symbol_is_p(sym) {
            let (x, a) = idx.symbol_parts(sym);
            &pf.label_p[x][a]
        } else {
            let (y, b) = idx.symbol_parts(sym);
            &pf.label_q[y][b]
        };
        for s in 0..inner {
            let got = lab * row_vec(s);
            let want = row_vec(idx.prepend(sym, s));
            projector_action = projector_action.max((got - want).norm());
        }
    }

    IdentityReport {
        hermitian_idempotent,
        level_identity,
        one_shift,
        commutation_cancellation,
        projector_action,
        vector_sum: vector_sum_residual(gs),
    }
}

// ---------------------------------------------------------------------
// Rounded strategy.
// ---------------------------------------------------------------------

/// A sub-POVM strategy obtained by graded rounding, together with the garbage
/// completions and the rank-1 state.
pub struct RoundedStrategy {
    /// Hierarchy level `N` of the source solution.
    pub level: usize,
    /// Ambient dimension (the Gram rank).
    pub rank: usize,
    /// `p_tilde[x][a] = sum_i w_p[i] Pi_{<=i} Pi_{P_x^a} Pi_{<=i}`.
    pub p_tilde: Vec<Vec<DMatrix<f64>>>,
    /// Same construction on the second party.
    pub q_tilde: Vec<Vec<DMatrix<f64>>>,
    /// `Id - sum_a p_tilde[x][a]` per question `x`.
    pub p_garbage: Vec<DMatrix<f64>>,
    /// `Id - sum_b q_tilde[y][b]` per question `y`.
    pub q_garbage: Vec<DMatrix<f64>>,
    /// The state vector `v_phi` (the empty-word Gram vector, unit norm).
    pub state: DVector<f64>,
    /// Level weights, indices `0..=N` with `w[0] = w[N] = 0`.
    pub weights_p: Vec<f64>,
    pub weights_q: Vec<f64>,
}

/// The uniform interior weight profile: `w[0] = w[N] = 0`,
/// `w[i] = 1/(N-1)` for `0 < i < N`.
pub fn uniform_weights(level: usize) -> Vec<f64> {
    let mut w = vec![0.0; level + 1];
    if level >= 2 {
        for wi in w.iter_mut().take(level).skip(1) {
            *wi = 1.0 / (level - 1) as f64;
        }
    }
    w
}

fn validate_weights(w: &[f64], level: usize, tag: &str) -> Result<()> {
    if w.len() != level + 1 {
        return Err(Error::InvalidInput(format!(
            "{tag} weights must have length N+1 = {}, got {}",
            level + 1,
            w.len()
        )));
    }
    if w[0].abs() > 1e-12 || w[level].abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "{tag} weights must vanish at indices 0 and N"
        )));
    }
    if w.iter().any(|&v| v < -1e-12) {
        return Err(Error::InvalidInput(format!("{tag} weights must be nonnegative")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "{tag} weights must sum to 1, got {sum}"
        )));
    }
    Ok(())
}

/// Rounds a Gram solution into sub-POVMs with garbage completions. The weight
/// profiles default to uniform interior weights; custom profiles must vanish
/// at the endpoints, sum to 1, and satisfy
/// `max(sum p_i^2, sum q_j^2, sum p_i q_i) <= WEIGHT_PROFILE_CONST / N`.
///
/// `psd_tol` bounds how far below zero an element's smallest eigenvalue may
/// sit before the sub-POVM check fails. Use `1e-8` for Gram data satisfying
/// the moment constraints to machine precision; for Gram matrices from an
/// iterative solve the defect scales with the solver's duality gap, so pass a
/// tolerance proportional to it (the convergence study uses
/// `10 * rank * gap`).
pub fn round(
    gs: &GramSolution,
    pf: &ProjectorFamily,
    weights_p: Option<&[f64]>,
    weights_q: Option<&[f64]>,
    psd_tol: f64,
) -> Result<RoundedStrategy> {
    let n = pf.level;
    if n < 2 {
        return Err(Error::InvalidInput(
            "rounding needs level >= 2 (at least one interior weight level)".into(),
        ));
    }
    let wp: Vec<f64> = match weights_p {
        Some(w) => w.to_vec(),
        None => uniform_weights(n),
    };
    let wq: Vec<f64> = match weights_q {
        Some(w) => w.to_vec(),
        None => uniform_weights(n),
    };
    validate_weights(&wp, n, "first-party")?;
    validate_weights(&wq, n, "second-party")?;
    let sp: f64 = wp.iter().map(|v| v * v).sum();
    let sq: f64 = wq.iter().map(|v| v * v).sum();
    let spq: f64 = wp.iter().zip(&wq).map(|(a, b)| a * b).sum();
    let profile = sp.max(sq).max(spq);
    if profile > WEIGHT_PROFILE_CONST / n as f64 + 1e-12 {
        return Err(Error::InvalidInput(format!(
            "weight profile too concentrated: max(sum p^2, sum q^2, sum pq) = \
             {profile} exceeds {WEIGHT_PROFILE_CONST}/N = {}",
            WEIGHT_PROFILE_CONST / n as f64
        )));
    }

    let rank = pf.rank;
    let eye = DMatrix::<f64>::identity(rank, rank);
    let compress = |lab: &DMatrix<f64>, w: &[f64]| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rank, rank);
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            out += (&pf.level_projectors[i] * lab * &pf.level_projectors[i]) * wi;
        }
        out
    };

    let p_tilde: Vec<Vec<DMatrix<f64>>> = pf
        .label_p
        .iter()
        .map(|row| row.iter().map(|lab| compress(lab, &wp)).collect())
        .collect();
    let q_tilde: Vec<Vec<DMatrix<f64>>> = pf
        .label_q
        .iter()
        .map(|row| row.iter().map(|lab| compress(lab, &wq)).collect())
        .collect();
    let garbage = |row: &[DMatrix<f64>]| -> DMatrix<f64> {
        let mut g = eye.clone();
        for e in row {
            g -= e;
        }
        g
    };
    let p_garbage: Vec<DMatrix<f64>> = p_tilde.iter().map(|r| garbage(r)).collect();
    let q_garbage: Vec<DMatrix<f64>> = q_tilde.iter().map(|r| garbage(r)).collect();

    // Sub-POVM validity: every element (including garbage) must be PSD.
    for (tag, rows) in [("first", &p_tilde), ("second", &q_tilde)] {
        for row in rows.iter() {
            for e in row {
                if min_sym_eig(e) < -psd_tol {
                    return Err(Error::Verification(format!(
                        "{tag}-party rounded element not PSD"
                    )));
                }
            }
        }
    }
    for (tag, garb) in [("first", &p_garbage), ("second", &q_garbage)] {
        for gmat in garb.iter() {
            if min_sym_eig(gmat) < -psd_tol {
                return Err(Error::Verification(format!(
                    "{tag}-party garbage element not PSD (sub-POVM sum exceeds Id)"
                )));
            }
        }
    }

    let state = gs.vectors.row(0).transpose();
    Ok(RoundedStrategy {
        level: n,
        rank,
        p_tilde,
        q_tilde,
        p_garbage,
        q_garbage,
        state,
        weights_p: wp,
        weights_q: wq,
    })
}

impl RoundedStrategy {
    /// `<v_phi| M |v_phi>`.
    pub fn expectation(&self, m: &DMatrix<f64>) -> f64 {
        (self.state.transpose() * m * &self.state)[(0, 0)]
    }

    /// Game value with the first party's element applied first.
    pub fn value_pq(&self, g: &Game) -> f64 {
        self.value_with(g, false)
    }

    /// Game value with the second party's element applied first.
    pub fn value_qp(&self, g: &Game) -> f64 {
        self.value_with(g, true)
    }

    fn value_with(&self, g: &Game, swap: bool) -> f64 {
        let mut v = 0.0;
        for x in 0..g.qx {
            for y in 0..g.qy {
                let w = g.mu(x, y);
                if w == 0.0 {
                    continue;
                }
                for a in 0..g.ax {
                    for b in 0..g.ay {
                        if !g.accepts(x, y, a, b) {
                            continue;
                        }
                        let joint = if swap {
                            &self.q_tilde[y][b] * &self.p_tilde[x][a]
                        } else {
                            &self.p_tilde[x][a] * &self.q_tilde[y][b]
                        };
                        v += w * self.expectation(&joint);
                    }
                }
            }
        }
        v
    }
}

/// Value-preservation report: the rounded value in both operator orderings,
/// and the largest probability of any garbage outcome on the state.
#[derive(Debug, Clone)]
pub struct ValueReport {
    pub value_pq: f64,
    pub value_qp: f64,
    pub sdp_value: f64,
    pub max_garbage_probability: f64,
}

impl ValueReport {
    /// Largest deviation of either ordering from the target value.
    pub fn value_gap(&self) -> f64 {
        (self.value_pq - self.sdp_value)
            .abs()
            .max((self.value_qp - self.sdp_value).abs())
    }
}

/// Checks value preservation and that all garbage outcomes have probability
/// (numerically) zero on the state.
pub fn verify_value(g: &Game, rs: &RoundedStrategy, sdp_value: f64) -> ValueReport {
    let mut garb = 0.0f64;
    for x in 0..g.qx {
        garb = garb.max(rs.expectation(&rs.p_garbage[x]).abs());
        for y in 0..g.qy {
            garb = garb.max(
                rs.expectation(&(&rs.p_garbage[x] * &rs.q_garbage[y])).abs(),
            );
            for b in 0..g.ay {
                garb = garb.max(
                    rs.expectation(&(&rs.p_garbage[x] * &rs.q_tilde[y][b])).abs(),
                );
            }
        }
    }
    for y in 0..g.qy {
        garb = garb.max(rs.expectation(&rs.q_garbage[y]).abs());
        for x in 0..g.qx {
            for a in 0..g.ax {
                garb = garb.max(
                    rs.expectation(&(&rs.p_tilde[x][a] * &rs.q_garbage[y])).abs(),
                );
            }
        }
    }
    ValueReport {
        value_pq: rs.value_pq(g),
        value_qp: rs.value_qp(g),
        sdp_value,
        max_garbage_probability: garb,
    }
}

/// Commutator-decay report against the frozen explicit bounds.
#[derive(Debug, Clone)]
pub struct CommutatorBounds {
    /// max over `(x,a,y,b)` of `||[p_tilde, q_tilde]||`.
    pub max_commutator: f64,
    /// `ROUNDING_COMMUTATOR_CONST / sqrt(N-1)`.
    pub bound: f64,
    /// max over `(x,y,b)` of `||[p_garbage_x, q_tilde_y^b]||`, bound `|A| * bound`.
    pub max_p_garbage_commutator: f64,
    /// max over `(x,a,y)` of `||[p_tilde_x^a, q_garbage_y]||`, bound `|B| * bound`.
    pub max_q_garbage_commutator: f64,
    /// max over `(x,y)` of `||[p_garbage_x, q_garbage_y]||`, bound `|A||B| * bound`.
    pub max_garbage_garbage_commutator: f64,
    pub answers_a: usize,
    pub answers_b: usize,
}

impl CommutatorBounds {
    /// Largest commutator across all four classes.
    pub fn max_any(&self) -> f64 {
        self.max_commutator
            .max(self.max_p_garbage_commutator)
            .max(self.max_q_garbage_commutator)
            .max(self.max_garbage_garbage_commutator)
    }

    /// True iff every class respects its explicit bound.
    pub fn pass(&self) -> bool {
        self.max_commutator <= self.bound
            && self.max_p_garbage_commutator <= self.answers_a as f64 * self.bound
            && self.max_q_garbage_commutator <= self.answers_b as f64 * self.bound
            && self.max_garbage_garbage_commutator
                <= (self.answers_a * self.answers_b) as f64 * self.bound
    }
}

/// Measures every cross-party commutator of the rounded strategy. The garbage
/// bounds follow from expanding the garbage element as identity minus the
/// answer sum and applying the triangle inequality.
pub fn verify_commutators(rs: &RoundedStrategy) -> CommutatorBounds {
    let comm_norm = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> f64 {
        real_operator_norm(&(a * b - b * a))
    };
    let mut max_commutator = 0.0f64;
    for prow in &rs.p_tilde {
        for p in prow {
            for qrow in &rs.q_tilde {
                for q in qrow {
                    max_commutator = max_commutator.max(comm_norm(p, q));
                }
            }
        }
    }
    let mut max_pg = 0.0f64;
    for pg in &rs.p_garbage {
        for qrow in &rs.q_tilde {
            for q in qrow {
                max_pg = max_pg.max(comm_norm(pg, q));
            }
        }
    }
    let mut max_qg = 0.0f64;
    for qg in &rs.q_garbage {
        for prow in &rs.p_tilde {
            for p in prow {
                max_qg = max_qg.max(comm_norm(p, qg));
            }
        }
    }
    let mut max_gg = 0.0f64;
    for pg in &rs.p_garbage {
        for qg in &rs.q_garbage {
            max_gg = max_gg.max(comm_norm(pg, qg));
        }
    }
    let answers_a = rs.p_tilde.first().map_or(0, |r| r.len());
    let answers_b = rs.q_tilde.first().map_or(0, |r| r.len());
    CommutatorBounds {
        max_commutator,
        bound: ROUNDING_COMMUTATOR_CONST / ((rs.level - 1) as f64).sqrt(),
        max_p_garbage_commutator: max_pg,
        max_q_garbage_commutator: max_qg,
        max_garbage_garbage_commutator: max_gg,
        answers_a,
        answers_b,
    }
}

// ---------------------------------------------------------------------
// Convergence study across levels.
// ---------------------------------------------------------------------

/// Where the feasible moment matrix for each level comes from.
pub enum GramSource<'a> {
    /// Solve the moment relaxation to optimality with the interior-point
    /// method at the given tolerance.
    Ipm { tol: f64 },
    /// Use the feasible point induced by an explicit commuting projective
    /// strategy (a lower bound on the relaxation optimum; exact when the
    /// strategy is optimal). Used when the relaxation is too large to solve
    /// directly.
    Strategy(&'a Strategy),
}

/// One row of the convergence study.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub level: usize,
    pub sdp_value: f64,
    pub rounded_value: Option<f64>,
    pub max_commutator: Option<f64>,
    pub max_garbage_commutator: Option<f64>,
    pub identity_residual_max: Option<f64>,
    /// Empty on success; otherwise the per-level failure, recorded in-row.
    pub note: String,
}

fn gram_for_level(
    g: &Game,
    level: usize,
    source: &GramSource,
) -> Result<(GramSolution, f64, f64)> {
    match source {
        GramSource::Ipm { tol } => {
            let p = build_level(g, level)?;
            let sol = solve(g, &p, *tol)?;
            // Eigendirections below roughly the duality gap are solver noise;
            // keeping them would inflate the projector spans.
            let clamp = (sol.gap_estimate * 10.0).max(1e-9);
            let gs = extract_gram(&sol, &p.index, clamp)?;
            let psd_tol = (10.0 * gs.rank() as f64 * sol.gap_estimate).max(1e-8);
            Ok((gs, sol.optimum, psd_tol))
        }
        GramSource::Strategy(s) => {
            let gs = gram_from_strategy(g, s, level)?;
            let v = gs.objective_value(g);
            Ok((gs, v, 1e-8))
        }
    }
}

/// Runs the full pipeline (solve/induce, project, round, verify) at each
/// level and reports one deterministic row per level. Per-level failures are
/// recorded in the row's note instead of aborting the sweep. Level 1 reports
/// the value only: rounding needs at least one interior weight level.
pub fn study_convergence(g: &Game, levels: &[usize], source: &GramSource) -> Vec<StudyRow> {
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut row = StudyRow {
            level,
            sdp_value: f64::NAN,
            rounded_value: None,
            max_commutator: None,
            max_garbage_commutator: None,
            identity_residual_max: None,
            note: String::new(),
        };
        match gram_for_level(g, level, source) {
            Err(e) => row.note = e.to_string(),
            Ok((gs, value, psd_tol)) => {
                row.sdp_value = value;
                if level >= 2 {
                    match build_projectors(&gs)
                        .and_then(|pf| round(&gs, &pf, None, None, psd_tol).map(|rs| (pf, rs)))
                    {
                        Err(e) => row.note = e.to_string(),
                        Ok((pf, rs)) => {
                            let idr = verify_identities(&pf, &gs);
                            let vr = verify_value(g, &rs, value);
                            let cb = verify_commutators(&rs);
                            row.rounded_value = Some(vr.value_pq);
                            row.max_commutator = Some(cb.max_commutator);
                            row.max_garbage_commutator = Some(
                                cb.max_p_garbage_commutator
                                    .max(cb.max_q_garbage_commutator)
                                    .max(cb.max_garbage_garbage_commutator),
                            );
                            row.identity_residual_max = Some(idr.max_residual());
                        }
                    }
                }
            }
        }
        rows.push(row);
    }
    rows
}

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Renders study rows as CSV with nine significant digits per numeric cell;
/// cells that do not apply (e.g. rounding at level 1) are left blank.
/// Rows with a failure note are followed by a `#`-prefixed comment line
/// carrying the note (e.g. a size-cap rejection).
pub fn study_csv(rows: &[StudyRow]) -> String {
    let mut out =
        String::from("level,sdpValue,roundedValue,maxCommutator,maxGarbageCommutator,identityResidualMax\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(sig9).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.level,
            if r.sdp_value.is_nan() {
                String::new()
            } else {
                sig9(r.sdp_value)
            },
            opt(r.rounded_value),
            opt(r.max_commutator),
            opt(r.max_garbage_commutator),
            opt(r.identity_residual_max),
        ));
        if !r.note.is_empty() {
            out.push_str(&format!("# level {}: {}\n", r.level, r.note));
        }
    }
    out
}

/// Serializes a rounded strategy as labeled dense matrix blocks.
pub fn rounded_strategy_to_text(rs: &RoundedStrategy) -> String {
    let mut out = String::new();
    out.push_str("rounded strategy v1\n");
    out.push_str(&format!("level {}\n", rs.level));
    out.push_str(&format!("rank {}\n", rs.rank));
    out.push_str(&format!(
        "questions {} {}\n",
        rs.p_tilde.len(),
        rs.q_tilde.len()
    ));
    out.push_str(&format!(
        "answers {} {}\n",
        rs.p_tilde.first().map_or(0, |r| r.len()),
        rs.q_tilde.first().map_or(0, |r| r.len())
    ));
    let push_vec = |out: &mut String, v: &[f64]| {
        let cells: Vec<String> = v.iter().map(|c| format!("{c:.17e}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    };
    out.push_str("weights_p ");
    push_vec(&mut out, &rs.weights_p);
    out.push_str("weights_q ");
    push_vec(&mut out, &rs.weights_q);
    out.push_str("state ");
    push_vec(&mut out, rs.state.as_slice());
    let push_block = |out: &mut String, name: String, m: &DMatrix<f64>| {
        out.push_str(&format!("block {name}\n"));
        for i in 0..m.nrows() {
            let cells: Vec<String> =
                (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
    };
    for (x, row) in rs.p_tilde.iter().enumerate() {
        for (a, m) in row.iter().enumerate() {
            push_block(&mut out, format!("P x={x} a={a}"), m);
        }
    }
    for (x, m) in rs.p_garbage.iter().enumerate() {
        push_block(&mut out, format!("P x={x} garbage"), m);
    }
    for (y, row) in rs.q_tilde.iter().enumerate() {
        for (b, m) in row.iter().enumerate() {
            push_block(&mut out, format!("Q y={y} b={b}"), m);
        }
    }
    for (y, m) in rs.q_garbage.iter().enumerate() {
        push_block(&mut out, format!("Q y={y} garbage"), m);
    }
    out
}

// ---------------------------------------------------------------------
// Tests.
// ---------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{chsh, chsh_commuting_strategy};

    /// A 1-question 1-answer game: every Gram vector is v_phi, so all
    /// projectors collapse to the rank-1 projector onto the state.
    fn trivial_game() -> Game {
        Game {
            qx: 1,
            ax: 1,
            qy: 1,
            ay: 1,
            mu: vec![vec![1.0]],
            predicate: vec![vec![vec![vec![true]]]],
        }
    }

    fn trivial_gram(level: usize) -> GramSolution {
        let g = trivial_game();
        let s = Strategy {
            dim: 1,
            povm_a: vec![vec![DMatrix::from_element(1, 1, num_complex::Complex64::new(1.0, 0.0))]],
            povm_b: vec![vec![DMatrix::from_element(1, 1, num_complex::Complex64::new(1.0, 0.0))]],
            rho: DMatrix::from_element(1, 1, num_complex::Complex64::new(1.0, 0.0)),
        };
        gram_from_strategy(&g, &s, level).unwrap()
    }

    #[test]
    fn trivial_game_projectors_are_rank_one() {
        let gs = trivial_gram(2);
        let pf = build_projectors(&gs).unwrap();
        let state = gs.vectors.row(0).transpose();
        let proj = &state * state.transpose();
        for j in 1..=2 {
            assert!(real_operator_norm(&(&pf.level_projectors[j] - &proj)) < 1e-10);
        }
        assert!(real_operator_norm(&(&pf.label_p[0][0] - &proj)) < 1e-10);
        assert!(real_operator_norm(&(&pf.label_q[0][0] - &proj)) < 1e-10);
        let rep = verify_identities(&pf, &gs);
        assert!(rep.max_residual() < 1e-10, "{rep:?}");
    }

    #[test]
    fn trivial_game_rounds_to_state_projector_with_zero_commutators() {
        let g = trivial_game();
        let gs = trivial_gram(2);
        let pf = build_projectors(&gs).unwrap();
        let rs = round(&gs, &pf, None, None, 1e-8).unwrap();
        let state = gs.vectors.row(0).transpose();
        let proj = &state * state.transpose();
        assert!(real_operator_norm(&(&rs.p_tilde[0][0] - &proj)) < 1e-10);
        let vr = verify_value(&g, &rs, 1.0);
        assert!(vr.value_gap() < 1e-10);
        assert!(vr.max_garbage_probability < 1e-12);
        let cb = verify_commutators(&rs);
        assert!(cb.max_any() < 1e-12);
        assert!(cb.pass());
    }

    #[test]
    fn chsh_level_two_identities_hold() {
        let g = chsh();
        let s = chsh_commuting_strategy();
        let gs = gram_from_strategy(&g, &s, 2).unwrap();
        let pf = build_projectors(&gs).unwrap();
        // At most 9 spanning vectors for words of length <= 1.
        let rank1 = pf.level_projectors[1].clone().symmetric_eigen().eigenvalues
            .iter()
            .filter(|&&v| v > 0.5)
            .count();
        assert!(rank1 <= 9, "rank {rank1}");
        let rep = verify_identities(&pf, &gs);
        assert!(rep.level_identity <= 1e-7, "{rep:?}");
        assert!(rep.one_shift <= 1e-5, "{rep:?}");
        assert!(rep.commutation_cancellation <= 1e-5, "{rep:?}");
        assert!(rep.projector_action <= 1e-5, "{rep:?}");
    }

    #[test]
    fn chsh_rounding_preserves_value_and_bounds_commutators() {
        let g = chsh();
        let s = chsh_commuting_strategy();
        for level in [2usize, 3] {
            let gs = gram_from_strategy(&g, &s, level).unwrap();
            let value = gs.objective_value(&g);
            let pf = build_projectors(&gs).unwrap();
            let rs = round(&gs, &pf, None, None, 1e-8).unwrap();
            let vr = verify_value(&g, &rs, value);
            assert!(vr.value_gap() < 1e-6, "level {level}: {vr:?}");
            assert!(vr.max_garbage_probability < 1e-8, "level {level}: {vr:?}");
            let cb = verify_commutators(&rs);
            assert!(cb.pass(), "level {level}: {cb:?}");
        }
    }

    #[test]
    fn rounded_entries_match_moment_entries() {
        let g = chsh();
        let s = chsh_commuting_strategy();
        let gs = gram_from_strategy(&g, &s, 2).unwrap();
        let pf = build_projectors(&gs).unwrap();
        let rs = round(&gs, &pf, None, None, 1e-8).unwrap();
        let idx = &gs.index;
        for x in 0..g.qx {
            for a in 0..g.ax {
                for y in 0..g.qy {
                    for b in 0..g.ay {
                        let got = rs
                            .expectation(&(&rs.p_tilde[x][a] * &rs.q_tilde[y][b]));
                        let want = gs.moment(
                            idx.prepend(idx.symbol_p(x, a), 0),
                            idx.prepend(idx.symbol_q(y, b), 0),
                        );
                        assert!((got - want).abs() < 1e-6, "{x},{a},{y},{b}: {got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn weight_validation_rejects_bad_profiles() {
        let gs = trivial_gram(3);
        let pf = build_projectors(&gs).unwrap();
        // Nonzero endpoint.
        let bad = vec![0.5, 0.5, 0.0, 0.0];
        assert!(round(&gs, &pf, Some(&bad), None, 1e-8).is_err());
        // Does not sum to 1.
        let bad = vec![0.0, 0.4, 0.4, 0.0];
        assert!(round(&gs, &pf, Some(&bad), None, 1e-8).is_err());
        // Valid custom profile.
        let ok = vec![0.0, 0.5, 0.5, 0.0];
        assert!(round(&gs, &pf, Some(&ok), Some(&ok), 1e-8).is_ok());
        // Level 1 has no interior levels at all.
        let gs1 = trivial_gram(1);
        let pf1 = build_projectors(&gs1).unwrap();
        assert!(round(&gs1, &pf1, None, None, 1e-8).is_err());
    }

    #[test]
    fn commutator_decay_across_levels() {
        let g = chsh();
        let s = chsh_commuting_strategy();
        let mut prev = f64::INFINITY;
        for level in [2usize, 3, 4] {
            let gs = gram_from_strategy(&g, &s, level).unwrap();
            let pf = build_projectors(&gs).unwrap();
            let rs = round(&gs, &pf, None, None, 1e-8).unwrap();
            let cb = verify_commutators(&rs);
            assert!(
                cb.max_commutator <= cb.bound,
                "level {level}: {} > {}",
                cb.max_commutator,
                cb.bound
            );
            // The scaled sequence stays bounded by the frozen constant.
            assert!(
                cb.max_commutator * ((level - 1) as f64).sqrt()
                    <= ROUNDING_COMMUTATOR_CONST
            );
            prev = prev.min(cb.max_commutator);
        }
    }

    #[test]
    fn study_rows_and_csv_format() {
        let g = chsh();
        let s = chsh_commuting_strategy();
        let rows = study_convergence(&g, &[1, 2, 3], &GramSource::Strategy(&s));
        assert_eq!(rows.len(), 3);
        assert!(rows[0].rounded_value.is_none());
        assert!(rows[1].rounded_value.is_some());
        // Values non-increasing within tolerance across levels.
        for w in rows.windows(2) {
            assert!(w[1].sdp_value <= w[0].sdp_value + 1e-7);
        }
        let csv = study_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "level,sdpValue,roundedValue,maxCommutator,maxGarbageCommutator,identityResidualMax"
        );
        let row1 = lines.next().unwrap();
        assert!(row1.starts_with("1,"));
        assert!(row1.ends_with(",,,,"), "{row1}");
        let row2 = lines.next().unwrap();
        assert_eq!(row2.split(',').count(), 6);
        assert!(!row2.split(',').any(str::is_empty));
    }

    #[test]
    fn ipm_solved_chsh_level_two_rounds_cleanly() {
        let g = chsh();
        let rows = study_convergence(&g, &[2], &GramSource::Ipm { tol: 1e-6 });
        let row = &rows[0];
        assert!(row.note.is_empty(), "{}", row.note);
        let want = (2.0 + 2f64.sqrt()) / 4.0;
        assert!((row.sdp_value - want).abs() < 1e-6);
        assert!((row.rounded_value.unwrap() - row.sdp_value).abs() < 1e-6);
        assert!(row.max_commutator.unwrap() <= ROUNDING_COMMUTATOR_CONST);
        assert!(row.identity_residual_max.unwrap() < 1e-4);
    }

    #[test]
    fn rounded_strategy_serialization_contains_all_blocks() {
        let g = chsh();
        let s = chsh_commuting_strategy();
        let gs = gram_from_strategy(&g, &s, 2).unwrap();
        let pf = build_projectors(&gs).unwrap();
        let rs = round(&gs, &pf, None, None, 1e-8).unwrap();
        let text = rounded_strategy_to_text(&rs);
        let blocks = text.lines().filter(|l| l.starts_with("block ")).count();
        // 2*2 answers + 2 garbage per party.
        assert_eq!(blocks, (g.qx * g.ax + g.qx) + (g.qy * g.ay + g.qy));
        assert!(text.contains("block P x=1 garbage"));
        let _ = g;
    }
}
