//! Word enumeration over the formal measurement alphabet and compilation of
//! a game into the level-N moment problem: a PSD Gram matrix over words of
//! length at most N subject to normalization, shifting, cross-prover
//! commutation, answer-sum, and orthogonality equalities.
//!
//! Matrix entries are stored in Gram coordinates `G[u][t] = <v_u, v_t>`;
//! the moment-matrix entry for a (row word, column word) pair is recovered
//! through the row-reversal convention `M[s][t] = G[rev(s)][t]`. In these
//! coordinates every constraint family acts on unordered index pairs of a
//! real symmetric matrix.

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt::Write as _;

use crate::games::{game_to_json, strategy_value, validate_game, Game, Strategy};
use crate::linalg::hermitian_eigen;
use crate::{Error, Result};

/// Default cap on the number of words (matrix dimension).
pub const WORD_CAP: usize = 20_000;

/// Guard on the raw emitted-constraint count for materialized builds;
/// larger levels must go through `for_each_constraint`.
const CONSTRAINT_CAP: usize = 5_000_000;

/// Enumeration of all words of length at most `level` over the alphabet of
/// formal measurement symbols: `P_x^a` for every first-prover question and
/// answer, then `Q_y^b`. Indices are arithmetic in base `alphabet_size`, so
/// a word's index does not depend on the level: the empty word is 0,
/// length-1 words follow in alphabet order, then length-2 words in
/// lexicographic order, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct WordIndex {
    pub qx: usize,
    pub ax: usize,
    pub qy: usize,
    pub ay: usize,
    pub level: usize,
    pub alphabet_size: usize,
    /// `offsets[l]` is the index of the first word of length `l`.
    offsets: Vec<usize>,
    total: usize,
}

/// A formal symbol: index below `qx*ax` encodes `P_x^a = x*ax + a`, the
/// rest encode `Q_y^b = qx*ax + y*ay + b`.
pub type Symbol = usize;

impl WordIndex {
    pub fn new(g: &Game, level: usize, cap: usize) -> Result<WordIndex> {
        if level == 0 {
            return Err(Error::InvalidInput("level must be >= 1".into()));
        }
        let k = g.qx * g.ax + g.qy * g.ay;
        let mut offsets = vec![0usize];
        let mut total = 1usize;
        for _ in 0..level {
            offsets.push(total);
            total = total
                .checked_mul(k)
                .and_then(|w| w.checked_add(1))
                .ok_or_else(|| Error::TooLarge("word count overflow".into()))?;
            if total > cap {
                return Err(Error::TooLarge(format!(
                    "word count {total} exceeds cap {cap} at level {level}"
                )));
            }
        }
        Ok(WordIndex {
            qx: g.qx,
            ax: g.ax,
            qy: g.qy,
            ay: g.ay,
            level,
            alphabet_size: k,
            offsets,
            total,
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of words of length at most `l`.
    pub fn count_up_to(&self, l: usize) -> usize {
        if l >= self.level {
            self.total
        } else {
            self.offsets[l + 1]
        }
    }

    pub fn symbol_p(&self, x: usize, a: usize) -> Symbol {
        x * self.ax + a
    }

    pub fn symbol_q(&self, y: usize, b: usize) -> Symbol {
        self.qx * self.ax + y * self.ay + b
    }

    pub fn symbol_is_p(&self, s: Symbol) -> bool {
        s < self.qx * self.ax
    }

    /// Splits a symbol into (question, answer) within its prover's block.
    pub fn symbol_parts(&self, s: Symbol) -> (usize, usize) {
        if self.symbol_is_p(s) {
            (s / self.ax, s % self.ax)
        } else {
            let r = s - self.qx * self.ax;
            (r / self.ay, r % self.ay)
        }
    }

    pub fn word_len(&self, idx: usize) -> usize {
        debug_assert!(idx < self.total);
        match self.offsets.binary_search(&idx) {
            Ok(l) => l,
            Err(l) => l - 1,
        }
    }

    pub fn word(&self, idx: usize) -> Vec<Symbol> {
        let l = self.word_len(idx);
        let mut rest = idx - self.offsets[l];
        let mut out = vec![0; l];
        for pos in (0..l).rev() {
            out[pos] = rest % self.alphabet_size;
            rest /= self.alphabet_size;
        }
        out
    }

    pub fn index(&self, word: &[Symbol]) -> usize {
        debug_assert!(word.len() <= self.level);
        let mut v = 0usize;
        for &s in word {
            debug_assert!(s < self.alphabet_size);
            v = v * self.alphabet_size + s;
        }
        self.offsets[word.len()] + v
    }

    /// Index of the word prepended with one symbol.
    pub fn prepend(&self, s: Symbol, idx: usize) -> usize {
        let l = self.word_len(idx);
        debug_assert!(l < self.level);
        let digits = idx - self.offsets[l];
        self.offsets[l + 1] + (s * self.alphabet_size.pow(l as u32)) + digits
    }

    /// Index of the word with its symbols reversed.
    pub fn reversal(&self, idx: usize) -> usize {
        let l = self.word_len(idx);
        if l <= 1 {
            return idx;
        }
        let w = self.word(idx);
        let mut v = 0usize;
        for &s in w.iter().rev() {
            v = v * self.alphabet_size + s;
        }
        self.offsets[l] + v
    }
}

/// Provenance of an equality constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Normalization,
    Shifting,
    Commutation,
    SumA,
    SumB,
    OrthoA,
    OrthoB,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Normalization,
        Family::Shifting,
        Family::Commutation,
        Family::SumA,
        Family::SumB,
        Family::OrthoA,
        Family::OrthoB,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::Normalization => "normalization",
            Family::Shifting => "shifting",
            Family::Commutation => "commutation",
            Family::SumA => "sum-a",
            Family::SumB => "sum-b",
            Family::OrthoA => "ortho-a",
            Family::OrthoB => "ortho-b",
        }
    }

    pub fn from_label(s: &str) -> Option<Family> {
        Family::ALL.iter().copied().find(|f| f.label() == s)
    }
}

/// Sparse equality `sum c_k G[i_k][j_k] = rhs` over unordered index pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub family: Family,
    /// Terms `(i, j, c)` with `i <= j`, sorted, coefficients merged.
    pub terms: Vec<(u32, u32, f64)>,
    pub rhs: f64,
}

impl Constraint {
    fn new(family: Family, raw: &[(usize, usize, f64)], rhs: f64) -> Option<Constraint> {
        let mut terms: Vec<(u32, u32, f64)> = Vec::with_capacity(raw.len());
        for &(i, j, c) in raw {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            terms.push((i as u32, j as u32, c));
        }
        terms.sort_by_key(|&(i, j, _)| (i, j));
        let mut merged: Vec<(u32, u32, f64)> = Vec::with_capacity(terms.len());
        for (i, j, c) in terms {
            match merged.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += c,
                _ => merged.push((i, j, c)),
            }
        }
        merged.retain(|&(_, _, c)| c != 0.0);
        if merged.is_empty() {
            return if rhs == 0.0 {
                None
            } else {
                Some(Constraint { family, terms: merged, rhs })
            };
        }
        let scale = merged[0].2;
        let mut rhs = rhs;
        if scale != 1.0 {
            for t in merged.iter_mut() {
                t.2 /= scale;
            }
            rhs /= scale;
        }
        Some(Constraint {
            family,
            terms: merged,
            rhs,
        })
    }

    fn dedup_key(&self) -> (Vec<(u32, u32, u64)>, u64) {
        (
            self.terms
                .iter()
                .map(|&(i, j, c)| (i, j, c.to_bits()))
                .collect(),
            self.rhs.to_bits(),
        )
    }
}

/// Compiled level-N moment problem in Gram coordinates.
#[derive(Debug, Clone)]
pub struct MomentProblem {
    pub index: WordIndex,
    pub dim: usize,
    pub level: usize,
    pub game_hash: String,
    /// Objective `sum w * G[i][j]`, every index a length-1 word.
    pub objective: Vec<(u32, u32, f64)>,
    pub constraints: Vec<Constraint>,
}

pub fn game_hash(g: &Game) -> String {
    let mut h = Sha256::new();
    h.update(game_to_json(g).as_bytes());
    let out = h.finalize();
    out.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn build_word_index(g: &Game, level: usize) -> Result<WordIndex> {
    let violations = validate_game(g);
    if !violations.is_empty() {
        return Err(Error::InvalidGame(violations.join("; ")));
    }
    WordIndex::new(g, level, WORD_CAP)
}

fn objective_terms(g: &Game, w: &WordIndex) -> Vec<(u32, u32, f64)> {
    let mut out = Vec::new();
    for x in 0..g.qx {
        for y in 0..g.qy {
            let mu = g.mu(x, y);
            if mu == 0.0 {
                continue;
            }
            for a in 0..g.ax {
                for b in 0..g.ay {
                    if g.accepts(x, y, a, b) {
                        let i = w.index(&[w.symbol_p(x, a)]);
                        let j = w.index(&[w.symbol_q(y, b)]);
                        out.push((i as u32, j as u32, mu));
                    }
                }
            }
        }
    }
    out
}

/// Emits every constraint of the level-`n` problem, duplicates included, in
/// a fixed deterministic order. Keeps no state, so it scales to levels
/// whose materialized constraint list would not fit in memory.
pub fn for_each_constraint<F: FnMut(&Constraint)>(
    g: &Game,
    w: &WordIndex,
    mut f: F,
) -> Result<()> {
    if w.level < 1 {
        return Err(Error::InvalidInput("level must be >= 1".into()));
    }
    let inner = w.count_up_to(w.level - 1);
    let all = w.len();
    let k = w.alphabet_size;
    let np = g.qx * g.ax;

    if let Some(c) = Constraint::new(Family::Normalization, &[(0, 0, 1.0)], 1.0) {
        f(&c);
    }

    // Shifting: G[C u][t] = G[u][C t] for every symbol C and u, t short.
    for c_sym in 0..k {
        for u in 0..inner {
            let cu = w.prepend(c_sym, u);
            for t in 0..inner {
                let ct = w.prepend(c_sym, t);
                if let Some(c) = Constraint::new(
                    Family::Shifting,
                    &[(cu, t, 1.0), (u, ct, -1.0)],
                    0.0,
                ) {
                    f(&c);
                }
            }
        }
    }

    // Cross-prover commutation: G[P u][Q t] = G[Q u][P t].
    for p in 0..np {
        for q in np..k {
            for u in 0..inner {
                let pu = w.prepend(p, u);
                let qu = w.prepend(q, u);
                for t in 0..inner {
                    let qt = w.prepend(q, t);
                    let pt = w.prepend(p, t);
                    if let Some(c) = Constraint::new(
                        Family::Commutation,
                        &[(pu, qt, 1.0), (qu, pt, -1.0)],
                        0.0,
                    ) {
                        f(&c);
                    }
                }
            }
        }
    }

    // Answer sums: sum_a G[P_x^a u][t] = G[u][t], t over all words.
    for u in 0..inner {
        for t in 0..all {
            for x in 0..g.qx {
                let mut terms: Vec<(usize, usize, f64)> = (0..g.ax)
                    .map(|a| (w.prepend(w.symbol_p(x, a), u), t, 1.0))
                    .collect();
                terms.push((u, t, -1.0));
                if let Some(c) = Constraint::new(Family::SumA, &terms, 0.0) {
                    f(&c);
                }
            }
            for y in 0..g.qy {
                let mut terms: Vec<(usize, usize, f64)> = (0..g.ay)
                    .map(|b| (w.prepend(w.symbol_q(y, b), u), t, 1.0))
                    .collect();
                terms.push((u, t, -1.0));
                if let Some(c) = Constraint::new(Family::SumB, &terms, 0.0) {
                    f(&c);
                }
            }
        }
    }

    // Same-question orthogonality: G[P_x^a u][P_x^a' t] = 0 for a != a'.
    for u in 0..inner {
        for t in 0..inner {
            for x in 0..g.qx {
                for a in 0..g.ax {
                    for a2 in 0..g.ax {
                        if a == a2 {
                            continue;
                        }
                        let i = w.prepend(w.symbol_p(x, a), u);
                        let j = w.prepend(w.symbol_p(x, a2), t);
                        if let Some(c) =
                            Constraint::new(Family::OrthoA, &[(i, j, 1.0)], 0.0)
                        {
                            f(&c);
                        }
                    }
                }
            }
            for y in 0..g.qy {
                for b in 0..g.ay {
                    for b2 in 0..g.ay {
                        if b == b2 {
                            continue;
                        }
                        let i = w.prepend(w.symbol_q(y, b), u);
                        let j = w.prepend(w.symbol_q(y, b2), t);
                        if let Some(c) =
                            Constraint::new(Family::OrthoB, &[(i, j, 1.0)], 0.0)
                        {
                            f(&c);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Estimated raw constraint count before deduplication.
fn raw_constraint_estimate(g: &Game, w: &WordIndex) -> usize {
    let inner = w.count_up_to(w.level - 1);
    let all = w.len();
    let k = w.alphabet_size;
    let np = g.qx * g.ax;
    let nq = k - np;
    1 + k * inner * inner
        + np * nq * inner * inner
        + (g.qx + g.qy) * inner * all
        + inner * inner * (g.qx * g.ax * (g.ax - 1) + g.qy * g.ay * (g.ay - 1))
}

/// Compiles the level-`n` moment problem with deduplicated constraints.
pub fn build_level(g: &Game, n: usize) -> Result<MomentProblem> {
    let index = build_word_index(g, n)?;
    let est = raw_constraint_estimate(g, &index);
    if est > CONSTRAINT_CAP {
        return Err(Error::TooLarge(format!(
            "level {n} emits about {est} raw constraints; use the streaming checker"
        )));
    }
    let mut seen = HashMap::new();
    let mut constraints = Vec::new();
    for_each_constraint(g, &index, |c| {
        let key = c.dedup_key();
        if seen.insert(key, ()).is_none() {
            constraints.push(c.clone());
        }
    })?;
    Ok(MomentProblem {
        dim: index.len(),
        level: n,
        game_hash: game_hash(g),
        objective: objective_terms(g, &index),
        index,
        constraints,
    })
}

/// Per-family constraint counts plus structural checks.
#[derive(Debug, Clone)]
pub struct ConstraintAudit {
    pub counts: Vec<(Family, usize)>,
    pub total: usize,
    pub duplicates: usize,
    pub normalization_count: usize,
    pub objective_on_length_one: bool,
}

pub fn constraint_audit(p: &MomentProblem) -> ConstraintAudit {
    let mut counts: HashMap<Family, usize> = HashMap::new();
    let mut seen = HashMap::new();
    let mut duplicates = 0usize;
    for c in &p.constraints {
        *counts.entry(c.family).or_insert(0) += 1;
        if seen.insert(c.dedup_key(), ()).is_some() {
            duplicates += 1;
        }
    }
    let objective_on_length_one = p.objective.iter().all(|&(i, j, _)| {
        p.index.word_len(i as usize) == 1 && p.index.word_len(j as usize) == 1
    });
    ConstraintAudit {
        counts: Family::ALL
            .iter()
            .map(|&f| (f, counts.get(&f).copied().unwrap_or(0)))
            .collect(),
        total: p.constraints.len(),
        duplicates,
        normalization_count: counts.get(&Family::Normalization).copied().unwrap_or(0),
        objective_on_length_one,
    }
}

/// A feasible (or near-feasible) point given by explicit real Gram vectors,
/// one row per word.
#[derive(Debug, Clone)]
pub struct GramSolution {
    pub index: WordIndex,
    /// `dim x rank`; row `s` is the vector of word `s`.
    pub vectors: DMatrix<f64>,
}

/// Worst-case equality residuals per constraint family, plus the smallest
/// eigenvalue proxy (zero here: a Gram matrix is PSD by construction).
#[derive(Debug, Clone)]
pub struct FamilyResiduals {
    pub per_family: Vec<(Family, f64)>,
    pub max: f64,
}

impl GramSolution {
    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn rank(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.vectors.row(i).dot(&self.vectors.row(j))
    }

    /// Moment-matrix entry for (row word, column word) under the
    /// row-reversal convention.
    pub fn moment(&self, s: usize, t: usize) -> f64 {
        self.entry(self.index.reversal(s), t)
    }

    pub fn gamma(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j))
    }

    pub fn objective_value(&self, g: &Game) -> f64 {
        let w = &self.index;
        let mut v = 0.0;
        for &(i, j, c) in &objective_terms(g, w) {
            v += c * self.entry(i as usize, j as usize);
        }
        v
    }

    /// Streaming residual check of every constraint family against the
    /// Gram vectors. Duplicate emissions are harmless for a max.
    pub fn verify(&self, g: &Game) -> Result<FamilyResiduals> {
        let mut worst: HashMap<Family, f64> = HashMap::new();
        for_each_constraint(g, &self.index, |c| {
            let mut v = -c.rhs;
            for &(i, j, coef) in &c.terms {
                v += coef * self.entry(i as usize, j as usize);
            }
            let e = worst.entry(c.family).or_insert(0.0);
            if v.abs() > *e {
                *e = v.abs();
            }
        })?;
        let per_family: Vec<(Family, f64)> = Family::ALL
            .iter()
            .map(|&f| (f, worst.get(&f).copied().unwrap_or(0.0)))
            .collect();
        let max = per_family.iter().map(|&(_, v)| v).fold(0.0, f64::max);
        Ok(FamilyResiduals { per_family, max })
    }

    /// Restriction to a lower level: word indices are level-independent, so
    /// the restriction keeps a prefix of the rows.
    pub fn restrict(&self, g: &Game, level: usize) -> Result<GramSolution> {
        if level > self.index.level || level == 0 {
            return Err(Error::InvalidInput(format!(
                "cannot restrict level {} to {}",
                self.index.level, level
            )));
        }
        let index = WordIndex::new(g, level, WORD_CAP)?;
        let vectors = self.vectors.rows(0, index.len()).into_owned();
        Ok(GramSolution { index, vectors })
    }
}

/// Residual norms of the vector-sum relation `v_u = sum_a v_{P_x^a u}` (and
/// its second-prover analogue), which every feasible point satisfies.
pub fn vector_sum_residual(sol: &GramSolution) -> f64 {
    let w = &sol.index;
    let inner = w.count_up_to(w.level - 1);
    let mut worst = 0.0f64;
    for u in 0..inner {
        for x in 0..w.qx {
            let mut diff = sol.vectors.row(u).into_owned();
            for a in 0..w.ax {
                diff -= sol.vectors.row(w.prepend(w.symbol_p(x, a), u));
            }
            worst = worst.max(diff.norm());
        }
        for y in 0..w.qy {
            let mut diff = sol.vectors.row(u).into_owned();
            for b in 0..w.ay {
                diff -= sol.vectors.row(w.prepend(w.symbol_q(y, b), u));
            }
            worst = worst.max(diff.norm());
        }
    }
    worst
}

/// Moment vectors induced by an exactly commuting projective strategy:
/// `v_w = E_{w_1} E_{w_2} ... E_{w_L} |psi>` with `|psi>` a purification of
/// the strategy state. The resulting Gram solution satisfies every
/// constraint family to machine precision and its objective equals the
/// strategy's (first-ordering) value.
pub fn gram_from_strategy(g: &Game, s: &Strategy, level: usize) -> Result<GramSolution> {
    s.validate(g)?;
    let rep = crate::games::commutator_report(s);
    if rep.delta_max > 1e-10 {
        return Err(Error::InvalidInput(format!(
            "strategy is only {:.3e}-AC; moment vectors need exact commutation",
            rep.delta_max
        )));
    }
    for fam in [&s.povm_a, &s.povm_b] {
        for povm in fam {
            for e in povm {
                let dev = crate::linalg::operator_norm(&(e * e - e));
                if dev > 1e-10 {
                    return Err(Error::InvalidInput(format!(
                        "strategy is not projective (E^2 deviation {dev:.3e})"
                    )));
                }
            }
        }
    }
    let index = build_word_index(g, level)?;

    // Purify the state: columns of rho^(1/2) give |psi> in H (x) H with the
    // operators acting on the first factor.
    let d = s.dim;
    let (vals, vecs) = hermitian_eigen(&s.rho);
    let kept: Vec<usize> = (0..d).filter(|&k| vals[k] > 1e-14).collect();
    let r = kept.len();
    let mut psi = nalgebra::DVector::<num_complex::Complex64>::zeros(d * r);
    for (kk, &k) in kept.iter().enumerate() {
        let scale = num_complex::Complex64::new(vals[k].sqrt(), 0.0);
        for i in 0..d {
            psi[i * r + kk] = scale * vecs[(i, k)];
        }
    }

    let symbol_op = |sym: Symbol| -> &crate::linalg::CMatrix {
        if index.symbol_is_p(sym) {
            let (x, a) = index.symbol_parts(sym);
            &s.povm_a[x][a]
        } else {
            let (y, b) = index.symbol_parts(sym);
            &s.povm_b[y][b]
        }
    };
    let apply = |op: &crate::linalg::CMatrix,
                 v: &nalgebra::DVector<num_complex::Complex64>| {
        let mut out = nalgebra::DVector::<num_complex::Complex64>::zeros(d * r);
        for i in 0..d {
            for j in 0..d {
                let c = op[(i, j)];
                if c.norm_sqr() == 0.0 {
                    continue;
                }
                for kk in 0..r {
                    out[i * r + kk] += c * v[j * r + kk];
                }
            }
        }
        out
    };

    let total = index.len();
    let mut cvecs: Vec<nalgebra::DVector<num_complex::Complex64>> = Vec::with_capacity(total);
    cvecs.push(psi);
    for idx in 1..total {
        let word_l = index.word_len(idx);
        // Strip the leading symbol: idx = offsets[l] + s*k^(l-1) + rest.
        let digits = idx - index.count_up_to(word_l - 1);
        let pow = index.alphabet_size.pow(word_l as u32 - 1);
        let lead = digits / pow;
        let rest_digits = digits % pow;
        let rest_idx = if word_l == 1 {
            0
        } else {
            index.count_up_to(word_l - 2) + rest_digits
        };
        let v = apply(symbol_op(lead), &cvecs[rest_idx]);
        cvecs.push(v);
    }

    let max_imag = cvecs
        .iter()
        .flat_map(|v| v.iter())
        .map(|z| z.im.abs())
        .fold(0.0, f64::max);
    let rank = if max_imag < 1e-13 { d * r } else { 2 * d * r };
    let mut vectors = DMatrix::<f64>::zeros(total, rank);
    for (row, v) in cvecs.iter().enumerate() {
        for i in 0..d * r {
            vectors[(row, i)] = v[i].re;
            if rank > d * r {
                vectors[(row, d * r + i)] = v[i].im;
            }
        }
    }
    Ok(GramSolution { index, vectors })
}

/// Sanity link between the two value notions: the Gram objective of a
/// strategy-induced solution equals the strategy's game value.
pub fn strategy_objective_consistency(g: &Game, s: &Strategy, level: usize) -> Result<f64> {
    let sol = gram_from_strategy(g, s, level)?;
    Ok((sol.objective_value(g) - strategy_value(g, s)?).abs())
}

impl MomentProblem {
    /// Plain-text serialization: header, objective triplets, sparse
    /// constraint rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "qcsdp-moment-problem v1");
        let _ = writeln!(s, "dim {}", self.dim);
        let _ = writeln!(s, "level {}", self.level);
        let _ = writeln!(
            s,
            "alphabet {} {} {} {}",
            self.index.qx, self.index.ax, self.index.qy, self.index.ay
        );
        let _ = writeln!(s, "game {}", self.game_hash);
        let _ = writeln!(s, "objective {}", self.objective.len());
        for &(i, j, w) in &self.objective {
            let _ = writeln!(s, "{i} {j} {w:.17e}");
        }
        let _ = writeln!(s, "constraints {}", self.constraints.len());
        for c in &self.constraints {
            let _ = write!(s, "{} {:.17e} {}", c.family.label(), c.rhs, c.terms.len());
            for &(i, j, coef) in &c.terms {
                let _ = write!(s, " {i} {j} {coef:.17e}");
            }
            let _ = writeln!(s);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<MomentProblem> {
        let mut lines = text.lines();
        let parse_err = |m: &str| Error::Parse(format!("moment problem: {m}"));
        let header = lines.next().ok_or_else(|| parse_err("empty"))?;
        if header.trim() != "qcsdp-moment-problem v1" {
            return Err(parse_err("bad header"));
        }
        fn field<'a>(
            lines: &mut std::str::Lines<'a>,
            name: &str,
        ) -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("moment problem: truncated".into()))?;
            line.strip_prefix(name)
                .map(|r| r.trim().to_string())
                .ok_or_else(|| Error::Parse(format!("moment problem: expected {name}")))
        }
        let dim: usize = field(&mut lines, "dim ")?.parse().map_err(|_| parse_err("dim"))?;
        let level: usize = field(&mut lines, "level ")?.parse().map_err(|_| parse_err("level"))?;
        let alph = field(&mut lines, "alphabet ")?;
        let parts: Vec<usize> = alph
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err("alphabet")))
            .collect::<Result<_>>()?;
        if parts.len() != 4 {
            return Err(parse_err("alphabet arity"));
        }
        let game_hash = field(&mut lines, "game ")?;
        let shell = Game {
            qx: parts[0],
            qy: parts[2],
            ax: parts[1],
            ay: parts[3],
            mu: vec![vec![1.0 / (parts[0] * parts[2]) as f64; parts[2]]; parts[0]],
            predicate: vec![vec![vec![vec![false; parts[3]]; parts[1]]; parts[2]]; parts[0]],
        };
        let index = WordIndex::new(&shell, level, WORD_CAP)?;
        if index.len() != dim {
            return Err(parse_err("dim does not match alphabet and level"));
        }
        let nobj: usize = field(&mut lines, "objective ")?.parse().map_err(|_| parse_err("objective"))?;
        let mut objective = Vec::with_capacity(nobj);
        for _ in 0..nobj {
            let line = lines.next().ok_or_else(|| parse_err("truncated objective"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(parse_err("objective row"));
            }
            objective.push((
                toks[0].parse().map_err(|_| parse_err("objective index"))?,
                toks[1].parse().map_err(|_| parse_err("objective index"))?,
                toks[2].parse().map_err(|_| parse_err("objective weight"))?,
            ));
        }
        let ncon: usize = field(&mut lines, "constraints ")?.parse().map_err(|_| parse_err("constraints"))?;
        let mut constraints = Vec::with_capacity(ncon);
        for _ in 0..ncon {
            let line = lines.next().ok_or_else(|| parse_err("truncated constraints"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 3 {
                return Err(parse_err("constraint row"));
            }
            let family = Family::from_label(toks[0]).ok_or_else(|| parse_err("family"))?;
            let rhs: f64 = toks[1].parse().map_err(|_| parse_err("rhs"))?;
            let k: usize = toks[2].parse().map_err(|_| parse_err("term count"))?;
            if toks.len() != 3 + 3 * k {
                return Err(parse_err("term arity"));
            }
            let mut terms = Vec::with_capacity(k);
            for t in 0..k {
                terms.push((
                    toks[3 + 3 * t].parse().map_err(|_| parse_err("term index"))?,
                    toks[4 + 3 * t].parse().map_err(|_| parse_err("term index"))?,
                    toks[5 + 3 * t].parse().map_err(|_| parse_err("term coef"))?,
                ));
            }
            constraints.push(Constraint { family, terms, rhs });
        }
        Ok(MomentProblem {
            dim,
            level,
            game_hash,
            objective,
            index,
            constraints,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{chsh, chsh_commuting_strategy, Game};

    fn trivial_game() -> Game {
        Game {
            qx: 1,
            qy: 1,
            ax: 1,
            ay: 1,
            mu: vec![vec![1.0]],
            predicate: vec![vec![vec![vec![true]]]],
        }
    }

    #[test]
    fn word_counts() {
        let w = build_word_index(&trivial_game(), 1).unwrap();
        assert_eq!(w.len(), 3);
        let w = build_word_index(&chsh(), 1).unwrap();
        assert_eq!(w.len(), 9);
        let w = build_word_index(&chsh(), 2).unwrap();
        assert_eq!(w.len(), 73);
        let w = build_word_index(&chsh(), 4).unwrap();
        assert_eq!(w.len(), 4681);
        assert!(matches!(
            build_word_index(&chsh(), 5),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn word_roundtrip_and_reversal() {
        let w = build_word_index(&chsh(), 3).unwrap();
        for idx in 0..w.len() {
            let word = w.word(idx);
            assert_eq!(w.index(&word), idx);
            let rev = w.reversal(idx);
            assert_eq!(w.reversal(rev), idx);
            let mut rw = word.clone();
            rw.reverse();
            assert_eq!(w.index(&rw), rev);
        }
        // phi first, then length-1 words in alphabet order.
        assert_eq!(w.word(0), Vec::<Symbol>::new());
        for s in 0..8 {
            assert_eq!(w.word(1 + s), vec![s]);
        }
    }

    #[test]
    fn prepend_matches_index() {
        let w = build_word_index(&chsh(), 3).unwrap();
        for idx in 0..w.count_up_to(2) {
            let word = w.word(idx);
            for s in 0..w.alphabet_size {
                let mut long = vec![s];
                long.extend_from_slice(&word);
                assert_eq!(w.prepend(s, idx), w.index(&long));
            }
        }
    }

    #[test]
    fn trivial_game_level_one_forces_all_ones() {
        let g = trivial_game();
        let p = build_level(&g, 1).unwrap();
        assert_eq!(p.dim, 3);
        let audit = constraint_audit(&p);
        assert_eq!(audit.normalization_count, 1);
        assert_eq!(audit.duplicates, 0);
        assert!(audit.objective_on_length_one);
        // The all-ones rank-1 Gram matrix is feasible with zero residual.
        let sol = GramSolution {
            index: p.index.clone(),
            vectors: DMatrix::from_element(3, 1, 1.0),
        };
        assert_eq!(sol.verify(&g).unwrap().max, 0.0);
        assert!((sol.objective_value(&g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn chsh_level_one_audit() {
        let p = build_level(&chsh(), 1).unwrap();
        let audit = constraint_audit(&p);
        assert_eq!(audit.normalization_count, 1);
        assert_eq!(audit.duplicates, 0);
        assert!(audit.objective_on_length_one);
        assert_eq!(p.objective.len(), 8);
    }

    // Frozen family counts for CHSH level 2, recorded from the first
    // audited build; any change to emission or dedup must be deliberate.
    #[test]
    fn chsh_level_two_family_counts_frozen() {
        let p = build_level(&chsh(), 2).unwrap();
        let audit = constraint_audit(&p);
        assert_eq!(audit.duplicates, 0);
        let by: HashMap<Family, usize> = audit.counts.iter().copied().collect();
        let expect = [
            (Family::Normalization, 1),
            (Family::Shifting, 576),
            (Family::Commutation, 1152),
            (Family::SumA, 1314),
            (Family::SumB, 1314),
            (Family::OrthoA, 162),
            (Family::OrthoB, 162),
        ];
        for (f, want) in expect {
            assert_eq!(by[&f], want, "family {}", f.label());
        }
        assert_eq!(audit.total, expect.iter().map(|&(_, c)| c).sum::<usize>());
    }

    #[test]
    fn strategy_gram_is_feasible_and_matches_value() {
        let g = chsh();
        let s = chsh_commuting_strategy();
        for level in [1usize, 2, 3] {
            let sol = gram_from_strategy(&g, &s, level).unwrap();
            let res = sol.verify(&g).unwrap();
            assert!(res.max < 1e-12, "level {level} residual {}", res.max);
            let want = (2.0 + 2f64.sqrt()) / 4.0;
            assert!((sol.objective_value(&g) - want).abs() < 1e-12);
            assert!(vector_sum_residual(&sol) < 1e-12);
            assert!((sol.entry(0, 0) - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn strategy_gram_restriction_is_lower_level_solution() {
        let g = chsh();
        let s = chsh_commuting_strategy();
        let sol3 = gram_from_strategy(&g, &s, 3).unwrap();
        let sol2 = sol3.restrict(&g, 2).unwrap();
        assert_eq!(sol2.dim(), 73);
        assert!(sol2.verify(&g).unwrap().max < 1e-12);
        let direct = gram_from_strategy(&g, &s, 2).unwrap();
        assert!((sol2.objective_value(&g) - direct.objective_value(&g)).abs() < 1e-14);
    }

    #[test]
    fn gram_from_strategy_rejects_noncommuting() {
        let g = chsh();
        let s = crate::games::chsh_optimal_strategy();
        assert!(matches!(
            gram_from_strategy(&g, &s, 2),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn moment_problem_text_roundtrip() {
        let p = build_level(&chsh(), 2).unwrap();
        let text = p.to_text();
        let q = MomentProblem::from_text(&text).unwrap();
        assert_eq!(q.dim, p.dim);
        assert_eq!(q.level, p.level);
        assert_eq!(q.game_hash, p.game_hash);
        assert_eq!(q.objective, p.objective);
        assert_eq!(q.constraints.len(), p.constraints.len());
        for (a, b) in p.constraints.iter().zip(&q.constraints) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn large_level_build_is_rejected_but_streaming_works() {
        let g = chsh();
        assert!(matches!(build_level(&g, 4), Err(Error::TooLarge(_))));
        let w = build_word_index(&g, 4).unwrap();
        let mut count = 0usize;
        for_each_constraint(&g, &w, |_| count += 1).unwrap();
        assert!(count > 1_000_000);
    }
}
