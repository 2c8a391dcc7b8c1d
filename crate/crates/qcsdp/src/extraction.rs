//! Assignment extraction from a strategy for an oracularized constraint game.
//!
//! From the second prover's pair measurements we form one binary POVM per
//! variable by averaging the single-variable marginals over the partner
//! variable. Measuring the square roots of these POVMs sequentially on the
//! shared state induces a probability distribution over global assignments;
//! for a perfect commuting strategy the sampled assignments satisfy the
//! instance with probability 1, and the empirical satisfaction probability
//! degrades gracefully with the strategy's value defect and commutators.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::games::{commutator_report, strategy_value, CspInstance, OracleGame, Strategy};
use crate::linalg::{psd_sqrt, CMatrix};
use crate::{Error, Result};

/// Variable count above which the satisfaction probability is estimated by
/// Monte-Carlo sampling instead of exact branch enumeration.
pub const EXACT_ENUMERATION_LIMIT: usize = 12;

// ---------------------------------------------------------------------
// Marginal POVMs.
// ---------------------------------------------------------------------

/// One binary POVM per variable on the second prover's space: the average
/// over partner variables of the single-variable marginal of the pair POVM.
pub struct MarginalPovm {
    pub nvars: usize,
    pub dim: usize,
    /// `elements[i][c]` is the POVM element for variable `i` taking value `c`.
    pub elements: Vec<[CMatrix; 2]>,
}

/// Builds the per-variable marginal POVMs from a strategy for an oracularized
/// game. For each variable `i`, averages over all `j` the marginal obtained
/// from the POVM of the pair containing `i` and `j`, summing out the partner
/// variable's bit. Pair answers are two bits with the high bit belonging to
/// the pair's first (smaller-index) variable.
pub fn marginals(og: &OracleGame, s: &Strategy) -> Result<MarginalPovm> {
    let n = og.nvars;
    if s.povm_b.len() != og.pairs.len() {
        return Err(Error::DimensionMismatch(format!(
            "strategy answers {} second-prover questions but the oracle game has {} pairs",
            s.povm_b.len(),
            og.pairs.len()
        )));
    }
    let dim = s.dim;
    let mut pair_of = vec![vec![usize::MAX; n]; n];
    for (y, &(u, v)) in og.pairs.iter().enumerate() {
        pair_of[u][v] = y;
        pair_of[v][u] = y;
    }
    let mut elements = Vec::with_capacity(n);
    for i in 0..n {
        let mut c0 = CMatrix::zeros(dim, dim);
        let mut c1 = CMatrix::zeros(dim, dim);
        for j in 0..n {
            let y = pair_of[i][j];
            if y == usize::MAX {
                return Err(Error::InvalidInput(format!(
                    "oracle game has no pair for variables ({i}, {j})"
                )));
            }
            let (u, _v) = og.pairs[y];
            // Bit position of variable i in the two-bit answer: the pair's
            // first variable owns the high bit. The diagonal pair (i, i)
            // reads variable i off the high bit.
            let shift = if u == i { 1 } else { 0 };
            for (b, e) in s.povm_b[y].iter().enumerate() {
                if (b >> shift) & 1 == 0 {
                    c0 += e;
                } else {
                    c1 += e;
                }
            }
        }
        let scale = Complex64::new(1.0 / n as f64, 0.0);
        elements.push([c0 * scale, c1 * scale]);
    }
    let povm = MarginalPovm {
        nvars: n,
        dim,
        elements,
    };
    povm.validate()?;
    Ok(povm)
}

impl MarginalPovm {
    /// Checks completeness (`C_i^0 + C_i^1 = Id` within 1e-9) and positivity
    /// (smallest eigenvalue above -1e-9) per variable.
    pub fn validate(&self) -> Result<()> {
        let eye = CMatrix::identity(self.dim, self.dim);
        for (i, pair) in self.elements.iter().enumerate() {
            let sum = &pair[0] + &pair[1];
            if (sum - &eye).norm() > 1e-9 {
                return Err(Error::Verification(format!(
                    "marginal POVM for variable {i} is not complete"
                )));
            }
            for e in pair {
                let min = e
                    .clone()
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .fold(f64::INFINITY, |a, &v| a.min(v));
                if min < -1e-9 {
                    return Err(Error::NotPsd(min));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Sequential square-root sampling.
// ---------------------------------------------------------------------

/// Samples assignments `(c_1, ..., c_n)` with probability
/// `Tr(sqrt(C_n^{c_n}) ... sqrt(C_1^{c_1}) rho sqrt(C_1^{c_1}) ... sqrt(C_n^{c_n}))`
/// by measuring the square-root POVMs sequentially in ascending variable
/// order, collapsing the state after each outcome.
pub struct AssignmentSampler {
    pub nvars: usize,
    /// `sqrt_c[i][c] = sqrt(C_i^c)`, precomputed.
    sqrt_c: Vec<[CMatrix; 2]>,
    rho: CMatrix,
    rng: ChaCha8Rng,
}

impl AssignmentSampler {
    /// Precomputes the square roots and seeds the generator.
    pub fn new(povm: &MarginalPovm, rho: &CMatrix, seed: u64) -> Result<AssignmentSampler> {
        if rho.nrows() != povm.dim {
            return Err(Error::DimensionMismatch(format!(
                "state is {}-dimensional but the POVMs act on dimension {}",
                rho.nrows(),
                povm.dim
            )));
        }
        let tr = rho.trace().re;
        if (tr - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "state must have unit trace, got {tr}"
            )));
        }
        let mut sqrt_c = Vec::with_capacity(povm.nvars);
        for pair in &povm.elements {
            sqrt_c.push([psd_sqrt(&pair[0])?, psd_sqrt(&pair[1])?]);
        }
        Ok(AssignmentSampler {
            nvars: povm.nvars,
            sqrt_c,
            rho: rho.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Draws one assignment; deterministic given the seed sequence.
    pub fn sample(&mut self) -> Result<Vec<u8>> {
        let mut sigma = self.rho.clone();
        let mut out = Vec::with_capacity(self.nvars);
        for i in 0..self.nvars {
            let total = sigma.trace().re;
            if total <= 0.0 {
                return Err(Error::Verification(format!(
                    "state collapsed to trace {total} before variable {i}"
                )));
            }
            let branch = |c: usize| -> CMatrix {
                let r = &self.sqrt_c[i][c];
                r * &sigma * r
            };
            let b0 = branch(0);
            let b1 = branch(1);
            let p0 = b0.trace().re / total;
            let p1 = b1.trace().re / total;
            if (p0 + p1 - 1.0).abs() > 1e-6 || p0 < -1e-9 || p1 < -1e-9 {
                return Err(Error::Verification(format!(
                    "branch probabilities for variable {i} are ({p0}, {p1}); \
                     they must be nonnegative and sum to 1"
                )));
            }
            let draw: f64 = self.rng.gen();
            if draw < p0 {
                out.push(0);
                sigma = b0;
            } else {
                out.push(1);
                sigma = b1;
            }
        }
        Ok(out)
    }
}

/// Exact branch probabilities for every assignment, by direct matrix
/// products; index `z` holds the probability of the assignment whose bit `i`
/// (from the most significant of `nvars` bits) is variable `i`'s value.
pub fn exact_assignment_distribution(povm: &MarginalPovm, rho: &CMatrix) -> Result<Vec<f64>> {
    let n = povm.nvars;
    if n > EXACT_ENUMERATION_LIMIT {
        return Err(Error::TooLarge(format!(
            "exact enumeration over {n} variables exceeds the limit of {EXACT_ENUMERATION_LIMIT}"
        )));
    }
    let mut sqrt_c = Vec::with_capacity(n);
    for pair in &povm.elements {
        sqrt_c.push([psd_sqrt(&pair[0])?, psd_sqrt(&pair[1])?]);
    }
    // Depth-first over the collapse tree: one matrix product per edge.
    let mut probs = vec![0.0; 1usize << n];
    let mut stack: Vec<(usize, usize, CMatrix)> = vec![(0, 0, rho.clone())];
    while let Some((depth, prefix, sigma)) = stack.pop() {
        if depth == n {
            probs[prefix] = sigma.trace().re;
            continue;
        }
        for c in 0..2usize {
            let r = &sqrt_c[depth][c];
            stack.push((depth + 1, (prefix << 1) | c, r * &sigma * r));
        }
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::Verification(format!(
            "assignment distribution sums to {total}, expected 1"
        )));
    }
    Ok(probs)
}

// ---------------------------------------------------------------------
// End-to-end soundness check.
// ---------------------------------------------------------------------

/// Report of the end-to-end extraction check for one strategy.
#[derive(Debug, Clone)]
pub struct SoundnessReport {
    pub nvars: usize,
    /// Value of the strategy in the oracularized game.
    pub game_value: f64,
    /// `1 - game_value`.
    pub eps: f64,
    /// Largest cross-party commutator norm of the strategy.
    pub delta_max: f64,
    /// Number of Monte-Carlo samples used (0 when exact).
    pub samples: usize,
    /// Expected weighted fraction of clauses satisfied by a sampled
    /// assignment.
    pub sat_prob: f64,
    /// True when `sat_prob` was computed by exact enumeration.
    pub exact: bool,
}

/// Weighted fraction of clauses of `csp` satisfied by the assignment.
pub fn satisfied_fraction(csp: &CspInstance, assignment: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut sat = 0.0;
    for cl in &csp.clauses {
        total += cl.weight;
        let bits = [
            assignment[cl.vars[0]],
            assignment[cl.vars[1]],
            assignment[cl.vars[2]],
        ];
        if cl.accept.iter().any(|acc| *acc == bits) {
            sat += cl.weight;
        }
    }
    if total > 0.0 {
        sat / total
    } else {
        1.0
    }
}

/// Runs the full extraction pipeline: evaluates the strategy on the
/// oracularized game, builds the marginal POVMs, and measures the expected
/// satisfied fraction of the instance under the induced assignment
/// distribution — exactly for up to [`EXACT_ENUMERATION_LIMIT`] variables,
/// by seeded Monte-Carlo otherwise.
pub fn soundness_check(
    csp: &CspInstance,
    og: &OracleGame,
    s: &Strategy,
    samples: usize,
    seed: u64,
) -> Result<SoundnessReport> {
    let game_value = strategy_value(&og.game, s)?;
    let delta_max = commutator_report(s).delta_max;
    let povm = marginals(og, s)?;
    let (sat_prob, exact, used) = if og.nvars <= EXACT_ENUMERATION_LIMIT {
        let dist = exact_assignment_distribution(&povm, &s.rho)?;
        let n = og.nvars;
        let mut expected = 0.0;
        for (z, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let assignment: Vec<u8> =
                (0..n).map(|i| ((z >> (n - 1 - i)) & 1) as u8).collect();
            expected += p * satisfied_fraction(csp, &assignment);
        }
        (expected, true, 0)
    } else {
        if samples == 0 {
            return Err(Error::InvalidInput(
                "Monte-Carlo estimation needs a positive sample budget".into(),
            ));
        }
        let mut sampler = AssignmentSampler::new(&povm, &s.rho, seed)?;
        let mut acc = 0.0;
        for _ in 0..samples {
            let assignment = sampler.sample()?;
            acc += satisfied_fraction(csp, &assignment);
        }
        (acc / samples as f64, false, samples)
    };
    Ok(SoundnessReport {
        nvars: og.nvars,
        game_value,
        eps: 1.0 - game_value,
        delta_max,
        samples: used,
        sat_prob,
        exact,
    })
}

/// Renders soundness reports as CSV with nine significant digits.
pub fn soundness_csv(rows: &[SoundnessReport]) -> String {
    let mut out = String::from("nvars,gameValue,eps,deltaMax,samples,satProb,satProbExact\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{},{:.8e},{}\n",
            r.nvars, r.game_value, r.eps, r.delta_max, r.samples, r.sat_prob, r.exact
        ));
    }
    out
}

// ---------------------------------------------------------------------
// Tests.
// ---------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{honest_strategy, oracularize, Clause};

    fn small_csp() -> CspInstance {
        CspInstance {
            nvars: 4,
            clauses: vec![
                Clause {
                    vars: [0, 1, 2],
                    accept: vec![[1, 0, 1]],
                    weight: 0.5,
                },
                Clause {
                    vars: [1, 2, 3],
                    accept: vec![[0, 1, 0], [1, 1, 1]],
                    weight: 0.5,
                },
            ],
        }
    }

    /// Three clauses on three variables with no common satisfying
    /// assignment: each pins a different variable pattern.
    fn unsat_csp() -> CspInstance {
        let all_with = |f: &dyn Fn(&[u8; 3]) -> bool| -> Vec<[u8; 3]> {
            (0..8u8)
                .map(|z| [(z >> 2) & 1, (z >> 1) & 1, z & 1])
                .filter(|bits| f(bits))
                .collect()
        };
        CspInstance {
            nvars: 3,
            clauses: vec![
                // x0 xor x1
                Clause {
                    vars: [0, 1, 2],
                    accept: all_with(&|b| b[0] != b[1]),
                    weight: 1.0 / 3.0,
                },
                // x1 xor x2
                Clause {
                    vars: [0, 1, 2],
                    accept: all_with(&|b| b[1] != b[2]),
                    weight: 1.0 / 3.0,
                },
                // x0 xor x2 must hold with opposite parity: x0 == x2 forced
                // by the two above, so requiring x0 != x2 is contradictory.
                Clause {
                    vars: [0, 1, 2],
                    accept: all_with(&|b| b[0] != b[2]),
                    weight: 1.0 / 3.0,
                },
            ],
        }
    }

    #[test]
    fn honest_marginals_are_deterministic() {
        let csp = small_csp();
        let og = oracularize(&csp).unwrap();
        let z = [1u8, 0, 1, 0];
        let s = honest_strategy(&og, &z);
        let povm = marginals(&og, &s).unwrap();
        for (i, &zi) in z.iter().enumerate() {
            let hit = povm.elements[i][zi as usize].trace().re;
            let miss = povm.elements[i][1 - zi as usize].trace().re;
            assert!((hit - 1.0).abs() < 1e-12, "variable {i}");
            assert!(miss.abs() < 1e-12, "variable {i}");
        }
    }

    #[test]
    fn honest_sampler_returns_the_assignment() {
        let csp = small_csp();
        let og = oracularize(&csp).unwrap();
        let z = vec![1u8, 0, 1, 0];
        let s = honest_strategy(&og, &z);
        let povm = marginals(&og, &s).unwrap();
        let mut sampler = AssignmentSampler::new(&povm, &s.rho, 7).unwrap();
        for _ in 0..20 {
            assert_eq!(sampler.sample().unwrap(), z);
        }
    }

    #[test]
    fn uniform_marginals_sample_uniformly() {
        // A POVM that ignores the question: every element Id/2.
        let dim = 2;
        let nvars = 3;
        let half = CMatrix::identity(dim, dim) * Complex64::new(0.5, 0.0);
        let povm = MarginalPovm {
            nvars,
            dim,
            elements: (0..nvars).map(|_| [half.clone(), half.clone()]).collect(),
        };
        let rho = CMatrix::identity(dim, dim) * Complex64::new(0.5, 0.0);
        let dist = exact_assignment_distribution(&povm, &rho).unwrap();
        for &p in &dist {
            assert!((p - 0.125).abs() < 1e-12);
        }
        let mut sampler = AssignmentSampler::new(&povm, &rho, 0).unwrap();
        let trials = 10_000usize;
        let mut counts = vec![0usize; 8];
        for _ in 0..trials {
            let z = sampler.sample().unwrap();
            let idx = z.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
            counts[idx] += 1;
        }
        // Chi-square with 7 degrees of freedom; 26 is far beyond the 99.9th
        // percentile, so a false alarm is vanishingly unlikely.
        let expected = trials as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 26.0, "chi-square {chi2}, counts {counts:?}");
    }

    #[test]
    fn empirical_frequencies_match_exact_enumeration() {
        // Non-trivial commuting POVMs on 3 variables: each variable measured
        // by a different projective binary measurement on its own qubit.
        let nvars = 3;
        let dim = 8;
        let angles = [0.3f64, 1.1, 2.0];
        let mut elements = Vec::new();
        for (i, &th) in angles.iter().enumerate() {
            let p0 = {
                let c = th.cos();
                let s = th.sin();
                let mut m = CMatrix::zeros(2, 2);
                m[(0, 0)] = Complex64::new(c * c, 0.0);
                m[(0, 1)] = Complex64::new(c * s, 0.0);
                m[(1, 0)] = Complex64::new(c * s, 0.0);
                m[(1, 1)] = Complex64::new(s * s, 0.0);
                m
            };
            let p1 = CMatrix::identity(2, 2) - &p0;
            let lift = |m: &CMatrix| -> CMatrix {
                let mut out = CMatrix::identity(1, 1);
                for k in 0..nvars {
                    let f = if k == i { m.clone() } else { CMatrix::identity(2, 2) };
                    out = out.kronecker(&f);
                }
                out
            };
            elements.push([lift(&p0), lift(&p1)]);
        }
        let povm = MarginalPovm { nvars, dim, elements };
        let rho = CMatrix::identity(dim, dim) * Complex64::new(1.0 / dim as f64, 0.0);
        let dist = exact_assignment_distribution(&povm, &rho).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-10);

        let trials = 20_000usize;
        let mut sampler = AssignmentSampler::new(&povm, &rho, 42).unwrap();
        let mut counts = vec![0usize; 8];
        for _ in 0..trials {
            let z = sampler.sample().unwrap();
            let idx = z.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
            counts[idx] += 1;
        }
        for (z, &p) in dist.iter().enumerate() {
            let freq = counts[z] as f64 / trials as f64;
            let sigma = (p * (1.0 - p) / trials as f64).sqrt().max(1e-4);
            assert!(
                (freq - p).abs() < 4.0 * sigma,
                "assignment {z}: freq {freq} vs exact {p}"
            );
        }
    }

    #[test]
    fn perfect_strategy_satisfies_with_probability_one() {
        let csp = small_csp();
        let og = oracularize(&csp).unwrap();
        let s = honest_strategy(&og, &[1, 0, 1, 0]);
        let rep = soundness_check(&csp, &og, &s, 0, 0).unwrap();
        assert!((rep.game_value - 1.0).abs() < 1e-12);
        assert!(rep.eps.abs() < 1e-12);
        assert!(rep.delta_max < 1e-12);
        assert!(rep.exact);
        assert!((rep.sat_prob - 1.0).abs() < 1e-10, "{rep:?}");
    }

    #[test]
    fn unsatisfiable_instance_caps_value_and_sat_prob() {
        let csp = unsat_csp();
        // No assignment satisfies all three parity clauses.
        for z in 0..8u8 {
            let bits = [(z >> 2) & 1, (z >> 1) & 1, z & 1];
            assert!(satisfied_fraction(&csp, &bits) < 1.0 - 1e-12);
        }
        let og = oracularize(&csp).unwrap();
        // Best honest strategy over all assignments.
        let mut best: Option<SoundnessReport> = None;
        for z in 0..8u8 {
            let bits = [(z >> 2) & 1, (z >> 1) & 1, z & 1];
            let s = honest_strategy(&og, &bits);
            let rep = soundness_check(&csp, &og, &s, 0, 0).unwrap();
            if best.as_ref().is_none_or(|b| rep.game_value > b.game_value) {
                best = Some(rep);
            }
        }
        let best = best.unwrap();
        assert!(best.game_value < 1.0 - 1e-3, "{best:?}");
        assert!(best.sat_prob < 1.0 - 1e-3, "{best:?}");
    }

    #[test]
    fn soundness_csv_has_expected_columns() {
        let csp = small_csp();
        let og = oracularize(&csp).unwrap();
        let s = honest_strategy(&og, &[1, 0, 1, 0]);
        let rep = soundness_check(&csp, &og, &s, 0, 0).unwrap();
        let csv = soundness_csv(&[rep]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "nvars,gameValue,eps,deltaMax,samples,satProb,satProbExact"
        );
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 7);
        assert!(row.ends_with("true"));
    }
}
