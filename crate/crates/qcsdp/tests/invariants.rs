//! Property-based invariant checks on randomized inputs.

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

use qcsdp::games::{chsh, validate_game, Game};
use qcsdp::hierarchy::build_word_index;
use qcsdp::linalg::{commutator, operator_norm, psd_power, CMatrix};

fn cmatrix_from(entries: &[f64], d: usize) -> CMatrix {
    CMatrix::from_fn(d, d, |i, j| {
        Complex64::new(entries[2 * (i * d + j)], entries[2 * (i * d + j) + 1])
    })
}

fn psd_from(entries: &[f64], d: usize) -> CMatrix {
    let m = cmatrix_from(entries, d);
    &m * m.adjoint()
}

fn entries(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 2 * d * d)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// The principal square root of a positive semidefinite matrix squares
    /// back to the matrix.
    #[test]
    fn sqrt_squares_back(d in 2usize..6, e in entries(5)) {
        let a = psd_from(&e, d);
        let r = psd_power(&a, 0.5).unwrap();
        let scale = operator_norm(&a).max(1.0);
        prop_assert!(operator_norm(&(&r * &r - &a)) <= 1e-10 * scale);
    }

    /// Operator norm is subadditive and absolutely homogeneous.
    #[test]
    fn norm_is_subadditive_and_homogeneous(d in 2usize..6, e1 in entries(5), e2 in entries(5), c in -3.0f64..3.0) {
        let a = cmatrix_from(&e1, d);
        let b = cmatrix_from(&e2, d);
        let na = operator_norm(&a);
        let nb = operator_norm(&b);
        prop_assert!(operator_norm(&(&a + &b)) <= na + nb + 1e-12);
        let scaled = operator_norm(&(&a * Complex64::new(c, 0.0)));
        prop_assert!((scaled - c.abs() * na).abs() <= 1e-12 * (1.0 + na));
    }

    /// Commutator norm never exceeds twice the product of the norms.
    #[test]
    fn commutator_norm_bound(d in 2usize..6, e1 in entries(5), e2 in entries(5)) {
        let a = cmatrix_from(&e1, d);
        let b = cmatrix_from(&e2, d);
        let bound = 2.0 * operator_norm(&a) * operator_norm(&b);
        prop_assert!(operator_norm(&commutator(&a, &b)) <= bound + 1e-12);
    }

    /// Word reversal is an involution on every hierarchy level index.
    #[test]
    fn word_reversal_is_involution(level in 1usize..4, seed in any::<u64>()) {
        let g = chsh();
        let idx = build_word_index(&g, level).unwrap();
        let w = (seed as usize) % idx.len();
        prop_assert_eq!(idx.reversal(idx.reversal(w)), w);
    }

    /// A probability table built from any nonnegative weights normalizes to a
    /// valid game distribution.
    #[test]
    fn game_distribution_normalizes(raw in prop::collection::vec(0.01f64..1.0, 4)) {
        let total: f64 = raw.iter().sum();
        let mu: Vec<Vec<f64>> = vec![
            vec![raw[0] / total, raw[1] / total],
            vec![raw[2] / total, raw[3] / total],
        ];
        let g = Game {
            qx: 2,
            qy: 2,
            ax: 2,
            ay: 2,
            mu,
            predicate: vec![vec![vec![vec![true; 2]; 2]; 2]; 2],
        };
        prop_assert!(validate_game(&g).is_empty());
    }

    /// Real symmetrization of a Hermitian matrix preserves its spectrum
    /// bounds: the operator norm of the real part never exceeds the norm.
    #[test]
    fn real_part_norm_bound(d in 2usize..6, e in entries(5)) {
        let m = cmatrix_from(&e, d);
        let h = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
        let re = DMatrix::<f64>::from_fn(d, d, |i, j| h[(i, j)].re);
        let sym = (&re + re.transpose()) * 0.5;
        let mut worst = 0.0f64;
        for v in sym.symmetric_eigen().eigenvalues.iter() {
            worst = worst.max(v.abs());
        }
        prop_assert!(worst <= operator_norm(&h) + 1e-12);
    }
}
