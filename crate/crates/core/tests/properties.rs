//! Structural properties that should hold for any input, checked over
//! randomized shapes and values rather than frozen fixtures.

use atnz_core::attention::{self, XcaTemperature};
use atnz_core::autodiff::Tape;
use atnz_core::rng::Rng;
use atnz_core::tensor::{self, Tensor};
use proptest::prelude::*;

#[derive(Clone, Copy, Debug)]
enum Variant {
    Sa,
    Ea,
    Pa,
    Xca,
    Aa,
}

const TOKEN_MIXERS: [Variant; 5] = [
    Variant::Sa,
    Variant::Ea,
    Variant::Pa,
    Variant::Xca,
    Variant::Aa,
];

/// Runs one kernel on 2-D inputs and returns the output values. Auxiliary
/// tensors (random features, gates) are derived from a fixed seed so that
/// repeated calls see identical weights.
fn run_kernel(variant: Variant, q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut t: Tape<f64> = Tape::new();
    let qn = t.constant(Tensor::new(vec![n, d], q.to_vec()).unwrap());
    let kn = t.constant(Tensor::new(vec![n, d], k.to_vec()).unwrap());
    let vn = t.constant(Tensor::new(vec![n, d], v.to_vec()).unwrap());
    let out = match variant {
        Variant::Sa => attention::softmax_attention(&mut t, qn, kn, vn),
        Variant::Ea => attention::efficient_attention(&mut t, qn, kn, vn),
        Variant::Pa => {
            let r = d.max(2);
            let omega =
                tensor::orthogonal_gaussian(&mut Rng::new(40 + d as u64), r, d).unwrap();
            let om = t.constant(omega);
            attention::performer_attention(&mut t, qn, kn, vn, om)
        }
        Variant::Xca => attention::cross_covariance_attention(
            &mut t,
            qn,
            kn,
            vn,
            XcaTemperature::Fixed(0.7),
            true,
        ),
        Variant::Aa => {
            let mut rng = Rng::new(50 + d as u64);
            let gq = t.constant(tensor::randn(&mut rng, &[d, 1], 0.5));
            let gk = t.constant(tensor::randn(&mut rng, &[d, 1], 0.5));
            let wo = t.constant(tensor::randn(&mut rng, &[d, d], 0.5));
            attention::additive_attention(&mut t, qn, kn, vn, gq, gk, wo)
        }
    }
    .unwrap();
    t.value(out).data().to_vec()
}

/// Gathers rows: out[i] = data[perm[i]].
fn gather_rows(data: &[f64], perm: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for &p in perm {
        out.extend_from_slice(&data[p * d..(p + 1) * d]);
    }
    out
}

fn qkv() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<usize>)> {
    (1usize..9, 1usize..6).prop_flat_map(|(n, d)| {
        let cell = proptest::collection::vec(-2.0f64..2.0, n * d);
        (
            Just(n),
            Just(d),
            cell.clone(),
            cell.clone(),
            cell,
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Every row of a softmax is a probability vector.
    #[test]
    fn softmax_rows_are_stochastic((n, d, x) in (1usize..10, 1usize..8)
        .prop_flat_map(|(n, d)| {
            (Just(n), Just(d), proptest::collection::vec(-6.0f64..6.0, n * d))
        }))
    {
        let mut t: Tape<f64> = Tape::new();
        let xn = t.constant(Tensor::new(vec![n, d], x).unwrap());
        let s = t.softmax_last(xn).unwrap();
        let out = t.value(s);
        for row in out.data().chunks(d) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            for &p in row {
                prop_assert!(p > 0.0 && p <= 1.0 + 1e-12, "entry {p}");
            }
        }
    }

    /// Softmax is invariant to adding a per-row constant to the logits.
    #[test]
    fn softmax_shift_invariance((n, d, x, shifts) in (1usize..8, 1usize..8)
        .prop_flat_map(|(n, d)| {
            (
                Just(n),
                Just(d),
                proptest::collection::vec(-4.0f64..4.0, n * d),
                proptest::collection::vec(-50.0f64..50.0, n),
            )
        }))
    {
        let shifted: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| v + shifts[i / d])
            .collect();
        let softmax = |data: Vec<f64>| {
            let mut t: Tape<f64> = Tape::new();
            let xn = t.constant(Tensor::new(vec![n, d], data).unwrap());
            let s = t.softmax_last(xn).unwrap();
            t.value(s).data().to_vec()
        };
        let a = softmax(x);
        let b = softmax(shifted);
        for (pa, pb) in a.iter().zip(&b) {
            prop_assert!((pa - pb).abs() < 1e-12, "{pa} vs {pb}");
        }
    }

    /// Tape matmul agrees with the naive triple loop.
    #[test]
    fn matmul_matches_triple_loop((m, kk, p, a, b) in (1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(m, kk, p)| {
            (
                Just(m),
                Just(kk),
                Just(p),
                proptest::collection::vec(-2.0f64..2.0, m * kk),
                proptest::collection::vec(-2.0f64..2.0, kk * p),
            )
        }))
    {
        let mut t: Tape<f64> = Tape::new();
        let an = t.constant(Tensor::new(vec![m, kk], a.clone()).unwrap());
        let bn = t.constant(Tensor::new(vec![kk, p], b.clone()).unwrap());
        let c = t.matmul(an, bn).unwrap();
        let got = t.value(c);
        let mut want = vec![0.0f64; m * p];
        for i in 0..m {
            for l in 0..kk {
                for j in 0..p {
                    want[i * p + j] += a[i * kk + l] * b[l * p + j];
                }
            }
        }
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    /// Token mixers that pool globally commute with any permutation of the
    /// token order: mixing permuted inputs equals permuting the mixed output.
    /// (The low-rank and windowed variants are intentionally position
    /// dependent and excluded.)
    #[test]
    fn global_mixers_commute_with_token_permutations((n, d, q, k, v, perm) in qkv()) {
        for variant in TOKEN_MIXERS {
            let direct = run_kernel(variant, &q, &k, &v, n, d);
            let permuted_out = gather_rows(&direct, &perm, d);
            let qp = gather_rows(&q, &perm, d);
            let kp = gather_rows(&k, &perm, d);
            let vp = gather_rows(&v, &perm, d);
            let out_of_permuted = run_kernel(variant, &qp, &kp, &vp, n, d);
            for (a, b) in permuted_out.iter().zip(&out_of_permuted) {
                prop_assert!(
                    (a - b).abs() < 1e-10,
                    "{variant:?}: {a} vs {b} (n={n}, d={d})"
                );
            }
        }
    }

    /// Mixers whose weights are row-stochastic produce outputs inside the
    /// per-feature envelope of the value rows.
    #[test]
    fn stochastic_mixers_stay_in_value_envelope((n, d, q, k, v, _perm) in qkv()) {
        for variant in [Variant::Sa, Variant::Ea, Variant::Pa] {
            let out = run_kernel(variant, &q, &k, &v, n, d);
            for j in 0..d {
                let col = |data: &[f64]| -> Vec<f64> {
                    (0..n).map(|i| data[i * d + j]).collect()
                };
                let vals = col(&v);
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for &o in col(&out).iter() {
                    prop_assert!(
                        o >= lo - 1e-9 && o <= hi + 1e-9,
                        "{variant:?}: {o} outside [{lo}, {hi}]"
                    );
                }
            }
        }
    }

    /// Rebuilding the same graph on a fresh tape reproduces the output bit
    /// for bit (deterministic evaluation order, no environment dependence).
    #[test]
    fn rebuild_is_bit_identical((n, d, q, k, v, _perm) in qkv()) {
        for variant in TOKEN_MIXERS {
            let a = run_kernel(variant, &q, &k, &v, n, d);
            let b = run_kernel(variant, &q, &k, &v, n, d);
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    /// Row gather followed by its inverse is the identity.
    #[test]
    fn permutation_round_trip((n, d, x, perm) in (1usize..10, 1usize..6)
        .prop_flat_map(|(n, d)| {
            (
                Just(n),
                Just(d),
                proptest::collection::vec(-3.0f64..3.0, n * d),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            )
        }))
    {
        let t = Tensor::<f64>::new(vec![n, d], x.clone()).unwrap();
        let fwd = t.permute_rows(&perm).unwrap();
        let mut inverse = vec![0usize; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let back = fwd.permute_rows(&inverse).unwrap();
        for (a, b) in back.data().iter().zip(&x) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
