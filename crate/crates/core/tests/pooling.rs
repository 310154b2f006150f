//! Max/mean pooling over the layer axis and softmax rows, against plain loops.

use clspool::arraycore::{Array, Tape};
use proptest::prelude::*;

const CASES: u32 = 10_000;

/// `(k, t, d, values)` with values row-major over `k×t×d`.
fn stacks() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(k, t, d)| {
        (
            Just(k),
            Just(t),
            Just(d),
            prop::collection::vec(-10.0f64..10.0, k * t * d),
        )
    })
}

fn max_of(k: usize, t: usize, d: usize, v: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut tape = Tape::new();
    let x = tape.constant(Array::from_f64(&[k, t, d], v).unwrap());
    let m = tape.max_axis0(x).unwrap();
    (
        tape.value(m).data().to_vec(),
        tape.argmax_of(m).unwrap().to_vec(),
    )
}

fn mean_of(k: usize, t: usize, d: usize, v: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Array::from_f64(&[k, t, d], v).unwrap());
    let m = tape.mean_axis0(x).unwrap();
    tape.value(m).data().to_vec()
}

fn loop_max(k: usize, inner: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; inner];
    for l in 0..k {
        for j in 0..inner {
            if v[l * inner + j] > out[j] {
                out[j] = v[l * inner + j];
            }
        }
    }
    out
}

fn loop_mean(k: usize, inner: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for j in 0..inner {
        let mut s = 0.0;
        for l in 0..k {
            s += v[l * inner + j];
        }
        out[j] = s / k as f64;
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * f64::max(1.0, x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn max_matches_loop_oracle((k, t, d, v) in stacks()) {
        let (got, _) = max_of(k, t, d, &v);
        prop_assert!(close(&got, &loop_max(k, t * d, &v), 1e-12));
    }

    #[test]
    fn mean_matches_loop_oracle((k, t, d, v) in stacks()) {
        prop_assert!(close(&mean_of(k, t, d, &v), &loop_mean(k, t * d, &v), 1e-12));
    }

    #[test]
    fn max_is_invariant_under_layer_permutation((k, t, d, v) in stacks(), rot in 0usize..6, flip: bool) {
        let inner = t * d;
        let mut order: Vec<usize> = (0..k).collect();
        order.rotate_left(rot % k);
        if flip {
            order.reverse();
        }
        let permuted: Vec<f64> = order
            .iter()
            .flat_map(|&l| v[l * inner..(l + 1) * inner].iter().copied())
            .collect();
        prop_assert_eq!(max_of(k, t, d, &v).0, max_of(k, t, d, &permuted).0);
    }

    #[test]
    fn max_dominates_and_is_attained((k, t, d, v) in stacks()) {
        let inner = t * d;
        let (m, arg) = max_of(k, t, d, &v);
        for j in 0..inner {
            for l in 0..k {
                prop_assert!(m[j] >= v[l * inner + j]);
            }
            prop_assert!((0..k).any(|l| m[j] == v[l * inner + j]));
            prop_assert_eq!(m[j], v[arg[j] * inner + j]);
            // Lowest layer wins ties.
            prop_assert!((0..arg[j]).all(|l| v[l * inner + j] < m[j]));
        }
    }

    #[test]
    fn max_is_idempotent_under_duplication((_k, t, d, v) in stacks()) {
        let x = &v[..t * d];
        let doubled: Vec<f64> = x.iter().chain(x).copied().collect();
        let (m, arg) = max_of(2, t, d, &doubled);
        prop_assert_eq!(&m[..], x);
        prop_assert!(arg.iter().all(|&a| a == 0));
    }

    #[test]
    fn max_is_positively_homogeneous((k, t, d, v) in stacks(), c in 1e-3f64..1e3) {
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let expect: Vec<f64> = max_of(k, t, d, &v).0.iter().map(|x| c * x).collect();
        // Rounding is monotone, so this holds exactly.
        prop_assert_eq!(max_of(k, t, d, &scaled).0, expect);
    }

    #[test]
    fn mean_commutes_with_scaling((k, t, d, v) in stacks(), c in -1e3f64..1e3) {
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let expect: Vec<f64> = mean_of(k, t, d, &v).iter().map(|x| c * x).collect();
        prop_assert!(close(&mean_of(k, t, d, &scaled), &expect, 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        (_k, t, d, v) in stacks(),
        shift in -50.0f64..50.0,
    ) {
        let x = Array::from_f64(&[t, d], &v[..t * d]).unwrap();
        let shifted = x.map(|a| a + shift);
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let sa = tape.softmax_last(a).unwrap();
        let sb = tape.softmax_last(b).unwrap();
        for row in tape.value(sa).data().chunks(d) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(close(tape.value(sa).data(), tape.value(sb).data(), 1e-12));
    }
}
