//! Every differentiable op against finite differences on randomized shapes.

use clspool::arraycore::{grad_check, Array, Tape, Var};
use clspool::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const STEP: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Array::from_f64(shape, &v).unwrap()
}

/// Contracts an op output against fixed random weights so every output
/// element contributes a distinct amount to the scalar loss. Weights stay
/// away from zero: an O(1) loss differenced at h=1e-4 carries about 1e-12
/// of roundoff, which swamps gradient entries much below 1e-6.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let z = tape.mul_const(y, w)?;
    tape.sum(z)
}

fn check(
    params: &[Array<f64>],
    seed: u64,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    grad_check(
        |tape, vars| {
            let y = op(tape, vars)?;
            weighted_sum(tape, y, seed)
        },
        params,
        STEP,
    )
    .unwrap()
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..5, 1usize..6, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul((m, n, p, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = [random(&[m, n], &mut rng), random(&[n, p], &mut rng)];
        let err = check(&ps, seed, |t, v| t.matmul(v[0], v[1]));
        prop_assert!(err < TOL, "max rel err {err:e}");
    }

    #[test]
    fn add_and_mul((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = [random(&[m, n], &mut rng), random(&[m, n], &mut rng)];
        let err = check(&ps, seed, |t, v| {
            let s = t.add(v[0], v[1])?;
            t.mul(s, v[1])
        });
        prop_assert!(err < TOL, "max rel err {err:e}");
    }

    #[test]
    fn add_row_and_scale((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = [random(&[m, n], &mut rng), random(&[n], &mut rng)];
        let err = check(&ps, seed, |t, v| {
            let s = t.add_row(v[0], v[1])?;
            t.scale(s, -0.7)
        });
        prop_assert!(err < TOL, "max rel err {err:e}");
    }

    #[test]
    fn transpose_and_reshape((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = [random(&[m, n], &mut rng)];
        let err = check(&ps, seed, |t, v| {
            let tr = t.transpose(v[0])?;
            let r = t.reshape(tr, &[m * n])?;
            t.mul(r, r)
        });
        prop_assert!(err < TOL, "max rel err {err:e}");
    }

    #[test]
    fn concat_and_slices((m, n, p, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = [random(&[m, n], &mut rng), random(&[m, p], &mut rng)];
        let err = check(&ps, seed, |t, v| {
            let c = t.concat_last(&[v[0], v[1], v[0]])?;
            let s = t.slice_last(c, n / 2, n + p)?;
            let r = t.slice_axis0(s, m / 2, m - m / 2)?;
            t.mul(r, r)
        });
        prop_assert!(err < TOL, "max rel err {err:e}");
    }

    #[test]
    fn softmax((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = [random(&[m, n + 1], &mut rng)];
        let err = check(&ps, seed, |t, v| t.softmax_last(v[0]));
        prop_assert!(err < TOL, "max rel err {err:e}");
    }

    #[test]
    fn stack_max_mean_select((k, m, n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps: Vec<Array<f64>> = (0..k).map(|_| random(&[m, n], &mut rng)).collect();
        let pick: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let err = check(&ps, seed, |t, v| {
            let th = t.stack(v)?;
            let mx = t.max_axis0(th)?;
            let mn = t.mean_axis0(th)?;
            let sel = t.select_axis0(th, &pick)?;
            let a = t.mul(mx, mn)?;
            t.add(a, sel)
        });
        prop_assert!(err < TOL, "max rel err {err:e}");
    }

    // At d=2 the normalized row is ±1 up to epsilon and the input gradient
    // is of order 1e-9, below what differences of an O(1) loss can resolve
    // in 64-bit. That case has its own closed-form test below.
    #[test]
    fn layer_norm((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = n + 2;
        let ps = [random(&[m, d], &mut rng), random(&[d], &mut rng), random(&[d], &mut rng)];
        let err = check(&ps, seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
        prop_assert!(err < TOL, "max rel err {err:e}");
    }

    // Past about -3 the GELU slope falls under 1e-2 and then to 1e-7 (see
    // the weight note above), so inputs stay in [-3, 3].
    #[test]
    fn gelu((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = [random(&[m, n], &mut rng).map(|x| 2.0 * x)];
        let err = check(&ps, seed, |t, v| t.gelu(v[0]));
        prop_assert!(err < TOL, "max rel err {err:e}");
    }

    #[test]
    fn gather_rows((rows, n, len, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..len + 1).map(|_| rng.random_range(0..rows)).collect();
        let ps = [random(&[rows, n], &mut rng)];
        let err = check(&ps, seed, |t, v| t.gather_rows(v[0], &ids));
        prop_assert!(err < TOL, "max rel err {err:e}");
    }

    #[test]
    fn cross_entropy_and_squared_error((c, _, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let label = rng.random_range(0..c + 1);
        let ps = [random(&[1, c + 1], &mut rng), random(&[1, 1], &mut rng)];
        let err = check(&ps, seed, |t, v| {
            let ce = t.cross_entropy(v[0], label)?;
            let se = t.squared_error(v[1], 0.3)?;
            t.add(ce, se)
        });
        prop_assert!(err < TOL, "max rel err {err:e}");
    }
}

#[test]
fn layer_norm_two_wide_matches_closed_form() {
    // With δ = (x1 - x2)/2 the row normalizes to ±δ/sqrt(δ² + eps), so
    // d x̂1/d x1 = eps / (2 (δ² + eps)^1.5) and the x2 gradient is its negative.
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let x = random(&[1, 2], &mut rng);
        let g = random(&[2], &mut rng);
        let w = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let gv = tape.constant(g.clone());
        let bv = tape.constant(Array::zeros(&[2]));
        let y = tape.layer_norm(xv, gv, bv, eps).unwrap();
        let z = tape.mul_const(y, w.to_vec()).unwrap();
        let loss = tape.sum(z).unwrap();
        tape.backward(loss).unwrap();
        let got = tape.grad(xv).unwrap().to_vec();

        let delta = (x.data()[0] - x.data()[1]) / 2.0;
        let dxhat = eps / (2.0 * (delta * delta + eps).powf(1.5));
        let d1 = (w[0] * g.data()[0] - w[1] * g.data()[1]) * dxhat;
        for (a, e) in got.iter().zip([d1, -d1]) {
            let rel = (a - e).abs() / f64::max(1e-300, a.abs() + e.abs());
            assert!(rel < 1e-6, "analytic {a:e} vs closed form {e:e}");
        }
    }
}
