use crate::arraycore::array::{Array, Scalar};
use crate::arraycore::tape::{MaxBackward, Tape, Var};
use crate::error::{Error, Result};

const MAX_STEP_CUTS: usize = 4;

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest elementwise relative error
/// `|a - n| / max(1e-8, |a| + |n|)`.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (same
/// order) and must return a single-element output.
///
/// The numeric side uses the fourth-order central stencil
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. The plain two-point
/// form has to trade truncation error against roundoff, and on entries with
/// gradients near 1e-7 neither side of that trade stays under 1e-4.
///
/// Max and selection ops make `f` piecewise smooth. When a stencil point
/// lands on a different piece than `x` (see [`Tape::branch_signature`]) the
/// step for that entry is quartered, up to four times, so the numeric
/// derivative describes the same piece the analytic one does.
pub fn grad_check<T, F>(f: F, params: &[Array<T>], step: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, step, MaxBackward::Argmax)
}

/// [`grad_check`] with the analytic pass using the given max backward rule.
pub fn grad_check_with<T, F>(
    f: F,
    params: &[Array<T>],
    step: f64,
    max_backward: MaxBackward,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    check_step(step)?;
    let analytic = analytic_gradient(&f, params, max_backward)?;
    let numeric = numeric_gradient(&f, params, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Reverse-mode gradient of `f` at `params`, one flat vector per parameter.
pub fn analytic_gradient<T, F>(
    f: F,
    params: &[Array<T>],
    max_backward: MaxBackward,
) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new()
        .with_finite_checks(false)
        .with_max_backward(max_backward);
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    if !tape.value(out).is_finite() {
        return Err(Error::Evaluation);
    }
    tape.backward(out)?;
    let grads = leaves
        .iter()
        .map(|&v| {
            tape.grad(v)
                .expect("leaf gradients are populated")
                .iter()
                .map(|g| g.to_f64_lossy())
                .collect()
        })
        .collect();
    Ok(grads)
}

/// Finite-difference gradient of `f` at `params` using the stencil and step
/// control described on [`grad_check`].
pub fn numeric_gradient<T, F>(f: F, params: &[Array<T>], step: f64) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    check_step(step)?;
    let eval = |values: &[Array<T>]| -> Result<(f64, Vec<usize>)> {
        let mut tape = Tape::new().with_finite_checks(false);
        let leaves: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        let v = tape.value(out).data()[0].to_f64_lossy();
        if v.is_finite() {
            Ok((v, tape.branch_signature()))
        } else {
            Err(Error::Evaluation)
        }
    };

    let (_, base) = eval(params)?;
    let mut work: Vec<Array<T>> = params.to_vec();
    let mut numeric_all = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grads = Vec::with_capacity(params[pi].len());
        for j in 0..params[pi].len() {
            let orig = work[pi].data()[j];
            let x = orig.to_f64_lossy();
            let mut h = step;
            let mut numeric;
            let mut retries = 0;
            loop {
                let mut same_piece = true;
                let mut at = |offset: f64| -> Result<f64> {
                    work[pi].data_mut()[j] = T::from_f64_lossy(x + offset);
                    let (v, sig) = eval(&work)?;
                    same_piece &= sig == base;
                    Ok(v)
                };
                let near = at(h)? - at(-h)?;
                let far = at(2.0 * h)? - at(-2.0 * h)?;
                numeric = (8.0 * near - far) / (12.0 * h);
                if same_piece || retries == MAX_STEP_CUTS {
                    break;
                }
                h /= 4.0;
                retries += 1;
            }
            work[pi].data_mut()[j] = orig;
            grads.push(numeric);
        }
        numeric_all.push(grads);
    }
    Ok(numeric_all)
}

/// Largest `|a - n| / max(1e-8, |a| + |n|)` over paired entries.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lists differ in length");
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.len(), n.len(), "gradient extents differ");
            a.iter().zip(n)
        })
        .map(|(&a, &n)| (a - n).abs() / f64::max(1e-8, a.abs() + n.abs()))
        .fold(0.0, f64::max)
}

fn check_step(step: f64) -> Result<()> {
    if (1e-6..=1e-4).contains(&step) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-6, 1e-4]"
        )))
    }
}
