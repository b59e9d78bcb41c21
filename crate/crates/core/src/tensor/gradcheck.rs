//! Finite-difference gradient verification.
//!
//! The tape's reverse pass is checked against a central-difference oracle:
//! the two routes share no code, so agreement is evidence rather than
//! tautology. Errors are measured as
//! `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`, which behaves like absolute
//! error near zero and relative error for large gradients.

use super::{Mode, Tape, Tensor, TensorId};

/// Relative error between one autodiff and one finite-difference gradient
/// entry.
pub fn rel_err(g_ad: f64, g_fd: f64) -> f64 {
    (g_ad - g_fd).abs() / 1.0f64.max(g_ad.abs()).max(g_fd.abs())
}

/// Worst-case [`rel_err`] across a gradient vector pair.
pub fn max_rel_err(ad: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(ad.len(), fd.len(), "gradient lengths differ: {} vs {}", ad.len(), fd.len());
    ad.iter()
        .zip(fd)
        .map(|(&a, &f)| rel_err(a, f))
        .fold(0.0, f64::max)
}

/// Central finite differences of a scalar function of a flat parameter
/// vector: `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn central_diff(mut eval: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut scratch = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = scratch[i];
        scratch[i] = orig + h;
        let plus = eval(&scratch);
        scratch[i] = orig - h;
        let minus = eval(&scratch);
        scratch[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Run `build` once for the reverse pass and 2n more times for central
/// differences, and return the worst relative error. `build` must be a pure
/// function of the input tensor (no dropout, no interior randomness), or
/// the comparison is meaningless.
pub fn grad_check<F>(build: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Tape, TensorId) -> TensorId,
{
    let mut tape = Tape::new(Mode::Train);
    let xid = tape.leaf(x.clone(), true);
    let loss = build(&mut tape, xid);
    tape.backward(loss);
    let g_ad = tape.grad(xid).to_vec();

    let eval = |data: &[f64]| {
        let mut tape = Tape::new(Mode::Train);
        let xid = tape.leaf(Tensor::new(x.shape().to_vec(), data.to_vec()).unwrap(), true);
        let loss = build(&mut tape, xid);
        tape.scalar_value(loss)
    };
    let g_fd = central_diff(eval, x.data(), h);
    max_rel_err(&g_ad, &g_fd)
}
