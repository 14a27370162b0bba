//! Central finite-difference check of reverse-mode gradients.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Smallest |finite difference| used as the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Reverse-mode and finite-difference values at the worst entry.
    pub worst: (f64, f64),
    pub max_abs_err: f64,
    /// Entries over the relative bound that neither sit within the
    /// roundoff band of the difference quotient nor agree once `h` is
    /// cut a hundredfold (a ReLU kink inside `[θ-h, θ+h]`).
    pub unexplained: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation `h` of the central difference.
    pub step: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_entries: None,
        }
    }
}

/// Relative bound every entry must meet.
pub const REL_TOL: f64 = 1e-4;
/// Kink retry shrinks `h` by this factor.
const KINK_SHRINK: f64 = 100.0;

/// Absolute error a central difference of `f` at step `h` cannot resolve
/// in f64: a few ulps of `f` divided by `2h`.
pub fn roundoff_band(f: f64, h: f64) -> f64 {
    16.0 * f64::EPSILON * f.abs().max(1.0) / h
}

/// `|g_ad - g_fd| / max(|g_fd|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_FLOOR)
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store, false);
    let root = f(&mut tape)?;
    let v = tape.value(root).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

fn central_difference<F>(
    store: &mut ParamStore<f64>,
    f: &F,
    id: ParamId,
    e: usize,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let orig = store.value(id).data()[e];
    store.value_mut(id).data_mut()[e] = orig + h;
    let plus = eval(store, f);
    store.value_mut(id).data_mut()[e] = orig - h;
    let minus = eval(store, f);
    store.value_mut(id).data_mut()[e] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Compares reverse-mode gradients of the scalar `f` against
/// `(f(θ+h) - f(θ-h)) / 2h` for every parameter in `store`.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    options: GradCheckOptions,
    f: F,
) -> Result<Vec<GradCheckRow>>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let (value, grads) = {
        let mut tape = Tape::with_params(store, true);
        let root = f(&mut tape)?;
        let v = tape.value(root).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v}")));
        }
        (v, tape.backward(root)?)
    };
    let h = options.step;
    let ids: Vec<_> = store.ids().collect();
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let analytic = grads
            .get(id)
            .expect("backward covers all parameters")
            .data()
            .to_vec();
        let picks: Vec<usize> = match options.max_entries {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        let mut max_abs_err = 0.0f64;
        let mut unexplained = 0;
        for &e in &picks {
            let numeric = central_difference(store, &f, id, e, h)?;
            let err = relative_error(analytic[e], numeric);
            let abs = (analytic[e] - numeric).abs();
            max_abs_err = max_abs_err.max(abs);
            if err > worst || picks.len() == 1 {
                worst = err;
                worst_pair = (analytic[e], numeric);
            }
            if err < REL_TOL || abs <= roundoff_band(value, h) {
                continue;
            }
            let fine = h / KINK_SHRINK;
            let retry = central_difference(store, &f, id, e, fine)?;
            if relative_error(analytic[e], retry) >= REL_TOL
                && (analytic[e] - retry).abs() > roundoff_band(value, fine)
            {
                unexplained += 1;
            }
        }
        rows.push(GradCheckRow {
            name: store.get(id).name.clone(),
            entries: picks.len(),
            max_rel_err: worst,
            worst: worst_pair,
            max_abs_err,
            unexplained,
        });
    }
    Ok(rows)
}
