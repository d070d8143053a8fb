//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Session;
use super::params::{ParamId, ParamStore};
use super::tape::Var;
use crate::error::{Error, Result};

/// Coordinates sampled per tensor (all coordinates when fewer exist).
pub const MIN_SAMPLES_PER_TENSOR: usize = 50;

/// Denominator floor so that vanishing gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::inference(store);
    let out = f(&mut s)?;
    let v = s.tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+εe) - f(θ-εe)) / 2ε` on sampled coordinates of `params`.
///
/// `f` runs on an inference tape, so dropout is disabled.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    f: F,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    store.zero_grad();
    let grads = {
        let mut s = Session::inference(store);
        let out = f(&mut s)?;
        if !s.tape.scalar(out).is_finite() {
            return Err(Error::NonFinite("objective is not finite".into()));
        }
        s.tape.backward(out)?
    };
    store.accumulate(&grads, 1.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for &id in params {
        let n = store.value(id).len();
        let picks: Vec<usize> = if n <= MIN_SAMPLES_PER_TENSOR {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, MIN_SAMPLES_PER_TENSOR).into_vec();
            v.sort_unstable();
            v
        };
        for k in picks {
            let original = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = original + eps;
            let plus = evaluate(store, &f);
            store.value_mut(id).data_mut()[k] = original - eps;
            let minus = evaluate(store, &f);
            store.value_mut(id).data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let analytic = store.grad(id).data()[k];
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
