//! Central-difference gradient verification against the tape.

use crate::error::{Error, Result};
use crate::params::ParameterStoreOf;
use crate::scalar::Scalar;

/// Compare the gradients currently held in `store` against central finite
/// differences of `f`, returning the maximum relative error over all
/// parameter coordinates.
///
/// `f` must be a deterministic pure function of the store's parameter values;
/// its baseline value is evaluated twice and any mismatch is reported as an
/// oracle error. The relative error per coordinate is
/// |analytic - numeric| / max(1, |numeric|).
pub fn finite_diff_check<F, Fun>(
    f: Fun,
    store: &mut ParameterStoreOf<F>,
    eps: F,
) -> Result<f64>
where
    F: Scalar,
    Fun: Fn(&ParameterStoreOf<F>) -> Result<F>,
{
    if eps <= F::zero() || eps > F::of_f64(1e-2) {
        return Err(Error::Contract(format!(
            "finite-difference eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    let base = f(store)?;
    let again = f(store)?;
    if base != again {
        return Err(Error::Oracle(format!(
            "objective is not deterministic: {base} vs {again} on identical parameters"
        )));
    }

    let names: Vec<String> = store.names().map(String::from).collect();
    let mut max_rel = 0.0f64;
    for name in &names {
        let len = store.get(name)?.len();
        let analytic = store.grad(name)?.to_vec();
        for idx in 0..len {
            let original = store.get(name)?.data()[idx];
            poke(store, name, idx, original + eps)?;
            let plus = f(store)?;
            poke(store, name, idx, original - eps)?;
            let minus = f(store)?;
            poke(store, name, idx, original)?;
            let numeric = (plus - minus).as_f64() / (2.0 * eps.as_f64());
            let a = analytic[idx].as_f64();
            let rel = (a - numeric).abs() / 1.0f64.max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn poke<F: Scalar>(
    store: &mut ParameterStoreOf<F>,
    name: &str,
    idx: usize,
    value: F,
) -> Result<()> {
    store.update(name, |data, _| data[idx] = value)
}
