//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::param::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Analytic and central-difference values at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// Compares analytic gradients of `loss_fn` against central differences on
/// up to `coords_per_param` randomly chosen coordinates of every parameter.
/// The difference quotient uses the points `x ± ε` and `x ± 2ε`.
///
/// The error per coordinate is `|analytic − numeric| / (|analytic| + 1e-8)`;
/// the report carries the maximum.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    loss_fn: F,
    epsilon: f64,
    coords_per_param: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        if tape.shape(loss) != (1, 1) {
            return Err(Error::Shape("loss must be a scalar".into()));
        }
        tape.backward(loss)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    let ids: Vec<_> = (0..store.len())
        .map(|i| store.id(&store.iter().nth(i).unwrap().name).unwrap())
        .collect();
    for id in ids {
        let n = store.value(id).len();
        let picks: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, coords_per_param).into_vec();
            v.sort_unstable();
            v
        };
        for idx in picks {
            let a = analytic.get(id).map_or(0.0, |g| g[idx]);
            let orig = store.value(id).data()[idx];
            let mut at = |offset: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[idx] = orig + offset;
                eval(store)
            };
            // fourth-order central stencil: truncation O(ε⁴), so ε can be
            // large enough that roundoff in the loss stays negligible
            let (p1, m1) = (at(epsilon)?, at(-epsilon)?);
            let (p2, m2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
            store.value_mut(id).data_mut()[idx] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let err = (a - numeric).abs() / (a.abs() + 1e-8);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = idx;
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}
