use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{contract_err, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of a scalar graph against central
/// differences `(f(x + h) - f(x - h)) / 2h`.
///
/// `build` records the loss on a fresh tape from the current store values.
/// At most `coords_per_param` coordinates of each listed parameter are
/// sampled (all of them when the parameter is smaller).
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    h: f64,
    coords_per_param: usize,
    seed: u64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(contract_err!("finite-difference step {h} outside [1e-7, 1e-3]"));
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let grads = tape.backward(loss, store)?;
    drop(tape);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    for &id in params {
        let len = store.get(id).len();
        let coords: Vec<usize> = if len <= coords_per_param {
            (0..len).collect()
        } else {
            sample(&mut rng, len, coords_per_param).into_vec()
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let analytic = grads.get(id).data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if report.coords_checked == 1 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_map_is_exact() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()))
            .unwrap();
        let x = Tensor::<f64>::from_fn(&[4, 2], |i| (i as f64 * 0.91).cos());
        let report = grad_check(&mut store, &[w], 1e-5, 100, 1, |tape, s| {
            let wv = tape.param(s, w);
            let xv = tape.constant(x.clone());
            let y = tape.matmul(wv, xv)?;
            tape.sum(y)
        })
        .unwrap();
        assert_eq!(report.coords_checked, 12);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn rejects_step_outside_range() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Tensor::zeros(&[1])).unwrap();
        let r = grad_check(&mut store, &[w], 1e-2, 1, 0, |tape, s| {
            let v = tape.param(s, w);
            tape.sum(v)
        });
        assert!(r.is_err());
    }
}
