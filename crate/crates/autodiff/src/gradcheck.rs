//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares backward-pass gradients of `f` with central differences of step
/// `h` for every scalar of every parameter in `store`. `f` must be a
/// deterministic function of the parameter values.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    assert!((1e-7..=1e-3).contains(&h), "step {h} outside [1e-7, 1e-3]");
    store.zero_grad();
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.backward(loss, store)?;
        store.iter().map(|(_, p)| p.grad.clone()).collect()
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };
    let ids: Vec<_> = store.ids().collect();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(ids.len()),
        tol,
    };
    for (id, grads) in ids.into_iter().zip(analytic) {
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..grads.len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grads[j], numeric);
            if err > check.max_rel_error || j == 0 {
                check.max_rel_error = err;
                check.worst_index = j;
                check.analytic = grads[j];
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
