//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coordinates.iter().all(|c| c.rel_error < self.tol)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: for<'s> Fn(&mut Tape<'s>, &'s ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    Ok(tape.scalar(loss))
}

/// Compare the tape gradient of `f` against `(f(θ+h) − f(θ−h)) / 2h` for
/// every coordinate of every parameter in `store`.
///
/// Relative error is `|a − n| / max(1, |a|, |n|)`. The store is restored
/// to its original values before returning.
pub fn grad_check<F>(f: F, store: &mut ParamStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Tape<'s>, &'s ParamStore) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("grad_check", "h must be positive"));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let grads = tape.backward(loss)?;
        let first = tape.scalar(loss);
        let second = eval(&f, store)?;
        if first.to_bits() != second.to_bits() {
            return Err(Error::NonDeterministic(first, second));
        }
        store
            .ids()
            .map(|id| {
                let v = tape.param(store, id);
                grads.get_or_zeros(&tape, v)
            })
            .collect()
    };

    let mut coordinates = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&f, store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&f, store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic[id.index()][i];
            let rel_error = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            coordinates.push(CoordinateCheck {
                param: store.name(id).to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coordinates,
        max_rel_error,
        tol,
    })
}
