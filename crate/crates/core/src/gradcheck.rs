//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{NodeId, Tape};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinate where the maximum occurred, with (analytic, numeric).
    pub worst: (usize, f64, f64),
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<24} max_rel={:.3e} at [{}] analytic={:.9e} numeric={:.9e} {}",
                e.name,
                e.max_rel_error,
                e.worst.0,
                e.worst.1,
                e.worst.2,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Relative error with an absolute floor on the denominator.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the tape gradient of the scalar built by `f` against central
/// differences for every coordinate of every parameter in `store`.
///
/// `f` must be deterministic; it is invoked once for the analytic pass and
/// twice per coordinate.
pub fn grad_check<F>(store: &mut ParamStore, f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    grad_check_with_floor(store, f, step, tol, DEFAULT_ABS_FLOOR)
}

pub fn grad_check_with_floor<F>(
    store: &mut ParamStore,
    f: F,
    step: f64,
    tol: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    assert!(step > 0.0 && step <= 1e-2, "finite-difference step out of range");
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    let grads = tape.backward(root)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = f(&mut tape, store)?;
        Ok(tape.value(root).data()[0])
    };

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = grads
            .param(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).value.len()]);
        let mut worst = (0, 0.0, 0.0);
        let mut max_rel: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = rel_error(a, numeric, floor);
            if rel > max_rel || i == 0 {
                max_rel = max_rel.max(rel);
                worst = (i, a, numeric);
            }
        }
        entries.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: max_rel,
            worst,
            passed: max_rel <= tol,
        });
    }
    Ok(GradCheckReport { entries, tol })
}
