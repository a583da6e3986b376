//! Central finite-difference validation of analytic gradients.

use super::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} entries (tol {:.1e}, worst at {})",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.checked,
            self.tol,
            self.worst_index
        )
    }
}

/// Compare `analytic` against central differences of `eval` for parameter
/// `pid`. `max_checks` caps the number of probed entries (deterministic
/// even spacing); pass `None` to probe every entry. Failures are data, not
/// errors.
pub fn fd_check(
    store: &mut ParamStore,
    pid: ParamId,
    h: f64,
    tol: f64,
    analytic: &[f64],
    max_checks: Option<usize>,
    mut eval: impl FnMut(&ParamStore) -> f64,
) -> FdReport {
    assert!(h > 0.0, "step must be positive");
    let len = store.value(pid).len();
    assert_eq!(analytic.len(), len, "analytic gradient length");
    let indices: Vec<usize> = match max_checks {
        Some(m) if m < len => {
            let stride = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    };
    let mut max_rel = 0.0;
    let mut worst = 0;
    for &i in &indices {
        let orig = store.value(pid).data()[i];
        store.value_mut(pid).data_mut()[i] = orig + h;
        let fp = eval(store);
        store.value_mut(pid).data_mut()[i] = orig - h;
        let fm = eval(store);
        store.value_mut(pid).data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    FdReport {
        max_rel_err: max_rel,
        worst_index: worst,
        checked: indices.len(),
        tol,
        pass: max_rel < tol,
    }
}
