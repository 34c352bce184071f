use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error, as `(parameter, index)`.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

/// Largest relative disagreement between tape gradients and central
/// differences over every trainable coordinate of `store`.
pub fn fd_check<F>(f: F, store: &mut ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    fd_check_report(f, store, eps, |_, _| false).map(|r| r.max_rel_err)
}

/// As [`fd_check`], skipping coordinates for which `skip(name, index)` holds.
pub fn fd_check_report<F, S>(f: F, store: &mut ParamStore, eps: f64, skip: S) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    S: Fn(&str, usize) -> bool,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Contract(format!("fd eps {eps} outside (0, 1e-3]")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base = tape.item(out);
    let grads = tape.gradients(out)?;
    drop(tape);
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "function under gradient check is not deterministic".into(),
        ));
    }

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for name in store.trainable_names() {
        let n = store.get(&name)?.numel();
        let analytic = grads.get(&name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            if skip(&name, i) {
                report.skipped += 1;
                continue;
            }
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(&name)?.data_mut()[i] = orig;
            let cd = (plus? - minus?) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
