//! Central finite-difference checks of tape gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Elements whose probes crossed a non-differentiable branch.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks every trainable element of `store` against central differences of
/// the scalar built by `build`.
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, build: F) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (Graph, Var),
{
    store.zero_grad();
    let (g, loss) = build(store);
    g.backward(loss, store).expect("scalar loss");
    let ids: Vec<ParamId> = store.ids().filter(|&id| !store.block(id).frozen).collect();
    check_stored_gradients(store, h, &ids, |s, _| {
        let (g, l) = build(s);
        (g.scalar(l), g.kink_signature())
    })
}

/// Compares the gradients already accumulated in `store` for `ids` against
/// central differences of `probe(store, perturbed_block)`, which returns the
/// objective and its kink signature.
pub fn check_stored_gradients<P>(store: &mut ParamStore, h: f64, ids: &[ParamId], probe: P) -> GradCheckReport
where
    P: Fn(&ParamStore, ParamId) -> (f64, u64),
{
    let mut report = GradCheckReport { checked: 0, skipped: 0, max_rel_error: 0.0, worst: None };
    for &id in ids {
        let analytic = store.block(id).grad.clone();
        let (_, base_sig) = probe(store, id);
        for k in 0..analytic.len() {
            let orig = store.block(id).value.as_slice().expect("standard layout")[k];
            store.block_mut(id).value.as_slice_mut().expect("standard layout")[k] = orig + h;
            let (fp, sp) = probe(store, id);
            store.block_mut(id).value.as_slice_mut().expect("standard layout")[k] = orig - h;
            let (fm, sm) = probe(store, id);
            store.block_mut(id).value.as_slice_mut().expect("standard layout")[k] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().expect("standard layout")[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.block(id).name.clone(), k));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(1e-8, 0.0), 1e-2);
    }
}
