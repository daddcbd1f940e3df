//! Central finite-difference checks of parameter gradients.

use rand::Rng;

use crate::autograd::Mat;
use crate::error::Result;
use crate::params::ParamStore;

/// Worst disagreement found by [`check_param_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|)`, or 0 when both are below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the gradients returned by `loss` against central differences
/// with step `eps` on up to `per_tensor` randomly chosen entries of every
/// tensor. `loss` returns the scalar loss and one gradient slot per tensor.
pub fn check_param_gradients<F>(
    params: &ParamStore,
    loss: F,
    eps: f64,
    per_tensor: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Vec<Option<Mat>>)>,
{
    let (_, grads) = loss(params)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for id in 0..params.len() {
        let n = params.tensor(id).len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for flat in picks {
            let cols = params.tensor(id).ncols();
            let at = [flat / cols, flat % cols];
            let original = params.tensor(id)[at];
            probe.tensor_mut(id)[at] = original + eps;
            let plus = loss(&probe)?.0;
            probe.tensor_mut(id)[at] = original - eps;
            let minus = loss(&probe)?.0;
            probe.tensor_mut(id)[at] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads
                .get(id)
                .and_then(|g| g.as_ref())
                .map_or(0.0, |g| g[at]);
            let err = relative_error(analytic, numeric, 1e-7);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), flat));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_passes_and_wrong_gradient_fails() {
        let mut store = ParamStore::default();
        store.insert(
            "w",
            Mat::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap(),
        );
        let f = |s: &ParamStore| s.tensor(0).iter().map(|v| v * v).sum::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let good = check_param_gradients(
            &store,
            |s| Ok((f(s), vec![Some(s.tensor(0) * 2.0)])),
            1e-4,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(good.max_rel_error < 1e-8, "{good:?}");
        assert_eq!(good.checked, 3);
        let bad = check_param_gradients(
            &store,
            |s| Ok((f(s), vec![Some(s.tensor(0) * 3.0)])),
            1e-4,
            8,
            &mut rng,
        )
        .unwrap();
        assert!((bad.max_rel_error - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn tiny_gradients_are_not_counted() {
        assert_eq!(relative_error(1e-9, -1e-9, 1e-7), 0.0);
        assert!((relative_error(1.0, 0.5, 1e-7) - 0.5).abs() < 1e-12);
    }
}
