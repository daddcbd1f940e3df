//! Scalar forms of the retriever objectives and their batched graph forms.

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::error::{Error, Result};

/// `−log softmax(pos)` over `[pos] ++ negs`; 0 when there are no negatives.
pub fn contrastive_loss(pos: f64, negs: &[f64]) -> Result<f64> {
    if !pos.is_finite() || negs.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(
            "contrastive loss on non-finite scores".into(),
        ));
    }
    let top = negs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top <= pos {
        // ln(1 + Σ e^(n − pos)) keeps tiny losses from rounding to zero
        return Ok(negs.iter().map(|n| (n - pos).exp()).sum::<f64>().ln_1p());
    }
    let lse = log_sum_exp(std::iter::once(pos).chain(negs.iter().copied()));
    Ok((lse - pos).max(0.0))
}

/// Row-wise softmax of `scores / temperature`.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let lse = log_sum_exp(scaled.iter().copied());
    scaled.iter().map(|s| (s - lse).exp()).collect()
}

/// `KL(softmax(teacher) ‖ softmax(student))`, evaluated in log space.
pub fn kd_loss(teacher: &[f64], student: &[f64]) -> Result<f64> {
    kd_loss_with_temperature(teacher, student, 1.0)
}

pub fn kd_loss_with_temperature(teacher: &[f64], student: &[f64], temperature: f64) -> Result<f64> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Contract(format!(
            "teacher has {} scores, student has {}; need equal non-zero lengths",
            teacher.len(),
            student.len()
        )));
    }
    if teacher.iter().chain(student).any(|s| !s.is_finite()) {
        return Err(Error::Numeric(
            "distillation loss on non-finite scores".into(),
        ));
    }
    let t: Vec<f64> = teacher.iter().map(|s| s / temperature).collect();
    let s: Vec<f64> = student.iter().map(|s| s / temperature).collect();
    let lt = log_sum_exp(t.iter().copied());
    let ls = log_sum_exp(s.iter().copied());
    let kl: f64 = t
        .iter()
        .zip(&s)
        .map(|(ti, si)| {
            let log_p = ti - lt;
            log_p.exp() * (log_p - (si - ls))
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Mean contrastive loss of a batch. `scores` is `B × U`; `cols[i]` lists
/// the candidate columns of query `i`, positive first.
pub fn batch_contrastive(g: &mut Graph, scores: Var, cols: &[Vec<usize>]) -> Var {
    let parts: Vec<Var> = cols
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let row = g.select(scores, i, c);
            g.cross_entropy(row, &[0])
        })
        .collect();
    let total = g.sum(&parts);
    g.scale(total, 1.0 / cols.len() as f64)
}

/// Mean listwise distillation loss of a batch against fixed teacher scores
/// aligned with `cols`.
pub fn batch_kd(
    g: &mut Graph,
    scores: Var,
    cols: &[Vec<usize>],
    teacher: &[Vec<f64>],
    temperature: f64,
) -> Var {
    let parts: Vec<Var> = cols
        .iter()
        .zip(teacher)
        .enumerate()
        .map(|(i, (c, t))| {
            let row = g.select(scores, i, c);
            let row = g.scale(row, 1.0 / temperature);
            g.kl_div(row, &softmax(t, temperature))
        })
        .collect();
    let total = g.sum(&parts);
    g.scale(total, 1.0 / cols.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn contrastive_reference_values() {
        assert_eq!(contrastive_loss(5.0, &[]).unwrap(), 0.0);
        let oracle = (1.0 + (-2.0f64).exp() + (-1.0f64).exp()).ln();
        let got = contrastive_loss(2.0, &[0.0, 1.0]).unwrap();
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.407606).abs() < 1e-6);
        for c in [-30.0, 0.0, 7.5, 800.0] {
            assert!((contrastive_loss(c, &[c, c, c]).unwrap() - 4f64.ln()).abs() < 1e-9);
        }
        assert!(contrastive_loss(f64::NAN, &[0.0]).is_err());
    }

    #[test]
    fn kd_reference_values() {
        let e = 1f64.exp();
        let (a, b) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let oracle = a * (a / b).ln() + b * (b / a).ln();
        let got = kd_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.462117).abs() < 1e-6);
        assert!(kd_loss(&[0.3, -2.0, 9.0], &[0.3, -2.0, 9.0]).unwrap().abs() < 1e-9);
        assert!(matches!(
            kd_loss(&[1.0], &[1.0, 2.0]),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn contrastive_is_positive_with_negatives(pos in -50.0..50.0f64, negs in prop::collection::vec(-50.0..50.0f64, 1..20)) {
            prop_assert!(contrastive_loss(pos, &negs).unwrap() > 0.0);
        }

        #[test]
        fn kd_is_non_negative_and_shift_invariant(
            pairs in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 1..16),
            shift in -100.0..100.0f64,
        ) {
            let (t, s): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let base = kd_loss(&t, &s).unwrap();
            prop_assert!(base >= 0.0);
            let shifted: Vec<f64> = t.iter().map(|x| x + shift).collect();
            prop_assert!((kd_loss(&shifted, &s).unwrap() - base).abs() < 1e-9);
            prop_assert!(kd_loss(&t, &t).unwrap().abs() < 1e-9);
        }

        #[test]
        fn graph_losses_match_scalar_forms(
            scores in prop::collection::vec(-10.0..10.0f64, 6),
            teacher in prop::collection::vec(-10.0..10.0f64, 3),
        ) {
            let store = crate::params::ParamStore::default();
            let mut g = Graph::new(&store);
            let s = g.leaf(crate::autograd::Mat::from_shape_vec((2, 3), scores.clone()).unwrap());
            let cols = vec![vec![0, 1, 2], vec![2, 0]];
            let c = batch_contrastive(&mut g, s, &cols);
            let expect = (contrastive_loss(scores[0], &scores[1..3]).unwrap()
                + contrastive_loss(scores[5], &[scores[3]]).unwrap()) / 2.0;
            prop_assert!((g.scalar(c) - expect).abs() < 1e-9);
            let k = batch_kd(&mut g, s, &cols[..1], &[teacher.clone()], 1.0);
            prop_assert!((g.scalar(k) - kd_loss(&teacher, &scores[..3]).unwrap()).abs() < 1e-9);
        }
    }
}
