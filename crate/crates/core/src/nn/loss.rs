//! Tempered softmax and the three training losses (cross-entropy, KL
//! distillation, MSE), each with a value-only form and a form returning the
//! gradient with respect to its first input.

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which way round the distillation divergence is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOrder {
    /// `KL(teacher ‖ student)`, the usual distillation objective.
    #[default]
    TeacherStudent,
    /// `KL(student ‖ teacher)`.
    StudentTeacher,
}

fn check_tau(tau: f64) -> Result<(), NnError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(NnError::Argument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_2d(t: &Tensor, what: &str) -> Result<(), NnError> {
    if t.rank() != 2 {
        return Err(NnError::Argument(format!("{what} must be a (batch, classes) tensor, got {:?}", t.shape())));
    }
    Ok(())
}

/// Row-wise `log softmax(z / tau)`, stabilized by max subtraction.
fn log_softmax_rows(logits: &Tensor, tau: f64) -> Tensor {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.rows() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let lse = row.iter().map(|&v| (v / tau - max).exp()).sum::<f64>().ln() + max;
        out.extend(row.iter().map(|&v| v / tau - lse));
    }
    Tensor::new(logits.shape().to_vec(), out).unwrap()
}

/// `softmax(logits / tau)` per row.
pub fn tempered_softmax(logits: &Tensor, tau: f64) -> Result<Tensor, NnError> {
    check_tau(tau)?;
    check_2d(logits, "logits")?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.rows() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let exps: Vec<f64> = row.iter().map(|&v| (v / tau - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(), NnError> {
    check_2d(logits, "logits")?;
    if labels.len() != logits.batch() {
        return Err(NnError::Argument(format!("{} labels for a batch of {}", labels.len(), logits.batch())));
    }
    let classes = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(NnError::Argument(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean over the batch of `-ln softmax(logits / tau)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], tau: f64) -> Result<f64, NnError> {
    cross_entropy_grad(logits, labels, tau).map(|(v, _)| v)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize], tau: f64) -> Result<(f64, Tensor), NnError> {
    check_tau(tau)?;
    check_labels(logits, labels)?;
    let logp = log_softmax_rows(logits, tau);
    let b = logits.batch() as f64;
    let c = logits.shape()[1];
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (n, row) in logp.rows().enumerate() {
        loss -= row[labels[n]];
        for (j, &lp) in row.iter().enumerate() {
            let target = if j == labels[n] { 1.0 } else { 0.0 };
            grad.push((lp.exp() - target) / (tau * b));
        }
    }
    debug_assert_eq!(grad.len(), logits.batch() * c);
    Ok((loss / b, Tensor::new(logits.shape().to_vec(), grad)?))
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(NnError::Argument(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over the batch of `Σ teacher · (ln teacher − ln student)`, with both
/// probabilities clamped to `[PROB_FLOOR, 1]` inside the logarithms.
pub fn kl_divergence(student: &Tensor, teacher: &Tensor) -> Result<f64, NnError> {
    check_same(student, teacher)?;
    check_2d(student, "probabilities")?;
    let clamp = |p: f64| p.clamp(PROB_FLOOR, 1.0);
    let total: f64 = student
        .rows()
        .zip(teacher.rows())
        .map(|(s, t)| s.iter().zip(t).map(|(&s, &t)| t * (clamp(t).ln() - clamp(s).ln())).sum::<f64>())
        .sum();
    Ok(total / student.batch() as f64)
}

/// `tau² · KL` between a fixed teacher distribution and the tempered softmax
/// of `student_logits`, with the gradient with respect to `student_logits`.
///
/// The teacher is treated as a constant.
pub fn distill_kl_grad(
    student_logits: &Tensor,
    teacher: &Tensor,
    tau: f64,
    order: KlOrder,
) -> Result<(f64, Tensor), NnError> {
    check_tau(tau)?;
    check_2d(student_logits, "logits")?;
    check_same(student_logits, teacher)?;
    let logq = log_softmax_rows(student_logits, tau);
    let b = student_logits.batch() as f64;
    let scale = tau * tau;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(student_logits.len());
    for (lq, p) in logq.rows().zip(teacher.rows()) {
        match order {
            KlOrder::TeacherStudent => {
                for (&lqj, &pj) in lq.iter().zip(p) {
                    loss += pj * (pj.clamp(PROB_FLOOR, 1.0).ln() - lqj);
                    // d/dz of -Σ p ln q = (q - p) / tau
                    grad.push(scale * (lqj.exp() - pj) / (tau * b));
                }
            }
            KlOrder::StudentTeacher => {
                let a: Vec<f64> = lq.iter().zip(p).map(|(&lqj, &pj)| lqj - pj.clamp(PROB_FLOOR, 1.0).ln()).collect();
                let mean_a: f64 = lq.iter().zip(&a).map(|(&lqj, &aj)| lqj.exp() * aj).sum();
                loss += mean_a;
                for (&lqj, &aj) in lq.iter().zip(&a) {
                    grad.push(scale * lqj.exp() * (aj - mean_a) / (tau * b));
                }
            }
        }
    }
    Ok((scale * loss / b, Tensor::new(student_logits.shape().to_vec(), grad)?))
}

/// Mean of squared element-wise differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, NnError> {
    mse_grad(a, b).map(|(v, _)| v)
}

/// MSE and its gradient with respect to `a`.
pub fn mse_grad(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor), NnError> {
    check_same(a, b)?;
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let loss = diffs.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diffs.into_iter().map(|d| 2.0 * d / n).collect();
    Ok((loss, Tensor::new(a.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn softmax_examples() {
        for tau in [0.1, 1.0, 7.0] {
            let p = tempered_softmax(&t(vec![1, 3], vec![0., 0., 0.]), tau).unwrap();
            assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let e = std::f64::consts::E;
        let p = tempered_softmax(&t(vec![1, 2], vec![1., 2.]), 1.0).unwrap();
        assert!((p.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((p.data()[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((p.data()[0] - 0.2689).abs() < 1e-4);
        let p = tempered_softmax(&t(vec![1, 2], vec![5., -5.]), 1e6).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.5).abs() < 1e-5));
        assert!(tempered_softmax(&t(vec![1, 2], vec![1., 2.]), 0.0).is_err());
        assert!(tempered_softmax(&t(vec![1, 2], vec![1., 2.]), -1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let confident = t(vec![1, 2], vec![20., 0.]);
        assert!(cross_entropy(&confident, &[0], 1.0).unwrap() <= 1e-4);
        let uniform = t(vec![2, 5], vec![0.3; 10]);
        assert!((cross_entropy(&uniform, &[1, 4], 1.0).unwrap() - 5f64.ln()).abs() < 1e-12);
        let v = cross_entropy(&t(vec![1, 2], vec![1., 2.]), &[0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((v + (1.0 / (1.0 + e)).ln()).abs() < 1e-12);
        assert!((v - 1.3133).abs() < 1e-4);
        assert!(cross_entropy(&uniform, &[0, 5], 1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = t(vec![2, 3], vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&t(vec![1, 2], vec![0.5, 0.5]), &t(vec![1, 2], vec![1.0, 0.0])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert!(kl_divergence(&t(vec![1, 2], vec![0.5, 0.5]), &t(vec![1, 3], vec![1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = t(vec![2], vec![1., 2.]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&t(vec![2], vec![0., 0.]), &t(vec![2], vec![1., 1.])).unwrap(), 1.0);
        assert_eq!(mse(&a, &t(vec![2], vec![3., 0.])).unwrap(), 4.0);
        assert!(mse(&a, &t(vec![3], vec![0., 0., 0.])).is_err());
    }

    #[test]
    fn distill_value_matches_kl_on_probabilities() {
        let z = t(vec![2, 3], vec![0.1, -1.0, 2.0, 0.5, 0.5, -0.3]);
        let teacher = tempered_softmax(&t(vec![2, 3], vec![1.0, 0.0, -1.0, 0.2, 0.9, 0.0]), 2.0).unwrap();
        let (v, _) = distill_kl_grad(&z, &teacher, 2.0, KlOrder::TeacherStudent).unwrap();
        let q = tempered_softmax(&z, 2.0).unwrap();
        let direct = 4.0 * kl_divergence(&q, &teacher).unwrap();
        assert!((v - direct).abs() < 1e-12);
        let (rv, _) = distill_kl_grad(&z, &teacher, 2.0, KlOrder::StudentTeacher).unwrap();
        let reverse = 4.0 * kl_divergence(&teacher, &q).unwrap();
        assert!((rv - reverse).abs() < 1e-12);
    }

    #[test]
    fn distill_gradient_vanishes_at_teacher() {
        let z = t(vec![1, 3], vec![0.3, -0.2, 1.1]);
        let teacher = tempered_softmax(&z, 1.5).unwrap();
        for order in [KlOrder::TeacherStudent, KlOrder::StudentTeacher] {
            let (v, g) = distill_kl_grad(&z, &teacher, 1.5, order).unwrap();
            assert!(v.abs() < 1e-15);
            assert!(g.data().iter().all(|x| x.abs() < 1e-15));
        }
    }

    fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.clone();
                let mut b = x.clone();
                a.data_mut()[i] += h;
                b.data_mut()[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let z = t(vec![2, 3], vec![0.1, -1.0, 2.0, 0.5, 0.4, -0.3]);
        let teacher = t(vec![2, 3], vec![0.7, 0.2, 0.1, 0.0, 0.5, 0.5]);
        for tau in [0.5, 1.0, 4.0] {
            let (_, g) = cross_entropy_grad(&z, &[2, 0], tau).unwrap();
            let ng = numeric_grad(|x| cross_entropy(x, &[2, 0], tau).unwrap(), &z);
            for (a, b) in g.data().iter().zip(&ng) {
                assert!((a - b).abs() < 1e-7, "ce tau {tau}: {a} vs {b}");
            }
            for order in [KlOrder::TeacherStudent, KlOrder::StudentTeacher] {
                let (_, g) = distill_kl_grad(&z, &teacher, tau, order).unwrap();
                let ng = numeric_grad(|x| distill_kl_grad(x, &teacher, tau, order).unwrap().0, &z);
                for (a, b) in g.data().iter().zip(&ng) {
                    assert!((a - b).abs() < 1e-6, "kl {order:?} tau {tau}: {a} vs {b}");
                }
            }
        }
        let target = t(vec![2, 3], vec![0.0; 6]);
        let (_, g) = mse_grad(&z, &target).unwrap();
        let ng = numeric_grad(|x| mse(x, &target).unwrap(), &z);
        for (a, b) in g.data().iter().zip(&ng) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    fn row_stochastic(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(0.0f64..1.0, rows * cols).prop_map(move |mut v| {
            for r in 0..rows {
                let s: f64 = v[r * cols..(r + 1) * cols].iter().sum::<f64>() + 1e-9;
                v[r * cols..(r + 1) * cols].iter_mut().for_each(|x| *x = (*x + 1e-9 / cols as f64) / s);
            }
            Tensor::new(vec![rows, cols], v).unwrap()
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            logits in proptest::collection::vec(-50.0f64..50.0, 12),
            tau in 0.05f64..20.0,
        ) {
            let p = tempered_softmax(&Tensor::new(vec![3, 4], logits).unwrap(), tau).unwrap();
            for row in p.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn kl_is_nonnegative(p in row_stochastic(2, 5), q in row_stochastic(2, 5)) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-9);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }
    }
}
