//! Least-squares adversarial losses and the steering-regression task loss,
//! each with its score-level gradient for chaining into the networks.
//!
//! Label convention: true virtual images carry target 1, generated images
//! target 0. The discriminator minimizes
//! `1/2 mean((D(v)-1)^2) + 1/2 mean(D(f)^2)`; the generator minimizes the
//! non-saturating form `1/2 mean((D(f)-1)^2)`.

use crate::error::{Error, Result};
use crate::num::{s, Scalar};
use ndarray::Array1;

/// Discriminator objective value.
pub fn domain_loss_d<S: Scalar>(scores_virtual: &Array1<S>, scores_fake: &Array1<S>) -> Result<S> {
    Ok(domain_loss_d_grad(scores_virtual, scores_fake)?.0)
}

/// Discriminator objective and its gradients with respect to both score
/// vectors.
pub fn domain_loss_d_grad<S: Scalar>(
    scores_virtual: &Array1<S>,
    scores_fake: &Array1<S>,
) -> Result<(S, Array1<S>, Array1<S>)> {
    if scores_virtual.is_empty() || scores_fake.is_empty() {
        return Err(Error::InvalidInput("domain loss needs non-empty score lists".into()));
    }
    let half = s::<S>(0.5);
    let nv = s::<S>(scores_virtual.len() as f64);
    let nf = s::<S>(scores_fake.len() as f64);
    let lv: S = scores_virtual.iter().map(|v| (*v - S::one()) * (*v - S::one())).sum::<S>() / nv;
    let lf: S = scores_fake.iter().map(|v| *v * *v).sum::<S>() / nf;
    let loss = half * lv + half * lf;
    let dv = scores_virtual.mapv(|v| (v - S::one()) / nv);
    let df = scores_fake.mapv(|v| v / nf);
    Ok((loss, dv, df))
}

/// Generator adversarial objective value.
pub fn domain_loss_g<S: Scalar>(scores_fake: &Array1<S>) -> Result<S> {
    Ok(domain_loss_g_grad(scores_fake)?.0)
}

/// Generator adversarial objective and its gradient with respect to the fake
/// scores.
pub fn domain_loss_g_grad<S: Scalar>(scores_fake: &Array1<S>) -> Result<(S, Array1<S>)> {
    if scores_fake.is_empty() {
        return Err(Error::InvalidInput("domain loss needs non-empty score lists".into()));
    }
    let half = s::<S>(0.5);
    let n = s::<S>(scores_fake.len() as f64);
    let loss: S =
        half * scores_fake.iter().map(|v| (*v - S::one()) * (*v - S::one())).sum::<S>() / n;
    let grad = scores_fake.mapv(|v| (v - S::one()) / n);
    Ok((loss, grad))
}

/// Weighted mean squared error between predicted and true inverse turning
/// radii.
pub fn task_loss<S: Scalar>(
    pred_u: &Array1<S>,
    true_u: &Array1<S>,
    weights: Option<&Array1<S>>,
) -> Result<S> {
    Ok(task_loss_grad(pred_u, true_u, weights)?.0)
}

/// Task loss and its gradient with respect to the predictions.
pub fn task_loss_grad<S: Scalar>(
    pred_u: &Array1<S>,
    true_u: &Array1<S>,
    weights: Option<&Array1<S>>,
) -> Result<(S, Array1<S>)> {
    if pred_u.len() != true_u.len() {
        return Err(Error::Dimension(format!(
            "task loss length mismatch: {} predictions vs {} targets",
            pred_u.len(),
            true_u.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != pred_u.len() {
            return Err(Error::Dimension(format!(
                "task loss length mismatch: {} weights vs {} predictions",
                w.len(),
                pred_u.len()
            )));
        }
    }
    if pred_u.is_empty() {
        return Err(Error::InvalidInput("task loss needs non-empty inputs".into()));
    }
    let total_w: S = match weights {
        Some(w) => w.iter().copied().sum(),
        None => s(pred_u.len() as f64),
    };
    let mut loss = S::zero();
    let mut grad = Array1::<S>::zeros(pred_u.len());
    let two = s::<S>(2.0);
    for i in 0..pred_u.len() {
        let w = weights.map_or(S::one(), |w| w[i]);
        let diff = pred_u[i] - true_u[i];
        loss += w * diff * diff;
        grad[i] = two * w * diff / total_w;
    }
    Ok((loss / total_w, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn perfect_discrimination_scores_zero() {
        let v = array![1.0f64, 1.0];
        let f = array![0.0f64, 0.0];
        assert_eq!(domain_loss_d(&v, &f).unwrap(), 0.0);
    }

    #[test]
    fn half_scores() {
        let v = array![0.5f64, 0.5];
        let f = array![0.5f64, 0.5];
        assert_abs_diff_eq!(domain_loss_d(&v, &f).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn generator_fooling_scores_zero() {
        assert_eq!(domain_loss_g(&array![1.0f64]).unwrap(), 0.0);
        assert_abs_diff_eq!(domain_loss_g(&array![0.0f64, 2.0]).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn task_loss_basics() {
        let p = array![0.3f64, -0.1];
        assert_eq!(task_loss(&p, &p, None).unwrap(), 0.0);
        let t = array![-0.7f64, 0.9];
        // differences 1 and -1 with unit weights
        assert_abs_diff_eq!(task_loss(&p, &t, None).unwrap(), 1.0, epsilon = 1e-15);
        assert!(task_loss(&p, &array![0.0f64], None).is_err());
    }

    #[test]
    fn losses_match_independent_recomputation() {
        let mut rng = crate::rng::stream(3, "loss_oracle");
        let v: Array1<f64> = Array1::from_iter((0..7).map(|_| rng.random_range(-2.0..2.0)));
        let f: Array1<f64> = Array1::from_iter((0..5).map(|_| rng.random_range(-2.0..2.0)));

        let expect_d = 0.5 * v.iter().map(|x| (x - 1.0) * (x - 1.0)).sum::<f64>() / 7.0
            + 0.5 * f.iter().map(|x| x * x).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(domain_loss_d(&v, &f).unwrap(), expect_d, epsilon = 1e-12);

        let expect_g = 0.5 * f.iter().map(|x| (x - 1.0) * (x - 1.0)).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(domain_loss_g(&f).unwrap(), expect_g, epsilon = 1e-12);

        let p: Array1<f64> = Array1::from_iter((0..6).map(|_| rng.random_range(-1.0..1.0)));
        let t: Array1<f64> = Array1::from_iter((0..6).map(|_| rng.random_range(-1.0..1.0)));
        let w: Array1<f64> = Array1::from_iter((0..6).map(|_| rng.random_range(0.1..2.0)));
        let expect_t = p
            .iter()
            .zip(&t)
            .zip(&w)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum::<f64>()
            / w.sum();
        assert_abs_diff_eq!(task_loss(&p, &t, Some(&w)).unwrap(), expect_t, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(4, "loss_fd");
        let v: Array1<f64> = Array1::from_iter((0..4).map(|_| rng.random_range(-2.0..2.0)));
        let f: Array1<f64> = Array1::from_iter((0..3).map(|_| rng.random_range(-2.0..2.0)));
        let h = 1e-6;

        let (_, dv, df) = domain_loss_d_grad(&v, &f).unwrap();
        for i in 0..v.len() {
            let mut up = v.clone();
            up[i] += h;
            let mut dn = v.clone();
            dn[i] -= h;
            let fd = (domain_loss_d(&up, &f).unwrap() - domain_loss_d(&dn, &f).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(dv[i], fd, epsilon = 1e-8);
        }
        for i in 0..f.len() {
            let mut up = f.clone();
            up[i] += h;
            let mut dn = f.clone();
            dn[i] -= h;
            let fd = (domain_loss_d(&v, &up).unwrap() - domain_loss_d(&v, &dn).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(df[i], fd, epsilon = 1e-8);
        }

        let (_, dg) = domain_loss_g_grad(&f).unwrap();
        for i in 0..f.len() {
            let mut up = f.clone();
            up[i] += h;
            let mut dn = f.clone();
            dn[i] -= h;
            let fd = (domain_loss_g(&up).unwrap() - domain_loss_g(&dn).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(dg[i], fd, epsilon = 1e-8);
        }

        let p: Array1<f64> = Array1::from_iter((0..5).map(|_| rng.random_range(-1.0..1.0)));
        let t: Array1<f64> = Array1::from_iter((0..5).map(|_| rng.random_range(-1.0..1.0)));
        let (_, dt) = task_loss_grad(&p, &t, None).unwrap();
        for i in 0..p.len() {
            let mut up = p.clone();
            up[i] += h;
            let mut dn = p.clone();
            dn[i] -= h;
            let fd =
                (task_loss(&up, &t, None).unwrap() - task_loss(&dn, &t, None).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(dt[i], fd, epsilon = 1e-8);
        }
    }
}
