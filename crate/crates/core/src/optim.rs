//! Momentum SGD and a central-difference gradient checker.

use crate::error::{Error, Result};
use crate::params::{GroupMask, ModelParams};

/// Heavy-ball SGD: `v <- momentum * v + g; p <- p - lr * v`.
///
/// Only tensors whose group is in `mask` are touched; their velocity buffers
/// included. A non-finite gradient aborts before anything is written.
pub fn sgd_step(
    params: &mut ModelParams,
    velocity: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
    momentum: f64,
    mask: &GroupMask,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    for (name, group, g) in grads.tensors() {
        if mask.contains(group) && !g.is_finite() {
            return Err(Error::numeric(name, "non-finite gradient"));
        }
    }
    let grad_tensors = grads.tensors();
    for (((group, p), (_, v)), (_, _, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut())
        .zip(grad_tensors)
    {
        if !mask.contains(group) {
            continue;
        }
        for ((pv, vv), gv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(v.as_mut_slice().iter_mut())
            .zip(g.as_slice())
        {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic| + |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Flat index where the largest error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor for relative errors of vanishing gradients.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss` around `point`.
pub fn check_gradients(
    mut loss: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    eps: f64,
) -> GradCheckReport {
    assert!(eps > 0.0, "finite-difference step must be positive");
    assert_eq!(analytic.len(), point.len());
    let mut probe = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let up = loss(&probe);
        probe[i] = point[i] - eps;
        let down = loss(&probe);
        probe[i] = point[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(REL_ERROR_FLOOR);
        if i == 0 || rel > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    report
}

/// [`check_gradients`] over every scalar of a [`ModelParams`].
pub fn check_param_gradients(
    loss: impl Fn(&ModelParams) -> f64,
    grads: &ModelParams,
    params: &ModelParams,
    eps: f64,
) -> GradCheckReport {
    let mut scratch = params.clone();
    check_gradients(
        |flat| {
            scratch.assign_flat(flat).expect("same layout");
            loss(&scratch)
        },
        &grads.flatten(),
        &params.flatten(),
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Architecture, ParamGroup};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(value: f64) -> (ModelParams, ModelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::init(Architecture::new(1, 1, 0), &mut rng).unwrap();
        p.feature[0].weight[(0, 0)] = value;
        let v = p.zeros_like();
        (p, v)
    }

    fn grad_of(p: &ModelParams, g: f64) -> ModelParams {
        let mut grads = p.zeros_like();
        grads.feature[0].weight[(0, 0)] = g;
        grads
    }

    #[test]
    fn plain_step() {
        let (mut p, mut v) = scalar_params(1.0);
        let g = grad_of(&p, 1.0);
        sgd_step(&mut p, &mut v, &g, 0.1, 0.0, &GroupMask::ALL).unwrap();
        assert!((p.feature[0].weight[(0, 0)] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut p, mut v) = scalar_params(1.0);
        let g = grad_of(&p, 1.0);
        for _ in 0..2 {
            sgd_step(&mut p, &mut v, &g, 0.1, 0.9, &GroupMask::ALL).unwrap();
        }
        assert!((p.feature[0].weight[(0, 0)] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut p, mut v) = scalar_params(1.0);
        let before = p.clone();
        let g = p.zeros_like();
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, &GroupMask::ALL).unwrap();
        assert_eq!(p, before);
        assert_eq!(v, p.zeros_like());
    }

    #[test]
    fn masked_groups_untouched() {
        let (mut p, mut v) = scalar_params(1.0);
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, m) in g.tensors_mut() {
            m.as_mut_slice().fill(1.0);
        }
        sgd_step(
            &mut p,
            &mut v,
            &g,
            0.1,
            0.0,
            &GroupMask::only(ParamGroup::Discriminator),
        )
        .unwrap();
        assert_eq!(p.feature, before.feature);
        assert_eq!(p.cls, before.cls);
        assert_ne!(p.disc, before.disc);
    }

    #[test]
    fn non_finite_gradient_is_reported_by_name() {
        let (mut p, mut v) = scalar_params(1.0);
        let g = grad_of(&p, f64::NAN);
        let err = sgd_step(&mut p, &mut v, &g, 0.1, 0.0, &GroupMask::ALL).unwrap_err();
        assert!(err.to_string().contains("feature.0.weight"), "{err}");
    }

    #[test]
    fn invalid_hyperparameters() {
        let (mut p, mut v) = scalar_params(1.0);
        let g = p.zeros_like();
        assert!(sgd_step(&mut p, &mut v, &g, 0.0, 0.0, &GroupMask::ALL).is_err());
        assert!(sgd_step(&mut p, &mut v, &g, 0.1, 1.0, &GroupMask::ALL).is_err());
    }

    #[test]
    fn quadratic_gradient_check() {
        for eps in [1e-2, 1e-4, 1e-6] {
            let r = check_gradients(|p| 0.5 * p[0] * p[0], &[3.0], &[3.0], eps);
            assert!(r.max_rel_error < 1e-8, "{r:?}");
        }
        let r = check_gradients(|p| 0.5 * p[0] * p[0], &[2.0], &[3.0], 1e-5);
        assert!(r.max_rel_error > 0.1);
    }
}
