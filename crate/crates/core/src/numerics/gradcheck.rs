use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-3;

/// Result of comparing reverse-mode gradients to central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter tensor and flat element index where the worst error occurred.
    pub worst_param: usize,
    pub worst_index: usize,
    pub checked: usize,
    /// Elements whose `±eps` probe crossed a non-differentiable point.
    pub skipped: usize,
}

/// Loss value, plus per-parameter gradients when they were requested.
pub struct LossEval<S> {
    pub loss: f64,
    pub grads: Option<Vec<Vec<S>>>,
    /// Identifies the smooth piece the evaluation fell on; see
    /// [`Graph::kink_signature`](super::Graph::kink_signature). `None` for
    /// everywhere-smooth losses.
    pub kink_signature: Option<u64>,
}

impl<S> LossEval<S> {
    pub fn smooth(loss: f64, grads: Option<Vec<Vec<S>>>) -> Self {
        LossEval {
            loss,
            grads,
            kink_signature: None,
        }
    }
}

/// Checks analytic gradients against `(f(θ+eps) - f(θ-eps)) / (2 eps)` for
/// every element of every parameter tensor.
///
/// `loss_fn(params, want_grads)` must be deterministic. The relative error of
/// an element is `|a - n| / max(1e-8, |a| + |n|)`; the maximum is returned.
/// Elements whose perturbed evaluations report a different kink signature
/// than the unperturbed one are counted in `skipped` instead.
pub fn grad_check<S, F>(params: &[Tensor<S>], eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&[Tensor<S>], bool) -> Result<LossEval<S>>,
{
    let base = loss_fn(params, true)?;
    if !base.loss.is_finite() {
        return Err(Error::NumericInput("grad check loss".into()));
    }
    let analytic = base
        .grads
        .ok_or_else(|| Error::shape("loss function returned no gradients"))?;
    if analytic.len() != params.len()
        || analytic.iter().zip(params).any(|(g, p)| g.len() != p.len())
    {
        return Err(Error::shape("gradient shapes do not match parameters"));
    }

    let mut work: Vec<Tensor<S>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        checked: 0,
        skipped: 0,
    };
    for pi in 0..work.len() {
        for ei in 0..work[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + S::from_f64_lossy(eps);
            let plus = loss_fn(&work, false)?;
            work[pi].data_mut()[ei] = orig - S::from_f64_lossy(eps);
            let minus = loss_fn(&work, false)?;
            work[pi].data_mut()[ei] = orig;
            if plus.kink_signature != base.kink_signature || minus.kink_signature != base.kink_signature {
                report.skipped += 1;
                continue;
            }
            let (plus, minus) = (plus.loss, minus.loss);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NumericInput("grad check loss".into()));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ei].to_f64_lossy();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_index = ei;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    #[test]
    fn quadratic_loss_is_exact() {
        let theta = vec![Tensor::<f64>::vector(vec![1.0, 2.0]).unwrap()];
        let report = grad_check(&theta, DEFAULT_EPS, |p, _| {
            let d = p[0].data();
            Ok(LossEval::smooth(0.5 * d.iter().map(|v| v * v).sum::<f64>(), Some(vec![d.to_vec()])))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let theta = vec![Tensor::<f64>::vector(vec![1.0, 2.0]).unwrap()];
        let report = grad_check(&theta, DEFAULT_EPS, |p, _| {
            let d = p[0].data();
            Ok(LossEval::smooth(0.5 * d.iter().map(|v| v * v).sum::<f64>(), Some(vec![vec![d[0], 2.0 * d[1]]])))
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
        assert_eq!((report.worst_param, report.worst_index), (0, 1));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let theta = vec![Tensor::<f64>::vector(vec![1.0]).unwrap()];
        let r = grad_check(&theta, DEFAULT_EPS, |_, _| Ok(LossEval::smooth(f64::NAN, Some(vec![vec![0.0]]))));
        assert!(matches!(r, Err(Error::NumericInput(_))));
    }

    #[test]
    fn linear_layer_with_bce() {
        // p = softmax(x W + b)[:, 1], loss = BCE(p, y).
        let x = Tensor::<f64>::matrix(3, 2, vec![0.5, -1.0, 1.5, 0.25, -0.75, 2.0]).unwrap();
        let labels = [1.0, 0.0, 1.0];
        let params = vec![
            Tensor::<f64>::matrix(2, 2, vec![0.3, -0.2, 0.1, 0.4]).unwrap(),
            Tensor::<f64>::vector(vec![0.05, -0.1]).unwrap(),
        ];
        let report = grad_check(&params, DEFAULT_EPS, |p, want| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let w = g.input(p[0].clone());
            let b = g.input(p[1].clone());
            let logits = g.linear(xv, w, b)?;
            let probs = g.softmax_rows(logits)?;
            let pos = g.column(probs, 1)?;
            let loss = g.bce_mean(pos, &labels)?;
            let value: f64 = g.value(loss).data()[0];
            let grads = if want {
                g.backward(loss)?;
                Some(vec![g.grad(w).unwrap().to_vec(), g.grad(b).unwrap().to_vec()])
            } else {
                None
            };
            Ok(LossEval::smooth(value, grads))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
