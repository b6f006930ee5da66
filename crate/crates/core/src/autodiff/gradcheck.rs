use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst coordinate found by [`grad_check_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Largest relative disagreement between reverse-mode gradients of `f` at
/// `x` and central differences with step `eps`.
///
/// `f` builds a scalar from its input on the graph it is handed; it is
/// re-run on a fresh graph for every perturbed coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    Ok(grad_check_report(f, x, eps)?.max_relative_error)
}

pub fn grad_check_report<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Value(format!("grad_check step must be > 0, got {eps}")));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = match g.grad(xv) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let y = f(&mut g, v)?;
        g.value(y).item()
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_relative_error || rel.is_nan() {
            report = GradCheckReport {
                max_relative_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Checks the listed coordinates of parameter `id` only, everything else
/// held constant. The coordinates are driven by a small perturbation
/// vector through a one-hot selection, so large models stay cheap to
/// check.
pub fn grad_check_param<F>(
    store: &ParamStore,
    id: ParamId,
    coords: &[usize],
    eps: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let base = store.get(id).clone();
    let n = base.numel();
    let k = coords.len();
    if k == 0 {
        return Err(Error::EmptyInput("no coordinates to check".into()));
    }
    if let Some(&c) = coords.iter().find(|&&c| c >= n) {
        return Err(Error::Value(format!("coordinate {c} outside a {n}-element parameter")));
    }
    let mut select = vec![0.0; n * k];
    for (j, &c) in coords.iter().enumerate() {
        select[c * k + j] = 1.0;
    }
    let select = Tensor::new(vec![n, k], select)?;
    let f = |g: &mut Graph, delta: Var| {
        let s = g.constant(select.clone());
        let d = g.reshape(delta, &[k, 1])?;
        let moved = g.matmul(s, d)?;
        let moved = g.reshape(moved, base.shape())?;
        let b = g.constant(base.clone());
        let param = g.add(b, moved)?;
        let bound = store.bind_with(g, id, param);
        loss(g, &bound)
    };
    grad_check_report(f, &Tensor::zeros(&[k]), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[7], 1.0, &mut rng);
        let err = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_sum_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[12], 1.0, &mut rng);
        let f = |g: &mut Graph, x: Var| {
            let s = g.sigmoid(x);
            Ok(g.sum(s))
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn parameter_subset_matches_full_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        let loss = |g: &mut Graph, p: &Bound| {
            let t = g.tanh(p.var(w));
            let sq = g.mul(t, t)?;
            Ok(g.sum(sq))
        };
        let r = grad_check_param(&store, w, &[0, 5, 11], 1e-5, loss).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert!(grad_check_param(&store, w, &[12], 1e-5, loss).is_err());
        assert!(grad_check_param(&store, w, &[], 1e-5, loss).is_err());
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // clamp has zero gradient outside its range, but a step straddling
        // the boundary sees a slope: central differences must disagree.
        let x = Tensor::from_slice(&[1], &[1.0]).unwrap();
        let f = |g: &mut Graph, x: Var| {
            let c = g.clamp(x, 0.0, 1.0);
            Ok(g.sum(c))
        };
        assert!(grad_check(f, &x, 1e-3).unwrap() > 0.1);
    }
}
