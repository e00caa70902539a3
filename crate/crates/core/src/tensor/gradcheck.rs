//! Central-difference gradient checking against the recording graph.

use crate::error::{Error, Result};

use super::{Graph, ParamId, Tensor, Var};

/// A perturbed evaluation that produced a non-finite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFinitePoint {
    pub param: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub non_finite: Vec<NonFinitePoint>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error <= tol
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(ParamId(i), p.clone()))
        .collect();
    let loss = f(&mut g, &vars)?;
    g.value(loss).item()
}

/// Compares the graph's analytic gradient of `f` with central differences at
/// every coordinate of every parameter. `f` receives one leaf per entry of
/// `params` and must return a scalar.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Shape {
            op: "grad_check: eps must be positive",
            lhs: vec![],
            rhs: vec![],
        });
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(ParamId(i), p.clone()))
        .collect();
    let loss = f(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    drop(g);

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut non_finite = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .take(ParamId(pi))
            .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
        let mut worst: f64 = 0.0;
        for j in 0..p.len() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                non_finite.push(NonFinitePoint { param: pi, index: j });
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        non_finite,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::layout::AttentionMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_form_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[4, 4], &mut rng);
        let x = random(&[4, 1], &mut rng);
        // f(x) = xᵀ A x
        let report = grad_check(
            |g, v| {
                let a = g.input(a.clone());
                let ax = g.matmul(a, v[0])?;
                let xt = g.transpose(v[0])?;
                let q = g.matmul(xt, ax)?;
                Ok(g.sum(q))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
    }

    #[test]
    fn masked_softmax_sum_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(&[2, 3, 3], &mut rng);
        let w = random(&[2, 3, 3], &mut rng);
        let mask = Arc::new(AttentionMask::from_fn(3, 3, |q, k| k <= q));
        let report = grad_check(
            |g, v| {
                let p = g.masked_softmax(v[0], mask.clone())?;
                let w = g.input(w.clone());
                let pw = g.mul(p, w)?;
                Ok(g.sum(pw))
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let p = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |g, _| Ok(g.input(Tensor::scalar(7.0))),
            &[p],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_points_are_reported() {
        // f = sum(1/x) is infinite once a coordinate is perturbed onto zero
        let p = Tensor::new([2], vec![1.0, 1e-5]).unwrap();
        let report = grad_check(
            |g, v| {
                let inv: f64 = g.value(v[0]).data().iter().map(|x| 1.0 / x).sum();
                Ok(g.input(Tensor::scalar(inv)))
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.non_finite, vec![NonFinitePoint { param: 0, index: 1 }]);
    }

    /// Every differentiable op used by the model, checked in isolation.
    #[test]
    fn each_graph_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x3 = random(&[2, 4, 6], &mut rng);
        let w = random(&[6, 5], &mut rng);
        let gain = random(&[6], &mut rng);
        let proj = random(&[2, 4, 6], &mut rng);
        let mask = Arc::new(AttentionMask::from_fn(4, 4, |q, k| k <= q && !(q == 3 && k == 1)));
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)> = vec![
            ("matmul", Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.mul(y, y)?;
                Ok(g.sum(y))
            })),
            ("rms_norm+silu", Box::new(|g, v| {
                let y = g.rms_norm(v[0], v[2])?;
                let y = g.silu(y);
                let p = g.input(proj.clone());
                let y = g.mul(y, p)?;
                Ok(g.sum(y))
            })),
            ("heads+bmm+softmax", Box::new(|g, v| {
                let q = g.split_heads(v[0], 2)?;
                let k = g.split_heads(v[3], 2)?;
                let s = g.batch_matmul(q, k, true)?;
                let p = g.masked_softmax(s, mask.clone())?;
                let o = g.batch_matmul(p, q, false)?;
                let o = g.merge_heads(o, 2)?;
                let pr = g.input(proj.clone());
                let o = g.mul(o, pr)?;
                Ok(g.sum(o))
            })),
            ("slice+concat+mean+l2", Box::new(|g, v| {
                let a = g.slice_seq(v[0], 1, 2)?;
                let b = g.slice_seq(v[3], 0, 1)?;
                let c = g.concat_seq(&[a, b])?;
                let m = g.mean_seq(c)?;
                let n = g.l2_normalize(m);
                let t = g.transpose(n)?;
                let gram = g.matmul(n, t)?;
                let sq = g.mul(gram, gram)?;
                Ok(g.mean(sq))
            })),
            ("broadcast+suffix+scale", Box::new(|g, v| {
                let r = g.reshape(v[2], [1, 6])?;
                let b = g.broadcast_batch(r, 2);
                let b = g.reshape(b, [2, 1, 6])?;
                let s = g.slice_seq(v[0], 0, 1)?;
                let s = g.add_broadcast(s, v[2])?;
                let y = g.sub(s, b)?;
                let y = g.scale(y, 0.3);
                let y = g.mul(y, y)?;
                Ok(g.sum(y))
            })),
        ];
        let params = [x3.clone(), w, gain, random(&[2, 4, 6], &mut rng)];
        for (name, f) in cases {
            let report = grad_check(|g, v| f(g, v), &params, 1e-5).unwrap();
            assert!(report.max_rel_error <= 1e-6, "{name}: {report:?}");
        }
    }
}
