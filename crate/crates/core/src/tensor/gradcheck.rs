use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum, if any were checked.
    pub worst: Option<usize>,
    pub checked: usize,
}

/// Checks `analytic` (the gradient of `f` at `params`) against central
/// differences `(f(p + eps·e_i) − f(p − eps·e_i)) / 2eps` on the given coordinates.
pub fn finite_diff_check<S: Scalar>(
    mut f: impl FnMut(&Tensor<S>) -> Result<S>,
    params: &Tensor<S>,
    analytic: &[S],
    eps: S,
    coords: &[usize],
) -> Result<GradCheck> {
    if !(eps > S::zero()) {
        return Err(Error::contract("finite_diff_check needs eps > 0"));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim(
            "finite_diff_check",
            format!("{} analytic values for {} parameters", analytic.len(), params.len()),
        ));
    }
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &i in coords {
        if i >= params.len() {
            return Err(Error::Index {
                op: "finite_diff_check",
                detail: format!("coordinate {i} of {}", params.len()),
            });
        }
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_diff_check"));
        }
        let numeric = ((plus - minus) / (eps + eps)).as_f64();
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(i);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn value_and_grad(
        p: &Tensor<f64>,
        build: impl Fn(&mut Graph<'_, f64>, crate::tensor::Var) -> Result<crate::tensor::Var>,
    ) -> (f64, Vec<f64>) {
        let p = p.clone().with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.input(&p);
        let loss = build(&mut g, v).unwrap();
        let value = g.scalar_value(loss).unwrap();
        let grads = g.backward(loss).unwrap();
        (value, grads.get_or_zeros(v, p.len()))
    }

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap();
        let quad = |g: &mut Graph<'_, f64>, v| {
            let sq = g.mul(v, v)?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5)
        };
        let (_, grad) = value_and_grad(&p, quad);
        let report = finite_diff_check(
            |q| Ok(value_and_grad(q, quad).0),
            &p,
            &grad,
            1e-5,
            &[0, 1, 2],
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let report = finite_diff_check(|_| Ok(4.0), &p, &[0.0, 0.0], 1e-5, &[0, 1]).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_function_is_numeric_error() {
        let p = Tensor::new([1], vec![1.0]).unwrap();
        let err = finite_diff_check(|_| Ok(f64::NAN), &p, &[0.0], 1e-5, &[0]).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let p = Tensor::new([1], vec![1.0]).unwrap();
        assert!(finite_diff_check(|_| Ok(0.0), &p, &[0.0], 0.0, &[0]).is_err());
    }

    // Every differentiable op, composed into small networks over inputs in [-1, 1].
    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand = |shape: &[usize]| -> Tensor<f64> {
            Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
        };
        let w = rand(&[4, 6]);
        let w2 = rand(&[3, 6]);
        let gamma = rand(&[6]);
        let beta = rand(&[6]);
        let table = rand(&[5, 4]);
        let other = rand(&[3, 6]);
        let cases: Vec<(&str, Tensor<f64>)> = vec![
            ("two_layer", rand(&[3, 4])),
            ("layer_norm", rand(&[3, 6])),
            ("attention", rand(&[3, 6])),
            ("slices", rand(&[3, 6])),
            ("embedding", table.clone()),
            ("abs_mean", rand(&[3, 6])),
        ];
        for (name, p) in cases {
            let build = |g: &mut Graph<'_, f64>, v: crate::tensor::Var| -> Result<crate::tensor::Var> {
                match name {
                    "two_layer" => {
                        let vw = g.owned(w.clone());
                        let h = g.matmul(v, vw)?;
                        let a = g.gelu(h)?;
                        let vw2 = g.owned(w2.clone());
                        let logits = g.matmul_nt(a, vw2)?;
                        g.cross_entropy(logits, &[0, 2, 1], &[0.5, 0.25, 0.25])
                    }
                    "layer_norm" => {
                        let (gm, bt) = (g.owned(gamma.clone()), g.owned(beta.clone()));
                        let y = g.layer_norm(v, gm, bt, 1e-5)?;
                        let o = g.owned(other.clone());
                        let z = g.mul(y, o)?;
                        g.sum(z)
                    }
                    "attention" => {
                        let s = g.matmul_nt(v, v)?;
                        let p = g.causal_softmax(s, 0.7)?;
                        let o = g.matmul(p, v)?;
                        let t = g.transpose(o)?;
                        let sq = g.mul(t, t)?;
                        g.sum(sq)
                    }
                    "slices" => {
                        let a = g.slice(v, 1, 0, 2)?;
                        let b = g.slice(v, 1, 2, 6)?;
                        let c = g.concat(&[b, a], 1)?;
                        let r = g.slice(c, 0, 1, 3)?;
                        let r0 = g.slice(c, 0, 0, 1)?;
                        let rr = g.concat(&[r, r0], 0)?;
                        let o = g.owned(other.clone());
                        let m = g.mul(rr, o)?;
                        let s = g.sub(m, rr)?;
                        let q = g.mul(s, s)?;
                        g.sum(q)
                    }
                    "embedding" => {
                        let e = g.embedding(v, &[4, 0, 4, 2])?;
                        let sq = g.mul(e, e)?;
                        let sc = g.scale(sq, 1.5)?;
                        g.mean(sc)
                    }
                    _ => {
                        let o = g.owned(other.clone());
                        let d = g.add(v, o)?;
                        let a = g.abs(d)?;
                        let m = g.mean(a)?;
                        let mm = g.mul(m, m)?;
                        g.add(m, mm)
                    }
                }
            };
            let (_, grad) = value_and_grad(&p, build);
            let coords: Vec<usize> = (0..p.len()).collect();
            let report = finite_diff_check(
                |q| Ok(value_and_grad(q, build).0),
                &p,
                &grad,
                1e-5,
                &coords,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{name}: {report:?}");
        }
    }
}
