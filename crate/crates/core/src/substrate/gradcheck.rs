//! Central finite differences against reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_abs_error: f64,
    /// `max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|)`
    /// over the tensor's entries.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Gradients below this magnitude count as zero: the relative error of a
/// tensor whose true gradient vanishes is its absolute error over this floor.
/// Central-difference roundoff at h = 1e-5 sits near 1e-11.
const SCALE_FLOOR: f64 = 1e-6;

/// Compare reverse-mode gradients of the scalar `f` with central differences
/// of step `h`, one parameter entry at a time. Runs in 64-bit.
pub fn grad_check<F>(f: F, params: &ParamSet<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, ps)?;
        g.ensure_finite()?;
        let v = g.value(out);
        if v.shape() != [1, 1] {
            return Err(Error::Shape(format!("grad_check needs a scalar, got {:?}", v.shape())));
        }
        let x = v.get(0, 0);
        if !x.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {x}")));
        }
        Ok(x)
    };

    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let analytic = g.backward(out)?.param_grads(&g, params);
    eval(params)?;

    let mut work = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.get(id).len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let a = analytic.get(id).data();
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(SCALE_FLOOR);
        let max_abs_error = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        per_param.push(ParamCheck {
            name: params.name(id).to_string(),
            max_abs_error,
            max_rel_error: max_abs_error / scale,
        });
    }
    let max_rel_error = per_param
        .iter()
        .map(|p| p.max_rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{init_uniform, nn, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_matches() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps
            .register("w", Tensor::row_vector(vec![0.3, -1.2, 2.0]))
            .unwrap();
        let report = grad_check(
            |g, ps| {
                let x = g.param(ps, w);
                g.matmul_t(x, false, x, true)
            },
            &ps,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut ps = ParamSet::<f64>::new();
        ps.register("w", Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let report = grad_check(
            |g, _| Ok(g.constant(Tensor::filled(1, 1, 4.0))),
            &ps,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.per_param[0].max_abs_error <= 1e-8);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.register("w", Tensor::row_vector(vec![1e308])).unwrap();
        let res = grad_check(
            |g, ps| {
                let x = g.param(ps, w);
                Ok(g.scale(x, 10.0))
            },
            &ps,
            1e-4,
            1e-3,
        );
        assert!(res.is_err());
    }

    #[test]
    fn attention_block_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::<f64>::new();
        let mha = nn::MultiHeadAttention::new(&mut ps, "attn", 8, 2, &mut rng).unwrap();
        let ln = nn::LayerNorm::new(&mut ps, "ln", 8).unwrap();
        let ff = nn::FeedForward::new(&mut ps, "ff", 8, &mut rng).unwrap();
        let x = init_uniform::<f64>(5, 8, 1, &mut rng);
        let m = init_uniform::<f64>(3, 8, 1, &mut rng);
        let report = grad_check(
            |g, ps| {
                let xv = g.constant(x.clone());
                let mv = g.constant(m.clone());
                let h = ln.forward(g, ps, xv)?;
                let a = mha.forward(g, ps, h, mv, mv, None)?;
                let r = g.add(xv, a)?;
                let f = ff.forward(g, ps, r)?;
                let ones = g.constant(Tensor::filled(1, 5, 1.0));
                let s = g.matmul(ones, f)?;
                let w = g.constant(init_uniform(8, 1, 1, &mut ChaCha8Rng::seed_from_u64(9)));
                g.matmul(s, w)
            },
            &ps,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
