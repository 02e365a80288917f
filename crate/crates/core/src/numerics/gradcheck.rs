//! Finite-difference verification of analytic gradients.
//!
//! Runs in `f64`: central differences in `f32` would drown real gradient
//! bugs in rounding noise.

use super::{bind_params, harvest_grads, BoundParams, Graph, NodeId, NumericsError, ParamSet, Result};

/// A deterministic scalar-valued function of a parameter set that can also
/// report its analytic gradients.
pub trait DifferentiableFn {
    fn loss(&self, params: &ParamSet<f64>) -> Result<f64>;
    /// Loss plus gradients harvested into a clone of `params`.
    fn loss_and_grads(&self, params: &ParamSet<f64>) -> Result<(f64, ParamSet<f64>)>;
}

/// Adapter turning a graph-builder closure into a [`DifferentiableFn`].
pub struct GraphFn<B> {
    pub build: B,
}

impl<B> DifferentiableFn for GraphFn<B>
where
    B: Fn(&mut Graph<f64>, &BoundParams) -> Result<NodeId>,
{
    fn loss(&self, params: &ParamSet<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params);
        let root = (self.build)(&mut g, &bound)?;
        Ok(g.scalar_value(root))
    }

    fn loss_and_grads(&self, params: &ParamSet<f64>) -> Result<(f64, ParamSet<f64>)> {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params);
        let root = (self.build)(&mut g, &bound)?;
        g.backward(root)?;
        let mut with_grads = params.clone();
        harvest_grads(&g, &bound, &mut with_grads)?;
        Ok((g.scalar_value(root), with_grads))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat coordinate index of the worst element.
    pub worst_coord: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compare analytic gradients against central finite differences,
/// coordinate by coordinate, over every trainable parameter.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8); the
/// floor keeps near-zero gradients from blowing up the ratio.
pub fn grad_check(
    f: &dyn DifferentiableFn,
    params: &ParamSet<f64>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let first = f.loss(params)?;
    let second = f.loss(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministic { first, second });
    }

    let (_, analytic) = f.loss_and_grads(params)?;

    let mut per_param = Vec::new();
    let mut max_rel = 0.0_f64;
    let mut work = params.clone();
    let names: Vec<String> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let n = params.get(&name)?.tensor.numel();
        let grads = analytic
            .get(&name)?
            .tensor
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut entry = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_coord: 0,
        };
        for i in 0..n {
            let orig = work.get(&name)?.tensor.data()[i];
            work.get_mut(&name)?.tensor.data_mut()[i] = orig + eps;
            let plus = f.loss(&work)?;
            work.get_mut(&name)?.tensor.data_mut()[i] = orig - eps;
            let minus = f.loss(&work)?;
            work.get_mut(&name)?.tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_coord = i;
            }
        }
        max_rel = max_rel.max(entry.max_rel_err);
        per_param.push(entry);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Parameter, Tensor};

    fn single(name: &str, vals: Vec<f64>) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        let n = vals.len();
        set.push(Parameter::new(name, Tensor::from_vec(&[n], vals).unwrap()))
            .unwrap();
        set
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let params = single("x", vec![3.0]);
        let f = GraphFn {
            build: |g: &mut Graph<f64>, b: &BoundParams| {
                let x = b.id("x")?;
                let sq = g.square(x)?;
                g.sum(sq)
            },
        };
        let report = grad_check(&f, &params, 1e-3, 1e-6).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
        let (_, grads) = f.loss_and_grads(&params).unwrap();
        let a = grads.get("x").unwrap().tensor.grad().unwrap()[0];
        assert!((a - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = single("x", vec![1.5, -2.0]);
        let f = GraphFn {
            build: |g: &mut Graph<f64>, _b: &BoundParams| {
                let c = g.scalar_const(4.0);
                g.sum(c)
            },
        };
        let report = grad_check(&f, &params, 1e-4, 1e-6).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }
}
