//! Central-difference validation of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{ParamSet, ParamVars};
use crate::error::{Error, Result};

/// `max|a - b| / max(max|a|, max|b|)`, or 0 when both are identically zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on different lengths");
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| !p.flagged)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

/// Compare `backward` against central differences for every entry of `wrt`.
///
/// `builder` must rebuild the same scalar graph from the bound parameters on
/// every call. Relative error is measured per parameter tensor with
/// [`relative_error`].
pub fn grad_check<F>(builder: F, wrt: &ParamSet, fd_step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let vars = g.bind(params);
        let root = builder(&mut g, &vars)?;
        g.forward_eval(root)
    };

    let mut g = Graph::new();
    let vars = g.bind(wrt);
    let root = builder(&mut g, &vars)?;
    let base = g.forward_eval(root)?;
    let analytic = g.backward(root, &vars)?;
    let again = eval(wrt)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::contract(format!(
            "graph builder is not deterministic: {base:e} then {again:e}"
        )));
    }

    let mut params = Vec::with_capacity(wrt.len());
    for (name, tensor) in wrt.iter() {
        let mut numeric = vec![0.0; tensor.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = wrt.clone();
            plus.get_mut(name).expect("own key").data_mut()[i] += fd_step;
            let mut minus = wrt.clone();
            minus.get_mut(name).expect("own key").data_mut()[i] -= fd_step;
            *slot = (eval(&plus)? - eval(&minus)?) / (2.0 * fd_step);
        }
        let err = relative_error(analytic.get(name).expect("own key").data(), &numeric);
        params.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: err,
            flagged: err.is_nan() || err > tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, params })
}
