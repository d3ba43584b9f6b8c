use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::params::{GradMap, ParamSet, ParamVars};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Plain gradient descent: returns `p - lr * g` for every entry.
pub fn sgd_step(params: &ParamSet, grads: &GradMap, lr: f64) -> Result<ParamSet> {
    params.check_same_keys(grads.names(), "gradient")?;
    params
        .iter()
        .map(|(name, p)| {
            let g = grads.get(name).expect("keys checked");
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let data = p
                .data()
                .iter()
                .zip(g.data())
                .map(|(pv, gv)| pv - lr * gv)
                .collect();
            Ok((name.to_string(), Tensor::from_parts(p.shape().to_vec(), data)))
        })
        .collect()
}

/// Gradient descent step recorded in `graph`, so the result stays
/// differentiable with respect to whatever the gradient nodes depend on.
pub fn sgd_step_recorded(
    graph: &mut Graph,
    params: &ParamVars,
    grads: &ParamVars,
    lr: f64,
) -> Result<ParamVars> {
    let ours: Vec<&str> = params.names().collect();
    let theirs: Vec<&str> = grads.names().collect();
    if ours != theirs {
        return Err(Error::contract(format!(
            "gradient keys {theirs:?} do not match parameter keys {ours:?}"
        )));
    }
    let mut out = ParamVars::default();
    for (name, p) in params.iter() {
        let g = grads.get(name)?;
        if graph.shape(p) != graph.shape(g) {
            return Err(Error::Shape {
                op: "sgd_step",
                left: graph.shape(p).to_vec(),
                right: graph.shape(g).to_vec(),
            });
        }
        let step = graph.scale(g, -lr);
        let next = graph.add(p, step)?;
        out.insert(name, next);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |_: &str, t: &Tensor| vec![0.0; t.numel()];
        AdamState {
            step: 0,
            m: params.iter().map(|(n, t)| (n.to_string(), zeros(n, t))).collect(),
            v: params.iter().map(|(n, t)| (n.to_string(), zeros(n, t))).collect(),
        }
    }
}

/// Adam with decoupled weight decay. `state` is advanced in place.
pub fn adam_step(
    params: &ParamSet,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
    settings: &AdamSettings,
) -> Result<ParamSet> {
    params.check_same_keys(grads.names(), "gradient")?;
    if !params.names().eq(state.m.keys().map(String::as_str)) {
        return Err(Error::contract("Adam state does not match parameter keys"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - settings.beta1.powi(t);
    let bc2 = 1.0 - settings.beta2.powi(t);
    let mut out = ParamSet::new();
    for (name, p) in params.iter() {
        let g = grads.get(name).expect("keys checked");
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let m = state.m.get_mut(name).expect("keys checked");
        let v = state.v.get_mut(name).expect("keys checked");
        let mut data = Vec::with_capacity(p.numel());
        for i in 0..p.numel() {
            let gi = g.data()[i];
            m[i] = settings.beta1 * m[i] + (1.0 - settings.beta1) * gi;
            v[i] = settings.beta2 * v[i] + (1.0 - settings.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let decayed = p.data()[i] * (1.0 - lr * settings.weight_decay);
            data.push(decayed - lr * m_hat / (v_hat.sqrt() + settings.eps));
        }
        out.insert(name, Tensor::from_parts(p.shape().to_vec(), data))?;
    }
    Ok(out)
}
