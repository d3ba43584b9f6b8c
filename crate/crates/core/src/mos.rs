//! Meta ordinal sets, per-class meta losses and the meta cross-entropy loss.

use rand::seq::index;
use rand::Rng;

use crate::autodiff::{Graph, ParamSet, ParamVars, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Backbone;

/// `K` dataset indices per class, aligned with one training sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaOrdinalSet {
    pub target_index: usize,
    /// `per_class[c]` holds exactly `K` indices whose label is `c`.
    pub per_class: Vec<Vec<usize>>,
}

impl MetaOrdinalSet {
    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn k(&self) -> usize {
        self.per_class.first().map_or(0, Vec::len)
    }

    /// Total size `M = C * K`.
    pub fn size(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    /// All member indices, class 0 first.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.iter().flatten().copied()
    }

    /// Checks size, per-class purity and target exclusion.
    pub fn validate(&self, dataset: &Dataset, k: usize) -> Result<()> {
        for (c, members) in self.per_class.iter().enumerate() {
            if members.len() != k {
                return Err(Error::contract(format!(
                    "MOS for sample {} has {} members in class {c}, expected {k}",
                    self.target_index,
                    members.len()
                )));
            }
            for &j in members {
                if j == self.target_index {
                    return Err(Error::contract(format!(
                        "MOS for sample {} contains its own target",
                        self.target_index
                    )));
                }
                let label = dataset.label(j)?;
                if label != c {
                    return Err(Error::contract(format!(
                        "MOS for sample {}: index {j} has label {label} but sits in class {c}",
                        self.target_index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draw `k` members per class uniformly without replacement, never picking
/// `target_index`.
pub fn sample_mos<R: Rng + ?Sized>(
    class_index: &[Vec<usize>],
    target_index: usize,
    k: usize,
    rng: &mut R,
) -> Result<MetaOrdinalSet> {
    sample_mos_excluding(class_index, target_index, &[target_index], k, rng)
}

/// As [`sample_mos`], additionally excluding every index in `exclude`.
pub fn sample_mos_excluding<R: Rng + ?Sized>(
    class_index: &[Vec<usize>],
    target_index: usize,
    exclude: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<MetaOrdinalSet> {
    if k == 0 {
        return Err(Error::contract("MOS size per class K must be at least 1"));
    }
    let mut per_class = Vec::with_capacity(class_index.len());
    for (class, members) in class_index.iter().enumerate() {
        let eligible: Vec<usize> = members
            .iter()
            .copied()
            .filter(|i| !exclude.contains(i))
            .collect();
        if eligible.len() < k {
            return Err(Error::Capacity {
                class,
                available: eligible.len(),
                required: k,
            });
        }
        per_class.push(
            index::sample(rng, eligible.len(), k)
                .into_iter()
                .map(|j| eligible[j])
                .collect(),
        );
    }
    Ok(MetaOrdinalSet {
        target_index,
        per_class,
    })
}

/// Per-row cross-entropy `[B, 1]` from `[B, C]` log-probabilities.
pub fn row_cross_entropy(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "row_cross_entropy",
            left: shape,
            right: vec![labels.len()],
        });
    }
    let c = shape[1];
    let mut onehot = vec![0.0; labels.len() * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::contract(format!("label {y} out of range for {c} classes")));
        }
        onehot[i * c + y] = 1.0;
    }
    let onehot = g.constant(Tensor::matrix(labels.len(), c, onehot)?);
    let picked = g.mul(log_probs, onehot)?;
    let mean = g.mean_axis(picked, 1)?;
    Ok(g.scale(mean, -(c as f64)))
}

/// Column `class` of a `[B, C]` node, as `[B, 1]`.
pub fn select_column(g: &mut Graph, m: Var, class: usize) -> Result<Var> {
    let c = g.shape(m)[1];
    let mut e = vec![0.0; c];
    e[class] = 1.0;
    let e = g.constant(Tensor::matrix(c, 1, e)?);
    g.matmul(m, e)
}

/// `[C, 1]` node of class-wise mean cross-entropy over the members of `mos`.
pub fn meta_class_losses_graph(
    g: &mut Graph,
    backbone: &dyn Backbone,
    theta: &ParamVars,
    dataset: &Dataset,
    mos: &MetaOrdinalSet,
) -> Result<Var> {
    let rows: Vec<usize> = mos.indices().collect();
    let labels = dataset.labels(&rows)?;
    let x = g.constant(Tensor::matrix(rows.len(), dataset.dim(), dataset.feature_block(&rows)?)?);
    let out = backbone.forward(g, theta, x)?;
    let ce = row_cross_entropy(g, out.log_probs, &labels)?;
    let c = mos.num_classes();
    let mut avg = vec![0.0; c * rows.len()];
    let mut col = 0;
    for (class, members) in mos.per_class.iter().enumerate() {
        for _ in members {
            avg[class * rows.len() + col] = 1.0 / members.len() as f64;
            col += 1;
        }
    }
    let avg = g.constant(Tensor::matrix(c, rows.len(), avg)?);
    g.matmul(avg, ce)
}

/// Class-wise mean CE over the meta set. Each entry averages exactly `K` terms.
#[derive(Clone, Debug, PartialEq)]
pub struct PerClassLossVector {
    pub values: Vec<f64>,
}

pub fn meta_class_losses(
    backbone: &dyn Backbone,
    theta: &ParamSet,
    mos: &MetaOrdinalSet,
    dataset: &Dataset,
) -> Result<PerClassLossVector> {
    let mut g = Graph::new();
    let vars = g.bind_constant(theta);
    let v = meta_class_losses_graph(&mut g, backbone, &vars, dataset, mos)?;
    Ok(PerClassLossVector {
        values: g.value(v).data().to_vec(),
    })
}

/// `-Σ_c ω_c log p̂_c` for one sample.
pub fn mce_loss(log_probs: &[f64], omega: &[f64]) -> Result<f64> {
    if log_probs.len() != omega.len() {
        return Err(Error::Shape {
            op: "mce_loss",
            left: vec![log_probs.len()],
            right: vec![omega.len()],
        });
    }
    if let Some(c) = log_probs.iter().position(|v| !v.is_finite() && *v != f64::NEG_INFINITY) {
        return Err(Error::NonFinite(format!("log-probability of class {c} is {}", log_probs[c])));
    }
    if let Some(c) = omega.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("weight of class {c} is {}", omega[c])));
    }
    let loss = -log_probs
        .iter()
        .zip(omega)
        .map(|(lp, w)| w * lp)
        .sum::<f64>();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "MCE is {loss} (log-probabilities {log_probs:?}, weights {omega:?})"
        )));
    }
    Ok(loss)
}

/// Per-row MCE `[B, 1]` from `[B, C]` log-probabilities and per-class `[B, 1]` weights.
pub fn mce_graph(g: &mut Graph, log_probs: Var, omega: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (c, &w) in omega.iter().enumerate() {
        let lp = select_column(g, log_probs, c)?;
        let term = g.mul(w, lp)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::contract("MCE needs at least one class"))?;
    Ok(g.scale(total, -1.0))
}
