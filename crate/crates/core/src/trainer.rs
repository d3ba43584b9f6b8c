//! Alternating bilevel training of Θ (backbone) and Φ (weight nets), plus a
//! plain cross-entropy baseline with the same loop shape.
//!
//! One meta iteration on a mini-batch:
//!
//! 1. ω_{i,c} = V_c(mean CE of the class-c members of sample i's meta set), at Θ.
//! 2. Virtual step Θ̂ = Θ − (α/N) Σ_i Σ_c ω_{i,c} ∇_Θ(−log p̂_{i,c}), with ω
//!    entering as coefficients so Θ̂ is a function of Φ.
//! 3. Φ ← Φ − β ∇_Φ meta(Θ̂(Φ)), meta = mean CE over the meta samples.
//! 4. Each training sample's own CE is fed to every V_c (with the new Φ) to
//!    weight its MCE; Θ steps on the batch-mean MCE.
//!
//! The hypergradient of step 3 is available two ways: by reverse-mode through
//! the recorded virtual step, or in the decomposed form
//! `−(α/N) Σ_{i,c} ⟨∇meta(Θ̂), ∇_Θ(−log p̂_{i,c})⟩ ∂ω_{i,c}/∂Φ`.

use rand::{RngCore, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, relative_error, sgd_step, sgd_step_recorded, AdamSettings, AdamState, GradMap, Graph, ParamSet,
    ParamVars, Tensor, Var,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{init_backbone, init_weightnets, Backbone, BackboneSpec, WeightNetSpec};
use crate::mos::{mce_graph, row_cross_entropy, sample_mos, sample_mos_excluding, MetaOrdinalSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mow,
    Ce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MosMode {
    /// A fresh meta set for every training sample.
    PerSample,
    /// One meta set shared by the whole mini-batch.
    BatchShared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HypergradMode {
    Through,
    Decomposed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterOptimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub k: usize,
    pub num_classes: usize,
    pub epochs: usize,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_period: usize,
    pub adam: AdamSettings,
    pub seed: u64,
    pub mos_mode: MosMode,
    pub hypergrad_mode: HypergradMode,
    pub outer_optimizer: OuterOptimizer,
    pub hidden_dims: Vec<usize>,
    pub weightnet_hidden: usize,
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Compute the hypergradient both ways every iteration and fail on disagreement.
    pub crosscheck: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Mow,
            alpha: 1e-4,
            beta: 1e-4,
            batch_size: 16,
            k: 5,
            num_classes: 3,
            epochs: 60,
            decay_factor: 0.1,
            decay_period: 80,
            adam: AdamSettings::default(),
            seed: 42,
            mos_mode: MosMode::PerSample,
            hypergrad_mode: HypergradMode::Through,
            outer_optimizer: OuterOptimizer::Sgd,
            hidden_dims: vec![32],
            weightnet_hidden: 100,
            test_fraction: 0.2,
            split_seed: 0,
            crosscheck: false,
        }
    }
}

pub const CROSSCHECK_TOLERANCE: f64 = 1e-8;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::contract(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail("beta must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if self.k == 0 {
            return fail("K must be at least 1");
        }
        if self.num_classes < 2 {
            return fail("at least 2 classes are required");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail("decay factor must lie in (0, 1]");
        }
        if self.decay_period == 0 {
            return fail("decay period must be at least 1 epoch");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail("test fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Multiplier applied to both α and β during `epoch` (0-based).
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        self.decay_factor.powi((epoch / self.decay_period) as i32)
    }

    pub fn backbone_spec(&self, input_dim: usize) -> BackboneSpec {
        BackboneSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn weightnet_spec(&self) -> WeightNetSpec {
        WeightNetSpec {
            hidden_dim: self.weightnet_hidden,
            num_classes: self.num_classes,
        }
    }
}

/// Per-iteration record of the meta training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub iteration: usize,
    /// 1-based epoch the iteration belongs to.
    pub epoch: usize,
    /// Batch mean of ω_c fed by the training samples' own CE (Θ step).
    pub omega_tr: Vec<f64>,
    /// Batch mean of ω_{i,c} fed by the meta-set class losses (virtual step).
    pub omega_meta: Vec<f64>,
    pub mce: f64,
    pub meta_loss: f64,
    pub hypergrad_norm: f64,
    /// `Σ_i ⟨∇meta(Θ̂), Σ_c ∇_Θ log p̂_{i,c}⟩`, logged as a diagnostic only.
    pub alignment: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CeStep {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Mini-batch indices with their aligned meta sets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub mos: Vec<MetaOrdinalSet>,
    /// All entries of `mos` hold the same members.
    pub shared: bool,
}

impl Batch {
    pub fn sample<R: RngCore>(
        indices: Vec<usize>,
        class_index: &[Vec<usize>],
        k: usize,
        mode: MosMode,
        rng: &mut R,
    ) -> Result<Batch> {
        let mos = match mode {
            MosMode::PerSample => indices
                .iter()
                .map(|&i| sample_mos(class_index, i, k, rng))
                .collect::<Result<Vec<_>>>()?,
            MosMode::BatchShared => {
                let first = indices
                    .first()
                    .copied()
                    .ok_or_else(|| Error::contract("empty batch"))?;
                let shared = sample_mos_excluding(class_index, first, &indices, k, rng)?;
                indices
                    .iter()
                    .map(|&i| MetaOrdinalSet {
                        target_index: i,
                        per_class: shared.per_class.clone(),
                    })
                    .collect()
            }
        };
        Ok(Batch {
            indices,
            mos,
            shared: mode == MosMode::BatchShared,
        })
    }
}

/// Quantities of the virtual step that depend on Θ but not on Φ.
#[derive(Clone, Debug)]
pub struct Prepared {
    n: usize,
    /// Per class, a `[N, 1]` column of mean meta CE at Θ (the V_c inputs).
    omega_inputs: Vec<Tensor>,
    /// Per class and parameter, `[numel, N]` with column i = ∇_Θ(−log p̂_{i,c}).
    jac_t: Vec<ParamSet>,
    meta_x: Tensor,
    meta_labels: Vec<usize>,
}

impl Prepared {
    pub fn omega_inputs(&self) -> Vec<Vec<f64>> {
        self.omega_inputs.iter().map(|t| t.data().to_vec()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct VirtualStep {
    pub theta_hat: ParamVars,
    /// Per class `[N, 1]` weight nodes.
    pub omega: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Hypergradient {
    pub grad: GradMap,
    pub meta_loss: f64,
    pub theta_hat: ParamSet,
    pub omega_meta: Vec<Vec<f64>>,
    pub alignment: f64,
}

#[derive(Clone, Debug)]
pub struct ThetaStep {
    pub theta: ParamSet,
    pub mce: f64,
    pub omega_tr: Vec<Vec<f64>>,
}

/// Moment state of the outer Θ optimizer.
#[derive(Clone, Debug)]
pub enum OuterState {
    Sgd,
    Adam(AdamState),
}

impl OuterState {
    pub fn new(kind: OuterOptimizer, theta: &ParamSet) -> Self {
        match kind {
            OuterOptimizer::Sgd => OuterState::Sgd,
            OuterOptimizer::Adam => OuterState::Adam(AdamState::new(theta)),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_finite(grads: &GradMap, what: &str) -> Result<()> {
    match grads.first_non_finite() {
        Some(name) => Err(Error::NonFinite(format!("{what}: gradient of {name} is not finite"))),
        None => Ok(()),
    }
}

/// Building blocks of one meta iteration, bound to a backbone, weight-net
/// architecture and dataset.
pub struct MetaLearner<'a> {
    pub backbone: &'a dyn Backbone,
    pub weight_nets: WeightNetSpec,
    pub dataset: &'a Dataset,
    /// Test hook: negate the decomposed hypergradient.
    pub inject_sign_flip: bool,
}

impl<'a> MetaLearner<'a> {
    pub fn new(backbone: &'a dyn Backbone, weight_nets: WeightNetSpec, dataset: &'a Dataset) -> Self {
        MetaLearner {
            backbone,
            weight_nets,
            dataset,
            inject_sign_flip: false,
        }
    }

    fn batch_x(&self, indices: &[usize]) -> Result<Tensor> {
        Tensor::matrix(indices.len(), self.dataset.dim(), self.dataset.feature_block(indices)?)
    }

    /// Meta-set class losses and per-sample log-probability gradients at Θ.
    pub fn prepare(&self, theta: &ParamSet, batch: &Batch) -> Result<Prepared> {
        let n = batch.indices.len();
        if n == 0 {
            return Err(Error::contract("empty batch"));
        }
        if batch.mos.len() != n {
            return Err(Error::contract("every batch sample needs a meta set"));
        }
        let c = self.backbone.num_classes();

        // distinct meta sets and which one each sample uses
        let (sets, set_of): (Vec<&MetaOrdinalSet>, Vec<usize>) = if batch.shared {
            (vec![&batch.mos[0]], vec![0; n])
        } else {
            (batch.mos.iter().collect(), (0..n).collect())
        };
        let mut meta_rows = Vec::new();
        let mut avg_cols = Vec::new();
        for (s, set) in sets.iter().enumerate() {
            if set.num_classes() != c {
                return Err(Error::contract("meta set class count differs from backbone"));
            }
            for (class, members) in set.per_class.iter().enumerate() {
                for &j in members {
                    meta_rows.push(j);
                    avg_cols.push((s, class, members.len()));
                }
            }
        }
        let meta_labels = self.dataset.labels(&meta_rows)?;
        let meta_x = self.batch_x(&meta_rows)?;

        let mut g = Graph::new();
        let theta_c = g.bind_constant(theta);
        let mx = g.constant(meta_x.clone());
        let out = self.backbone.forward(&mut g, &theta_c, mx)?;
        let ce = row_cross_entropy(&mut g, out.log_probs, &meta_labels)?;
        let mut class_loss = vec![vec![0.0; c]; sets.len()];
        for (row, &(s, class, k)) in avg_cols.iter().enumerate() {
            class_loss[s][class] += g.value(ce).data()[row] / k as f64;
        }
        let omega_inputs = (0..c)
            .map(|class| Tensor::matrix(n, 1, set_of.iter().map(|&s| class_loss[s][class]).collect()))
            .collect::<Result<Vec<_>>>()?;

        // per-sample, per-class gradients of −log p̂
        let mut g = Graph::new();
        let theta_v = g.bind(theta);
        let x = g.constant(self.batch_x(&batch.indices)?);
        let out = self.backbone.forward(&mut g, &theta_v, x)?;
        let mut columns: Vec<Vec<GradMap>> = vec![Vec::with_capacity(n); c];
        for i in 0..n {
            for (class, col) in columns.iter_mut().enumerate() {
                let mut seed = Tensor::zeros(&[n, c]);
                seed.data_mut()[i * c + class] = -1.0;
                let gm = g.backward_seeded(out.log_probs, seed, &theta_v)?;
                check_finite(&gm, "per-sample log-probability")?;
                col.push(gm);
            }
        }
        let jac_t = columns
            .iter()
            .map(|col| {
                theta
                    .iter()
                    .map(|(name, t)| {
                        let numel = t.numel();
                        let mut data = vec![0.0; numel * n];
                        for (i, gm) in col.iter().enumerate() {
                            for (e, v) in gm.get(name).expect("bound").data().iter().enumerate() {
                                data[e * n + i] = *v;
                            }
                        }
                        (name.to_string(), Tensor::from_parts(vec![numel, n], data))
                    })
                    .collect::<ParamSet>()
            })
            .collect();

        Ok(Prepared {
            n,
            omega_inputs,
            jac_t,
            meta_x,
            meta_labels,
        })
    }

    fn omega_nodes(&self, g: &mut Graph, prep: &Prepared, phi: &ParamVars) -> Result<Vec<Var>> {
        let inputs: Vec<Var> = prep.omega_inputs.iter().map(|t| g.constant(t.clone())).collect();
        self.weight_nets.forward_all(g, phi, &inputs)
    }

    /// Record Θ̂ = Θ − (α/N) Σ_{i,c} ω_{i,c} ∇_Θ(−log p̂_{i,c}) in `g`, as a
    /// function of the bound weight-net parameters `phi`.
    pub fn virtual_step(
        &self,
        g: &mut Graph,
        prep: &Prepared,
        theta: &ParamSet,
        phi: &ParamVars,
        alpha: f64,
    ) -> Result<VirtualStep> {
        let omega = self.omega_nodes(g, prep, phi)?;
        let mut grads = ParamVars::default();
        for (name, t) in theta.iter() {
            let mut acc: Option<Var> = None;
            for (class, &w) in omega.iter().enumerate() {
                let h = g.constant(prep.jac_t[class].get(name).expect("same keys").clone());
                let term = g.matmul(h, w)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            let summed = g.reshape(acc.expect("at least one class"), t.shape())?;
            grads.insert(name, g.scale(summed, 1.0 / prep.n as f64));
        }
        let base = g.bind_constant(theta);
        let theta_hat = sgd_step_recorded(g, &base, &grads, alpha)?;
        Ok(VirtualStep { theta_hat, omega })
    }

    /// Mean CE over all meta rows at the given (bound) parameters.
    pub fn meta_objective(&self, g: &mut Graph, prep: &Prepared, theta: &ParamVars) -> Result<Var> {
        let x = g.constant(prep.meta_x.clone());
        let out = self.backbone.forward(g, theta, x)?;
        let ce = row_cross_entropy(g, out.log_probs, &prep.meta_labels)?;
        Ok(g.mean(ce))
    }

    /// `⟨u, ∇_Θ(−log p̂_{i,c})⟩` for every class and sample.
    fn jacobian_dots(&self, prep: &Prepared, u: &GradMap) -> Vec<Vec<f64>> {
        prep.jac_t
            .iter()
            .map(|jt| {
                let mut dots = vec![0.0; prep.n];
                for (name, h) in jt.iter() {
                    let uv = u.get(name).expect("same keys").data();
                    for (e, &ue) in uv.iter().enumerate() {
                        let row = &h.data()[e * prep.n..(e + 1) * prep.n];
                        for (d, hv) in dots.iter_mut().zip(row) {
                            *d += ue * hv;
                        }
                    }
                }
                dots
            })
            .collect()
    }

    fn alignment(dots: &[Vec<f64>]) -> f64 {
        -dots.iter().flatten().sum::<f64>()
    }

    /// Hypergradient by reverse mode through the recorded virtual step.
    pub fn hypergradient_through(
        &self,
        prep: &Prepared,
        theta: &ParamSet,
        phi: &ParamSet,
        alpha: f64,
    ) -> Result<Hypergradient> {
        let mut g = Graph::new();
        let phi_v = g.bind(phi);
        let vs = self.virtual_step(&mut g, prep, theta, &phi_v, alpha)?;
        let loss = self.meta_objective(&mut g, prep, &vs.theta_hat)?;
        let meta_loss = g.forward_eval(loss)?;
        let grad = g.backward(loss, &phi_v)?;
        let u = g.backward(loss, &vs.theta_hat)?;
        let dots = self.jacobian_dots(prep, &u);
        Ok(Hypergradient {
            grad,
            meta_loss,
            theta_hat: g.values_of(&vs.theta_hat),
            omega_meta: vs.omega.iter().map(|&w| g.value(w).data().to_vec()).collect(),
            alignment: Self::alignment(&dots),
        })
    }

    /// Hypergradient in product form: inner products of the meta gradient at Θ̂
    /// with per-sample log-probability gradients at Θ, times ∂ω/∂Φ.
    pub fn hypergradient_decomposed(
        &self,
        prep: &Prepared,
        theta: &ParamSet,
        phi: &ParamSet,
        alpha: f64,
    ) -> Result<Hypergradient> {
        let n = prep.n as f64;
        let mut g = Graph::new();
        let phi_v = g.bind(phi);
        let omega = self.omega_nodes(&mut g, prep, &phi_v)?;
        let omega_vals: Vec<Vec<f64>> = omega.iter().map(|&w| g.value(w).data().to_vec()).collect();

        let mut theta_hat = theta.clone();
        for (name, t) in theta_hat.iter_mut() {
            for (class, w) in omega_vals.iter().enumerate() {
                let h = prep.jac_t[class].get(name).expect("same keys").data();
                for (e, v) in t.data_mut().iter_mut().enumerate() {
                    let row = &h[e * prep.n..(e + 1) * prep.n];
                    let s: f64 = row.iter().zip(w).map(|(hv, wv)| hv * wv).sum();
                    *v -= alpha / n * s;
                }
            }
        }

        let mut gm = Graph::new();
        let th = gm.bind(&theta_hat);
        let loss = self.meta_objective(&mut gm, prep, &th)?;
        let meta_loss = gm.forward_eval(loss)?;
        let u = gm.backward(loss, &th)?;
        let dots = self.jacobian_dots(prep, &u);

        let sign = if self.inject_sign_flip { -1.0 } else { 1.0 };
        let mut total: Option<Var> = None;
        for (class, &w) in omega.iter().enumerate() {
            let coeff: Vec<f64> = dots[class].iter().map(|d| sign * -alpha / n * d).collect();
            let a = g.constant(Tensor::matrix(1, prep.n, coeff)?);
            let term = g.matmul(a, w)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        let total = total.expect("at least one class");
        let grad = g.backward(total, &phi_v)?;
        Ok(Hypergradient {
            grad,
            meta_loss,
            theta_hat,
            omega_meta: omega_vals,
            alignment: Self::alignment(&dots),
        })
    }

    pub fn hypergradient(
        &self,
        prep: &Prepared,
        theta: &ParamSet,
        phi: &ParamSet,
        alpha: f64,
        mode: HypergradMode,
    ) -> Result<Hypergradient> {
        match mode {
            HypergradMode::Through => self.hypergradient_through(prep, theta, phi, alpha),
            HypergradMode::Decomposed => self.hypergradient_decomposed(prep, theta, phi, alpha),
        }
    }

    /// Φ^{t+1} = Φ − β · hypergradient. With `crosscheck`, both hypergradient
    /// routes are evaluated and must agree to [`CROSSCHECK_TOLERANCE`].
    #[allow(clippy::too_many_arguments)]
    pub fn phi_update(
        &self,
        prep: &Prepared,
        theta: &ParamSet,
        phi: &ParamSet,
        alpha: f64,
        beta: f64,
        mode: HypergradMode,
        crosscheck: bool,
    ) -> Result<(ParamSet, Hypergradient)> {
        let hyper = self.hypergradient(prep, theta, phi, alpha, mode)?;
        if crosscheck {
            let other_mode = match mode {
                HypergradMode::Through => HypergradMode::Decomposed,
                HypergradMode::Decomposed => HypergradMode::Through,
            };
            let other = self.hypergradient(prep, theta, phi, alpha, other_mode)?;
            let rel = relative_error(&hyper.grad.flatten(), &other.grad.flatten());
            if rel.is_nan() || rel > CROSSCHECK_TOLERANCE {
                return Err(Error::CrossCheck {
                    rel_error: rel,
                    tolerance: CROSSCHECK_TOLERANCE,
                });
            }
        }
        check_finite(&hyper.grad, "hypergradient")?;
        let next = sgd_step(phi, &hyper.grad, beta)?;
        Ok((next, hyper))
    }

    /// Batch-mean MCE at Θ with weights V_c(own CE), and its Θ-gradient.
    pub fn mce_objective(&self, theta: &ParamSet, phi: &ParamSet, indices: &[usize]) -> Result<(f64, GradMap, Vec<Vec<f64>>)> {
        let labels = self.dataset.labels(indices)?;
        let mut g = Graph::new();
        let theta_v = g.bind(theta);
        let phi_c = g.bind_constant(phi);
        let x = g.constant(self.batch_x(indices)?);
        let out = self.backbone.forward(&mut g, &theta_v, x)?;
        let own_ce = row_cross_entropy(&mut g, out.log_probs, &labels)?;
        let inputs = vec![own_ce; self.backbone.num_classes()];
        let omega = self.weight_nets.forward_all(&mut g, &phi_c, &inputs)?;
        let rows = mce_graph(&mut g, out.log_probs, &omega)?;
        let loss = g.mean(rows);
        let value = g.forward_eval(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("MCE is {value}")));
        }
        let grads = g.backward(loss, &theta_v)?;
        check_finite(&grads, "MCE")?;
        let omega_vals = omega.iter().map(|&w| g.value(w).data().to_vec()).collect();
        Ok((value, grads, omega_vals))
    }

    /// Θ step on the batch MCE using the freshly updated weight nets.
    pub fn theta_update(
        &self,
        theta: &ParamSet,
        phi_next: &ParamSet,
        indices: &[usize],
        alpha: f64,
        optimizer: &mut OuterState,
        adam: &AdamSettings,
    ) -> Result<ThetaStep> {
        let (mce, grads, omega_tr) = self.mce_objective(theta, phi_next, indices)?;
        let theta = match optimizer {
            OuterState::Sgd => sgd_step(theta, &grads, alpha)?,
            OuterState::Adam(state) => adam_step(theta, &grads, state, alpha, adam)?,
        };
        Ok(ThetaStep { theta, mce, omega_tr })
    }
}

/// Parameters and optimizer state carried across iterations.
#[derive(Clone, Debug)]
pub struct MetaState {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub optimizer: OuterState,
    pub iteration: usize,
}

/// One full meta iteration (virtual step, Φ update, Θ update).
pub fn meta_iteration(
    learner: &MetaLearner<'_>,
    state: &mut MetaState,
    batch: &Batch,
    cfg: &TrainConfig,
    epoch: usize,
    alpha: f64,
    beta: f64,
) -> Result<StepTrace> {
    let prep = learner.prepare(&state.theta, batch)?;
    let (phi_next, hyper) = learner.phi_update(
        &prep,
        &state.theta,
        &state.phi,
        alpha,
        beta,
        cfg.hypergrad_mode,
        cfg.crosscheck,
    )?;
    let step = learner.theta_update(
        &state.theta,
        &phi_next,
        &batch.indices,
        alpha,
        &mut state.optimizer,
        &cfg.adam,
    )?;
    log::debug!(
        "iter {} meta {:.6} mce {:.6} alignment {:.3e}",
        state.iteration,
        hyper.meta_loss,
        step.mce,
        hyper.alignment
    );
    let trace = StepTrace {
        iteration: state.iteration,
        epoch,
        omega_tr: step.omega_tr.iter().map(|w| mean(w)).collect(),
        omega_meta: hyper.omega_meta.iter().map(|w| mean(w)).collect(),
        mce: step.mce,
        meta_loss: hyper.meta_loss,
        hypergrad_norm: hyper.grad.norm(),
        alignment: hyper.alignment,
    };
    state.theta = step.theta;
    state.phi = phi_next;
    state.iteration += 1;
    Ok(trace)
}

/// Parameters at the end of an epoch (epoch 0 is the initialization).
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub theta: &'a ParamSet,
    pub phi: Option<&'a ParamSet>,
}

pub struct MowOutcome {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub trace: Vec<StepTrace>,
}

pub struct CeOutcome {
    pub theta: ParamSet,
    pub trace: Vec<CeStep>,
}

/// Seeds for Θ init, Φ init, batch order and meta-set sampling.
#[derive(Clone, Copy, Debug)]
pub struct RunSeeds {
    pub theta: u64,
    pub phi: u64,
    pub shuffle: u64,
    pub mos: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        RunSeeds {
            theta: master.next_u64(),
            phi: master.next_u64(),
            shuffle: master.next_u64(),
            mos: master.next_u64(),
        }
    }
}

/// Fails unless every class of `train_idx` can supply K meta samples
/// besides any one target.
pub fn check_capacity(dataset: &Dataset, train_idx: &[usize], num_classes: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    let class_index = dataset.class_index(train_idx, num_classes)?;
    for (class, members) in class_index.iter().enumerate() {
        if members.len() < k + 1 {
            return Err(Error::Capacity {
                class,
                available: members.len().saturating_sub(1),
                required: k,
            });
        }
    }
    Ok(class_index)
}

fn epoch_batches(train_idx: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = train_idx.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Run the meta training loop from explicit initial parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_mow_from(
    cfg: &TrainConfig,
    learner: &MetaLearner<'_>,
    train_idx: &[usize],
    theta0: ParamSet,
    phi0: ParamSet,
    seeds: RunSeeds,
    on_epoch: &mut dyn FnMut(&EpochEnd<'_>) -> Result<()>,
) -> Result<MowOutcome> {
    cfg.validate()?;
    let class_index = check_capacity(learner.dataset, train_idx, cfg.num_classes, cfg.k)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let mut mos_rng = ChaCha8Rng::seed_from_u64(seeds.mos);
    let mut state = MetaState {
        optimizer: OuterState::new(cfg.outer_optimizer, &theta0),
        theta: theta0,
        phi: phi0,
        iteration: 0,
    };
    on_epoch(&EpochEnd {
        epoch: 0,
        theta: &state.theta,
        phi: Some(&state.phi),
    })?;
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        let scale = cfg.lr_scale(epoch);
        let (alpha, beta) = (cfg.alpha * scale, cfg.beta * scale);
        for indices in epoch_batches(train_idx, cfg.batch_size, &mut shuffle_rng) {
            let it = state.iteration;
            let ctx = || format!("epoch {}, iteration {it}", epoch + 1);
            let batch = Batch::sample(indices, &class_index, cfg.k, cfg.mos_mode, &mut mos_rng)
                .map_err(|e| e.with_context(&ctx()))?;
            for mos in &batch.mos {
                mos.validate(learner.dataset, cfg.k)
                    .map_err(|e| e.with_context(&ctx()))?;
            }
            let step = meta_iteration(learner, &mut state, &batch, cfg, epoch + 1, alpha, beta)
                .map_err(|e| e.with_context(&ctx()))?;
            trace.push(step);
        }
        on_epoch(&EpochEnd {
            epoch: epoch + 1,
            theta: &state.theta,
            phi: Some(&state.phi),
        })?;
        if let Some(last) = trace.last() {
            log::info!(
                "epoch {} mce {:.5} meta {:.5} omega_tr {:?}",
                epoch + 1,
                last.mce,
                last.meta_loss,
                last.omega_tr
            );
        }
    }
    Ok(MowOutcome {
        theta: state.theta,
        phi: state.phi,
        trace,
    })
}

/// Meta training with the dense backbone described by `cfg`.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    train_idx: &[usize],
    on_epoch: &mut dyn FnMut(&EpochEnd<'_>) -> Result<()>,
) -> Result<MowOutcome> {
    cfg.validate()?;
    let seeds = RunSeeds::derive(cfg.seed);
    let spec = cfg.backbone_spec(dataset.dim());
    let wn = cfg.weightnet_spec();
    let theta0 = init_backbone(&spec, seeds.theta)?;
    let phi0 = init_weightnets(&wn, seeds.phi)?;
    let learner = MetaLearner::new(&spec, wn, dataset);
    train_mow_from(cfg, &learner, train_idx, theta0, phi0, seeds, on_epoch)
}

/// Batch-mean cross-entropy and its Θ-gradient.
pub fn batch_ce(backbone: &dyn Backbone, theta: &ParamSet, dataset: &Dataset, indices: &[usize]) -> Result<(f64, GradMap)> {
    let labels = dataset.labels(indices)?;
    let mut g = Graph::new();
    let theta_v = g.bind(theta);
    let x = g.constant(Tensor::matrix(indices.len(), dataset.dim(), dataset.feature_block(indices)?)?);
    let out = backbone.forward(&mut g, &theta_v, x)?;
    let ce = row_cross_entropy(&mut g, out.log_probs, &labels)?;
    let loss = g.mean(ce);
    let value = g.forward_eval(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("CE is {value}")));
    }
    let grads = g.backward(loss, &theta_v)?;
    check_finite(&grads, "CE")?;
    Ok((value, grads))
}

/// Cross-entropy baseline: same backbone, initialization, batch order,
/// optimizer and schedule as [`train`], without weight nets or meta sets.
pub fn train_ce_baseline(
    cfg: &TrainConfig,
    dataset: &Dataset,
    train_idx: &[usize],
    on_epoch: &mut dyn FnMut(&EpochEnd<'_>) -> Result<()>,
) -> Result<CeOutcome> {
    cfg.validate()?;
    let seeds = RunSeeds::derive(cfg.seed);
    let spec = cfg.backbone_spec(dataset.dim());
    let mut theta = init_backbone(&spec, seeds.theta)?;
    let mut optimizer = OuterState::new(cfg.outer_optimizer, &theta);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    on_epoch(&EpochEnd {
        epoch: 0,
        theta: &theta,
        phi: None,
    })?;
    let mut trace = Vec::new();
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let alpha = cfg.alpha * cfg.lr_scale(epoch);
        for indices in epoch_batches(train_idx, cfg.batch_size, &mut shuffle_rng) {
            let (loss, grads) = batch_ce(&spec, &theta, dataset, &indices)
                .map_err(|e| e.with_context(&format!("epoch {}, iteration {iteration}", epoch + 1)))?;
            theta = match &mut optimizer {
                OuterState::Sgd => sgd_step(&theta, &grads, alpha)?,
                OuterState::Adam(state) => adam_step(&theta, &grads, state, alpha, &cfg.adam)?,
            };
            trace.push(CeStep {
                iteration,
                epoch: epoch + 1,
                loss,
            });
            iteration += 1;
        }
        on_epoch(&EpochEnd {
            epoch: epoch + 1,
            theta: &theta,
            phi: None,
        })?;
    }
    Ok(CeOutcome { theta, trace })
}
