//! Randomized numerical self-checks: reverse-mode gradients against central
//! differences, and the two hypergradient routes against each other and
//! against differences of the meta objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, relative_error, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::data::{Dataset, OrdinalSample};
use crate::error::Result;
use crate::model::{init_backbone, init_weightnets, BackboneSpec, WeightNetSpec};
use crate::mos::{sample_mos, MetaOrdinalSet};
use crate::trainer::{Batch, MetaLearner, Prepared};

pub const FD_STEP: f64 = 1e-5;
pub const AUTODIFF_TOLERANCE: f64 = 1e-6;
pub const MODE_TOLERANCE: f64 = 1e-8;
pub const FD_HYPER_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub suite: &'static str,
    pub case: usize,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive shape")
}

/// Values bounded away from the ReLU kink so differences never straddle it.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// A scalar graph that exercises every primitive once.
fn composite(g: &mut Graph, p: &ParamVars, b: usize, m: usize) -> Result<Var> {
    let z = g.matmul(p.get("x")?, p.get("w")?)?;
    let z = g.add(z, p.get("bias")?)?;
    let z = g.mul(z, p.get("s")?)?;
    let r = g.relu(p.get("r")?);
    let r = g.scale(r, 0.7);
    let z = g.sub(z, r)?;
    let sig = g.sigmoid(z);
    let lp = g.log_softmax(z);
    let t = g.add(lp, sig)?;
    let flat = g.reshape(t, &[m, b])?;
    let cols = g.mean_axis(flat, 0)?;
    let sq = g.mul(cols, cols)?;
    let a = g.mean(sq);
    let rows = g.mean_axis(t, 1)?;
    let bmean = g.mean(rows);
    g.add(a, bmean)
}

/// `trials` random composite graphs checked against central differences.
pub fn autodiff_suite(trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for case in 0..trials {
        let b = rng.random_range(1..=4);
        let n = rng.random_range(1..=4);
        let m = rng.random_range(2..=4);
        let mut p = ParamSet::new();
        p.insert("x", uniform(&mut rng, &[b, n]))?;
        p.insert("w", uniform(&mut rng, &[n, m]))?;
        p.insert("bias", uniform(&mut rng, &[m]))?;
        p.insert("s", uniform(&mut rng, &[1, m]))?;
        p.insert("r", off_kink(&mut rng, &[b, m]))?;
        let report = grad_check(|g, v| composite(g, v, b, m), &p, FD_STEP, AUTODIFF_TOLERANCE)?;
        out.push(CaseResult {
            suite: "autodiff",
            case,
            rel_error: report.max_rel_error(),
            tolerance: AUTODIFF_TOLERANCE,
        });
    }
    Ok(out)
}

/// A random bilevel problem: backbone of at most 50 parameters, C = 3, K = 1.
pub struct BilevelInstance {
    pub spec: BackboneSpec,
    pub weight_nets: WeightNetSpec,
    pub dataset: Dataset,
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub batch: Batch,
    pub alpha: f64,
}

impl BilevelInstance {
    pub fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let dim = rng.random_range(2..=4);
        let spec = BackboneSpec {
            input_dim: dim,
            hidden_dims: vec![rng.random_range(2..=4)],
            num_classes: 3,
        };
        let weight_nets = WeightNetSpec {
            hidden_dim: rng.random_range(1..=3),
            num_classes: 3,
        };
        let mut dataset = Dataset::new(dim);
        for score in [1.5, 3.0, 4.5] {
            for _ in 0..3 {
                let x = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
                dataset.push(OrdinalSample::new(x, score)?)?;
            }
        }
        let theta = init_backbone(&spec, rng.random())?;
        let phi = init_weightnets(&weight_nets, rng.random())?;
        let n = rng.random_range(1..=4);
        let class_index = dataset.class_index(&dataset.all_indices(), 3)?;
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..dataset.len())).collect();
        let mos = indices
            .iter()
            .map(|&i| sample_mos(&class_index, i, 1, rng))
            .collect::<Result<Vec<MetaOrdinalSet>>>()?;
        Ok(BilevelInstance {
            spec,
            weight_nets,
            dataset,
            theta,
            phi,
            batch: Batch {
                indices,
                mos,
                shared: false,
            },
            alpha: rng.random_range(0.2..1.0),
        })
    }
}

fn fd_hypergradient(learner: &MetaLearner<'_>, prep: &Prepared, inst: &BilevelInstance) -> Result<Vec<f64>> {
    let flat = inst.phi.flatten();
    let mut out = Vec::with_capacity(flat.len());
    for k in 0..flat.len() {
        let at = |d: f64| -> Result<f64> {
            let mut p = flat.clone();
            p[k] += d;
            let phi = inst.phi.unflatten(&p)?;
            Ok(learner.hypergradient_through(prep, &inst.theta, &phi, inst.alpha)?.meta_loss)
        };
        out.push((at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// For each random instance: through vs decomposed, and each vs differences.
pub fn hypergradient_suite(trials: usize, seed: u64, inject_sign_flip: bool) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * trials);
    for case in 0..trials {
        let inst = BilevelInstance::random(&mut rng)?;
        let mut learner = MetaLearner::new(&inst.spec, inst.weight_nets, &inst.dataset);
        learner.inject_sign_flip = inject_sign_flip;
        let prep = learner.prepare(&inst.theta, &inst.batch)?;
        let through = learner.hypergradient_through(&prep, &inst.theta, &inst.phi, inst.alpha)?;
        let decomposed = learner.hypergradient_decomposed(&prep, &inst.theta, &inst.phi, inst.alpha)?;
        let fd = fd_hypergradient(&learner, &prep, &inst)?;
        let (t, d) = (through.grad.flatten(), decomposed.grad.flatten());
        out.push(CaseResult {
            suite: "through-vs-decomposed",
            case,
            rel_error: relative_error(&t, &d),
            tolerance: MODE_TOLERANCE,
        });
        out.push(CaseResult {
            suite: "through-vs-fd",
            case,
            rel_error: relative_error(&t, &fd),
            tolerance: FD_HYPER_TOLERANCE,
        });
        out.push(CaseResult {
            suite: "decomposed-vs-fd",
            case,
            rel_error: relative_error(&d, &fd),
            tolerance: FD_HYPER_TOLERANCE,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_a_few_cases() {
        assert!(autodiff_suite(20, 1).unwrap().iter().all(CaseResult::passed));
        let h = hypergradient_suite(5, 2, false).unwrap();
        assert_eq!(h.len(), 15);
        assert!(h.iter().all(CaseResult::passed), "{h:?}");
    }

    #[test]
    fn instances_respect_size_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let inst = BilevelInstance::random(&mut rng).unwrap();
            assert!(inst.theta.num_scalars() <= 50);
            assert!((1..=4).contains(&inst.batch.indices.len()));
            for m in &inst.batch.mos {
                m.validate(&inst.dataset, 1).unwrap();
            }
        }
    }

    #[test]
    fn sign_flip_breaks_the_decomposed_checks() {
        let h = hypergradient_suite(3, 2, true).unwrap();
        assert!(h.iter().filter(|c| c.suite != "through-vs-fd").all(|c| !c.passed()));
        assert!(h.iter().filter(|c| c.suite == "through-vs-fd").all(CaseResult::passed));
    }
}
