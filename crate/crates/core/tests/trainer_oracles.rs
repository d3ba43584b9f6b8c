mod common;

use common::scalar::{self, Sample};
use common::{affine_phi, meta_objective_by_hand, two_class};
use mownet::autodiff::AdamSettings;
use mownet::model::{LogitBackbone, WeightNetSpec};
use mownet::mos::MetaOrdinalSet;
use mownet::trainer::{meta_iteration, Batch, HypergradMode, MetaLearner, MetaState, OuterState, TrainConfig};

const XS0: [f64; 4] = [-1.2, -0.4, 0.3, -2.0];
const XS1: [f64; 4] = [0.9, 1.7, -0.5, 0.6];

fn sample(ds: &mownet::data::Dataset, i: usize) -> Sample {
    Sample {
        x: ds.get(i).unwrap().features[0],
        y: ds.label(i).unwrap(),
    }
}

#[test]
fn scalar_trace_matches_closed_form_over_several_iterations() {
    let ds = two_class(&XS0, &XS1);
    let bb = LogitBackbone {
        input_dim: 1,
        bias: false,
    };
    let wn = WeightNetSpec {
        hidden_dim: 0,
        num_classes: 2,
    };
    let learner = MetaLearner::new(&bb, wn, &ds);
    let cfg = TrainConfig {
        num_classes: 2,
        ..TrainConfig::default()
    };
    let (alpha, beta) = (0.8, 2.5);
    let (mut w, mut a, mut b) = (0.35, [0.6, -1.1], [0.2, 0.4]);
    let mut state = MetaState {
        theta: bb.params(&[w], None).unwrap(),
        phi: affine_phi(a, b),
        optimizer: OuterState::Sgd,
        iteration: 0,
    };
    // (batch, per-sample meta sets) for three iterations, N = 2, K = 2
    type Plan = (Vec<usize>, Vec<[Vec<usize>; 2]>);
    let plan: [Plan; 3] = [
        (vec![0, 5], vec![[vec![1, 2], vec![4, 6]], [vec![3, 0], vec![7, 4]]]),
        (vec![6, 3], vec![[vec![0, 1], vec![5, 7]], [vec![2, 1], vec![6, 5]]]),
        (vec![2, 7], vec![[vec![3, 1], vec![4, 5]], [vec![0, 3], vec![5, 6]]]),
    ];
    for (t, (idx, sets)) in plan.iter().enumerate() {
        let batch = Batch {
            indices: idx.clone(),
            mos: idx
                .iter()
                .zip(sets)
                .map(|(&i, s)| MetaOrdinalSet {
                    target_index: i,
                    per_class: s.to_vec(),
                })
                .collect(),
            shared: false,
        };
        let oracle_batch: Vec<Sample> = idx.iter().map(|&i| sample(&ds, i)).collect();
        let oracle_sets: Vec<[Vec<Sample>; 2]> = sets
            .iter()
            .map(|s| std::array::from_fn(|c| s[c].iter().map(|&j| sample(&ds, j)).collect()))
            .collect();
        let expected = scalar::iterate(w, a, b, &oracle_batch, &oracle_sets, alpha, beta);

        let trace = meta_iteration(&learner, &mut state, &batch, &cfg, 1, alpha, beta).unwrap();
        assert!((trace.meta_loss - expected.meta).abs() <= 1e-12, "iteration {t}");
        assert!((trace.mce - expected.mce).abs() <= 1e-12, "iteration {t}");
        let got_w = state.theta.get("w").unwrap().data()[0];
        assert!((got_w - expected.w_next).abs() <= 1e-12, "iteration {t}: {got_w} vs {}", expected.w_next);
        for c in 0..2 {
            let ga = state.phi.get(&format!("v{c}.w")).unwrap().data()[0];
            let gb = state.phi.get(&format!("v{c}.b")).unwrap().data()[0];
            assert!((ga - expected.a[c]).abs() <= 1e-12);
            assert!((gb - expected.b[c]).abs() <= 1e-12);
        }
        (w, a, b) = (expected.w_next, expected.a, expected.b);
    }
}

#[test]
fn two_parameter_toy_hypergradient_matches_finite_differences() {
    let ds = two_class(&XS0, &XS1);
    let bb = LogitBackbone {
        input_dim: 1,
        bias: true,
    };
    let wn = WeightNetSpec {
        hidden_dim: 0,
        num_classes: 2,
    };
    let theta = bb.params(&[0.7], Some(-0.3)).unwrap();
    let phi = affine_phi([0.9, -0.4], [0.1, -0.2]);
    let batch = Batch {
        indices: vec![1, 6],
        mos: vec![
            MetaOrdinalSet {
                target_index: 1,
                per_class: vec![vec![0], vec![5]],
            },
            MetaOrdinalSet {
                target_index: 6,
                per_class: vec![vec![3], vec![4]],
            },
        ],
        shared: false,
    };
    let alpha = 0.9;
    let learner = MetaLearner::new(&bb, wn, &ds);
    let prep = learner.prepare(&theta, &batch).unwrap();
    for mode in [HypergradMode::Through, HypergradMode::Decomposed] {
        let h = learner.hypergradient(&prep, &theta, &phi, alpha, mode).unwrap();
        let direct = meta_objective_by_hand(&bb, &wn, &ds, &theta, &phi, &batch, alpha);
        assert!((h.meta_loss - direct).abs() <= 1e-13);
        let flat = phi.flatten();
        let eps = 1e-5;
        let fd: Vec<f64> = (0..flat.len())
            .map(|k| {
                let at = |d: f64| {
                    let mut p = flat.clone();
                    p[k] += d;
                    meta_objective_by_hand(&bb, &wn, &ds, &theta, &phi.unflatten(&p).unwrap(), &batch, alpha)
                };
                (at(eps) - at(-eps)) / (2.0 * eps)
            })
            .collect();
        let got = h.grad.flatten();
        let rel = mownet::autodiff::relative_error(&got, &fd);
        assert!(rel <= 1e-5, "{mode:?}: {rel:e}");
    }
}

#[test]
fn adam_outer_step_uses_the_mce_gradient() {
    let ds = two_class(&XS0, &XS1);
    let bb = LogitBackbone {
        input_dim: 1,
        bias: false,
    };
    let wn = WeightNetSpec {
        hidden_dim: 0,
        num_classes: 2,
    };
    let learner = MetaLearner::new(&bb, wn, &ds);
    let theta = bb.params(&[0.2], None).unwrap();
    let phi = affine_phi([0.5, 0.5], [0.0, 0.0]);
    let settings = AdamSettings {
        weight_decay: 0.0,
        ..AdamSettings::default()
    };
    let mut opt = OuterState::new(mownet::trainer::OuterOptimizer::Adam, &theta);
    let step = learner.theta_update(&theta, &phi, &[0, 4], 0.01, &mut opt, &settings).unwrap();
    let (_, grads, _) = learner.mce_objective(&theta, &phi, &[0, 4]).unwrap();
    // first bias-corrected step: m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + eps)
    let g = grads.get("w").unwrap().data()[0];
    let moved = step.theta.get("w").unwrap().data()[0] - 0.2;
    assert!((moved + 0.01 * g / (g.abs() + settings.eps)).abs() < 1e-15);
}
