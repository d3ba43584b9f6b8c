#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mownet::autodiff::{Graph, ParamSet, Tensor};
use mownet::data::{Dataset, OrdinalSample};
use mownet::model::{forward_weightnets, predict_batch, Backbone, WeightNetSpec};
use mownet::trainer::Batch;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_mownet"))
}

/// Run the CLI with `MOW_RUN_DIR` pointed at `runs`.
pub fn mownet(runs: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("MOW_RUN_DIR", runs)
        .output()
        .expect("spawn mownet")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Directory printed on the last `run directory:` line.
pub fn run_dir(o: &Output) -> PathBuf {
    let out = stdout(o);
    let line = out
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap_or_else(|| panic!("no run directory in output:\n{out}\n{}", stderr(o)));
    PathBuf::from(line)
}

/// 1-D two-class data: class 0 at score 1.5, class 1 at score 3.0.
pub fn two_class(xs0: &[f64], xs1: &[f64]) -> Dataset {
    let mut ds = Dataset::new(1);
    for &x in xs0 {
        ds.push(OrdinalSample::new(vec![x], 1.5).unwrap()).unwrap();
    }
    for &x in xs1 {
        ds.push(OrdinalSample::new(vec![x], 3.0).unwrap()).unwrap();
    }
    ds
}

pub fn affine_phi(a: [f64; 2], b: [f64; 2]) -> ParamSet {
    let mut phi = ParamSet::new();
    for c in 0..2 {
        phi.insert(format!("v{c}.w"), Tensor::matrix(1, 1, vec![a[c]]).unwrap()).unwrap();
        phi.insert(format!("v{c}.b"), Tensor::vector(vec![b[c]])).unwrap();
    }
    phi
}

/// Meta objective re-evaluated from scratch: per-sample gradients by
/// reverse mode, ω by the weight nets, Θ̂ assembled by hand, CE by prediction.
pub fn meta_objective_by_hand(
    bb: &dyn Backbone,
    wn: &WeightNetSpec,
    ds: &mownet::data::Dataset,
    theta: &ParamSet,
    phi: &ParamSet,
    batch: &Batch,
    alpha: f64,
) -> f64 {
    let n = batch.indices.len() as f64;
    let mut theta_hat = theta.clone();
    for (i, &idx) in batch.indices.iter().enumerate() {
        let class_losses: Vec<f64> = batch.mos[i]
            .per_class
            .iter()
            .map(|members| {
                let rows = ds.rows(members).unwrap();
                let preds = predict_batch(bb, theta, &rows).unwrap();
                preds
                    .iter()
                    .zip(members)
                    .map(|(p, &j)| -p.log_probs[ds.label(j).unwrap()])
                    .sum::<f64>()
                    / members.len() as f64
            })
            .collect();
        let omega = forward_weightnets(wn, phi, &class_losses).unwrap().weights;
        let mut g = Graph::new();
        let tv = g.bind(theta);
        let x = g.constant(Tensor::matrix(1, ds.dim(), ds.get(idx).unwrap().features.clone()).unwrap());
        let out = bb.forward(&mut g, &tv, x).unwrap();
        // Σ_c ω_c ∇(−log p̂_c) as one seeded backward pass
        let seed = Tensor::matrix(1, omega.len(), omega.iter().map(|w| -w).collect()).unwrap();
        let grads = g.backward_seeded(out.log_probs, seed, &tv).unwrap();
        for (name, t) in theta_hat.iter_mut() {
            for (v, gv) in t.data_mut().iter_mut().zip(grads.get(name).unwrap().data()) {
                *v -= alpha / n * gv;
            }
        }
    }
    let rows: Vec<usize> = batch.mos.iter().flat_map(|m| m.indices()).collect();
    let preds = predict_batch(bb, &theta_hat, &ds.rows(&rows).unwrap()).unwrap();
    preds
        .iter()
        .zip(&rows)
        .map(|(p, &j)| -p.log_probs[ds.label(j).unwrap()])
        .sum::<f64>()
        / rows.len() as f64
}

/// Closed-form bilevel iteration for the model p̂ = softmax([0, w·x]) with
/// affine weight nets ω_c = σ(a_c·ℓ + b_c).
pub mod scalar {
    fn sig(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    fn softplus(z: f64) -> f64 {
        if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        }
    }

    /// −log p̂_c(x).
    pub fn nll(w: f64, x: f64, c: usize) -> f64 {
        let z = w * x;
        if c == 0 {
            softplus(z)
        } else {
            softplus(z) - z
        }
    }

    /// d(−log p̂_c)/dw.
    pub fn h(w: f64, x: f64, c: usize) -> f64 {
        let s = sig(w * x);
        if c == 0 {
            x * s
        } else {
            -x * (1.0 - s)
        }
    }

    pub struct Sample {
        pub x: f64,
        pub y: usize,
    }

    pub struct Step {
        pub omega_meta: Vec<[f64; 2]>,
        pub w_hat: f64,
        pub meta: f64,
        pub a: [f64; 2],
        pub b: [f64; 2],
        pub mce: f64,
        pub w_next: f64,
    }

    /// `batch[i]` is a training sample, `mos[i][c]` its class-c meta samples.
    pub fn iterate(
        w: f64,
        a: [f64; 2],
        b: [f64; 2],
        batch: &[Sample],
        mos: &[[Vec<Sample>; 2]],
        alpha: f64,
        beta: f64,
    ) -> Step {
        let n = batch.len() as f64;
        // ω at the meta losses, virtual step
        let mut ell = Vec::new();
        let mut omega_meta = Vec::new();
        for set in mos {
            let l: [f64; 2] = std::array::from_fn(|c| {
                set[c].iter().map(|s| nll(w, s.x, s.y)).sum::<f64>() / set[c].len() as f64
            });
            omega_meta.push(std::array::from_fn(|c| sig(a[c] * l[c] + b[c])));
            ell.push(l);
        }
        let mut w_hat = w;
        for (s, om) in batch.iter().zip(&omega_meta) {
            for (c, o) in om.iter().enumerate() {
                w_hat -= alpha / n * o * h(w, s.x, c);
            }
        }
        // meta objective: mean CE over every meta sample of every set
        let rows: Vec<&Sample> = mos.iter().flat_map(|set| set.iter().flatten()).collect();
        let m = rows.len() as f64;
        let meta = rows.iter().map(|s| nll(w_hat, s.x, s.y)).sum::<f64>() / m;
        let u = rows.iter().map(|s| h(w_hat, s.x, s.y)).sum::<f64>() / m;
        // dŵ/da_c, dŵ/db_c
        let mut ga = [0.0; 2];
        let mut gb = [0.0; 2];
        for (i, s) in batch.iter().enumerate() {
            for c in 0..2 {
                let om = omega_meta[i][c];
                let d = -alpha / n * h(w, s.x, c) * om * (1.0 - om);
                ga[c] += u * d * ell[i][c];
                gb[c] += u * d;
            }
        }
        let a2 = [a[0] - beta * ga[0], a[1] - beta * ga[1]];
        let b2 = [b[0] - beta * gb[0], b[1] - beta * gb[1]];
        // Θ step on the MCE with weights from each sample's own CE
        let mut mce = 0.0;
        let mut grad = 0.0;
        for s in batch {
            let own = nll(w, s.x, s.y);
            let down = h(w, s.x, s.y);
            for c in 0..2 {
                let om = sig(a2[c] * own + b2[c]);
                let lc = nll(w, s.x, c);
                mce += om * lc;
                grad += om * h(w, s.x, c) + lc * om * (1.0 - om) * a2[c] * down;
            }
        }
        Step {
            omega_meta,
            w_hat,
            meta,
            a: a2,
            b: b2,
            mce: mce / n,
            w_next: w - alpha * grad / n,
        }
    }
}
