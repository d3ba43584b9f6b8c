//! Backbone classifier (Θ) and per-class weight networks (Φ).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, ParamVars, Tensor, Var};
use crate::error::{Error, Result};

/// Output nodes of a backbone forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// `[B, C]` log class probabilities.
    pub log_probs: Var,
    /// `[B, h]` penultimate activations.
    pub embedding: Var,
}

/// A classifier whose parameters live in a [`ParamSet`].
pub trait Backbone: Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Forward a `[B, input_dim]` batch.
    fn forward(&self, g: &mut Graph, theta: &ParamVars, x: Var) -> Result<BackboneOutput>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract(format!(
                "backbone needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::contract(format!(
                "zero-width layer in backbone (input {}, hidden {:?})",
                self.input_dim, self.hidden_dims
            )));
        }
        Ok(())
    }

    /// Recover the architecture from parameter shapes (`l0.w`, `l1.w`, ...).
    pub fn from_params(theta: &ParamSet) -> Result<Self> {
        let mut dims = Vec::new();
        while let Some(w) = theta.get(&format!("l{}.w", dims.len())) {
            if w.rank() != 2 {
                return Err(Error::contract(format!("l{}.w is not a matrix", dims.len())));
            }
            dims.push((w.shape()[0], w.shape()[1]));
        }
        if dims.is_empty() || dims.windows(2).any(|p| p[0].1 != p[1].0) || theta.len() != 2 * dims.len() {
            return Err(Error::contract("parameters do not describe a dense backbone"));
        }
        let spec = BackboneSpec {
            input_dim: dims[0].0,
            hidden_dims: dims[..dims.len() - 1].iter().map(|d| d.1).collect(),
            num_classes: dims[dims.len() - 1].1,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

impl Backbone for BackboneSpec {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn forward(&self, g: &mut Graph, theta: &ParamVars, x: Var) -> Result<BackboneOutput> {
        let layers = self.layer_dims();
        let mut h = x;
        let mut embedding = x;
        for (i, _) in layers.iter().enumerate() {
            let w = theta.get(&format!("l{i}.w"))?;
            let b = theta.get(&format!("l{i}.b"))?;
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            if i + 1 < layers.len() {
                h = g.relu(z);
                embedding = h;
            } else {
                h = z;
            }
        }
        Ok(BackboneOutput {
            log_probs: g.log_softmax(h),
            embedding,
        })
    }
}

/// Two-class logistic model: logits `[0, x·w (+ b)]`. Parameters `w` `[d, 1]`
/// and, with `bias`, `b` `[1]`. Small enough for closed-form checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LogitBackbone {
    pub input_dim: usize,
    pub bias: bool,
}

impl LogitBackbone {
    pub fn params(&self, w: &[f64], b: Option<f64>) -> Result<ParamSet> {
        if w.len() != self.input_dim || b.is_some() != self.bias {
            return Err(Error::contract("logit backbone parameter mismatch"));
        }
        let mut theta = ParamSet::new();
        theta.insert("w", Tensor::matrix(self.input_dim, 1, w.to_vec())?)?;
        if let Some(b) = b {
            theta.insert("b", Tensor::vector(vec![b]))?;
        }
        Ok(theta)
    }
}

impl Backbone for LogitBackbone {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn forward(&self, g: &mut Graph, theta: &ParamVars, x: Var) -> Result<BackboneOutput> {
        let mut z = g.matmul(x, theta.get("w")?)?;
        if self.bias {
            z = g.add(z, theta.get("b")?)?;
        }
        let lift = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0])?);
        let logits = g.matmul(z, lift)?;
        Ok(BackboneOutput {
            log_probs: g.log_softmax(logits),
            embedding: x,
        })
    }
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Dense backbone parameters: weights uniform in `±1/sqrt(fan_in)`, zero biases.
pub fn init_backbone(spec: &BackboneSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = ParamSet::new();
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        theta.insert(format!("l{i}.w"), uniform_fan_in(&mut rng, fan_in, fan_out)?)?;
        theta.insert(format!("l{i}.b"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(theta)
}

/// Per-sample prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub log_probs: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Prediction {
    /// Argmax of the log probabilities; ties go to the lowest class index.
    pub fn class(&self) -> usize {
        argmax(&self.log_probs)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_rows(backbone: &dyn Backbone, rows: &[&[f64]]) -> Result<()> {
    for row in rows {
        if row.len() != backbone.input_dim() {
            return Err(Error::contract(format!(
                "feature vector has length {}, backbone expects {}",
                row.len(),
                backbone.input_dim()
            )));
        }
    }
    Ok(())
}

/// Forward a batch of feature rows and read back per-sample predictions.
pub fn predict_batch(backbone: &dyn Backbone, theta: &ParamSet, rows: &[&[f64]]) -> Result<Vec<Prediction>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    check_rows(backbone, rows)?;
    let mut g = Graph::new();
    let vars = g.bind_constant(theta);
    let x = g.constant(Tensor::matrix(
        rows.len(),
        backbone.input_dim(),
        rows.iter().flat_map(|r| r.iter().copied()).collect(),
    )?);
    let out = backbone.forward(&mut g, &vars, x)?;
    let c = backbone.num_classes();
    let lp = g.value(out.log_probs).data();
    let emb = g.value(out.embedding);
    let h = emb.numel() / rows.len();
    Ok((0..rows.len())
        .map(|i| Prediction {
            log_probs: lp[i * c..(i + 1) * c].to_vec(),
            embedding: emb.data()[i * h..(i + 1) * h].to_vec(),
        })
        .collect())
}

pub fn forward_backbone(backbone: &dyn Backbone, theta: &ParamSet, x: &[f64]) -> Result<Prediction> {
    Ok(predict_batch(backbone, theta, &[x])?.remove(0))
}

/// Predicted class for one sample. Only Θ participates.
pub fn predict_class(backbone: &dyn Backbone, theta: &ParamSet, x: &[f64]) -> Result<usize> {
    Ok(forward_backbone(backbone, theta, x)?.class())
}

/// Architecture of the scalar-to-weight networks `V_c`.
///
/// With `hidden_dim > 0` each net is `1 -> hidden (ReLU) -> 1 (sigmoid)`;
/// `hidden_dim == 0` gives a single affine unit followed by the sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightNetSpec {
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl WeightNetSpec {
    pub fn new(num_classes: usize) -> Self {
        WeightNetSpec {
            hidden_dim: 100,
            num_classes,
        }
    }

    /// Weighting net for class `c` applied to a `[B, 1]` column of losses.
    pub fn forward_class(&self, g: &mut Graph, phi: &ParamVars, class: usize, input: Var) -> Result<Var> {
        let pre = if self.hidden_dim == 0 {
            let z = g.matmul(input, phi.get(&format!("v{class}.w"))?)?;
            g.add(z, phi.get(&format!("v{class}.b"))?)?
        } else {
            let z = g.matmul(input, phi.get(&format!("v{class}.w1"))?)?;
            let z = g.add(z, phi.get(&format!("v{class}.b1"))?)?;
            let h = g.relu(z);
            let z = g.matmul(h, phi.get(&format!("v{class}.w2"))?)?;
            g.add(z, phi.get(&format!("v{class}.b2"))?)?
        };
        Ok(g.sigmoid(pre))
    }

    /// Route `inputs[c]` (each `[B, 1]`) through `V_c` only.
    pub fn forward_all(&self, g: &mut Graph, phi: &ParamVars, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.len() != self.num_classes {
            return Err(Error::contract(format!(
                "weight nets expect {} inputs, got {}",
                self.num_classes,
                inputs.len()
            )));
        }
        inputs
            .iter()
            .enumerate()
            .map(|(c, &x)| self.forward_class(g, phi, c, x))
            .collect()
    }

    /// Names of the final-layer parameters of `V_c`.
    pub fn output_layer_names(&self, class: usize) -> [String; 2] {
        if self.hidden_dim == 0 {
            [format!("v{class}.w"), format!("v{class}.b")]
        } else {
            [format!("v{class}.w2"), format!("v{class}.b2")]
        }
    }
}

/// Independent weight nets, one per class, initialized like the backbone.
pub fn init_weightnets(spec: &WeightNetSpec, seed: u64) -> Result<ParamSet> {
    if spec.num_classes < 2 {
        return Err(Error::contract("weight nets need at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = ParamSet::new();
    for c in 0..spec.num_classes {
        if spec.hidden_dim == 0 {
            phi.insert(format!("v{c}.w"), uniform_fan_in(&mut rng, 1, 1)?)?;
            phi.insert(format!("v{c}.b"), Tensor::zeros(&[1]))?;
        } else {
            let h = spec.hidden_dim;
            phi.insert(format!("v{c}.w1"), uniform_fan_in(&mut rng, 1, h)?)?;
            phi.insert(format!("v{c}.b1"), Tensor::zeros(&[h]))?;
            phi.insert(format!("v{c}.w2"), uniform_fan_in(&mut rng, h, 1)?)?;
            phi.insert(format!("v{c}.b2"), Tensor::zeros(&[1]))?;
        }
    }
    Ok(phi)
}

/// Per-class weights, each strictly inside `(0, 1)` for finite inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
}

/// `ω_c = V_c(loss_c)` for one sample.
pub fn forward_weightnets(spec: &WeightNetSpec, phi: &ParamSet, per_class_losses: &[f64]) -> Result<WeightVector> {
    let mut g = Graph::new();
    let vars = g.bind_constant(phi);
    let inputs: Vec<Var> = per_class_losses
        .iter()
        .map(|&l| g.constant(Tensor::scalar(l).reshaped(&[1, 1]).expect("1x1")))
        .collect();
    let outs = spec.forward_all(&mut g, &vars, &inputs)?;
    Ok(WeightVector {
        weights: outs.iter().map(|&v| g.value(v).data()[0]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_is_recovered_from_parameters() {
        let spec = BackboneSpec {
            input_dim: 5,
            hidden_dims: vec![7, 4],
            num_classes: 3,
        };
        let theta = init_backbone(&spec, 0).unwrap();
        assert_eq!(BackboneSpec::from_params(&theta).unwrap(), spec);
        assert!(BackboneSpec::from_params(&ParamSet::new()).is_err());
    }
    use crate::autodiff::grad_check;

    fn spec() -> BackboneSpec {
        BackboneSpec {
            input_dim: 4,
            hidden_dims: vec![8],
            num_classes: 3,
        }
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        let a = init_backbone(&spec(), 11).unwrap();
        let b = init_backbone(&spec(), 11).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.num_scalars(), 4 * 8 + 8 + 8 * 3 + 3);
        let c = init_backbone(&spec(), 12).unwrap();
        assert_ne!(a.flatten(), c.flatten());
        for (name, t) in a.iter() {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_width_layer_rejected() {
        let mut s = spec();
        s.hidden_dims = vec![0];
        assert!(init_backbone(&s, 0).is_err());
        s.hidden_dims = vec![8];
        s.num_classes = 1;
        assert!(init_backbone(&s, 0).is_err());
    }

    #[test]
    fn zero_parameters_give_uniform_prediction() {
        let theta = init_backbone(&spec(), 3).unwrap();
        let zeros = theta.unflatten(&vec![0.0; theta.num_scalars()]).unwrap();
        let p = forward_backbone(&spec(), &zeros, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        for lp in p.log_probs {
            assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn prediction_normalizes_and_checks_dims() {
        let theta = init_backbone(&spec(), 5).unwrap();
        let p = forward_backbone(&spec(), &theta, &[10.0, -2.0, 0.5, 3.0]).unwrap();
        let s: f64 = p.log_probs.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(p.embedding.len(), 8);
        assert!(forward_backbone(&spec(), &theta, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[-0.1, -2.0, -3.0]), 0);
        assert_eq!(argmax(&[-3.0, -0.5, -0.5]), 1);
    }

    #[test]
    fn backbone_log_prob_gradient_matches_fd() {
        let theta = init_backbone(&spec(), 9).unwrap();
        let report = grad_check(
            |g, vars| {
                let x = g.constant(Tensor::matrix(1, 4, vec![0.3, -1.2, 0.8, 2.0]).unwrap());
                let out = spec().forward(g, vars, x)?;
                let pick = g.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap());
                let sel = g.mul(out.log_probs, pick)?;
                let m = g.mean(sel);
                Ok(g.scale(m, 3.0))
            },
            &theta,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn zeroed_output_layer_gives_half_weights() {
        let ws = WeightNetSpec::new(3);
        let mut phi = init_weightnets(&ws, 1).unwrap();
        for c in 0..3 {
            for n in ws.output_layer_names(c) {
                phi.get_mut(&n).unwrap().data_mut().fill(0.0);
            }
        }
        let w = forward_weightnets(&ws, &phi, &[0.3, 1.7, 5.0]).unwrap();
        assert_eq!(w.weights, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn weights_in_open_unit_interval() {
        let ws = WeightNetSpec::new(3);
        let phi = init_weightnets(&ws, 2).unwrap();
        for l in [0.0, 0.01, 1.0, 30.0] {
            let w = forward_weightnets(&ws, &phi, &[l, l, l]).unwrap();
            assert!(w.weights.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(forward_weightnets(&ws, &phi, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn weight_net_routing_and_input_gradient() {
        let ws = WeightNetSpec {
            hidden_dim: 6,
            num_classes: 3,
        };
        let phi = init_weightnets(&ws, 4).unwrap();
        let losses = [0.7, 1.3, 0.2];
        let mut g = Graph::new();
        let vars = g.bind_constant(&phi);
        let inputs: Vec<Var> = losses
            .iter()
            .map(|&l| g.leaf(Tensor::matrix(1, 1, vec![l]).unwrap()))
            .collect();
        let outs = ws.forward_all(&mut g, &vars, &inputs).unwrap();
        for c in 0..3 {
            let grads = g.grad(outs[c], &inputs).unwrap();
            for (c2, gr) in grads.iter().enumerate() {
                if c2 != c {
                    assert_eq!(gr.data(), &[0.0]);
                }
            }
            let h = 1e-5;
            let mut plus = losses;
            plus[c] += h;
            let mut minus = losses;
            minus[c] -= h;
            let fd = (forward_weightnets(&ws, &phi, &plus).unwrap().weights[c]
                - forward_weightnets(&ws, &phi, &minus).unwrap().weights[c])
                / (2.0 * h);
            let an = grads[c].data()[0];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }
}
