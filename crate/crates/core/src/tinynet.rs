//! A small ReLU multilayer perceptron with hand-derived gradients.
//!
//! The same network type serves as teacher and student. Parameters are
//! immutable snapshots: optimizer steps return a fresh [`TinyNetParams`].
//!
//! Flattening order is layer-major; within a layer the weight matrix comes
//! first (row-major, `out × in`) followed by the bias vector.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{expect_magic, ByteReader};
use crate::error::{check_len, invalid, LabError, Result};
use crate::simplex::{kl_slice, softmax_slice, ProbVector};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TNET";
pub const CHECKPOINT_VERSION: u16 = 1;

/// One affine layer: `out = W · in + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Row-major `outputs × inputs` weight matrix.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }
}

/// Dense weights and biases of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNetParams {
    layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type Gradients = TinyNetParams;

impl TinyNetParams {
    /// All-zero parameters for the given layer sizes.
    pub fn zeros(arch: &[usize]) -> Result<Self> {
        validate_arch(arch)?;
        Ok(Self { layers: arch.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect() })
    }

    /// Builds parameters from explicit layers, checking that consecutive
    /// layers chain.
    pub fn from_layers(layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("network needs at least one layer");
        }
        let mut out = Vec::with_capacity(layers.len());
        for (weights, bias, inputs, outputs) in layers {
            check_len(inputs * outputs, weights.len())?;
            check_len(outputs, bias.len())?;
            if let Some(prev) = out.last() {
                let prev: &Layer = prev;
                check_len(prev.outputs, inputs)?;
            }
            if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
                return Err(LabError::NonFinite("layer parameter".into()));
            }
            out.push(Layer { inputs, outputs, weights, bias });
        }
        Ok(Self { layers: out })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer sizes `[input, hidden.., output]`.
    pub fn arch(&self) -> Vec<usize> {
        let mut arch = vec![self.layers[0].inputs];
        arch.extend(self.layers.iter().map(|l| l.outputs));
        arch
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten), reusing this network's shape.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        check_len(self.num_params(), flat.len())?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut pos = 0;
        for l in &self.layers {
            let nw = l.weights.len();
            let nb = l.bias.len();
            layers.push(Layer {
                inputs: l.inputs,
                outputs: l.outputs,
                weights: flat[pos..pos + nw].to_vec(),
                bias: flat[pos + nw..pos + nw + nb].to_vec(),
            });
            pos += nw + nb;
        }
        Ok(Self { layers })
    }

    fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Serializes to the `TNET` checkpoint layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.layers.len() + 8 * self.num_params());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        }
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        expect_magic(&mut r, CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(LabError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(LabError::CorruptHeader("zero layers".into()));
        }
        let mut arch = Vec::with_capacity(count + 1);
        for i in 0..count {
            let inputs = r.u32()? as usize;
            let outputs = r.u32()? as usize;
            if i == 0 {
                arch.push(inputs);
            } else if arch[i] != inputs {
                return Err(LabError::CorruptHeader(format!("layer {i} does not chain")));
            }
            arch.push(outputs);
        }
        let shape = Self::zeros(&arch).map_err(|e| LabError::CorruptHeader(e.to_string()))?;
        let mut flat = Vec::with_capacity(shape.num_params());
        for _ in 0..shape.num_params() {
            flat.push(r.f64()?);
        }
        if r.remaining() != 0 {
            return Err(LabError::CorruptHeader(format!("{} trailing bytes", r.remaining())));
        }
        let params = shape.unflatten(&flat)?;
        if !params.is_finite() {
            return Err(LabError::NonFinite("checkpoint parameter".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn validate_arch(arch: &[usize]) -> Result<()> {
    if arch.len() < 2 {
        return invalid("architecture needs input and output sizes");
    }
    if arch.contains(&0) {
        return invalid("layer sizes must be at least 1");
    }
    Ok(())
}

/// Scaled-uniform initialization: weights in `±√(6/(fan_in+fan_out))`,
/// biases zero.
pub fn init_net(arch: &[usize], seed: u64) -> Result<TinyNetParams> {
    let mut params = TinyNetParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &mut params.layers {
        let bound = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
        for w in &mut l.weights {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Row-major `rows × dim` input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return invalid(format!("batch of {} values does not tile rows of {dim}", data.len()));
        }
        Ok(Self { dim, data })
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return invalid("batch needs at least one row");
        };
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            check_len(dim, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Output of [`forward`]: logits plus every layer's post-activation values.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    rows: usize,
    classes: usize,
    /// `activations[0]` is the input; `activations[l]` the output of layer
    /// `l - 1` after ReLU (the last entry holds the raw logits).
    activations: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("forward pass has output")
    }

    pub fn row_logits(&self, i: usize) -> &[f64] {
        &self.logits()[i * self.classes..(i + 1) * self.classes]
    }

    /// Tempered softmax of every row.
    pub fn probs(&self, tau: f64) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| softmax_slice(self.row_logits(i), tau)).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.rows).map(|i| crate::simplex::argmax(self.row_logits(i))).collect()
    }
}

pub fn forward(params: &TinyNetParams, batch: &Batch) -> Result<ForwardPass> {
    check_len(params.input_dim(), batch.dim)?;
    let rows = batch.rows();
    let last = params.layers.len() - 1;
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(batch.data.clone());
    for (li, layer) in params.layers.iter().enumerate() {
        let input = &activations[li];
        let mut out = vec![0.0; rows * layer.outputs];
        for r in 0..rows {
            let x = &input[r * layer.inputs..(r + 1) * layer.inputs];
            let y = &mut out[r * layer.outputs..(r + 1) * layer.outputs];
            for (o, yo) in y.iter_mut().enumerate() {
                let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let mut acc = layer.bias[o];
                for (wi, xi) in w.iter().zip(x) {
                    acc += wi * xi;
                }
                *yo = if li < last { acc.max(0.0) } else { acc };
            }
        }
        activations.push(out);
    }
    Ok(ForwardPass { rows, classes: params.output_dim(), activations })
}

/// Which loss a batch of targets drives.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    /// `mean KL(target ‖ softmax(logits / tau))`.
    Soft { targets: &'a [ProbVector], tau: f64 },
    /// `mean CE(target, softmax(logits))` against (smoothed / mixed) hard targets.
    Hard { targets: &'a [ProbVector] },
}

impl<'a> Supervision<'a> {
    fn targets(&self) -> &'a [ProbVector] {
        match *self {
            Supervision::Soft { targets, .. } | Supervision::Hard { targets } => targets,
        }
    }

    fn tau(&self) -> f64 {
        match *self {
            Supervision::Soft { tau, .. } => tau,
            Supervision::Hard { .. } => 1.0,
        }
    }
}

/// Loss value and its exact parameter gradient.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Gradients,
}

/// Mean loss over the batch (no gradient).
pub fn loss(params: &TinyNetParams, batch: &Batch, sup: Supervision<'_>) -> Result<f64> {
    let pass = forward(params, batch)?;
    let (loss, _) = output_delta(params, &pass, sup)?;
    Ok(loss)
}

fn output_delta(
    params: &TinyNetParams,
    pass: &ForwardPass,
    sup: Supervision<'_>,
) -> Result<(f64, Vec<f64>)> {
    let targets = sup.targets();
    let tau = sup.tau();
    if !(tau > 0.0) || !tau.is_finite() {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    check_len(pass.rows, targets.len())?;
    let classes = params.output_dim();
    let rows = pass.rows as f64;
    let mut delta = vec![0.0; pass.rows * classes];
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        check_len(classes, t.classes())?;
        let t = t.as_slice();
        let z = pass.row_logits(r);
        let q = softmax_slice(z, tau);
        total += match sup {
            Supervision::Soft { .. } => kl_slice(t, &q),
            Supervision::Hard { .. } => {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                t.iter().zip(z).map(|(tc, zc)| -tc * (zc - lse)).sum()
            }
        };
        let d = &mut delta[r * classes..(r + 1) * classes];
        for c in 0..classes {
            d[c] = (q[c] - t[c]) / (tau * rows);
        }
    }
    Ok((total / rows, delta))
}

/// Loss and exact gradient for a batch.
pub fn backward(params: &TinyNetParams, batch: &Batch, sup: Supervision<'_>) -> Result<LossGrad> {
    let pass = forward(params, batch)?;
    let (loss, mut delta) = output_delta(params, &pass, sup)?;
    if !loss.is_finite() {
        return Err(LabError::NonFinite("loss".into()));
    }
    let rows = pass.rows;
    let mut grads = params.zeros_like();
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let input = &pass.activations[li];
        let g = &mut grads.layers[li];
        for r in 0..rows {
            let d = &delta[r * layer.outputs..(r + 1) * layer.outputs];
            let x = &input[r * layer.inputs..(r + 1) * layer.inputs];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                g.bias[o] += dv;
                let gw = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gwi, xi) in gw.iter_mut().zip(x) {
                    *gwi += dv * xi;
                }
            }
        }
        if li == 0 {
            break;
        }
        // Propagate through W^T and the ReLU of the previous layer.
        let mut prev = vec![0.0; rows * layer.inputs];
        for r in 0..rows {
            let d = &delta[r * layer.outputs..(r + 1) * layer.outputs];
            let p = &mut prev[r * layer.inputs..(r + 1) * layer.inputs];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (pi, wi) in p.iter_mut().zip(w) {
                    *pi += dv * wi;
                }
            }
            let act = &input[r * layer.inputs..(r + 1) * layer.inputs];
            for (pi, &a) in p.iter_mut().zip(act) {
                if a <= 0.0 {
                    *pi = 0.0;
                }
            }
        }
        delta = prev;
    }
    Ok(LossGrad { loss, grads })
}

/// [`backward`]'s gradient in flattening order.
pub fn flat_grad(params: &TinyNetParams, batch: &Batch, sup: Supervision<'_>) -> Result<Vec<f64>> {
    Ok(backward(params, batch, sup)?.grads.flatten())
}

/// Update rule applied by [`opt_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Plain,
    Momentum { beta: f64 },
    /// Adaptive moments with decoupled weight decay.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Decoupled decay, applied as `w ← w − lr·decay·w`.
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, params: &TinyNetParams) -> Self {
        let n = params.num_params();
        let (first, second) = match kind {
            OptimizerKind::Plain => (Vec::new(), Vec::new()),
            OptimizerKind::Momentum { .. } => (vec![0.0; n], Vec::new()),
            OptimizerKind::Adam { .. } => (vec![0.0; n], vec![0.0; n]),
        };
        Self { kind, lr, weight_decay, step: 0, first, second }
    }
}

/// Applies one optimizer update and returns the new parameters.
pub fn opt_step(
    params: &TinyNetParams,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<TinyNetParams> {
    if params.arch() != grads.arch() {
        return invalid("gradient shape does not match parameters");
    }
    let mut w = params.flatten();
    let g = grads.flatten();
    let n = w.len();
    match state.kind {
        OptimizerKind::Momentum { .. } => check_len(n, state.first.len())?,
        OptimizerKind::Adam { .. } => {
            check_len(n, state.first.len())?;
            check_len(n, state.second.len())?;
        }
        OptimizerKind::Plain => {}
    }
    state.step += 1;
    let lr = state.lr;
    let decay = lr * state.weight_decay;
    match state.kind {
        OptimizerKind::Plain => {
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= decay * *wi + lr * gi;
            }
        }
        OptimizerKind::Momentum { beta } => {
            for ((wi, gi), mi) in w.iter_mut().zip(&g).zip(&mut state.first) {
                *mi = beta * *mi + gi;
                *wi -= decay * *wi + lr * *mi;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for i in 0..n {
                let gi = g[i];
                let m = &mut state.first[i];
                let v = &mut state.second[i];
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                w[i] -= decay * w[i] + lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Diverged(format!("non-finite parameters after step {}", state.step)));
    }
    params.unflatten(&w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_probs(rng: &mut ChaCha8Rng, classes: usize) -> ProbVector {
        let v: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
        ProbVector::new(v).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Batch {
        Batch::new(dim, (0..rows * dim).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_net(&[4, 3], 7).unwrap();
        assert_eq!(a, init_net(&[4, 3], 7).unwrap());
        assert_eq!(a.layers()[0].weights().len(), 12);
        assert_eq!(a.layers()[0].bias(), &[0.0; 3]);
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.layers()[0].weights().iter().all(|w| w.abs() <= bound));
        let b = init_net(&[4, 3], 8).unwrap();
        assert!(a.flatten().iter().zip(b.flatten()).any(|(x, y)| *x != y));
        assert!(init_net(&[], 1).is_err());
        assert!(init_net(&[4], 1).is_err());
        assert!(init_net(&[4, 0, 2], 1).is_err());
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let p = TinyNetParams::zeros(&[5, 4, 3]).unwrap();
        let b = Batch::new(5, vec![0.5; 10]).unwrap();
        let pass = forward(&p, &b).unwrap();
        assert!(pass.logits().iter().all(|&z| z == 0.0));
        for row in pass.probs(1.0) {
            assert!(row.iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = TinyNetParams::from_layers(vec![(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2)])
            .unwrap();
        let pass = forward(&p, &Batch::new(2, vec![0.3, 0.7]).unwrap()).unwrap();
        assert_eq!(pass.logits(), &[0.3, 0.7]);
    }

    #[test]
    fn rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_net(&[6, 5, 4], 11).unwrap();
        let one = random_batch(&mut rng, 1, 6);
        let two = Batch::from_rows(&[one.row(0), one.row(0)]).unwrap();
        let a = forward(&p, &one).unwrap();
        let b = forward(&p, &two).unwrap();
        assert_eq!(b.row_logits(0), a.row_logits(0));
        assert_eq!(b.row_logits(1), a.row_logits(0));
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let p = init_net(&[6, 3], 1).unwrap();
        assert!(forward(&p, &Batch::new(5, vec![0.0; 5]).unwrap()).is_err());
    }

    #[test]
    fn soft_target_equal_to_prediction_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_net(&[6, 5, 3], 2).unwrap();
        let b = random_batch(&mut rng, 4, 6);
        let tau = 2.0;
        let preds: Vec<ProbVector> = forward(&p, &b)
            .unwrap()
            .probs(tau)
            .into_iter()
            .map(|v| ProbVector::new(v).unwrap())
            .collect();
        let lg = backward(&p, &b, Supervision::Soft { targets: &preds, tau }).unwrap();
        assert!(lg.loss.abs() < 1e-12);
        let norm = lg.grads.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "gradient norm {norm}");
    }

    #[test]
    fn duplicated_rows_give_same_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = init_net(&[6, 5, 3], 4).unwrap();
        let one = random_batch(&mut rng, 1, 6);
        let two = Batch::from_rows(&[one.row(0), one.row(0)]).unwrap();
        let t = random_probs(&mut rng, 3);
        let g1 = flat_grad(&p, &one, Supervision::Hard { targets: &[t.clone()] }).unwrap();
        let g2 = flat_grad(&p, &two, Supervision::Hard { targets: &[t.clone(), t] }).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn target_count_mismatch_is_rejected() {
        let p = init_net(&[2, 3], 0).unwrap();
        let b = Batch::new(2, vec![0.1; 4]).unwrap();
        let t = ProbVector::uniform(3).unwrap();
        assert!(backward(&p, &b, Supervision::Hard { targets: &[t.clone()] }).is_err());
        let wrong = ProbVector::uniform(4).unwrap();
        assert!(backward(&p, &b, Supervision::Soft { targets: &[wrong.clone(), wrong], tau: 1.0 })
            .is_err());
        assert!(backward(&p, &b, Supervision::Soft { targets: &[t.clone(), t], tau: 0.0 }).is_err());
    }

    /// Central finite-difference gradient, independent of `backward`.
    fn numeric_grad(p: &TinyNetParams, b: &Batch, sup: Supervision<'_>, h: f64) -> Vec<f64> {
        let base = p.flatten();
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[i] += h;
                minus[i] -= h;
                let lp = loss(&p.unflatten(&plus).unwrap(), b, sup).unwrap();
                let lm = loss(&p.unflatten(&minus).unwrap(), b, sup).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..20 {
            let arch = [5, 7, 4, 3];
            let p = init_net(&arch, 100 + trial).unwrap();
            let b = random_batch(&mut rng, 3, 5);
            let targets: Vec<ProbVector> = (0..3).map(|_| random_probs(&mut rng, 3)).collect();
            let sup = if trial % 2 == 0 {
                Supervision::Soft { targets: &targets, tau: 1.5 }
            } else {
                Supervision::Hard { targets: &targets }
            };
            let analytic = flat_grad(&p, &b, sup).unwrap();
            let numeric = numeric_grad(&p, &b, sup, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                if a.abs() > 1e-6 {
                    let rel = (a - n).abs() / a.abs().max(n.abs());
                    assert!(rel <= 1e-4, "trial {trial}: analytic {a} vs numeric {n}");
                }
            }
        }
    }

    #[test]
    fn plain_step_arithmetic() {
        let p = TinyNetParams::from_layers(vec![(vec![1.0], vec![0.0], 1, 1)]).unwrap();
        let g = TinyNetParams::from_layers(vec![(vec![2.0], vec![0.0], 1, 1)]).unwrap();
        let mut st = OptimizerState::new(OptimizerKind::Plain, 0.1, 0.0, &p);
        let next = opt_step(&p, &g, &mut st).unwrap();
        assert!((next.layers()[0].weights()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let p = init_net(&[3, 4, 2], 1).unwrap();
        let zero = TinyNetParams::zeros(&[3, 4, 2]).unwrap();
        for kind in [OptimizerKind::Plain, OptimizerKind::Momentum { beta: 0.9 }, OptimizerKind::adam()]
        {
            let mut st = OptimizerState::new(kind, 0.1, 0.0, &p);
            assert_eq!(opt_step(&p, &zero, &mut st).unwrap(), p);
        }
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let p = init_net(&[3, 2], 1).unwrap();
        let g = TinyNetParams::zeros(&[3, 3]).unwrap();
        let mut st = OptimizerState::new(OptimizerKind::Plain, 0.1, 0.0, &p);
        assert!(opt_step(&p, &g, &mut st).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic_probe() {
        // f(w) = w², gradient 2w.
        let mut p = TinyNetParams::from_layers(vec![(vec![1.0], vec![0.0], 1, 1)]).unwrap();
        let mut st = OptimizerState::new(OptimizerKind::adam(), 0.05, 0.0, &p);
        for _ in 0..200 {
            let w = p.layers()[0].weights()[0];
            let g = TinyNetParams::from_layers(vec![(vec![2.0 * w], vec![0.0], 1, 1)]).unwrap();
            p = opt_step(&p, &g, &mut st).unwrap();
        }
        assert!(p.layers()[0].weights()[0].abs() < 1e-2);
    }

    #[test]
    fn plain_descent_decreases_loss_on_overfit_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut p = init_net(&[6, 8, 3], 3).unwrap();
        let b = random_batch(&mut rng, 8, 6);
        let targets: Vec<ProbVector> =
            (0..8).map(|i| ProbVector::one_hot(i % 3, 3).unwrap()).collect();
        let sup = Supervision::Hard { targets: &targets };
        let mut st = OptimizerState::new(OptimizerKind::Plain, 0.01, 0.0, &p);
        let first = loss(&p, &b, sup).unwrap();
        for _ in 0..50 {
            let lg = backward(&p, &b, sup).unwrap();
            p = opt_step(&p, &lg.grads, &mut st).unwrap();
        }
        assert!(loss(&p, &b, sup).unwrap() < first);
    }

    #[test]
    fn hard_soft_cosine_matches_classwise_decomposition() {
        // Single-layer, 2-class net: the logit-gradient of each loss is a
        // mixture of per-class log-likelihood gradients g_c = ∇ log q_c.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = init_net(&[4, 2], 12).unwrap();
        let b = random_batch(&mut rng, 1, 4);
        let soft = random_probs(&mut rng, 2);
        let hard = crate::simplex::label_smooth(1, 0.2, 2).unwrap();
        let gs = flat_grad(&p, &b, Supervision::Soft { targets: &[soft.clone()], tau: 1.0 }).unwrap();
        let gh = flat_grad(&p, &b, Supervision::Hard { targets: &[hard.clone()] }).unwrap();
        let here = crate::simplex::cosine_sim(&gs, &gh).unwrap();

        let x = b.row(0);
        let q = forward(&p, &b).unwrap().probs(1.0).remove(0);
        // ∇_W log q_c = (e_c − q) ⊗ x, ∇_b log q_c = e_c − q.
        let class_grad = |c: usize| -> Vec<f64> {
            let mut out = Vec::new();
            for o in 0..2 {
                let coeff = if o == c { 1.0 } else { 0.0 } - q[o];
                out.extend(x.iter().map(|xi| coeff * xi));
            }
            for o in 0..2 {
                out.push(if o == c { 1.0 } else { 0.0 } - q[o]);
            }
            out
        };
        let mix = |t: &ProbVector| -> Vec<f64> {
            let (g0, g1) = (class_grad(0), class_grad(1));
            g0.iter()
                .zip(&g1)
                .map(|(a, b)| -(t.as_slice()[0] * a + t.as_slice()[1] * b))
                .collect()
        };
        let oracle = crate::simplex::cosine_sim(&mix(&soft), &mix(&hard)).unwrap();
        assert!((here - oracle).abs() < 1e-12, "{here} vs {oracle}");
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = init_net(&[5, 4, 3], 9).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"TNET");
        assert_eq!(TinyNetParams::from_bytes(&bytes).unwrap(), p);
        assert!(matches!(
            TinyNetParams::from_bytes(&bytes[..bytes.len() - 3]),
            Err(LabError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TinyNetParams::from_bytes(&bad), Err(LabError::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(TinyNetParams::from_bytes(&bad), Err(LabError::UnsupportedVersion(9))));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(v in prop::collection::vec(-10.0f64..10.0, 5 * 4 + 4 + 4 * 2 + 2)) {
            let shape = TinyNetParams::zeros(&[5, 4, 2]).unwrap();
            let p = shape.unflatten(&v).unwrap();
            prop_assert_eq!(p.flatten(), v);
        }
    }
}
