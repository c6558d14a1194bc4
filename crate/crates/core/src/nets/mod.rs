//! A small CNN engine with EEGNet, DeepConvNet and ShallowConvNet.
//!
//! Inputs are `(batch, 1, features, samples)` tensors; spatial kernels span
//! the full feature axis, so the same builders serve raw channels, ICA
//! components, harmonic coefficients or scout regions.

mod layers;
mod tensor;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{ActivationKind, Layer, LayerSpec, Padding, Param, BN_EPS, BN_MOMENTUM, LOG_EPS};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::signal::EpochSet;
use layers::Cache;

pub const N_CLASSES: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetName {
    Eegnet,
    DeepConvNet,
    ShallowConvNet,
}

impl NetName {
    pub const ALL: [NetName; 3] = [NetName::Eegnet, NetName::DeepConvNet, NetName::ShallowConvNet];

    /// Short name used on the command line and in result tables.
    pub fn as_str(self) -> &'static str {
        match self {
            NetName::Eegnet => "eegnet",
            NetName::DeepConvNet => "dcnet",
            NetName::ShallowConvNet => "scnet",
        }
    }
}

impl fmt::Display for NetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for NetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eegnet" => Ok(NetName::Eegnet),
            "dcnet" | "deepconvnet" => Ok(NetName::DeepConvNet),
            "scnet" | "shallowconvnet" => Ok(NetName::ShallowConvNet),
            _ => Err(Error::invalid(format!("unknown model {s:?} (eegnet, dcnet, scnet)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub name: NetName,
    /// (features, samples)
    pub input: (usize, usize),
    pub layers: Vec<LayerSpec>,
    pub n_classes: usize,
}

impl NetSpec {
    /// Input shape followed by every layer's output shape.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = vec![[1, self.input.0, self.input.1]];
        for (index, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(*shapes.last().expect("non-empty"))
                .map_err(|msg| Error::Layer { index, kind: layer.kind_name(), msg })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn flatten_size(&self) -> Option<usize> {
        let shapes = self.shapes().ok()?;
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Flatten))
            .map(|i| shapes[i + 1][0])
    }

    fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let n = self.layers.len();
        let ends_ok = n >= 2
            && matches!(self.layers[n - 2], LayerSpec::Dense { units } if units == self.n_classes)
            && matches!(self.layers[n - 1], LayerSpec::Activation { function: ActivationKind::Softmax });
        if !ends_ok {
            return Err(Error::invalid(format!("network must end in dense-{} softmax", self.n_classes)));
        }
        debug_assert_eq!(shapes[n], [self.n_classes, 1, 1]);
        Ok(())
    }
}

/// Architecture for `features` input rows of `samples` time points.
pub fn build(name: NetName, features: usize, samples: usize) -> Result<NetSpec> {
    if features == 0 || samples == 0 {
        return Err(Error::invalid(format!("input shape {features}x{samples} is empty")));
    }
    use ActivationKind::*;
    let act = |function| LayerSpec::Activation { function };
    let dropout = LayerSpec::Dropout { rate: 0.5 };
    let conv = |filters, kernel| LayerSpec::Conv2d { filters, kernel, padding: Padding::Valid };
    let mut layers = match name {
        NetName::Eegnet => vec![
            LayerSpec::Conv2d { filters: 8, kernel: (1, 64), padding: Padding::Same },
            LayerSpec::BatchNorm,
            LayerSpec::DepthwiseConv2d { kernel: (features, 1), depth_multiplier: 2, max_norm: Some(1.0) },
            LayerSpec::BatchNorm,
            act(Elu),
            LayerSpec::AvgPool2d { pool: (1, 4), stride: (1, 4) },
            dropout.clone(),
            LayerSpec::SeparableConv2d { filters: 16, kernel: (1, 16), padding: Padding::Same },
            LayerSpec::BatchNorm,
            act(Elu),
            LayerSpec::AvgPool2d { pool: (1, 8), stride: (1, 8) },
            dropout.clone(),
        ],
        NetName::DeepConvNet => {
            let mut l = vec![conv(25, (1, 5)), conv(25, (features, 1))];
            for (i, filters) in [25, 50, 100, 200].into_iter().enumerate() {
                if i > 0 {
                    l.push(conv(filters, (1, 5)));
                }
                l.extend([
                    LayerSpec::BatchNorm,
                    act(Elu),
                    LayerSpec::MaxPool2d { pool: (1, 2), stride: (1, 2) },
                    dropout.clone(),
                ]);
            }
            l
        }
        NetName::ShallowConvNet => vec![
            conv(40, (1, 13)),
            conv(40, (features, 1)),
            LayerSpec::BatchNorm,
            act(Square),
            LayerSpec::AvgPool2d { pool: (1, 35), stride: (1, 7) },
            act(Log),
            dropout.clone(),
        ],
    };
    layers.extend([LayerSpec::Flatten, LayerSpec::Dense { units: N_CLASSES }, act(Softmax)]);
    let spec = NetSpec { name, input: (features, samples), layers, n_classes: N_CLASSES };
    spec.validate()?;
    Ok(spec)
}

/// Trials with integer labels, laid out for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != x.batch() {
            return Err(Error::Dimension { what: "labels", expected: x.batch(), actual: labels.len() });
        }
        if x.shape()[1] != 1 {
            return Err(Error::invalid("samples must have a single input map"));
        }
        Ok(Self { x, labels })
    }

    pub fn from_epochs(epochs: &EpochSet) -> Self {
        let (n, c, t) = epochs.data().dim();
        let data: Vec<f64> = epochs.data().iter().copied().collect();
        Self {
            x: Tensor::from_vec([n, 1, c, t], data).expect("consistent shape"),
            labels: epochs.labels().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { x: self.x.gather(idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-layer, per-parameter gradient vectors.
pub type Gradients = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetSpec,
    layers: Vec<Layer>,
    caches: Option<(Vec<Cache>, Tensor)>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

impl Network {
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(index, l)| {
                Layer::new(l.clone(), shapes[index], &mut rng)
                    .map_err(|msg| Error::Layer { index, kind: l.kind_name(), msg })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, layers, caches: None })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn trainable_parameters(&self) -> usize {
        self.layers.iter().map(Layer::trainable_count).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        let (f, t) = self.spec.input;
        if c != 1 || h != f || w != t {
            return Err(Error::invalid(format!("batch shape 1x{h}x{w} (maps {c}) does not match network input 1x{f}x{t}")));
        }
        Ok(())
    }

    fn check_finite(index: usize, layer: &Layer, y: &Tensor) -> Result<()> {
        if y.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Layer { index, kind: layer.spec.kind_name(), msg: "non-finite activation".into() });
        }
        Ok(())
    }

    /// Class probabilities. In training mode dropout is active, batch statistics
    /// are used and folded into the running estimates, and the pass is kept for
    /// [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if mode == Mode::Infer {
            self.caches = None;
            return self.predict(x);
        }
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (index, layer) in self.layers.iter_mut().enumerate() {
            let (y, cache) = layer.forward(&cur, true, rng);
            Self::check_finite(index, layer, &y)?;
            layer.commit(&cache);
            caches.push(cache);
            cur = y;
        }
        self.caches = Some((caches, cur.clone()));
        Ok(cur)
    }

    /// Inference-mode probabilities; batch composition does not affect any row.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cur = x.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            let (y, _) = layer.forward(&cur, false, &mut rng);
            Self::check_finite(index, layer, &y)?;
            cur = y;
        }
        Ok(cur)
    }

    /// Mean cross-entropy gradients for the labels of the last training pass.
    pub fn backward(&mut self, labels: &[usize]) -> Result<Gradients> {
        let (_, probs) = self
            .caches
            .as_ref()
            .ok_or_else(|| Error::invalid("backward called without a training forward pass"))?;
        let n = probs.batch();
        if labels.len() != n {
            return Err(Error::Dimension { what: "labels", expected: n, actual: labels.len() });
        }
        let k = self.spec.n_classes;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} outside {k} classes")));
        }
        // softmax and cross-entropy combine to (p - y) / n at the logits
        let mut dlogits = probs.clone();
        for (i, &l) in labels.iter().enumerate() {
            dlogits.data_mut()[i * k + l] -= 1.0;
        }
        dlogits.data_mut().iter_mut().for_each(|v| *v /= n as f64);
        let last = self.layers.len() - 1;
        self.backward_from(last, dlogits)
    }

    /// Backpropagate `dy`, the gradient at the output of layer `top`.
    fn backward_from(&mut self, top: usize, dy: Tensor) -> Result<Gradients> {
        let (caches, _) = self
            .caches
            .take()
            .ok_or_else(|| Error::invalid("backward called without a training forward pass"))?;
        let mut grads: Gradients = self
            .layers
            .iter()
            .map(|l| l.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
            .collect();
        let mut cur = dy;
        for index in (0..top).rev() {
            match self.layers[index].backward(&caches[index], &cur, &mut grads[index], index > 0) {
                Some(dx) => cur = dx,
                None => break,
            }
        }
        Ok(grads)
    }

    pub fn apply_constraints(&mut self) {
        self.layers.iter_mut().for_each(Layer::apply_constraints);
    }

    /// Predicted classes in chunks; ties go to the lowest class index.
    pub fn classify(&self, x: &Tensor) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        const CHUNK: usize = 256;
        let n = x.batch();
        let mut classes = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let p = self.predict(&x.gather(&idx))?;
            for row in p.data().chunks(self.spec.n_classes) {
                classes.push(argmax(row));
                probs.push(row.to_vec());
            }
        }
        Ok((classes, probs))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(f64::MIN_POSITIVE).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 500,
            patience: 20,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.max_epochs > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNet {
    pub network: Network,
    pub log: Vec<EpochLog>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(net: &Network) -> Self {
        let zeros: Gradients = net
            .layers
            .iter()
            .map(|l| l.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
            .collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, net: &mut Network, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let lr = cfg.learning_rate * (1.0 - cfg.beta2.powi(self.t)).sqrt() / (1.0 - cfg.beta1.powi(self.t));
        for (li, layer) in net.layers.iter_mut().enumerate() {
            for (pi, param) in layer.params.iter_mut().enumerate() {
                if !param.trainable {
                    continue;
                }
                let (m, v, g) = (&mut self.m[li][pi], &mut self.v[li][pi], &grads[li][pi]);
                for i in 0..param.value.len() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    param.value[i] -= lr * m[i] / (v[i].sqrt() + cfg.epsilon);
                }
            }
        }
    }
}

/// Mini-batch Adam with early stopping on validation accuracy. The weights of
/// the best validation epoch are returned.
pub fn train(spec: &NetSpec, train_set: &Samples, val_set: &Samples, cfg: &TrainConfig) -> Result<TrainedNet> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut net = Network::new(spec.clone(), cfg.seed)?;
    net.check_input(&train_set.x)?;
    net.check_input(&val_set.x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
    let mut adam = Adam::new(&net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, net.layers.clone());
    let mut wait = 0usize;
    let k = spec.n_classes;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.subset(chunk);
            let probs = net
                .forward(&batch.x, Mode::Train, &mut rng)
                .map_err(|e| Error::TrainingAborted { epoch, msg: e.to_string() })?;
            for (row, &l) in probs.data().chunks(k).zip(&batch.labels) {
                loss_sum += cross_entropy(row, l);
                correct += usize::from(argmax(row) == l);
            }
            if !loss_sum.is_finite() {
                return Err(Error::TrainingAborted { epoch, msg: format!("loss became {loss_sum}") });
            }
            let grads = net.backward(&batch.labels)?;
            if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
                return Err(Error::TrainingAborted { epoch, msg: "non-finite gradient".into() });
            }
            adam.step(&mut net, &grads, cfg);
            net.apply_constraints();
        }
        let (val_loss, val_accuracy) = score(&net, val_set).map_err(|e| Error::TrainingAborted { epoch, msg: e.to_string() })?;
        let n = train_set.len() as f64;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        });
        if val_accuracy > best.0 {
            best = (val_accuracy, epoch, net.layers.clone());
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }
    net.layers = best.2;
    Ok(TrainedNet { network: net, log, best_epoch: best.1 })
}

fn score(net: &Network, set: &Samples) -> Result<(f64, f64)> {
    let (classes, probs) = net.classify(&set.x)?;
    let n = set.len() as f64;
    let loss = probs.iter().zip(&set.labels).map(|(p, &l)| cross_entropy(p, l)).sum::<f64>() / n;
    let acc = classes.iter().zip(&set.labels).filter(|(a, b)| a == b).count() as f64 / n;
    Ok((loss, acc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

pub fn evaluate(net: &Network, test_set: &Samples) -> Result<Evaluation> {
    let (predictions, _) = net.classify(&test_set.x)?;
    let k = net.spec.n_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &l) in predictions.iter().zip(&test_set.labels) {
        if l >= k {
            return Err(Error::invalid(format!("label {l} outside {k} classes")));
        }
        confusion[l][p] += 1;
    }
    let correct = predictions.iter().zip(&test_set.labels).filter(|(a, b)| a == b).count();
    let accuracy = if test_set.is_empty() { 0.0 } else { correct as f64 / test_set.len() as f64 };
    Ok(Evaluation { accuracy, confusion, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn flatten_size_oracles() {
        assert_eq!(build(NetName::Eegnet, 31, 1500).unwrap().flatten_size(), Some(736));
        assert_eq!(build(NetName::DeepConvNet, 31, 1500).unwrap().flatten_size(), Some(18000));
        assert_eq!(build(NetName::ShallowConvNet, 31, 1500).unwrap().flatten_size(), Some(8320));
    }

    #[test]
    fn short_input_names_failing_layer() {
        match build(NetName::ShallowConvNet, 31, 40) {
            Err(Error::Layer { index, kind, .. }) => {
                assert_eq!(index, 4);
                assert_eq!(kind, "avgpool2d");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eegnet_has_fewest_parameters() {
        let count = |n| Network::new(build(n, 31, 1500).unwrap(), 0).unwrap().trainable_parameters();
        let (e, d, s) = (count(NetName::Eegnet), count(NetName::DeepConvNet), count(NetName::ShallowConvNet));
        assert!(e < d && e < s, "{e} {d} {s}");
    }

    fn random_batch(n: usize, f: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([n, 1, f, t], (0..n * f * t).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one_and_inference_is_batch_independent() {
        for name in NetName::ALL {
            let t = if name == NetName::Eegnet { 64 } else { 120 };
            let net = Network::new(build(name, 4, t).unwrap(), 1).unwrap();
            let x = random_batch(3, 4, t, 2);
            let p = net.predict(&x).unwrap();
            for row in p.data().chunks(N_CLASSES) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let single = net.predict(&x.gather(&[1])).unwrap();
            let dup = net.predict(&x.gather(&[1, 1])).unwrap();
            assert_eq!(&p.data()[N_CLASSES..2 * N_CLASSES], single.data());
            assert_eq!(&dup.data()[..N_CLASSES], &dup.data()[N_CLASSES..]);
        }
    }

    #[test]
    fn zero_input_gives_uniform_probabilities() {
        let mut net = Network::new(build(NetName::Eegnet, 3, 32).unwrap(), 0).unwrap();
        for l in net.layers_mut() {
            if let LayerSpec::Dense { .. } = l.spec {
                l.params[0].value.fill(0.0);
            }
        }
        let p = net.predict(&Tensor::zeros([2, 1, 3, 32])).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 26.0).abs() < 1e-12);
        }
        assert!((cross_entropy(&p.data()[..26], 7) - 26f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = Network::new(build(NetName::Eegnet, 2, 32).unwrap(), 0).unwrap();
        assert!(net.backward(&[0]).is_err());
    }

    #[test]
    fn dense_softmax_gradient_is_closed_form() {
        let spec = NetSpec {
            name: NetName::Eegnet,
            input: (1, 3),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 },
                LayerSpec::Activation { function: ActivationKind::Softmax },
            ],
            n_classes: 2,
        };
        let mut net = Network::new(spec, 4).unwrap();
        let x = Tensor::from_vec([2, 1, 1, 3], vec![1.0, -2.0, 0.5, 0.3, 0.1, -1.0]).unwrap();
        let labels = [0usize, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = net.forward(&x, Mode::Train, &mut rng).unwrap();
        let g = net.backward(&labels).unwrap();
        for u in 0..2 {
            for d in 0..3 {
                let expected: f64 = (0..2)
                    .map(|n| (p.data()[n * 2 + u] - f64::from(u8::from(labels[n] == u))) * x.data()[n * 3 + d])
                    .sum::<f64>()
                    / 2.0;
                assert!((g[1][0][u * 3 + d] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        // dropout-free shallow chain exercising conv, batchnorm, square, pool, log, dense
        let spec = NetSpec {
            name: NetName::ShallowConvNet,
            input: (3, 12),
            layers: vec![
                LayerSpec::Conv2d { filters: 2, kernel: (1, 3), padding: Padding::Valid },
                LayerSpec::Conv2d { filters: 2, kernel: (3, 1), padding: Padding::Valid },
                LayerSpec::BatchNorm,
                LayerSpec::Activation { function: ActivationKind::Square },
                LayerSpec::AvgPool2d { pool: (1, 4), stride: (1, 2) },
                LayerSpec::Activation { function: ActivationKind::Log },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
                LayerSpec::Activation { function: ActivationKind::Softmax },
            ],
            n_classes: 3,
        };
        let mut net = Network::new(spec, 5).unwrap();
        let x = random_batch(4, 3, 12, 6);
        let labels = [0usize, 2, 1, 2];
        let loss = |net: &Network| {
            let mut n2 = net.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = n2.forward(&x, Mode::Train, &mut rng).unwrap();
            p.data().chunks(3).zip(&labels).map(|(r, &l)| cross_entropy(r, l)).sum::<f64>() / 4.0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net.forward(&x, Mode::Train, &mut rng).unwrap();
        let g = net.backward(&labels).unwrap();
        let h = 1e-6;
        for li in 0..net.layers.len() {
            for pi in 0..net.layers[li].params.len() {
                if !net.layers[li].params[pi].trainable {
                    continue;
                }
                for i in 0..net.layers[li].params[pi].value.len() {
                    let mut a = net.clone();
                    a.layers[li].params[pi].value[i] += h;
                    let mut b = net.clone();
                    b.layers[li].params[pi].value[i] -= h;
                    let num = (loss(&a) - loss(&b)) / (2.0 * h);
                    let ana = g[li][pi][i];
                    let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-4);
                    assert!(rel < 1e-4, "layer {li} param {pi}[{i}]: {ana} vs {num}");
                }
            }
        }
    }

    /// 26 classes, each a distinct one-hot spatial-temporal pattern plus noise.
    fn toy_set(per_class: usize, seed: u64) -> Samples {
        let (f, t) = (2, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = per_class * N_CLASSES;
        let mut data = vec![0.0; n * f * t];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % N_CLASSES;
            labels.push(c);
            for ch in 0..f {
                for s in 0..t {
                    let freq = 1.0 + (c % 13) as f64;
                    let phase = if c < 13 { 0.0 } else { std::f64::consts::FRAC_PI_2 };
                    let sign = if ch == 0 { 1.0 } else { -1.0 };
                    data[(i * f + ch) * t + s] = sign * (2.0 * std::f64::consts::PI * freq * s as f64 / t as f64 + phase).sin()
                        + 0.05 * rng.gen_range(-1.0..1.0);
                }
            }
        }
        Samples::new(Tensor::from_vec([n, 1, f, t], data).unwrap(), labels).unwrap()
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let set = toy_set(3, 1).subset(&(0..64).collect::<Vec<_>>());
        let spec = build(NetName::Eegnet, 2, 32).unwrap();
        let cfg = TrainConfig { batch_size: 16, max_epochs: 200, patience: 200, seed: 3, learning_rate: 1e-2, ..Default::default() };
        let trained = train(&spec, &set, &set, &cfg).unwrap();
        let eval = evaluate(&trained.network, &set).unwrap();
        assert_eq!(eval.accuracy, 1.0, "best epoch {}", trained.best_epoch);
    }

    #[test]
    fn patience_zero_stops_after_first_non_improving_epoch() {
        let set = toy_set(1, 2);
        let spec = build(NetName::Eegnet, 2, 32).unwrap();
        let cfg = TrainConfig { batch_size: 13, max_epochs: 50, patience: 0, seed: 1, ..Default::default() };
        let trained = train(&spec, &set, &set, &cfg).unwrap();
        let log = &trained.log;
        let last = log.len() - 1;
        let best_before = log[..last].iter().map(|e| e.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
        assert!(log.len() == 50 || log[last].val_accuracy <= best_before);
        for i in 1..last {
            let prior = log[..i].iter().map(|e| e.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
            assert!(log[i].val_accuracy > prior, "epoch {i} did not improve but training continued");
        }
    }

    #[test]
    fn training_is_deterministic_and_respects_max_norm() {
        let set = toy_set(1, 3);
        let spec = build(NetName::Eegnet, 2, 32).unwrap();
        let cfg = TrainConfig { batch_size: 8, max_epochs: 3, patience: 5, seed: 9, ..Default::default() };
        let a = train(&spec, &set, &set, &cfg).unwrap();
        let b = train(&spec, &set, &set, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.network, b.network);
        for l in a.network.layers() {
            if let Some(n) = l.max_filter_norm() {
                assert!(n <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn evaluation_of_perfect_predictions() {
        let spec = NetSpec {
            name: NetName::Eegnet,
            input: (1, 26),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 26 },
                LayerSpec::Activation { function: ActivationKind::Softmax },
            ],
            n_classes: 26,
        };
        let mut net = Network::new(spec, 0).unwrap();
        let w = &mut net.layers_mut()[1].params[0].value;
        w.fill(0.0);
        for i in 0..26 {
            w[i * 26 + i] = 10.0;
        }
        let mut x = vec![0.0; 26 * 26];
        for i in 0..26 {
            x[i * 26 + i] = 1.0;
        }
        let set = Samples::new(Tensor::from_vec([26, 1, 1, 26], x).unwrap(), (0..26).collect()).unwrap();
        let e = evaluate(&net, &set).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.confusion.iter().flatten().sum::<usize>(), 26);
        for i in 0..26 {
            assert_eq!(e.confusion[i][i], 1);
        }
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
