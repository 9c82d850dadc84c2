use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::layers::{Layer, LayerSpec, Param};
use super::loss;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// A sequential stack of layers with its own dropout RNG.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Checks that `specs` compose starting from `input_shape` and returns the
/// per-sample output shape of every layer.
pub fn infer_shapes(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shape = input_shape.to_vec();
    let mut out = Vec::with_capacity(specs.len());
    for (layer, spec) in specs.iter().enumerate() {
        shape = spec.output_shape(&shape).map_err(|msg| Error::Shape { layer, msg })?;
        out.push(shape.clone());
    }
    Ok(out)
}

impl<T: Scalar> Network<T> {
    pub fn new(input_shape: Vec<usize>, specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        infer_shapes(&input_shape, &specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs.into_iter().map(|s| Layer::init(s, &mut rng)).collect();
        Ok(Self { input_shape, layers, mode: Mode::Train, rng })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        infer_shapes(&self.input_shape, &self.specs())
            .expect("validated at construction")
            .pop()
            .unwrap_or_else(|| self.input_shape.clone())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if mode == Mode::Eval {
            self.layers.iter_mut().for_each(Layer::clear_cache);
        }
    }

    /// Re-seeds the dropout RNG.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() < 2 || x.item_shape() != self.input_shape.as_slice() || x.batch() == 0 {
            return Err(Error::Shape {
                layer: 0,
                msg: format!("network expects [B, {:?}], got {:?}", self.input_shape, x.shape()),
            });
        }
        Ok(())
    }

    /// Forward pass in the network's current mode. Training mode caches
    /// activations for [`Self::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let train = self.mode == Mode::Train;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, train, &mut self.rng);
        }
        Ok(h)
    }

    /// Forward pass through layers `0..end` in training mode.
    pub(crate) fn forward_prefix(&mut self, x: &Tensor<T>, end: usize) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers[..end] {
            h = layer.forward(&h, true, &mut self.rng);
        }
        Ok(h)
    }

    /// Evaluation-mode forward pass: dropout is the identity and batch norm
    /// uses running statistics. Never mutates the network.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h);
        }
        Ok(h)
    }

    /// Back-propagates from the output, stopping below the first layer that
    /// holds a trainable parameter.
    pub fn backward(&mut self, grad_out: &Tensor<T>) {
        let top = self.layers.len();
        self.backward_through(grad_out, top, false);
    }

    /// Back-propagates through every layer and returns the input gradient.
    pub fn backward_to_input(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let top = self.layers.len();
        self.backward_through(grad_out, top, true).expect("input gradient requested")
    }

    /// Back-propagates `grad` entering layer `top - 1`.
    pub(crate) fn backward_through(&mut self, grad: &Tensor<T>, top: usize, to_input: bool) -> Option<Tensor<T>> {
        let stop = if to_input {
            0
        } else {
            match self.layers[..top].iter().position(Layer::any_trainable) {
                Some(first) => first,
                None => return None,
            }
        };
        let mut g = grad.clone();
        for i in (stop..top).rev() {
            let need = i > stop || to_input;
            match self.layers[i].backward(&g, need) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    /// `(name, param)` pairs, names formatted as `<layer index>.<kind>`.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params.iter().map(move |p| (format!("{i}.{}", p.kind.as_str()), p)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn parameterized_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.spec.is_parameterized()).count()
    }

    /// Freezes the first `frozen_prefix` parameterized layers and makes every
    /// other parameter trainable.
    pub fn set_trainable(&mut self, frozen_prefix: usize) -> Result<()> {
        let available = self.parameterized_layers();
        if frozen_prefix > available {
            return Err(Error::FrozenPrefixOutOfRange { requested: frozen_prefix, available });
        }
        let mut seen = 0;
        for layer in &mut self.layers {
            if !layer.spec.is_parameterized() {
                continue;
            }
            let trainable = seen >= frozen_prefix;
            layer.params.iter_mut().for_each(|p| p.trainable = trainable);
            seen += 1;
        }
        Ok(())
    }

    /// Splits into the layers before `at` and the rest. The second half takes
    /// the intermediate shape as its input shape.
    pub fn split_at(mut self, at: usize) -> (Self, Self) {
        let shapes = infer_shapes(&self.input_shape, &self.specs()).expect("validated");
        let mid = if at == 0 { self.input_shape.clone() } else { shapes[at - 1].clone() };
        let tail = self.layers.split_off(at);
        let second = Self { input_shape: mid, layers: tail, mode: self.mode, rng: self.rng.clone() };
        (self, second)
    }

    /// Concatenates two networks whose shapes line up.
    pub fn chain(first: Self, second: Self) -> Result<Self> {
        let out = first.output_shape();
        if out != second.input_shape {
            return Err(Error::Shape {
                layer: first.layers.len(),
                msg: format!("cannot chain output {out:?} into input {:?}", second.input_shape),
            });
        }
        let mut layers = first.layers;
        layers.extend(second.layers);
        Ok(Self { input_shape: first.input_shape, layers, mode: first.mode, rng: first.rng })
    }
}

/// Supervision for one batch; the variant selects the loss.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    /// Class indices, trained with cross-entropy on softmax outputs.
    Labels(Vec<usize>),
    /// Target images, trained with mean squared error.
    Images(Tensor<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub targets: Targets<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One optimisation step: forward, loss, backward and an Adam update of the
/// trainable parameters. Returns the batch loss.
pub fn train_step<T: Scalar>(net: &mut Network<T>, adam: &mut AdamState<T>, batch: &Batch<T>) -> Result<f64> {
    if net.mode() != Mode::Train {
        return Err(Error::InvalidConfig("train_step needs a network in TRAIN mode".into()));
    }
    net.zero_grad();
    let loss = match &batch.targets {
        Targets::Labels(labels) => {
            let last = net.layers.len().checked_sub(1);
            if last.map(|i| &net.layers[i].spec) != Some(&LayerSpec::SoftmaxClassifier) {
                return Err(Error::InvalidConfig("cross-entropy needs a softmax output layer".into()));
            }
            let last = last.expect("checked");
            if labels.len() != batch.inputs.batch() {
                return Err(Error::LengthMismatch(labels.len(), batch.inputs.batch()));
            }
            // Softmax and cross-entropy are differentiated jointly: (p - y) / B.
            let logits = net.forward_prefix(&batch.inputs, last)?;
            let probs = net.layers[last].infer(&logits);
            let loss = loss::loss_ce(&probs, labels);
            check_finite(loss, adam.t())?;
            let grad = loss::ce_logit_grad(&probs, labels);
            net.backward_through(&grad, last, false);
            loss
        }
        Targets::Images(target) => {
            let out = net.forward(&batch.inputs)?;
            if out.shape() != target.shape() {
                return Err(Error::Shape {
                    layer: net.layers.len() - 1,
                    msg: format!("output {:?} vs target {:?}", out.shape(), target.shape()),
                });
            }
            let loss = loss::loss_l2(&out, target);
            check_finite(loss, adam.t())?;
            net.backward(&loss::l2_grad(&out, target));
            loss
        }
    };
    adam.step(net);
    Ok(loss)
}

fn check_finite(loss: f64, t: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step: t + 1 })
    }
}
