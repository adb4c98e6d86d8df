//! Dense feed-forward network engine.
//!
//! A [`Network`] is an ordered list of dense layers followed by a probability
//! head. The last dense layer produces logits and must use the identity
//! nonlinearity; every earlier layer is a hidden layer whose output can be
//! captured as an [`ActivationVector`]. Hidden layer `l` is addressed by the
//! index `l` in `0..n_hidden()`.
//!
//! Layer weights are stored row-major as `(out_dim, in_dim)`. Batched inputs are
//! `(rows, dim)` matrices, one sample per row.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::streams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Identity,
}

impl Nonlinearity {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Nonlinearity::Relu => z.max(T::zero()),
            Nonlinearity::Identity => z,
        }
    }

    #[inline]
    fn derivative<T: Real>(self, z: T) -> T {
        match self {
            Nonlinearity::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Nonlinearity::Identity => T::one(),
        }
    }
}

/// Probability head applied to the logits.
///
/// `Sigmoid` is a binary head over a single logit `z`: class 1 has probability
/// `σ(z)` and class 0 has `1 − σ(z)`. `Softmax` spreads over as many classes as
/// the output layer has rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub nonlinearity: Nonlinearity,
}

impl<T: Real> DenseLayer<T> {
    pub fn new(weights: Array2<T>, bias: Array1<T>, nonlinearity: Nonlinearity) -> Result<Self> {
        if bias.len() != weights.nrows() {
            return Err(Error::dim("layer bias", weights.nrows(), bias.len()));
        }
        Ok(Self {
            weights,
            bias,
            nonlinearity,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn preactivate(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut z = x.dot(&self.weights.t());
        z += &self.bias;
        z
    }
}

/// Activation of one hidden layer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector<T> {
    pub layer: usize,
    pub values: Array1<T>,
}

impl<T: Real> ActivationVector<T> {
    pub fn new(layer: usize, values: Array1<T>) -> Self {
        Self { layer, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Output of [`Network::forward_capture`].
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub activations: Vec<ActivationVector<T>>,
    pub probabilities: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<DenseLayer<T>>,
    head: Head,
    dropout_rate: f64,
    training_seed: Option<u64>,
}

/// Pre- and post-nonlinearity values for a contiguous run of layers.
struct Tape<T> {
    first: usize,
    pre: Vec<Array2<T>>,
    post: Vec<Array2<T>>,
}

impl<T: Real> Network<T> {
    pub fn new(layers: Vec<DenseLayer<T>>, head: Head, dropout_rate: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::dim("adjacent layer dimensions", pair[0].out_dim(), pair[1].in_dim()));
            }
        }
        let out = layers.last().expect("non-empty");
        if out.nonlinearity != Nonlinearity::Identity {
            return Err(Error::InvalidArgument("output layer must produce raw logits (identity)".into()));
        }
        match head {
            Head::Sigmoid if out.out_dim() != 1 => return Err(Error::dim("sigmoid head logits", 1, out.out_dim())),
            Head::Softmax if out.out_dim() < 2 => return Err(Error::InvalidArgument("softmax head needs at least two logits".into())),
            _ => {}
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {dropout_rate} not in [0, 1)")));
        }
        Ok(Self {
            layers,
            head,
            dropout_rate,
            training_seed: None,
        })
    }

    /// Randomly initialised network with ReLU hidden layers.
    ///
    /// Hidden layers use He-uniform weights, the output layer Glorot-uniform;
    /// biases start at zero.
    pub fn init(input_dim: usize, hidden: &[usize], head: Head, n_classes: usize, dropout_rate: f64, seed: u64) -> Result<Self> {
        let out_dim = match head {
            Head::Sigmoid => {
                if n_classes != 2 {
                    return Err(Error::InvalidArgument("sigmoid head is binary".into()));
                }
                1
            }
            Head::Softmax => n_classes,
        };
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let is_output = l + 1 == n;
            let limit = if is_output {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let mut rng = streams::stream(seed, "init", l as u64);
            let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || T::lit(rng.random_range(-limit..limit)));
            let nonlinearity = if is_output { Nonlinearity::Identity } else { Nonlinearity::Relu };
            layers.push(DenseLayer::new(weights, Array1::zeros(fan_out), nonlinearity)?);
        }
        let mut net = Self::new(layers, head, dropout_rate)?;
        net.training_seed = Some(seed);
        Ok(net)
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn training_seed(&self) -> Option<u64> {
        self.training_seed
    }

    pub fn set_training_seed(&mut self, seed: Option<u64>) {
        self.training_seed = seed;
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Number of hidden layers whose activations can be captured.
    pub fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer_width(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(self.layers[layer].out_dim())
    }

    pub fn n_classes(&self) -> usize {
        match self.head {
            Head::Sigmoid => 2,
            Head::Softmax => self.output_layer().out_dim(),
        }
    }

    /// The logit-producing layer.
    pub fn output_layer(&self) -> &DenseLayer<T> {
        self.layers.last().expect("non-empty")
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_hidden() {
            return Err(Error::InvalidArgument(format!(
                "layer index {layer} out of range (network has {} hidden layers)",
                self.n_hidden()
            )));
        }
        Ok(())
    }

    fn check_class(&self, k: usize) -> Result<()> {
        if k >= self.n_classes() {
            return Err(Error::InvalidArgument(format!(
                "class {k} out of range (head has {} classes)",
                self.n_classes()
            )));
        }
        Ok(())
    }

    /// Row-wise class probabilities from logits.
    pub fn probabilities_from_logits(&self, logits: ArrayView2<T>) -> Array2<T> {
        match self.head {
            Head::Sigmoid => {
                let mut out = Array2::zeros((logits.nrows(), 2));
                for (mut row, z) in out.rows_mut().into_iter().zip(logits.column(0)) {
                    let p = z.sigmoid();
                    row[0] = T::one() - p;
                    row[1] = p;
                }
                out
            }
            Head::Softmax => {
                let mut out = logits.to_owned();
                for mut row in out.rows_mut() {
                    let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
                out
            }
        }
    }

    /// Row-wise derivative of class-`k` probability with respect to the logits.
    fn logit_gradient(&self, k: usize, logits: ArrayView2<T>) -> Array2<T> {
        let probs = self.probabilities_from_logits(logits);
        match self.head {
            Head::Sigmoid => {
                let sign = if k == 1 { T::one() } else { -T::one() };
                let mut g = Array2::zeros((logits.nrows(), 1));
                for (gi, p) in g.column_mut(0).iter_mut().zip(probs.column(1)) {
                    *gi = sign * *p * (T::one() - *p);
                }
                g
            }
            Head::Softmax => {
                let mut g = Array2::zeros(probs.raw_dim());
                for (mut grow, prow) in g.rows_mut().into_iter().zip(probs.rows()) {
                    let pk = prow[k];
                    for (j, gj) in grow.iter_mut().enumerate() {
                        let delta = if j == k { T::one() } else { T::zero() };
                        *gj = pk * (delta - prow[j]);
                    }
                }
                g
            }
        }
    }

    /// Runs layers `first..` on inputs to layer `first`, without dropout.
    fn tape(&self, first: usize, input: ArrayView2<T>) -> Tape<T> {
        let mut pre = Vec::with_capacity(self.layers.len() - first);
        let mut post: Vec<Array2<T>> = Vec::with_capacity(self.layers.len() - first);
        for (i, layer) in self.layers[first..].iter().enumerate() {
            let z = if i == 0 {
                layer.preactivate(input)
            } else {
                layer.preactivate(post[i - 1].view())
            };
            let a = z.mapv(|v| layer.nonlinearity.apply(v));
            pre.push(z);
            post.push(a);
        }
        Tape { first, pre, post }
    }

    /// Same as [`Self::tape`] but starting from the pre-activation of layer `first`.
    fn tape_from_preactivation(&self, first: usize, z_first: Array2<T>) -> Tape<T> {
        let nl = self.layers[first].nonlinearity;
        let a_first = z_first.mapv(|v| nl.apply(v));
        let mut tape = if first + 1 < self.layers.len() {
            self.tape(first + 1, a_first.view())
        } else {
            Tape {
                first: first + 1,
                pre: Vec::new(),
                post: Vec::new(),
            }
        };
        tape.first = first;
        tape.pre.insert(0, z_first);
        tape.post.insert(0, a_first);
        tape
    }

    fn logits_of(tape: &Tape<T>) -> ArrayView2<'_, T> {
        tape.post.last().expect("tape covers the output layer").view()
    }

    /// Gradient of class-`k` probability with respect to the pre-activation of
    /// layer `tape.first`, one row per input row.
    fn backprop_preactivation(&self, k: usize, tape: &Tape<T>) -> Array2<T> {
        let delta = self.logit_gradient(k, Self::logits_of(tape));
        self.backprop_delta(delta, tape)
    }

    /// Pulls a gradient with respect to the logits back to the pre-activation
    /// of layer `tape.first`.
    fn backprop_delta(&self, mut delta: Array2<T>, tape: &Tape<T>) -> Array2<T> {
        let last = self.layers.len() - 1;
        for l in (tape.first..=last).rev() {
            let i = l - tape.first;
            let layer = &self.layers[l];
            if l != last {
                Zip::from(&mut delta)
                    .and(&tape.pre[i])
                    .for_each(|d, &z| *d *= layer.nonlinearity.derivative(z));
            }
            if l > tape.first {
                delta = delta.dot(&layer.weights);
            }
        }
        delta
    }

    /// Full forward pass of one sample, capturing every hidden activation.
    pub fn forward_capture(&self, x: &[T]) -> Result<Forward<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.len()));
        }
        let input = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        let tape = self.tape(0, input);
        let activations = tape.post[..self.n_hidden()]
            .iter()
            .enumerate()
            .map(|(l, a)| ActivationVector::new(l, a.row(0).to_owned()))
            .collect();
        let probabilities = self.probabilities_from_logits(Self::logits_of(&tape)).row(0).to_owned();
        Ok(Forward {
            activations,
            probabilities,
        })
    }

    /// Class probabilities for a batch of inputs.
    pub fn predict_proba(&self, xs: ArrayView2<T>) -> Result<Array2<T>> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), xs.ncols()));
        }
        let tape = self.tape(0, xs);
        Ok(self.probabilities_from_logits(Self::logits_of(&tape)))
    }

    /// All hidden activations and class probabilities for a batch.
    pub fn capture_batch(&self, xs: ArrayView2<T>) -> Result<(Vec<Array2<T>>, Array2<T>)> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), xs.ncols()));
        }
        let mut tape = self.tape(0, xs);
        let probs = self.probabilities_from_logits(Self::logits_of(&tape));
        tape.post.truncate(self.n_hidden());
        Ok((tape.post, probs))
    }

    /// Class probabilities as a function of the activation at `layer`.
    pub fn head_from_layer(&self, layer: usize, a: &ActivationVector<T>) -> Result<Array1<T>> {
        if a.layer != layer {
            return Err(Error::InvalidArgument(format!(
                "activation belongs to layer {}, requested layer {layer}",
                a.layer
            )));
        }
        let rows = a.values.view().insert_axis(Axis(0));
        Ok(self.head_from_layer_batch(layer, rows)?.row(0).to_owned())
    }

    pub fn head_from_layer_batch(&self, layer: usize, a: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_layer(layer)?;
        let width = self.layers[layer].out_dim();
        if a.ncols() != width {
            return Err(Error::dim("activation", width, a.ncols()));
        }
        let tape = self.tape(layer + 1, a);
        Ok(self.probabilities_from_logits(Self::logits_of(&tape)))
    }

    /// Raw logits (before the head) as a function of the activation at `layer`.
    pub fn logits_from_layer_batch(&self, layer: usize, a: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_layer(layer)?;
        let width = self.layers[layer].out_dim();
        if a.ncols() != width {
            return Err(Error::dim("activation", width, a.ncols()));
        }
        let tape = self.tape(layer + 1, a);
        Ok(Self::logits_of(&tape).to_owned())
    }

    /// Jacobian of the logits with respect to the activation at `layer`, one
    /// row per logit.
    pub fn logit_jacobian_wrt_activation(&self, layer: usize, a: ArrayView1<T>) -> Result<Array2<T>> {
        self.check_layer(layer)?;
        let width = self.layers[layer].out_dim();
        if a.len() != width {
            return Err(Error::dim("activation", width, a.len()));
        }
        let n_logits = self.output_layer().out_dim();
        let rows = a
            .insert_axis(Axis(0))
            .broadcast((n_logits, width))
            .expect("broadcast one row")
            .to_owned();
        let tape = self.tape(layer + 1, rows.view());
        let delta = self.backprop_delta(Array2::eye(n_logits), &tape);
        Ok(delta.dot(&self.layers[layer + 1].weights))
    }

    /// Exact gradient of `h_k` with respect to the activation at `layer`.
    pub fn grad_head_wrt_activation(&self, k: usize, layer: usize, a: &ActivationVector<T>) -> Result<Array1<T>> {
        if a.layer != layer {
            return Err(Error::InvalidArgument(format!(
                "activation belongs to layer {}, requested layer {layer}",
                a.layer
            )));
        }
        let rows = a.values.view().insert_axis(Axis(0));
        Ok(self.grad_head_wrt_activation_batch(k, layer, rows)?.row(0).to_owned())
    }

    /// Row-wise gradients of `h_k` at each row of `a` (activations at `layer`).
    pub fn grad_head_wrt_activation_batch(&self, k: usize, layer: usize, a: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_class(k)?;
        self.check_layer(layer)?;
        let width = self.layers[layer].out_dim();
        if a.ncols() != width {
            return Err(Error::dim("activation", width, a.ncols()));
        }
        let tape = self.tape(layer + 1, a);
        let delta = self.backprop_preactivation(k, &tape);
        Ok(delta.dot(&self.layers[layer + 1].weights))
    }

    /// Gradient of `h_k` with respect to the network input.
    pub fn grad_head_wrt_input(&self, k: usize, x: &[T]) -> Result<Array1<T>> {
        self.check_class(k)?;
        if x.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.len()));
        }
        let input = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        let tape = self.tape(0, input);
        let delta = self.backprop_preactivation(k, &tape);
        Ok(delta.dot(&self.layers[0].weights).row(0).to_owned())
    }

    /// Mean input-gradient of `h_k` over the points `x' + α (x − x')`.
    ///
    /// The first layer is affine, so its pre-activation along the straight
    /// path is the interpolation of the two endpoint pre-activations, and the
    /// averaged input gradient is `W₀ᵀ` applied to the averaged pre-activation
    /// gradient. Only the endpoints touch the (wide) input layer.
    pub fn mean_input_gradient_on_path(&self, k: usize, x: &[T], x_base: &[T], alphas: &[T]) -> Result<Array1<T>> {
        self.check_class(k)?;
        let d = self.input_dim();
        if x.len() != d {
            return Err(Error::dim("network input", d, x.len()));
        }
        if x_base.len() != d {
            return Err(Error::dim("baseline input", d, x_base.len()));
        }
        if alphas.is_empty() {
            return Err(Error::InvalidArgument("no quadrature nodes".into()));
        }
        let ends = ndarray::stack(Axis(0), &[ArrayView1::from(x_base), ArrayView1::from(x)]).expect("equal lengths");
        let z_ends = self.layers[0].preactivate(ends.view());
        let z_base = z_ends.row(0);
        let z_diff = &z_ends.row(1) - &z_base;
        let mut z_path = Array2::zeros((alphas.len(), z_diff.len()));
        for (mut row, &alpha) in z_path.rows_mut().into_iter().zip(alphas) {
            Zip::from(&mut row)
                .and(&z_base)
                .and(&z_diff)
                .for_each(|r, &b, &dz| *r = b + alpha * dz);
        }
        let tape = self.tape_from_preactivation(0, z_path);
        let delta = self.backprop_preactivation(k, &tape);
        let mean_delta = delta.mean_axis(Axis(0)).expect("at least one quadrature node");
        Ok(self.layers[0].weights.t().dot(&mean_delta))
    }
}

// ---------------------------------------------------------------------------
// training

/// Random-access labelled samples, rendered row by row on demand.
pub trait Samples<T>: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn input_dim(&self) -> usize;
    fn label(&self, index: usize) -> usize;
    fn fill_row(&self, index: usize, row: ArrayViewMut1<T>);

    fn batch(&self, indices: &[usize]) -> Array2<T>
    where
        T: Real,
    {
        let mut out = Array2::zeros((indices.len(), self.input_dim()));
        for (row, &i) in out.rows_mut().into_iter().zip(indices) {
            self.fill_row(i, row);
        }
        out
    }
}

/// In-memory dataset: one sample per row.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub inputs: Array2<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Dataset<T> {
    pub fn new(inputs: Array2<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::dim("dataset labels", inputs.nrows(), labels.len()));
        }
        Ok(Self { inputs, labels })
    }
}

impl<T: Real> Samples<T> for Dataset<T> {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }
    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
    fn fill_row(&self, index: usize, mut row: ArrayViewMut1<T>) {
        row.assign(&self.inputs.row(index));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: Loss,
    /// Stop after an epoch whose validation accuracy reaches this value.
    pub early_stop_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            loss: Loss::CrossEntropy,
            early_stop_accuracy: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub history: Vec<EpochStats>,
}

struct AdamState<T> {
    m_w: Vec<Array2<T>>,
    v_w: Vec<Array2<T>>,
    m_b: Vec<Array1<T>>,
    v_b: Vec<Array1<T>>,
    step: i32,
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy of `net` on `samples` (inference mode).
pub fn accuracy<T: Real, S: Samples<T> + ?Sized>(net: &Network<T>, samples: &S) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let probs = net.predict_proba(samples.batch(chunk).view())?;
        for (row, &i) in probs.rows().into_iter().zip(chunk) {
            if argmax(row) == samples.label(i) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub(crate) fn argmax<T: Real>(row: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mini-batch training with cross-entropy loss and inverted dropout.
///
/// Deterministic given `cfg.seed`: shuffling and dropout masks come from
/// keyed streams.
pub fn train<T, S, V>(mut net: Network<T>, train_set: &S, validation: Option<&V>, cfg: &TrainConfig) -> Result<(Network<T>, TrainReport)>
where
    T: Real,
    S: Samples<T> + ?Sized,
    V: Samples<T> + ?Sized,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if train_set.input_dim() != net.input_dim() {
        return Err(Error::dim("training inputs", net.input_dim(), train_set.input_dim()));
    }
    let n_classes = net.n_classes();
    for i in 0..train_set.len() {
        if train_set.label(i) >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {} of sample {i} out of range for {n_classes} classes",
                train_set.label(i)
            )));
        }
    }

    let mut adam = AdamState {
        m_w: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
        v_w: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
        m_b: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        v_b: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        step: 0,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut streams::stream(cfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.batch(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_set.label(i)).collect();
            let mut rng = streams::stream(cfg.seed, "dropout", ((epoch as u64) << 32) | b as u64);
            let loss = train_step(&mut net, x.view(), &y, cfg, &mut adam, &mut rng);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            loss_sum += loss * chunk.len() as f64;
        }
        epochs_run = epoch + 1;
        let validation_accuracy = match validation {
            Some(v) => Some(accuracy(&net, v)?),
            None => None,
        };
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            validation_accuracy,
        });
        log::debug!(
            "epoch {epoch}: loss {:.5} val {:?}",
            loss_sum / train_set.len() as f64,
            validation_accuracy
        );
        if let (Some(target), Some(acc)) = (cfg.early_stop_accuracy, validation_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    let train_accuracy = accuracy(&net, train_set)?;
    let test_accuracy = history.last().and_then(|h| h.validation_accuracy);
    net.training_seed = Some(cfg.seed);
    Ok((
        net,
        TrainReport {
            epochs_run,
            train_accuracy,
            test_accuracy,
            history,
        },
    ))
}

fn train_step<T: Real, R: Rng>(
    net: &mut Network<T>,
    x: ArrayView2<T>,
    y: &[usize],
    cfg: &TrainConfig,
    adam: &mut AdamState<T>,
    rng: &mut R,
) -> f64 {
    let n_layers = net.layers.len();
    let batch = x.nrows();
    let keep = 1.0 - net.dropout_rate;
    let scale = T::lit(1.0 / keep);

    // forward with dropout on hidden outputs
    let mut pre: Vec<Array2<T>> = Vec::with_capacity(n_layers);
    let mut post: Vec<Array2<T>> = Vec::with_capacity(n_layers);
    let mut masks: Vec<Option<Array2<T>>> = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let layer = &net.layers[l];
        let z = if l == 0 {
            layer.preactivate(x)
        } else {
            layer.preactivate(post[l - 1].view())
        };
        let mut a = z.mapv(|v| layer.nonlinearity.apply(v));
        let mask = if l + 1 < n_layers && net.dropout_rate > 0.0 {
            let m = Array2::from_shape_simple_fn(a.raw_dim(), || if rng.random::<f64>() < keep { scale } else { T::zero() });
            a *= &m;
            Some(m)
        } else {
            None
        };
        pre.push(z);
        post.push(a);
        masks.push(mask);
    }

    // cross-entropy gradient with respect to logits
    let logits = post[n_layers - 1].view();
    let probs = net.probabilities_from_logits(logits);
    let mut loss = 0.0;
    let mut delta = match net.head {
        Head::Sigmoid => {
            let mut d = Array2::zeros((batch, 1));
            for i in 0..batch {
                let z = logits[[i, 0]].as_f64();
                let target = y[i] as f64;
                // log(1 + e^z) − t z, evaluated stably
                loss += z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
                d[[i, 0]] = probs[[i, 1]] - T::lit(target);
            }
            d
        }
        Head::Softmax => {
            let mut d = probs.clone();
            for i in 0..batch {
                let p = probs[[i, y[i]]].as_f64().max(1e-300);
                loss -= p.ln();
                d[[i, y[i]]] -= T::one();
            }
            d
        }
    };
    loss /= batch as f64;
    let inv_batch = T::lit(1.0 / batch as f64);

    let mut grads_w: Vec<Array2<T>> = Vec::with_capacity(n_layers);
    let mut grads_b: Vec<Array1<T>> = Vec::with_capacity(n_layers);
    for l in (0..n_layers).rev() {
        let layer = &net.layers[l];
        if l + 1 < n_layers {
            if let Some(m) = &masks[l] {
                delta *= m;
            }
            Zip::from(&mut delta)
                .and(&pre[l])
                .for_each(|d, &z| *d *= layer.nonlinearity.derivative(z));
        }
        let input = if l == 0 { x } else { post[l - 1].view() };
        let gw = delta.t().dot(&input) * inv_batch;
        let gb = delta.sum_axis(Axis(0)) * inv_batch;
        if l > 0 {
            delta = delta.dot(&layer.weights);
        }
        grads_w.push(gw);
        grads_b.push(gb);
    }
    grads_w.reverse();
    grads_b.reverse();

    let lr = T::lit(cfg.learning_rate);
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (layer, (gw, gb)) in net.layers.iter_mut().zip(grads_w.iter().zip(&grads_b)) {
                layer.weights.scaled_add(-lr, gw);
                layer.bias.scaled_add(-lr, gb);
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            adam.step += 1;
            let c1 = T::lit(1.0 - beta1.powi(adam.step));
            let c2 = T::lit(1.0 - beta2.powi(adam.step));
            let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
            let update = |p: &mut T, m: &mut T, v: &mut T, g: T| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            for l in 0..n_layers {
                Zip::from(&mut net.layers[l].weights)
                    .and(&mut adam.m_w[l])
                    .and(&mut adam.v_w[l])
                    .and(&grads_w[l])
                    .for_each(|p, m, v, &g| update(p, m, v, g));
                Zip::from(&mut net.layers[l].bias)
                    .and(&mut adam.m_b[l])
                    .and(&mut adam.v_b[l])
                    .and(&grads_b[l])
                    .for_each(|p, m, v, &g| update(p, m, v, g));
            }
        }
    }
    loss
}

// ---------------------------------------------------------------------------
// serialization

pub const NETWORK_FORMAT: &str = "icscope-network";
pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerDocument<T> {
    rows: usize,
    cols: usize,
    nonlinearity: Nonlinearity,
    weights: Vec<T>,
    bias: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct NetworkDocument<T> {
    format: String,
    version: u32,
    input_dim: usize,
    head: Head,
    dropout_rate: f64,
    training_seed: Option<u64>,
    layers: Vec<LayerDocument<T>>,
}

impl<T: Real> Network<T> {
    pub fn to_json(&self) -> Result<String> {
        let doc = NetworkDocument {
            format: NETWORK_FORMAT.to_string(),
            version: NETWORK_FORMAT_VERSION,
            input_dim: self.input_dim(),
            head: self.head,
            dropout_rate: self.dropout_rate,
            training_seed: self.training_seed,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    rows: l.out_dim(),
                    cols: l.in_dim(),
                    nonlinearity: l.nonlinearity,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDocument<T> = serde_json::from_str(text)?;
        if doc.format != NETWORK_FORMAT {
            return Err(Error::InvalidArgument(format!("unexpected document format {:?}", doc.format)));
        }
        if doc.version != NETWORK_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported network version {}", doc.version)));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let w = Array2::from_shape_vec((l.rows, l.cols), l.weights)
                    .map_err(|_| Error::dim("serialized weights", l.rows * l.cols, 0))?;
                DenseLayer::new(w, Array1::from(l.bias), l.nonlinearity)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::new(layers, doc.head, doc.dropout_rate)?;
        if net.input_dim() != doc.input_dim {
            return Err(Error::dim("serialized input_dim", net.input_dim(), doc.input_dim));
        }
        net.training_seed = doc.training_seed;
        Ok(net)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
