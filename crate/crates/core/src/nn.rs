//! Fully-connected networks with hand-written backpropagation.
//!
//! A [`DenseNet`] is a chain of affine layers, each followed by an
//! elementwise [`Activation`]. Batches are row-major `batch × dim` slices and
//! all matrix products go through [`Real::gemm`].

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Real};

/// Central difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error in [`gradient_check`]; gradients
/// smaller than this are compared in absolute terms (scaled by the floor).
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

const NET_MAGIC: &[u8; 4] = b"DNET";
const NET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Logistic,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
            Activation::Logistic => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output<T: Real>(self, a: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Logistic => a * (T::one() - a),
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Logistic => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Logistic),
            other => Err(Error::Container(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> DenseLayer<T> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
            activation,
        }
    }

    /// Weights uniform in `±scale/sqrt(fan_in)`, biases zero.
    pub fn init(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = scale / (inputs.max(1) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| {
                if bound > 0.0 {
                    T::lit(rng.gen_range(-bound..bound))
                } else {
                    T::zero()
                }
            })
            .collect();
        Self { inputs, outputs, weights, bias: vec![T::zero(); outputs], activation }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<T> {
    layers: Vec<DenseLayer<T>>,
    /// Bumped by every parameter update; caches remember the value they saw.
    revision: u64,
}

/// Activations recorded by [`DenseNet::forward_batch`]: `values[0]` is the
/// input, `values[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub batch: usize,
    values: Vec<Vec<T>>,
    revision: u64,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn into_output(mut self) -> Vec<T> {
        self.values.pop().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGradient<T>>,
    /// Gradient with respect to the network input, `batch × input_dim`.
    pub input: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn scale(&mut self, factor: T) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= factor);
        }
        self.input.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs(&self) -> T {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Independent deterministic random stream `stream` of `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean training loss of every epoch, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Learning-loop hyper-parameters shared by every trainable head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, epochs: 10, batch_size: 32, seed: 42, init_scale: 6f64.sqrt() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("weight-init scale must be finite and >= 0".into()));
        }
        Ok(())
    }
}

impl<T: Real> DenseNet<T> {
    pub fn new(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Config(format!("layer {i} parameter arrays do not match dims")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but layer {} yields {}",
                    l.inputs,
                    i - 1,
                    layers[i - 1].outputs
                )));
            }
        }
        Ok(Self { layers, revision: 0 })
    }

    /// `dims` lists input dim followed by each layer's output dim.
    pub fn init(
        dims: &[usize],
        activations: &[Activation],
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::check_shape(dims, activations)?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &a)| DenseLayer::init(d[0], d[1], a, scale, rng))
            .collect();
        Self::new(layers)
    }

    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        Self::check_shape(dims, activations)?;
        let layers =
            dims.windows(2).zip(activations).map(|(d, &a)| DenseLayer::zeros(d[0], d[1], a)).collect();
        Self::new(layers)
    }

    fn check_shape(dims: &[usize], activations: &[Activation]) -> Result<()> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[T], batch: usize) -> Result<()> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::Config(format!(
                "input holds {} values, expected batch {batch} × dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn layer_forward(layer: &DenseLayer<T>, x: &[T], batch: usize) -> Vec<T> {
        let (inp, out) = (layer.inputs, layer.outputs);
        if out == 1 {
            // gemm packing dominates for a single output column
            let (w, b) = (&layer.weights, layer.bias[0]);
            return x
                .chunks_exact(inp)
                .map(|row| layer.activation.apply(row.iter().zip(w).fold(b, |s, (&a, &c)| s + a * c)))
                .collect();
        }
        let mut z = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            z.extend_from_slice(&layer.bias);
        }
        T::gemm(
            batch,
            inp,
            out,
            T::one(),
            x,
            inp as isize,
            1,
            &layer.weights,
            1,
            inp as isize,
            T::one(),
            &mut z,
            out as isize,
            1,
        );
        if layer.activation != Activation::Identity {
            z.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
        }
        z
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, ForwardCache<T>)> {
        let cache = self.forward_batch(x, 1)?;
        Ok((cache.output().to_vec(), cache))
    }

    pub fn forward_batch(&self, x: &[T], batch: usize) -> Result<ForwardCache<T>> {
        self.check_input(x, batch)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for layer in &self.layers {
            let next = Self::layer_forward(layer, values.last().expect("non-empty"), batch);
            values.push(next);
        }
        Ok(ForwardCache { batch, values, revision: self.revision })
    }

    /// Forward pass keeping only the output.
    pub fn predict_batch(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        self.check_input(x, batch)?;
        let mut current = Self::layer_forward(&self.layers[0], x, batch);
        for layer in &self.layers[1..] {
            current = Self::layer_forward(layer, &current, batch);
        }
        Ok(current)
    }

    fn check_cache(&self, cache: &ForwardCache<T>) -> Result<()> {
        if cache.revision != self.revision || cache.values.len() != self.layers.len() + 1 {
            return Err(Error::Config(
                "stale forward cache: parameters changed since it was recorded".into(),
            ));
        }
        Ok(())
    }

    /// Backpropagates `grad_output`, the loss gradient with respect to the
    /// network's (post-activation) output.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_output: &[T]) -> Result<Gradients<T>> {
        self.check_cache(cache)?;
        let last = self.layers.len() - 1;
        let act = self.layers[last].activation;
        let out = cache.values.last().expect("non-empty");
        if grad_output.len() != out.len() {
            return Err(Error::Config("output gradient has the wrong length".into()));
        }
        let dz: Vec<T> = grad_output
            .iter()
            .zip(out)
            .map(|(&g, &a)| g * act.derivative_from_output(a))
            .collect();
        self.backward_from_dz(cache, dz)
    }

    /// Backpropagates a gradient taken with respect to the last layer's
    /// pre-activation. Used by the fused logistic/softmax losses.
    pub fn backward_preactivation(
        &self,
        cache: &ForwardCache<T>,
        grad_preactivation: &[T],
    ) -> Result<Gradients<T>> {
        self.check_cache(cache)?;
        if grad_preactivation.len() != cache.output().len() {
            return Err(Error::Config("pre-activation gradient has the wrong length".into()));
        }
        self.backward_from_dz(cache, grad_preactivation.to_vec())
    }

    fn backward_from_dz(&self, cache: &ForwardCache<T>, mut dz: Vec<T>) -> Result<Gradients<T>> {
        let batch = cache.batch;
        let mut grads: Vec<LayerGradient<T>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (inp, out) = (layer.inputs, layer.outputs);
            let x = &cache.values[l];
            let mut dw = vec![T::zero(); out * inp];
            // dW = dZᵀ · X
            T::gemm(
                out,
                batch,
                inp,
                T::one(),
                &dz,
                1,
                out as isize,
                x,
                inp as isize,
                1,
                T::zero(),
                &mut dw,
                inp as isize,
                1,
            );
            let mut db = vec![T::zero(); out];
            for row in dz.chunks_exact(out) {
                db.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
            }
            // dX = dZ · W
            let mut dx = vec![T::zero(); batch * inp];
            T::gemm(
                batch,
                out,
                inp,
                T::one(),
                &dz,
                out as isize,
                1,
                &layer.weights,
                inp as isize,
                1,
                T::zero(),
                &mut dx,
                inp as isize,
                1,
            );
            grads.push(LayerGradient { weights: dw, bias: db });
            if l > 0 {
                let prev_act = self.layers[l - 1].activation;
                dx.iter_mut()
                    .zip(x)
                    .for_each(|(g, &a)| *g *= prev_act.derivative_from_output(a));
            }
            dz = dx;
        }
        grads.reverse();
        // The loop multiplied the input gradient by nothing at l == 0, so dz
        // now holds dL/dX.
        Ok(Gradients { layers: grads, input: dz })
    }

    /// `w ← w − lr·g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, learning_rate: T) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Config("gradient layer count mismatch".into()));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if g.weights.len() != layer.weights.len() || g.bias.len() != layer.bias.len() {
                return Err(Error::Config("gradient shape mismatch".into()));
            }
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.iter_mut().zip(&g.weights).for_each(|(w, &d)| *w -= learning_rate * d);
            layer.bias.iter_mut().zip(&g.bias).for_each(|(b, &d)| *b -= learning_rate * d);
        }
        self.revision += 1;
        Ok(())
    }

    fn param_mut(&mut self, mut index: usize) -> &mut T {
        for layer in &mut self.layers {
            if index < layer.weights.len() {
                return &mut layer.weights[index];
            }
            index -= layer.weights.len();
            if index < layer.bias.len() {
                return &mut layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(NET_MAGIC)?;
        w.write_all(&NET_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.inputs as u32).to_le_bytes())?;
            w.write_all(&(l.outputs as u32).to_le_bytes())?;
            w.write_all(&[l.activation.code()])?;
            let mut buf = Vec::with_capacity((l.weights.len() + l.bias.len()) * 8);
            for v in l.weights.iter().chain(&l.bias) {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != NET_MAGIC {
            return Err(Error::Container("not a dense network record".into()));
        }
        let version = read_u32(r)?;
        if version != NET_VERSION {
            return Err(Error::Container(format!("unsupported network version {version}")));
        }
        let n_layers = read_u32(r)? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::Container(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let inputs = read_u32(r)? as usize;
            let outputs = read_u32(r)? as usize;
            if inputs == 0 || outputs == 0 || inputs.saturating_mul(outputs) > 1 << 28 {
                return Err(Error::Container(format!("implausible layer dims {inputs}x{outputs}")));
            }
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            let activation = Activation::from_code(code[0])?;
            let count = inputs * outputs + outputs;
            let mut raw = vec![0u8; count * 8];
            r.read_exact(&mut raw)?;
            let mut values: Vec<T> = raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let bias = values.split_off(inputs * outputs);
            layers.push(DenseLayer { inputs, outputs, weights: values, bias, activation });
        }
        let net = Self::new(layers)?;
        if !net.is_finite() {
            return Err(Error::Container("network contains non-finite parameters".into()));
        }
        Ok(net)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// A scalar loss over one network output vector.
pub trait Loss<T: Real> {
    fn value(&self, output: &[T]) -> T;
    /// Gradient with respect to the (post-activation) output.
    fn gradient(&self, output: &[T]) -> Vec<T>;
}

/// `½‖y − t‖²`.
pub struct SquaredLoss<T> {
    pub target: Vec<T>,
}

impl<T: Real> Loss<T> for SquaredLoss<T> {
    fn value(&self, output: &[T]) -> T {
        let half = T::lit(0.5);
        output.iter().zip(&self.target).map(|(&y, &t)| half * (y - t) * (y - t)).sum()
    }

    fn gradient(&self, output: &[T]) -> Vec<T> {
        output.iter().zip(&self.target).map(|(&y, &t)| y - t).collect()
    }
}

const PROB_EPS: f64 = 1e-12;

/// Binary cross-entropy over probabilities (logistic outputs), summed.
pub struct BinaryCrossEntropy<T> {
    pub target: Vec<T>,
}

pub fn bce<T: Real>(p: T, y: T) -> T {
    let eps = T::lit(PROB_EPS);
    let p = p.max(eps).min(T::one() - eps);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

impl<T: Real> Loss<T> for BinaryCrossEntropy<T> {
    fn value(&self, output: &[T]) -> T {
        output.iter().zip(&self.target).map(|(&p, &y)| bce(p, y)).sum()
    }

    fn gradient(&self, output: &[T]) -> Vec<T> {
        let eps = T::lit(PROB_EPS);
        output
            .iter()
            .zip(&self.target)
            .map(|(&p, &y)| {
                let p = p.max(eps).min(T::one() - eps);
                (p - y) / (p * (T::one() - p))
            })
            .collect()
    }
}

/// Softmax cross-entropy of raw logits against one class index.
pub struct SoftmaxCrossEntropy {
    pub class: usize,
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Loss value and gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], class: usize) -> (T, Vec<T>) {
    let mut p = softmax(logits);
    let loss = -p[class].max(T::min_positive_value()).ln();
    p[class] -= T::one();
    (loss, p)
}

impl<T: Real> Loss<T> for SoftmaxCrossEntropy {
    fn value(&self, output: &[T]) -> T {
        softmax_cross_entropy(output, self.class).0
    }

    fn gradient(&self, output: &[T]) -> Vec<T> {
        softmax_cross_entropy(output, self.class).1
    }
}

/// Smooth-L1 with the quadratic/linear transition at 1.
pub struct SmoothL1<T> {
    pub target: Vec<T>,
}

pub fn smooth_l1<T: Real>(d: T) -> (T, T) {
    if d.abs() < T::one() {
        (T::lit(0.5) * d * d, d)
    } else {
        (d.abs() - T::lit(0.5), d.signum())
    }
}

impl<T: Real> Loss<T> for SmoothL1<T> {
    fn value(&self, output: &[T]) -> T {
        output.iter().zip(&self.target).map(|(&y, &t)| smooth_l1(y - t).0).sum()
    }

    fn gradient(&self, output: &[T]) -> Vec<T> {
        output.iter().zip(&self.target).map(|(&y, &t)| smooth_l1(y - t).1).collect()
    }
}

/// Maximum relative error between backprop gradients and central finite
/// differences over every parameter of `net`.
pub fn gradient_check<T: Real>(net: &DenseNet<T>, x: &[T], loss: &dyn Loss<T>) -> Result<T> {
    let cache = net.forward_batch(x, 1)?;
    let analytic = net.backward(&cache, &loss.gradient(cache.output()))?;
    let flat: Vec<T> =
        analytic.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect();
    let h = T::lit(FD_STEP);
    let floor = T::lit(GRAD_CHECK_FLOOR);
    let mut probe = net.clone();
    let mut worst = T::zero();
    for (i, &a) in flat.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + h;
        let plus = loss.value(&probe.predict_batch(x, 1)?);
        *probe.param_mut(i) = orig - h;
        let minus = loss.value(&probe.predict_batch(x, 1)?);
        *probe.param_mut(i) = orig;
        let numeric = (plus - minus) / (h + h);
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
