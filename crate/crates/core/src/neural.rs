//! Feed-forward networks trained by mini-batch SGD with backpropagation.
//!
//! Three roles share the same machinery:
//! * [`ReducerNet`]: an encoder with a bounded-ReLU bottleneck, a decoder back
//!   to the input space and a loss-predicting head on the bottleneck, trained
//!   jointly on prediction error, reconstruction error and a quadratic
//!   out-of-box penalty on reconstructions;
//! * [`MeanNet`]: a plain regression MLP used as the GP mean function;
//! * bare [`NeuralNet`]s for anything else.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::BoxDomain;

pub const NET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// `min(cap, max(0, x))`
    BoundedRelu { cap: f64 },
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::BoundedRelu { cap } => x.max(0.0).min(cap),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x` (zero at the kinks).
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::BoundedRelu { cap } => {
                if x > 0.0 && x < cap {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `outputs × inputs`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetDocument", into = "NetDocument")]
pub struct NeuralNet {
    layers: Vec<Layer>,
}

/// Versioned on-disk form: layer shapes plus row-major weights.
#[derive(Serialize, Deserialize)]
struct NetDocument {
    version: u32,
    layers: Vec<LayerDocument>,
}

#[derive(Serialize, Deserialize)]
struct LayerDocument {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<NeuralNet> for NetDocument {
    fn from(net: NeuralNet) -> Self {
        let layers = net
            .layers
            .into_iter()
            .map(|l| LayerDocument {
                inputs: l.weights.ncols(),
                outputs: l.weights.nrows(),
                activation: l.activation,
                weights: l.weights.transpose().as_slice().to_vec(),
                bias: l.bias.as_slice().to_vec(),
            })
            .collect();
        NetDocument { version: NET_FORMAT_VERSION, layers }
    }
}

impl TryFrom<NetDocument> for NeuralNet {
    type Error = Error;
    fn try_from(doc: NetDocument) -> Result<Self> {
        if doc.version != NET_FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported network format version {}", doc.version)));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        for l in doc.layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::invalid("layer shape does not match its parameter count"));
            }
            layers.push(Layer {
                weights: DMatrix::from_row_slice(l.outputs, l.inputs, &l.weights),
                bias: DVector::from_vec(l.bias),
                activation: l.activation,
            });
        }
        NeuralNet::new(layers)
    }
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &NeuralNet) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols())).collect(),
            bias: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    /// Flattened in the same order as [`NeuralNet::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend(w.transpose().iter());
            out.extend(b.iter());
        }
        out
    }
}

/// Activations recorded on the forward pass, needed for backpropagation.
pub struct Trace {
    inputs: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
    output: DVector<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.output.as_slice()
    }
}

impl NeuralNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::invalid(format!("layer {i}: bias length differs from output count")));
            }
            if i > 0 && layers[i - 1].weights.nrows() != l.weights.ncols() {
                return Err(Error::invalid(format!("layer {i}: input size does not chain")));
            }
            if let Activation::BoundedRelu { cap } = l.activation {
                if !(cap > 0.0 && cap.is_finite()) {
                    return Err(Error::invalid(format!("layer {i}: bounded-relu cap must be positive")));
                }
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(NeuralNet { layers })
    }

    /// Random network with `sizes = [in, h1, ..., out]` and one activation per
    /// layer. Weights are uniform in `±sqrt(6 / fan_in)`, biases start at zero.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 || sizes.contains(&0) {
            return Err(Error::invalid("need positive layer sizes and one activation per layer"));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer {
                    weights: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(w[1]),
                    activation,
                }
            })
            .collect();
        NeuralNet::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = DVector::from_column_slice(x);
        for l in &self.layers {
            a = (&l.weights * a + &l.bias).map(|v| l.activation.apply(v));
        }
        a.as_slice().to_vec()
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = DVector::from_column_slice(x);
        for l in &self.layers {
            let z = &l.weights * &a + &l.bias;
            let next = z.map(|v| l.activation.apply(v));
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Trace { inputs, pre, output: a }
    }

    /// Accumulate parameter gradients for `dLoss/dOutput = grad_out` into
    /// `grads`; returns `dLoss/dInput`.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let mut delta = DVector::from_column_slice(grad_out);
        for (i, l) in self.layers.iter().enumerate().rev() {
            let dz = delta.zip_map(&trace.pre[i], |g, z| g * l.activation.derivative(z));
            grads.weights[i].ger(1.0, &dz, &trace.inputs[i], 1.0);
            grads.bias[i] += &dz;
            delta = l.weights.tr_mul(&dz);
        }
        delta.as_slice().to_vec()
    }

    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f64) {
        for ((l, gw), gb) in self.layers.iter_mut().zip(&grads.weights).zip(&grads.bias) {
            l.weights -= gw * learning_rate;
            l.bias -= gb * learning_rate;
        }
    }

    /// All parameters, layer by layer: row-major weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.transpose().iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid("parameter vector has the wrong length"));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            let (r, c) = l.weights.shape();
            l.weights = DMatrix::from_row_iterator(r, c, it.by_ref().take(r * c));
            l.bias = DVector::from_iterator(r, it.by_ref().take(r));
        }
        Ok(())
    }

    /// Mean squared error over a batch (averaged over samples and outputs)
    /// and its parameter gradient.
    pub fn loss_and_gradient(&self, batch: &[(Vec<f64>, Vec<f64>)]) -> (f64, Gradients) {
        let mut grads = Gradients::zeros_like(self);
        let scale = 1.0 / (batch.len() * self.output_dim()) as f64;
        let mut loss = 0.0;
        for (x, t) in batch {
            let trace = self.forward_trace(x);
            let g: Vec<f64> = trace
                .output()
                .iter()
                .zip(t)
                .map(|(o, t)| {
                    loss += (o - t) * (o - t) * scale;
                    2.0 * (o - t) * scale
                })
                .collect();
            self.backward(&trace, &g, &mut grads);
        }
        (loss, grads)
    }

    pub fn batch_loss(&self, batch: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        let scale = 1.0 / (batch.len() * self.output_dim()) as f64;
        batch
            .iter()
            .map(|(x, t)| self.forward(x).iter().zip(t).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() * scale)
            .sum()
    }

    /// One backpropagation update on `batch`; returns the pre-update loss.
    pub fn sgd_step(&mut self, batch: &[(Vec<f64>, Vec<f64>)], learning_rate: f64) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let (loss, grads) = self.loss_and_gradient(batch);
        self.apply_gradients(&grads, learning_rate);
        loss
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Quadratic hinge for leaving the box:
/// `Σ_j max(0, x_j - upper_j)² + max(0, lower_j - x_j)²`.
pub fn bound_penalty(x: &[f64], domain: &BoxDomain) -> f64 {
    x.iter()
        .zip(domain.lower())
        .zip(domain.upper())
        .map(|((v, l), u)| (v - u).max(0.0).powi(2) + (l - v).max(0.0).powi(2))
        .sum()
}

fn bound_penalty_grad(v: f64, l: f64, u: f64) -> f64 {
    2.0 * ((v - u).max(0.0) - (l - v).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    /// Cap of the bounded-ReLU hidden and bottleneck layers.
    pub cap: f64,
    pub penalty_weight: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Reducer only: latent points drawn uniformly from the bottleneck box
    /// per training sample, whose decodings also pay the bound penalty.
    pub penalty_probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 16,
            cap: 1.0,
            penalty_weight: 10.0,
            learning_rate: 1e-2,
            lr_decay: 0.999,
            epochs: 500,
            batch_size: 16,
            penalty_probes: 1,
        }
    }
}

/// Epoch-averaged training loss, one entry per epoch.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Affine target scaling so networks regress standardized values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub offset: f64,
    pub scale: f64,
}

impl TargetScale {
    pub fn fit(ys: impl Iterator<Item = f64> + Clone) -> Self {
        let n = ys.clone().count().max(1) as f64;
        let mean = ys.clone().sum::<f64>() / n;
        let var = ys.map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        TargetScale { offset: mean, scale: if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 } }
    }

    pub fn to_unit(&self, y: f64) -> f64 {
        (y - self.offset) / self.scale
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        self.offset + self.scale * u
    }
}

/// Encoder / decoder / loss head sharing a bounded bottleneck.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducerNet {
    pub encoder: NeuralNet,
    pub decoder: NeuralNet,
    pub head: NeuralNet,
    pub target: TargetScale,
    /// Box the decoder is penalized for leaving (the normalized input cube).
    pub input_box: BoxDomain,
}

impl ReducerNet {
    pub fn init<R: Rng + ?Sized>(d: usize, r: usize, config: &TrainConfig, rng: &mut R) -> Result<Self> {
        if r == 0 || r >= d {
            return Err(Error::invalid(format!("latent dimension {r} must lie in [1, {d})")));
        }
        let h = config.hidden;
        let brelu = Activation::BoundedRelu { cap: config.cap };
        let id = Activation::Identity;
        Ok(ReducerNet {
            encoder: NeuralNet::init(&[d, h, r], &[brelu, brelu], rng)?,
            decoder: NeuralNet::init(&[r, h, d], &[brelu, id], rng)?,
            head: NeuralNet::init(&[r, h, 1], &[brelu, id], rng)?,
            target: TargetScale { offset: 0.0, scale: 1.0 },
            input_box: BoxDomain::centered_unit(d),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Search box of the bottleneck, `[0, cap]^r`.
    pub fn latent_bounds(&self) -> BoxDomain {
        let cap = match self.encoder.layers().last().map(|l| l.activation) {
            Some(Activation::BoundedRelu { cap }) => cap,
            _ => 1.0,
        };
        BoxDomain::uniform(self.latent_dim(), 0.0, cap).expect("positive cap")
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.forward(x)
    }

    pub fn decode(&self, v: &[f64]) -> Vec<f64> {
        self.decoder.forward(v)
    }

    pub fn predict_loss(&self, x: &[f64]) -> f64 {
        self.target.from_unit(self.head.forward(&self.encode(x))[0])
    }

    #[cfg(test)]
    fn flat_params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.head.params());
        p
    }

    /// Combined objective on standardized targets: prediction MSE +
    /// reconstruction MSE + `penalty_weight` × mean out-of-box penalty of the
    /// reconstructions, plus the same penalty averaged over decoded `probes`.
    pub fn combined_loss(&self, batch: &[(Vec<f64>, f64)], probes: &[Vec<f64>], penalty_weight: f64) -> f64 {
        self.combined_loss_and_gradient(batch, probes, penalty_weight).0
    }

    /// Loss and gradients for (encoder, decoder, head).
    pub fn combined_loss_and_gradient(
        &self,
        batch: &[(Vec<f64>, f64)],
        probes: &[Vec<f64>],
        penalty_weight: f64,
    ) -> (f64, [Gradients; 3]) {
        let mut ge = Gradients::zeros_like(&self.encoder);
        let mut gd = Gradients::zeros_like(&self.decoder);
        let mut gh = Gradients::zeros_like(&self.head);
        let b = batch.len() as f64;
        let d = self.input_dim() as f64;
        let mut loss = 0.0;
        for (x, y) in batch {
            let t = self.target.to_unit(*y);
            let enc = self.encoder.forward_trace(x);
            let code = enc.output().to_vec();
            let dec = self.decoder.forward_trace(&code);
            let head = self.head.forward_trace(&code);

            let err = head.output()[0] - t;
            loss += err * err / b;
            let g_head = [2.0 * err / b];

            let recon = dec.output();
            let mut g_dec = Vec::with_capacity(recon.len());
            for (j, (&xh, &xj)) in recon.iter().zip(x).enumerate() {
                let (l, u) = (self.input_box.lower()[j], self.input_box.upper()[j]);
                let diff = xh - xj;
                let pen = (xh - u).max(0.0).powi(2) + (l - xh).max(0.0).powi(2);
                loss += diff * diff / (b * d) + penalty_weight * pen / b;
                g_dec.push(2.0 * diff / (b * d) + penalty_weight * bound_penalty_grad(xh, l, u) / b);
            }

            let dc_head = self.head.backward(&head, &g_head, &mut gh);
            let dc_dec = self.decoder.backward(&dec, &g_dec, &mut gd);
            let dc: Vec<f64> = dc_head.iter().zip(&dc_dec).map(|(a, b)| a + b).collect();
            self.encoder.backward(&enc, &dc, &mut ge);
        }
        let m = probes.len() as f64;
        for v in probes {
            let dec = self.decoder.forward_trace(v);
            let mut g_dec = Vec::with_capacity(dec.output().len());
            for (j, &xh) in dec.output().iter().enumerate() {
                let (l, u) = (self.input_box.lower()[j], self.input_box.upper()[j]);
                loss += penalty_weight * ((xh - u).max(0.0).powi(2) + (l - xh).max(0.0).powi(2)) / m;
                g_dec.push(penalty_weight * bound_penalty_grad(xh, l, u) / m);
            }
            self.decoder.backward(&dec, &g_dec, &mut gd);
        }
        (loss, [ge, gd, gh])
    }
}

fn check_data(data: &[(Vec<f64>, f64)], min: usize) -> Result<usize> {
    if data.len() < min {
        return Err(Error::invalid(format!("need at least {min} training samples, got {}", data.len())));
    }
    let d = data[0].0.len();
    if data.iter().any(|(x, y)| x.len() != d || !y.is_finite() || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("training data must be finite and of one dimension"));
    }
    Ok(d)
}

fn run_epochs<R, F>(n: usize, config: &TrainConfig, epochs: usize, rng: &mut R, mut step: F) -> Result<TrainReport>
where
    R: Rng + ?Sized,
    F: FnMut(&[usize], f64, &mut R) -> f64,
{
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport::default();
    let bs = config.batch_size.max(1);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let lr = config.learning_rate * config.lr_decay.powi(epoch as i32);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            total += step(chunk, lr, rng) * chunk.len() as f64;
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingFailure { epoch });
        }
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Train a reducer on `(normalized input, loss)` pairs with latent dimension `r`.
pub fn train_reducer<R: Rng + ?Sized>(
    data: &[(Vec<f64>, f64)],
    r: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(ReducerNet, TrainReport)> {
    let d = check_data(data, 10)?;
    let mut net = ReducerNet::init(d, r, config, rng)?;
    net.target = TargetScale::fit(data.iter().map(|p| p.1));
    let report = fit_reducer(&mut net, data, config, config.epochs, rng)?;
    Ok((net, report))
}

/// Warm-started continuation of training on (possibly more) data.
pub fn fine_tune_reducer<R: Rng + ?Sized>(
    net: &ReducerNet,
    data: &[(Vec<f64>, f64)],
    config: &TrainConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<(ReducerNet, TrainReport)> {
    let d = check_data(data, 10)?;
    if d != net.input_dim() {
        return Err(Error::invalid("fine-tuning data has the wrong dimension"));
    }
    let mut net = net.clone();
    net.target = TargetScale::fit(data.iter().map(|p| p.1));
    let report = fit_reducer(&mut net, data, config, epochs, rng)?;
    Ok((net, report))
}

fn fit_reducer<R: Rng + ?Sized>(
    net: &mut ReducerNet,
    data: &[(Vec<f64>, f64)],
    config: &TrainConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<TrainReport> {
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut probes = Vec::new();
    let bounds = net.latent_bounds();
    run_epochs(data.len(), config, epochs, rng, |idx, lr, rng| {
        batch.clear();
        batch.extend(idx.iter().map(|&i| data[i].clone()));
        probes.clear();
        for _ in 0..idx.len() * config.penalty_probes {
            probes.push(bounds.lower().iter().zip(bounds.upper()).map(|(&l, &u)| rng.random_range(l..=u)).collect());
        }
        let (loss, [ge, gd, gh]) = net.combined_loss_and_gradient(&batch, &probes, config.penalty_weight);
        net.encoder.apply_gradients(&ge, lr);
        net.decoder.apply_gradients(&gd, lr);
        net.head.apply_gradients(&gh, lr);
        loss
    })
}

/// MLP regression of the loss, used as a GP mean function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanNet {
    pub net: NeuralNet,
    pub target: TargetScale,
}

impl MeanNet {
    pub fn init<R: Rng + ?Sized>(d: usize, config: &TrainConfig, rng: &mut R) -> Result<Self> {
        let h = config.hidden;
        let brelu = Activation::BoundedRelu { cap: config.cap };
        let mut net = NeuralNet::init(&[d, h, h, 1], &[brelu, brelu, Activation::Identity], rng)?;
        // zero output layer: an untrained mean predicts the target offset
        let mut p = net.params();
        let n = p.len();
        p[n - h - 1..].fill(0.0);
        net.set_params(&p)?;
        Ok(MeanNet { net, target: TargetScale { offset: 0.0, scale: 1.0 } })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.target.from_unit(self.net.forward(x)[0])
    }
}

/// Train a mean-function network on `(latent input, loss)` pairs.
pub fn train_mean<R: Rng + ?Sized>(
    data: &[(Vec<f64>, f64)],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(MeanNet, TrainReport)> {
    let d = check_data(data, 2)?;
    let mut mean = MeanNet::init(d, config, rng)?;
    mean.target = TargetScale::fit(data.iter().map(|p| p.1));
    let samples: Vec<(Vec<f64>, Vec<f64>)> =
        data.iter().map(|(x, y)| (x.clone(), vec![mean.target.to_unit(*y)])).collect();
    let mut batch = Vec::with_capacity(config.batch_size);
    let net = &mut mean.net;
    let report = run_epochs(samples.len(), config, config.epochs, rng, |idx, lr, _| {
        batch.clear();
        batch.extend(idx.iter().map(|&i| samples[i].clone()));
        net.sgd_step(&batch, lr)
    })?;
    Ok((mean, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        stream_rng(seed, Stream::Reducer, 0)
    }

    /// Central differences of `f` around `p`, h = 1e-5.
    fn finite_diff(p: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..p.len())
            .map(|i| {
                let mut q = p.to_vec();
                q[i] = p[i] + h;
                let up = f(&q);
                q[i] = p[i] - h;
                let down = f(&q);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn identity_layer_is_identity() {
        let net = NeuralNet::new(vec![Layer {
            weights: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
            activation: Activation::Identity,
        }])
        .unwrap();
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]), vec![1.5, -2.0, 0.25]);
        assert_eq!(Activation::BoundedRelu { cap: 1.0 }.apply(-3.0), 0.0);
        assert_eq!(Activation::BoundedRelu { cap: 1.0 }.apply(3.0), 1.0);
    }

    #[test]
    fn two_layer_forward_matches_hand_rolled() {
        let cap = 2.0;
        let net = NeuralNet::init(
            &[3, 4, 2],
            &[Activation::BoundedRelu { cap }, Activation::Identity],
            &mut rng(1),
        )
        .unwrap();
        let x = [0.3, -0.7, 0.9];
        let l = net.layers();
        let mut h = [0.0; 4];
        for i in 0..4 {
            let mut s = l[0].bias[i];
            for j in 0..3 {
                s += l[0].weights[(i, j)] * x[j];
            }
            h[i] = s.max(0.0).min(cap);
        }
        let out = net.forward(&x);
        for k in 0..2 {
            let mut s = l[1].bias[k];
            for i in 0..4 {
                s += l[1].weights[(k, i)] * h[i];
            }
            assert!((out[k] - s).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_broken_chains() {
        let a = Layer { weights: DMatrix::zeros(2, 3), bias: DVector::zeros(2), activation: Activation::Identity };
        let b = Layer { weights: DMatrix::zeros(1, 3), bias: DVector::zeros(1), activation: Activation::Identity };
        assert!(NeuralNet::new(vec![a.clone(), b]).is_err());
        let bad_cap = Layer { activation: Activation::BoundedRelu { cap: 0.0 }, ..a };
        assert!(NeuralNet::new(vec![bad_cap]).is_err());
    }

    #[test]
    fn penalty_examples() {
        let b = BoxDomain::uniform(1, -10.0, 10.0).unwrap();
        assert_eq!(bound_penalty(&[3.0], &b), 0.0);
        assert_eq!(bound_penalty(&[11.0], &b), 1.0);
        assert_eq!(bound_penalty(&[-12.0], &b), 4.0);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut net = NeuralNet::init(&[2, 3, 1], &[Activation::BoundedRelu { cap: 1.0 }, Activation::Identity], &mut rng(2))
            .unwrap();
        let before = net.clone();
        net.sgd_step(&[(vec![0.2, 0.4], vec![1.0])], 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn single_neuron_learns_slope() {
        let mut net = NeuralNet::new(vec![Layer {
            weights: DMatrix::from_element(1, 1, 0.1),
            bias: DVector::zeros(1),
            activation: Activation::Identity,
        }])
        .unwrap();
        let batch: Vec<(Vec<f64>, Vec<f64>)> =
            (0..8).map(|i| (vec![i as f64 / 4.0 - 1.0], vec![2.0 * (i as f64 / 4.0 - 1.0)])).collect();
        for _ in 0..1000 {
            net.sgd_step(&batch, 0.1);
        }
        assert!((net.layers()[0].weights[(0, 0)] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let brelu = Activation::BoundedRelu { cap: 1.5 };
        let net = NeuralNet::init(&[3, 5, 4, 2], &[brelu, brelu, Activation::Identity], &mut rng(9)).unwrap();
        let batch = vec![(vec![0.1, -0.4, 0.35], vec![0.5, -0.2]), (vec![-0.6, 0.2, 0.8], vec![0.0, 1.0])];
        let (_, g) = net.loss_and_gradient(&batch);
        let fd = finite_diff(&net.params(), |p| {
            let mut n = net.clone();
            n.set_params(p).unwrap();
            n.batch_loss(&batch)
        });
        for (a, b) in g.flatten().iter().zip(&fd) {
            assert!(close(*a, *b), "{a} vs {b}");
        }
    }

    #[test]
    fn combined_reducer_gradient_matches_finite_differences() {
        let cfg = TrainConfig { hidden: 4, cap: 1.0, ..TrainConfig::default() };
        let mut net = ReducerNet::init(3, 1, &cfg, &mut rng(5)).unwrap();
        net.target = TargetScale { offset: 1.0, scale: 2.0 };
        // zero biases put pre-activations exactly on a kink; move them off
        for part in [&mut net.encoder, &mut net.decoder, &mut net.head] {
            let p: Vec<f64> = part.params().iter().enumerate().map(|(i, v)| v + 0.013 * (i % 5 + 1) as f64).collect();
            part.set_params(&p).unwrap();
        }
        // large decoder output bias pushes reconstructions out of the box
        let mut p = net.decoder.params();
        let len = p.len();
        p[len - 1] = 1.4;
        net.decoder.set_params(&p).unwrap();
        let batch = vec![(vec![0.2, -0.5, 0.7], 3.0), (vec![-0.3, 0.6, -0.1], -1.0)];
        let probes = vec![vec![0.9], vec![0.35]];
        let (_, [ge, gd, gh]) = net.combined_loss_and_gradient(&batch, &probes, 10.0);
        let mut analytic = ge.flatten();
        analytic.extend(gd.flatten());
        analytic.extend(gh.flatten());
        let ne = net.encoder.param_count();
        let nd = net.decoder.param_count();
        let fd = finite_diff(&net.flat_params(), |p| {
            let mut n = net.clone();
            n.encoder.set_params(&p[..ne]).unwrap();
            n.decoder.set_params(&p[ne..ne + nd]).unwrap();
            n.head.set_params(&p[ne + nd..]).unwrap();
            n.combined_loss(&batch, &probes, 10.0)
        });
        for (i, (a, b)) in analytic.iter().zip(&fd).enumerate() {
            assert!(close(*a, *b), "param {i} of {ne}+{nd}: {a} vs {b}");
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let net = NeuralNet::init(&[2, 3, 1], &[Activation::BoundedRelu { cap: 1.0 }, Activation::Identity], &mut rng(4))
            .unwrap();
        let s = net.to_json().unwrap();
        assert!(s.contains("\"version\": 1"));
        assert_eq!(NeuralNet::from_json(&s).unwrap(), net);
        let bad = s.replace("\"version\": 1", "\"version\": 9");
        assert!(NeuralNet::from_json(&bad).is_err());
    }

    fn sum_dependent_data(n: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
                let s = x[0] + x[1];
                (x, s * s + s)
            })
            .collect()
    }

    #[test]
    fn reducer_head_learns_one_dimensional_structure() {
        let train = sum_dependent_data(200, 1);
        let test = sum_dependent_data(200, 2);
        let (net, report) = train_reducer(&train, 1, &TrainConfig::default(), &mut rng(3)).unwrap();
        assert_eq!(report.epoch_losses.len(), 500);
        let mean = test.iter().map(|p| p.1).sum::<f64>() / test.len() as f64;
        let var = test.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / test.len() as f64;
        let mse = test.iter().map(|(x, y)| (net.predict_loss(x) - y).powi(2)).sum::<f64>() / test.len() as f64;
        assert!(mse <= 0.25 * var, "test mse {mse} vs variance {var}");

        let w = 50;
        let first: f64 = report.epoch_losses[..w].iter().sum::<f64>() / w as f64;
        let last: f64 = report.epoch_losses[report.epoch_losses.len() - w..].iter().sum::<f64>() / w as f64;
        assert!(last <= first);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = sum_dependent_data(20, 4);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (net, _) = train_reducer(&data, 2, &cfg, &mut rng(8)).unwrap();
        let init = ReducerNet::init(4, 2, &cfg, &mut rng(8)).unwrap();
        assert_eq!(net.encoder, init.encoder);
        assert_eq!(net.decoder, init.decoder);
        assert_eq!(net.head, init.head);
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let data = sum_dependent_data(100, 6);
        let cfg = TrainConfig::default();
        let init = {
            let mut n = ReducerNet::init(4, 2, &cfg, &mut rng(7)).unwrap();
            n.target = TargetScale::fit(data.iter().map(|p| p.1));
            n
        };
        let (net, _) = train_reducer(&data, 2, &cfg, &mut rng(7)).unwrap();
        let recon = |n: &ReducerNet| {
            data.iter()
                .map(|(x, _)| n.decode(&n.encode(x)).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum::<f64>()
        };
        assert!(recon(&net) <= recon(&init));
    }

    #[test]
    fn decoded_latents_stay_in_box() {
        let cfg = TrainConfig { penalty_weight: 50.0, ..TrainConfig::default() };
        for seed in 0..5 {
            let data = sum_dependent_data(100, 10 + seed);
            let (net, _) = train_reducer(&data, 2, &cfg, &mut rng(20 + seed)).unwrap();
            let bounds = net.latent_bounds();
            let mut r = rng(30 + seed);
            let inside = (0..1000)
                .filter(|_| {
                    let v: Vec<f64> = (0..2).map(|j| r.random_range(bounds.lower()[j]..=bounds.upper()[j])).collect();
                    net.input_box.contains(&net.decode(&v))
                })
                .count();
            assert!(inside >= 990, "seed {seed}: {inside}/1000 inside");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = sum_dependent_data(30, 3);
        let cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
        let (a, _) = train_reducer(&data, 1, &cfg, &mut rng(1)).unwrap();
        let (b, _) = train_reducer(&data, 1, &cfg, &mut rng(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_net_learns_constant() {
        let data: Vec<(Vec<f64>, f64)> = (0..40).map(|i| (vec![i as f64 / 20.0 - 1.0, 0.5], 7.25)).collect();
        let (m, _) = train_mean(&data, &TrainConfig::default(), &mut rng(2)).unwrap();
        for (x, _) in &data {
            assert!((m.eval(x) - 7.25).abs() < 1e-2, "{}", m.eval(x));
        }
        let untrained = MeanNet::init(2, &TrainConfig::default(), &mut rng(3)).unwrap();
        assert!(untrained.eval(&[0.1, 0.2]).is_finite());
    }

    #[test]
    fn diverging_training_is_reported() {
        let data = sum_dependent_data(20, 9);
        let cfg = TrainConfig { learning_rate: 1e6, lr_decay: 1.0, epochs: 50, ..TrainConfig::default() };
        match train_reducer(&data, 1, &cfg, &mut rng(1)) {
            Err(Error::TrainingFailure { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
