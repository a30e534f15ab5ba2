//! Residual MLP feature extractor with optional spectral normalization.
//!
//! Architecture, for `num_blocks` residual blocks:
//!
//! ```text
//! h_0 = act(W_in x + b_in)
//! h_k = h_{k-1} + act(W_k h_{k-1} + b_k)      k = 1..num_blocks
//! logits = W_out h_K + b_out
//! ```
//!
//! `h_K` is the feature vector. With spectral normalization on, every block
//! weight `W_k` is rescaled after each optimizer step so its estimated largest
//! singular value is at most `sn_coeff`. The input projection and the
//! classifier are not normalized. Activations are 1-Lipschitz, so the feature
//! map is Lipschitz with constant at most `s_in * prod_k (1 + s_k)`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synth::LabeledDataset2D;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SNML";
pub const CHECKPOINT_VERSION: u32 = 1;

/// During training, power iteration continues past `sn_power_iters` until
/// the estimate moves by less than this relative amount...
pub const SN_REL_TOL: f64 = 1e-7;
/// ...or this many iterations have run.
pub const SN_MAX_ITERS: usize = 64;

const CLASSIFIER_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative in terms of the pre-activation.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weight: Array2::zeros((out_dim, in_dim)), bias: Array1::zeros(out_dim) }
    }

    fn uniform_fan_in(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound)),
            bias: Array1::from_shape_fn(out_dim, |_| rng.random_range(-bound..bound)),
        }
    }

    /// Batch rows in, batch rows out.
    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Power-iteration estimate of the largest singular value. `u` is the
/// persistent left-vector estimate and is updated in place. Returns 0 for a
/// matrix that annihilates `u` (e.g. the zero matrix).
pub fn power_iteration(weight: ArrayView2<f64>, u: &mut Array1<f64>, iters: usize) -> f64 {
    power_iteration_tol(weight, u, iters, iters, 0.0)
}

/// Runs at least `min_iters` and at most `max_iters` power iterations,
/// stopping once successive estimates differ by less than `rel_tol`.
pub fn power_iteration_tol(
    weight: ArrayView2<f64>,
    u: &mut Array1<f64>,
    min_iters: usize,
    max_iters: usize,
    rel_tol: f64,
) -> f64 {
    let mut sigma = 0.0;
    for it in 0..max_iters.max(min_iters).max(1) {
        let v = weight.t().dot(u);
        let vn = v.dot(&v).sqrt();
        if vn == 0.0 {
            return 0.0;
        }
        let v = v / vn;
        let wu = weight.dot(&v);
        let next = wu.dot(&wu).sqrt();
        if next == 0.0 {
            return 0.0;
        }
        *u = wu / next;
        let converged = (next - sigma).abs() <= rel_tol * next;
        sigma = next;
        if it + 1 >= min_iters && converged {
            break;
        }
    }
    sigma
}

/// Returns `weight * min(1, coeff / sigma)` together with the estimate
/// `sigma` from `iters` power iterations started at `u`.
pub fn spectral_normalize(
    weight: ArrayView2<f64>,
    u: &mut Array1<f64>,
    iters: usize,
    coeff: f64,
) -> Result<(Array2<f64>, f64)> {
    if iters == 0 {
        return Err(Error::invalid("spectral normalization needs at least one power iteration"));
    }
    if !(coeff > 0.0) {
        return Err(Error::invalid(format!("spectral coefficient must be > 0, got {coeff}")));
    }
    if u.len() != weight.nrows() {
        return Err(Error::DimensionMismatch { expected: weight.nrows(), got: u.len() });
    }
    let sigma = power_iteration(weight, u, iters);
    let mut out = weight.to_owned();
    if sigma > coeff {
        out *= coeff / sigma;
    }
    Ok((out, sigma))
}

/// Lipschitz bound of the residual feature map from per-layer spectral norms.
pub fn residual_lipschitz_bound(input_norm: f64, block_norms: &[f64]) -> f64 {
    block_norms.iter().fold(input_norm, |acc, s| acc * (1.0 + s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub sn_enabled: bool,
    pub sn_coeff: f64,
    pub sn_power_iters: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 128,
            seed: 0,
            sn_enabled: true,
            sn_coeff: 1.0,
            sn_power_iters: 1,
            hidden_dim: 128,
            num_blocks: 4,
            activation: Activation::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and > 0"));
        }
        if !(self.momentum >= 0.0) || !self.momentum.is_finite() {
            return Err(Error::invalid("momentum must be finite and >= 0"));
        }
        if !(self.sn_coeff > 0.0) || self.sn_power_iters == 0 {
            return Err(Error::invalid("sn_coeff must be > 0 and sn_power_iters >= 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnMlp {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub sn_enabled: bool,
    pub sn_coeff: f64,
    pub sn_power_iters: usize,
    /// Input layer, the residual blocks, then the classifier.
    layers: Vec<Dense>,
    /// Persistent left singular vectors, one per normalized layer.
    sn_vectors: Vec<Array1<f64>>,
}

/// Per-layer parameter gradients in the same order as [`SnMlp::layers`].
pub type Gradients = Vec<Dense>;

struct ForwardCache {
    /// Pre-activations of the input layer and each block.
    pre: Vec<Array2<f64>>,
    /// h_0 ..= h_K.
    hidden: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl SnMlp {
    /// Randomly initialized model; weights are uniform in +-1/sqrt(fan_in),
    /// with the classifier scaled down a further 10x.
    pub fn new(input_dim: usize, num_classes: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::invalid("input_dim and num_classes must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_dim;
        let mut layers = vec![Dense::uniform_fan_in(h, input_dim, &mut rng)];
        for _ in 0..config.num_blocks {
            layers.push(Dense::uniform_fan_in(h, h, &mut rng));
        }
        let mut classifier = Dense::uniform_fan_in(num_classes, h, &mut rng);
        // small initial logits keep the starting loss near ln(C)
        classifier.weight *= CLASSIFIER_INIT_SCALE;
        classifier.bias *= CLASSIFIER_INIT_SCALE;
        layers.push(classifier);
        let sn_vectors = (0..config.num_blocks).map(|_| random_unit(h, &mut rng)).collect();
        let mut model = Self {
            input_dim,
            hidden_dim: h,
            num_blocks: config.num_blocks,
            num_classes,
            activation: config.activation,
            sn_enabled: config.sn_enabled,
            sn_coeff: config.sn_coeff,
            sn_power_iters: config.sn_power_iters,
            layers,
            sn_vectors,
        };
        if model.sn_enabled {
            model.apply_spectral_norm();
        }
        Ok(model)
    }

    /// All weights and biases zero.
    pub fn zeros(input_dim: usize, num_classes: usize, config: &TrainConfig) -> Result<Self> {
        let mut m = Self::new(input_dim, num_classes, config)?;
        for layer in &mut m.layers {
            let (o, n) = layer.weight.dim();
            *layer = Dense::zeros(o, n);
        }
        Ok(m)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn classifier(&self) -> &Dense {
        self.layers.last().expect("classifier layer")
    }

    /// Layers subject to spectral normalization: the residual blocks.
    pub fn normalized_layers(&self) -> &[Dense] {
        &self.layers[1..=self.num_blocks]
    }

    pub fn sn_vectors(&self) -> &[Array1<f64>] {
        &self.sn_vectors
    }

    /// Rescales each block weight to spectral norm at most `sn_coeff`.
    pub fn apply_spectral_norm(&mut self) {
        let min_iters = self.sn_power_iters;
        for (layer, u) in self.layers[1..=self.num_blocks].iter_mut().zip(&mut self.sn_vectors) {
            let sigma = power_iteration_tol(layer.weight.view(), u, min_iters, SN_MAX_ITERS, SN_REL_TOL);
            if sigma > self.sn_coeff {
                layer.weight *= self.sn_coeff / sigma;
            }
        }
    }

    /// Power-iteration estimates of every normalized layer's spectral norm,
    /// continuing from copies of the persistent vectors.
    pub fn spectral_estimates(&self, iters: usize) -> Vec<f64> {
        self.normalized_layers()
            .iter()
            .zip(&self.sn_vectors)
            .map(|(layer, u)| power_iteration(layer.weight.view(), &mut u.clone(), iters))
            .collect()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: x.ncols() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }
        Ok(())
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> ForwardCache {
        let act = self.activation;
        let mut pre = Vec::with_capacity(self.num_blocks + 1);
        let mut hidden = Vec::with_capacity(self.num_blocks + 1);
        let a0 = self.layers[0].apply(x);
        hidden.push(a0.mapv(|v| act.apply(v)));
        pre.push(a0);
        for layer in &self.layers[1..=self.num_blocks] {
            let prev = hidden.last().unwrap();
            let a = layer.apply(prev.view());
            let h = prev + &a.mapv(|v| act.apply(v));
            pre.push(a);
            hidden.push(h);
        }
        let logits = self.classifier().apply(hidden.last().unwrap().view());
        ForwardCache { pre, hidden, logits }
    }

    /// Penultimate features (`batch x hidden_dim`) and logits (`batch x C`).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(&x)?;
        let mut cache = self.forward_cached(x);
        Ok((cache.hidden.pop().unwrap(), cache.logits))
    }

    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let (_, logits) = self.forward(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0)
            .collect())
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        self.check_batch(&x, labels)?;
        let cache = self.forward_cached(x);
        Ok(cross_entropy(&cache.logits, labels).0)
    }

    fn check_batch(&self, x: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        self.check_input(x)?;
        if x.nrows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), got: labels.len() });
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::invalid(format!("label {l} outside [0, {})", self.num_classes)));
        }
        Ok(())
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_gradients(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Gradients)> {
        self.check_batch(&x, labels)?;
        Ok(self.backprop(x, labels))
    }

    fn backprop(&self, x: ArrayView2<f64>, labels: &[usize]) -> (f64, Gradients) {
        let act = self.activation;
        let k = self.num_blocks;
        let cache = self.forward_cached(x);
        let (loss, dlogits) = cross_entropy(&cache.logits, labels);

        let mut grads: Vec<Dense> = Vec::with_capacity(k + 2);
        let classifier = self.classifier();
        let h_top = &cache.hidden[k];
        grads.push(Dense { weight: dlogits.t().dot(h_top), bias: dlogits.sum_axis(Axis(0)) });
        let mut dh = dlogits.dot(&classifier.weight);

        for b in (1..=k).rev() {
            let mut da = dh.clone();
            da.zip_mut_with(&cache.pre[b], |g, &a| *g *= act.derivative(a));
            let h_prev = &cache.hidden[b - 1];
            grads.push(Dense { weight: da.t().dot(h_prev), bias: da.sum_axis(Axis(0)) });
            dh += &da.dot(&self.layers[b].weight);
        }

        let mut da = dh;
        da.zip_mut_with(&cache.pre[0], |g, &a| *g *= act.derivative(a));
        grads.push(Dense { weight: da.t().dot(&x), bias: da.sum_axis(Axis(0)) });

        grads.reverse();
        (loss, grads)
    }

    /// Largest observed `|f(a) - f(b)| / |a - b|` over the given input pairs.
    pub fn lipschitz_probe(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::invalid("no input pairs"));
        }
        let mut a = Array2::zeros((pairs.len(), self.input_dim));
        let mut b = Array2::zeros((pairs.len(), self.input_dim));
        for (i, (p, q)) in pairs.iter().enumerate() {
            if p.len() != self.input_dim || q.len() != self.input_dim {
                return Err(Error::DimensionMismatch { expected: self.input_dim, got: p.len().max(q.len()) });
            }
            if p == q {
                return Err(Error::invalid(format!("pair {i} has coincident points")));
            }
            a.row_mut(i).assign(&ArrayView1::from(p));
            b.row_mut(i).assign(&ArrayView1::from(q));
        }
        let fa = self.features(a.view())?;
        let fb = self.features(b.view())?;
        let ratio = |i: usize| {
            let num = (&fa.row(i) - &fb.row(i)).mapv(|v| v * v).sum().sqrt();
            let den = (&a.row(i) - &b.row(i)).mapv(|v| v * v).sum().sqrt();
            num / den
        };
        Ok((0..pairs.len()).map(ratio).fold(0.0, f64::max))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut input)
    }

    /// Checkpoint layout (little-endian): magic `SNML`, version u32, then
    /// u64 input_dim, hidden_dim, num_blocks, num_classes, u32 activation,
    /// u32 sn_enabled, f64 sn_coeff, u64 sn_power_iters; then every matrix as
    /// (u64 rows, u64 cols, rows*cols f64 row-major). Matrices are each
    /// layer's weight followed by its bias as a 1 x n matrix, in layer order,
    /// then each persistent power-iteration vector as a 1 x n matrix.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [self.input_dim, self.hidden_dim, self.num_blocks, self.num_classes] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.activation.code().to_le_bytes())?;
        w.write_all(&u32::from(self.sn_enabled).to_le_bytes())?;
        w.write_all(&self.sn_coeff.to_le_bytes())?;
        w.write_all(&(self.sn_power_iters as u64).to_le_bytes())?;
        let mut put = |rows: usize, cols: usize, data: &mut dyn Iterator<Item = &f64>| -> Result<()> {
            w.write_all(&(rows as u64).to_le_bytes())?;
            w.write_all(&(cols as u64).to_le_bytes())?;
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for layer in &self.layers {
            let (r, c) = layer.weight.dim();
            put(r, c, &mut layer.weight.iter())?;
            put(1, layer.bias.len(), &mut layer.bias.iter())?;
        }
        for u in &self.sn_vectors {
            put(1, u.len(), &mut u.iter())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic, not an SNML checkpoint"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let input_dim = read_u64(r)? as usize;
        let hidden_dim = read_u64(r)? as usize;
        let num_blocks = read_u64(r)? as usize;
        let num_classes = read_u64(r)? as usize;
        let activation = Activation::from_code(read_u32(r)?).ok_or_else(|| bad("unknown activation"))?;
        let sn_enabled = read_u32(r)? != 0;
        let sn_coeff = read_f64(r)?;
        let sn_power_iters = read_u64(r)? as usize;

        let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<f64>> {
            let (rr, cc) = (read_u64(r)? as usize, read_u64(r)? as usize);
            if (rr, cc) != (rows, cols) {
                return Err(Error::Checkpoint(format!("matrix shape {rr}x{cc}, expected {rows}x{cols}")));
            }
            let data = (0..rows * cols).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
        };
        let mut shapes = vec![(hidden_dim, input_dim)];
        shapes.extend(std::iter::repeat_n((hidden_dim, hidden_dim), num_blocks));
        shapes.push((num_classes, hidden_dim));
        let mut layers = Vec::with_capacity(shapes.len());
        for (o, i) in shapes {
            let weight = read_matrix(o, i)?;
            let bias = read_matrix(1, o)?.into_shape_with_order(o).expect("1 x o");
            layers.push(Dense { weight, bias });
        }
        let sn_vectors = (0..num_blocks)
            .map(|_| Ok(read_matrix(1, hidden_dim)?.into_shape_with_order(hidden_dim).expect("1 x h")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input_dim,
            hidden_dim,
            num_blocks,
            num_classes,
            activation,
            sn_enabled,
            sn_coeff,
            sn_power_iters,
            layers,
            sn_vectors,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn random_unit(n: usize, rng: &mut impl Rng) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v / norm
    } else {
        Array1::from_elem(n, 1.0 / (n as f64).sqrt())
    }
}

/// Mean cross-entropy and d(loss)/d(logits).
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
        loss -= row[y].ln();
        row[y] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}

/// What the training loop reports after each epoch.
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub mean_loss: f64,
    pub model: &'a SnMlp,
}

/// Minibatch SGD with momentum on softmax cross-entropy.
pub fn train(dataset: &LabeledDataset2D, config: &TrainConfig) -> Result<(SnMlp, Vec<f64>)> {
    train_with(dataset.points.view(), &dataset.labels, dataset.num_classes, config, |_| {})
}

/// [`train`] over arbitrary inputs, calling `on_epoch` after every epoch.
///
/// Each step updates `v <- momentum * v + g; w <- w - lr * v` and, with
/// spectral normalization on, then rescales every block weight matrix using
/// its persistent power-iteration vector.
pub fn train_with(
    inputs: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(EpochReport<'_>),
) -> Result<(SnMlp, Vec<f64>)> {
    config.validate()?;
    if inputs.nrows() == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    let mut model = SnMlp::new(inputs.ncols(), num_classes, config)?;
    model.check_batch(&inputs, labels)?;

    // shuffling draws from its own stream so it never aliases the init stream
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut velocity: Gradients = model.layers.iter().map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols())).collect();
    let mut order: Vec<usize> = (0..inputs.nrows()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let width = inputs.ncols();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut xb = Array2::zeros((batch.len(), width));
            let mut yb = Vec::with_capacity(batch.len());
            for (row, &i) in batch.iter().enumerate() {
                xb.row_mut(row).assign(&inputs.row(i));
                yb.push(labels[i]);
            }
            let (loss, grads) = model.backprop(xb.view(), &yb);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;

            for ((layer, vel), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                vel.weight *= config.momentum;
                vel.weight += &g.weight;
                vel.bias *= config.momentum;
                vel.bias += &g.bias;
                layer.weight.scaled_add(-config.learning_rate, &vel.weight);
                layer.bias.scaled_add(-config.learning_rate, &vel.bias);
            }
            if model.sn_enabled {
                model.apply_spectral_norm();
            }
        }
        let mean_loss = total / inputs.nrows() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean_loss });
        }
        curve.push(mean_loss);
        on_epoch(EpochReport { epoch, mean_loss, model: &model });
    }
    Ok((model, curve))
}
