//! Center-constraint mapping network.
//!
//! A two-layer perceptron (`C -> hidden -> C_f`, ReLU between, linear output)
//! is trained with Adam to pull mapped repository rows toward their mini-batch
//! mean under an L1 penalty. Training stops early once the epoch loss falls to
//! `eta` times the first epoch's loss, before the mapping collapses to a point.
//!
//! The math is generic over `f32` (production) and `f64` (gradient checks).

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::distributions::Open01;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::selector::{MappedRepository, Repository};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

pub trait Real: Float + Sum + Debug + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
fn cast<T: Real>(v: f64) -> T {
    T::from(v).expect("finite f64 converts")
}

/// Dot product with four interleaved accumulators. The summation order only
/// depends on the slice length, so a row gives the same result in any batch.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4 * 4;
    for (x, y) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        acc[0] = acc[0] + x[0] * y[0];
        acc[1] = acc[1] + x[1] * y[1];
        acc[2] = acc[2] + x[2] * y[2];
        acc[3] = acc[3] + x[3] * y[3];
    }
    let mut tail = T::zero();
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        tail = tail + *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// `out[n][j] = bias[j] + dot(input[n], weight[j])` for an `n x k` input and
/// `m x k` weight.
fn affine<T: Real>(input: &[T], k: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let n = input.len() / k;
    let m = bias.len();
    let mut out = vec![T::zero(); n * m];
    const BLOCK: usize = 8;
    for (rows_in, rows_out) in input.chunks(BLOCK * k).zip(out.chunks_mut(BLOCK * m)) {
        for (j, w) in weight.chunks_exact(k).enumerate() {
            for (x, o) in rows_in.chunks_exact(k).zip(rows_out.chunks_exact_mut(m)) {
                o[j] = bias[j] + dot(x, w);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    /// First moments in parameter order `w1, b1, w2, b2`.
    pub first: [Vec<T>; 4],
    /// Second moments in the same order.
    pub second: [Vec<T>; 4],
}

/// Weights of the mapping network plus optimizer state.
///
/// `w1` is `hidden x input` and `w2` is `output x hidden`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T = f32> {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub adam: AdamState<T>,
}

/// Gradients in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn as_slices(&self) -> [&[T]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

impl<T: Real> MlpParams<T> {
    /// Zero-initialized network with fresh optimizer state.
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        let sizes = [hidden * input, hidden, output * hidden, output];
        Self {
            input,
            hidden,
            output,
            w1: vec![T::zero(); sizes[0]],
            b1: vec![T::zero(); sizes[1]],
            w2: vec![T::zero(); sizes[2]],
            b2: vec![T::zero(); sizes[3]],
            adam: AdamState {
                step: 0,
                first: sizes.map(|s| vec![T::zero(); s]),
                second: sizes.map(|s| vec![T::zero(); s]),
            },
        }
    }

    pub fn tensors(&self) -> [&[T]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) (open interval), biases zero.
/// `w1` is drawn first, then `w2`, both row-major.
pub fn init_mlp<R: Rng + ?Sized, T: Real>(
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut R,
) -> Result<MlpParams<T>> {
    if input == 0 || hidden == 0 || output == 0 {
        return Err(Error::argument(
            "learner",
            format!("network dimensions must be positive, got {input}/{hidden}/{output}"),
        ));
    }
    let mut params = MlpParams::zeros(input, hidden, output);
    let mut fill = |values: &mut Vec<T>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in values.iter_mut() {
            let u: f64 = rng.sample(Open01);
            *v = cast((2.0 * u - 1.0) * bound);
        }
    };
    fill(&mut params.w1, input);
    fill(&mut params.w2, hidden);
    Ok(params)
}

/// Intermediate activations kept for backpropagation.
struct Activations<T> {
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
    output: Vec<T>,
}

fn check_batch<T: Real>(params: &MlpParams<T>, batch: &[T]) -> Result<usize> {
    if batch.len() % params.input != 0 {
        return Err(Error::argument(
            "learner",
            format!(
                "batch of {} values is not a whole number of {}-dimensional rows",
                batch.len(),
                params.input
            ),
        ));
    }
    Ok(batch.len() / params.input)
}

fn forward_cached<T: Real>(params: &MlpParams<T>, batch: &[T]) -> Activations<T> {
    let hidden_pre = affine(batch, params.input, &params.w1, &params.b1);
    let hidden: Vec<T> = hidden_pre.iter().map(|&v| v.max(T::zero())).collect();
    let output = affine(&hidden, params.hidden, &params.w2, &params.b2);
    Activations {
        hidden_pre,
        hidden,
        output,
    }
}

/// Maps every row of an `N x input` batch: `W2 relu(W1 v + b1) + b2`.
pub fn forward<T: Real>(params: &MlpParams<T>, batch: &[T]) -> Result<Vec<T>> {
    check_batch(params, batch)?;
    Ok(forward_cached(params, batch).output)
}

/// L1 distance of every row to the row mean, summed, with its gradient.
///
/// With `detach_center` the mean is treated as a constant; otherwise the
/// gradient also flows through the mean. The subgradient of `|x|` at 0 is 0.
pub fn center_loss<T: Real>(mapped: &[T], dim: usize, detach_center: bool) -> (f64, Vec<T>) {
    let n = mapped.len() / dim;
    if n == 0 {
        return (0.0, Vec::new());
    }
    // Mean taken as an offset from the first row so that identical rows give
    // a center equal to them exactly.
    let first = &mapped[..dim];
    let mut offset = vec![T::zero(); dim];
    for row in mapped.chunks_exact(dim).skip(1) {
        for d in 0..dim {
            offset[d] = offset[d] + (row[d] - first[d]);
        }
    }
    let inv_n = cast::<T>(1.0 / n as f64);
    let center: Vec<T> = first.iter().zip(&offset).map(|(&f, &o)| f + o * inv_n).collect();

    let mut loss = 0.0f64;
    let mut signs = vec![T::zero(); mapped.len()];
    let mut sign_mean = vec![T::zero(); dim];
    for (row, s) in mapped.chunks_exact(dim).zip(signs.chunks_exact_mut(dim)) {
        for d in 0..dim {
            let diff = center[d] - row[d];
            loss += diff.abs().to_f64().unwrap();
            s[d] = if diff > T::zero() {
                T::one()
            } else if diff < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
        }
        if !detach_center {
            axpy(T::one(), s, &mut sign_mean);
        }
    }
    sign_mean.iter_mut().for_each(|v| *v = *v * inv_n);

    let grad = signs
        .chunks_exact(dim)
        .flat_map(|s| s.iter().zip(&sign_mean).map(|(&si, &mi)| mi - si))
        .collect();
    (loss, grad)
}

/// Center loss of the mapped batch and its gradient with respect to every
/// parameter.
pub fn loss_and_gradients<T: Real>(
    params: &MlpParams<T>,
    batch: &[T],
    detach_center: bool,
) -> Result<(f64, Gradients<T>)> {
    let n = check_batch(params, batch)?;
    let act = forward_cached(params, batch);
    let (loss, d_out) = center_loss(&act.output, params.output, detach_center);
    let (k, h, m) = (params.input, params.hidden, params.output);

    let mut g = Gradients {
        w1: vec![T::zero(); h * k],
        b1: vec![T::zero(); h],
        w2: vec![T::zero(); m * h],
        b2: vec![T::zero(); m],
    };
    let mut d_hidden = vec![T::zero(); n * h];
    for i in 0..n {
        let dy = &d_out[i * m..(i + 1) * m];
        let hid = &act.hidden[i * h..(i + 1) * h];
        let dh = &mut d_hidden[i * h..(i + 1) * h];
        for (d, &gy) in dy.iter().enumerate() {
            if gy == T::zero() {
                continue;
            }
            g.b2[d] = g.b2[d] + gy;
            axpy(gy, hid, &mut g.w2[d * h..(d + 1) * h]);
            axpy(gy, &params.w2[d * h..(d + 1) * h], dh);
        }
        for (v, &pre) in dh.iter_mut().zip(&act.hidden_pre[i * h..(i + 1) * h]) {
            if pre <= T::zero() {
                *v = T::zero();
            }
        }
        let x = &batch[i * k..(i + 1) * k];
        for (j, &gh) in dh.iter().enumerate() {
            if gh == T::zero() {
                continue;
            }
            g.b1[j] = g.b1[j] + gh;
            axpy(gh, x, &mut g.w1[j * k..(j + 1) * k]);
        }
    }
    Ok((loss, g))
}

/// One bias-corrected Adam update.
pub fn adam_update<T: Real>(params: &mut MlpParams<T>, grads: &Gradients<T>, learning_rate: f64) {
    params.adam.step += 1;
    let t = params.adam.step as i32;
    let correction1 = 1.0 - ADAM_BETA1.powi(t);
    let correction2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (cast::<T>(ADAM_BETA1), cast::<T>(ADAM_BETA2));
    let (one_b1, one_b2) = (cast::<T>(1.0 - ADAM_BETA1), cast::<T>(1.0 - ADAM_BETA2));
    let step = cast::<T>(learning_rate / correction1);
    let inv_c2 = cast::<T>(1.0 / correction2);
    let eps = cast::<T>(ADAM_EPSILON);

    let MlpParams {
        w1, b1: bias1, w2, b2: bias2, adam, ..
    } = params;
    let AdamState { first, second, .. } = adam;
    let tensors = [w1, bias1, w2, bias2];
    for (((p, g), m), v) in tensors
        .into_iter()
        .zip(grads.as_slices())
        .zip(first.iter_mut())
        .zip(second.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            p[i] = p[i] - step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Early-stop ratio: stop once the epoch loss is at most `eta` times the
    /// first epoch's loss.
    pub eta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// Treat the batch mean as a constant when differentiating.
    pub detach_center: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            eta: 0.8,
            batch_size: 256,
            max_epochs: 200,
            hidden: 1024,
            out_dim: 512,
            detach_center: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::argument("learner", m));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.hidden == 0 || self.out_dim == 0 {
            return bad("batch size, epoch cap and layer widths must be positive".into());
        }
        Ok(())
    }
}

/// Applies one optimizer step on `batch` and returns the pre-update loss.
pub fn train_step<T: Real>(params: &mut MlpParams<T>, batch: &[T], config: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::argument("learner", "empty training batch"));
    }
    let (loss, grads) = loss_and_gradients(params, batch, config.detach_center)?;
    if !loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {loss} at optimizer step {}",
            params.adam.step + 1
        )));
    }
    adam_update(params, &grads, config.learning_rate);
    if !params.is_finite() {
        return Err(Error::Training(format!(
            "parameters became non-finite at optimizer step {}",
            params.adam.step
        )));
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ConditionMet,
    MaxEpochs,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::ConditionMet => "condition_met",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean mini-batch loss of every completed epoch.
    pub losses: Vec<f64>,
    pub l_start: f64,
    pub stopped_epoch: usize,
    pub stop_reason: StopReason,
}

/// Early-stop rule: after epoch 1 fixes the reference loss, stop at the first
/// later epoch whose loss is at most `eta` times it.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    eta: f64,
    start: Option<f64>,
    epochs: usize,
}

impl EarlyStop {
    pub fn new(eta: f64) -> Self {
        Self {
            eta,
            start: None,
            epochs: 0,
        }
    }

    /// Records an epoch loss; returns true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epochs += 1;
        match self.start {
            None => {
                self.start = Some(loss);
                false
            }
            Some(start) => loss <= self.eta * start,
        }
    }

    pub fn start(&self) -> Option<f64> {
        self.start
    }
}

/// Trains a freshly initialized network on the repository rows.
///
/// Initialization uses stream `INIT` and batch order stream `SHUFFLE`, both
/// derived from `config.seed`. Each epoch visits the rows in a new shuffled
/// order in batches of `batch_size` (the last batch may be smaller).
pub fn train(repo: &Repository, config: &TrainConfig) -> Result<(MlpParams<f32>, TrainHistory)> {
    config.validate()?;
    if repo.is_empty() {
        return Err(Error::argument("learner", "cannot train on an empty repository"));
    }
    let dim = repo.dim();
    let mut params: MlpParams<f32> = init_mlp(
        dim,
        config.hidden,
        config.out_dim,
        &mut rng::stream(config.seed, rng::INIT),
    )?;
    let mut shuffle = rng::stream(config.seed, rng::SHUFFLE);
    let mut order: Vec<usize> = (0..repo.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size * dim);
    let mut stop = EarlyStop::new(config.eta);
    let mut losses = Vec::new();
    let mut reason = StopReason::MaxEpochs;

    for _ in 0..config.max_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            for &i in chunk {
                batch.extend_from_slice(repo.row(i));
            }
            total += train_step(&mut params, &batch, config)?;
            batches += 1;
        }
        let epoch_loss = total / batches as f64;
        losses.push(epoch_loss);
        if stop.observe(epoch_loss) {
            reason = StopReason::ConditionMet;
            break;
        }
    }

    let history = TrainHistory {
        l_start: losses[0],
        stopped_epoch: losses.len(),
        stop_reason: reason,
        losses,
    };
    Ok((params, history))
}

/// How test and repository features are projected before nearest-neighbour
/// search.
#[derive(Debug, Clone, PartialEq)]
pub enum Mapping {
    Identity,
    Mlp(MlpParams<f32>),
}

impl Mapping {
    pub fn output_dim(&self, input: usize) -> usize {
        match self {
            Mapping::Identity => input,
            Mapping::Mlp(p) => p.output,
        }
    }

    /// Maps a row-major batch of `input`-dimensional rows.
    pub fn apply(&self, rows: Vec<f32>, input: usize) -> Result<Vec<f32>> {
        match self {
            Mapping::Identity => Ok(rows),
            Mapping::Mlp(p) => {
                if p.input != input {
                    return Err(Error::argument(
                        "learner",
                        format!("network expects {} inputs, features have {input}", p.input),
                    ));
                }
                forward(p, &rows)
            }
        }
    }
}

/// Passes every repository row through the network, keeping order and
/// provenance.
pub fn map_repository(params: &MlpParams<f32>, repo: &Repository) -> Result<MappedRepository> {
    if params.input != repo.dim() {
        return Err(Error::argument(
            "learner",
            format!(
                "network expects {} inputs, repository rows have {}",
                params.input,
                repo.dim()
            ),
        ));
    }
    let mapped = forward(params, repo.data())?;
    repo.with_rows(params.output, mapped)
}
