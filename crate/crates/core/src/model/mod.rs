//! The localization network: a ReLU multilayer perceptron over normalized
//! `[q; τ]` with either a 3D regression head or an `(n + 1)`-way softmax head.
//! Forward and backward passes are written by hand over row-major batches.

mod adam;
mod io;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use io::{load_model, model_from_json, model_to_json, save_model, MODEL_SCHEMA};
pub use train::{fit, train, EpochStats, TrainConfig, TrainOutcome};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{decode_class, ClassLabel, DatasetError, NormalizationStats};
use crate::geometry::Vec3;
use crate::kinematics::Robot;
use crate::scalar::{axpy, dot, Real};

pub const HIDDEN_WIDTHS: [usize; 4] = [64, 128, 256, 128];
pub const DROPOUT_RATE: f64 = 0.3;
/// Regression outputs closer than this to the origin (meters) mean "no contact".
pub const NO_CONTACT_RADIUS: f64 = 0.03;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("target kind does not match the {0:?} head")]
    HeadMismatch(Head),
    #[error("class {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid model file: {0}")]
    Schema(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Regression,
    Classification { n_points: usize },
}

impl Head {
    pub fn out_width(&self) -> usize {
        match *self {
            Head::Regression => 3,
            Head::Classification { n_points } => n_points + 1,
        }
    }
}

/// Which forward pass to run. Training draws dropout masks from the given generator.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Dense layer `y = W x + b` with `W` stored row-major (`n_out × n_in`).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> Layer<T> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, w: vec![T::zero(); n_in * n_out], b: vec![T::zero(); n_out] }
    }

    pub fn row(&self, o: usize) -> &[T] {
        &self.w[o * self.n_in..(o + 1) * self.n_in]
    }

    fn fill_zero(&mut self) {
        self.w.iter_mut().for_each(|v| *v = T::zero());
        self.b.iter_mut().for_each(|v| *v = T::zero());
    }

    fn forward_batch(&self, x: &[T], batch: usize, out: &mut [T]) {
        for (xb, yb) in x.chunks_exact(self.n_in).zip(out.chunks_exact_mut(self.n_out)).take(batch) {
            for (o, y) in yb.iter_mut().enumerate() {
                *y = self.b[o] + dot(self.row(o), xb);
            }
        }
    }
}

/// Training targets for a batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a, T> {
    /// Row-major `batch × 3` locations, meters.
    Positions(&'a [T]),
    Classes(&'a [usize]),
}

impl<T> Targets<'_, T> {
    fn batch(&self) -> usize {
        match self {
            Targets::Positions(p) => p.len() / 3,
            Targets::Classes(c) => c.len(),
        }
    }
}

/// Mean loss of a batch of head outputs: MSE over coordinates and samples for
/// regression, cross-entropy of the true class for classification (outputs are
/// probabilities).
pub fn loss<T: Real>(head: Head, output: &[T], targets: Targets<'_, T>) -> Result<T> {
    let width = head.out_width();
    let batch = targets.batch();
    if batch == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if output.len() != batch * width {
        return Err(ModelError::DimensionMismatch { expected: batch * width, got: output.len() });
    }
    match (head, targets) {
        (Head::Regression, Targets::Positions(p)) => {
            let sum: T = output.iter().zip(p).map(|(&y, &t)| (y - t) * (y - t)).sum();
            Ok(sum / T::lit((3 * batch) as f64))
        }
        (Head::Classification { .. }, Targets::Classes(c)) => {
            let mut sum = T::zero();
            for (row, &k) in output.chunks_exact(width).zip(c) {
                if k >= width {
                    return Err(ModelError::ClassOutOfRange { class: k, n_classes: width });
                }
                sum -= row[k].ln();
            }
            Ok(sum / T::lit(batch as f64))
        }
        _ => Err(ModelError::HeadMismatch(head)),
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Lowest index among maximal entries.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Activations recorded by a batched forward pass, reused across batches.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    batch: usize,
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<T>>,
    /// Dropout scale per hidden unit; empty in eval mode.
    masks: Vec<Vec<T>>,
    deltas: [Vec<T>; 2],
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Buffers for allocation-free single-sample prediction.
#[derive(Debug, Clone)]
pub struct Workspace<T> {
    input: Vec<T>,
    bufs: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub location: Vec3<T>,
    /// Class distribution, classification only.
    pub probabilities: Option<Vec<T>>,
    pub contact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    pub robot: String,
    pub dof: usize,
    pub head: Head,
    pub dropout: f64,
    pub layers: Vec<Layer<T>>,
    pub stats: NormalizationStats<T>,
}

impl<T: Real> MlpModel<T> {
    /// Standard architecture with fan-in scaled uniform weights and zero biases.
    pub fn new(dof: usize, head: Head, seed: u64) -> Self {
        Self::with_hidden(dof, head, &HIDDEN_WIDTHS, seed)
    }

    pub fn with_hidden(dof: usize, head: Head, hidden: &[usize], seed: u64) -> Self {
        let mut model = Self::zeros_with_hidden(dof, head, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let bound = (6.0 / layer.n_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut layer.w {
                *w = T::lit(dist.sample(&mut rng));
            }
        }
        model
    }

    pub fn zeros(dof: usize, head: Head) -> Self {
        Self::zeros_with_hidden(dof, head, &HIDDEN_WIDTHS)
    }

    pub fn zeros_with_hidden(dof: usize, head: Head, hidden: &[usize]) -> Self {
        let mut widths = vec![2 * dof];
        widths.extend_from_slice(hidden);
        widths.push(head.out_width());
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Self {
            robot: String::new(),
            dof,
            head,
            dropout: DROPOUT_RATE,
            layers,
            stats: NormalizationStats::identity(2 * dof),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.n_out));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(2 * self.dof, |l| l.n_in)
    }

    pub fn output_width(&self) -> usize {
        self.head.out_width()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameter slices in a fixed order: each layer's weights, then its biases.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()]).collect()
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| [l.w.as_slice(), l.b.as_slice()]).collect()
    }

    /// Zero-valued parameters of the same shape, used as a gradient buffer.
    pub fn zero_grads(&self) -> Vec<Layer<T>> {
        self.layers.iter().map(|l| Layer::zeros(l.n_in, l.n_out)).collect()
    }

    pub fn cast<U: Real>(&self) -> MlpModel<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::lit(x.to_f64_lossy())).collect();
        MlpModel {
            robot: self.robot.clone(),
            dof: self.dof,
            head: self.head,
            dropout: self.dropout,
            layers: self.layers.iter().map(|l| Layer { n_in: l.n_in, n_out: l.n_out, w: c(&l.w), b: c(&l.b) }).collect(),
            stats: self.stats.cast(),
        }
    }

    /// Forward pass over `batch` normalized inputs stored row-major in `x`.
    /// Outputs are locations (regression) or probabilities (classification).
    pub fn forward_batch(&self, x: &[T], batch: usize, mut pass: Pass<'_>, tape: &mut Tape<T>) -> Result<()> {
        let n_in = self.input_width();
        if batch == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if x.len() != batch * n_in {
            return Err(ModelError::DimensionMismatch { expected: batch * n_in, got: x.len() });
        }
        let n_layers = self.layers.len();
        tape.batch = batch;
        tape.acts.resize_with(n_layers + 1, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        let train = matches!(pass, Pass::Train(_));
        tape.masks.resize_with(n_layers - 1, Vec::new);
        let keep_scale = T::lit(1.0 / (1.0 - self.dropout));

        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = tape.acts.split_at_mut(l + 1);
            let out = &mut after[0];
            out.resize(batch * layer.n_out, T::zero());
            layer.forward_batch(&before[l], batch, out);
            if l + 1 < n_layers {
                for v in out.iter_mut() {
                    *v = v.max(T::zero());
                }
                let mask = &mut tape.masks[l];
                if let Pass::Train(rng) = &mut pass {
                    mask.resize(out.len(), T::zero());
                    for (m, v) in mask.iter_mut().zip(out.iter_mut()) {
                        *m = if rng.random::<f64>() < self.dropout { T::zero() } else { keep_scale };
                        *v *= *m;
                    }
                } else {
                    mask.clear();
                }
            } else if let Head::Classification { .. } = self.head {
                for row in out.chunks_exact_mut(layer.n_out) {
                    softmax_in_place(row);
                }
            }
        }
        if !train {
            tape.masks.iter_mut().for_each(Vec::clear);
        }
        Ok(())
    }

    /// Single-sample forward pass on a normalized input.
    pub fn forward(&self, x: &[T], pass: Pass<'_>) -> Result<Vec<T>> {
        let mut tape = Tape::default();
        self.forward_batch(x, 1, pass, &mut tape)?;
        Ok(tape.output().to_vec())
    }

    /// Accumulates gradients of the mean batch loss into `grads` and returns the loss.
    /// `tape` must hold the forward pass for the same batch.
    pub fn backward(&self, tape: &mut Tape<T>, targets: Targets<'_, T>, grads: &mut [Layer<T>]) -> Result<T> {
        let batch = tape.batch;
        if targets.batch() != batch {
            return Err(ModelError::DimensionMismatch { expected: batch, got: targets.batch() });
        }
        if grads.len() != self.layers.len() {
            return Err(ModelError::DimensionMismatch { expected: self.layers.len(), got: grads.len() });
        }
        let value = loss(self.head, tape.output(), targets)?;
        let width = self.output_width();
        let [mut delta, mut next] = std::mem::take(&mut tape.deltas);
        delta.clear();
        delta.extend_from_slice(tape.output());
        match targets {
            Targets::Positions(p) => {
                let scale = T::lit(2.0 / (3 * batch) as f64);
                for (d, &t) in delta.iter_mut().zip(p) {
                    *d = (*d - t) * scale;
                }
            }
            Targets::Classes(c) => {
                let scale = T::lit(1.0 / batch as f64);
                for (row, &k) in delta.chunks_exact_mut(width).zip(c) {
                    row[k] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads[l];
            let input = &tape.acts[l];
            for (xb, db) in input.chunks_exact(layer.n_in).zip(delta.chunks_exact(layer.n_out)) {
                for (o, &d) in db.iter().enumerate() {
                    if d != T::zero() {
                        axpy(d, xb, &mut g.w[o * layer.n_in..(o + 1) * layer.n_in]);
                        g.b[o] += d;
                    }
                }
            }
            if l == 0 {
                break;
            }
            next.clear();
            next.resize(batch * layer.n_in, T::zero());
            for (nb, db) in next.chunks_exact_mut(layer.n_in).zip(delta.chunks_exact(layer.n_out)) {
                for (o, &d) in db.iter().enumerate() {
                    if d != T::zero() {
                        axpy(d, layer.row(o), nb);
                    }
                }
            }
            // Through ReLU and dropout of the previous hidden layer.
            let mask = &tape.masks[l - 1];
            for (i, (n, &a)) in next.iter_mut().zip(input.iter()).enumerate() {
                if a <= T::zero() {
                    *n = T::zero();
                } else if !mask.is_empty() {
                    *n *= mask[i];
                }
            }
            std::mem::swap(&mut delta, &mut next);
        }
        tape.deltas = [delta, next];
        Ok(value)
    }

    /// Eval-mode loss and gradients for a batch; used for gradient checks.
    pub fn loss_and_gradients(&self, x: &[T], targets: Targets<'_, T>) -> Result<(T, Vec<Layer<T>>)> {
        let mut tape = Tape::default();
        self.forward_batch(x, targets.batch(), Pass::Eval, &mut tape)?;
        let mut grads = self.zero_grads();
        let value = self.backward(&mut tape, targets, &mut grads)?;
        Ok((value, grads))
    }

    /// Eval-mode batch loss.
    pub fn batch_loss(&self, x: &[T], targets: Targets<'_, T>) -> Result<T> {
        let mut tape = Tape::default();
        self.forward_batch(x, targets.batch(), Pass::Eval, &mut tape)?;
        loss(self.head, tape.output(), targets)
    }

    pub fn workspace(&self) -> Workspace<T> {
        Workspace {
            input: vec![T::zero(); self.input_width()],
            bufs: self.layers.iter().map(|l| vec![T::zero(); l.n_out]).collect(),
        }
    }

    /// Normalizes `[q; τ]` and runs an eval-mode forward pass without
    /// allocating. Returns the head output.
    pub fn predict_into<'w>(&self, q: &[T], tau: &[T], ws: &'w mut Workspace<T>) -> Result<&'w [T]> {
        if q.len() != self.dof || tau.len() != self.dof {
            return Err(ModelError::DimensionMismatch { expected: self.dof, got: q.len().max(tau.len()) });
        }
        if ws.input.len() != self.input_width() || ws.bufs.len() != self.layers.len() {
            *ws = self.workspace();
        }
        let two = T::lit(2.0);
        for (d, x) in q.iter().chain(tau).enumerate() {
            let range = self.stats.max[d] - self.stats.min[d];
            ws.input[d] = if range == T::zero() { T::zero() } else { two * (*x - self.stats.min[d]) / range - T::one() };
        }
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.bufs.split_at_mut(l);
            let input = if l == 0 { &ws.input } else { &before[l - 1] };
            let out = &mut after[0];
            layer.forward_batch(input, 1, out);
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
            } else if let Head::Classification { .. } = self.head {
                softmax_in_place(out);
            }
        }
        Ok(&ws.bufs[n_layers - 1])
    }

    /// Whether a head output indicates contact.
    pub fn is_contact(&self, output: &[T]) -> bool {
        match self.head {
            Head::Regression => Vec3::new(output[0], output[1], output[2]).norm() >= T::lit(NO_CONTACT_RADIUS),
            Head::Classification { n_points } => argmax(output) != n_points,
        }
    }

    /// Predicted contact location for configuration `q`. Classification
    /// outputs are resolved to the predicted point's world position (the
    /// origin for the no-contact class).
    pub fn predict(&self, robot: &Robot<T>, q: &[T], tau: &[T]) -> Result<Prediction<T>> {
        let mut ws = self.workspace();
        let out = self.predict_into(q, tau, &mut ws)?;
        let contact = self.is_contact(out);
        Ok(match self.head {
            Head::Regression => Prediction { location: Vec3::new(out[0], out[1], out[2]), probabilities: None, contact },
            Head::Classification { .. } => Prediction {
                location: decode_class(robot, ClassLabel(argmax(out)), q)?,
                probabilities: Some(out.to_vec()),
                contact,
            },
        })
    }

    pub fn fill_zero(&mut self) {
        self.layers.iter_mut().for_each(Layer::fill_zero);
    }
}
