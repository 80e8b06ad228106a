use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, Head, Layer, MlpModel, ModelError, Pass, Result, Tape, Targets};
use crate::dataset::{fit_normalization, split, Dataset, DatasetError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            epochs: 30,
            batch_size: 256,
            seed: 0,
            split_ratio: 0.8,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return bad("learning rate, epochs and batch size must be positive");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split ratio must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("betas must lie in [0, 1) and epsilon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean mini-batch loss with dropout active.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub model: MlpModel<f64>,
    pub history: Vec<EpochStats>,
    /// Eval-mode training-split loss before the first update.
    pub initial_loss: f64,
    pub train: Dataset,
    pub val: Dataset,
}

struct Encoded {
    x: Vec<f64>,
    positions: Vec<f64>,
    classes: Vec<usize>,
}

/// Affine map `p = mean + scale · y` between network outputs and locations.
#[derive(Debug, Clone, Copy)]
struct TargetScale {
    mean: [f64; 3],
    scale: f64,
}

impl TargetScale {
    const IDENTITY: Self = Self { mean: [0.0; 3], scale: 1.0 };

    /// Per-coordinate mean and one pooled standard deviation.
    fn fit(dataset: &Dataset) -> Self {
        let n = dataset.len() as f64;
        let mut mean = [0.0; 3];
        for s in &dataset.samples {
            for k in 0..3 {
                mean[k] += s.p[k] / n;
            }
        }
        let var: f64 =
            dataset.samples.iter().map(|s| (0..3).map(|k| (s.p[k] - mean[k]).powi(2)).sum::<f64>()).sum::<f64>() / (3.0 * n);
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    fn encode(&self, positions: &mut [f64]) {
        for row in positions.chunks_exact_mut(3) {
            for k in 0..3 {
                row[k] = (row[k] - self.mean[k]) / self.scale;
            }
        }
    }

    /// Rewrites the output layer so the model emits locations directly.
    fn fold_into(&self, model: &mut MlpModel<f64>) {
        let last = model.layers.last_mut().expect("at least one layer");
        last.w.iter_mut().for_each(|w| *w *= self.scale);
        for k in 0..3 {
            last.b[k] = self.scale * last.b[k] + self.mean[k];
        }
    }
}

impl Encoded {
    fn new(model: &MlpModel<f64>, dataset: &Dataset) -> Result<Self> {
        let width = model.input_width();
        let mut x = vec![0.0; dataset.len() * width];
        let mut positions = Vec::with_capacity(dataset.len() * 3);
        let mut classes = Vec::with_capacity(dataset.len());
        for (s, row) in dataset.samples.iter().zip(x.chunks_exact_mut(width)) {
            model.stats.normalize_into(&s.input(), row)?;
            positions.extend_from_slice(&s.p);
            classes.push(dataset.class_of(s));
        }
        Ok(Self { x, positions, classes })
    }

    fn targets(&self, head: Head) -> Targets<'_, f64> {
        match head {
            Head::Regression => Targets::Positions(&self.positions),
            Head::Classification { .. } => Targets::Classes(&self.classes),
        }
    }
}

fn check_head(dataset: &Dataset, head: Head) -> Result<()> {
    if let Head::Classification { n_points } = head {
        if n_points != dataset.n_points() {
            return Err(ModelError::DimensionMismatch { expected: dataset.n_points(), got: n_points });
        }
    }
    Ok(())
}

/// Trains on `train_set` (normalization fitted on it alone), reporting the
/// loss on `val_set` after every epoch when given.
pub fn fit(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    head: Head,
    config: &TrainConfig,
) -> Result<(MlpModel<f64>, Vec<EpochStats>, f64)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    check_head(train_set, head)?;
    let mut model = MlpModel::<f64>::new(train_set.dof, head, config.seed);
    model.robot = train_set.robot.clone();
    model.stats = fit_normalization(train_set)?;

    let target_scale = match head {
        Head::Regression => TargetScale::fit(train_set),
        Head::Classification { .. } => TargetScale::IDENTITY,
    };
    let mut data = Encoded::new(&model, train_set)?;
    target_scale.encode(&mut data.positions);
    let mut val = match val_set.filter(|v| !v.is_empty()) {
        Some(v) => Some(Encoded::new(&model, v)?),
        None => None,
    };
    if let Some(v) = &mut val {
        target_scale.encode(&mut v.positions);
    }
    // Reported losses are in the units of the targets (m² for regression).
    let unit = target_scale.scale * target_scale.scale;
    let initial_loss = unit * model.batch_loss(&data.x, data.targets(head))?;

    let width = model.input_width();
    let n = train_set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let adam = config.adam();
    let mut state = AdamState::new(&model.params());
    let mut order: Vec<usize> = (0..n).collect();
    let mut tape = Tape::default();
    let mut grads = model.zero_grads();
    let mut xb = Vec::with_capacity(config.batch_size * width);
    let mut pb = Vec::with_capacity(config.batch_size * 3);
    let mut cb = Vec::with_capacity(config.batch_size);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            xb.clear();
            pb.clear();
            cb.clear();
            for &i in chunk {
                xb.extend_from_slice(&data.x[i * width..(i + 1) * width]);
                pb.extend_from_slice(&data.positions[i * 3..i * 3 + 3]);
                cb.push(data.classes[i]);
            }
            let targets = match head {
                Head::Regression => Targets::Positions(&pb),
                Head::Classification { .. } => Targets::Classes(&cb),
            };
            model.forward_batch(&xb, chunk.len(), Pass::Train(&mut rng), &mut tape)?;
            grads.iter_mut().for_each(Layer::fill_zero);
            total += model.backward(&mut tape, targets, &mut grads)? * chunk.len() as f64;
            let g: Vec<&[f64]> = grads.iter().flat_map(|l| [l.w.as_slice(), l.b.as_slice()]).collect();
            state.step(&adam, &mut model.params_mut(), &g)?;
        }
        let val_loss = match &val {
            Some(v) => Some(unit * model.batch_loss(&v.x, v.targets(head))?),
            None => None,
        };
        history.push(EpochStats { epoch, train_loss: unit * total / n as f64, val_loss });
    }
    target_scale.fold_into(&mut model);
    Ok((model, history, initial_loss))
}

/// Stratified split, then [`fit`] on the training side.
pub fn train(dataset: &Dataset, head: Head, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let (train_set, val_set) = split(dataset, config.split_ratio, config.seed)?;
    let (model, history, initial_loss) = fit(&train_set, Some(&val_set), head, config)?;
    Ok(TrainOutcome { model, history, initial_loss, train: train_set, val: val_set })
}
