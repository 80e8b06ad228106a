use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Head, Layer, MlpModel, ModelError, Result};
use crate::dataset::NormalizationStats;

pub const MODEL_SCHEMA: &str = "unitacnet-v1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema: String,
    robot: String,
    head: Head,
    widths: Vec<usize>,
    dropout: f64,
    stats: NormalizationStats<f64>,
    /// Row-major `widths[l + 1] × widths[l]` per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

pub fn model_to_json(model: &MlpModel<f64>) -> String {
    let file = ModelFile {
        schema: MODEL_SCHEMA.to_string(),
        robot: model.robot.clone(),
        head: model.head,
        widths: model.widths(),
        dropout: model.dropout,
        stats: model.stats.clone(),
        weights: model.layers.iter().map(|l| l.w.clone()).collect(),
        biases: model.layers.iter().map(|l| l.b.clone()).collect(),
    };
    serde_json::to_string(&file).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<MlpModel<f64>> {
    let f: ModelFile = serde_json::from_str(text)?;
    let bad = |m: String| Err(ModelError::Schema(m));
    if f.schema != MODEL_SCHEMA {
        return bad(format!("schema {:?}, expected {MODEL_SCHEMA:?}", f.schema));
    }
    if f.widths.len() < 2 || f.widths[0] == 0 || f.widths[0] % 2 != 0 {
        return bad(format!("input width must be a positive even number in {:?}", f.widths));
    }
    if f.widths.last() != Some(&f.head.out_width()) {
        return bad(format!("output width {:?} does not match the {:?} head", f.widths.last(), f.head));
    }
    let n_layers = f.widths.len() - 1;
    if f.weights.len() != n_layers || f.biases.len() != n_layers {
        return bad(format!("{n_layers} layers declared, {} weight and {} bias arrays given", f.weights.len(), f.biases.len()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (l, (w, b)) in f.weights.into_iter().zip(f.biases).enumerate() {
        let (n_in, n_out) = (f.widths[l], f.widths[l + 1]);
        if w.len() != n_in * n_out || b.len() != n_out {
            return bad(format!("layer {l} should be {n_out}x{n_in}"));
        }
        layers.push(Layer { n_in, n_out, w, b });
    }
    if f.stats.min.len() != f.widths[0] || f.stats.max.len() != f.widths[0] {
        return bad("normalization stats do not match the input width".to_string());
    }
    if !(0.0..1.0).contains(&f.dropout) {
        return bad(format!("dropout {} outside [0, 1)", f.dropout));
    }
    Ok(MlpModel { robot: f.robot, dof: f.widths[0] / 2, head: f.head, dropout: f.dropout, layers, stats: f.stats })
}

pub fn save_model(model: &MlpModel<f64>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_json(model) + "\n")?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel<f64>> {
    model_from_json(&fs::read_to_string(path)?)
}
