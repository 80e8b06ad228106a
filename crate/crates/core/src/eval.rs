//! Localization metrics and the method-comparison harness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{Knn, DEFAULT_K};
use crate::dataset::{decode_class, split, Dataset, DatasetError};
use crate::geometry::Vec3;
use crate::kinematics::Robot;
use crate::model::{fit, Head, MlpModel, ModelError, TrainConfig};

/// Default success radius, centimeters.
pub const DEFAULT_EPSILON_CM: f64 = 12.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no distances to score")]
    Empty,
    #[error("thresholds must be non-negative and ascending")]
    UnsortedThresholds,
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Euclidean distance in centimeters between two locations given in meters.
pub fn l2_error(predicted: &Vec3<f64>, truth: &Vec3<f64>) -> f64 {
    100.0 * predicted.distance(truth)
}

/// Fraction of distances within `epsilon` (inclusive).
pub fn accuracy(distances: &[f64], epsilon: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = distances.iter().filter(|&&d| d <= epsilon).count();
    Ok(hits as f64 / distances.len() as f64)
}

pub fn threshold_sweep(distances: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if distances.is_empty() || thresholds.is_empty() {
        return Err(EvalError::Empty);
    }
    if thresholds[0] < 0.0 || thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(EvalError::UnsortedThresholds);
    }
    thresholds.iter().map(|&e| Ok((e, accuracy(distances, e)?))).collect()
}

/// 0 to 30 cm in 1 cm steps.
pub fn default_sweep_grid() -> Vec<f64> {
    (0..=30).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n: usize,
    pub epsilon_cm: f64,
    pub acc: f64,
    pub mean_l2_cm: f64,
    pub sweep: Vec<(f64, f64)>,
    #[serde(skip)]
    pub distances_cm: Vec<f64>,
}

impl EvalReport {
    pub fn from_distances(method: &str, distances_cm: Vec<f64>, epsilon_cm: f64) -> Result<Self> {
        let acc = accuracy(&distances_cm, epsilon_cm)?;
        let sweep = threshold_sweep(&distances_cm, &default_sweep_grid())?;
        let mean_l2_cm = distances_cm.iter().sum::<f64>() / distances_cm.len() as f64;
        Ok(Self { method: method.to_string(), n: distances_cm.len(), epsilon_cm, acc, mean_l2_cm, sweep, distances_cm })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Anything that maps a proprioceptive reading to a contact location.
pub trait Localizer {
    fn method(&self) -> String;
    fn dof(&self) -> usize;
    fn locate(&self, robot: &Robot<f64>, q: &[f64], tau: &[f64]) -> Result<Vec3<f64>>;
}

impl Localizer for MlpModel<f64> {
    fn method(&self) -> String {
        match self.head {
            Head::Regression => "mlp-regression".into(),
            Head::Classification { .. } => "mlp-classification".into(),
        }
    }

    fn dof(&self) -> usize {
        self.dof
    }

    fn locate(&self, robot: &Robot<f64>, q: &[f64], tau: &[f64]) -> Result<Vec3<f64>> {
        Ok(self.predict(robot, q, tau)?.location)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnMode {
    Regressor,
    Classifier,
}

pub struct KnnLocalizer {
    pub knn: Knn,
    pub mode: KnnMode,
}

impl Localizer for KnnLocalizer {
    fn method(&self) -> String {
        match self.mode {
            KnnMode::Regressor => "knn-regressor".into(),
            KnnMode::Classifier => "knn-classifier".into(),
        }
    }

    fn dof(&self) -> usize {
        self.knn.stats.dim() / 2
    }

    fn locate(&self, robot: &Robot<f64>, q: &[f64], tau: &[f64]) -> Result<Vec3<f64>> {
        Ok(match self.mode {
            KnnMode::Regressor => self.knn.regress(q, tau)?,
            KnnMode::Classifier => decode_class(robot, self.knn.classify(q, tau)?, q)?,
        })
    }
}

/// Scores a localizer on every sample of `val`. No-contact samples are
/// scored against the origin.
pub fn evaluate(method: &dyn Localizer, robot: &Robot<f64>, val: &Dataset, epsilon_cm: f64) -> Result<EvalReport> {
    if method.dof() != val.dof || robot.chain.dof() != val.dof {
        return Err(EvalError::Mismatch(format!(
            "dof mismatch: method {}, robot {}, data {}",
            method.dof(),
            robot.chain.dof(),
            val.dof
        )));
    }
    let distances = val
        .samples
        .iter()
        .map(|s| Ok(l2_error(&method.locate(robot, &s.q, &s.tau)?, &s.location())))
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_distances(&method.method(), distances, epsilon_cm)
}

/// Reports for the same localizer on held-out data from the training instance
/// and on data recorded from another instance.
pub fn evaluate_cross_instance(
    method: &dyn Localizer,
    robot: &Robot<f64>,
    seen: &Dataset,
    unseen: &Dataset,
    epsilon_cm: f64,
) -> Result<(EvalReport, EvalReport)> {
    let same_points = seen.points.len() == unseen.points.len()
        && seen.points.iter().zip(&unseen.points).all(|(a, b)| a.id == b.id && a.link == b.link);
    if seen.robot != unseen.robot || seen.dof != unseen.dof || !same_points {
        return Err(EvalError::Mismatch(format!("instances of {:?} and {:?} do not share a topology", seen.robot, unseen.robot)));
    }
    Ok((evaluate(method, robot, seen, epsilon_cm)?, evaluate(method, robot, unseen, epsilon_cm)?))
}

/// Trains the four methods on one stratified split and scores them on the
/// held-out side, in the order MLP regression, MLP classification, KNN
/// regressor, KNN classifier.
pub fn compare_methods(robot: &Robot<f64>, dataset: &Dataset, config: &TrainConfig, epsilon_cm: f64) -> Result<Vec<EvalReport>> {
    let (train_set, val_set) = split(dataset, config.split_ratio, config.seed)?;
    let (reg, _, _) = fit(&train_set, None, Head::Regression, config)?;
    let (cls, _, _) = fit(&train_set, None, Head::Classification { n_points: dataset.n_points() }, config)?;
    let knn = Knn::fit(&train_set, DEFAULT_K)?;
    let knn_reg = KnnLocalizer { knn: knn.clone(), mode: KnnMode::Regressor };
    let knn_cls = KnnLocalizer { knn, mode: KnnMode::Classifier };
    let methods: [&dyn Localizer; 4] = [&reg, &cls, &knn_reg, &knn_cls];
    methods.iter().map(|m| evaluate(*m, robot, &val_set, epsilon_cm)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact_sim::{synthesize_dataset, CollectionProtocol, RobotInstance};

    #[test]
    fn l2_examples() {
        let p = Vec3::new(0.1, -0.2, 0.3);
        assert_eq!(l2_error(&p, &p), 0.0);
        let d = l2_error(&Vec3::new(0.03, 0.04, 0.0), &Vec3::zeros());
        assert!((d - 5.0).abs() < 1e-12);
        let q = Vec3::new(0.5, 0.25, -1.0);
        assert_eq!(l2_error(&p, &q), l2_error(&q, &p));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[5.0, 13.0, 2.0], 12.0).unwrap(), 2.0 / 3.0);
        assert_eq!(accuracy(&[0.0; 4], 0.0).unwrap(), 1.0);
        assert_eq!(accuracy(&[12.0], 12.0).unwrap(), 1.0);
        assert!(matches!(accuracy(&[], 12.0), Err(EvalError::Empty)));
    }

    #[test]
    fn sweep_examples() {
        let s = threshold_sweep(&[1.0, 2.0, 3.0], &[0.0, 2.0, 5.0]).unwrap();
        assert_eq!(s, vec![(0.0, 0.0), (2.0, 2.0 / 3.0), (5.0, 1.0)]);
        assert_eq!(threshold_sweep(&[7.5, 0.1], &[8.5]).unwrap(), vec![(8.5, 1.0)]);
        assert!(matches!(threshold_sweep(&[1.0], &[2.0, 1.0]), Err(EvalError::UnsortedThresholds)));
    }

    struct Lookup(Dataset);
    impl Localizer for Lookup {
        fn method(&self) -> String {
            "lookup".into()
        }
        fn dof(&self) -> usize {
            self.0.dof
        }
        fn locate(&self, _: &Robot<f64>, q: &[f64], tau: &[f64]) -> Result<Vec3<f64>> {
            Ok(self.0.samples.iter().find(|s| s.q == q && s.tau == tau).expect("known sample").location())
        }
    }

    struct Origin;
    impl Localizer for Origin {
        fn method(&self) -> String {
            "origin".into()
        }
        fn dof(&self) -> usize {
            7
        }
        fn locate(&self, _: &Robot<f64>, _: &[f64], _: &[f64]) -> Result<Vec3<f64>> {
            Ok(Vec3::zeros())
        }
    }

    fn franka_data() -> (Robot<f64>, Dataset) {
        let robot = Robot::preset("frankalike").unwrap();
        let proto = CollectionProtocol { n_configs: 3, ..CollectionProtocol::for_robot("frankalike") };
        let d = synthesize_dataset(&robot, &proto, &RobotInstance::identity(7)).unwrap();
        (robot, d)
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let (robot, d) = franka_data();
        let perfect = evaluate(&Lookup(d.clone()), &robot, &d, 12.0).unwrap();
        assert_eq!((perfect.acc, perfect.mean_l2_cm, perfect.n), (1.0, 0.0, d.len()));

        let contact = d.with_samples(d.samples.iter().filter(|s| s.is_contact()).cloned().collect());
        let origin = evaluate(&Origin, &robot, &contact, 12.0).unwrap();
        let near = contact.samples.iter().filter(|s| 100.0 * s.location().norm() <= 12.0).count();
        assert_eq!(origin.acc, near as f64 / contact.len() as f64);
        let mean = origin.distances_cm.iter().sum::<f64>() / origin.n as f64;
        assert!((origin.mean_l2_cm - mean).abs() < 1e-12);
        assert!(matches!(evaluate(&Origin, &Robot::preset("spotlike").unwrap(), &d, 12.0), Err(EvalError::Mismatch(_))));
    }

    #[test]
    fn report_json_shape() {
        let r = EvalReport::from_distances("knn-regressor", vec![1.0, 20.0], 12.0).unwrap();
        let text = r.to_json();
        assert!(text.starts_with(r#"{"method":"knn-regressor","n":2,"epsilon_cm":12.0,"acc":0.5,"mean_l2_cm":10.5,"sweep":[[0.0,0.0],"#));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["sweep"][0], serde_json::json!([0.0, 0.0]));
        assert_eq!(v["sweep"][30], serde_json::json!([30.0, 1.0]));
    }

    #[test]
    fn same_instance_gives_identical_reports() {
        let (robot, d) = franka_data();
        let (a, b) = evaluate_cross_instance(&Lookup(d.clone()), &robot, &d, &d, 12.0).unwrap();
        assert_eq!(a, b);
        let spot = synthesize_dataset(
            &Robot::preset("spotlike").unwrap(),
            &CollectionProtocol { n_configs: 1, ..Default::default() },
            &RobotInstance::identity(19),
        )
        .unwrap();
        assert!(evaluate_cross_instance(&Lookup(d.clone()), &robot, &d, &spot, 12.0).is_err());
    }

    #[test]
    fn classification_decode_is_within_tolerance_when_correct() {
        let (robot, d) = franka_data();
        let knn = Knn::fit(&d, 1).unwrap();
        let cls = KnnLocalizer { knn, mode: KnnMode::Classifier };
        for s in d.samples.iter().filter(|s| s.is_contact()) {
            let loc = cls.locate(&robot, &s.q, &s.tau).unwrap();
            assert!(loc.distance(&s.location()) <= crate::dataset::DEFAULT_ENCODE_TOL + 0.01);
        }
    }
}
