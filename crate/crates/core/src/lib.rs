//! Proprioceptive whole-body touch localization for simulated robots.

pub mod baselines;
pub mod contact_sim;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod kinematics;
pub mod live;
pub mod model;
pub mod phri;
pub mod scalar;

pub use scalar::Real;

/// Default scalar for data generation, training and serving.
pub type Scalar = f64;

pub type Vec3 = geometry::Vec3<Scalar>;
pub type Transform = geometry::Transform<Scalar>;
pub type Chain = kinematics::KinematicChain<Scalar>;
pub type Robot = kinematics::Robot<Scalar>;
pub type Model = model::MlpModel<Scalar>;
pub type EmaFilter = live::EmaFilter<Scalar>;
pub type LiveFrame = live::LiveFrame<Scalar>;

pub type Robot32 = kinematics::Robot<f32>;
pub type Model32 = model::MlpModel<f32>;
