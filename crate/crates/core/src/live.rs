//! Live inference: windowed exponential smoothing of predicted contact
//! locations, timestamped stream processing and a throughput benchmark.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{decode_class, ClassLabel};
use crate::geometry::Vec3;
use crate::kinematics::Robot;
use crate::model::{argmax, Head, MlpModel, ModelError, Workspace, NO_CONTACT_RADIUS};
use crate::scalar::Real;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_WINDOW: usize = 40;

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("timestamp {t} precedes previous timestamp {last}")]
    NonMonotone { t: f64, last: f64 },
    #[error("alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error("window must be at least 1")]
    Window,
    #[error("benchmark duration must be positive")]
    Duration,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = LiveError> = std::result::Result<T, E>;

/// Normalized exponentially weighted average over the most recent `window`
/// samples: weight `α(1-α)^i` for the sample `i` steps back.
#[derive(Debug, Clone)]
pub struct EmaFilter<T> {
    alpha: T,
    ring: Vec<Vec3<T>>,
    head: usize,
    len: usize,
    /// `decay[i] = (1-α)^i`
    decay: Vec<T>,
    /// `norm[n-1] = Σ_{i<n} decay[i]`
    norm: Vec<T>,
    value: Vec3<T>,
}

impl<T: Real> EmaFilter<T> {
    pub fn new(alpha: T, window: usize) -> Result<Self> {
        let a = alpha.to_f64_lossy();
        if !(a > 0.0 && a <= 1.0) {
            return Err(LiveError::Alpha(a));
        }
        if window == 0 {
            return Err(LiveError::Window);
        }
        let keep = T::one() - alpha;
        let mut decay = Vec::with_capacity(window);
        let mut norm = Vec::with_capacity(window);
        let (mut d, mut s) = (T::one(), T::zero());
        for _ in 0..window {
            decay.push(d);
            s += d;
            norm.push(s);
            d *= keep;
        }
        Ok(Self { alpha, ring: vec![Vec3::zeros(); window], head: 0, len: 0, decay, norm, value: Vec3::zeros() })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn window(&self) -> usize {
        self.ring.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Last smoothed output; zero before the first sample.
    pub fn value(&self) -> Vec3<T> {
        self.value
    }

    pub fn update(&mut self, x: Vec3<T>) -> Vec3<T> {
        let w = self.ring.len();
        self.ring[self.head] = x;
        self.head = (self.head + 1) % w;
        self.len = (self.len + 1).min(w);
        let mut acc = Vec3::zeros();
        for i in 0..self.len {
            let idx = (self.head + w - 1 - i) % w;
            acc += self.ring[idx].scale(self.decay[i]);
        }
        self.value = acc.scale(T::one() / self.norm[self.len - 1]);
        self.value
    }

    pub fn reset(&mut self) {
        self.head = 0;
        self.len = 0;
        self.value = Vec3::zeros();
    }
}

/// One processed frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiveFrame<T> {
    pub t: f64,
    pub raw: [T; 3],
    pub smoothed: [T; 3],
    pub contact: bool,
}

/// Per-stream state: the filter and scratch buffers. The model and robot are
/// passed to each step so the state can live apart from them.
#[derive(Debug, Clone)]
pub struct LiveState<T> {
    filter: EmaFilter<T>,
    ws: Workspace<T>,
    last_t: Option<f64>,
    quiet: usize,
}

impl<T: Real> LiveState<T> {
    pub fn new(model: &MlpModel<T>) -> Self {
        let filter = EmaFilter::new(T::lit(DEFAULT_ALPHA), DEFAULT_WINDOW).expect("default filter parameters");
        Self::with_filter(model, filter)
    }

    pub fn with_filter(model: &MlpModel<T>, filter: EmaFilter<T>) -> Self {
        Self { filter, ws: model.workspace(), last_t: None, quiet: 0 }
    }

    pub fn filter(&self) -> &EmaFilter<T> {
        &self.filter
    }

    pub fn reset(&mut self) {
        self.filter.reset();
        self.quiet = 0;
    }

    /// Raw location estimate. Regression outputs are used as is; a class is
    /// decoded to its point's world position (origin for no contact).
    fn raw(&mut self, model: &MlpModel<T>, robot: &Robot<T>, q: &[T], tau: &[T]) -> Result<Vec3<T>> {
        let out = model.predict_into(q, tau, &mut self.ws)?;
        Ok(match model.head {
            Head::Regression => Vec3::new(out[0], out[1], out[2]),
            Head::Classification { .. } => decode_class(robot, ClassLabel(argmax(out)), q).map_err(ModelError::from)?,
        })
    }

    pub fn step(&mut self, model: &MlpModel<T>, robot: &Robot<T>, t: f64, q: &[T], tau: &[T]) -> Result<LiveFrame<T>> {
        if let Some(last) = self.last_t {
            if !(t >= last) {
                return Err(LiveError::NonMonotone { t, last });
            }
        }
        let raw = self.raw(model, robot, q, tau)?;
        self.last_t = Some(t);
        let smoothed = self.filter.update(raw);
        let contact = smoothed.norm() >= T::lit(NO_CONTACT_RADIUS);
        if contact {
            self.quiet = 0;
        } else {
            self.quiet += 1;
            if self.quiet >= self.filter.window() {
                self.reset();
            }
        }
        Ok(LiveFrame { t, raw: raw.into(), smoothed: smoothed.into(), contact })
    }
}

/// A [`LiveState`] bound to its model and robot.
pub struct LiveStream<'a, T> {
    model: &'a MlpModel<T>,
    robot: &'a Robot<T>,
    state: LiveState<T>,
}

impl<'a, T: Real> LiveStream<'a, T> {
    pub fn new(model: &'a MlpModel<T>, robot: &'a Robot<T>) -> Self {
        Self { model, robot, state: LiveState::new(model) }
    }

    pub fn with_filter(model: &'a MlpModel<T>, robot: &'a Robot<T>, filter: EmaFilter<T>) -> Self {
        Self { model, robot, state: LiveState::with_filter(model, filter) }
    }

    pub fn filter(&self) -> &EmaFilter<T> {
        self.state.filter()
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }

    pub fn step(&mut self, t: f64, q: &[T], tau: &[T]) -> Result<LiveFrame<T>> {
        self.state.step(self.model, self.robot, t, q, tau)
    }
}

/// Runs a whole `(t, q, τ)` sequence through a fresh stream.
pub fn stream_infer<'s, T: Real>(
    model: &MlpModel<T>,
    robot: &Robot<T>,
    samples: impl IntoIterator<Item = (f64, &'s [T], &'s [T])>,
) -> Result<Vec<LiveFrame<T>>> {
    let mut stream = LiveStream::new(model, robot);
    samples.into_iter().map(|(t, q, tau)| stream.step(t, q, tau)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rate_hz: f64,
    pub mean_latency_us: f64,
    pub p99_latency_us: f64,
    pub duration_s: f64,
    /// Predict-only rate, without the filter.
    pub raw_rate_hz: f64,
}

const BENCH_INPUTS: usize = 1024;

fn time_loop(duration: Duration, mut call: impl FnMut(usize), latencies: &mut Vec<f64>) -> (usize, f64) {
    let start = Instant::now();
    let mut n = 0;
    loop {
        let t0 = Instant::now();
        call(n);
        latencies.push(t0.elapsed().as_secs_f64() * 1e6);
        n += 1;
        let elapsed = start.elapsed();
        if elapsed >= duration {
            return (n, elapsed.as_secs_f64());
        }
    }
}

/// Sustained single-thread predict+filter rate on random inputs within the
/// model's normalization range, followed by a predict-only run a quarter as long.
pub fn bench_throughput<T: Real>(model: &MlpModel<T>, robot: &Robot<T>, duration_s: f64, seed: u64) -> Result<BenchReport> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(LiveError::Duration);
    }
    let width = model.input_width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<T> = (0..BENCH_INPUTS * width)
        .map(|i| {
            let d = i % width;
            let (lo, hi) = (model.stats.min[d], model.stats.max[d]);
            lo + (hi - lo) * T::lit(rng.random::<f64>())
        })
        .collect();
    let row = |n: usize| {
        let r = &inputs[(n % BENCH_INPUTS) * width..(n % BENCH_INPUTS + 1) * width];
        r.split_at(model.dof)
    };

    let mut stream = LiveStream::new(model, robot);
    let mut latencies = Vec::with_capacity(1 << 20);
    let mut failure = None;
    let (n, secs) = time_loop(
        Duration::from_secs_f64(duration_s),
        |n| {
            let (q, tau) = row(n);
            if let Err(e) = stream.step(n as f64, q, tau) {
                failure.get_or_insert(e);
            }
        },
        &mut latencies,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let mean = latencies.iter().sum::<f64>() / latencies.len() as f64;
    let k = ((latencies.len() as f64 * 0.99).ceil() as usize).clamp(1, latencies.len()) - 1;
    let p99 = *latencies.select_nth_unstable_by(k, f64::total_cmp).1;

    let mut ws = model.workspace();
    let mut sink = T::zero();
    let mut scratch = Vec::with_capacity(1 << 18);
    let (raw_n, raw_secs) = time_loop(
        Duration::from_secs_f64(duration_s / 4.0),
        |n| {
            let (q, tau) = row(n);
            if let Ok(out) = model.predict_into(q, tau, &mut ws) {
                sink += out[0];
            }
        },
        &mut scratch,
    );
    std::hint::black_box(sink);

    Ok(BenchReport {
        rate_hz: n as f64 / secs,
        mean_latency_us: mean,
        p99_latency_us: p99,
        duration_s: secs,
        raw_rate_hz: raw_n as f64 / raw_secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64) -> Vec3<f64> {
        Vec3::new(x, -x, 2.0 * x)
    }

    #[test]
    fn step_response_matches_geometric_sum() {
        let mut f = EmaFilter::new(0.1, 40).unwrap();
        for _ in 0..40 {
            f.update(v(0.0));
        }
        let out = f.update(v(1.0));
        let expected = 0.1 / (1.0 - 0.9f64.powi(40));
        assert!((out.x - expected).abs() < 1e-9);
        assert!((expected - 0.1015).abs() < 1e-5);
    }

    #[test]
    fn constant_input_is_a_fixed_point() {
        let mut f = EmaFilter::new(0.1, 40).unwrap();
        let c = Vec3::new(0.3, -1.7, 0.05);
        for i in 0..100 {
            let out = f.update(c);
            assert!((out - c).norm() < 1e-15, "step {i}");
        }
        f.reset();
        assert!(f.is_empty());
        f.reset();
        assert_eq!(f.update(v(4.0)), v(4.0));
    }

    #[test]
    fn samples_older_than_the_window_have_no_influence() {
        let mut a = EmaFilter::new(0.1, 40).unwrap();
        let mut b = EmaFilter::new(0.1, 40).unwrap();
        a.update(v(1000.0));
        b.update(v(-5.0));
        b.update(v(7.0));
        for i in 0..40 {
            let x = v((i as f64 * 0.37).sin());
            a.update(x);
            b.update(x);
        }
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn output_stays_within_the_buffer_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut f = EmaFilter::new(0.1, 40).unwrap();
        let mut hist = Vec::new();
        for _ in 0..200 {
            let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            hist.push(x);
            let out = f.update(x);
            let recent = &hist[hist.len().saturating_sub(40)..];
            let lo = recent.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
            let hi = recent.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
            assert!(out.y >= lo - 1e-12 && out.y <= hi + 1e-12);
        }
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(matches!(EmaFilter::<f64>::new(0.0, 40), Err(LiveError::Alpha(_))));
        assert!(matches!(EmaFilter::<f64>::new(1.5, 40), Err(LiveError::Alpha(_))));
        assert!(matches!(EmaFilter::<f64>::new(0.1, 0), Err(LiveError::Window)));
        let mut one = EmaFilter::new(1.0, 3).unwrap();
        one.update(v(1.0));
        assert_eq!(one.update(v(2.0)), v(2.0));
    }
}
