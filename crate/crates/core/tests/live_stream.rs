use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use unitac::contact_sim::{contact_torques, synthesize_dataset, CollectionProtocol, ContactEvent, ContactSite, RobotInstance};
use unitac::dataset::fit_normalization;
use unitac::geometry::Vec3;
use unitac::kinematics::Robot;
use unitac::live::{bench_throughput, stream_infer, LiveError, LiveStream};
use unitac::model::{Head, MlpModel};

fn setup() -> (Robot<f64>, MlpModel<f64>) {
    let robot = Robot::preset("frankalike").unwrap();
    let proto = CollectionProtocol { n_configs: 3, seed: 4, ..CollectionProtocol::for_robot("frankalike") };
    let d = synthesize_dataset(&robot, &proto, &RobotInstance::identity(7)).unwrap();
    let mut model = MlpModel::new(7, Head::Regression, 8);
    model.stats = fit_normalization(&d).unwrap();
    (robot, model)
}

fn mean_jump(frames: &[[f64; 3]]) -> f64 {
    let sum: f64 = frames.windows(2).map(|w| (Vec3::from(w[1]) - Vec3::from(w[0])).norm()).sum();
    sum / (frames.len() - 1) as f64
}

#[test]
fn smoothing_reduces_jitter_on_a_sliding_touch() {
    let (robot, model) = setup();
    let q = robot.chain.mid_config();
    let noise = Normal::new(0.0, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rows = Vec::new();
    for i in 0..120 {
        let s = i as f64 / 119.0;
        let site = ContactSite::Free { link: 4, local: Vec3::new(-0.05 + 0.1 * s, 0.0, 0.06) };
        let tau = contact_torques(&robot, &q, &ContactEvent { site, force: Vec3::new(0.0, 0.0, -20.0) }).unwrap();
        let tau: Vec<f64> = tau.iter().map(|t| t + noise.sample(&mut rng)).collect();
        rows.push((i as f64 / 60.0, tau));
    }
    let frames = stream_infer(&model, &robot, rows.iter().map(|(t, tau)| (*t, q.as_slice(), tau.as_slice()))).unwrap();
    assert_eq!(frames.len(), 120);
    let raw: Vec<[f64; 3]> = frames.iter().map(|f| f.raw).collect();
    let smooth: Vec<[f64; 3]> = frames.iter().map(|f| f.smoothed).collect();
    assert!(mean_jump(&smooth) < mean_jump(&raw), "{} vs {}", mean_jump(&smooth), mean_jump(&raw));
}

#[test]
fn constant_stream_gives_constant_output_and_empty_gives_empty() {
    let (robot, model) = setup();
    let q = robot.chain.mid_config();
    let tau = vec![0.5; 7];
    let frames = stream_infer(&model, &robot, (0..50).map(|i| (i as f64, q.as_slice(), tau.as_slice()))).unwrap();
    for f in &frames {
        assert_eq!(f.raw, frames[0].raw);
        let d = (Vec3::from(f.smoothed) - Vec3::from(f.raw)).norm();
        assert!(d < 1e-12);
    }
    assert!(stream_infer(&model, &robot, std::iter::empty()).unwrap().is_empty());
}

#[test]
fn timestamps_must_not_go_backwards() {
    let (robot, model) = setup();
    let q = robot.chain.mid_config();
    let tau = vec![0.0; 7];
    let mut s = LiveStream::new(&model, &robot);
    s.step(1.0, &q, &tau).unwrap();
    s.step(1.0, &q, &tau).unwrap();
    assert!(matches!(s.step(0.5, &q, &tau), Err(LiveError::NonMonotone { .. })));
    assert!(s.step(f64::NAN, &q, &tau).is_err());
    s.step(2.0, &q, &tau).unwrap();
}

#[test]
fn filter_resets_after_a_window_of_no_contact() {
    let (robot, mut model) = setup();
    // Output layer bias alone decides the prediction.
    let last = model.layers.last_mut().unwrap();
    last.w.iter_mut().for_each(|w| *w = 0.0);
    let q = robot.chain.mid_config();
    let tau = vec![0.0; 7];
    last_bias(&mut model, [0.5, 0.0, 0.0]);
    let mut far = model.clone();
    last_bias(&mut far, [0.0, 0.0, 0.0]);

    let mut touching = LiveStream::new(&model, &robot);
    for i in 0..10 {
        assert!(touching.step(i as f64, &q, &tau).unwrap().contact);
    }
    let mut idle = LiveStream::new(&far, &robot);
    for i in 0..39 {
        idle.step(i as f64, &q, &tau).unwrap();
        assert_eq!(idle.filter().len(), i + 1);
    }
    idle.step(39.0, &q, &tau).unwrap();
    assert!(idle.filter().is_empty());
}

fn last_bias(model: &mut MlpModel<f64>, b: [f64; 3]) {
    model.layers.last_mut().unwrap().b.copy_from_slice(&b);
}

#[test]
fn benchmark_reports_a_positive_rate() {
    let (robot, model) = setup();
    let r = bench_throughput(&model, &robot, 0.2, 0).unwrap();
    assert!(r.rate_hz > 0.0 && r.raw_rate_hz > 0.0);
    assert!(r.p99_latency_us >= 0.0 && r.mean_latency_us > 0.0);
    assert!(r.duration_s >= 0.2);
    assert!(matches!(bench_throughput(&model, &robot, 0.0, 0), Err(LiveError::Duration)));
}
