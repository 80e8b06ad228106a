//! Acceptance suite: one pass/fail line per primary criterion, written
//! straight to stderr so it shows up even when the harness captures output.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitac::contact_sim::{perturb_instance, synthesize_dataset, CollectionProtocol, RobotInstance};
use unitac::dataset::split;
use unitac::eval::{accuracy, compare_methods, evaluate_cross_instance, threshold_sweep, EvalReport};
use unitac::geometry::Vec3;
use unitac::kinematics::Robot;
use unitac::live::{bench_throughput, EmaFilter};
use unitac::model::{fit, AdamConfig, AdamState, Head, MlpModel, TrainConfig, Targets};
use unitac::phri::{dispatch, RuleSet, FRANKALIKE_ACTIONS, SPOTLIKE_ACTIONS};
use unitac_gateway::cli::{run, Cli};
use unitac_gateway::protocol::{ClientMsg, ServerMsg};
use unitac_gateway::{Session, Shared};

const SEED: u64 = 20_250_101;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(n: usize, name: &str, started: Instant, o: &Outcome) {
    let line = format!(
        "criterion {n:>2} [{}] {name}: {} ({:.1} s)\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
    std::io::stderr().write_all(line.as_bytes()).unwrap();
}

// 1 ------------------------------------------------------------------------

fn jacobian() -> Outcome {
    let robots = [Robot::preset("spotlike").unwrap(), Robot::preset("frankalike").unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let robot = &robots[case % 2];
        let q = robot.chain.random_config(&mut rng);
        let p = robot.points[rng.random_range(0..robot.points.len())];
        let jac = robot.chain.point_jacobian(&q, p.link, &p.local).unwrap();
        for j in 0..robot.chain.dof() {
            let (mut qp, mut qm) = (q.clone(), q.clone());
            qp[j] += h;
            qm[j] -= h;
            let fd = (robot.chain.world_point(&qp, p.link, &p.local).unwrap() - robot.chain.world_point(&qm, p.link, &p.local).unwrap())
                .scale(1.0 / (2.0 * h));
            for k in 0..3 {
                worst = worst.max((fd.get(k) - jac.cols[j].get(k)).abs());
            }
        }
    }
    outcome(worst < 1e-6, format!("max |J - J_fd| = {worst:.2e} m over 100 cases"))
}

// 2 ------------------------------------------------------------------------

fn relu_pattern(model: &MlpModel<f64>, x: &[f64]) -> Vec<bool> {
    let mut pattern = Vec::new();
    for xb in x.chunks_exact(model.input_width()) {
        let mut a = xb.to_vec();
        for layer in &model.layers[..model.layers.len() - 1] {
            let z: Vec<f64> =
                (0..layer.n_out).map(|o| layer.b[o] + layer.row(o).iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()).collect();
            pattern.extend(z.iter().map(|&v| v > 0.0));
            a = z.iter().map(|&v| v.max(0.0)).collect();
        }
    }
    pattern
}

fn backprop() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for m in 0..20 {
        let dof = rng.random_range(1..6);
        let hidden: Vec<usize> = (0..4).map(|_| rng.random_range(3..9)).collect();
        let head = if m % 2 == 0 { Head::Regression } else { Head::Classification { n_points: rng.random_range(2..7) } };
        let mut model: MlpModel<f64> = MlpModel::with_hidden(dof, head, &hidden, rng.random());
        model.dropout = 0.0;
        for l in &mut model.layers {
            l.b.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        let batch = rng.random_range(1..5);
        let x: Vec<f64> = (0..batch * model.input_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let positions: Vec<f64> = (0..batch * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let classes: Vec<usize> = (0..batch).map(|_| rng.random_range(0..model.output_width())).collect();
        let targets = match head {
            Head::Regression => Targets::Positions(&positions),
            Head::Classification { .. } => Targets::Classes(&classes),
        };
        let (_, grads) = model.loss_and_gradients(&x, targets).unwrap();
        let base = relu_pattern(&model, &x);
        for l in 0..model.layers.len() {
            for which in 0..2 {
                let len = if which == 0 { model.layers[l].w.len() } else { model.layers[l].b.len() };
                for i in 0..len {
                    let slot = |m: &mut MlpModel<f64>| -> *mut f64 {
                        if which == 0 { &mut m.layers[l].w[i] } else { &mut m.layers[l].b[i] }
                    };
                    let orig = unsafe { *slot(&mut model) };
                    unsafe { *slot(&mut model) = orig + h };
                    let ok_p = relu_pattern(&model, &x) == base;
                    let lp = model.batch_loss(&x, targets).unwrap();
                    unsafe { *slot(&mut model) = orig - h };
                    let ok_m = relu_pattern(&model, &x) == base;
                    let lm = model.batch_loss(&x, targets).unwrap();
                    unsafe { *slot(&mut model) = orig };
                    if !(ok_p && ok_m) {
                        continue;
                    }
                    let numeric = (lp - lm) / (2.0 * h);
                    let analytic = if which == 0 { grads[l].w[i] } else { grads[l].b[i] };
                    worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7));
                    checked += 1;
                }
            }
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over {checked} parameters in 20 models"))
}

// 3 ------------------------------------------------------------------------

fn adam() -> Outcome {
    let cfg = AdamConfig::default();
    let (x0, g1, g2) = (0.7_f64, 0.5_f64, -0.2_f64);
    // Step 1: m = 0.1 g1, v = 0.001 g1²; corrections divide by 0.1 and 0.001.
    let x1 = x0 - 2.5e-3 * g1 / (g1.abs() + 1e-8);
    // Step 2: m = 0.9·0.1 g1 + 0.1 g2, v = 0.999·0.001 g1² + 0.001 g2²,
    // corrected by 1 - 0.9² = 0.19 and 1 - 0.999² = 0.001999.
    let m2 = (0.09 * g1 + 0.1 * g2) / 0.19;
    let v2 = (0.000999 * g1 * g1 + 0.001 * g2 * g2) / 0.001999;
    let x2 = x1 - 2.5e-3 * m2 / (v2.sqrt() + 1e-8);

    let mut p = vec![x0];
    let mut state = AdamState::new(&[p.clone()]);
    state.step(&cfg, &mut [p.as_mut_slice()], &[&[g1]]).unwrap();
    let got1 = p[0];
    state.step(&cfg, &mut [p.as_mut_slice()], &[&[g2]]).unwrap();
    let got2 = p[0];
    let err = (got1 - x1).abs().max((got2 - x2).abs());
    let first = (got1 - x0).abs();
    let pass = err <= 1e-12 && (first - 2.5e-3).abs() < 1e-9;
    outcome(pass, format!("two-step error {err:.1e}, first step {first:.9}"))
}

// 4 ------------------------------------------------------------------------

fn metric() -> Outcome {
    let acc = accuracy(&[5.0, 13.0, 2.0], 12.0).unwrap();
    let boundary = accuracy(&[12.0], 12.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let d: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..30.0)).collect();
    let grid: Vec<f64> = (0..=30).map(f64::from).collect();
    let sweep = threshold_sweep(&d, &grid).unwrap();
    let monotone = sweep.windows(2).all(|w| w[0].1 <= w[1].1);
    let terminal = sweep.last().unwrap().1;
    let pass = acc == 2.0 / 3.0 && boundary == 1.0 && monotone && terminal == 1.0;
    outcome(pass, format!("acc = {acc}, boundary acc = {boundary}, monotone = {monotone}, terminal = {terminal}"))
}

// 5 ------------------------------------------------------------------------

fn ema() -> Outcome {
    let c = Vec3::new(0.25, -1.5, 3.0);
    let mut f = EmaFilter::new(0.1, 40).unwrap();
    let fixed = (0..100).all(|_| (f.update(c) - c).norm() < 1e-12);

    let mut a = EmaFilter::new(0.1, 40).unwrap();
    let mut b = EmaFilter::new(0.1, 40).unwrap();
    a.update(Vec3::new(1e6, 0.0, 0.0));
    for i in 0..40 {
        let x = Vec3::new(i as f64, 0.5, -(i as f64));
        a.update(x);
        b.update(x);
    }
    let windowed = a.value() == b.value();

    let mut s = EmaFilter::new(0.1, 40).unwrap();
    for _ in 0..40 {
        s.update(Vec3::zeros());
    }
    let step = s.update(Vec3::new(1.0, 1.0, 1.0)).x;
    let denom: f64 = (0..40).map(|i| 0.1 * 0.9_f64.powi(i)).sum();
    let expected = 0.1 / denom;
    let pass = fixed && windowed && (step - expected).abs() < 1e-9;
    outcome(pass, format!("fixed point {fixed}, window independence {windowed}, step {step:.12} vs {expected:.12}"))
}

// 6, 7 ---------------------------------------------------------------------

fn franka_table() -> (Vec<EvalReport>, f64) {
    let robot = Robot::preset("frankalike").unwrap();
    let proto = CollectionProtocol { reps_per_point: 20, seed: SEED, ..CollectionProtocol::for_robot("frankalike") };
    assert_eq!(proto.n_configs, 25);
    let data = synthesize_dataset(&robot, &proto, &RobotInstance::identity(7)).unwrap();
    let reports = compare_methods(&robot, &data, &TrainConfig { seed: SEED, ..Default::default() }, 12.0).unwrap();
    (reports, robot.reach())
}

fn table_line(reports: &[EvalReport]) -> String {
    reports.iter().map(|r| format!("{} {:.2} cm / {:.3}", r.method, r.mean_l2_cm, r.acc)).collect::<Vec<_>>().join(", ")
}

fn ordering(reports: &[EvalReport]) -> Outcome {
    let reg = &reports[0];
    let pass = reports[1..].iter().all(|r| reg.mean_l2_cm < r.mean_l2_cm && reg.acc > r.acc);
    outcome(pass, table_line(reports))
}

fn quality(reports: &[EvalReport], reach: f64) -> Outcome {
    let limit = 0.10 * reach * 100.0;
    let knn = reports.iter().find(|r| r.method == "knn-regressor").unwrap();
    let reg = &reports[0];
    outcome(
        reg.mean_l2_cm <= limit,
        format!("regression {:.2} cm vs limit {limit:.2} cm (10% of {reach:.3} m reach), knn reference {:.2} cm", reg.mean_l2_cm, knn.mean_l2_cm),
    )
}

// 8, 9, 12 -----------------------------------------------------------------

struct SpotRun {
    robot: Robot<f64>,
    model: MlpModel<f64>,
    seen: EvalReport,
    unseen: EvalReport,
}

fn spot_run() -> SpotRun {
    let robot = Robot::preset("spotlike").unwrap();
    let proto = CollectionProtocol { seed: SEED, ..CollectionProtocol::for_robot("spotlike") };
    let data = synthesize_dataset(&robot, &proto, &RobotInstance::identity(19)).unwrap();
    let config = TrainConfig { seed: SEED, ..Default::default() };
    let (train_set, val_set) = split(&data, config.split_ratio, config.seed).unwrap();
    let (model, _, _) = fit(&train_set, None, Head::Regression, &config).unwrap();
    let instance = perturb_instance(&robot.chain, 0.01, SEED + 8);
    let unseen = synthesize_dataset(&robot, &proto, &instance).unwrap();
    let (seen, unseen) = evaluate_cross_instance(&model, &robot, &val_set, &unseen, 12.0).unwrap();
    SpotRun { robot, model, seen, unseen }
}

fn cross_instance(s: &SpotRun) -> Outcome {
    let ratio = s.unseen.mean_l2_cm / s.seen.mean_l2_cm;
    outcome(
        ratio <= 2.0,
        format!("seen {:.2} cm, unseen {:.2} cm, ratio {ratio:.2} (limit 2.00)", s.seen.mean_l2_cm, s.unseen.mean_l2_cm),
    )
}

fn throughput(s: &SpotRun) -> Outcome {
    let r = bench_throughput(&s.model, &s.robot, 10.0, SEED).unwrap();
    outcome(
        r.rate_hz >= 2000.0,
        format!("{:.0} filtered/s ({:.0} raw/s), mean {:.1} us, p99 {:.1} us", r.rate_hz, r.raw_rate_hz, r.mean_latency_us, r.p99_latency_us),
    )
}

fn serve_loop(s: &SpotRun) -> Outcome {
    let rules = RuleSet::preset("spotlike").unwrap();
    let shared = Arc::new(Shared::new(s.robot.clone(), s.model.clone(), rules, 60.0).unwrap());
    let mut session = Session::new(shared, SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 12);
    let mut hits = 0;
    let mut errors = Vec::new();
    let mut in_contact = 0;
    for p in &s.robot.points {
        let q = s.robot.sample_config(&mut rng).unwrap();
        session.handle(ClientMsg::SetConfig { q }).unwrap();
        session.handle(ClientMsg::TouchApply { point_id: Some(p.id), link: None, local: None, force: None }).unwrap();
        let truth = session.touch_world().unwrap().unwrap();
        let mut last = None;
        for _ in 0..60 {
            for m in session.tick().unwrap() {
                if let ServerMsg::Telemetry(t) = m {
                    last = Some(t);
                }
            }
        }
        let t = last.unwrap();
        let err = (Vec3::from(t.p_smoothed) - truth).norm() * 100.0;
        errors.push(err);
        in_contact += usize::from(t.contact);
        if t.contact && err <= 12.0 {
            hits += 1;
        }
        session.handle(ClientMsg::TouchRelease).unwrap();
        for _ in 0..60 {
            session.tick().unwrap();
        }
    }
    let share = hits as f64 / s.robot.points.len() as f64;
    errors.sort_by(f64::total_cmp);
    outcome(
        share >= 0.85,
        format!(
            "{hits}/{} points within 12 cm after 1 s ({:.1}%), contact flagged on {in_contact}, median error {:.2} cm",
            s.robot.points.len(),
            share * 100.0,
            errors[errors.len() / 2]
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cli = |args: &[&str]| {
        let mut argv = vec!["unitac", "--seed", "11", "--robot", "frankalike"];
        argv.extend_from_slice(args);
        run(Cli::try_parse_from(argv).unwrap()).unwrap();
    };
    let file = |run_id: &str, name: &str| dir.path().join(format!("{run_id}.{name}")).to_string_lossy().into_owned();
    for run_id in ["a", "b"] {
        let (data, model, report) = (file(run_id, "ndjson"), file(run_id, "model.json"), file(run_id, "report.json"));
        cli(&["gen", "--configs", "6", "--reps", "3", "--out", &data]);
        cli(&["train", "--data", &data, "--epochs", "3", "--out", &model]);
        cli(&["eval", "--data", &data, "--model", &model, "--out", &report]);
    }
    let names = ["ndjson", "model.json", "model.history.json", "report.json"];
    let same: Vec<bool> = names
        .iter()
        .map(|n| fs::read(Path::new(&file("a", n))).unwrap() == fs::read(Path::new(&file("b", n))).unwrap())
        .collect();
    outcome(same.iter().all(|&s| s), format!("identical: {}", names.iter().zip(&same).map(|(n, s)| format!("{n}={s}")).collect::<Vec<_>>().join(" ")))
}

// 11 -----------------------------------------------------------------------

fn phri() -> Outcome {
    let rules = RuleSet::preset("spotlike").unwrap();
    let frames = |segments: &[(Option<&'static str>, usize)]| {
        let mut out = Vec::new();
        for &(r, n) in segments {
            for _ in 0..n {
                out.push((out.len() as f64 / 60.0, r));
            }
        }
        out
    };
    // 24 frames at 60 Hz = 400 ms; 12 frames = 200 ms.
    let held = dispatch(&rules, frames(&[(Some("top_rear"), 24), (None, 30)]), 0.3, 0.1).unwrap();
    let flicker = dispatch(&rules, frames(&[(Some("top_rear"), 12), (Some("top_middle"), 12), (Some("top_rear"), 12)]), 0.3, 0.1).unwrap();
    let mut spot: Vec<String> = rules.rules.iter().map(|r| r.action.clone()).collect();
    let mut franka: Vec<String> = RuleSet::preset("frankalike").unwrap().rules.iter().map(|r| r.action.clone()).collect();
    spot.sort();
    franka.sort();
    let mut want_spot: Vec<&str> = SPOTLIKE_ACTIONS.to_vec();
    let mut want_franka: Vec<&str> = FRANKALIKE_ACTIONS.to_vec();
    want_spot.sort();
    want_franka.sort();
    let pass = held.len() == 1 && held[0].action == "sit" && flicker.is_empty() && spot == want_spot && franka == want_franka;
    outcome(pass, format!("held 400 ms -> {} event(s), flicker -> {}, vocabularies {} + {}", held.len(), flicker.len(), spot.len(), franka.len()))
}

#[test]
fn primary_acceptance_criteria() {
    let mut failed = Vec::new();
    let mut check = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(n, name, t, &o);
        if !o.pass {
            failed.push(n);
        }
    };
    check(1, "jacobian correctness", &mut jacobian);
    check(2, "backprop correctness", &mut backprop);
    check(3, "adam oracle", &mut adam);
    check(4, "accuracy metric", &mut metric);
    check(5, "ema properties", &mut ema);

    let t = Instant::now();
    let (table, reach) = franka_table();
    let setup = t.elapsed().as_secs_f64();
    check(6, "method ordering on franka-like", &mut || {
        let mut o = ordering(&table);
        o.detail.push_str(&format!("; table built in {setup:.1} s"));
        o
    });
    check(7, "localization quality", &mut || quality(&table, reach));

    let spot = spot_run();
    check(8, "cross-instance generalization", &mut || cross_instance(&spot));
    check(9, "throughput", &mut || throughput(&spot));
    check(10, "determinism", &mut determinism);
    check(11, "phri dispatch", &mut phri);
    check(12, "end-to-end serve loop", &mut || serve_loop(&spot));

    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
