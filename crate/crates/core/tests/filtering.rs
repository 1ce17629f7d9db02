use std::process::Command;

use nalgebra::{DMatrix, DVector};

use tmefs::discretize::{Method, MomentProvider};
use tmefs::filter::{self, FilterOptions, GaussianState};
use tmefs::model::{MeasModel, SdeModel};
use tmefs::quadrature::{QuadratureKind, SigmaRule};
use tmefs::symexpr::Expr;

fn h_expr() -> Vec<Expr> {
    vec![
        Expr::parse("sin(x0) + 0.5*x1^2").unwrap(),
        Expr::parse("x0*cos(x1) + exp(0.3*x1)").unwrap(),
    ]
}

fn h_eval(x: f64, y: f64) -> [f64; 2] {
    [x.sin() + 0.5 * y * y, x * y.cos() + (0.3 * y).exp()]
}

#[test]
fn gauss_hermite_update_matches_brute_force_integration() {
    let m = DVector::from_vec(vec![0.3, -0.4]);
    let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.15, 0.15, 0.3]);
    let v = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.1]));
    let y = DVector::from_vec(vec![0.5, -0.1]);
    let meas = MeasModel::nonlinear(2, h_expr(), v.clone()).unwrap();
    let rule = SigmaRule::gauss_hermite(2, 20).unwrap();
    let prior = GaussianState::new(m.clone(), p.clone()).unwrap();
    let out = filter::update(&prior, &meas, &rule, &y).unwrap();

    // Trapezoid rule over ±9 standard deviations in whitened coordinates.
    let l = p.clone().cholesky().unwrap().l();
    let n = 601;
    let half = 9.0;
    let step = 2.0 * half / (n - 1) as f64;
    let mut w_sum = 0.0;
    let mut eh = DVector::zeros(2);
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let z = DVector::from_vec(vec![-half + i as f64 * step, -half + j as f64 * step]);
            let w = (-0.5 * z.norm_squared()).exp();
            let x = &m + &l * &z;
            let hv = h_eval(x[0], x[1]);
            let hv = DVector::from_vec(hv.to_vec());
            eh += &hv * w;
            w_sum += w;
            pts.push((x, hv, w));
        }
    }
    eh /= w_sum;
    let mut s = v.clone();
    let mut c = DMatrix::zeros(2, 2);
    for (x, hv, w) in &pts {
        let dh = hv - &eh;
        s += &dh * dh.transpose() * (*w / w_sum);
        c += (x - &m) * dh.transpose() * (*w / w_sum);
    }
    let k = &c * s.clone().try_inverse().unwrap();
    let mean = &m + &k * (&y - &eh);
    let cov = &p - &k * &s * k.transpose();
    assert!((&out.innovation_mean - &eh).amax() < 1e-8, "{} vs {}", out.innovation_mean, eh);
    assert!((&out.state.mean - &mean).amax() < 1e-8);
    assert!((&out.state.cov - &cov).amax() < 1e-8);
}

fn pendulum() -> (SdeModel, MeasModel) {
    let model = SdeModel::parse(&["x1", "-9.81*sin(x0)"], &[&["0"], &["0.5"]], DMatrix::identity(1, 1)).unwrap();
    let meas = MeasModel::nonlinear(2, vec![Expr::parse("sin(x0)").unwrap()], DMatrix::identity(1, 1) * 0.1).unwrap();
    (model, meas)
}

#[test]
fn filter_and_smoother_are_deterministic() {
    let (model, meas) = pendulum();
    let ys: Vec<DVector<f64>> = (0..40).map(|k| DVector::from_element(1, (0.3 * k as f64).sin() * 0.8)).collect();
    let init = GaussianState::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2) * 0.1).unwrap();
    for kind in [QuadratureKind::Ghkf, QuadratureKind::Ukf, QuadratureKind::Ckf] {
        let rule = kind.build(2).unwrap();
        for method in [Method::Tme(3), Method::Em, Method::Ito15, Method::GaussOde, Method::LinOde] {
            let provider = method.build(&model, kind).unwrap();
            let run = || {
                let fr =
                    filter::filter(provider.as_ref(), &meas, &rule, &ys, 0.0, 0.05, 2, &init, &FilterOptions::default()).unwrap();
                let sr = filter::smooth(&fr);
                (fr, sr)
            };
            let (a, sa) = run();
            let (b, sb) = run();
            assert_eq!(a, b, "{method} with {kind}");
            assert_eq!(sa, sb);
            assert!(!a.diverged(), "{method} with {kind}: {:?}", a.divergence);
        }
    }
}

#[test]
fn smoother_improves_on_filter_for_a_well_specified_model() {
    use rand::{Rng, SeedableRng};
    let (model, meas) = pendulum();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let dt = 0.05;
    let truth = tmefs::mc::simulate_recorded(&model, &DVector::from_vec(vec![1.0, 0.0]), 0.0, dt / 100.0, 100, 200, &mut rng)
        .unwrap();
    let ys: Vec<DVector<f64>> = truth[1..]
        .iter()
        .map(|x| meas.observe(x).unwrap() + DVector::from_element(1, 0.1f64.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    let init = GaussianState::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2) * 0.1).unwrap();
    let rule = SigmaRule::cubature(2).unwrap();
    let provider = Method::Tme(3).build(&model, QuadratureKind::Ckf).unwrap();
    let fr = filter::filter(provider.as_ref(), &meas, &rule, &ys, 0.0, dt, 1, &init, &FilterOptions::default()).unwrap();
    let sr = filter::smooth(&fr);
    let err = |est: Vec<DVector<f64>>| -> f64 {
        est.iter().zip(&truth[1..]).map(|(m, x)| (m - x).norm_squared()).sum::<f64>()
    };
    let f = err(fr.means());
    let s = err(sr.states[1..].iter().map(|s| s.mean.clone()).collect());
    assert!(s < f, "smoother {s} vs filter {f}");
}

#[test]
fn substeps_approach_the_exact_linear_prediction() {
    // dx = −x dt + dW from N(1, 0.5) over Δt = 1: exact mean e⁻¹, variance
    // 0.5e⁻² + (1 − e⁻²)/2.
    let model = SdeModel::parse(&["-x0"], &[&["1"]], DMatrix::identity(1, 1)).unwrap();
    let rule = SigmaRule::gauss_hermite(1, 3).unwrap();
    let init = GaussianState::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.5)).unwrap();
    let e2 = (-2.0f64).exp();
    let (m_ex, v_ex) = ((-1.0f64).exp(), 0.5 * e2 + 0.5 * (1.0 - e2));
    for method in [Method::Tme(2), Method::Em, Method::Ito15] {
        let provider = method.build(&model, QuadratureKind::Ghkf).unwrap();
        let mut last = f64::INFINITY;
        for substeps in [4, 16, 64] {
            let (pred, _) = filter::predict(&init, provider.as_ref(), &rule, 0.0, 1.0, substeps).unwrap();
            let err = (pred.mean[0] - m_ex).abs() + (pred.cov[(0, 0)] - v_ex).abs();
            assert!(err < last, "{method}: error {err} did not shrink");
            last = err;
        }
        assert!(last < 1e-2, "{method}: {last}");
    }
}

#[test]
fn providers_agree_for_small_steps() {
    let model = SdeModel::parse(&["x1", "-sin(x0) - 0.2*x1"], &[&["0"], &["0.4"]], DMatrix::identity(1, 1)).unwrap();
    let x = DVector::from_vec(vec![0.4, -0.3]);
    let dt = 1e-3;
    let reference = Method::Tme(4).build(&model, QuadratureKind::Ghkf).unwrap();
    let (m_ref, p_ref) = reference.transition(&x, 0.0, dt).unwrap();
    for method in [Method::Tme(2), Method::Em, Method::Ito15] {
        let p: Box<dyn MomentProvider> = method.build(&model, QuadratureKind::Ghkf).unwrap();
        let (m, c) = p.transition(&x, 0.0, dt).unwrap();
        assert!((&m - &m_ref).amax() < dt * dt, "{method}");
        assert!((&c - &p_ref).amax() < dt * dt, "{method}");
    }
}

fn tmefs() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tmefs"))
}

#[test]
fn certify_exit_codes() {
    let ok = tmefs().args(["certify", "--model", "tanh", "--order", "3", "--x", "0.5"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let out = String::from_utf8(ok.stdout).unwrap();
    assert!(out.contains("certified p.d."));

    let bad = tmefs().args(["certify", "--model", "ou", "--order", "2", "--dt-max", "3"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8(bad.stdout).unwrap().contains("witness"));
}

#[test]
fn cli_runs_a_small_tracking_grid() {
    let dir = std::env::temp_dir().join(format!("tmefs-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("track.cfg");
    std::fs::write(&cfg, "methods = tme2\ndt = 4\nsubsteps = 1\ntrials = 2\nhorizon = 20\n").unwrap();
    let out_dir = dir.join("out");
    let run = tmefs()
        .args(["track", "--config", cfg.to_str().unwrap(), "--output", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let cells = std::fs::read_to_string(out_dir.join("cells.csv")).unwrap();
    assert!(cells.starts_with("method,dt,substeps,n_trials,n_diverged,n_used"));
    let meta = std::fs::read_to_string(out_dir.join("metadata.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(meta.lines().next().unwrap()).unwrap();
    assert_eq!(first["record"], "run");
    assert_eq!(first["config"]["trials"], "2");

    let bad = tmefs().args(["track", "--config", dir.join("missing.cfg").to_str().unwrap()]).output().unwrap();
    assert!(!bad.status.success());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn cli_expand_and_simulate() {
    let out = tmefs().args(["expand", "--model", "tanh", "--order", "2", "--x", "0.5", "--dt", "1"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("a[1][0] = tanh(x0)"), "{text}");
    assert!(text.contains("mean = [0.9621171572600098]"));
    let sim = tmefs().args(["simulate", "--model", "ou", "--x0", "1", "--steps", "5", "--paths", "2"]).output().unwrap();
    let csv = String::from_utf8(sim.stdout).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 6);
}
