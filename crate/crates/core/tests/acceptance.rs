//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any
//! criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{barrier_qp_oracle, dykstra_delta_min, fd_grad, fd_hessian, mann_kendall, random_batch, random_policy, rel_err, QpInstance, CG};
use nalgebra::DVector;
use rampsafe::config::{Mode, RunConfig};
use rampsafe::dataset::{extract_merge_pairs, generate_synthetic_dataset, parse_trajectories, ColumnMap, ExtractConfig, SyntheticConfig};
use rampsafe::dynamics::{step_deterministic, ControlInput, VehicleState};
use rampsafe::numerics::RngStream;
use rampsafe::optimizer::{feasibility_check, kkt_step, retrieval_step};
use rampsafe::policy::{constraint_surrogate, fisher_vector_product, log_prob, mean_kl, CriticParams, MlpSpec};
use rampsafe::safety::{
    barrier, chance_constraint, pair_constraints, safety_filter, verify_chance_constraint_mc, Axis, CbfConfig, CbfMode,
    PairGeometry,
};
use rampsafe::train::{evaluate_online, load_offline_data, train_offline, train_online, EvalSummary, OnlineResult};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn suffix(failures: &[String]) -> String {
    if failures.is_empty() {
        String::new()
    } else {
        format!("; {}", failures.join("; "))
    }
}

fn within(limit: Duration, elapsed: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("runtime {elapsed:.1?} exceeds {limit:?}"))
    }
}

// 1 ------------------------------------------------------------------------

fn chance_calibration() -> Outcome {
    const N: usize = 100_000;
    let start = Instant::now();
    let mut rng = RngStream::new(101).substream("geometry");
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for g in 0..20 {
        let pair = PairGeometry {
            dx: [rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0)],
            dv: [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)],
            eps_mean: [rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)],
            eps_var: [rng.uniform(0.005, 0.1), rng.uniform(0.005, 0.1)],
        };
        for eta in [0.6, 0.9, 0.99] {
            let cfg = CbfConfig {
                eta,
                mode: CbfMode::Coupled,
                ..Default::default()
            };
            let c = chance_constraint(&pair, &cfg, Axis::Coupled).map_err(|e| e.to_string())?;
            let s = c.b / (c.a[0] * c.a[0] + c.a[1] * c.a[1]);
            let u = ControlInput::new(c.a[0] * s, c.a[1] * s);
            let mut mc = rng.substream(&format!("mc/{g}/{eta}"));
            let p = verify_chance_constraint_mc(&pair, &cfg, Axis::Coupled, &u, N, &mut mc);
            let se = (eta * (1.0 - eta) / N as f64).sqrt();
            let z = (p - eta).abs() / se;
            worst = worst.max(z);
            if z > 3.0 {
                failures.push(format!("geometry {g} eta {eta}: p {p:.5}"));
            }
        }
    }
    within(Duration::from_secs(10), start.elapsed())?;
    check(
        failures.is_empty(),
        format!("60 cases, worst |p-eta| = {worst:.2} SE (limit 3){}", suffix(&failures)),
    )
}

// 2 ------------------------------------------------------------------------

fn forward_invariance() -> Outcome {
    const STEPS: usize = 10_000;
    let start = Instant::now();
    let mut rng = RngStream::new(202).substream("invariance");
    let (mut clean, mut flagged, mut worst) = (0, 0, f64::INFINITY);
    let mut failures = Vec::new();
    for run in 0..50 {
        let mode = if run % 2 == 0 { CbfMode::Coupled } else { CbfMode::Decoupled };
        let cfg = CbfConfig {
            dt: 0.01,
            mode,
            ..Default::default()
        };
        let ang = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
        let dist = rng.uniform(12.0, 40.0);
        let mut host = VehicleState::new(0.0, 0.0, rng.uniform(5.0, 12.0), 0.0);
        let mut ego = VehicleState::new(
            dist * ang.cos(),
            dist * ang.sin(),
            host.vx + rng.uniform(-4.0, 4.0),
            rng.uniform(-4.0, 4.0),
        );
        if mode == CbfMode::Decoupled {
            ego.x = ego.x.signum() * (ego.x.abs().max(cfg.r_safe + 1.0));
            ego.y = ego.y.signum() * (ego.y.abs().max(cfg.r_safe + 1.0));
        }
        let gain = rng.uniform(0.2, 1.0);
        let zero = rampsafe::dynamics::NoiseModel::zero();
        let mut raised = false;
        for _ in 0..STEPS {
            let pair = PairGeometry::between(&ego, &zero, &host, &zero);
            let h = cfg.axes().iter().map(|&ax| barrier(&pair, &cfg, ax)).fold(f64::INFINITY, f64::min);
            worst = worst.min(h);
            if h < -1e-6 {
                failures.push(format!("run {run} ({mode:?}): h = {h:.3e}"));
                break;
            }
            // Nominal: chase the host.
            let nominal = ControlInput::new(gain * (host.x - ego.x), gain * (host.y - ego.y));
            let cons = pair_constraints(&pair, &cfg).map_err(|e| e.to_string())?;
            let out = safety_filter(&nominal, &cons, &cfg);
            if out.infeasible {
                raised = true;
                break;
            }
            ego = step_deterministic(&ego, &out.u, cfg.dt).map_err(|e| e.to_string())?;
            host = step_deterministic(&host, &ControlInput::new(0.0, 0.0), cfg.dt).map_err(|e| e.to_string())?;
        }
        if raised {
            flagged += 1;
        } else {
            clean += 1;
        }
    }
    within(Duration::from_secs(30), start.elapsed())?;
    check(
        failures.is_empty(),
        format!(
            "{clean} runs unflagged, {flagged} stopped at an infeasibility flag; min h before any flag {worst:.3e} (limit -1e-6){}",
            suffix(&failures)
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn optimizer_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(303).substream("qp");
    let (mut obj_gap, mut kkt_res, mut dmin_gap, mut quad_gap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let inst = QpInstance::random(&mut rng, 6, 2);
        let sol = kkt_step(&inst.g_vec(), &inst.c_cols(), &inst.z, inst.hvp(), inst.delta, CG).map_err(|e| e.to_string())?;
        obj_gap = obj_gap.max((sol.objective - barrier_qp_oracle(&inst).0).abs());
        kkt_res = kkt_res.max(inst.kkt_residual(&sol.step, sol.lambda, &sol.nu));
        if !inst.c.is_empty() {
            let z: Vec<f64> = inst.z.iter().map(|z| z + rng.uniform(0.0, 2.0)).collect();
            let f = feasibility_check(inst.hvp(), &inst.c_cols(), &z, inst.delta, CG);
            dmin_gap = dmin_gap.max((f.delta_min - dykstra_delta_min(&inst.h, &inst.c, &z)).abs());
            let r = retrieval_step(&inst.c_cols()[0], inst.hvp(), inst.delta, CG).map_err(|e| e.to_string())?;
            quad_gap = quad_gap.max((inst.quad(&DVector::from_column_slice(&r)) - inst.delta).abs());
        }
    }
    let id = |v: &[f64]| v.to_vec();
    let analytic_dmin = feasibility_check(id, &[vec![1.0, 0.0]], &[1.0], 1.0, CG).delta_min;
    let analytic_step = retrieval_step(&[2.0, 0.0], id, 0.5, CG).map_err(|e| e.to_string())?;
    let analytic_ok = (analytic_dmin - 0.5).abs() < 1e-12 && (analytic_step[0] + 1.0).abs() < 1e-12 && analytic_step[1].abs() < 1e-12;
    within(Duration::from_secs(60), start.elapsed())?;
    check(
        obj_gap <= 1e-4 && kkt_res <= 1e-6 && dmin_gap <= 1e-4 && quad_gap <= 1e-6 && analytic_ok,
        format!(
            "objective gap {obj_gap:.1e} (1e-4), KKT residual {kkt_res:.1e} (1e-6), delta_min gap {dmin_gap:.1e} (1e-4), \
             boundary gap {quad_gap:.1e} (1e-6), analytic cases {}",
            if analytic_ok { "ok" } else { "wrong" }
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(404).substream("grad");
    let policy = random_policy(&mut rng, 4, vec![5, 3]);
    let batch = random_batch(&mut rng, 4, 12);
    let theta = policy.theta.clone();

    let mut logp_err = 0.0f64;
    for s in &batch.steps {
        let f = |t: &[f64]| {
            let p = policy.with_theta(t.to_vec()).unwrap();
            let (m, sd) = p.forward(&s.obs).unwrap();
            log_prob(&m, &sd, &s.raw_action)
        };
        let analytic = policy.grad_log_prob(&s.obs, &s.raw_action).map_err(|e| e.to_string())?;
        logp_err = logp_err.max(rel_err(&analytic, &fd_grad(f, &theta, 1e-6)));
    }

    let critic = CriticParams::init(MlpSpec::new(4, vec![6, 4], 1), &mut rng).map_err(|e| e.to_string())?;
    let obs: Vec<Vec<f64>> = batch.steps.iter().map(|s| s.obs.clone()).collect();
    let returns: Vec<f64> = batch.steps.iter().map(|s| s.ret).collect();
    let (_, critic_grad) = critic.loss_and_grad(&obs, &returns).map_err(|e| e.to_string())?;
    let critic_fd = fd_grad(|p: &[f64]| critic.with_phi(p.to_vec()).unwrap().loss(&obs, &returns).unwrap(), &critic.phi, 1e-6);
    let critic_err = rel_err(&critic_grad, &critic_fd);

    let (_, _, c_grad) = constraint_surrogate(&batch, &policy, 0).map_err(|e| e.to_string())?;
    let c_fd = fd_grad(|t: &[f64]| constraint_surrogate(&batch, &policy.with_theta(t.to_vec()).unwrap(), 0).unwrap().0, &theta, 1e-6);
    let constraint_err = rel_err(&c_grad, &c_fd);

    let small_batch = random_batch(&mut rng, 4, 6);
    let kl = |t: &[f64]| mean_kl(&small_batch, &policy, &policy.with_theta(t.to_vec()).unwrap()).unwrap();
    let hess = fd_hessian(kl, &theta, 1e-4);
    let mut fvp_err = 0.0f64;
    for _ in 0..5 {
        let v: Vec<f64> = (0..theta.len()).map(|_| rng.standard_normal()).collect();
        let fv = fisher_vector_product(&small_batch, &policy, &v, 0.0).map_err(|e| e.to_string())?;
        fvp_err = fvp_err.max(rel_err(&fv, (&hess * DVector::from_column_slice(&v)).as_slice()));
    }
    within(Duration::from_secs(60), start.elapsed())?;
    check(
        logp_err <= 1e-5 && critic_err <= 1e-5 && constraint_err <= 1e-5 && fvp_err <= 1e-4,
        format!(
            "relative errors: log-prob {logp_err:.1e}, critic {critic_err:.1e}, constraint {constraint_err:.1e} (1e-5), \
             FVP {fvp_err:.1e} (1e-4)"
        ),
    )
}

// 5, 6 ---------------------------------------------------------------------

fn online_config(alpha: f64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_ci_profile();
    cfg.seed = seed;
    cfg.online.epochs = 30;
    cfg.online.episodes = 20;
    cfg.online.length = 50;
    cfg.online.eval_episodes = 50;
    cfg.scenario.host_speed_kmh = 40.0;
    cfg.scenario.cbf.r_safe = 8.0;
    cfg.scenario.cbf.alpha = alpha;
    cfg.scenario.cbf.eta = 0.99;
    cfg
}

fn train(cfg: &RunConfig) -> Result<OnlineResult, String> {
    train_online(cfg, &mut |_, _| Ok(())).map_err(|e| e.to_string())
}

fn safety_rates_ok(eval: &EvalSummary) -> bool {
    eval.safe_fraction >= 0.95 && eval.violation_rate <= 0.02
}

fn describe(eval: &EvalSummary) -> String {
    format!(
        "safe {:.3} (>= 0.95), violation rate {:.4} (<= 0.02), min distance {:.2} m, infeasible {:.4}",
        eval.safe_fraction, eval.violation_rate, eval.min_distance, eval.infeasibility_rate
    )
}

fn trained_safety(low: &OnlineResult, elapsed: Duration) -> Outcome {
    within(Duration::from_secs(15 * 60), elapsed)?;
    check(safety_rates_ok(&low.eval), format!("{} over {} episodes", describe(&low.eval), low.eval.episodes))
}

fn alpha_sensitivity(low: &OnlineResult) -> Outcome {
    let mut cfg_low = online_config(0.75, 1);
    cfg_low.online.eval_episodes = 30;
    let (_, eval_low) = evaluate_online(&low.actor, &cfg_low, false).map_err(|e| e.to_string())?;
    let mut cfg_high = online_config(15.0, 1);
    let high = train(&cfg_high)?;
    cfg_high.online.eval_episodes = 30;
    let (_, eval_high) = evaluate_online(&high.actor, &cfg_high, false).map_err(|e| e.to_string())?;
    let earlier = match (eval_high.median_merge_time, eval_low.median_merge_time) {
        (Some(h), Some(l)) => h < l,
        (Some(_), None) => true,
        _ => false,
    };
    let fmt = |t: Option<f64>| t.map_or("none".to_string(), |t| format!("{t:.2} s"));
    check(
        earlier && safety_rates_ok(&high.eval) && safety_rates_ok(&low.eval),
        format!(
            "median merge alpha=15 {} vs alpha=0.75 {} (30 episodes); alpha=15: {}; alpha=0.75: {}",
            fmt(eval_high.median_merge_time),
            fmt(eval_low.median_merge_time),
            describe(&high.eval),
            describe(&low.eval)
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn offline_pipeline() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for seed in 1..=3u64 {
        let cfg = SyntheticConfig::default();
        let data = generate_synthetic_dataset(&cfg, &RngStream::new(seed)).map_err(|e| e.to_string())?;
        let report = parse_trajectories(data.csv.as_bytes(), &ColumnMap::default(), cfg.units).map_err(|e| e.to_string())?;
        let mut got: Vec<(i64, i64)> = extract_merge_pairs(&report.records, &ExtractConfig::default())
            .episodes
            .iter()
            .map(|e| (e.ego_id, e.merge_frame))
            .collect();
        let mut want = data.planted.clone();
        got.sort_unstable();
        want.sort_unstable();
        if got != want {
            ok = false;
            notes.push(format!("seed {seed}: recovered {}/{} planted merges", got.len(), want.len()));
        }
    }
    for seed in 1..=3u64 {
        let mut cfg = RunConfig::default();
        cfg.apply_ci_profile();
        cfg.seed = seed;
        let data = load_offline_data(&cfg).map_err(|e| e.to_string())?;
        let res = train_offline(&cfg, &data, &mut |_, _| Ok(())).map_err(|e| e.to_string())?;
        let series: Vec<f64> = res.metrics.iter().filter_map(|m| m.val_tracking_error).collect();
        let finite = series.len() == cfg.offline.epochs && series.iter().all(|v| v.is_finite());
        let (s, z) = mann_kendall(&series);
        // One-sided 5% Mann–Kendall test for a decreasing trend.
        let decreasing = s < 0 && z <= -1.645;
        let safe = res.eval.safe_fraction >= 0.95;
        ok &= finite && decreasing && safe;
        notes.push(format!(
            "seed {seed}: safe {:.3}, tracking error {:.4} -> {:.4} (MK z {z:.2})",
            res.eval.safe_fraction,
            series.first().copied().unwrap_or(f64::NAN),
            series.last().copied().unwrap_or(f64::NAN)
        ));
    }
    check(ok, format!("all planted merges recovered; {}", notes.join("; ")))
}

// 8 ------------------------------------------------------------------------

fn run_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "timing.jsonl") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut base = RunConfig::default();
    base.apply_ci_profile();
    base.seed = 8;
    // extract-dataset reads the generated file.
    let gen_dir = tmp.path().join("source");
    rampsafe::train::run(Mode::GenSynthetic, &base, &gen_dir).map_err(|e| e.to_string())?;
    base.offline.data = None;
    let modes = [
        Mode::TrainOnline,
        Mode::TrainOffline,
        Mode::Eval,
        Mode::FilterOnly,
        Mode::ExtractDataset,
        Mode::GenSynthetic,
    ];
    let mut compared = 0;
    for mode in modes {
        let mut cfg = base.clone();
        if mode == Mode::ExtractDataset {
            cfg.offline.data = Some(gen_dir.join("synthetic.csv"));
        }
        let a = tmp.path().join(format!("{}-a", mode.name()));
        let b = tmp.path().join(format!("{}-b", mode.name()));
        rampsafe::train::run(mode, &cfg, &a).map_err(|e| e.to_string())?;
        rampsafe::train::run(mode, &cfg, &b).map_err(|e| e.to_string())?;
        let (fa, fb) = (run_bytes(&a), run_bytes(&b));
        if fa != fb {
            return Err(format!("{}: outputs differ between identical runs", mode.name()));
        }
        compared += fa.len();
    }
    Ok(format!("6 modes, {compared} files byte-identical across repeat runs"))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("acceptance {id} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("acceptance {id} {name}: FAIL ({detail})");
            }
        }
    };
    report(1, "chance-constraint calibration", chance_calibration());
    report(2, "deterministic forward invariance", forward_invariance());
    report(3, "optimizer correctness", optimizer_correctness());
    report(4, "gradient fidelity", gradient_fidelity());
    let start = Instant::now();
    let low = train(&online_config(0.75, 1));
    let elapsed = start.elapsed();
    match &low {
        Ok(low) => {
            report(5, "safety of trained policy", trained_safety(low, elapsed));
            report(6, "alpha sensitivity", alpha_sensitivity(low));
        }
        Err(e) => {
            report(5, "safety of trained policy", Err(e.clone()));
            report(6, "alpha sensitivity", Err(e.clone()));
        }
    }
    report(7, "offline pipeline", offline_pipeline());
    report(8, "determinism", determinism());
    if failed > 0 {
        println!("acceptance: {failed} of 8 criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 8 criteria passed");
}
