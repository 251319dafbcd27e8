//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`). By default it reports and
//! exits 0 so that red criteria stay visible without hiding the rest of the
//! test run; set `CVMPC_ACCEPTANCE_STRICT=1` to exit non-zero on any failure.
//! `CVMPC_ACCEPTANCE_ONLY=1,3,5` runs a subset (criteria that depend on the
//! end-to-end campaign pull it in automatically).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DVector, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cvmpc::conservative::{pessimistic_return, ObservationMode, PessimismFormula};
use cvmpc::contact::{contact_forces, gravitoinertial_wrench, ContactModel, ObjectParams, GRAVITY};
use cvmpc::dataset::{Dataset, Transition};
use cvmpc::ensemble::{train_ensemble, AdamConfig, EnsembleCheckpoint, Mlp, TrainConfig};
use cvmpc::harness::{self, Arm, Check, ExperimentConfig, Manifest, Report, Table};
use cvmpc::kinematics::{ee_state, EndEffectorState, JointState};
use cvmpc::sim::{SimSetup, Simulator, WorldState};
use cvmpc::Exec;

// Pinned thresholds.
const FORCE_TOL: f64 = 1e-9;
const BALANCE_TOL: f64 = 1e-8;
const ONSET_TOL_DEG: f64 = 0.5;
const GRAD_REL_TOL: f64 = 1e-4;
const VALUE_REL_TOL: f64 = 0.02;
const NEAR_MAX_TOL: f64 = 1e-6;
const NEAR_MEAN_TOL: f64 = 1e-3;
const DEMO_MIN_SUCCESS: f64 = 90.0;
const CV_MIN_SUCCESS: f64 = 80.0;
const BIASED_MARGIN: f64 = 20.0;
const ROT_MIN_SUCCESS: f64 = 90.0;

struct Outcome {
    checks: Vec<Check>,
}

impl Outcome {
    fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn table_to_checks(rows: &Table, min: f64) -> Vec<Check> {
    rows.rows.iter().map(|r| harness::success_check(r, min)).collect()
}

// ---------------------------------------------------------------------------
// 1. Contact oracle

fn contact_oracle() -> Outcome {
    let obj = ObjectParams::cube_sim();
    let model = ContactModel::new(obj.clone()).unwrap();
    let level = EndEffectorState::at_rest(Vector3::zeros(), Rotation3::identity());
    let f = model.forces(&level, &GRAVITY).unwrap();
    let want = obj.mass * 9.81 / 4.0;
    let normal_err = f.iter().map(|c| (c.z - want).abs()).fold(0.0, f64::max);
    let tangential = f.iter().map(|c| c.x.hypot(c.y)).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let mut ee = EndEffectorState::at_rest(
            Vector3::zeros(),
            Rotation3::new(axis * rng.gen_range(0.0..0.5)),
        );
        let mut v3 = |s: f64| Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
        ee.linear_acceleration = v3(5.0);
        ee.angular_velocity = v3(2.0);
        ee.angular_acceleration = v3(10.0);
        let w = gravitoinertial_wrench(&ee, &obj, &GRAVITY).unwrap();
        let forces = contact_forces(&w, &model.grasp_pinv).unwrap();
        let residual = &model.grasp * DVector::from_column_slice(&forces.0) + w.to_vector();
        worst = worst.max(residual.amax());
    }
    Outcome {
        checks: vec![
            check("normal force = m·g/4", normal_err <= FORCE_TOL, format!("max error {normal_err:.3e} N")),
            check("tangential force ~ 0", tangential <= FORCE_TOL, format!("max {tangential:.3e} N")),
            check("G·F + w = 0 over 1000 wrenches", worst <= BALANCE_TOL, format!("max residual {worst:.3e}")),
        ],
    }
}

// ---------------------------------------------------------------------------
// 2. Critical tilt

/// Quasi-static sweep through the simulator: the arm is placed at rest at
/// successive wrist angles and the first friction-labelled step is reported.
fn onset_deg(mu: f64) -> Option<f64> {
    let setup = SimSetup {
        object: ObjectParams::flat_plate(0.05, 0.05, mu),
        ..ExperimentConfig::default().setup(mu).unwrap()
    };
    let sim = Simulator::from_setup(&setup).unwrap();
    let mut world = sim.reset(Vector3::new(0.0, 0.0, -5.0)).unwrap();
    let zeros = vec![0.0; sim.chain.dof()];
    for _ in 0..1200 {
        let mut q = world.joints.positions.clone();
        q[5] += 1e-3;
        let js = JointState::at_rest(q);
        let probe = WorldState {
            ee: ee_state(&sim.chain, &js).unwrap(),
            joints: js,
            ..world.clone()
        };
        let (next, t) = sim.step(&probe, &zeros).unwrap();
        if t.cost > 0.0 {
            return Some(next.ee.tilt_deg());
        }
        world = WorldState {
            terminal: None,
            slip: Default::default(),
            ..next
        };
    }
    None
}

fn critical_tilt() -> Outcome {
    let checks = [0.1, 0.2, 0.3, 0.6]
        .into_iter()
        .map(|mu| {
            let want = f64::atan(mu).to_degrees();
            match onset_deg(mu) {
                Some(got) => check(
                    format!("mu={mu}"),
                    (got - want).abs() <= ONSET_TOL_DEG,
                    format!("onset {got:.3} deg vs arctan {want:.3} deg"),
                ),
                None => check(format!("mu={mu}"), false, "no onset in sweep"),
            }
        })
        .collect();
    Outcome { checks }
}

// ---------------------------------------------------------------------------
// 3. Gradient check

/// Independent forward pass returning the ½e² loss and the ReLU sign pattern.
fn reference_loss(m: &Mlp, x: &[f64], target: f64) -> (f64, Vec<bool>) {
    let mut h = DVector::from_column_slice(x);
    let mut pattern = Vec::new();
    let last = m.weights.len() - 1;
    for (l, (w, b)) in m.weights.iter().zip(&m.biases).enumerate() {
        let z = w * &h + b;
        if l == last {
            h = z;
        } else {
            pattern.extend(z.iter().map(|v| *v > 0.0));
            h = z.map(|v| v.max(0.0));
        }
    }
    (0.5 * (h[0] - target).powi(2), pattern)
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-6;
    let (mut worst, mut compared, mut skipped) = (0.0f64, 0usize, 0usize);
    for _ in 0..100 {
        let sizes = [rng.gen_range(1..6), rng.gen_range(2..9), rng.gen_range(2..9), 1];
        let mut m = Mlp::init(&sizes, &mut rng).unwrap();
        for b in &mut m.biases {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let target = rng.gen_range(-3.0..3.0);
        let grad = m.backward(&x, target).unwrap();
        let analytic: Vec<f64> = grad.slices().flat_map(|s| s.to_vec()).collect();
        let mut probe = m.clone();
        let mut k = 0;
        let n_slices = probe.slices().count();
        for s in 0..n_slices {
            let len = probe.slices().nth(s).unwrap().len();
            for i in 0..len {
                let orig = probe.slices().nth(s).unwrap()[i];
                probe.slices_mut().nth(s).unwrap()[i] = orig + eps;
                let (up, pu) = reference_loss(&probe, &x, target);
                probe.slices_mut().nth(s).unwrap()[i] = orig - eps;
                let (down, pd) = reference_loss(&probe, &x, target);
                probe.slices_mut().nth(s).unwrap()[i] = orig;
                // The loss is not differentiable where a ReLU switches inside
                // the probe interval.
                if pu != pd {
                    skipped += 1;
                } else {
                    let fd = (up - down) / (2.0 * eps);
                    let g = analytic[k];
                    let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
                    worst = worst.max(rel);
                    compared += 1;
                }
                k += 1;
            }
        }
    }
    Outcome {
        checks: vec![check(
            "max relative error over 100 networks",
            worst <= GRAD_REL_TOL,
            format!("{worst:.3e} over {compared} parameters ({skipped} at ReLU switches skipped)"),
        )],
    }
}

// ---------------------------------------------------------------------------
// 4. Value fixed points

fn synthetic(rows: &[(Vec<f64>, f64, Vec<f64>, bool)]) -> Dataset {
    let mut ds = Dataset::new(None);
    let ts = rows
        .iter()
        .map(|(x, c, y, done)| Transition {
            episode: 0,
            step: 0,
            obs: x.clone(),
            cost: *c,
            next_obs: y.clone(),
            terminal: *done,
            ee: None,
            next_ee: None,
        })
        .collect();
    ds.push_episode(ts, None);
    ds
}

fn fixture_config() -> TrainConfig {
    TrainConfig {
        hidden: vec![16, 16],
        epochs: 6000,
        batch_size: 8,
        target_period: 50,
        normalize: false,
        adam: AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn value_fixed_points() -> Outcome {
    let members = 5;
    let gamma = 0.9;
    let mut checks = Vec::new();

    let s = vec![0.5, -0.5];
    let ds = synthetic(&[(s.clone(), 1.0, s.clone(), false)]);
    let ens = train_ensemble(&ds, members, gamma, &fixture_config(), 11, Exec::Parallel).unwrap();
    let want = 1.0 / (1.0 - gamma);
    let worst = ens
        .checkpoint
        .predict(&s)
        .unwrap()
        .into_iter()
        .map(|v| (v - want).abs() / want)
        .fold(0.0, f64::max);
    checks.push(check(
        "absorbing state: c/(1-γ) for every member",
        worst <= VALUE_REL_TOL,
        format!("max relative error {:.3}%", 100.0 * worst),
    ));

    let st = [vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
    let ds = synthetic(&[
        (st[0].clone(), 0.0, st[1].clone(), false),
        (st[1].clone(), 0.0, st[2].clone(), false),
        (st[2].clone(), 1.0, vec![0.0, 0.0], true),
    ]);
    // Backward induction.
    let v2 = 1.0;
    let v1 = gamma * v2;
    let v0 = gamma * v1;
    let ens = train_ensemble(&ds, members, gamma, &fixture_config(), 13, Exec::Parallel).unwrap();
    let mut worst: f64 = 0.0;
    for (state, want) in [(&st[0], v0), (&st[1], v1), (&st[2], v2)] {
        for v in ens.checkpoint.predict(state).unwrap() {
            worst = worst.max((v - want).abs() / want);
        }
    }
    checks.push(check(
        "3-state chain: dynamic-programming values for every member",
        worst <= VALUE_REL_TOL,
        format!("max relative error {:.3}%", 100.0 * worst),
    ));
    Outcome { checks }
}

// ---------------------------------------------------------------------------
// 5. Pessimism limits

fn pessimism_limits() -> Outcome {
    let slme = PessimismFormula::ScaledLogMeanExp;
    let g = [0.0, 10.0];
    let near_max = pessimistic_return(&g, 1e-3, slme).unwrap();
    let near_mean = pessimistic_return(&g, 1e6, slme).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..10_000 {
        let k = rng.gen_range(1..=80);
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let returns: Vec<f64> = (0..k).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let lambda = 10f64.powf(rng.gen_range(-3.0..4.0));
        let p = pessimistic_return(&returns, lambda, slme).unwrap();
        let mean = returns.iter().sum::<f64>() / k as f64;
        let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Floating-point slack for the summation order only.
        let slack = 1e-12 * (1.0 + scale);
        if !(mean - slack <= p && p <= max + slack) {
            violations += 1;
        }
    }
    Outcome {
        checks: vec![
            check(
                "Ĝ={0,10}, λ=1e-3 gives 10 ± 1e-6",
                (near_max - 10.0).abs() <= NEAR_MAX_TOL,
                format!("{near_max:.9} (closed form 10 - λ·ln 2 = {:.9})", 10.0 - 1e-3 * 2f64.ln()),
            ),
            check(
                "Ĝ={0,10}, λ=1e6 gives 5 ± 1e-3",
                (near_mean - 5.0).abs() <= NEAR_MEAN_TOL,
                format!("{near_mean:.9}"),
            ),
            check(
                "mean ≤ Ĝ_pess ≤ max over 10^4 random ensembles",
                violations == 0,
                format!("{violations} violations"),
            ),
        ],
    }
}

// ---------------------------------------------------------------------------
// 6–11. Campaigns

struct Campaign {
    cfg: ExperimentConfig,
    dir: tempfile::TempDir,
    dataset: Option<Dataset>,
    ensemble: Option<Arc<EnsembleCheckpoint>>,
    cv_table: Option<Table>,
    /// Tables written by criteria 6–10, rerun by 11.
    written: Vec<String>,
}

impl Campaign {
    fn new() -> Self {
        Campaign {
            cfg: ExperimentConfig::default(),
            dir: tempfile::tempdir().unwrap(),
            dataset: None,
            ensemble: None,
            cv_table: None,
            written: Vec::new(),
        }
    }

    fn cache(&self) -> PathBuf {
        self.dir.path().join("cache")
    }

    fn write(&mut self, name: &str, table: &Table) {
        table.write(self.dir.path(), name).unwrap();
        self.written.push(name.to_string());
    }

    fn ensure_trained(&mut self) -> cvmpc::Result<Arc<EnsembleCheckpoint>> {
        if let Some(e) = &self.ensemble {
            return Ok(e.clone());
        }
        let cfg = &self.cfg;
        let collected = harness::collect_demos(cfg, cfg.mu_true, cfg.mu_assumed, Exec::Parallel)?;
        let (ens, _) = harness::run_training(
            &collected.dataset,
            cfg.members,
            cfg.gamma,
            &cfg.train,
            cfg.seed,
            Some(&self.cache()),
            "acceptance",
            Exec::Parallel,
        )?;
        self.dataset = Some(collected.dataset);
        self.ensemble = Some(ens.clone());
        Ok(ens)
    }
}

fn runtime_failure(e: cvmpc::Error) -> Outcome {
    Outcome {
        checks: vec![check("campaign ran", false, e.to_string())],
    }
}

fn demonstrator_competence(c: &mut Campaign) -> cvmpc::Result<Outcome> {
    let cfg = &c.cfg;
    let arm = Arm::Demonstrator { mu_assumed: cfg.mu_true };
    let table = harness::run_eval(cfg, "demonstrator", &arm, Exec::Parallel)?;
    let checks = table_to_checks(&table, DEMO_MIN_SUCCESS);
    c.write("c6_demonstrator", &table);
    Ok(Outcome { checks })
}

fn end_to_end(c: &mut Campaign) -> cvmpc::Result<Outcome> {
    let ens = c.ensure_trained()?;
    let cfg = &c.cfg;
    let mut checks = vec![check(
        "configuration",
        ens.len() == 80 && cfg.pessimism.lambda == 20.0 && ens.mode == Some(ObservationMode::Full) && cfg.demos == 50,
        format!(
            "K={} λ={} mode={:?} demos={} trials={}",
            ens.len(),
            cfg.pessimism.lambda,
            ens.mode,
            cfg.demos,
            cfg.trials
        ),
    )];
    let table = harness::run_eval(cfg, "cv_mpc", &harness::value_arm(ens, cfg.pessimism), Exec::Parallel)?;
    checks.extend(table_to_checks(&table, CV_MIN_SUCCESS));
    c.write("c7_cv_mpc", &table);
    c.cv_table = Some(table);
    Ok(Outcome { checks })
}

fn biased_cfg(base: &ExperimentConfig) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.biased.mu_assumed = 0.6;
    cfg.biased.mu_true = vec![0.2];
    cfg
}

fn biased_expert(c: &mut Campaign) -> cvmpc::Result<Outcome> {
    let cfg = biased_cfg(&c.cfg);
    let report = harness::ablate_biased_expert(&cfg, Some(&c.cache()), Exec::Parallel)?;
    let table = report.table("biased_expert").unwrap().clone();
    let checks = harness::biased_checks(&table, &cfg, BIASED_MARGIN)?;
    c.write("c8_biased_expert", &table);
    Ok(Outcome { checks })
}

fn pessimism_modes(c: &mut Campaign) -> cvmpc::Result<Outcome> {
    let ens = c.ensure_trained()?;
    let report = harness::ablate_pessimism_mode(&c.cfg, ens, Exec::Parallel)?;
    let table = report.table("pessimism_mode").unwrap().clone();
    let checks = harness::pessimism_checks(&table)?;
    c.write("c9_pessimism_mode", &table);
    Ok(Outcome { checks })
}

fn observation_modes(c: &mut Campaign) -> cvmpc::Result<Outcome> {
    c.ensure_trained()?;
    let ds = c.dataset.clone().unwrap();
    let report = harness::ablate_observations(&c.cfg, &ds, Some(&c.cache()), Exec::Parallel)?;
    let same = report.table("obs_same_start").unwrap().clone();
    let shifted = report.table("obs_shifted_start").unwrap().clone();
    let checks = harness::observation_checks(&same, &shifted, ROT_MIN_SUCCESS)?;
    c.write("c10_obs_same_start", &same);
    c.write("c10_obs_shifted_start", &shifted);
    Ok(Outcome { checks })
}

/// Small configuration that exercises every campaign quickly.
fn reduced_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 7;
    cfg.demos = 4;
    cfg.trials = 3;
    cfg.members = 3;
    cfg.sim.max_steps = 250;
    cfg.train.max_steps = Some(300);
    cfg.grid.members = vec![2, 3];
    cfg.grid.lambdas = vec![1.0, 20.0];
    cfg.biased.mu_true = vec![0.2];
    cfg.observations.modes = vec![ObservationMode::Rot, ObservationMode::VelAcc];
    cfg
}

fn run_reduced(cfg: &ExperimentConfig, out: &Path, cache: &Path, exec: Exec) -> cvmpc::Result<()> {
    let mut manifest = Manifest::new("acceptance", cfg);
    let collected = harness::collect_demos(cfg, cfg.mu_true, cfg.mu_assumed, exec)?;
    let mut report = Report::default();
    report.tables.push(("demonstrator".into(), collected.table.clone()));
    let (ens, _) = harness::run_training(
        &collected.dataset,
        cfg.members,
        cfg.gamma,
        &cfg.train,
        cfg.seed,
        Some(cache),
        "reduced",
        exec,
    )?;
    report
        .tables
        .push(("eval".into(), harness::run_eval(cfg, "cv_mpc", &harness::value_arm(ens.clone(), cfg.pessimism), exec)?));
    harness::write_report(&report, out, &mut manifest)?;
    for r in [
        harness::ablate_grid(cfg, &collected.dataset, Some(cache), exec)?,
        harness::ablate_biased_expert(cfg, Some(cache), exec)?,
        harness::ablate_observations(cfg, &collected.dataset, Some(cache), exec)?,
        harness::ablate_pessimism_mode(cfg, ens, exec)?,
    ] {
        harness::write_report(&r, out, &mut manifest)?;
    }
    manifest.save(&out.join("manifest.json"))
}

fn csv_files(dir: &Path) -> BTreeSet<String> {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().to_string_lossy().into_owned();
            name.ends_with(".csv").then_some(name)
        })
        .collect()
}

fn compare_dirs(a: &Path, b: &Path) -> (usize, Vec<String>) {
    let (fa, fb) = (csv_files(a), csv_files(b));
    let mut diffs: Vec<String> = fa.symmetric_difference(&fb).cloned().collect();
    for name in fa.intersection(&fb) {
        if std::fs::read(a.join(name)).unwrap() != std::fs::read(b.join(name)).unwrap() {
            diffs.push(name.clone());
        }
    }
    (fa.len(), diffs)
}

fn determinism(c: &mut Campaign) -> cvmpc::Result<Outcome> {
    let mut checks = Vec::new();

    // Full-scale rerun of the criteria that ran, from a fresh campaign
    // sharing only the checkpoint cache.
    let mut rerun = Campaign::new();
    std::fs::create_dir_all(rerun.cache()).unwrap();
    for entry in std::fs::read_dir(c.cache()).into_iter().flatten() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), rerun.cache().join(entry.file_name())).unwrap();
    }
    for name in c.written.clone() {
        match name.as_str() {
            "c6_demonstrator" => drop(demonstrator_competence(&mut rerun)?),
            "c7_cv_mpc" => drop(end_to_end(&mut rerun)?),
            "c8_biased_expert" => drop(biased_expert(&mut rerun)?),
            "c9_pessimism_mode" => drop(pessimism_modes(&mut rerun)?),
            // Reran through its first table.
            "c10_obs_same_start" => drop(observation_modes(&mut rerun)?),
            _ => {}
        }
    }
    if !c.written.is_empty() {
        let (n, diffs) = compare_dirs(c.dir.path(), rerun.dir.path());
        checks.push(check(
            "criteria 6-10 tables rerun (cached checkpoints)",
            diffs.is_empty() && n > 0,
            format!("{n} CSV files, differing: {diffs:?}"),
        ));
    }

    // Every campaign at reduced size: fresh sequential run versus a parallel
    // run that reuses its checkpoints.
    let cfg = reduced_cfg();
    let root = tempfile::tempdir().unwrap();
    let (a, b, cache) = (root.path().join("a"), root.path().join("b"), root.path().join("cache"));
    run_reduced(&cfg, &a, &cache, Exec::Sequential)?;
    run_reduced(&cfg, &b, &cache, Exec::Parallel)?;
    let (n, diffs) = compare_dirs(&a, &b);
    checks.push(check(
        "all campaigns at reduced size: fresh sequential vs cached parallel",
        diffs.is_empty() && n > 0,
        format!("{n} CSV files, differing: {diffs:?}"),
    ));
    let manifests_equal = std::fs::read(a.join("manifest.json")).unwrap() == std::fs::read(b.join("manifest.json")).unwrap();
    checks.push(check("run manifests identical", manifests_equal, ""));
    Ok(Outcome { checks })
}

// ---------------------------------------------------------------------------

type Pure = fn() -> Outcome;
type WithCampaign = fn(&mut Campaign) -> cvmpc::Result<Outcome>;

enum Runner {
    Pure(Pure),
    Campaign(WithCampaign),
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("CVMPC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("CVMPC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let criteria: Vec<(u32, &str, Runner)> = vec![
        (1, "contact oracle", Runner::Pure(contact_oracle)),
        (2, "critical tilt", Runner::Pure(critical_tilt)),
        (3, "gradient check", Runner::Pure(gradient_check)),
        (4, "value fixed points", Runner::Pure(value_fixed_points)),
        (5, "pessimism limits", Runner::Pure(pessimism_limits)),
        (6, "demonstrator competence", Runner::Campaign(demonstrator_competence)),
        (7, "end-to-end CV-MPC", Runner::Campaign(end_to_end)),
        (8, "biased-expert improvement", Runner::Campaign(biased_expert)),
        (9, "initial-state vs pointwise pessimism", Runner::Campaign(pessimism_modes)),
        (10, "observation ablation", Runner::Campaign(observation_modes)),
        (11, "determinism", Runner::Campaign(determinism)),
    ];

    let mut campaign = Campaign::new();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, runner) in criteria {
        if only.as_ref().is_some_and(|set| !set.contains(&id)) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = match runner {
            Runner::Pure(f) => f(),
            Runner::Campaign(f) => f(&mut campaign).unwrap_or_else(runtime_failure),
        };
        let secs = t0.elapsed().as_secs_f64();
        let status = if outcome.passed() { "PASS" } else { "FAIL" };
        println!("[{status}] {id:>2} {name} ({secs:.1}s)");
        for c in &outcome.checks {
            println!("       {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        }
        if !outcome.passed() {
            failed.push(id);
        }
    }
    println!("acceptance: {}/{} criteria passed, failing: {failed:?}", ran - failed.len(), ran);
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
