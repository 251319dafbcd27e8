//! Experiment campaigns: demonstration collection, training, evaluation,
//! the four ablations, and the CSV / manifest outputs they produce.
//!
//! Every campaign is a pure function of an [`ExperimentConfig`]: goals and
//! controller noise come from seeds derived from `config.seed`, so rerunning
//! a campaign reproduces its tables byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conservative::{ObservationMode, PessimismConfig, PessimismMode};
use crate::contact::ObjectParams;
use crate::dataset::Dataset;
use crate::ensemble::{load_checkpoint, save_checkpoint, training_digest, train_ensemble, EnsembleCheckpoint, TrainConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kinematics::ChainModel;
use crate::mpc::{Controller, CostWeights, MpcConfig, ValueTerm};
use crate::seeds;
use crate::sim::{run_episode, sample_goal, ChainFileRef, Episode, EpisodeLog, SimConfig, SimSetup, Simulator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub members: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Also run the same grid with one-step cost regressors (γ = 0).
    pub one_step: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            members: vec![3, 10, 40, 80],
            lambdas: vec![1.0, 5.0, 20.0, 100.0],
            one_step: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasedConfig {
    pub mu_assumed: f64,
    pub mu_true: Vec<f64>,
}

impl Default for BiasedConfig {
    fn default() -> Self {
        BiasedConfig {
            mu_assumed: 0.6,
            mu_true: vec![0.2, 0.4, 0.6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationAblation {
    pub modes: Vec<ObservationMode>,
    /// Start pose for the shifted-start evaluation.
    pub shifted_start: Vec<f64>,
}

impl Default for ObservationAblation {
    fn default() -> Self {
        ObservationAblation {
            modes: ObservationMode::ALL.to_vec(),
            shifted_start: vec![0.6, -0.5, 0.0, -2.2, 0.0, 1.7, 1.385],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Every episode carries the configured object.
    #[default]
    Cube,
    /// Every episode draws a fresh cuboid from [`Randomization`].
    MultiObject,
}

/// Ranges for the multi-object scenario, sampled uniformly per episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Randomization {
    /// kg
    pub mass: [f64; 2],
    /// CoM height above the contact plane (m); the cuboid is twice as tall.
    pub com_height: [f64; 2],
    /// Side of the square footprint (m).
    pub footprint: [f64; 2],
}

impl Default for Randomization {
    fn default() -> Self {
        Randomization {
            mass: [0.03, 0.15],
            com_height: [0.01, 0.05],
            footprint: [0.03, 0.08],
        }
    }
}

impl Randomization {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("mass", self.mass), ("com_height", self.com_height), ("footprint", self.footprint)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("randomize.{name} must be a positive range, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng, mu: f64) -> ObjectParams {
        let mut draw = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let mass = draw(self.mass);
        let h = draw(self.com_height);
        let side = draw(self.footprint);
        ObjectParams::cuboid("random", mass, [side, side, 2.0 * h], h, mu)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    /// `panda` or a path to a chain description.
    pub chain: String,
    /// Object preset name or a path to an object description.
    pub object: String,
    /// Friction the simulator uses.
    pub mu_true: f64,
    /// Friction the demonstrator believes in.
    pub mu_assumed: f64,
    pub demos: usize,
    pub trials: usize,
    /// Ensemble size K.
    pub members: usize,
    /// Discount of the value targets.
    pub gamma: f64,
    pub randomize: Randomization,
    pub sim: SimConfig,
    pub demonstrator: MpcConfig,
    pub controller: MpcConfig,
    pub train: TrainConfig,
    pub pessimism: PessimismConfig,
    pub grid: GridConfig,
    pub biased: BiasedConfig,
    pub observations: ObservationAblation,
}

/// Cost weights shared by the demonstrator and the learned controller; the
/// demonstrator adds the friction term on top.
pub fn default_weights() -> CostWeights {
    CostWeights {
        goal: 10.0,
        stop: 1.0,
        joint_limit: 100.0,
        smoothness: 1e-3,
        friction: 0.0,
    }
}

impl Default for ExperimentConfig {
    /// Desk-scale profile: 64 samples over a 20-step horizon, 32-unit hidden
    /// layers and at most 2000 optimizer steps per member.
    fn default() -> Self {
        let controller = MpcConfig {
            horizon: 20,
            samples: 64,
            weights: default_weights(),
            ..MpcConfig::default()
        };
        let demonstrator = MpcConfig {
            weights: CostWeights {
                friction: 10.0,
                ..default_weights()
            },
            ..controller.clone()
        };
        ExperimentConfig {
            scenario: Scenario::Cube,
            seed: 0,
            chain: "panda".into(),
            object: "cube_sim".into(),
            mu_true: 0.3,
            mu_assumed: 0.3,
            demos: 50,
            trials: 20,
            members: 80,
            gamma: 0.99,
            randomize: Randomization::default(),
            sim: SimConfig::default(),
            demonstrator,
            controller,
            train: TrainConfig {
                hidden: vec![32, 32],
                batch_size: 128,
                max_steps: Some(2000),
                ..TrainConfig::default()
            },
            pessimism: PessimismConfig {
                weight: 0.1,
                ..PessimismConfig::default()
            },
            grid: GridConfig::default(),
            biased: BiasedConfig::default(),
            observations: ObservationAblation::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config, filling every key it leaves out from the default
    /// profile. Nested tables are merged key by key, so `[controller]
    /// samples = 32` keeps the profile's other controller settings.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(ExperimentConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.randomize.validate()?;
        self.train.validate()?;
        self.pessimism.validate()?;
        let chain = self.chain_model()?;
        self.demonstrator.validate(chain.dof())?;
        self.controller.validate(chain.dof())?;
        self.object_params(self.mu_true)?;
        for mu in [self.mu_true, self.mu_assumed, self.biased.mu_assumed] {
            if !(mu > 0.0) {
                return Err(Error::Config(format!("friction coefficients must be positive, got {mu}")));
            }
        }
        if self.biased.mu_true.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Config("biased.mu_true entries must be positive".into()));
        }
        if self.members == 0 {
            return Err(Error::Config("members must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.grid.members.is_empty() || self.grid.lambdas.is_empty() || self.grid.members.contains(&0) {
            return Err(Error::Config("grid members and lambdas must be non-empty and positive".into()));
        }
        if self.grid.lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("grid lambdas must be positive".into()));
        }
        if self.biased.mu_true.is_empty() || self.observations.modes.is_empty() {
            return Err(Error::Config("ablation lists must be non-empty".into()));
        }
        chain.check_dof("shifted_start", self.observations.shifted_start.len())?;
        Ok(())
    }

    pub fn chain_ref(&self) -> Result<ChainFileRef> {
        if self.chain == "panda" {
            return Ok(ChainFileRef::Panda);
        }
        std::fs::read_to_string(&self.chain)
            .map(ChainFileRef::Inline)
            .map_err(|e| Error::Config(format!("chain `{}`: {e}", self.chain)))
    }

    pub fn chain_model(&self) -> Result<ChainModel> {
        self.chain_ref()?.build()
    }

    pub fn object_params(&self, mu: f64) -> Result<ObjectParams> {
        let base = match ObjectParams::preset(&self.object) {
            Ok(obj) => obj,
            Err(_) if Path::new(&self.object).exists() => ObjectParams::load(&self.object)?,
            Err(e) => return Err(e),
        };
        let obj = base.with_mu(mu);
        obj.validate()?;
        Ok(obj)
    }

    pub fn setup(&self, mu_true: f64) -> Result<SimSetup> {
        Ok(SimSetup {
            chain: self.chain_ref()?,
            object: self.object_params(mu_true)?,
            sim: self.sim.clone(),
        })
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Which controller drives an evaluation.
#[derive(Clone, Debug)]
pub enum Arm {
    /// Goal-reaching costs only.
    Plain,
    /// Adds the friction-cone term with the assumed μ.
    Demonstrator { mu_assumed: f64 },
    /// Adds the pessimistic value-ensemble return.
    Conservative {
        ensemble: Arc<EnsembleCheckpoint>,
        pessimism: PessimismConfig,
    },
}

impl Arm {
    /// `object` is the object actually on the tray; the demonstrator models
    /// it with its own friction belief.
    fn controller(&self, cfg: &ExperimentConfig, chain: Arc<ChainModel>, object: &ObjectParams, seed: u64) -> Result<Controller> {
        match self {
            Arm::Plain => Controller::new(chain, MpcConfig { seed, ..cfg.controller.clone() }),
            Arm::Demonstrator { mu_assumed } => Controller::new(chain, MpcConfig { seed, ..cfg.demonstrator.clone() })?
                .with_friction(object.clone().with_mu(*mu_assumed)),
            Arm::Conservative { ensemble, pessimism } => {
                Controller::new(chain, MpcConfig { seed, ..cfg.controller.clone() })?.with_value(ValueTerm {
                    ensemble: ensemble.clone(),
                    pessimism: *pessimism,
                })
            }
        }
        .map(|c| c.with_exec(Exec::Sequential))
    }
}

/// One evaluated episode, as written to the per-episode CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub cell: String,
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub reason: String,
    pub steps: usize,
    pub max_tilt_deg: f64,
    pub max_linear_velocity: f64,
    pub max_angular_velocity: f64,
    pub final_slip: f64,
    pub violations: usize,
    pub goal_x: f64,
    pub goal_y: f64,
    pub goal_z: f64,
}

/// Aggregate of one configuration cell. Dynamic metrics are mean ± standard
/// error over the successful episodes only, empty when there are none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub cell: String,
    pub success_rate: f64,
    pub successes: usize,
    pub trials: usize,
    pub tilt_mean: Option<f64>,
    pub tilt_se: Option<f64>,
    pub lin_vel_mean: Option<f64>,
    pub lin_vel_se: Option<f64>,
    pub ang_vel_mean: Option<f64>,
    pub ang_vel_se: Option<f64>,
    /// Mean of the maximum tilt over all episodes, failures included.
    pub tilt_mean_all: f64,
}

fn mean_se(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

impl ResultsRow {
    pub fn aggregate(cell: &str, records: &[EpisodeRecord]) -> ResultsRow {
        let ok: Vec<&EpisodeRecord> = records.iter().filter(|r| r.success).collect();
        let col = |f: fn(&EpisodeRecord) -> f64| mean_se(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (tilt_mean, tilt_se) = col(|r| r.max_tilt_deg);
        let (lin_vel_mean, lin_vel_se) = col(|r| r.max_linear_velocity);
        let (ang_vel_mean, ang_vel_se) = col(|r| r.max_angular_velocity);
        let trials = records.len();
        ResultsRow {
            cell: cell.to_string(),
            success_rate: if trials == 0 { 0.0 } else { 100.0 * ok.len() as f64 / trials as f64 },
            successes: ok.len(),
            trials,
            tilt_mean,
            tilt_se,
            lin_vel_mean,
            lin_vel_se,
            ang_vel_mean,
            ang_vel_se,
            tilt_mean_all: if trials == 0 {
                0.0
            } else {
                records.iter().map(|r| r.max_tilt_deg).sum::<f64>() / trials as f64
            },
        }
    }
}

/// Rows plus the episodes behind them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub rows: Vec<ResultsRow>,
    pub episodes: Vec<EpisodeRecord>,
}

impl Table {
    pub fn push(&mut self, cell: &str, records: Vec<EpisodeRecord>) -> &ResultsRow {
        self.rows.push(ResultsRow::aggregate(cell, &records));
        self.episodes.extend(records);
        self.rows.last().unwrap()
    }

    pub fn row(&self, cell: &str) -> Option<&ResultsRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn extend(&mut self, other: Table) {
        self.rows.extend(other.rows);
        self.episodes.extend(other.episodes);
    }

    /// Writes `<stem>.csv` and `<stem>_episodes.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let rows = dir.join(format!("{stem}.csv"));
        let eps = dir.join(format!("{stem}_episodes.csv"));
        write_csv(&rows, &self.rows)?;
        write_csv(&eps, &self.episodes)?;
        Ok(vec![rows, eps])
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Simulation context shared by every episode of a campaign.
pub struct Bench {
    pub cfg: ExperimentConfig,
    pub setup: SimSetup,
    pub sim: Simulator,
    pub chain: Arc<ChainModel>,
    pub exec: Exec,
}

impl Bench {
    pub fn new(cfg: &ExperimentConfig, mu_true: f64, exec: Exec) -> Result<Self> {
        let setup = cfg.setup(mu_true)?;
        let sim = Simulator::from_setup(&setup)?;
        Ok(Bench {
            chain: Arc::new(sim.chain.clone()),
            cfg: cfg.clone(),
            setup,
            sim,
            exec,
        })
    }

    /// Goal of episode `i` in `stream`; arms evaluated under the same stream
    /// see the same goals and controller seeds.
    pub fn goal(&self, stream: &str, i: usize) -> Result<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.cfg.seed, stream, i as u64));
        sample_goal(&mut rng, &self.sim.config.workspace)
    }

    /// Simulator setup of episode `i`: the campaign's own, or a freshly
    /// drawn object in the multi-object scenario.
    pub fn episode_setup(&self, stream: &str, i: usize) -> SimSetup {
        match self.cfg.scenario {
            Scenario::Cube => self.setup.clone(),
            Scenario::MultiObject => {
                let seed = seeds::derive(self.cfg.seed, &format!("{stream}/object"), i as u64);
                let object = self.cfg.randomize.sample(&mut ChaCha8Rng::seed_from_u64(seed), self.setup.object.mu);
                SimSetup {
                    object,
                    ..self.setup.clone()
                }
            }
        }
    }

    pub fn episode(&self, arm: &Arm, stream: &str, i: usize, start: &[f64]) -> Result<(u64, Episode)> {
        let seed = seeds::derive(self.cfg.seed, &format!("{stream}/controller"), i as u64);
        let owned;
        let sim = match self.cfg.scenario {
            Scenario::Cube => &self.sim,
            Scenario::MultiObject => {
                owned = Simulator::from_setup(&self.episode_setup(stream, i))?;
                &owned
            }
        };
        let mut ctrl = arm.controller(&self.cfg, self.chain.clone(), sim.object(), seed)?;
        let world = sim.reset_at(start, self.goal(stream, i)?)?;
        Ok((seed, run_episode(sim, world, &mut ctrl)?))
    }

    /// Runs `n` episodes in parallel and keeps them.
    pub fn episodes(&self, arm: &Arm, stream: &str, n: usize, start: &[f64]) -> Result<Vec<(u64, Episode)>> {
        self.exec
            .map_range(n, |i| self.episode(arm, stream, i, start))
            .into_iter()
            .collect()
    }

    pub fn evaluate(&self, cell: &str, arm: &Arm, n: usize, start: &[f64]) -> Result<Vec<EpisodeRecord>> {
        if n == 0 {
            return Err(Error::Config("evaluation needs at least one trial".into()));
        }
        let out: Vec<Result<EpisodeRecord>> = self.exec.map_range(n, |i| {
            let (seed, ep) = self.episode(arm, "eval", i, start)?;
            Ok(record(cell, i, seed, &ep))
        });
        out.into_iter().collect()
    }
}

pub fn record(cell: &str, i: usize, seed: u64, ep: &Episode) -> EpisodeRecord {
    let goal = ep.states[0].goal;
    let m = &ep.metrics;
    EpisodeRecord {
        cell: cell.to_string(),
        episode: i,
        seed,
        success: m.success,
        reason: m.reason.map_or("none", |r| r.name()).to_string(),
        steps: m.steps,
        max_tilt_deg: m.max_tilt_deg,
        max_linear_velocity: m.max_linear_velocity,
        max_angular_velocity: m.max_angular_velocity,
        final_slip: m.final_slip,
        violations: ep.transitions.iter().filter(|t| t.cost > 0.0).count(),
        goal_x: goal.x,
        goal_y: goal.y,
        goal_z: goal.z,
    }
}

pub struct Collected {
    pub dataset: Dataset,
    pub table: Table,
    pub logs: Vec<EpisodeLog>,
}

/// Runs the friction-cost demonstrator against the simulator and keeps every
/// episode, successful or not.
pub fn collect_demos(cfg: &ExperimentConfig, mu_true: f64, mu_assumed: f64, exec: Exec) -> Result<Collected> {
    if cfg.demos == 0 {
        return Err(Error::Config("demos must be at least 1".into()));
    }
    let bench = Bench::new(cfg, mu_true, exec)?;
    let arm = Arm::Demonstrator { mu_assumed };
    let episodes = bench.episodes(&arm, "demo", cfg.demos, &cfg.sim.initial_joints)?;
    let mut dataset = Dataset::new(Some(cfg.sim.observation));
    let mut records = Vec::with_capacity(episodes.len());
    let mut logs = Vec::with_capacity(episodes.len());
    for (i, (seed, ep)) in episodes.into_iter().enumerate() {
        records.push(record("demonstrator", i, seed, &ep));
        logs.push(EpisodeLog::from_episode(&bench.episode_setup("demo", i), &ep));
        dataset.push_episode(ep.transitions, ep.metrics.reason);
    }
    if !records.iter().any(|r| r.success) {
        log::warn!("no successful demonstrations in {} episodes", records.len());
    }
    let mut table = Table::default();
    table.push("demonstrator", records);
    Ok(Collected { dataset, table, logs })
}

/// Summary of one trained ensemble for the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub label: String,
    pub members: usize,
    pub gamma: f64,
    pub mode: Option<ObservationMode>,
    pub digest: String,
    /// Left out of the manifest so cached and fresh runs write the same file.
    #[serde(skip)]
    pub cached: bool,
    /// Mean minibatch loss over the last 50 steps, per member.
    pub final_losses: Vec<f64>,
}

/// Trains an ensemble, or loads it from `cache` when a checkpoint with the
/// same training digest is already there.
pub fn run_training(
    ds: &Dataset,
    members: usize,
    gamma: f64,
    cfg: &TrainConfig,
    seed: u64,
    cache: Option<&Path>,
    label: &str,
    exec: Exec,
) -> Result<(Arc<EnsembleCheckpoint>, TrainingSummary)> {
    let digest = training_digest(ds, members, gamma, cfg, seed);
    let path = cache.map(|dir| dir.join(format!("ens-{}.ckpt", &digest[..16])));
    let losses_path = path.as_ref().map(|p| p.with_extension("losses.json"));
    if let (Some(p), Some(lp)) = (path.as_ref().filter(|p| p.exists()), &losses_path) {
        let ckpt = load_checkpoint(p)?;
        if ckpt.digest == digest {
            log::info!("reusing {}", p.display());
            let final_losses = match std::fs::read(lp) {
                Ok(bytes) => serde_json::from_slice(&bytes)?,
                Err(_) => Vec::new(),
            };
            let summary = TrainingSummary {
                label: label.into(),
                members,
                gamma,
                mode: ckpt.mode,
                digest,
                cached: true,
                final_losses,
            };
            return Ok((Arc::new(ckpt), summary));
        }
    }
    let trained = train_ensemble(ds, members, gamma, cfg, seed, exec)?;
    let final_losses = trained.final_losses(50);
    log::info!("trained {label}: final losses {final_losses:?}");
    if let (Some(p), Some(lp)) = (&path, &losses_path) {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_checkpoint(&trained.checkpoint, p)?;
        std::fs::write(lp, serde_json::to_vec(&final_losses)?).map_err(|e| Error::io(lp, e))?;
    }
    let summary = TrainingSummary {
        label: label.into(),
        members,
        gamma,
        mode: trained.checkpoint.mode,
        digest,
        cached: false,
        final_losses,
    };
    Ok((Arc::new(trained.checkpoint), summary))
}

/// Everything a campaign produced.
#[derive(Default)]
pub struct Report {
    pub tables: Vec<(String, Table)>,
    pub training: Vec<TrainingSummary>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn value_arm(ensemble: Arc<EnsembleCheckpoint>, pessimism: PessimismConfig) -> Arm {
    Arm::Conservative { ensemble, pessimism }
}

/// Evaluates a single arm over `config.trials` episodes from the default start.
pub fn run_eval(cfg: &ExperimentConfig, cell: &str, arm: &Arm, exec: Exec) -> Result<Table> {
    let bench = Bench::new(cfg, cfg.mu_true, exec)?;
    let mut table = Table::default();
    table.push(cell, bench.evaluate(cell, arm, cfg.trials, &cfg.sim.initial_joints)?);
    Ok(table)
}

pub fn grid_cell(members: usize, lambda: f64) -> String {
    format!("K={members} lambda={lambda}")
}

/// Success over the (K, λ) grid for value functions and, optionally, for
/// one-step cost regressors trained with γ = 0. One ensemble is trained per
/// K and shared by every λ.
pub fn ablate_grid(cfg: &ExperimentConfig, ds: &Dataset, cache: Option<&Path>, exec: Exec) -> Result<Report> {
    let bench = Bench::new(cfg, cfg.mu_true, exec)?;
    let mut report = Report::default();
    let mut variants = vec![("grid_value", cfg.gamma)];
    if cfg.grid.one_step {
        variants.push(("grid_one_step", 0.0));
    }
    for (name, gamma) in variants {
        let mut table = Table::default();
        for &k in &cfg.grid.members {
            let (ens, summary) = run_training(ds, k, gamma, &cfg.train, cfg.seed, cache, &format!("{name} K={k}"), exec)?;
            report.training.push(summary);
            for &lambda in &cfg.grid.lambdas {
                let cell = grid_cell(k, lambda);
                let arm = value_arm(ens.clone(), PessimismConfig { lambda, ..cfg.pessimism });
                table.push(&cell, bench.evaluate(&cell, &arm, cfg.trials, &cfg.sim.initial_joints)?);
            }
        }
        report.tables.push((name.into(), table));
    }
    Ok(report)
}

/// Demonstrator with an over-estimated μ versus the learned controller
/// trained on its (correctly labelled) demonstrations, for each true μ.
pub fn ablate_biased_expert(cfg: &ExperimentConfig, cache: Option<&Path>, exec: Exec) -> Result<Report> {
    let mut report = Report::default();
    let mut table = Table::default();
    for &mu in &cfg.biased.mu_true {
        let bench = Bench::new(cfg, mu, exec)?;
        let demos = collect_demos(cfg, mu, cfg.biased.mu_assumed, exec)?;
        let (ens, summary) = run_training(
            &demos.dataset,
            cfg.members,
            cfg.gamma,
            &cfg.train,
            cfg.seed,
            cache,
            &format!("biased mu_true={mu}"),
            exec,
        )?;
        report.training.push(summary);
        let start = &cfg.sim.initial_joints;
        let demo_cell = format!("mu_true={mu} demonstrator");
        let demo_arm = Arm::Demonstrator {
            mu_assumed: cfg.biased.mu_assumed,
        };
        table.push(&demo_cell, bench.evaluate(&demo_cell, &demo_arm, cfg.trials, start)?);
        let cv_cell = format!("mu_true={mu} cv_mpc");
        table.push(&cv_cell, bench.evaluate(&cv_cell, &value_arm(ens, cfg.pessimism), cfg.trials, start)?);
    }
    report.tables.push(("biased_expert".into(), table));
    Ok(report)
}

/// One ensemble per observation mode from a shared dataset, each evaluated
/// from the training start pose and from a shifted one.
pub fn ablate_observations(cfg: &ExperimentConfig, ds: &Dataset, cache: Option<&Path>, exec: Exec) -> Result<Report> {
    let bench = Bench::new(cfg, cfg.mu_true, exec)?;
    let mut report = Report::default();
    let mut same = Table::default();
    let mut shifted = Table::default();
    for &mode in &cfg.observations.modes {
        let projected = ds.with_mode(mode)?;
        let (ens, summary) = run_training(
            &projected,
            cfg.members,
            cfg.gamma,
            &cfg.train,
            cfg.seed,
            cache,
            &format!("obs {mode}"),
            exec,
        )?;
        report.training.push(summary);
        let arm = value_arm(ens, cfg.pessimism);
        same.push(mode.name(), bench.evaluate(mode.name(), &arm, cfg.trials, &cfg.sim.initial_joints)?);
        shifted.push(
            mode.name(),
            bench.evaluate(mode.name(), &arm, cfg.trials, &cfg.observations.shifted_start)?,
        );
    }
    report.tables.push(("obs_same_start".into(), same));
    report.tables.push(("obs_shifted_start".into(), shifted));
    Ok(report)
}

/// The same checkpoint under initial-state and pointwise pessimism, with
/// identical goals, seeds and λ.
pub fn ablate_pessimism_mode(cfg: &ExperimentConfig, ensemble: Arc<EnsembleCheckpoint>, exec: Exec) -> Result<Report> {
    let bench = Bench::new(cfg, cfg.mu_true, exec)?;
    let mut table = Table::default();
    for mode in [PessimismMode::InitialState, PessimismMode::Pointwise] {
        let arm = value_arm(ensemble.clone(), PessimismConfig { mode, ..cfg.pessimism });
        table.push(mode.name(), bench.evaluate(mode.name(), &arm, cfg.trials, &cfg.sim.initial_joints)?);
    }
    let mut report = Report::default();
    report.tables.push(("pessimism_mode".into(), table));
    Ok(report)
}

// ---------------------------------------------------------------------------
// Trend checks

/// One pass/fail outcome of a campaign-level threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn need<'a>(table: &'a Table, cell: &str) -> Result<&'a ResultsRow> {
    table
        .row(cell)
        .ok_or_else(|| Error::InvalidArgument(format!("results table has no cell `{cell}`")))
}

pub fn success_check(row: &ResultsRow, min_rate: f64) -> Check {
    Check::new(
        format!("{} success >= {min_rate}%", row.cell),
        row.success_rate >= min_rate,
        format!("{:.1}% ({}/{})", row.success_rate, row.successes, row.trials),
    )
}

/// The learned controller beats the biased demonstrator by `margin` points
/// for every true μ that is below the assumed one.
pub fn biased_checks(table: &Table, cfg: &ExperimentConfig, margin: f64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &mu in cfg.biased.mu_true.iter().filter(|&&m| m < cfg.biased.mu_assumed) {
        let demo = need(table, &format!("mu_true={mu} demonstrator"))?;
        let cv = need(table, &format!("mu_true={mu} cv_mpc"))?;
        out.push(Check::new(
            format!("mu_true={mu}: cv_mpc - demonstrator >= {margin} pts"),
            cv.success_rate - demo.success_rate >= margin,
            format!("{:.1}% vs {:.1}%", cv.success_rate, demo.success_rate),
        ));
    }
    Ok(out)
}

/// Initial-state pessimism succeeds at least as often as pointwise, and
/// pointwise tilts the tray no more on average.
pub fn pessimism_checks(table: &Table) -> Result<Vec<Check>> {
    let isp = need(table, PessimismMode::InitialState.name())?;
    let pwp = need(table, PessimismMode::Pointwise.name())?;
    let tilt = |r: &ResultsRow| r.tilt_mean.map_or("n/a".to_string(), |t| format!("{t:.3}"));
    Ok(vec![
        Check::new(
            "initial_state success >= pointwise success",
            isp.success_rate >= pwp.success_rate,
            format!("{:.1}% vs {:.1}%", isp.success_rate, pwp.success_rate),
        ),
        Check::new(
            "pointwise mean max tilt <= initial_state mean max tilt",
            matches!((pwp.tilt_mean, isp.tilt_mean), (Some(p), Some(i)) if p <= i),
            format!("{} deg vs {} deg", tilt(pwp), tilt(isp)),
        ),
    ])
}

/// Rotation-only beats velocity/acceleration-only from the shifted start and
/// reaches `min_rot`% from the training start.
pub fn observation_checks(same: &Table, shifted: &Table, min_rot: f64) -> Result<Vec<Check>> {
    let rot = ObservationMode::Rot.name();
    let va = ObservationMode::VelAcc.name();
    let (s_rot, s_va) = (need(shifted, rot)?, need(shifted, va)?);
    Ok(vec![
        Check::new(
            "shifted start: rot success > vel_acc success",
            s_rot.success_rate > s_va.success_rate,
            format!("{:.1}% vs {:.1}%", s_rot.success_rate, s_va.success_rate),
        ),
        success_check(need(same, rot)?, min_rot),
    ])
}

// ---------------------------------------------------------------------------
// Dataset statistics

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub mode: Option<ObservationMode>,
    pub obs_dim: usize,
    pub transitions: usize,
    pub episodes: usize,
    pub violation_rate: f64,
    pub outcomes: BTreeMap<String, usize>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

pub fn inspect(ds: &Dataset) -> DatasetStats {
    let dim = ds.obs_dim();
    let n = ds.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for t in &ds.transitions {
        for (m, v) in mean.iter_mut().zip(&t.obs) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for t in &ds.transitions {
        for ((s, v), m) in var.iter_mut().zip(&t.obs).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let mut outcomes = BTreeMap::new();
    for e in &ds.episodes {
        *outcomes.entry(e.reason.map_or("none", |r| r.name()).to_string()).or_insert(0) += 1;
    }
    DatasetStats {
        mode: ds.mode,
        obs_dim: dim,
        transitions: ds.len(),
        episodes: ds.episodes.len(),
        violation_rate: ds.violation_rate(),
        outcomes,
        feature_mean: mean,
        feature_std: var.into_iter().map(f64::sqrt).collect(),
    }
}

// ---------------------------------------------------------------------------
// Run manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file.
    pub outputs: BTreeMap<String, String>,
    pub training: Vec<TrainingSummary>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Manifest {
            command: command.into(),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            training: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into());
        self.outputs.insert(name, file_sha256(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Writes every table of `report` into `dir` and records them in `manifest`.
pub fn write_report(report: &Report, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, table) in &report.tables {
        for p in table.write(dir, name)? {
            manifest.add_output(&p)?;
        }
    }
    manifest.training.extend(report.training.iter().cloned());
    Ok(())
}
