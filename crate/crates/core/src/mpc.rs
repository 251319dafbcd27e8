//! Sampling-based MPC (MPPI) over joint accelerations with a pluggable cost
//! stack.
//!
//! Configured with a friction-cone term it is the demonstrator; configured
//! with a value ensemble it is the conservative controller. Every control
//! step samples `N` perturbed acceleration sequences around the current mean,
//! predicts the tray motion for each with the kinematic model, scores them and
//! moves the mean to their exponentially weighted average.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conservative::{blend_member_values, PessimismConfig};
use crate::contact::{friction_cost, ContactModel, ObjectParams, GRAVITY};
use crate::ensemble::EnsembleCheckpoint;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kinematics::{ee_state, integrate, ChainModel, EndEffectorState, JointState};
use crate::sim::{Policy, WorldState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    /// Distance of the tray to the goal (per metre).
    pub goal: f64,
    /// `‖v‖ + ‖ω‖` of the tray, ramped in within `d_stop` of the goal.
    pub stop: f64,
    /// Squared hinge on joint positions within `limit_margin` of a limit.
    pub joint_limit: f64,
    /// `‖θ̈‖²`.
    pub smoothness: f64,
    /// Continuous friction-cone violation of the carried object.
    pub friction: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            goal: 10.0,
            stop: 5.0,
            joint_limit: 100.0,
            smoothness: 1e-3,
            friction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub samples: usize,
    /// Noise std per joint (rad/s²); a single entry applies to every joint.
    pub sigma: Vec<f64>,
    /// Low-pass factor of the sampling noise along the horizon, in `[0, 1)`.
    pub smoothing: f64,
    pub beta: f64,
    pub gamma: f64,
    pub opt_iters: usize,
    pub warm_start: bool,
    pub dt: f64,
    pub d_stop: f64,
    pub limit_margin: f64,
    pub weights: CostWeights,
    pub seed: u64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 30,
            samples: 256,
            sigma: vec![2.0],
            smoothing: 0.0,
            beta: 1.0,
            gamma: 0.99,
            opt_iters: 1,
            warm_start: true,
            dt: 0.02,
            d_stop: 0.1,
            limit_margin: 0.1,
            weights: CostWeights::default(),
            seed: 0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, dof: usize) -> Result<()> {
        if self.horizon == 0 || self.samples == 0 || self.opt_iters == 0 {
            return Err(Error::Config("horizon, samples and opt_iters must be ≥ 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("β must be positive, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("γ must lie in [0, 1), got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config("smoothing must lie in [0, 1)".into()));
        }
        if !(self.sigma.len() == 1 || self.sigma.len() == dof) || self.sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config(format!(
                "sigma needs 1 or {dof} non-negative entries, got {:?}",
                self.sigma
            )));
        }
        if !(self.dt > 0.0 && self.d_stop > 0.0 && self.limit_margin >= 0.0) {
            return Err(Error::Config("dt, d_stop must be positive".into()));
        }
        Ok(())
    }

    fn sigma_of(&self, j: usize) -> f64 {
        if self.sigma.len() == 1 {
            self.sigma[0]
        } else {
            self.sigma[j]
        }
    }
}

/// `H × J` joint accelerations, one row per step.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSequence(pub DMatrix<f64>);

impl ControlSequence {
    pub fn zeros(horizon: usize, dof: usize) -> Self {
        ControlSequence(DMatrix::zeros(horizon, dof))
    }

    pub fn horizon(&self) -> usize {
        self.0.nrows()
    }

    pub fn dof(&self) -> usize {
        self.0.ncols()
    }

    pub fn step(&self, t: usize) -> Vec<f64> {
        self.0.row(t).iter().copied().collect()
    }

    pub fn clamp(&mut self, limits: &[f64]) {
        for (j, mut col) in self.0.column_iter_mut().enumerate() {
            col.apply(|v| *v = v.clamp(-limits[j], limits[j]));
        }
    }

    /// Drops the first step and appends zeros.
    pub fn shift(&mut self) {
        let h = self.horizon();
        for t in 1..h {
            for j in 0..self.dof() {
                self.0[(t - 1, j)] = self.0[(t, j)];
            }
        }
        self.0.row_mut(h - 1).fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `H + 1` predicted tray states, the current one first.
    pub ee: Vec<EndEffectorState>,
    pub joints: Vec<JointState>,
    /// `H` per-step costs, undiscounted.
    pub costs: Vec<f64>,
    pub ret: f64,
}

/// Perturbed copies of `mean`; sample 0 is the mean itself.
pub fn sample_sequences(
    mean: &ControlSequence,
    config: &MpcConfig,
    limits: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<ControlSequence> {
    let (h, dof) = (mean.horizon(), mean.dof());
    let alpha = config.smoothing;
    let gain = (1.0 - alpha * alpha).sqrt();
    let mut out = Vec::with_capacity(config.samples);
    let mut first = mean.clone();
    first.clamp(limits);
    out.push(first);
    for _ in 1..config.samples {
        let mut seq = mean.clone();
        for j in 0..dof {
            let sigma = config.sigma_of(j);
            let mut filtered = 0.0;
            for t in 0..h {
                let e: f64 = StandardNormal.sample(rng);
                filtered = if t == 0 { e } else { alpha * filtered + gain * e };
                seq.0[(t, j)] += sigma * filtered;
            }
        }
        seq.clamp(limits);
        out.push(seq);
    }
    out
}

/// Kinematic prediction of a command sequence; costs are left empty.
pub fn rollout(chain: &ChainModel, initial: &JointState, seq: &ControlSequence, dt: f64) -> Result<Rollout> {
    let mut joints = Vec::with_capacity(seq.horizon() + 1);
    let mut ee = Vec::with_capacity(seq.horizon() + 1);
    joints.push(initial.clone());
    ee.push(ee_state(chain, initial)?);
    for t in 0..seq.horizon() {
        let next = integrate(chain, joints.last().unwrap(), &seq.step(t), dt)?;
        ee.push(ee_state(chain, &next)?);
        joints.push(next);
    }
    Ok(Rollout {
        ee,
        joints,
        costs: Vec::new(),
        ret: 0.0,
    })
}

/// The learned term of the conservative controller.
#[derive(Clone, Debug)]
pub struct ValueTerm {
    pub ensemble: Arc<EnsembleCheckpoint>,
    pub pessimism: PessimismConfig,
}

/// Cost terms evaluated on each predicted step.
#[derive(Clone, Debug)]
pub struct CostStack {
    pub weights: CostWeights,
    pub goal: Vector3<f64>,
    pub d_stop: f64,
    pub limit_margin: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Object model used by the friction term, carrying the assumed μ.
    pub friction_model: Option<Arc<ContactModel>>,
}

impl CostStack {
    pub fn new(chain: &ChainModel, config: &MpcConfig, goal: Vector3<f64>, friction: Option<Arc<ContactModel>>) -> Self {
        CostStack {
            weights: config.weights.clone(),
            goal,
            d_stop: config.d_stop,
            limit_margin: config.limit_margin,
            lower: chain.joints.iter().map(|j| j.lower).collect(),
            upper: chain.joints.iter().map(|j| j.upper).collect(),
            friction_model: friction,
        }
    }

    /// Cost of arriving in `ee`/`js` after applying `cmd`.
    pub fn step_cost(&self, ee: &EndEffectorState, js: &JointState, cmd: &[f64]) -> Result<f64> {
        let w = &self.weights;
        let dist = (ee.position - self.goal).norm();
        let mut c = w.goal * dist;
        let ramp = (1.0 - dist / self.d_stop).max(0.0);
        if w.stop != 0.0 && ramp > 0.0 {
            c += w.stop * ramp * (ee.linear_velocity.norm() + ee.angular_velocity.norm());
        }
        if w.joint_limit != 0.0 {
            let m = self.limit_margin;
            let hinge: f64 = js
                .positions
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(q, (lo, hi))| {
                    let a = (m - (q - lo)).max(0.0);
                    let b = (m - (hi - q)).max(0.0);
                    a * a + b * b
                })
                .sum();
            c += w.joint_limit * hinge;
        }
        if w.smoothness != 0.0 {
            c += w.smoothness * cmd.iter().map(|a| a * a).sum::<f64>();
        }
        if w.friction != 0.0 {
            if let Some(model) = &self.friction_model {
                let forces = model.forces(ee, &GRAVITY)?;
                c += w.friction * friction_cost(&forces, model.object.mu);
            }
        }
        Ok(c)
    }
}

/// Fills per-step costs and the discounted return `Σ_t γ^t c(x̂_{t+1}, θ̈_t)`.
pub fn evaluate_costs(r: &mut Rollout, seq: &ControlSequence, stack: &CostStack, gamma: f64) -> Result<()> {
    let h = seq.horizon();
    r.costs.clear();
    let mut discount = 1.0;
    let mut ret = 0.0;
    for t in 0..h {
        let c = stack.step_cost(&r.ee[t + 1], &r.joints[t + 1], &seq.step(t))?;
        r.costs.push(c);
        ret += discount * c;
        discount *= gamma;
    }
    r.ret = ret;
    Ok(())
}

/// Normalized MPPI weights `exp(−(G_i − min G)/β)`. Non-finite returns get
/// zero weight.
pub fn mppi_weights(returns: &[f64], beta: f64) -> Result<Vec<f64>> {
    let min = returns
        .iter()
        .copied()
        .filter(|g| g.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::NonFinite("every sample return"));
    }
    let mut w: Vec<f64> = returns
        .iter()
        .map(|g| if g.is_finite() { (-(g - min) / beta).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

pub fn update(samples: &[ControlSequence], returns: &[f64], beta: f64) -> Result<ControlSequence> {
    if samples.is_empty() || samples.len() != returns.len() {
        return Err(Error::InvalidArgument("update needs one return per sample".into()));
    }
    let weights = mppi_weights(returns, beta)?;
    let mut mean = DMatrix::zeros(samples[0].horizon(), samples[0].dof());
    for (s, w) in samples.iter().zip(&weights) {
        if *w > 0.0 {
            mean += &s.0 * *w;
        }
    }
    Ok(ControlSequence(mean))
}

/// One line of the optional per-iteration trace.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRecord<'a> {
    pub step: usize,
    pub iter: usize,
    pub returns: &'a [f64],
    pub effective_samples: f64,
}

pub struct Controller {
    pub chain: Arc<ChainModel>,
    pub config: MpcConfig,
    pub friction: Option<Arc<ContactModel>>,
    pub value: Option<ValueTerm>,
    pub exec: Exec,
    mean: ControlSequence,
    rng: ChaCha8Rng,
    limits: Vec<f64>,
    steps: usize,
    trace: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("config", &self.config)
            .field("steps", &self.steps)
            .finish_non_exhaustive()
    }
}

impl Controller {
    pub fn new(chain: Arc<ChainModel>, config: MpcConfig) -> Result<Self> {
        config.validate(chain.dof())?;
        let limits = chain.acceleration_limits();
        Ok(Controller {
            mean: ControlSequence::zeros(config.horizon, chain.dof()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            limits,
            chain,
            config,
            friction: None,
            value: None,
            exec: Exec::default(),
            steps: 0,
            trace: None,
        })
    }

    /// Demonstrator: adds the friction-cone term for `object` with its μ.
    pub fn with_friction(mut self, object: ObjectParams) -> Result<Self> {
        self.friction = Some(Arc::new(ContactModel::new(object)?));
        Ok(self)
    }

    pub fn with_value(mut self, value: ValueTerm) -> Result<Self> {
        value.pessimism.validate()?;
        if value.ensemble.mode.is_none() {
            return Err(Error::Config("ensemble has no observation mode".into()));
        }
        self.value = Some(value);
        Ok(self)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn set_trace(&mut self, sink: Box<dyn Write + Send>) {
        self.trace = Some(sink);
    }

    pub fn mean(&self) -> &ControlSequence {
        &self.mean
    }

    /// Clears the warm start and reseeds; used between episodes.
    pub fn reset(&mut self, seed: u64) {
        self.mean = ControlSequence::zeros(self.config.horizon, self.chain.dof());
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.steps = 0;
    }

    /// Scores every sample: kinematic rollout, cost stack, then the
    /// pessimistic value term if configured.
    pub fn score(&self, joints: &JointState, goal: Vector3<f64>, samples: &[ControlSequence]) -> Result<Vec<f64>> {
        let stack = CostStack::new(&self.chain, &self.config, goal, self.friction.clone());
        let chain = &*self.chain;
        let cfg = &self.config;
        let rollouts: Vec<Result<Rollout>> = self.exec.map(samples, |seq| {
            let mut r = rollout(chain, joints, seq, cfg.dt)?;
            evaluate_costs(&mut r, seq, &stack, cfg.gamma)?;
            Ok(r)
        });
        let rollouts: Vec<Rollout> = rollouts.into_iter().collect::<Result<_>>()?;
        let mut returns: Vec<f64> = rollouts.iter().map(|r| r.ret).collect();
        if let Some(value) = &self.value {
            let extra = self.value_returns(value, &rollouts)?;
            for (g, v) in returns.iter_mut().zip(extra) {
                *g += v;
            }
        }
        Ok(returns)
    }

    fn value_returns(&self, value: &ValueTerm, rollouts: &[Rollout]) -> Result<Vec<f64>> {
        let steps = self.config.horizon + 1;
        let states: Vec<EndEffectorState> = rollouts.iter().flat_map(|r| r.ee.iter().cloned()).collect();
        let x = value.ensemble.observation_matrix(&states)?;
        let preds = value.ensemble.predict_matrix(&x, self.exec);
        let members = preds.len();
        let gamma = self.config.gamma;
        let out: Vec<Result<f64>> = self.exec.map_range(rollouts.len(), |n| {
            let mut table = Vec::with_capacity(members * steps);
            for p in &preds {
                table.extend_from_slice(&p[n * steps..(n + 1) * steps]);
            }
            blend_member_values(&table, members, &value.pessimism, gamma)
        });
        out.into_iter().collect()
    }

    /// One MPC step: optimize, emit the first action, warm-start shift.
    pub fn control_step(&mut self, joints: &JointState, goal: Vector3<f64>) -> Result<Vec<f64>> {
        for iter in 0..self.config.opt_iters {
            let samples = sample_sequences(&self.mean, &self.config, &self.limits, &mut self.rng);
            let returns = self.score(joints, goal, &samples)?;
            if let Some(sink) = &mut self.trace {
                let w = mppi_weights(&returns, self.config.beta)?;
                let rec = TraceRecord {
                    step: self.steps,
                    iter,
                    returns: &returns,
                    effective_samples: 1.0 / w.iter().map(|v| v * v).sum::<f64>(),
                };
                serde_json::to_writer(&mut *sink, &rec)?;
                sink.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
            }
            self.mean = update(&samples, &returns, self.config.beta)?;
        }
        self.mean.clamp(&self.limits);
        let cmd = self.mean.step(0);
        if self.config.warm_start {
            self.mean.shift();
        } else {
            self.mean.0.fill(0.0);
        }
        self.steps += 1;
        Ok(cmd)
    }
}

impl Policy for Controller {
    fn act(&mut self, world: &WorldState) -> Result<Vec<f64>> {
        self.control_step(&world.joints, world.goal)
    }
}
