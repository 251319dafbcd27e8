//! Episode-level world stepping: arm kinematics, contact forces, slip, cost
//! labels, termination and the per-episode metrics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conservative::{extract_observation, ObservationMode};
use crate::contact::{friction_margins, slip_step, ContactModel, ObjectParams, SlipState, GRAVITY};
use crate::dataset::{TerminalReason, Transition};
use crate::error::{Error, Result};
use crate::kinematics::{ee_state, integrate, ChainFile, ChainModel, EndEffectorState, JointState};

/// Axis-aligned goal region plus a reachability ball around the arm base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workspace {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub reach_center: [f64; 3],
    pub reach_radius: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Workspace {
            lo: [0.25, -0.3, 0.25],
            hi: [0.75, 0.3, 0.55],
            reach_center: [0.0, 0.0, 0.333],
            reach_radius: 0.8,
        }
    }
}

impl Workspace {
    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|i| !(self.lo[i] <= self.hi[i])) {
            return Err(Error::Config(format!(
                "goal box lo {:?} exceeds hi {:?}",
                self.lo, self.hi
            )));
        }
        if !(self.reach_radius > 0.0) {
            return Err(Error::Config("reach_radius must be positive".into()));
        }
        Ok(())
    }
}

const MAX_GOAL_REJECTIONS: usize = 1000;

/// Uniform goal inside the box, resampled until it is within reach.
pub fn sample_goal(rng: &mut impl Rng, ws: &Workspace) -> Result<Vector3<f64>> {
    ws.validate()?;
    let center = Vector3::from(ws.reach_center);
    for _ in 0..MAX_GOAL_REJECTIONS {
        let g = Vector3::from_fn(|i, _| {
            if ws.lo[i] == ws.hi[i] {
                ws.lo[i]
            } else {
                rng.gen_range(ws.lo[i]..ws.hi[i])
            }
        });
        if (g - center).norm() <= ws.reach_radius {
            return Ok(g);
        }
    }
    Err(Error::Config(format!(
        "no reachable goal after {MAX_GOAL_REJECTIONS} samples; check the workspace box"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub max_steps: usize,
    pub c_friction_label: f64,
    /// Per-step slide (m) above which a step is labelled as a violation.
    pub slip_eps: f64,
    /// Accumulated slide (m) that ends the episode.
    pub slip_limit: f64,
    pub goal_tolerance: f64,
    pub linear_velocity_tolerance: f64,
    pub angular_velocity_tolerance: f64,
    pub observation: ObservationMode,
    pub initial_joints: Vec<f64>,
    pub workspace: Workspace,
}

pub const READY_POSE: [f64; 7] = [0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785];

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.02,
            max_steps: 500,
            c_friction_label: 1.0,
            slip_eps: 1e-4,
            slip_limit: 0.02,
            goal_tolerance: 0.02,
            linear_velocity_tolerance: 0.02,
            angular_velocity_tolerance: 0.02,
            observation: ObservationMode::Full,
            initial_joints: READY_POSE.to_vec(),
            workspace: Workspace::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.max_steps == 0 {
            return Err(Error::Config("dt and max_steps must be positive".into()));
        }
        if !(self.c_friction_label > 0.0) {
            return Err(Error::Config("c_friction_label must be positive".into()));
        }
        if !(self.slip_eps >= 0.0 && self.slip_limit > 0.0) {
            return Err(Error::Config("bad slip thresholds".into()));
        }
        self.workspace.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub joints: JointState,
    pub ee: EndEffectorState,
    pub slip: SlipState,
    pub goal: Vector3<f64>,
    pub time: f64,
    pub steps: usize,
    pub terminal: Option<TerminalReason>,
}

impl WorldState {
    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub max_tilt_deg: f64,
    pub max_linear_velocity: f64,
    pub max_angular_velocity: f64,
    pub final_slip: f64,
    pub steps: usize,
    pub reason: Option<TerminalReason>,
}

/// Everything needed to rebuild a [`Simulator`]; stored in episode logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSetup {
    pub chain: ChainFileRef,
    pub object: ObjectParams,
    pub sim: SimConfig,
}

/// The chain either as the bundled preset or as an inline description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainFileRef {
    Panda,
    Inline(String),
}

impl ChainFileRef {
    pub fn build(&self) -> Result<ChainModel> {
        match self {
            ChainFileRef::Panda => Ok(ChainModel::panda()),
            ChainFileRef::Inline(text) => ChainFile::from_toml_str(text)?.build(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Simulator {
    pub chain: ChainModel,
    pub contact: ContactModel,
    pub config: SimConfig,
    pub gravity: Vector3<f64>,
}

impl Simulator {
    pub fn new(chain: ChainModel, object: ObjectParams, config: SimConfig) -> Result<Self> {
        config.validate()?;
        chain.validate()?;
        chain.check_dof("initial joints", config.initial_joints.len())?;
        Ok(Simulator {
            chain,
            contact: ContactModel::new(object)?,
            config,
            gravity: GRAVITY,
        })
    }

    pub fn from_setup(setup: &SimSetup) -> Result<Self> {
        Simulator::new(setup.chain.build()?, setup.object.clone(), setup.sim.clone())
    }

    pub fn object(&self) -> &ObjectParams {
        &self.contact.object
    }

    pub fn reset(&self, goal: Vector3<f64>) -> Result<WorldState> {
        self.reset_at(&self.config.initial_joints, goal)
    }

    pub fn reset_at(&self, joints: &[f64], goal: Vector3<f64>) -> Result<WorldState> {
        let joints = JointState::at_rest(joints.to_vec());
        let ee = ee_state(&self.chain, &joints)?;
        Ok(WorldState {
            joints,
            ee,
            slip: SlipState::default(),
            goal,
            time: 0.0,
            steps: 0,
            terminal: None,
        })
    }

    pub fn check_success(&self, w: &WorldState) -> bool {
        let c = &self.config;
        (w.ee.position - w.goal).norm() <= c.goal_tolerance
            && w.ee.linear_velocity.norm() < c.linear_velocity_tolerance
            && w.ee.angular_velocity.norm() < c.angular_velocity_tolerance
            && w.slip.distance < c.slip_limit
    }

    pub fn step(&self, world: &WorldState, cmd: &[f64]) -> Result<(WorldState, Transition)> {
        if let Some(reason) = world.terminal {
            return Err(Error::Contract(format!(
                "step called on a terminal world ({})",
                reason.name()
            )));
        }
        let c = &self.config;
        let joints = integrate(&self.chain, &world.joints, cmd, c.dt)?;
        let ee = ee_state(&self.chain, &joints)?;
        let forces = self.contact.forces(&ee, &self.gravity)?;
        let cone = friction_margins(&forces, self.object().mu);
        let slip = slip_step(&world.slip, &forces, self.object(), c.dt)?;
        let violated = !cone.satisfied() || slip.distance - world.slip.distance > c.slip_eps;
        let cost = if violated { c.c_friction_label } else { 0.0 };

        let mut next = WorldState {
            joints,
            ee,
            slip,
            goal: world.goal,
            time: world.time + c.dt,
            steps: world.steps + 1,
            terminal: None,
        };
        next.terminal = if next.slip.distance >= c.slip_limit {
            Some(TerminalReason::Slipped)
        } else if self.check_success(&next) {
            Some(TerminalReason::Reached)
        } else if next.steps >= c.max_steps {
            Some(TerminalReason::Timeout)
        } else {
            None
        };
        let transition = Transition {
            episode: 0,
            step: world.steps,
            obs: extract_observation(&world.ee, c.observation),
            cost,
            next_obs: extract_observation(&next.ee, c.observation),
            terminal: next.is_terminal(),
            ee: Some(world.ee.clone()),
            next_ee: Some(next.ee.clone()),
        };
        Ok((next, transition))
    }

    /// Metrics over a recorded trajectory; success is judged on the last state.
    pub fn finalize_metrics(&self, trajectory: &[WorldState]) -> Result<EpisodeMetrics> {
        let last = trajectory
            .last()
            .ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
        let mut m = EpisodeMetrics {
            success: self.check_success(last),
            max_tilt_deg: 0.0,
            max_linear_velocity: 0.0,
            max_angular_velocity: 0.0,
            final_slip: last.slip.distance,
            steps: last.steps,
            reason: last.terminal,
        };
        for w in trajectory {
            m.max_tilt_deg = m.max_tilt_deg.max(w.ee.tilt_deg());
            m.max_linear_velocity = m.max_linear_velocity.max(w.ee.linear_velocity.norm());
            m.max_angular_velocity = m.max_angular_velocity.max(w.ee.angular_velocity.norm());
        }
        Ok(m)
    }
}

/// Anything that maps the current world to a joint-acceleration command.
pub trait Policy {
    fn act(&mut self, world: &WorldState) -> Result<Vec<f64>>;
}

impl<F: FnMut(&WorldState) -> Result<Vec<f64>>> Policy for F {
    fn act(&mut self, world: &WorldState) -> Result<Vec<f64>> {
        self(world)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub states: Vec<WorldState>,
    pub commands: Vec<Vec<f64>>,
    pub transitions: Vec<Transition>,
    pub metrics: EpisodeMetrics,
}

pub fn run_episode(sim: &Simulator, start: WorldState, policy: &mut impl Policy) -> Result<Episode> {
    let mut states = vec![start];
    let mut commands = Vec::new();
    let mut transitions = Vec::new();
    while !states.last().unwrap().is_terminal() {
        let world = states.last().unwrap();
        let cmd = policy.act(world)?;
        let (next, t) = sim.step(world, &cmd)?;
        commands.push(cmd);
        transitions.push(t);
        states.push(next);
    }
    let metrics = sim.finalize_metrics(&states)?;
    Ok(Episode {
        states,
        commands,
        transitions,
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Episode logs

pub const LOG_FORMAT: &str = "cvmpc-episode";
pub const LOG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub setup: SimSetup,
    pub initial_joints: Vec<f64>,
    pub goal: [f64; 3],
    pub metrics: EpisodeMetrics,
}

/// One line per step: the command applied and the state it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub time: f64,
    pub command: Vec<f64>,
    pub joints: JointState,
    pub ee: EndEffectorState,
    pub cost: f64,
    pub slip: f64,
    pub goal: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub records: Vec<LogRecord>,
}

impl EpisodeLog {
    pub fn from_episode(setup: &SimSetup, ep: &Episode) -> Self {
        let start = &ep.states[0];
        let goal: [f64; 3] = start.goal.into();
        let records = ep
            .commands
            .iter()
            .zip(&ep.states[1..])
            .zip(&ep.transitions)
            .map(|((cmd, s), t)| LogRecord {
                step: s.steps,
                time: s.time,
                command: cmd.clone(),
                joints: s.joints.clone(),
                ee: s.ee.clone(),
                cost: t.cost,
                slip: s.slip.distance,
                goal,
            })
            .collect();
        EpisodeLog {
            header: LogHeader {
                format: LOG_FORMAT.into(),
                version: LOG_VERSION,
                setup: setup.clone(),
                initial_joints: start.joints.positions.clone(),
                goal,
                metrics: ep.metrics.clone(),
            },
            records,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n").map_err(io)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::corrupt(path, "empty log"))?
            .map_err(|e| Error::io(path, e))?;
        let header: LogHeader = serde_json::from_str(&first)
            .map_err(|e| Error::corrupt(path, format!("bad header: {e}")))?;
        if header.format != LOG_FORMAT {
            return Err(Error::corrupt(path, "not an episode log"));
        }
        if header.version != LOG_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: LOG_VERSION,
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::corrupt(path, format!("line {}: {e}", i + 2)))?,
            );
        }
        if records.len() != header.metrics.steps {
            return Err(Error::corrupt(
                path,
                format!("{} records for a {}-step episode", records.len(), header.metrics.steps),
            ));
        }
        Ok(EpisodeLog { header, records })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayReport {
    pub metrics: EpisodeMetrics,
    pub metrics_match: bool,
    /// Largest absolute difference between logged and replayed joint
    /// positions, velocities and tray position.
    pub max_divergence: f64,
    /// First step whose replayed state differs from the log.
    pub first_divergent_step: Option<usize>,
}

/// Re-steps the simulator through the logged commands.
pub fn replay(log: &EpisodeLog) -> Result<ReplayReport> {
    let sim = Simulator::from_setup(&log.header.setup)?;
    let mut world = sim.reset_at(&log.header.initial_joints, Vector3::from(log.header.goal))?;
    let mut states = vec![world.clone()];
    let mut max_divergence: f64 = 0.0;
    let mut first = None;
    for rec in &log.records {
        if world.is_terminal() {
            first.get_or_insert(rec.step);
            max_divergence = f64::INFINITY;
            break;
        }
        let (next, _) = sim.step(&world, &rec.command)?;
        let diff = next
            .joints
            .positions
            .iter()
            .zip(&rec.joints.positions)
            .chain(next.joints.velocities.iter().zip(&rec.joints.velocities))
            .map(|(a, b)| (a - b).abs())
            .chain((next.ee.position - rec.ee.position).iter().map(|d| d.abs()))
            .chain([(next.slip.distance - rec.slip).abs()])
            .fold(0.0, f64::max);
        if diff > 0.0 && first.is_none() {
            first = Some(rec.step);
        }
        max_divergence = max_divergence.max(diff);
        world = next;
        states.push(world.clone());
    }
    let metrics = sim.finalize_metrics(&states)?;
    Ok(ReplayReport {
        metrics_match: metrics == log.header.metrics,
        metrics,
        max_divergence,
        first_divergent_step: first,
    })
}
