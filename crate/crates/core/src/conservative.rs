//! Conservative return estimation from a value ensemble.
//!
//! Each ensemble member scores every state of an MPC rollout; the member's
//! discounted sum of scores is its return estimate for that rollout. The
//! estimates are then folded into one pessimistic number with a temperature
//! `λ` log-sum-exp. In [`PessimismMode::InitialState`] the fold happens once
//! per rollout; [`PessimismMode::Pointwise`] folds at every step before
//! discounting, which is the over-pessimistic variant kept for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::ensemble::EnsembleCheckpoint;
use crate::exec::Exec;
use crate::kinematics::EndEffectorState;

/// Which end-effector features the value functions see.
///
/// | mode          | features                                   | dim |
/// |---------------|--------------------------------------------|-----|
/// | `full`        | position, twist, spatial accel, rotation   | 24  |
/// | `vel_acc_rot` | twist, spatial accel, rotation             | 21  |
/// | `vel_acc`     | twist, spatial accel                       | 12  |
/// | `rot`         | rotation                                   | 9   |
///
/// Twist is `(v, ω)`, spatial acceleration `(v̇, ω̇)`, rotation the
/// row-major flattened 3×3 matrix. All world frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    Full,
    VelAccRot,
    VelAcc,
    Rot,
}

impl ObservationMode {
    pub const ALL: [ObservationMode; 4] = [
        ObservationMode::Full,
        ObservationMode::VelAccRot,
        ObservationMode::VelAcc,
        ObservationMode::Rot,
    ];

    pub fn dim(self) -> usize {
        match self {
            ObservationMode::Full => 24,
            ObservationMode::VelAccRot => 21,
            ObservationMode::VelAcc => 12,
            ObservationMode::Rot => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObservationMode::Full => "full",
            ObservationMode::VelAccRot => "vel_acc_rot",
            ObservationMode::VelAcc => "vel_acc",
            ObservationMode::Rot => "rot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown observation mode `{s}`")))
    }

    fn has_position(self) -> bool {
        self == ObservationMode::Full
    }

    fn has_motion(self) -> bool {
        self != ObservationMode::Rot
    }

    fn has_rotation(self) -> bool {
        self != ObservationMode::VelAcc
    }
}

impl std::fmt::Display for ObservationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Writes the observation into `out`, which must have length `mode.dim()`.
pub fn extract_into(ee: &EndEffectorState, mode: ObservationMode, out: &mut [f64]) {
    debug_assert_eq!(out.len(), mode.dim());
    let mut i = 0;
    let mut put = |v: &[f64]| {
        out[i..i + v.len()].copy_from_slice(v);
        i += v.len();
    };
    if mode.has_position() {
        put(ee.position.as_slice());
    }
    if mode.has_motion() {
        put(ee.linear_velocity.as_slice());
        put(ee.angular_velocity.as_slice());
        put(ee.linear_acceleration.as_slice());
        put(ee.angular_acceleration.as_slice());
    }
    if mode.has_rotation() {
        let r = ee.rotation.matrix();
        for row in 0..3 {
            put(&[r[(row, 0)], r[(row, 1)], r[(row, 2)]]);
        }
    }
}

pub fn extract_observation(ee: &EndEffectorState, mode: ObservationMode) -> Vec<f64> {
    let mut out = vec![0.0; mode.dim()];
    extract_into(ee, mode, &mut out);
    out
}

/// `Σ_t γ^t V(x_t)` over all `H + 1` rollout states, step 0 included.
pub fn member_return(values: &[f64], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for v in values {
        total += discount * v;
        discount *= gamma;
    }
    total
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PessimismFormula {
    /// `log Σ_i exp(G_i / λ)`.
    PaperLiteral,
    /// `λ · log( (1/K) Σ_i exp(G_i / λ) )`: tends to `max_i G_i` as λ → 0
    /// and to the mean as λ → ∞.
    #[default]
    ScaledLogMeanExp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PessimismMode {
    #[default]
    InitialState,
    Pointwise,
}

impl PessimismMode {
    pub fn name(self) -> &'static str {
        match self {
            PessimismMode::InitialState => "initial_state",
            PessimismMode::Pointwise => "pointwise",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PessimismConfig {
    pub lambda: f64,
    pub mode: PessimismMode,
    pub formula: PessimismFormula,
    /// Weight of the pessimistic term in the MPC return.
    pub weight: f64,
}

impl Default for PessimismConfig {
    fn default() -> Self {
        PessimismConfig {
            lambda: 20.0,
            mode: PessimismMode::InitialState,
            formula: PessimismFormula::ScaledLogMeanExp,
            weight: 1.0,
        }
    }
}

impl PessimismConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("λ must be positive, got {}", self.lambda)));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::Config("pessimism weight must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn pessimistic_return(returns: &[f64], lambda: f64, formula: PessimismFormula) -> Result<f64> {
    if returns.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
    }
    ensure_finite(returns, "member returns")?;
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = returns.iter().map(|g| ((g - max) / lambda).exp()).sum();
    Ok(match formula {
        PessimismFormula::PaperLiteral => max / lambda + sum.ln(),
        PessimismFormula::ScaledLogMeanExp => max + lambda * (sum.ln() - (returns.len() as f64).ln()),
    })
}

/// Pessimistic term from per-member value predictions along one rollout.
///
/// `values` is row-major `members × steps`: row `i` holds member `i`'s
/// predictions for rollout states `0..steps`. The result is already scaled by
/// the configured weight.
pub fn blend_member_values(
    values: &[f64],
    members: usize,
    cfg: &PessimismConfig,
    gamma: f64,
) -> Result<f64> {
    if members == 0 || values.len() % members != 0 {
        return Err(Error::Dimension {
            what: "member value table",
            expected: members,
            got: values.len(),
        });
    }
    let steps = values.len() / members;
    let pess = match cfg.mode {
        PessimismMode::InitialState => {
            let returns: Vec<f64> = values
                .chunks_exact(steps)
                .map(|row| member_return(row, gamma))
                .collect();
            pessimistic_return(&returns, cfg.lambda, cfg.formula)?
        }
        PessimismMode::Pointwise => {
            let mut column = vec![0.0; members];
            let mut per_step = Vec::with_capacity(steps);
            for t in 0..steps {
                for (k, c) in column.iter_mut().enumerate() {
                    *c = values[k * steps + t];
                }
                per_step.push(pessimistic_return(&column, cfg.lambda, cfg.formula)?);
            }
            member_return(&per_step, gamma)
        }
    };
    Ok(cfg.weight * pess)
}

/// Evaluates every member on every rollout state and blends the result.
pub fn blended_return(
    states: &[EndEffectorState],
    ensemble: &EnsembleCheckpoint,
    cfg: &PessimismConfig,
    gamma: f64,
) -> Result<f64> {
    let obs = ensemble.observation_matrix(states)?;
    let per_member = ensemble.predict_matrix(&obs, Exec::Sequential);
    let values: Vec<f64> = per_member.iter().flat_map(|v| v.iter().copied()).collect();
    blend_member_values(&values, ensemble.members.len(), cfg, gamma)
}
