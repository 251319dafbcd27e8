//! Tray–object contact model.
//!
//! The object sits on the tray at a handful of point contacts. Given the
//! tray (end-effector) motion we compute the gravitoinertial wrench the
//! contacts must cancel, distribute it over the contacts with the grasp
//! matrix pseudo-inverse, and check each contact force against its friction
//! cone. A simple Coulomb slide model advances the object's position on the
//! tray when the aggregate cone is violated.
//!
//! All wrenches and contact forces are expressed in the tray frame, whose
//! +z axis is the tray normal.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::kinematics::EndEffectorState;

pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

/// Relative singular-value cutoff for the pseudo-inverse.
const PINV_RCOND: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectParams {
    pub name: String,
    /// kg
    pub mass: f64,
    /// Centre of mass in the tray frame (m).
    pub com: Vector3<f64>,
    /// Inertia about the CoM (kg·m²).
    pub inertia: Matrix3<f64>,
    pub mu: f64,
    /// Contact positions in the tray frame. Every contact normal is tray +z.
    pub contacts: Vec<Vector3<f64>>,
}

impl ObjectParams {
    /// Solid cuboid resting on its bottom face, centred on the tray origin,
    /// with contacts at the four bottom corners.
    pub fn cuboid(name: &str, mass: f64, size: [f64; 3], com_height: f64, mu: f64) -> Self {
        let [sx, sy, sz] = size;
        let k = mass / 12.0;
        let inertia = Matrix3::from_diagonal(&Vector3::new(
            k * (sy * sy + sz * sz),
            k * (sx * sx + sz * sz),
            k * (sx * sx + sy * sy),
        ));
        let (hx, hy) = (sx / 2.0, sy / 2.0);
        ObjectParams {
            name: name.to_string(),
            mass,
            com: Vector3::new(0.0, 0.0, com_height),
            inertia,
            mu,
            contacts: vec![
                Vector3::new(hx, hy, 0.0),
                Vector3::new(-hx, hy, 0.0),
                Vector3::new(-hx, -hy, 0.0),
                Vector3::new(hx, -hy, 0.0),
            ],
        }
    }

    /// Cube used in the simulation studies: 0.05 kg, 5 cm side, μ = 0.3.
    pub fn cube_sim() -> Self {
        Self::cuboid("cube_sim", 0.05, [0.05; 3], 0.025, 0.3)
    }

    /// Cube used on hardware: 0.06 kg, CoM 2.5 cm above the contacts, μ = 0.3.
    pub fn cube_real() -> Self {
        Self::cuboid("cube_real", 0.06, [0.05; 3], 0.025, 0.3)
    }

    /// Thin square plate with its CoM in the contact plane. Contacts then
    /// share the load equally under any quasi-static tilt.
    pub fn flat_plate(mass: f64, side: f64, mu: f64) -> Self {
        Self::cuboid("flat_plate", mass, [side, side, 0.0], 0.0, mu)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cube_sim" => Ok(Self::cube_sim()),
            "cube_real" => Ok(Self::cube_real()),
            other => Err(Error::Config(format!("unknown object preset `{other}`"))),
        }
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ObjectSpec =
            toml::from_str(&text).map_err(|e| Error::Config(format!("object file: {e}")))?;
        spec.build()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::Config("object mass must be positive".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config("friction coefficient must be non-negative".into()));
        }
        let sym = (self.inertia - self.inertia.transpose()).abs().max();
        if !self.inertia.iter().all(|v| v.is_finite()) || sym > 1e-12 {
            return Err(Error::Config("inertia must be a finite symmetric matrix".into()));
        }
        if self.inertia.symmetric_eigenvalues().min() < -1e-12 {
            return Err(Error::Config("inertia must be positive semi-definite".into()));
        }
        if self.contacts.len() < 3 {
            return Err(Error::Config(format!(
                "need at least 3 contacts, got {}",
                self.contacts.len()
            )));
        }
        let p0 = self.contacts[0];
        let spread = self.contacts[1..].iter().flat_map(|a| {
            self.contacts[1..]
                .iter()
                .map(move |b| (a - p0).cross(&(b - p0)).norm())
        });
        if spread.fold(0.0, f64::max) < 1e-9 {
            return Err(Error::Config("contact points are collinear".into()));
        }
        Ok(())
    }
}

/// Serialized form of [`ObjectParams`]. Either give `size` (cuboid with
/// corner contacts and solid-body inertia) or explicit `inertia` + `contacts`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub mass: f64,
    pub mu: f64,
    #[serde(default)]
    pub size: Option<[f64; 3]>,
    #[serde(default)]
    pub com: Option<[f64; 3]>,
    #[serde(default)]
    pub inertia: Option<[[f64; 3]; 3]>,
    #[serde(default)]
    pub contacts: Option<Vec<[f64; 3]>>,
}

impl ObjectSpec {
    pub fn build(&self) -> Result<ObjectParams> {
        let mut obj = match (self.size, &self.inertia, &self.contacts) {
            (Some(size), None, None) => {
                let h = self.com.map_or(size[2] / 2.0, |c| c[2]);
                ObjectParams::cuboid(&self.name, self.mass, size, h, self.mu)
            }
            (None, Some(i), Some(c)) => ObjectParams {
                name: self.name.clone(),
                mass: self.mass,
                com: Vector3::zeros(),
                inertia: Matrix3::from_fn(|r, k| i[r][k]),
                mu: self.mu,
                contacts: c.iter().map(|p| Vector3::from(*p)).collect(),
            },
            _ => {
                return Err(Error::Config(
                    "object: give either `size` or both `inertia` and `contacts`".into(),
                ))
            }
        };
        if let Some(c) = self.com {
            obj.com = Vector3::from(c);
        }
        obj.validate()?;
        Ok(obj)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Wrench {
            force: Vector3::zeros(),
            torque: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(6, self.force.iter().chain(self.torque.iter()).copied())
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Wrench {
            force: Vector3::new(v[0], v[1], v[2]),
            torque: Vector3::new(v[3], v[4], v[5]),
        }
    }
}

/// Stacked per-contact forces `(f_x, f_y, f_z)`, tangential then normal.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactForces(pub Vec<f64>);

impl ContactForces {
    pub fn count(&self) -> usize {
        self.0.len() / 3
    }

    pub fn contact(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.0[3 * i], self.0[3 * i + 1], self.0[3 * i + 2])
    }

    pub fn iter(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.0.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2]))
    }

    pub fn total(&self) -> Vector3<f64> {
        self.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConeCheck {
    /// `μ f_z − ‖f_t‖` per contact.
    pub margins: Vec<f64>,
    /// `f_z ≥ 0` per contact.
    pub normal_ok: Vec<bool>,
}

impl ConeCheck {
    pub fn satisfied(&self) -> bool {
        self.margins.iter().all(|&m| m >= 0.0) && self.normal_ok.iter().all(|&ok| ok)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlipState {
    /// Object offset on the tray plane (m).
    pub position: Vector2<f64>,
    /// Object velocity relative to the tray (m/s).
    pub velocity: Vector2<f64>,
    /// Accumulated path length of the relative motion (m).
    pub distance: f64,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    v.cross_matrix()
}

/// Wrench the contacts must cancel to keep the object fixed on the tray,
/// expressed in the tray frame. Assumes the object orientation equals the
/// tray orientation.
pub fn gravitoinertial_wrench(
    ee: &EndEffectorState,
    obj: &ObjectParams,
    gravity: &Vector3<f64>,
) -> Result<Wrench> {
    let rt = ee.rotation.inverse();
    let acc = rt * ee.linear_acceleration;
    let w = rt * ee.angular_velocity;
    let dw = rt * ee.angular_acceleration;
    let g = rt * gravity;

    let ws = skew(&w);
    let force = -(obj.mass * (acc - g) + obj.mass * (skew(&dw) + ws * ws) * obj.com);
    let torque = -(obj.inertia * dw + w.cross(&(obj.inertia * w)));
    ensure_finite(force.as_slice(), "gravitoinertial force")?;
    ensure_finite(torque.as_slice(), "gravitoinertial torque")?;
    Ok(Wrench { force, torque })
}

/// 6×3n map from stacked contact forces to the body wrench about the CoM.
pub fn grasp_matrix(obj: &ObjectParams) -> Result<DMatrix<f64>> {
    let n = obj.contacts.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "grasp matrix needs at least 3 contacts, got {n}"
        )));
    }
    let mut g = DMatrix::zeros(6, 3 * n);
    for (i, p) in obj.contacts.iter().enumerate() {
        // Contact frames are aligned with the tray frame, so the force block
        // is the identity and the torque block is the lever-arm cross matrix.
        g.view_mut((0, 3 * i), (3, 3)).fill_with_identity();
        g.view_mut((3, 3 * i), (3, 3)).copy_from(&skew(&(p - obj.com)));
    }
    Ok(g)
}

/// SVD pseudo-inverse with a cutoff relative to the largest singular value.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = PINV_RCOND * smax;
    let u = svd.u.as_ref().expect("u computed");
    let vt = svd.v_t.as_ref().expect("v_t computed");
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    out
}

/// Grasp matrix and its pseudo-inverse, precomputed per object.
#[derive(Clone, Debug)]
pub struct ContactModel {
    pub object: ObjectParams,
    pub grasp: DMatrix<f64>,
    pub grasp_pinv: DMatrix<f64>,
}

impl ContactModel {
    pub fn new(object: ObjectParams) -> Result<Self> {
        object.validate()?;
        let grasp = grasp_matrix(&object)?;
        let grasp_pinv = pseudo_inverse(&grasp);
        Ok(ContactModel {
            object,
            grasp,
            grasp_pinv,
        })
    }

    /// Contact forces for the given tray motion.
    pub fn forces(&self, ee: &EndEffectorState, gravity: &Vector3<f64>) -> Result<ContactForces> {
        let w = gravitoinertial_wrench(ee, &self.object, gravity)?;
        contact_forces(&w, &self.grasp_pinv)
    }
}

/// Minimum-norm contact forces balancing `w_gi`: `F = G⁺ · (−w_gi)`.
pub fn contact_forces(w_gi: &Wrench, grasp_pinv: &DMatrix<f64>) -> Result<ContactForces> {
    if grasp_pinv.ncols() != 6 || grasp_pinv.nrows() % 3 != 0 {
        return Err(Error::Dimension {
            what: "grasp pseudo-inverse columns",
            expected: 6,
            got: grasp_pinv.ncols(),
        });
    }
    ensure_finite(w_gi.force.as_slice(), "wrench force")?;
    ensure_finite(w_gi.torque.as_slice(), "wrench torque")?;
    let f = grasp_pinv * (-w_gi.to_vector());
    Ok(ContactForces(f.as_slice().to_vec()))
}

pub fn friction_margins(forces: &ContactForces, mu: f64) -> ConeCheck {
    let (margins, normal_ok) = forces
        .iter()
        .map(|f| (mu * f.z - f.x.hypot(f.y), f.z >= 0.0))
        .unzip();
    ConeCheck { margins, normal_ok }
}

/// Hinge on the friction cone per contact. A separating contact (`f_z < 0`)
/// keeps the hinge and pays an extra `|f_z|`, so the cost is continuous and
/// zero exactly when every cone holds.
pub fn friction_cost(forces: &ContactForces, mu: f64) -> f64 {
    forces
        .iter()
        .map(|f| {
            let excess = f.x.hypot(f.y) - mu * f.z;
            if f.z >= 0.0 {
                excess.max(0.0)
            } else {
                excess + f.z.abs()
            }
        })
        .sum()
}

/// Advance the object's slide on the tray by one step.
///
/// `forces` are the contact forces that would hold the object fixed. When
/// their aggregate lies inside the friction cone a resting object stays put;
/// otherwise Coulomb friction (kinetic = static μ) acts against the relative
/// motion and the remainder of the required load accelerates the object
/// relative to the tray.
pub fn slip_step(
    slip: &SlipState,
    forces: &ContactForces,
    obj: &ObjectParams,
    dt: f64,
) -> Result<SlipState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let total = forces.total();
    let required = Vector2::new(total.x, total.y);
    let capacity = obj.mu * total.z.max(0.0);
    let demand = required.norm();
    let speed = slip.velocity.norm();

    if speed == 0.0 && demand <= capacity {
        return Ok(slip.clone());
    }

    let friction = if speed > 0.0 {
        -capacity * slip.velocity / speed
    } else {
        capacity * required / demand
    };
    let accel = (friction - required) / obj.mass;
    let mut velocity = slip.velocity + accel * dt;
    // Kinetic friction cannot reverse the slide; it stops it.
    if speed > 0.0 && velocity.dot(&slip.velocity) <= 0.0 && demand <= capacity {
        velocity = Vector2::zeros();
    }
    let delta = velocity * dt;
    Ok(SlipState {
        position: slip.position + delta,
        velocity,
        distance: slip.distance + delta.norm(),
    })
}
