//! Serial-arm kinematics: forward kinematics, geometric Jacobian, end-effector
//! twist and spatial acceleration, joint integration, and a floating
//! end-effector mode that bypasses the arm entirely.

use std::path::Path;

use nalgebra::{
    DVector, Isometry3, Matrix3, Matrix6xX, Rotation3, Translation3, Unit, UnitQuaternion, Vector3,
};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Step used for the directional finite difference of the Jacobian.
const JDOT_STEP: f64 = 1e-6;

const RIGID_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    /// Last applied (effective) acceleration.
    pub accelerations: Vec<f64>,
}

impl JointState {
    pub fn at_rest(positions: Vec<f64>) -> Self {
        let n = positions.len();
        JointState {
            positions,
            velocities: vec![0.0; n],
            accelerations: vec![0.0; n],
        }
    }

    pub fn dof(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub origin: Isometry3<f64>,
    pub axis: Unit<Vector3<f64>>,
    pub lower: f64,
    pub upper: f64,
    pub max_velocity: f64,
    pub max_acceleration: f64,
}

/// Immutable description of a revolute serial chain ending in a tray.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainModel {
    pub base: Isometry3<f64>,
    pub joints: Vec<Joint>,
    pub flange: Isometry3<f64>,
    pub tray_mount: Isometry3<f64>,
}

/// End-effector (tray frame) state. All quantities are world frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndEffectorState {
    pub position: Vector3<f64>,
    pub rotation: Rotation3<f64>,
    pub linear_velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
    pub linear_acceleration: Vector3<f64>,
    pub angular_acceleration: Vector3<f64>,
}

impl EndEffectorState {
    pub fn at_rest(position: Vector3<f64>, rotation: Rotation3<f64>) -> Self {
        EndEffectorState {
            position,
            rotation,
            linear_velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
            linear_acceleration: Vector3::zeros(),
            angular_acceleration: Vector3::zeros(),
        }
    }

    pub fn from_pose(pose: &Isometry3<f64>) -> Self {
        Self::at_rest(pose.translation.vector, pose.rotation.to_rotation_matrix())
    }

    pub fn pose(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.position),
            UnitQuaternion::from_rotation_matrix(&self.rotation),
        )
    }

    /// Angle between the tray normal and world +z, in degrees.
    pub fn tilt_deg(&self) -> f64 {
        self.rotation[(2, 2)].clamp(-1.0, 1.0).acos().to_degrees()
    }
}

/// Maximum deviation of `RᵀR` from identity.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

fn rigid_rotation(m: Matrix3<f64>, what: &str) -> Result<Rotation3<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Config(format!("{what}: non-finite rotation")));
    }
    if orthonormality_error(&m) > RIGID_TOL || (m.determinant() - 1.0).abs() > RIGID_TOL {
        return Err(Error::Config(format!(
            "{what}: rotation is not orthonormal with det +1"
        )));
    }
    Ok(Rotation3::from_matrix_unchecked(m))
}

impl ChainModel {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// The bundled Panda-like default.
    pub fn panda() -> Self {
        ChainFile::from_toml_str(include_str!("../presets/panda.toml"))
            .and_then(ChainFile::build)
            .expect("bundled chain file is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ChainFile::from_toml_str(&text)?.build()
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::Config("chain has no joints".into()));
        }
        for j in &self.joints {
            let finite = [j.lower, j.upper, j.max_velocity, j.max_acceleration]
                .iter()
                .all(|v| v.is_finite());
            if !finite || j.lower >= j.upper {
                return Err(Error::Config(format!("joint {}: invalid limits", j.name)));
            }
            if j.max_velocity <= 0.0 || j.max_acceleration <= 0.0 {
                return Err(Error::Config(format!(
                    "joint {}: velocity/acceleration limits must be positive",
                    j.name
                )));
            }
        }
        rigid_rotation(*self.tray_mount.rotation.to_rotation_matrix().matrix(), "tray_mount")?;
        Ok(())
    }

    pub fn check_dof(&self, what: &'static str, n: usize) -> Result<()> {
        if n != self.dof() {
            return Err(Error::Dimension {
                what,
                expected: self.dof(),
                got: n,
            });
        }
        Ok(())
    }

    pub fn acceleration_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.max_acceleration).collect()
    }

    /// Joint axes and origins in world frame plus the tray pose.
    fn frames(&self, q: &[f64], axes: &mut Vec<(Vector3<f64>, Vector3<f64>)>) -> Isometry3<f64> {
        axes.clear();
        let mut t = self.base;
        for (joint, &angle) in self.joints.iter().zip(q) {
            t *= joint.origin;
            axes.push((t.rotation * joint.axis.into_inner(), t.translation.vector));
            t *= UnitQuaternion::from_axis_angle(&joint.axis, angle);
        }
        t * self.flange * self.tray_mount
    }

    fn jacobian_unchecked(&self, q: &[f64]) -> (Matrix6xX<f64>, Isometry3<f64>) {
        let mut axes = Vec::with_capacity(self.dof());
        let pose = self.frames(q, &mut axes);
        let p = pose.translation.vector;
        let mut jac = Matrix6xX::zeros(self.dof());
        for (i, (z, o)) in axes.iter().enumerate() {
            let lin = z.cross(&(p - o));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(z);
        }
        (jac, pose)
    }
}

pub fn forward_kinematics(chain: &ChainModel, q: &[f64]) -> Result<Isometry3<f64>> {
    chain.check_dof("joint positions", q.len())?;
    let mut axes = Vec::with_capacity(chain.dof());
    Ok(chain.frames(q, &mut axes))
}

/// Geometric Jacobian (linear rows 0..3, angular rows 3..6), world frame,
/// referenced at the tray-frame origin.
pub fn jacobian(chain: &ChainModel, q: &[f64]) -> Result<Matrix6xX<f64>> {
    chain.check_dof("joint positions", q.len())?;
    Ok(chain.jacobian_unchecked(q).0)
}

pub fn ee_state(chain: &ChainModel, js: &JointState) -> Result<EndEffectorState> {
    chain.check_dof("joint positions", js.positions.len())?;
    chain.check_dof("joint velocities", js.velocities.len())?;
    chain.check_dof("joint accelerations", js.accelerations.len())?;

    let (jac, pose) = chain.jacobian_unchecked(&js.positions);
    let qd = DVector::from_column_slice(&js.velocities);
    let qdd = DVector::from_column_slice(&js.accelerations);
    let twist = &jac * &qd;
    let mut accel = &jac * &qdd;

    if qd.iter().any(|&v| v != 0.0) {
        // J̇·q̇ by a central difference of J along q̇.
        let shifted = |sign: f64| -> Vec<f64> {
            js.positions
                .iter()
                .zip(&js.velocities)
                .map(|(q, v)| q + sign * JDOT_STEP * v)
                .collect()
        };
        let (jp, _) = chain.jacobian_unchecked(&shifted(1.0));
        let (jm, _) = chain.jacobian_unchecked(&shifted(-1.0));
        accel += (jp - jm) * &qd / (2.0 * JDOT_STEP);
    }

    Ok(EndEffectorState {
        position: pose.translation.vector,
        rotation: pose.rotation.to_rotation_matrix(),
        linear_velocity: twist.fixed_rows::<3>(0).into_owned(),
        angular_velocity: twist.fixed_rows::<3>(3).into_owned(),
        linear_acceleration: accel.fixed_rows::<3>(0).into_owned(),
        angular_acceleration: accel.fixed_rows::<3>(3).into_owned(),
    })
}

/// Semi-implicit Euler step with velocity and position clamping.
pub fn integrate(chain: &ChainModel, js: &JointState, cmd: &[f64], dt: f64) -> Result<JointState> {
    chain.check_dof("acceleration command", cmd.len())?;
    chain.check_dof("joint positions", js.positions.len())?;
    chain.check_dof("joint velocities", js.velocities.len())?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !cmd.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite acceleration command".into()));
    }
    let n = chain.dof();
    let mut out = JointState {
        positions: Vec::with_capacity(n),
        velocities: Vec::with_capacity(n),
        accelerations: Vec::with_capacity(n),
    };
    for (i, joint) in chain.joints.iter().enumerate() {
        let mut v = (js.velocities[i] + cmd[i] * dt).clamp(-joint.max_velocity, joint.max_velocity);
        let raw = js.positions[i] + v * dt;
        let q = raw.clamp(joint.lower, joint.upper);
        if q != raw {
            v = 0.0;
        }
        out.positions.push(q);
        out.velocities.push(v);
        out.accelerations.push((v - js.velocities[i]) / dt);
    }
    Ok(out)
}

/// Integrates the tray frame directly from a commanded spatial acceleration
/// `(linear, angular)`, world frame. Rotation uses the exponential map.
pub fn floating_ee_step(
    ee: &EndEffectorState,
    linear_cmd: &Vector3<f64>,
    angular_cmd: &Vector3<f64>,
    dt: f64,
) -> Result<EndEffectorState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    ensure_finite(linear_cmd.as_slice(), "linear acceleration command")?;
    ensure_finite(angular_cmd.as_slice(), "angular acceleration command")?;

    let v = ee.linear_velocity + linear_cmd * dt;
    let w = ee.angular_velocity + angular_cmd * dt;
    let mut rotation = Rotation3::new(w * dt) * ee.rotation;
    rotation.renormalize();
    Ok(EndEffectorState {
        position: ee.position + v * dt,
        rotation,
        linear_velocity: v,
        angular_velocity: w,
        linear_acceleration: *linear_cmd,
        angular_acceleration: *angular_cmd,
    })
}

// ---------------------------------------------------------------------------
// Chain description file

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformSpec {
    pub xyz: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpy: Option<[f64; 3]>,
    /// Row-major rotation matrix; mutually exclusive with `rpy`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[[f64; 3]; 3]>,
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec {
            xyz: [0.0; 3],
            rpy: Some([0.0; 3]),
            rotation: None,
        }
    }

    fn build(&self, what: &str) -> Result<Isometry3<f64>> {
        let rot = match (&self.rpy, &self.rotation) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(format!("{what}: both rpy and rotation given")))
            }
            (Some([r, p, y]), None) => Rotation3::from_euler_angles(*r, *p, *y),
            (None, Some(m)) => rigid_rotation(
                Matrix3::from_row_slice(&[
                    m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1],
                    m[2][2],
                ]),
                what,
            )?,
            (None, None) => Rotation3::identity(),
        };
        if !self.xyz.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("{what}: non-finite translation")));
        }
        Ok(Isometry3::from_parts(
            Translation3::new(self.xyz[0], self.xyz[1], self.xyz[2]),
            UnitQuaternion::from_rotation_matrix(&rot),
        ))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub xyz: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpy: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[[f64; 3]; 3]>,
    pub axis: [f64; 3],
    pub limits: [f64; 2],
    pub velocity: f64,
    pub acceleration: f64,
}

/// Serialized form of a [`ChainModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainFile {
    pub base: TransformSpec,
    pub joints: Vec<JointSpec>,
    pub flange: TransformSpec,
    pub tray_mount: TransformSpec,
}

impl ChainFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("chain file: {e}")))
    }

    pub fn bundled_panda() -> Self {
        Self::from_toml_str(include_str!("../presets/panda.toml")).expect("bundled chain parses")
    }

    pub fn build(self) -> Result<ChainModel> {
        let joints = self
            .joints
            .iter()
            .map(|j| {
                let origin = TransformSpec {
                    xyz: j.xyz,
                    rpy: j.rpy,
                    rotation: j.rotation,
                }
                .build(&j.name)?;
                let axis = Vector3::from(j.axis);
                if !(axis.norm() > 0.0) {
                    return Err(Error::Config(format!("joint {}: zero axis", j.name)));
                }
                Ok(Joint {
                    name: j.name.clone(),
                    origin,
                    axis: Unit::new_normalize(axis),
                    lower: j.limits[0],
                    upper: j.limits[1],
                    max_velocity: j.velocity,
                    max_acceleration: j.acceleration,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let chain = ChainModel {
            base: self.base.build("base")?,
            joints,
            flange: self.flange.build("flange")?,
            tray_mount: self.tray_mount.build("tray_mount")?,
        };
        chain.validate()?;
        Ok(chain)
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix4;
    use proptest::prelude::*;

    use super::*;

    fn one_joint(offset: f64) -> ChainModel {
        ChainModel {
            base: Isometry3::identity(),
            joints: vec![Joint {
                name: "j".into(),
                origin: Isometry3::identity(),
                axis: Vector3::z_axis(),
                lower: -10.0,
                upper: 10.0,
                max_velocity: 1.0,
                max_acceleration: 100.0,
            }],
            flange: Isometry3::translation(offset, 0.0, 0.0),
            tray_mount: Isometry3::identity(),
        }
    }

    pub(crate) fn ready() -> Vec<f64> {
        vec![0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785]
    }

    fn random_q(seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ChainModel::panda()
            .joints
            .iter()
            .map(|j| rng.gen_range(j.lower..j.upper))
            .collect()
    }

    /// Independent 4×4 homogeneous chain product.
    fn naive_fk(file: &ChainFile, q: &[f64]) -> Matrix4<f64> {
        fn rpy(r: f64, p: f64, y: f64) -> Matrix3<f64> {
            let (sr, cr) = r.sin_cos();
            let (sp, cp) = p.sin_cos();
            let (sy, cy) = y.sin_cos();
            let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
            let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
            let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
            rz * ry * rx
        }
        fn homogeneous(rot: Matrix3<f64>, t: [f64; 3]) -> Matrix4<f64> {
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
            m[(0, 3)] = t[0];
            m[(1, 3)] = t[1];
            m[(2, 3)] = t[2];
            m
        }
        fn spec(t: &TransformSpec) -> Matrix4<f64> {
            let [r, p, y] = t.rpy.unwrap();
            homogeneous(rpy(r, p, y), t.xyz)
        }
        // Rodrigues rotation about a unit axis.
        fn axis_angle(a: [f64; 3], th: f64) -> Matrix3<f64> {
            let k = Matrix3::new(0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0);
            Matrix3::identity() + k * th.sin() + k * k * (1.0 - th.cos())
        }
        let mut m = spec(&file.base);
        for (j, &th) in file.joints.iter().zip(q) {
            let [r, p, y] = j.rpy.unwrap();
            m = m * homogeneous(rpy(r, p, y), j.xyz);
            m = m * homogeneous(axis_angle(j.axis, th), [0.0; 3]);
        }
        m * spec(&file.flange) * spec(&file.tray_mount)
    }

    #[test]
    fn zero_angles_identity_origins_gives_base_offset() {
        let mut chain = one_joint(0.0);
        chain.base = Isometry3::translation(0.1, 0.2, 0.3);
        let pose = forward_kinematics(&chain, &[0.0]).unwrap();
        assert_abs_diff_eq!(pose.translation.vector, Vector3::new(0.1, 0.2, 0.3));
        assert_abs_diff_eq!(pose.rotation.angle(), 0.0);
    }

    #[test]
    fn single_joint_quarter_turn() {
        let pose = forward_kinematics(&one_joint(1.0), &[FRAC_PI_2]).unwrap();
        assert_abs_diff_eq!(pose.translation.vector, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        let expected = Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        assert_abs_diff_eq!(
            *pose.rotation.to_rotation_matrix().matrix(),
            *expected.matrix(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn panda_matches_naive_matrix_chain() {
        let file = ChainFile::bundled_panda();
        let chain = file.clone().build().unwrap();
        for seed in 0..20 {
            let q = random_q(seed);
            let pose = forward_kinematics(&chain, &q).unwrap().to_homogeneous();
            let oracle = naive_fk(&file, &q);
            assert!((pose - oracle).abs().max() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn ready_pose_tray_is_level() {
        let chain = ChainModel::panda();
        let pose = forward_kinematics(&chain, &ready()).unwrap();
        let ee = EndEffectorState::from_pose(&pose);
        assert!(ee.tilt_deg() < 0.1, "tilt {}", ee.tilt_deg());
        assert!(pose.translation.z > 0.2 && pose.translation.x > 0.2);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let chain = ChainModel::panda();
        assert!(matches!(
            forward_kinematics(&chain, &[0.0; 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(jacobian(&chain, &[0.0; 8]).is_err());
    }

    #[test]
    fn single_joint_jacobian_lever_arm() {
        let chain = one_joint(1.0);
        let jac = jacobian(&chain, &[0.3]).unwrap();
        assert_abs_diff_eq!(jac[(5, 0)], 1.0);
        let js = JointState {
            positions: vec![0.3],
            velocities: vec![0.7],
            accelerations: vec![0.0],
        };
        let ee = ee_state(&chain, &js).unwrap();
        assert_abs_diff_eq!(ee.linear_velocity.norm(), 0.7, epsilon = 1e-12);
        // Uniform circular motion: centripetal acceleration ω²r, no angular acceleration.
        assert_abs_diff_eq!(ee.linear_acceleration.norm(), 0.49, epsilon = 1e-8);
        assert_abs_diff_eq!(ee.angular_acceleration.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn at_rest_has_zero_twist_and_acceleration() {
        let chain = ChainModel::panda();
        let ee = ee_state(&chain, &JointState::at_rest(random_q(3))).unwrap();
        assert_eq!(ee.linear_velocity, Vector3::zeros());
        assert_eq!(ee.angular_velocity, Vector3::zeros());
        assert_eq!(ee.linear_acceleration, Vector3::zeros());
        assert_eq!(ee.angular_acceleration, Vector3::zeros());
    }

    fn fd_jacobian_error(q: &[f64]) -> f64 {
        let chain = ChainModel::panda();
        let jac = jacobian(&chain, q).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..chain.dof() {
            let mut qp = q.to_vec();
            let mut qm = q.to_vec();
            qp[i] += h;
            qm[i] -= h;
            let tp = forward_kinematics(&chain, &qp).unwrap();
            let tm = forward_kinematics(&chain, &qm).unwrap();
            let dp = (tp.translation.vector - tm.translation.vector) / (2.0 * h);
            // Angular velocity from the skew part of Ṙ·Rᵀ.
            let rp = tp.rotation.to_rotation_matrix().into_inner();
            let rm = tm.rotation.to_rotation_matrix().into_inner();
            let r0 = forward_kinematics(&chain, q).unwrap().rotation.to_rotation_matrix();
            let s = (rp - rm) / (2.0 * h) * r0.matrix().transpose();
            let w = Vector3::new(s[(2, 1)], s[(0, 2)], s[(1, 0)]);
            for k in 0..3 {
                worst = worst.max((jac[(k, i)] - dp[k]).abs());
                worst = worst.max((jac[(k + 3, i)] - w[k]).abs());
            }
        }
        worst
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for seed in 0..10 {
            let err = fd_jacobian_error(&random_q(100 + seed));
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn jacobian_fd_property(seed in any::<u64>()) {
            prop_assert!(fd_jacobian_error(&random_q(seed)) <= 1e-6);
        }

        #[test]
        fn integrate_respects_limits(
            seed in any::<u64>(),
            cmds in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 7), 1..40),
        ) {
            let chain = ChainModel::panda();
            let mut js = JointState::at_rest(random_q(seed));
            for cmd in &cmds {
                js = integrate(&chain, &js, cmd, 0.02).unwrap();
                for (j, (q, v)) in chain.joints.iter().zip(js.positions.iter().zip(&js.velocities)) {
                    prop_assert!(*q >= j.lower && *q <= j.upper);
                    prop_assert!(v.abs() <= j.max_velocity);
                }
            }
        }
    }

    #[test]
    fn twist_equals_jacobian_times_velocity() {
        let chain = ChainModel::panda();
        let q = random_q(9);
        let qd = vec![0.3, -0.2, 0.1, 0.4, -0.5, 0.2, 0.6];
        let js = JointState {
            positions: q.clone(),
            velocities: qd.clone(),
            accelerations: vec![0.0; 7],
        };
        let ee = ee_state(&chain, &js).unwrap();
        let twist = jacobian(&chain, &q).unwrap() * DVector::from_vec(qd);
        assert_abs_diff_eq!(ee.linear_velocity, twist.fixed_rows::<3>(0).into_owned());
        assert_abs_diff_eq!(ee.angular_velocity, twist.fixed_rows::<3>(3).into_owned());
    }

    #[test]
    fn acceleration_matches_differenced_twist() {
        let chain = ChainModel::panda();
        let dt = 1e-4;
        let js0 = JointState {
            positions: ready(),
            velocities: vec![0.4, -0.3, 0.2, 0.5, -0.4, 0.3, 0.6],
            accelerations: vec![0.0; 7],
        };
        let cmd = vec![1.0, -2.0, 1.5, 0.5, 2.0, -1.0, 0.7];
        let js1 = integrate(&chain, &js0, &cmd, dt).unwrap();
        let js2 = integrate(&chain, &js1, &cmd, dt).unwrap();
        let e1 = ee_state(&chain, &js1).unwrap();
        let e2 = ee_state(&chain, &js2).unwrap();
        let fd_lin = (e2.linear_velocity - e1.linear_velocity) / dt;
        let fd_ang = (e2.angular_velocity - e1.angular_velocity) / dt;
        let rel = |a: Vector3<f64>, b: Vector3<f64>| (a - b).norm() / b.norm().max(1e-9);
        assert!(rel(fd_lin, e2.linear_acceleration) <= 1e-3);
        assert!(rel(fd_ang, e2.angular_acceleration) <= 1e-3);
    }

    #[test]
    fn integrate_examples() {
        let chain = one_joint(1.0);
        let rest = JointState::at_rest(vec![0.0]);
        assert_eq!(integrate(&chain, &rest, &[0.0], 0.02).unwrap(), rest);

        let s = integrate(&chain, &rest, &[1.0], 0.02).unwrap();
        assert_abs_diff_eq!(s.velocities[0], 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(s.positions[0], 0.0004, epsilon = 1e-15);

        let fast = JointState {
            positions: vec![0.0],
            velocities: vec![0.99],
            accelerations: vec![0.0],
        };
        let s = integrate(&chain, &fast, &[10.0], 0.02).unwrap();
        assert_eq!(s.velocities[0], 1.0);

        assert!(integrate(&chain, &rest, &[f64::NAN], 0.02).is_err());
        assert!(integrate(&chain, &rest, &[0.0], 0.0).is_err());
    }

    #[test]
    fn position_clamp_zeroes_velocity() {
        let chain = ChainModel::panda();
        let mut q = ready();
        q[0] = chain.joints[0].upper - 1e-4;
        let js = JointState {
            positions: q,
            velocities: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            accelerations: vec![0.0; 7],
        };
        let next = integrate(&chain, &js, &[0.0; 7], 0.02).unwrap();
        assert_eq!(next.positions[0], chain.joints[0].upper);
        assert_eq!(next.velocities[0], 0.0);
        assert_abs_diff_eq!(next.accelerations[0], -50.0, epsilon = 1e-9);
    }

    #[test]
    fn integration_is_bitwise_deterministic() {
        let chain = ChainModel::panda();
        let js = JointState::at_rest(ready());
        let cmd = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7];
        let a = integrate(&chain, &js, &cmd, 0.02).unwrap();
        let b = integrate(&chain, &js, &cmd, 0.02).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn floating_zero_command_keeps_pose() {
        let ee = EndEffectorState::at_rest(Vector3::new(0.1, 0.2, 0.3), Rotation3::identity());
        let next = floating_ee_step(&ee, &Vector3::zeros(), &Vector3::zeros(), 0.02).unwrap();
        assert_eq!(next, ee);
    }

    #[test]
    fn floating_constant_acceleration_displacement() {
        let a = Vector3::new(0.5, -1.0, 2.0);
        let dt = 1e-3;
        let steps = 1000;
        let mut ee = EndEffectorState::at_rest(Vector3::zeros(), Rotation3::identity());
        for _ in 0..steps {
            ee = floating_ee_step(&ee, &a, &Vector3::zeros(), dt).unwrap();
        }
        let t = dt * steps as f64;
        let exact = a * t * t / 2.0;
        // Semi-implicit Euler overshoots by a·T·dt/2.
        assert!((ee.position - exact).norm() <= a.norm() * t * dt);
    }

    #[test]
    fn floating_pure_spin_matches_closed_form() {
        let w = 0.8;
        let dt = 1e-4;
        let mut ee = EndEffectorState::at_rest(Vector3::zeros(), Rotation3::identity());
        ee.angular_velocity = Vector3::new(0.0, 0.0, w);
        for _ in 0..10_000 {
            ee = floating_ee_step(&ee, &Vector3::zeros(), &Vector3::zeros(), dt).unwrap();
        }
        let expected = Rotation3::from_axis_angle(&Vector3::z_axis(), w * 1.0);
        assert!((ee.rotation.matrix() - expected.matrix()).abs().max() <= 1e-6);
    }

    #[test]
    fn rotation_stays_orthonormal_over_long_integration() {
        let mut ee = EndEffectorState::at_rest(Vector3::zeros(), Rotation3::identity());
        ee.angular_velocity = Vector3::new(0.3, -0.7, 1.1);
        let alpha = Vector3::new(0.01, 0.02, -0.015);
        for i in 0..100_000 {
            let sign = if (i / 500) % 2 == 0 { 1.0 } else { -1.0 };
            ee = floating_ee_step(&ee, &Vector3::zeros(), &(alpha * sign), 1e-3).unwrap();
        }
        assert!(orthonormality_error(ee.rotation.matrix()) <= 1e-8);
    }

    #[test]
    fn floating_rejects_non_finite() {
        let ee = EndEffectorState::at_rest(Vector3::zeros(), Rotation3::identity());
        let bad = Vector3::new(f64::NAN, 0.0, 0.0);
        assert!(floating_ee_step(&ee, &bad, &Vector3::zeros(), 0.02).is_err());
    }

    #[test]
    fn non_rigid_tray_mount_rejected() {
        let mut file = ChainFile::bundled_panda();
        file.tray_mount = TransformSpec {
            xyz: [0.0; 3],
            rpy: None,
            rotation: Some([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.01]]),
        };
        assert!(matches!(file.build(), Err(Error::Config(_))));
    }

    #[test]
    fn inverted_limits_rejected() {
        let mut file = ChainFile::bundled_panda();
        file.joints[2].limits = [1.0, -1.0];
        assert!(file.build().is_err());
    }
}
