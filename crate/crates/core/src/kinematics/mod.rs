//! Serial-chain forward kinematics, geometric Jacobians, and bound-constrained
//! inverse kinematics for a revolute-joint arm.
//!
//! All poses are expressed in the base (torso) frame. The end-effector pose of
//! a chain is the ordered product of per-joint factors `origin_i * R(axis_i, q_i)`
//! followed by a fixed end-effector offset.

mod ik;

pub use ik::{solve_ik, IkParams, IkResult, IkTarget};

use nalgebra::{Matrix3, Matrix4, Unit, Vector3};

/// A rigid transform: orthonormal rotation plus translation, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Self {
            rotation: nalgebra::Rotation3::from_axis_angle(axis, angle).into_inner(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation from roll/pitch/yaw (x, y, z intrinsic order), no translation.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            rotation: nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw).into_inner(),
            translation: Vector3::zeros(),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Deviation of the rotation block from a proper rotation:
    /// `max(‖RᵀR − I‖_max, |det R − 1|)`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let gram_err = gram.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        gram_err.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// One revolute joint: a fixed parent-to-joint transform followed by a
/// rotation about `axis` in the joint frame.
#[derive(Debug, Clone)]
pub struct Joint {
    pub origin: Pose,
    pub axis: Unit<Vector3<f64>>,
}

/// Per-joint angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    pub angles: Vec<f64>,
}

impl JointConfig {
    pub fn new(angles: Vec<f64>) -> Self {
        Self { angles }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            angles: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }
}

/// An ordered serial chain of revolute joints with per-joint angle limits
/// and an optional fixed transform from the last joint frame to the
/// end-effector frame.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    pub joints: Vec<Joint>,
    pub lower_bounds: Vec<f64>,
    pub upper_bounds: Vec<f64>,
    pub ee_offset: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KinematicsError {
    DimensionMismatch { expected: usize, got: usize },
    InvalidBounds { joint: usize },
    SeedOutOfBounds { joint: usize },
}

impl std::fmt::Display for KinematicsError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::DimensionMismatch { expected, got } => {
                write!(f, "expected {expected} joint angles, got {got}")
            }
            Self::InvalidBounds { joint } => {
                write!(f, "joint {joint}: lower bound must be below upper bound")
            }
            Self::SeedOutOfBounds { joint } => {
                write!(f, "seed angle for joint {joint} violates its bounds")
            }
        }
    }
}

impl std::error::Error for KinematicsError {}

impl KinematicChain {
    /// Builds a chain, checking that bounds are elementwise ordered.
    /// Axis unit norm is guaranteed by the `Unit` wrapper.
    pub fn new(
        joints: Vec<Joint>,
        lower_bounds: Vec<f64>,
        upper_bounds: Vec<f64>,
        ee_offset: Pose,
    ) -> Result<Self, KinematicsError> {
        if joints.len() != lower_bounds.len() || joints.len() != upper_bounds.len() {
            return Err(KinematicsError::DimensionMismatch {
                expected: joints.len(),
                got: lower_bounds.len().min(upper_bounds.len()),
            });
        }
        for (i, (lo, hi)) in lower_bounds.iter().zip(&upper_bounds).enumerate() {
            if !(lo < hi) {
                return Err(KinematicsError::InvalidBounds { joint: i });
            }
        }
        Ok(Self {
            joints,
            lower_bounds,
            upper_bounds,
            ee_offset,
        })
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn contains(&self, q: &JointConfig) -> bool {
        q.len() == self.dof()
            && q.angles
                .iter()
                .zip(self.lower_bounds.iter().zip(&self.upper_bounds))
                .all(|(a, (lo, hi))| *a >= *lo && *a <= *hi)
    }

    pub fn clamp(&self, q: &JointConfig) -> JointConfig {
        JointConfig::new(
            q.angles
                .iter()
                .zip(self.lower_bounds.iter().zip(&self.upper_bounds))
                .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
                .collect(),
        )
    }

    /// Concatenates two chains; `self`'s end-effector offset is folded into
    /// the first joint origin of `other` so that
    /// `fk(a ⊕ b, [qa, qb]) = fk(a, qa) ∘ fk(b, qb)` exactly.
    pub fn concat(&self, other: &KinematicChain) -> KinematicChain {
        let mut joints = self.joints.clone();
        for (i, j) in other.joints.iter().enumerate() {
            let mut j = j.clone();
            if i == 0 {
                j.origin = self.ee_offset.compose(&j.origin);
            }
            joints.push(j);
        }
        let mut lower = self.lower_bounds.clone();
        lower.extend_from_slice(&other.lower_bounds);
        let mut upper = self.upper_bounds.clone();
        upper.extend_from_slice(&other.upper_bounds);
        KinematicChain {
            joints,
            lower_bounds: lower,
            upper_bounds: upper,
            ee_offset: other.ee_offset.clone(),
        }
    }
}

/// End-effector pose in the base frame: exact composition of joint factors.
pub fn forward_kinematics(
    chain: &KinematicChain,
    q: &JointConfig,
) -> Result<Pose, KinematicsError> {
    if q.len() != chain.dof() {
        return Err(KinematicsError::DimensionMismatch {
            expected: chain.dof(),
            got: q.len(),
        });
    }
    let mut acc = Pose::identity();
    for (joint, &angle) in chain.joints.iter().zip(&q.angles) {
        acc = acc
            .compose(&joint.origin)
            .compose(&Pose::from_axis_angle(&joint.axis, angle));
    }
    Ok(acc.compose(&chain.ee_offset))
}

/// Geometric Jacobian (6×n): rows 0..3 are the linear velocity map,
/// rows 3..6 the angular velocity map, both in the base frame.
pub fn jacobian(
    chain: &KinematicChain,
    q: &JointConfig,
) -> Result<nalgebra::DMatrix<f64>, KinematicsError> {
    if q.len() != chain.dof() {
        return Err(KinematicsError::DimensionMismatch {
            expected: chain.dof(),
            got: q.len(),
        });
    }
    let n = chain.dof();
    let mut jac = nalgebra::DMatrix::<f64>::zeros(6, n);

    // Walk the chain once, recording each joint's world axis and position.
    let mut acc = Pose::identity();
    let mut axes = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for (joint, &angle) in chain.joints.iter().zip(&q.angles) {
        let pre = acc.compose(&joint.origin);
        axes.push(pre.rotation * joint.axis.into_inner());
        positions.push(pre.translation);
        acc = pre.compose(&Pose::from_axis_angle(&joint.axis, angle));
    }
    let p_ee = acc.compose(&chain.ee_offset).translation;

    for i in 0..n {
        let linear = axes[i].cross(&(p_ee - positions[i]));
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&linear);
        jac.fixed_view_mut::<3, 1>(3, i).copy_from(&axes[i]);
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn z_axis() -> Unit<Vector3<f64>> {
        Unit::new_normalize(Vector3::z())
    }

    pub(crate) fn random_chain(rng: &mut ChaCha12Rng, n: usize) -> KinematicChain {
        let joints = (0..n)
            .map(|_| {
                let axis = Unit::new_normalize(Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0f64),
                ));
                let origin = Pose::from_rpy(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .compose(&Pose::from_translation(Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                )));
                Joint { origin, axis }
            })
            .collect();
        KinematicChain::new(
            joints,
            vec![-3.0; n],
            vec![3.0; n],
            Pose::from_translation(Vector3::new(0.05, 0.0, 0.02)),
        )
        .unwrap()
    }

    pub(crate) fn random_config(rng: &mut ChaCha12Rng, chain: &KinematicChain) -> JointConfig {
        JointConfig::new(
            chain
                .lower_bounds
                .iter()
                .zip(&chain.upper_bounds)
                .map(|(lo, hi)| rng.random_range(*lo..*hi))
                .collect(),
        )
    }

    /// Independent oracle: chain product of explicit 4×4 homogeneous matrices.
    fn fk_matrix_oracle(chain: &KinematicChain, q: &JointConfig) -> Matrix4<f64> {
        let mut acc: Matrix4<f64> = Matrix4::identity();
        for (joint, &angle) in chain.joints.iter().zip(&q.angles) {
            acc *= joint.origin.to_homogeneous();
            let rot = nalgebra::Rotation3::from_axis_angle(&joint.axis, angle);
            acc *= rot.to_homogeneous();
        }
        acc * chain.ee_offset.to_homogeneous()
    }

    #[test]
    fn fk_identity_chain_is_identity() {
        let n = 4;
        let joints = (0..n)
            .map(|_| Joint {
                origin: Pose::identity(),
                axis: z_axis(),
            })
            .collect();
        let chain =
            KinematicChain::new(joints, vec![-3.0; n], vec![3.0; n], Pose::identity()).unwrap();
        let pose = forward_kinematics(&chain, &JointConfig::zeros(n)).unwrap();
        assert_relative_eq!(pose.rotation, Matrix3::identity(), epsilon = 1e-15);
        assert_relative_eq!(pose.translation, Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn fk_single_z_joint_quarter_turn() {
        let chain = KinematicChain::new(
            vec![Joint {
                origin: Pose::identity(),
                axis: z_axis(),
            }],
            vec![-3.2],
            vec![3.2],
            Pose::from_translation(Vector3::new(0.3, 0.0, 0.0)),
        )
        .unwrap();
        let pose =
            forward_kinematics(&chain, &JointConfig::new(vec![std::f64::consts::FRAC_PI_2]))
                .unwrap();
        assert_relative_eq!(
            pose.translation,
            Vector3::new(0.0, 0.3, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn fk_matches_homogeneous_matrix_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let chain = random_chain(&mut rng, 7);
            let q = random_config(&mut rng, &chain);
            let pose = forward_kinematics(&chain, &q).unwrap();
            let oracle = fk_matrix_oracle(&chain, &q);
            let got = pose.to_homogeneous();
            for (a, b) in got.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12, "fk mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fk_dimension_mismatch_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let chain = random_chain(&mut rng, 3);
        let err = forward_kinematics(&chain, &JointConfig::zeros(2)).unwrap_err();
        assert_eq!(
            err,
            KinematicsError::DimensionMismatch {
                expected: 3,
                got: 2
            }
        );
    }

    #[test]
    fn fk_concatenation_composes() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..10 {
            let a = random_chain(&mut rng, 3);
            let b = random_chain(&mut rng, 4);
            let qa = random_config(&mut rng, &a);
            let qb = random_config(&mut rng, &b);
            let mut q = qa.angles.clone();
            q.extend_from_slice(&qb.angles);

            let combined = forward_kinematics(&a.concat(&b), &JointConfig::new(q)).unwrap();
            let split = forward_kinematics(&a, &qa)
                .unwrap()
                .compose(&forward_kinematics(&b, &qb).unwrap());
            assert_relative_eq!(combined.rotation, split.rotation, epsilon = 1e-12);
            assert_relative_eq!(combined.translation, split.translation, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_single_z_joint() {
        let chain = KinematicChain::new(
            vec![Joint {
                origin: Pose::identity(),
                axis: z_axis(),
            }],
            vec![-3.2],
            vec![3.2],
            Pose::from_translation(Vector3::new(0.3, 0.0, 0.0)),
        )
        .unwrap();
        let jac = jacobian(&chain, &JointConfig::zeros(1)).unwrap();
        assert_relative_eq!(jac[(0, 0)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(jac[(1, 0)], 0.3, epsilon = 1e-15);
        assert_relative_eq!(jac[(2, 0)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(jac[(3, 0)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(jac[(4, 0)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(jac[(5, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_zero_length_chain_has_zero_linear_block() {
        let n = 3;
        let joints = (0..n)
            .map(|_| Joint {
                origin: Pose::identity(),
                axis: z_axis(),
            })
            .collect();
        let chain =
            KinematicChain::new(joints, vec![-3.0; n], vec![3.0; n], Pose::identity()).unwrap();
        let jac = jacobian(&chain, &JointConfig::new(vec![0.3, -0.2, 0.9])).unwrap();
        for c in 0..n {
            for r in 0..3 {
                assert!(jac[(r, c)].abs() < 1e-15);
            }
        }
    }

    /// Central finite differences of `forward_kinematics`, position and
    /// orientation, used as the independent Jacobian oracle.
    pub(crate) fn jacobian_fd(
        chain: &KinematicChain,
        q: &JointConfig,
        step: f64,
    ) -> nalgebra::DMatrix<f64> {
        let n = chain.dof();
        let mut jac = nalgebra::DMatrix::<f64>::zeros(6, n);
        for i in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp.angles[i] += step;
            qm.angles[i] -= step;
            let fp = forward_kinematics(chain, &qp).unwrap();
            let fm = forward_kinematics(chain, &qm).unwrap();
            let dlin = (fp.translation - fm.translation) / (2.0 * step);
            // For the tiny rotation ΔR ≈ I + [ω]×·2h, read ω off the skew
            // part directly; the axis-angle (acos) route loses precision here.
            let drot = fp.rotation * fm.rotation.transpose();
            let skew = (drot - drot.transpose()) / 2.0;
            let dang = Vector3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]) / (2.0 * step);
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&dlin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&dang);
        }
        jac
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        for _ in 0..100 {
            let chain = random_chain(&mut rng, 5);
            let q = random_config(&mut rng, &chain);
            let analytic = jacobian(&chain, &q).unwrap();
            let numeric = jacobian_fd(&chain, &q, 1e-6);
            let scale = analytic.norm().max(1.0);
            assert!(
                (&analytic - &numeric).norm() / scale < 1e-5,
                "jacobian fd mismatch: {}",
                (&analytic - &numeric).norm() / scale
            );
        }
    }

    #[test]
    fn pose_composition_stays_orthonormal() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut acc = Pose::identity();
        for _ in 0..500 {
            let p = Pose::from_rpy(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            )
            .compose(&Pose::from_translation(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )));
            acc = acc.compose(&p);
        }
        assert!(acc.orthonormality_error() < 1e-9);
        let roundtrip = acc.compose(&acc.inverse());
        assert!(roundtrip.translation.norm() < 1e-9);
        assert!((roundtrip.rotation - Matrix3::identity()).norm() < 1e-9);
    }
}
