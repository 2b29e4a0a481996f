//! Measurement-group collection and ground-truth generation.
//!
//! Ground truth comes from kinematic bookkeeping rather than measurement:
//! within a group the end-effector rotation and the tool grasp are held
//! fixed, so the tool displacement equals the end-effector displacement and
//! the tool-to-target distance of every data point is the difference between
//! its end-effector position and the benchmark's (the benchmark pose has the
//! tip exactly on the screw center). Between groups the screw position, the
//! grasp, and a bounded rotational error are re-randomized.

mod io;

pub use io::{read_dataset, write_dataset, DatasetFile, FORMAT_VERSION};

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::kinematics::Pose;
use crate::mph::{EncodedTarget, HeadBank, MphError};
use crate::scene::{
    features_in_view, render_observation, Observation, Rig, SceneError, SceneState,
};

/// One training observation with its ground-truth distance vector
/// (tool position minus aligned benchmark position, torso frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub observation: Observation,
    pub d_r: Vector3<f64>,
    pub group_id: u32,
}

/// The aligned reference configuration of a group.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub end_effector_pose: Pose,
    pub observation: Observation,
}

/// One displaced configuration within a group, before ground-truth
/// extraction.
#[derive(Debug, Clone)]
pub struct PointRecord {
    pub end_effector_pose: Pose,
    pub observation: Observation,
}

/// Per-group randomization outcome.
#[derive(Debug, Clone)]
pub struct GroupMeta {
    pub screw_pose: Pose,
    pub grasp_transform: Pose,
    /// Injected rotational error between tool and target (roll/pitch/yaw,
    /// radians), simulating imperfect pre-alignment.
    pub rotational_error: Vector3<f64>,
}

/// One benchmark paired with its associated data points.
#[derive(Debug, Clone)]
pub struct MeasurementGroup {
    pub id: u32,
    pub benchmark: Benchmark,
    pub points: Vec<PointRecord>,
    pub meta: GroupMeta,
}

#[derive(Debug)]
pub enum DatasetError {
    /// The end-effector rotation differs across the group, breaking the
    /// displacement-equivalence premise behind the ground truth.
    RotationMismatch { point: usize },
    /// Could not keep both features in both views within the retry budget.
    ViewRetriesExhausted,
    Scene(SceneError),
    Mph(MphError),
    Io(std::io::Error),
    Format(String),
}

impl std::fmt::Display for DatasetError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::RotationMismatch { point } => {
                write!(f, "point {point} breaks the fixed-rotation group invariant")
            }
            Self::ViewRetriesExhausted => write!(f, "could not keep features in view"),
            Self::Scene(e) => write!(f, "scene error: {e}"),
            Self::Mph(e) => write!(f, "encoding error: {e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Format(msg) => write!(f, "dataset format error: {msg}"),
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<SceneError> for DatasetError {
    fn from(e: SceneError) -> Self {
        Self::Scene(e)
    }
}

impl From<MphError> for DatasetError {
    fn from(e: MphError) -> Self {
        Self::Mph(e)
    }
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

fn random_unit_vector(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0f64),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn sample_head_angles(rig: &Rig, rng: &mut ChaCha12Rng) -> (f64, f64) {
    let r = rig.sampling.head_angle_range;
    (rng.random_range(-r..r), rng.random_range(-r..r))
}

/// Collects one measurement group: an exactly aligned benchmark plus
/// `n_points` randomly displaced data points sharing the benchmark's
/// end-effector rotation, each with freshly randomized head angles.
pub fn collect_group(
    rig: &Rig,
    bank: &HeadBank,
    n_points: usize,
    group_id: u32,
    rng: &mut ChaCha12Rng,
) -> Result<MeasurementGroup, DatasetError> {
    let max_offset = rig.sampling.max_offset.min(bank.range_max() * 0.999);

    // Between-group variation: screw placement, grasp, rotational error.
    let s = &rig.sampling;
    let screw_pos = Vector3::new(
        rng.random_range(s.screw_min.x..s.screw_max.x),
        rng.random_range(s.screw_min.y..s.screw_max.y),
        rng.random_range(s.screw_min.z..s.screw_max.z),
    );
    let screw_pose = Pose::from_rpy(0.0, 0.0, rng.random_range(0.0..std::f64::consts::TAU))
        .compose(&Pose::identity());
    let screw_pose = Pose::new(screw_pose.rotation, screw_pos);

    let grasp_offset = s.grasp_center
        + Vector3::new(
            rng.random_range(-s.grasp_jitter..s.grasp_jitter),
            rng.random_range(-s.grasp_jitter..s.grasp_jitter),
            rng.random_range(-s.grasp_jitter..s.grasp_jitter),
        );
    let grasp_transform = Pose::from_translation(grasp_offset);

    let b = s.rot_error_bound;
    let rot_err = Vector3::new(
        rng.random_range(-b..b),
        rng.random_range(-b..b),
        rng.random_range(-b..b),
    );
    let nominal_rot = crate::kinematics::forward_kinematics(&rig.chain, &rig.nominal_q)
        .expect("nominal posture matches the chain")
        .rotation;
    let group_rotation = nominal_rot * Pose::from_rpy(rot_err.x, rot_err.y, rot_err.z).rotation;

    // Benchmark: tool tip exactly on the screw center by construction.
    let bench_ee_pos = screw_pose.translation - group_rotation * grasp_transform.translation;
    let bench_pose = Pose::new(group_rotation, bench_ee_pos);

    let mut bench_state = SceneState {
        end_effector_pose: bench_pose.clone(),
        grasp_transform: grasp_transform.clone(),
        screw_pose: screw_pose.clone(),
        head_yaw: 0.0,
        head_pitch: 0.0,
    };
    let mut benchmark = None;
    for _ in 0..s.max_view_retries {
        let (yaw, pitch) = sample_head_angles(rig, rng);
        bench_state.head_yaw = yaw;
        bench_state.head_pitch = pitch;
        if features_in_view(&bench_state, &rig.cameras, &rig.render) {
            let obs =
                render_observation(&bench_state, &rig.cameras, &rig.render, &rig.noise, rng)?;
            benchmark = Some(Benchmark {
                end_effector_pose: bench_pose.clone(),
                observation: obs,
            });
            break;
        }
    }
    let benchmark = benchmark.ok_or(DatasetError::ViewRetriesExhausted)?;

    // Data points: random translations of the end-effector, rotation fixed.
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let mut placed = false;
        for _ in 0..s.max_view_retries {
            let offset = random_unit_vector(rng) * rng.random_range(0.0..max_offset);
            let (yaw, pitch) = sample_head_angles(rig, rng);
            let state = SceneState {
                end_effector_pose: Pose::new(group_rotation, bench_ee_pos + offset),
                grasp_transform: grasp_transform.clone(),
                screw_pose: screw_pose.clone(),
                head_yaw: yaw,
                head_pitch: pitch,
            };
            if !features_in_view(&state, &rig.cameras, &rig.render) {
                continue;
            }
            let obs = render_observation(&state, &rig.cameras, &rig.render, &rig.noise, rng)?;
            points.push(PointRecord {
                end_effector_pose: state.end_effector_pose,
                observation: obs,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(DatasetError::ViewRetriesExhausted);
        }
    }

    Ok(MeasurementGroup {
        id: group_id,
        benchmark,
        points,
        meta: GroupMeta {
            screw_pose,
            grasp_transform,
            rotational_error: rot_err,
        },
    })
}

const ROTATION_TOL: f64 = 1e-9;

/// Benchmark subtraction: `d_r = p_ee(point) − p_ee(benchmark)` for every
/// point, valid because rotations are fixed within the group. A rotation
/// mismatch voids the equivalence premise and is rejected.
pub fn compute_ground_truth(group: &MeasurementGroup) -> Result<Vec<Sample>, DatasetError> {
    let bench_rot = &group.benchmark.end_effector_pose.rotation;
    let bench_pos = group.benchmark.end_effector_pose.translation;
    group
        .points
        .iter()
        .enumerate()
        .map(|(i, point)| {
            if (point.end_effector_pose.rotation - bench_rot).norm() > ROTATION_TOL {
                return Err(DatasetError::RotationMismatch { point: i });
            }
            Ok(Sample {
                observation: point.observation.clone(),
                d_r: point.end_effector_pose.translation - bench_pos,
                group_id: group.id,
            })
        })
        .collect()
}

/// Two independent routes to the tool displacement between a pair of
/// end-effector poses, for checking the displacement-equivalence premise.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    /// `p_tb − p_ta` via direct composition of the tool poses.
    pub tool_displacement: Vector3<f64>,
    /// `p_eb − p_ea`.
    pub ee_displacement: Vector3<f64>,
    /// `R_de·p_ta + p_de − p_ta`: the decomposed route through the relative
    /// transform `T_de = T_eb ∘ T_ea⁻¹`.
    pub decomposed_displacement: Vector3<f64>,
    /// Whether the two end-effector rotations agree (within 1e-9).
    pub rotations_equal: bool,
}

impl EquivalenceReport {
    /// ‖tool displacement − ee displacement‖; zero exactly when rotations
    /// are equal.
    pub fn displacement_difference(&self) -> f64 {
        (self.tool_displacement - self.ee_displacement).norm()
    }
}

/// Computes tool and end-effector displacements independently for a pose
/// pair sharing the grasp transform. Diagnostic only; never fails.
pub fn verify_equivalence(grasp: &Pose, pose_a: &Pose, pose_b: &Pose) -> EquivalenceReport {
    let tool_a = pose_a.compose(grasp);
    let tool_b = pose_b.compose(grasp);
    let tool_displacement = tool_b.translation - tool_a.translation;
    let ee_displacement = pose_b.translation - pose_a.translation;

    let t_de = pose_b.compose(&pose_a.inverse());
    let decomposed_displacement =
        t_de.rotation * tool_a.translation + t_de.translation - tool_a.translation;

    EquivalenceReport {
        tool_displacement,
        ee_displacement,
        decomposed_displacement,
        rotations_equal: (pose_a.rotation - pose_b.rotation).norm() <= ROTATION_TOL,
    }
}

/// Per-head training target: `d_o(h) = clip(d_r/μ_h, −3, 3)` elementwise,
/// with a one-hot confidence row at the head whose interval contains ‖d_r‖.
pub fn encode_targets(d_r: &Vector3<f64>, bank: &HeadBank) -> Result<EncodedTarget, MphError> {
    let norm = d_r.norm();
    if norm >= bank.range_max() {
        return Err(MphError::OutOfRange {
            norm,
            max: bank.range_max(),
        });
    }
    let selected = bank.head_for(norm)?;
    Ok(EncodedTarget {
        distances: bank
            .heads
            .iter()
            .map(|h| (d_r / h.mu).map(|v| v.clamp(-3.0, 3.0)))
            .collect(),
        confidence: (0..bank.len())
            .map(|i| if i == selected { 1.0 } else { 0.0 })
            .collect(),
    })
}
