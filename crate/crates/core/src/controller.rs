//! Dual-frequency servo loop: a slow estimate tick renders the cameras and
//! turns the distance estimate into a target position; a fast control tick
//! converts the position error into a proportional velocity, integrates it
//! to an intermediate target, and solves inverse kinematics for the joint
//! command. Time is logical: the two rates are kept as an exact integer
//! ratio of simulation ticks.
//!
//! End-effector orientation is held constant for the whole trial, matching
//! the fixed-rotation premise the ground-truth equivalence rests on, so the
//! IK runs in full-pose mode with the start rotation as its target.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::kinematics::{
    forward_kinematics, solve_ik, IkParams, IkTarget, JointConfig, KinematicsError, Pose,
};
use crate::model::{forward, ModelConfig, NetworkParams};
use crate::mph::{select_and_decode, HeadBank};
use crate::scene::{render_observation, Rig, SceneState};

/// Distance estimator driving the servo loop.
pub enum Estimator {
    /// Ground truth from the simulator.
    Oracle,
    /// Ground truth plus isotropic Gaussian noise (meters).
    NoisyOracle { sigma: f64 },
    /// The trained network.
    Learned {
        params: Box<NetworkParams>,
        model: ModelConfig,
        bank: HeadBank,
    },
}

#[derive(Debug, Clone)]
pub struct ServoConfig {
    /// Estimate-tick rate (Hz of simulated time).
    pub estimate_rate: f64,
    /// Control-tick rate; must be an integer multiple of `estimate_rate`.
    pub control_rate: f64,
    /// Proportional coefficient (1/s).
    pub kp: f64,
    /// Success radius on the final true distance (meters).
    pub success_tolerance: f64,
    /// Trial cap in simulated seconds.
    pub max_duration: f64,
    /// Squared-error tolerance handed to the per-tick IK solve.
    pub ik_tol: f64,
    pub ik_max_iter: usize,
    /// Convergence dwell: the loop stops once the estimate norm stays below
    /// `success_tolerance / 2` and the end-effector path over this window is
    /// shorter than `dwell_path` meters.
    pub dwell_time: f64,
    pub dwell_path: f64,
    /// Range of initial tool-target distance norms to sample from.
    pub start_range: (f64, f64),
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            estimate_rate: 10.0,
            control_rate: 50.0,
            kp: 2.0,
            success_tolerance: 0.002,
            max_duration: 6.0,
            ik_tol: 1e-16,
            ik_max_iter: 100,
            dwell_time: 0.5,
            dwell_path: 1e-4,
            start_range: (0.064, 0.1275),
        }
    }
}

#[derive(Debug)]
pub enum ControllerError {
    InvalidConfig(String),
    Kinematics(KinematicsError),
    /// No in-view, reachable start state found within the retry budget.
    StartNotFound,
    Model(crate::model::ModelError),
}

impl std::fmt::Display for ControllerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::InvalidConfig(msg) => write!(f, "invalid servo config: {msg}"),
            Self::Kinematics(e) => write!(f, "kinematics error: {e}"),
            Self::StartNotFound => write!(f, "could not sample a feasible start state"),
            Self::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl std::error::Error for ControllerError {}

impl From<KinematicsError> for ControllerError {
    fn from(e: KinematicsError) -> Self {
        Self::Kinematics(e)
    }
}

impl From<crate::model::ModelError> for ControllerError {
    fn from(e: crate::model::ModelError) -> Self {
        Self::Model(e)
    }
}

impl ServoConfig {
    /// Checks the config and returns the control-to-estimate tick ratio.
    pub fn validate(&self) -> Result<usize, ControllerError> {
        if !(self.kp > 0.0) {
            return Err(ControllerError::InvalidConfig("kp must be positive".into()));
        }
        if !(self.estimate_rate > 0.0 && self.control_rate > 0.0) {
            return Err(ControllerError::InvalidConfig(
                "rates must be positive".into(),
            ));
        }
        let ratio = self.control_rate / self.estimate_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(ControllerError::InvalidConfig(
                "control_rate must be an integer multiple of estimate_rate".into(),
            ));
        }
        Ok(ratio.round() as usize)
    }
}

/// Slow-loop update: the estimate is the tool-minus-target distance, so the
/// end-effector must move by its negation.
pub fn update_target(current_ee_position: Vector3<f64>, estimate: Vector3<f64>) -> Vector3<f64> {
    current_ee_position - estimate
}

/// Fast-loop output of one control tick.
#[derive(Debug, Clone)]
pub struct ControlTick {
    pub velocity: Vector3<f64>,
    pub intermediate: Vector3<f64>,
    pub command: JointConfig,
    pub ik_residual: f64,
    pub ik_converged: bool,
}

/// One fast-loop step: proportional velocity toward the target, integration
/// to an intermediate position, and a full-pose IK solve warm-started from
/// the current joints. On IK failure the previous command is held.
pub fn control_tick(
    rig: &Rig,
    current_q: &JointConfig,
    current_pos: Vector3<f64>,
    held_rotation: &nalgebra::Matrix3<f64>,
    target: Vector3<f64>,
    cfg: &ServoConfig,
) -> Result<ControlTick, ControllerError> {
    let dt = 1.0 / cfg.control_rate;
    let velocity = (target - current_pos) * cfg.kp;
    let intermediate = current_pos + velocity * dt;
    let result = solve_ik(
        &rig.chain,
        &IkTarget::Pose {
            pose: Pose::new(*held_rotation, intermediate),
            rotation_weight: 1.0,
        },
        current_q,
        &IkParams {
            tol: cfg.ik_tol,
            max_iter: cfg.ik_max_iter,
        },
    )?;
    let command = if result.converged || result.residual < 1e-6 {
        result.q
    } else {
        current_q.clone()
    };
    Ok(ControlTick {
        velocity,
        intermediate,
        command,
        ik_residual: result.residual,
        ik_converged: result.converged,
    })
}

/// Per-tick log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    /// True tool-minus-target distance vector.
    pub true_distance: Vector3<f64>,
    /// Estimate produced this tick (estimate ticks only).
    pub estimate: Option<Vector3<f64>>,
    pub selected_head: Option<usize>,
    pub commanded_velocity: Vector3<f64>,
    pub commanded_position: Vector3<f64>,
    pub joints: JointConfig,
    pub ik_residual: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ServoTrace {
    pub records: Vec<TickRecord>,
    pub ik_failures: usize,
}

/// Result of one servo trial.
#[derive(Debug)]
pub struct ServoOutcome {
    pub trace: ServoTrace,
    pub success: bool,
    /// True tool-target distance at the end of the trial (meters).
    pub final_error: f64,
    /// Populated when the trial ended abnormally (features out of view).
    pub failure: Option<String>,
}

pub struct StartState {
    pub state: SceneState,
    pub q: JointConfig,
}

/// Samples a start: randomized screw/grasp/rotation as in dataset
/// collection, with the initial tool-target distance in `start_range` and
/// all features visible.
pub fn sample_start(
    rig: &Rig,
    cfg: &ServoConfig,
    rng: &mut ChaCha12Rng,
) -> Result<StartState, ControllerError> {
    let s = &rig.sampling;
    let nominal_rot = forward_kinematics(&rig.chain, &rig.nominal_q)?.rotation;
    for _ in 0..s.max_view_retries {
        let screw_pos = Vector3::new(
            rng.random_range(s.screw_min.x..s.screw_max.x),
            rng.random_range(s.screw_min.y..s.screw_max.y),
            rng.random_range(s.screw_min.z..s.screw_max.z),
        );
        let screw_pose = Pose::new(
            Pose::from_rpy(0.0, 0.0, rng.random_range(0.0..std::f64::consts::TAU)).rotation,
            screw_pos,
        );
        let grasp = Pose::from_translation(
            s.grasp_center
                + Vector3::new(
                    rng.random_range(-s.grasp_jitter..s.grasp_jitter),
                    rng.random_range(-s.grasp_jitter..s.grasp_jitter),
                    rng.random_range(-s.grasp_jitter..s.grasp_jitter),
                ),
        );
        let b = s.rot_error_bound;
        let rotation = nominal_rot
            * Pose::from_rpy(
                rng.random_range(-b..b),
                rng.random_range(-b..b),
                rng.random_range(-b..b),
            )
            .rotation;

        let offset_dir = {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0f64),
            );
            if v.norm() < 1e-3 {
                continue;
            }
            v / v.norm()
        };
        let offset = offset_dir * rng.random_range(cfg.start_range.0..cfg.start_range.1);
        let aligned_pos = screw_pos - rotation * grasp.translation;
        let start_pos = aligned_pos + offset;

        let r = s.head_angle_range;
        let state = SceneState {
            end_effector_pose: Pose::new(rotation, start_pos),
            grasp_transform: grasp,
            screw_pose,
            head_yaw: rng.random_range(-r..r),
            head_pitch: rng.random_range(-r..r),
        };
        if !crate::scene::features_in_view(&state, &rig.cameras, &rig.render) {
            continue;
        }
        let ik = solve_ik(
            &rig.chain,
            &IkTarget::Pose {
                pose: state.end_effector_pose.clone(),
                rotation_weight: 1.0,
            },
            &rig.nominal_q,
            &IkParams {
                tol: cfg.ik_tol,
                max_iter: 300,
            },
        )?;
        if ik.residual > 1e-7 {
            continue;
        }
        return Ok(StartState { state, q: ik.q });
    }
    Err(ControllerError::StartNotFound)
}

fn estimate_distance(
    estimator: &Estimator,
    state: &SceneState,
    rig: &Rig,
    true_distance: Vector3<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<Option<(Vector3<f64>, Option<usize>)>, ControllerError> {
    // Rendering happens on every estimate tick regardless of the estimator:
    // it is the loop's camera exposure and enforces the field-of-view
    // failure mode uniformly.
    let obs = match render_observation(state, &rig.cameras, &rig.render, &rig.noise, rng) {
        Ok(obs) => obs,
        Err(crate::scene::SceneError::OutOfView { .. })
        | Err(crate::scene::SceneError::BehindCamera) => return Ok(None),
        Err(e) => {
            return Err(ControllerError::InvalidConfig(format!(
                "render failed: {e}"
            )))
        }
    };
    Ok(Some(match estimator {
        Estimator::Oracle => (true_distance, None),
        Estimator::NoisyOracle { sigma } => {
            let normal = Normal::new(0.0, *sigma).expect("sigma >= 0");
            (
                true_distance
                    + Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)),
                None,
            )
        }
        Estimator::Learned {
            params,
            model,
            bank,
        } => {
            let pred = forward(&obs, params, model)?;
            let (head, decoded) = select_and_decode(&pred, bank);
            (decoded, Some(head))
        }
    }))
}

/// Runs one closed-loop trial against the simulator. Deterministic for a
/// given rng state.
pub fn run_servo(
    rig: &Rig,
    estimator: &Estimator,
    cfg: &ServoConfig,
    rng: &mut ChaCha12Rng,
) -> Result<ServoOutcome, ControllerError> {
    let ratio = cfg.validate()?;
    let start = sample_start(rig, cfg, rng)?;
    run_servo_from(rig, estimator, cfg, start.state, start.q, ratio, rng)
}

/// Closed loop from an explicit start state (used by scripted scenes).
pub fn run_servo_from(
    rig: &Rig,
    estimator: &Estimator,
    cfg: &ServoConfig,
    mut state: SceneState,
    mut q: JointConfig,
    ratio: usize,
    rng: &mut ChaCha12Rng,
) -> Result<ServoOutcome, ControllerError> {
    let dt = 1.0 / cfg.control_rate;
    let max_ticks = (cfg.max_duration * cfg.control_rate).ceil() as usize;
    let dwell_ticks = (cfg.dwell_time * cfg.control_rate).ceil() as usize;
    let held_rotation = state.end_effector_pose.rotation;

    let mut trace = ServoTrace::default();
    let mut target: Option<Vector3<f64>> = None;
    let mut latest_estimate_norm = f64::INFINITY;
    let mut recent_steps: Vec<f64> = Vec::new();

    for tick in 0..max_ticks {
        let ee = forward_kinematics(&rig.chain, &q)?;
        state.end_effector_pose = ee.clone();
        let true_distance = state.tool_tip() - state.screw_center();

        let mut estimate = None;
        let mut selected_head = None;
        if tick % ratio == 0 {
            match estimate_distance(estimator, &state, rig, true_distance, rng)? {
                Some((d_hat, head)) => {
                    target = Some(update_target(ee.translation, d_hat));
                    latest_estimate_norm = d_hat.norm();
                    estimate = Some(d_hat);
                    selected_head = head;
                }
                None => {
                    let final_error = true_distance.norm();
                    return Ok(ServoOutcome {
                        trace,
                        success: false,
                        final_error,
                        failure: Some("features left the field of view".into()),
                    });
                }
            }
        }

        let target_pos = target.expect("first tick is an estimate tick");
        let step = control_tick(rig, &q, ee.translation, &held_rotation, target_pos, cfg)?;
        if !step.ik_converged && step.ik_residual >= 1e-6 {
            trace.ik_failures += 1;
        }
        let moved = {
            let next_ee = forward_kinematics(&rig.chain, &step.command)?;
            (next_ee.translation - ee.translation).norm()
        };
        recent_steps.push(moved);
        if recent_steps.len() > dwell_ticks {
            recent_steps.remove(0);
        }

        trace.records.push(TickRecord {
            t: tick as f64 * dt,
            true_distance,
            estimate,
            selected_head,
            commanded_velocity: step.velocity,
            commanded_position: step.intermediate,
            joints: step.command.clone(),
            ik_residual: step.ik_residual,
        });
        q = step.command;

        let dwelled = recent_steps.len() == dwell_ticks
            && recent_steps.iter().sum::<f64>() < cfg.dwell_path
            && latest_estimate_norm < cfg.success_tolerance / 2.0;
        if dwelled {
            break;
        }
    }

    let ee = forward_kinematics(&rig.chain, &q)?;
    state.end_effector_pose = ee;
    let final_error = (state.tool_tip() - state.screw_center()).norm();
    Ok(ServoOutcome {
        trace,
        success: final_error <= cfg.success_tolerance,
        final_error,
        failure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn update_target_examples() {
        let cur = Vector3::new(0.3, 0.1, -0.2);
        assert_eq!(update_target(cur, Vector3::zeros()), cur);
        assert_eq!(
            update_target(cur, Vector3::new(0.01, 0.0, 0.0)),
            Vector3::new(0.29, 0.1, -0.2)
        );
    }

    #[test]
    fn servo_config_rejects_non_integer_ratio() {
        let cfg = ServoConfig {
            estimate_rate: 7.0,
            control_rate: 50.0,
            ..ServoConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(ServoConfig::default().validate().unwrap(), 5);
    }

    #[test]
    fn control_tick_at_target_is_stationary() {
        let rig = Rig::desk_default();
        let q = rig.nominal_q.clone();
        let pose = forward_kinematics(&rig.chain, &q).unwrap();
        let cfg = ServoConfig::default();
        let step = control_tick(
            &rig,
            &q,
            pose.translation,
            &pose.rotation,
            pose.translation,
            &cfg,
        )
        .unwrap();
        assert!(step.velocity.norm() < 1e-15);
        assert!((step.intermediate - pose.translation).norm() < 1e-15);
        let next = forward_kinematics(&rig.chain, &step.command).unwrap();
        assert!((next.translation - pose.translation).norm() < 1e-9);
    }

    #[test]
    fn control_tick_step_arithmetic() {
        // kp = 1, error 0.05 m, dt = 0.02 s: the intermediate target steps
        // 0.001 m toward the target.
        let rig = Rig::desk_default();
        let q = rig.nominal_q.clone();
        let pose = forward_kinematics(&rig.chain, &q).unwrap();
        let cfg = ServoConfig {
            kp: 1.0,
            ..ServoConfig::default()
        };
        let target = pose.translation + Vector3::new(0.05, 0.0, 0.0);
        let step = control_tick(&rig, &q, pose.translation, &pose.rotation, target, &cfg).unwrap();
        assert!(
            (step.intermediate - pose.translation - Vector3::new(0.001, 0.0, 0.0)).norm() < 1e-12
        );
    }

    #[test]
    fn oracle_error_decays_geometrically() {
        let rig = Rig::desk_default();
        let cfg = ServoConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let outcome = run_servo(&rig, &Estimator::Oracle, &cfg, &mut rng).unwrap();
        assert!(outcome.success, "final error {}", outcome.final_error);

        // Scalar linear-system oracle: e_{t+1} = (1 − kp·dt)·e_t.
        let factor = 1.0 - cfg.kp / cfg.control_rate;
        let errors: Vec<f64> = outcome
            .trace
            .records
            .iter()
            .map(|r| r.true_distance.norm())
            .collect();
        for w in errors.windows(2) {
            if w[0] > 1e-6 {
                let ratio = w[1] / w[0];
                assert!(
                    (ratio - factor).abs() < 1e-3,
                    "per-tick ratio {ratio} vs {factor}"
                );
            }
        }
    }

    #[test]
    fn oracle_run_converges_below_success_threshold() {
        let rig = Rig::desk_default();
        let cfg = ServoConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..5 {
            let outcome = run_servo(&rig, &Estimator::Oracle, &cfg, &mut rng).unwrap();
            assert!(outcome.success);
            assert!(
                outcome.final_error < 1e-4,
                "final error {}",
                outcome.final_error
            );
            // Monotone decay after the first estimate tick.
            let errors: Vec<f64> = outcome
                .trace
                .records
                .iter()
                .map(|r| r.true_distance.norm())
                .collect();
            for w in errors.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "error increased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn estimates_every_fifth_tick() {
        let rig = Rig::desk_default();
        let cfg = ServoConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let outcome = run_servo(&rig, &Estimator::Oracle, &cfg, &mut rng).unwrap();
        for (i, rec) in outcome.trace.records.iter().enumerate() {
            assert_eq!(rec.estimate.is_some(), i % 5 == 0, "tick {i}");
        }
    }

    #[test]
    fn commanded_positions_are_straight_between_estimates() {
        let rig = Rig::desk_default();
        let cfg = ServoConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let outcome = run_servo(&rig, &Estimator::Oracle, &cfg, &mut rng).unwrap();
        let recs = &outcome.trace.records;
        for window in recs.chunks(5) {
            if window.len() < 3 {
                continue;
            }
            // Every commanded position in the window must lie on the line
            // through the window's first and last commands, up to the IK
            // residual noise.
            let a = window[0].commanded_position;
            let b = window[window.len() - 1].commanded_position;
            let dir = b - a;
            if dir.norm() < 1e-9 {
                continue;
            }
            let dir = dir.normalize();
            for rec in window {
                let off = rec.commanded_position - a;
                let perp = (off - dir * off.dot(&dir)).norm();
                assert!(perp < 1e-7, "commanded path bends by {perp} m");
            }
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let rig = Rig::desk_default();
        let cfg = ServoConfig {
            max_duration: 1.0,
            ..ServoConfig::default()
        };
        let run = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            run_servo(
                &rig,
                &Estimator::NoisyOracle { sigma: 0.0005 },
                &cfg,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(3);
        let b = run(3);
        assert_eq!(a.trace.records, b.trace.records);
        assert_eq!(a.final_error, b.final_error);
    }

    #[test]
    fn zero_initial_error_is_immediate_success() {
        // Start the trial with the tip already on the screw center.
        let rig = Rig::desk_default();
        let cfg = ServoConfig::default();
        let ratio = cfg.validate().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let nominal = forward_kinematics(&rig.chain, &rig.nominal_q).unwrap();
        let grasp = Pose::from_translation(rig.sampling.grasp_center);
        let screw = Vector3::new(0.42, 0.0, -0.18);
        let aligned = screw - nominal.rotation * grasp.translation;
        let ik = solve_ik(
            &rig.chain,
            &IkTarget::Pose {
                pose: Pose::new(nominal.rotation, aligned),
                rotation_weight: 1.0,
            },
            &rig.nominal_q,
            &IkParams {
                tol: 1e-18,
                max_iter: 300,
            },
        )
        .unwrap();
        let state = SceneState {
            end_effector_pose: Pose::new(nominal.rotation, aligned),
            grasp_transform: grasp,
            screw_pose: Pose::from_translation(screw),
            head_yaw: 0.0,
            head_pitch: 0.0,
        };
        let outcome =
            run_servo_from(&rig, &Estimator::Oracle, &cfg, state, ik.q, ratio, &mut rng).unwrap();
        assert!(outcome.success);
        assert!(outcome.final_error < 1e-6);
        // Exits on the dwell, far before the duration cap.
        assert!(outcome.trace.records.len() <= (cfg.dwell_time * cfg.control_rate) as usize + 5);
    }
}
