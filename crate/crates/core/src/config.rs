//! Typed text configuration (TOML: flat key/value with sections) for the
//! whole pipeline, with defaults mirroring the built-in desk rig. Every
//! section can be omitted; a missing file is equivalent to the defaults.
//! The config hash is the SHA-256 of the canonical serialization, so two
//! files with different formatting but equal content hash identically.

use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::controller::ServoConfig;
use crate::kinematics::{Joint, JointConfig, KinematicChain, Pose};
use crate::model::ModelConfig;
use crate::mph::{HeadBank, MphError, PerceptionHeadSpec, Weighting};
use crate::model::TrainConfig;
use crate::scene::{CameraModel, CameraRig, NoiseConfig, RenderConfig, Rig, SamplingConfig};

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(String),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Io(e) => write!(f, "config io error: {e}"),
            Self::Parse(msg) => write!(f, "config parse error: {msg}"),
            Self::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct JointSpec {
    pub axis: [f64; 3],
    pub offset: [f64; 3],
    /// Fixed rotation of the parent-to-joint transform (roll, pitch, yaw).
    pub rpy: [f64; 3],
    pub lower: f64,
    pub upper: f64,
}

impl Default for JointSpec {
    fn default() -> Self {
        Self {
            axis: [0.0, 0.0, 1.0],
            offset: [0.0; 3],
            rpy: [0.0; 3],
            lower: -2.6,
            upper: 2.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ChainSection {
    pub joints: Vec<JointSpec>,
    pub ee_offset: [f64; 3],
    /// Neutral posture: IK seed and the source of the nominal end-effector
    /// rotation.
    pub nominal_q: Vec<f64>,
}

impl Default for ChainSection {
    fn default() -> Self {
        let joint = |offset: [f64; 3], axis: [f64; 3]| JointSpec {
            axis,
            offset,
            ..JointSpec::default()
        };
        Self {
            joints: vec![
                joint([0.05, -0.18, 0.0], [0.0, 0.0, 1.0]),
                joint([0.05, 0.0, 0.0], [0.0, 1.0, 0.0]),
                joint([0.10, 0.0, 0.0], [1.0, 0.0, 0.0]),
                joint([0.10, 0.0, 0.0], [0.0, 1.0, 0.0]),
                joint([0.10, 0.0, 0.0], [1.0, 0.0, 0.0]),
                joint([0.10, 0.0, 0.0], [0.0, 1.0, 0.0]),
                joint([0.05, 0.0, 0.0], [1.0, 0.0, 0.0]),
            ],
            ee_offset: [0.05, 0.0, 0.0],
            nominal_q: vec![1.491, 1.439, 0.904, -1.734, -1.314, 0.610, 1.136],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CameraSection {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            fx: 110.0,
            fy: 110.0,
            cx: 31.5,
            cy: 31.5,
            width: 64,
            height: 64,
            position: [0.02, 0.0, 0.28],
            look_at: [0.42, 0.0, -0.18],
            up: [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneSection {
    pub head_camera: CameraSection,
    pub torso_camera: CameraSection,
    pub yaw_axis: [f64; 3],
    pub pitch_axis: [f64; 3],
    pub yaw_limits: [f64; 2],
    pub pitch_limits: [f64; 2],
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            head_camera: CameraSection::default(),
            torso_camera: CameraSection {
                fx: 56.0,
                fy: 56.0,
                position: [0.10, 0.0, -0.02],
                ..CameraSection::default()
            },
            yaw_axis: [0.0, 1.0, 0.0],
            pitch_axis: [1.0, 0.0, 0.0],
            yaw_limits: [-0.35, 0.35],
            pitch_limits: [-0.35, 0.35],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RenderSection {
    pub screw_radius: f64,
    pub slot_half_length: f64,
    pub slot_half_width: f64,
    pub tip_radius: f64,
    pub background: f32,
    pub screw_intensity: f32,
    pub slot_intensity: f32,
    pub tip_intensity: f32,
    pub view_margin_px: f64,
}

impl Default for RenderSection {
    fn default() -> Self {
        let r = RenderConfig::default();
        Self {
            screw_radius: r.screw_radius,
            slot_half_length: r.slot_half_length,
            slot_half_width: r.slot_half_width,
            tip_radius: r.tip_radius,
            background: r.background,
            screw_intensity: r.screw_intensity,
            slot_intensity: r.slot_intensity,
            tip_intensity: r.tip_intensity,
            view_margin_px: r.view_margin_px,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NoiseSection {
    pub pixel_sigma: f64,
    pub max_distractors: u32,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.01,
            max_distractors: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SamplingSection {
    pub screw_min: [f64; 3],
    pub screw_max: [f64; 3],
    pub grasp_center: [f64; 3],
    pub grasp_jitter: f64,
    /// Per-axis bound (radians) on the rotational error injected between
    /// groups.
    pub rot_error_bound: f64,
    pub head_angle_range: f64,
    pub max_offset: f64,
    pub max_view_retries: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            screw_min: [0.38, -0.05, -0.20],
            screw_max: [0.46, 0.05, -0.16],
            grasp_center: [0.10, 0.0, -0.03],
            grasp_jitter: 0.01,
            rot_error_bound: 5.0_f64.to_radians(),
            head_angle_range: 0.08,
            max_offset: 0.1275,
            max_view_retries: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HeadsSection {
    pub heads: Vec<PerceptionHeadSpec>,
    pub weighting: Weighting,
    /// Fixed output gain (1/m) of the single-head ablation.
    pub sph_gain: f64,
}

impl Default for HeadsSection {
    fn default() -> Self {
        let bank = HeadBank::default_four();
        Self {
            heads: bank.heads,
            weighting: bank.weighting,
            sph_gain: 20.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossSection {
    /// Weight between distance and confidence loss terms.
    pub k: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { k: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub close_range: f64,
    pub grad_chunk: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            epochs: t.epochs,
            close_range: t.close_range,
            grad_chunk: t.grad_chunk,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ServoSection {
    pub estimate_rate: f64,
    pub control_rate: f64,
    pub kp: f64,
    pub success_tolerance: f64,
    pub max_duration: f64,
    pub ik_tol: f64,
    pub ik_max_iter: usize,
    pub dwell_time: f64,
    pub dwell_path: f64,
    pub start_min: f64,
    pub start_max: f64,
}

impl Default for ServoSection {
    fn default() -> Self {
        let s = ServoConfig::default();
        Self {
            estimate_rate: s.estimate_rate,
            control_rate: s.control_rate,
            kp: s.kp,
            success_tolerance: s.success_tolerance,
            max_duration: s.max_duration,
            ik_tol: s.ik_tol,
            ik_max_iter: s.ik_max_iter,
            dwell_time: s.dwell_time,
            dwell_path: s.dwell_path,
            start_min: s.start_range.0,
            start_max: s.start_range.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalSection {
    pub trials: usize,
    /// Success tolerance tiers (meters), strictly decreasing: stand-ins for
    /// progressively smaller screw sizes.
    pub tier_coarse: f64,
    pub tier_medium: f64,
    pub tier_fine: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trials: 100,
            tier_coarse: 0.002,
            tier_medium: 0.0015,
            tier_fine: 0.001,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetSection {
    pub groups: u32,
    pub points_per_group: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            groups: 40,
            points_per_group: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub chain: ChainSection,
    pub scene: SceneSection,
    pub render: RenderSection,
    pub noise: NoiseSection,
    pub sampling: SamplingSection,
    pub heads: HeadsSection,
    pub loss: LossSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub servo: ServoSection,
    pub eval: EvalSection,
    pub dataset: DatasetSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.build_bank()
            .map_err(|e| ConfigError::Invalid(format!("head bank: {e}")))?;
        self.build_rig()?;
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.eval.tier_coarse > self.eval.tier_medium
            && self.eval.tier_medium > self.eval.tier_fine)
        {
            return Err(ConfigError::Invalid(
                "tolerance tiers must be strictly decreasing".into(),
            ));
        }
        self.build_servo(self.eval.tier_coarse)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.sampling.max_offset
            >= self
                .heads
                .heads
                .last()
                .map(|h| h.hi)
                .unwrap_or(f64::INFINITY)
        {
            return Err(ConfigError::Invalid(
                "sampling.max_offset must stay below the last head interval".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> [u8; 32] {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hasher.finalize().into()
    }

    pub fn build_chain(&self) -> Result<KinematicChain, ConfigError> {
        let mut joints = Vec::new();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for (i, spec) in self.chain.joints.iter().enumerate() {
            let axis = v3(spec.axis);
            if axis.norm() < 1e-9 {
                return Err(ConfigError::Invalid(format!("joint {i} axis is zero")));
            }
            let origin = Pose::from_rpy(spec.rpy[0], spec.rpy[1], spec.rpy[2]);
            let origin = Pose::new(origin.rotation, v3(spec.offset));
            joints.push(Joint {
                origin,
                axis: Unit::new_normalize(axis),
            });
            lower.push(spec.lower);
            upper.push(spec.upper);
        }
        KinematicChain::new(
            joints,
            lower,
            upper,
            Pose::from_translation(v3(self.chain.ee_offset)),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn build_camera(&self, s: &CameraSection) -> Result<CameraModel, ConfigError> {
        let cam = CameraModel {
            fx: s.fx,
            fy: s.fy,
            cx: s.cx,
            cy: s.cy,
            width: s.width,
            height: s.height,
            mount: CameraModel::look_at(v3(s.position), v3(s.look_at), v3(s.up)),
        };
        cam.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cam)
    }

    pub fn build_rig(&self) -> Result<Rig, ConfigError> {
        let chain = self.build_chain()?;
        if self.chain.nominal_q.len() != chain.dof() {
            return Err(ConfigError::Invalid(format!(
                "nominal_q has {} entries for a {}-joint chain",
                self.chain.nominal_q.len(),
                chain.dof()
            )));
        }
        let cameras = CameraRig {
            head: self.build_camera(&self.scene.head_camera)?,
            torso: self.build_camera(&self.scene.torso_camera)?,
            yaw_axis: Unit::new_normalize(v3(self.scene.yaw_axis)),
            pitch_axis: Unit::new_normalize(v3(self.scene.pitch_axis)),
            yaw_limits: (self.scene.yaw_limits[0], self.scene.yaw_limits[1]),
            pitch_limits: (self.scene.pitch_limits[0], self.scene.pitch_limits[1]),
        };
        Ok(Rig {
            chain,
            cameras,
            render: RenderConfig {
                screw_radius: self.render.screw_radius,
                slot_half_length: self.render.slot_half_length,
                slot_half_width: self.render.slot_half_width,
                tip_radius: self.render.tip_radius,
                background: self.render.background,
                screw_intensity: self.render.screw_intensity,
                slot_intensity: self.render.slot_intensity,
                tip_intensity: self.render.tip_intensity,
                view_margin_px: self.render.view_margin_px,
            },
            noise: NoiseConfig {
                pixel_sigma: self.noise.pixel_sigma,
                max_distractors: self.noise.max_distractors,
            },
            sampling: SamplingConfig {
                screw_min: v3(self.sampling.screw_min),
                screw_max: v3(self.sampling.screw_max),
                grasp_center: v3(self.sampling.grasp_center),
                grasp_jitter: self.sampling.grasp_jitter,
                rot_error_bound: self.sampling.rot_error_bound,
                head_angle_range: self.sampling.head_angle_range,
                max_offset: self.sampling.max_offset,
                max_view_retries: self.sampling.max_view_retries,
            },
            nominal_q: JointConfig::new(self.chain.nominal_q.clone()),
        })
    }

    /// Multi-head bank from the config.
    pub fn build_bank(&self) -> Result<HeadBank, MphError> {
        HeadBank::new(self.heads.heads.clone(), self.heads.weighting)
    }

    /// Single-head bank for the ablations, covering the same range with the
    /// configured fixed gain and uniform loss weight.
    pub fn build_single_bank(&self) -> HeadBank {
        let range = self.heads.heads.last().map(|h| h.hi).unwrap_or(0.128);
        HeadBank::single(self.heads.sph_gain, range)
    }

    pub fn build_train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            close_range: self.train.close_range,
            grad_chunk: self.train.grad_chunk,
            loss: crate::mph::LossConfig { k: self.loss.k },
        }
    }

    /// Servo config at a given success tolerance tier.
    pub fn build_servo(&self, success_tolerance: f64) -> ServoConfig {
        ServoConfig {
            estimate_rate: self.servo.estimate_rate,
            control_rate: self.servo.control_rate,
            kp: self.servo.kp,
            success_tolerance,
            max_duration: self.servo.max_duration,
            ik_tol: self.servo.ik_tol,
            ik_max_iter: self.servo.ik_max_iter,
            dwell_time: self.servo.dwell_time,
            dwell_path: self.servo.dwell_path,
            start_range: (self.servo.start_min, self.servo.start_max),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_config_validates_and_matches_builtin_rig() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let rig = cfg.build_rig().unwrap();
        let builtin = Rig::desk_default();
        assert_eq!(rig.chain.dof(), builtin.chain.dof());
        assert_relative_eq!(
            rig.cameras.head.mount.translation,
            builtin.cameras.head.mount.translation,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            rig.cameras.torso.mount.rotation,
            builtin.cameras.torso.mount.rotation,
            epsilon = 1e-12
        );
        assert_eq!(rig.nominal_q, builtin.nominal_q);
        assert_eq!(cfg.build_bank().unwrap(), HeadBank::default_four());
    }

    #[test]
    fn toml_roundtrip_preserves_config_and_hash() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let text = r#"
            [train]
            epochs = 7

            [eval]
            trials = 5
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.eval.trials, 5);
        assert_eq!(cfg.train.batch_size, TrainSection::default().batch_size);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_tiers_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.eval.tier_fine = cfg.eval.tier_coarse;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sph_bank_uses_configured_gain() {
        let cfg = ExperimentConfig::default();
        let bank = cfg.build_single_bank();
        assert_eq!(bank.len(), 1);
        assert_relative_eq!(bank.heads[0].gain(), 20.0);
        assert_eq!(bank.weighting, Weighting::Uniform);
        assert_relative_eq!(bank.range_max(), 0.128);
    }
}
