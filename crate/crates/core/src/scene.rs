//! Synthetic stand-in for the physical rig: pinhole cameras on head and
//! torso, a tool tip rigidly grasped by the end-effector, a screw-head
//! target, and rasterized observations.
//!
//! Rendering is deliberately simple: the screw head is a filled disc with a
//! slot line, the tool tip a smaller bright disc, plus optional noise and
//! ellipse distractors. Feature sizes scale with inverse depth, and soft
//! (1 px) edges keep feature centers recoverable to well under a pixel.

use nalgebra::{Unit, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::kinematics::{JointConfig, KinematicChain, Pose};

/// Pinhole camera: intrinsics in pixels plus the camera-to-torso transform.
/// The optical axis is the camera frame +z; +x maps to image u, +y to v.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera pose in the torso frame. For the head camera this is the
    /// zero-yaw/zero-pitch mount pose.
    pub mount: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneError {
    BehindCamera,
    OutOfView { camera: &'static str },
    HeadAngleOutOfBounds,
    InvalidCamera,
}

impl std::fmt::Display for SceneError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::BehindCamera => write!(f, "point has non-positive depth in the camera frame"),
            Self::OutOfView { camera } => write!(f, "feature outside the {camera} camera image"),
            Self::HeadAngleOutOfBounds => write!(f, "head joint angle outside its bounds"),
            Self::InvalidCamera => write!(f, "camera intrinsics are invalid"),
        }
    }
}

impl std::error::Error for SceneError {}

impl CameraModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        let inside = self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if self.fx > 0.0 && self.fy > 0.0 && inside {
            Ok(())
        } else {
            Err(SceneError::InvalidCamera)
        }
    }

    /// Copy of this camera moved to `pose` (used for the head camera, whose
    /// pose depends on the head joints).
    pub fn at_pose(&self, pose: Pose) -> CameraModel {
        CameraModel {
            mount: pose,
            ..self.clone()
        }
    }

    /// Builds the mount pose for a camera at `position` looking at `target`.
    /// `up` fixes the image vertical: camera +y (image down) maps to −up.
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Pose {
        let z = (target - position).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x).normalize();
        let rotation = nalgebra::Matrix3::from_columns(&[x, y, z]);
        Pose::new(rotation, position)
    }
}

/// Perspective projection of a torso-frame point into pixel coordinates.
pub fn project_point(
    camera: &CameraModel,
    point: &Vector3<f64>,
) -> Result<(f64, f64), SceneError> {
    let p = camera.mount.inverse().transform_point(point);
    if p.z <= 1e-9 {
        return Err(SceneError::BehindCamera);
    }
    Ok((
        camera.fx * p.x / p.z + camera.cx,
        camera.fy * p.y / p.z + camera.cy,
    ))
}

/// Depth of a torso-frame point along the camera optical axis.
pub fn point_depth(camera: &CameraModel, point: &Vector3<f64>) -> f64 {
    camera.mount.inverse().transform_point(point).z
}

/// The two cameras plus the head's two rotation joints.
#[derive(Debug, Clone)]
pub struct CameraRig {
    pub head: CameraModel,
    pub torso: CameraModel,
    /// Yaw and pitch axes in the head-camera mount frame.
    pub yaw_axis: Unit<Vector3<f64>>,
    pub pitch_axis: Unit<Vector3<f64>>,
    pub yaw_limits: (f64, f64),
    pub pitch_limits: (f64, f64),
}

impl CameraRig {
    pub fn head_camera_pose(&self, yaw: f64, pitch: f64) -> Result<Pose, SceneError> {
        head_camera_pose(
            &self.head.mount,
            &self.yaw_axis,
            &self.pitch_axis,
            self.yaw_limits,
            self.pitch_limits,
            yaw,
            pitch,
        )
    }
}

/// Head-camera pose in the torso frame: `mount ∘ R(yaw_axis, yaw) ∘
/// R(pitch_axis, pitch)`, the forward kinematics of the two head joints.
#[allow(clippy::too_many_arguments)]
pub fn head_camera_pose(
    mount: &Pose,
    yaw_axis: &Unit<Vector3<f64>>,
    pitch_axis: &Unit<Vector3<f64>>,
    yaw_limits: (f64, f64),
    pitch_limits: (f64, f64),
    yaw: f64,
    pitch: f64,
) -> Result<Pose, SceneError> {
    if yaw < yaw_limits.0 || yaw > yaw_limits.1 || pitch < pitch_limits.0 || pitch > pitch_limits.1
    {
        return Err(SceneError::HeadAngleOutOfBounds);
    }
    Ok(mount
        .compose(&Pose::from_axis_angle(yaw_axis, yaw))
        .compose(&Pose::from_axis_angle(pitch_axis, pitch)))
}

/// Full state of the simulated scene at one instant.
#[derive(Debug, Clone)]
pub struct SceneState {
    /// End-effector pose in the torso frame.
    pub end_effector_pose: Pose,
    /// Tool frame in the end-effector frame; held constant within a
    /// measurement group.
    pub grasp_transform: Pose,
    /// Screw pose in the torso frame; the slot runs along the rotated x axis.
    pub screw_pose: Pose,
    pub head_yaw: f64,
    pub head_pitch: f64,
}

impl SceneState {
    /// Tool-tip position in the torso frame (origin of the tool frame).
    pub fn tool_tip(&self) -> Vector3<f64> {
        self.end_effector_pose
            .compose(&self.grasp_transform)
            .translation
    }

    pub fn screw_center(&self) -> Vector3<f64> {
        self.screw_pose.translation
    }
}

/// Single-channel image with unit-interval intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.pixels[(y * self.width + x) as usize]
    }

    #[inline]
    fn blend(&mut self, x: u32, y: u32, coverage: f32, value: f32) {
        let p = &mut self.pixels[(y * self.width + x) as usize];
        *p += coverage * (value - *p);
    }
}

/// One network input: both camera images plus the head joint angles.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub head_image: Image,
    pub torso_image: Image,
    pub head_yaw: f64,
    pub head_pitch: f64,
}

/// Pixel noise and clutter added to rendered observations.
#[derive(Debug, Clone)]
pub struct NoiseConfig {
    /// Standard deviation of the additive Gaussian pixel noise.
    pub pixel_sigma: f64,
    /// Up to this many random ellipse distractors behind the features.
    pub max_distractors: u32,
}

impl NoiseConfig {
    pub fn off() -> Self {
        Self {
            pixel_sigma: 0.0,
            max_distractors: 0,
        }
    }
}

/// Feature geometry (meters) and intensities for rasterization.
#[derive(Debug, Clone)]
pub struct RenderConfig {
    pub screw_radius: f64,
    pub slot_half_length: f64,
    pub slot_half_width: f64,
    pub tip_radius: f64,
    pub background: f32,
    pub screw_intensity: f32,
    pub slot_intensity: f32,
    pub tip_intensity: f32,
    /// Minimum pixel distance from a feature edge to the image border.
    pub view_margin_px: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            screw_radius: 0.013,
            slot_half_length: 0.010,
            slot_half_width: 0.0022,
            tip_radius: 0.0065,
            background: 0.05,
            screw_intensity: 0.50,
            slot_intensity: 0.18,
            tip_intensity: 1.0,
            view_margin_px: 1.0,
        }
    }
}

fn soft_disc(img: &mut Image, u: f64, v: f64, radius_px: f64, value: f32) {
    let x0 = ((u - radius_px - 1.0).floor().max(0.0)) as u32;
    let x1 = ((u + radius_px + 1.0).ceil().min(img.width as f64 - 1.0)) as u32;
    let y0 = ((v - radius_px - 1.0).floor().max(0.0)) as u32;
    let y1 = ((v + radius_px + 1.0).ceil().min(img.height as f64 - 1.0)) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - u).powi(2) + (y as f64 - v).powi(2)).sqrt();
            let cov = (radius_px + 0.5 - d).clamp(0.0, 1.0) as f32;
            if cov > 0.0 {
                img.blend(x, y, cov, value);
            }
        }
    }
}

/// Soft-edged thick segment between two pixel points.
fn soft_segment(img: &mut Image, a: (f64, f64), b: (f64, f64), half_width_px: f64, value: f32) {
    let (ax, ay) = a;
    let (bx, by) = b;
    let x0 = (ax.min(bx) - half_width_px - 1.0).floor().max(0.0) as u32;
    let x1 = (ax.max(bx) + half_width_px + 1.0)
        .ceil()
        .min(img.width as f64 - 1.0) as u32;
    let y0 = (ay.min(by) - half_width_px - 1.0).floor().max(0.0) as u32;
    let y1 = (ay.max(by) + half_width_px + 1.0)
        .ceil()
        .min(img.height as f64 - 1.0) as u32;
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = (dx * dx + dy * dy).max(1e-12);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let t = (((x as f64 - ax) * dx + (y as f64 - ay) * dy) / len_sq).clamp(0.0, 1.0);
            let px = ax + t * dx;
            let py = ay + t * dy;
            let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
            let cov = (half_width_px + 0.5 - d).clamp(0.0, 1.0) as f32;
            if cov > 0.0 {
                img.blend(x, y, cov, value);
            }
        }
    }
}

fn soft_ellipse(img: &mut Image, u: f64, v: f64, ru: f64, rv: f64, value: f32) {
    let x0 = ((u - ru - 1.0).floor().max(0.0)) as u32;
    let x1 = ((u + ru + 1.0).ceil().min(img.width as f64 - 1.0)) as u32;
    let y0 = ((v - rv - 1.0).floor().max(0.0)) as u32;
    let y1 = ((v + rv + 1.0).ceil().min(img.height as f64 - 1.0)) as u32;
    if x0 > x1 || y0 > y1 {
        return;
    }
    let scale = ru.min(rv);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let q = (((x as f64 - u) / ru).powi(2) + ((y as f64 - v) / rv).powi(2)).sqrt();
            let cov = ((1.0 - q) * scale + 0.5).clamp(0.0, 1.0) as f32;
            if cov > 0.0 {
                img.blend(x, y, cov, value);
            }
        }
    }
}

struct FeaturePixels {
    screw: (f64, f64),
    screw_radius_px: f64,
    slot_a: (f64, f64),
    slot_b: (f64, f64),
    slot_half_width_px: f64,
    tip: (f64, f64),
    tip_radius_px: f64,
}

fn project_features(
    camera: &CameraModel,
    state: &SceneState,
    cfg: &RenderConfig,
    name: &'static str,
) -> Result<FeaturePixels, SceneError> {
    let screw_c = state.screw_center();
    let tip = state.tool_tip();

    let screw_px = project_point(camera, &screw_c)?;
    let tip_px = project_point(camera, &tip)?;
    let screw_depth = point_depth(camera, &screw_c);
    let tip_depth = point_depth(camera, &tip);

    let screw_radius_px = cfg.screw_radius * camera.fx / screw_depth;
    let tip_radius_px = cfg.tip_radius * camera.fx / tip_depth;

    let in_view = |(u, v): (f64, f64), r: f64| {
        let m = cfg.view_margin_px;
        u - r >= m
            && u + r <= camera.width as f64 - 1.0 - m
            && v - r >= m
            && v + r <= camera.height as f64 - 1.0 - m
    };
    if !in_view(screw_px, screw_radius_px) || !in_view(tip_px, tip_radius_px) {
        return Err(SceneError::OutOfView { camera: name });
    }

    // Slot endpoints along the screw's rotated x axis, projected separately
    // so the slot shortens under perspective like everything else.
    let slot_dir = state.screw_pose.rotation.column(0).into_owned();
    let slot_a = project_point(camera, &(screw_c + slot_dir * cfg.slot_half_length))?;
    let slot_b = project_point(camera, &(screw_c - slot_dir * cfg.slot_half_length))?;
    let slot_half_width_px = cfg.slot_half_width * camera.fx / screw_depth;

    Ok(FeaturePixels {
        screw: screw_px,
        screw_radius_px,
        slot_a,
        slot_b,
        slot_half_width_px,
        tip: tip_px,
        tip_radius_px,
    })
}

fn render_camera(
    camera: &CameraModel,
    state: &SceneState,
    cfg: &RenderConfig,
    noise: &NoiseConfig,
    name: &'static str,
    rng: &mut ChaCha12Rng,
) -> Result<Image, SceneError> {
    let feats = project_features(camera, state, cfg, name)?;
    let mut img = Image::filled(camera.width, camera.height, cfg.background);

    let n_distractors = if noise.max_distractors > 0 {
        rng.random_range(0..=noise.max_distractors)
    } else {
        0
    };
    for _ in 0..n_distractors {
        let u = rng.random_range(0.0..camera.width as f64);
        let v = rng.random_range(0.0..camera.height as f64);
        let ru = rng.random_range(1.0..3.5);
        let rv = rng.random_range(1.0..3.5);
        let val = rng.random_range(0.10..0.28) as f32;
        soft_ellipse(&mut img, u, v, ru, rv, val);
    }

    soft_disc(
        &mut img,
        feats.screw.0,
        feats.screw.1,
        feats.screw_radius_px,
        cfg.screw_intensity,
    );
    soft_segment(
        &mut img,
        feats.slot_a,
        feats.slot_b,
        feats.slot_half_width_px,
        cfg.slot_intensity,
    );
    soft_disc(
        &mut img,
        feats.tip.0,
        feats.tip.1,
        feats.tip_radius_px,
        cfg.tip_intensity,
    );

    if noise.pixel_sigma > 0.0 {
        let normal = Normal::new(0.0, noise.pixel_sigma).expect("sigma >= 0");
        for p in &mut img.pixels {
            *p += normal.sample(rng) as f32;
        }
    }
    for p in &mut img.pixels {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Rasterizes both camera views of `state`. Fails if either feature leaves
/// either image (the caller retries with a fresh sample). Deterministic for
/// a given rng state.
pub fn render_observation(
    state: &SceneState,
    cameras: &CameraRig,
    render_cfg: &RenderConfig,
    noise: &NoiseConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Observation, SceneError> {
    let head_pose = cameras.head_camera_pose(state.head_yaw, state.head_pitch)?;
    let head_cam = cameras.head.at_pose(head_pose);
    let head_image = render_camera(&head_cam, state, render_cfg, noise, "head", rng)?;
    let torso_image = render_camera(&cameras.torso, state, render_cfg, noise, "torso", rng)?;
    Ok(Observation {
        head_image,
        torso_image,
        head_yaw: state.head_yaw,
        head_pitch: state.head_pitch,
    })
}

/// Checks that both features are visible in both cameras without rendering.
pub fn features_in_view(state: &SceneState, cameras: &CameraRig, cfg: &RenderConfig) -> bool {
    let head_pose = match cameras.head_camera_pose(state.head_yaw, state.head_pitch) {
        Ok(p) => p,
        Err(_) => return false,
    };
    let head_cam = cameras.head.at_pose(head_pose);
    project_features(&head_cam, state, cfg, "head").is_ok()
        && project_features(&cameras.torso, state, cfg, "torso").is_ok()
}

/// Everything the samplers need: the arm, the cameras, feature appearance,
/// noise, and the randomization bounds used for dataset collection and
/// servo trials.
#[derive(Debug, Clone)]
pub struct Rig {
    pub chain: KinematicChain,
    pub cameras: CameraRig,
    pub render: RenderConfig,
    pub noise: NoiseConfig,
    pub sampling: SamplingConfig,
    /// Neutral arm posture: IK seed and source of the nominal end-effector
    /// rotation held within measurement groups.
    pub nominal_q: JointConfig,
}

impl Rig {
    /// The built-in desk-scale rig: a 7-joint arm reaching a tabletop
    /// workspace ~0.42 m in front of the torso, a narrow head camera above
    /// looking down at ~45°, and a wider torso camera below. Numbers here
    /// are the single source of the default geometry; the config layer
    /// mirrors them.
    pub fn desk_default() -> Rig {
        let axis = |v: Vector3<f64>| Unit::new_normalize(v);
        let joint = |offset: Vector3<f64>, ax: Vector3<f64>| crate::kinematics::Joint {
            origin: Pose::from_translation(offset),
            axis: axis(ax),
        };
        let joints = vec![
            joint(Vector3::new(0.05, -0.18, 0.0), Vector3::z()),
            joint(Vector3::new(0.05, 0.0, 0.0), Vector3::y()),
            joint(Vector3::new(0.10, 0.0, 0.0), Vector3::x()),
            joint(Vector3::new(0.10, 0.0, 0.0), Vector3::y()),
            joint(Vector3::new(0.10, 0.0, 0.0), Vector3::x()),
            joint(Vector3::new(0.10, 0.0, 0.0), Vector3::y()),
            joint(Vector3::new(0.05, 0.0, 0.0), Vector3::x()),
        ];
        let chain = KinematicChain::new(
            joints,
            vec![-2.6; 7],
            vec![2.6; 7],
            Pose::from_translation(Vector3::new(0.05, 0.0, 0.0)),
        )
        .expect("default chain is valid");

        let workspace = Vector3::new(0.42, 0.0, -0.18);
        let head_mount =
            CameraModel::look_at(Vector3::new(0.02, 0.0, 0.28), workspace, Vector3::z());
        let torso_mount =
            CameraModel::look_at(Vector3::new(0.10, 0.0, -0.02), workspace, Vector3::z());
        let cameras = CameraRig {
            head: CameraModel {
                fx: 110.0,
                fy: 110.0,
                cx: 31.5,
                cy: 31.5,
                width: 64,
                height: 64,
                mount: head_mount,
            },
            torso: CameraModel {
                fx: 56.0,
                fy: 56.0,
                cx: 31.5,
                cy: 31.5,
                width: 64,
                height: 64,
                mount: torso_mount,
            },
            yaw_axis: Unit::new_normalize(Vector3::y()),
            pitch_axis: Unit::new_normalize(Vector3::x()),
            yaw_limits: (-0.35, 0.35),
            pitch_limits: (-0.35, 0.35),
        };

        Rig {
            chain,
            cameras,
            render: RenderConfig::default(),
            noise: NoiseConfig {
                pixel_sigma: 0.01,
                max_distractors: 2,
            },
            sampling: SamplingConfig {
                screw_min: Vector3::new(0.38, -0.05, -0.20),
                screw_max: Vector3::new(0.46, 0.05, -0.16),
                grasp_center: Vector3::new(0.10, 0.0, -0.03),
                grasp_jitter: 0.01,
                rot_error_bound: 5.0_f64.to_radians(),
                head_angle_range: 0.08,
                max_offset: 0.1275,
                max_view_retries: 200,
            },
            nominal_q: JointConfig::new(vec![1.491, 1.439, 0.904, -1.734, -1.314, 0.610, 1.136]),
        }
    }
}

/// Randomization bounds for scene setup.
#[derive(Debug, Clone)]
pub struct SamplingConfig {
    /// Axis-aligned box (torso frame) for screw placement.
    pub screw_min: Vector3<f64>,
    pub screw_max: Vector3<f64>,
    /// Center of the tool-tip offset in the end-effector frame and its
    /// per-axis jitter between groups.
    pub grasp_center: Vector3<f64>,
    pub grasp_jitter: f64,
    /// Bound (radians, per axis) of the rotational error injected between
    /// tool and target across groups.
    pub rot_error_bound: f64,
    /// Head yaw/pitch are sampled uniformly in ±range around zero.
    pub head_angle_range: f64,
    /// Upper bound (exclusive) on sampled ‖d_r‖; must not exceed the bank
    /// range.
    pub max_offset: f64,
    /// Attempts at keeping features in view before giving up on a sample.
    pub max_view_retries: usize,
}
