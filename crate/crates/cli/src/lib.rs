//! Experiment harness: dataset generation, variant training, closed-loop
//! evaluation, and report emission. Every entry point is a library function
//! so the test suites drive exactly what the binary runs.
//!
//! All artifacts land in a run directory together with a manifest recording
//! the config hash, seeds, and crate version. Seeds for parallel work units
//! (groups, trials) are derived from the master seed and the unit index, so
//! results do not depend on worker count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use tinyalign_core::config::ExperimentConfig;
use tinyalign_core::controller::{run_servo, Estimator, ServoOutcome};
use tinyalign_core::dataset::{
    collect_group, compute_ground_truth, read_dataset, write_dataset, DatasetFile, Sample,
};
use tinyalign_core::kinematics::{forward_kinematics, solve_ik, IkParams, IkTarget, Pose};
use tinyalign_core::model::{
    forward, load_checkpoint, save_checkpoint, train, EpochStats, ModelConfig, NetworkParams,
    Variant,
};
use tinyalign_core::mph::{gcw, select_and_decode, HeadBank};
use tinyalign_core::scene::{features_in_view, render_observation, SceneState};

pub use tinyalign_core as core;

/// Mixes a master seed with a stream label and an index; used to give every
/// parallel work unit its own deterministic generator.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut x = master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    x ^= x >> 31;
    x = x.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    x ^= x >> 27;
    x
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest.json` into the run directory.
pub fn write_manifest(
    run_dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    seed: u64,
    artifacts: &[(&str, String)],
) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        version: &'a str,
        config_hash: String,
        seed: u64,
        artifacts: std::collections::BTreeMap<&'a str, String>,
    }
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: hex_string(&config.hash()),
        seed,
        artifacts: artifacts.iter().map(|(k, v)| (*k, v.clone())).collect(),
    };
    let path = run_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Histogram of sample distance norms over the bank's head intervals.
#[derive(Debug, Clone)]
pub struct GenDataReport {
    pub samples: usize,
    pub groups: u32,
    pub per_head_counts: Vec<usize>,
    pub dataset_path: PathBuf,
}

/// Collects the configured number of measurement groups and writes the
/// dataset file. Groups are collected in parallel; each group's generator is
/// seeded from (master seed, group id), so the file bytes are independent of
/// worker count.
pub fn run_gen_data(config: &ExperimentConfig, run_dir: &Path, seed: u64) -> Result<GenDataReport> {
    fs::create_dir_all(run_dir)?;
    let rig = config.build_rig()?;
    let bank = config.build_bank()?;
    let groups = config.dataset.groups;
    let points = config.dataset.points_per_group;

    let collected: Vec<Result<Vec<Sample>>> = (0..groups)
        .into_par_iter()
        .map(|g| {
            // A stubborn screw placement gets a few fresh sub-seeds before
            // the group counts as unreachable.
            for attempt in 0..8u64 {
                let mut rng =
                    ChaCha12Rng::seed_from_u64(derive_seed(seed, 1, u64::from(g) * 16 + attempt));
                match collect_group(&rig, &bank, points, g, &mut rng) {
                    Ok(group) => {
                        return compute_ground_truth(&group).map_err(|e| anyhow!("group {g}: {e}"))
                    }
                    Err(tinyalign_core::dataset::DatasetError::ViewRetriesExhausted) => continue,
                    Err(e) => return Err(anyhow!("group {g}: {e}")),
                }
            }
            Err(anyhow!("group {g}: screw placement unreachable after retries"))
        })
        .collect();

    let mut samples = Vec::with_capacity(groups as usize * points);
    for result in collected {
        samples.extend(result?);
    }

    let mut per_head_counts = vec![0usize; bank.len()];
    for s in &samples {
        if let Ok(h) = bank.head_for(s.d_r.norm()) {
            per_head_counts[h] += 1;
        }
    }

    let dataset_path = run_dir.join("dataset.tads");
    write_dataset(
        &dataset_path,
        &DatasetFile {
            config_hash: config.hash(),
            width: config.scene.head_camera.width,
            height: config.scene.head_camera.height,
            samples,
        },
    )
    .map_err(|e| anyhow!("writing dataset: {e}"))?;

    let report = GenDataReport {
        samples: groups as usize * points,
        groups,
        per_head_counts,
        dataset_path: dataset_path.clone(),
    };
    write_manifest(
        run_dir,
        "gen-data",
        config,
        seed,
        &[("dataset", sha256_file(&dataset_path)?)],
    )?;
    Ok(report)
}

/// Bank + model config for one trained variant.
pub fn variant_setup(config: &ExperimentConfig, variant: Variant) -> (ModelConfig, HeadBank) {
    let model = config.model.for_variant(variant);
    let bank = match variant {
        Variant::Mph => config.build_bank().expect("validated config"),
        Variant::Sph | Variant::Plain => config.build_single_bank(),
    };
    (model, bank)
}

pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
}

/// Trains one variant on an existing dataset and writes the checkpoint plus
/// a per-epoch history CSV.
pub fn run_train(
    config: &ExperimentConfig,
    dataset_path: &Path,
    variant: Variant,
    run_dir: &Path,
    seed: u64,
    epochs_override: Option<usize>,
) -> Result<TrainReport> {
    fs::create_dir_all(run_dir)?;
    let dataset = read_dataset(dataset_path).map_err(|e| anyhow!("reading dataset: {e}"))?;
    if dataset.samples.is_empty() {
        bail!("dataset is empty");
    }
    let (model_cfg, bank) = variant_setup(config, variant);
    let mut train_cfg = config.build_train();
    if let Some(epochs) = epochs_override {
        train_cfg.epochs = epochs;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 2, variant as u64));
    let params = NetworkParams::init(&model_cfg, &mut rng)
        .map_err(|e| anyhow!("initializing params: {e}"))?;
    let (trained, history) = train(
        &dataset.samples,
        &bank,
        params,
        &model_cfg,
        &train_cfg,
        &mut rng,
    )
    .map_err(|e| anyhow!("training {}: {e}", variant.name()))?;

    let checkpoint_path = run_dir.join(format!("{}.tack", variant.name()));
    save_checkpoint(&checkpoint_path, &trained).map_err(|e| anyhow!("saving checkpoint: {e}"))?;

    let history_path = run_dir.join(format!("{}_history.csv", variant.name()));
    write_history_csv(&history_path, &history)?;

    write_manifest(
        run_dir,
        "train",
        config,
        seed,
        &[
            ("checkpoint", sha256_file(&checkpoint_path)?),
            ("history", sha256_file(&history_path)?),
        ],
    )?;
    Ok(TrainReport {
        history,
        checkpoint_path,
        history_path,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "close_range_error_m"])?;
    for row in history {
        w.write_record([
            row.epoch.to_string(),
            format!("{:.9}", row.loss),
            format!("{:.9}", row.close_range_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochStats>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        out.push(EpochStats {
            epoch: record[0].parse()?,
            loss: record[1].parse()?,
            close_range_error: record[2].parse()?,
        });
    }
    Ok(out)
}

/// Which estimator an evaluation row uses.
pub enum EstimatorSpec {
    Oracle,
    NoisyOracle { sigma: f64 },
    Checkpoint { variant: Variant, path: PathBuf },
}

impl EstimatorSpec {
    pub fn label(&self) -> String {
        match self {
            Self::Oracle => "oracle".into(),
            Self::NoisyOracle { sigma } => format!("noisy-oracle({sigma})"),
            Self::Checkpoint { variant, .. } => variant.name().into(),
        }
    }

    fn build(&self, config: &ExperimentConfig) -> Result<Estimator> {
        Ok(match self {
            Self::Oracle => Estimator::Oracle,
            Self::NoisyOracle { sigma } => Estimator::NoisyOracle { sigma: *sigma },
            Self::Checkpoint { variant, path } => {
                let (model_cfg, bank) = variant_setup(config, *variant);
                let params = load_checkpoint(path, &model_cfg)
                    .map_err(|e| anyhow!("loading {}: {e}", path.display()))?;
                Estimator::Learned {
                    params: Box::new(params),
                    model: model_cfg,
                    bank,
                }
            }
        })
    }
}

/// One evaluation row: a variant at one tolerance tier.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResultRow {
    pub variant: String,
    pub tier: String,
    pub tolerance_m: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_ce_m: f64,
    pub std_ce_m: f64,
    pub fov_failures: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn row(&self, variant: &str, tier: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.tier == tier)
    }

    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<18} {:<8} {:>12} {:>8} {:>8} {:>12} {:>12} {:>6}\n",
            "variant", "tier", "tolerance_m", "trials", "SR", "CE_mean_m", "CE_std_m", "fov"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<18} {:<8} {:>12.4} {:>8} {:>7.1}% {:>12.6} {:>12.6} {:>6}\n",
                r.variant,
                r.tier,
                r.tolerance_m,
                r.trials,
                r.success_rate * 100.0,
                r.mean_ce_m,
                r.std_ce_m,
                r.fov_failures
            ));
        }
        out
    }
}

fn eval_one(
    config: &ExperimentConfig,
    estimator: &Estimator,
    label: &str,
    tier: (&str, f64),
    trials: usize,
    seed: u64,
) -> Result<ResultRow> {
    let rig = config.build_rig()?;
    let servo_cfg = config.build_servo(tier.1);
    let outcomes: Vec<Result<ServoOutcome>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 3, t as u64));
            run_servo(&rig, estimator, &servo_cfg, &mut rng).map_err(|e| anyhow!("trial {t}: {e}"))
        })
        .collect();

    let mut successes = 0;
    let mut fov_failures = 0;
    let mut errors = Vec::with_capacity(trials);
    for outcome in outcomes {
        let outcome = outcome?;
        if outcome.success {
            successes += 1;
        }
        if outcome.failure.is_some() {
            fov_failures += 1;
        }
        errors.push(outcome.final_error);
    }
    let n = errors.len().max(1) as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(ResultRow {
        variant: label.to_string(),
        tier: tier.0.to_string(),
        tolerance_m: tier.1,
        trials,
        successes,
        success_rate: if trials == 0 {
            0.0
        } else {
            successes as f64 / trials as f64
        },
        mean_ce_m: mean,
        std_ce_m: var.sqrt(),
        fov_failures,
    })
}

/// Evaluates each estimator at every tolerance tier over seeded trials.
/// Trials are derived from (seed, trial index), so the same seed yields the
/// same table regardless of worker count or estimator order.
pub fn run_eval(
    config: &ExperimentConfig,
    estimators: &[EstimatorSpec],
    run_dir: &Path,
    trials: usize,
    seed: u64,
) -> Result<ResultTable> {
    fs::create_dir_all(run_dir)?;
    let tiers = [
        ("coarse", config.eval.tier_coarse),
        ("medium", config.eval.tier_medium),
        ("fine", config.eval.tier_fine),
    ];
    let mut table = ResultTable::default();
    for spec in estimators {
        let estimator = spec.build(config)?;
        let label = spec.label();
        for tier in tiers {
            table
                .rows
                .push(eval_one(config, &estimator, &label, tier, trials, seed)?);
        }
    }

    let results_path = run_dir.join("results.csv");
    let mut w = csv::Writer::from_path(&results_path)?;
    w.write_record([
        "variant",
        "tier",
        "tolerance_m",
        "trials",
        "successes",
        "success_rate",
        "mean_ce_m",
        "std_ce_m",
        "fov_failures",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.variant.clone(),
            r.tier.clone(),
            format!("{:.6}", r.tolerance_m),
            r.trials.to_string(),
            r.successes.to_string(),
            format!("{:.6}", r.success_rate),
            format!("{:.9}", r.mean_ce_m),
            format!("{:.9}", r.std_ce_m),
            r.fov_failures.to_string(),
        ])?;
    }
    w.flush()?;
    fs::write(run_dir.join("results.txt"), table.to_text())?;
    write_manifest(
        run_dir,
        "eval",
        config,
        seed,
        &[("results", sha256_file(&results_path)?)],
    )?;
    Ok(table)
}

/// Runs seeded servo trials and exports one trace CSV per trial plus a
/// summary CSV.
pub fn run_servo_cmd(
    config: &ExperimentConfig,
    spec: &EstimatorSpec,
    run_dir: &Path,
    trials: usize,
    seed: u64,
) -> Result<Vec<ServoOutcome>> {
    fs::create_dir_all(run_dir)?;
    let rig = config.build_rig()?;
    let servo_cfg = config.build_servo(config.eval.tier_coarse);
    let estimator = spec.build(config)?;

    let mut outcomes = Vec::with_capacity(trials);
    let mut summary = csv::Writer::from_path(run_dir.join("trials.csv"))?;
    summary.write_record(["trial", "success", "final_error_m", "ticks", "failure"])?;
    for t in 0..trials {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 3, t as u64));
        let outcome = run_servo(&rig, &estimator, &servo_cfg, &mut rng)?;
        write_trace_csv(&run_dir.join(format!("trace_{t:03}.csv")), &outcome)?;
        summary.write_record([
            t.to_string(),
            outcome.success.to_string(),
            format!("{:.9}", outcome.final_error),
            outcome.trace.records.len().to_string(),
            outcome.failure.clone().unwrap_or_default(),
        ])?;
        outcomes.push(outcome);
    }
    summary.flush()?;
    write_manifest(run_dir, "servo", config, seed, &[])?;
    Ok(outcomes)
}

pub fn write_trace_csv(path: &Path, outcome: &ServoOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "t",
        "err_x",
        "err_y",
        "err_z",
        "err_norm",
        "est_x",
        "est_y",
        "est_z",
        "selected_head",
        "vel_x",
        "vel_y",
        "vel_z",
        "ik_residual",
    ])?;
    for r in &outcome.trace.records {
        let est = r.estimate.unwrap_or_else(nalgebra::Vector3::zeros);
        w.write_record([
            format!("{:.4}", r.t),
            format!("{:.9}", r.true_distance.x),
            format!("{:.9}", r.true_distance.y),
            format!("{:.9}", r.true_distance.z),
            format!("{:.9}", r.true_distance.norm()),
            format!("{:.9}", est.x),
            format!("{:.9}", est.y),
            format!("{:.9}", est.z),
            r.selected_head.map(|h| h.to_string()).unwrap_or_default(),
            format!("{:.9}", r.commanded_velocity.x),
            format!("{:.9}", r.commanded_velocity.y),
            format!("{:.9}", r.commanded_velocity.z),
            format!("{:.3e}", r.ik_residual),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Emits per-head loss-weight samples over [0, 0.14] m at 0.5 mm steps.
pub fn run_gcw_table(config: &ExperimentConfig, run_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(run_dir)?;
    let bank = config.build_bank()?;
    let path = run_dir.join("gcw.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["x_m".to_string()];
    header.extend((1..=bank.len()).map(|i| format!("head{i}")));
    w.write_record(&header)?;
    let steps = (0.14 / 0.0005) as usize;
    for i in 0..=steps {
        let x = i as f64 * 0.0005;
        let mut row = vec![format!("{x:.4}")];
        row.extend(bank.heads.iter().map(|h| format!("{:.9}", gcw(h, x))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(path)
}

/// Scripted degenerate geometry: the tool tip sits on the line between the
/// head camera and the screw center, where the head view alone cannot see
/// the misalignment. Returns how many of the seeded instances the model
/// decodes to an error below `tolerance`.
pub fn run_degenerate_eval(
    config: &ExperimentConfig,
    checkpoint: &Path,
    variant: Variant,
    instances: usize,
    tolerance: f64,
    seed: u64,
) -> Result<(usize, usize)> {
    let rig = config.build_rig()?;
    let (model_cfg, bank) = variant_setup(config, variant);
    let params =
        load_checkpoint(checkpoint, &model_cfg).map_err(|e| anyhow!("loading checkpoint: {e}"))?;
    let nominal_rot = forward_kinematics(&rig.chain, &rig.nominal_q)
        .map_err(|e| anyhow!("{e}"))?
        .rotation;

    let mut ok = 0;
    for i in 0..instances {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 4, i as u64));
        let s = &rig.sampling;
        let mut placed = false;
        for _ in 0..s.max_view_retries {
            let screw_pos = nalgebra::Vector3::new(
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
                    + nalgebra::Vector3::new(
                        rng.random_range(-s.grasp_jitter..s.grasp_jitter),
                        rng.random_range(-s.grasp_jitter..s.grasp_jitter),
                        rng.random_range(-s.grasp_jitter..s.grasp_jitter),
                    ),
            );
            let r = s.head_angle_range;
            let head_yaw = rng.random_range(-r..r);
            let head_pitch = rng.random_range(-r..r);
            let cam_pos = rig
                .cameras
                .head_camera_pose(head_yaw, head_pitch)
                .map_err(|e| anyhow!("{e}"))?
                .translation;

            // Tip on the camera-to-screw line, close range.
            let dir = (cam_pos - screw_pos).normalize();
            let t = rng.random_range(0.003..0.015);
            let tip = screw_pos + dir * t;
            let d_r = tip - screw_pos;

            let ee_pos = tip - nominal_rot * grasp.translation;
            let state = SceneState {
                end_effector_pose: Pose::new(nominal_rot, ee_pos),
                grasp_transform: grasp,
                screw_pose,
                head_yaw,
                head_pitch,
            };
            if !features_in_view(&state, &rig.cameras, &rig.render) {
                continue;
            }
            // Confirm the arm can actually realize the pose before scoring.
            let ik = solve_ik(
                &rig.chain,
                &IkTarget::Pose {
                    pose: state.end_effector_pose.clone(),
                    rotation_weight: 1.0,
                },
                &rig.nominal_q,
                &IkParams {
                    tol: 1e-14,
                    max_iter: 300,
                },
            )
            .map_err(|e| anyhow!("{e}"))?;
            if ik.residual > 1e-6 {
                continue;
            }

            let obs = render_observation(&state, &rig.cameras, &rig.render, &rig.noise, &mut rng)
                .map_err(|e| anyhow!("{e}"))?;
            let pred = forward(&obs, &params, &model_cfg).map_err(|e| anyhow!("{e}"))?;
            let (_, decoded) = select_and_decode(&pred, &bank);
            if (decoded - d_r).norm() < tolerance {
                ok += 1;
            }
            placed = true;
            break;
        }
        if !placed {
            bail!("instance {i}: no in-view degenerate placement found");
        }
    }
    Ok((ok, instances))
}

/// Prints a one-line summary of a generation report.
pub fn format_gen_report(report: &GenDataReport, bank: &HeadBank) -> String {
    let mut out = format!(
        "wrote {} samples from {} groups to {}\nnorm histogram:",
        report.samples,
        report.groups,
        report.dataset_path.display()
    );
    for (i, (head, count)) in bank.heads.iter().zip(&report.per_head_counts).enumerate() {
        out.push_str(&format!(
            "\n  head{} [{:.3}, {:.3}) m: {}",
            i + 1,
            head.lo,
            head.hi,
            count
        ));
    }
    out
}

/// Writes text to a file, creating parents.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
