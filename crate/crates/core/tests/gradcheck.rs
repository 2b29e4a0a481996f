//! Full-network gradient checks: analytic reverse-mode gradients of
//! `mph_loss ∘ forward` against central finite differences, on a tiny
//! configuration small enough to probe hundreds of parameters.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use tinyalign_core::dataset::encode_targets;
use tinyalign_core::model::{
    backward, forward, forward_with_cache, Arch, ModelConfig, NetworkParams,
};
use tinyalign_core::mph::{mph_loss, mph_loss_grad, EncodedTarget, HeadBank, LossConfig};
use tinyalign_core::scene::{Image, Observation};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        conv_channels: vec![4, 8],
        embed_dim: 16,
        attn_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_dim: 32,
        n_heads: 4,
        head_hidden: 16,
        arch: Arch::Transformer,
    }
}

fn random_image(rng: &mut ChaCha12Rng, size: u32) -> Image {
    Image {
        width: size,
        height: size,
        pixels: (0..size * size)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    }
}

fn random_obs(rng: &mut ChaCha12Rng, size: u32) -> Observation {
    Observation {
        head_image: random_image(rng, size),
        torso_image: random_image(rng, size),
        head_yaw: rng.random_range(-0.2..0.2),
        head_pitch: rng.random_range(-0.2..0.2),
    }
}

fn loss_of(
    obs: &Observation,
    params: &NetworkParams,
    cfg: &ModelConfig,
    target: &EncodedTarget,
    d_r_norm: f64,
    bank: &HeadBank,
    loss_cfg: &LossConfig,
) -> f64 {
    let pred = forward(obs, params, cfg).unwrap();
    mph_loss(&pred, target, d_r_norm, bank, loss_cfg).unwrap()
}

fn analytic_grads(
    obs: &Observation,
    params: &NetworkParams,
    cfg: &ModelConfig,
    target: &EncodedTarget,
    d_r_norm: f64,
    bank: &HeadBank,
    loss_cfg: &LossConfig,
) -> NetworkParams {
    let pass = forward_with_cache(obs, params, cfg).unwrap();
    let (d_dist, d_logits) =
        mph_loss_grad(&pass.prediction, target, d_r_norm, bank, loss_cfg).unwrap();
    let mut grads = NetworkParams::zeros(cfg).unwrap();
    backward(&pass, params, cfg, &d_dist, &d_logits, &mut grads);
    grads
}

/// Probes `per_tensor` indices of every tensor with central differences.
/// Gradient pairs below the finite-difference noise floor are counted as
/// agreeing; everything else must match to `tol` relative error.
fn run_gradcheck(cfg: &ModelConfig, seed: u64, per_tensor: usize, tol: f64) -> usize {
    let bank = match cfg.n_heads {
        4 => HeadBank::default_four(),
        1 => HeadBank::single(20.0, 0.128),
        n => panic!("no bank for {n} heads"),
    };
    let loss_cfg = LossConfig { k: 1.0 };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = NetworkParams::init(cfg, &mut rng).unwrap();
    let obs = random_obs(&mut rng, cfg.image_size);
    // A distance in the second head's band keeps every head's loss weight
    // far from zero, so all head paths carry meaningful gradients.
    let d_r = Vector3::new(0.012, -0.014, 0.009);
    let target = encode_targets(&d_r, &bank).unwrap();
    let d_r_norm = d_r.norm();

    let grads = analytic_grads(&obs, &params, cfg, &target, d_r_norm, &bank, &loss_cfg);
    let names: Vec<(String, usize)> = grads
        .tensors()
        .iter()
        .map(|(n, _, d)| (n.clone(), d.len()))
        .collect();

    let h = 1e-5;
    let mut checked = 0;
    for (tensor_idx, (name, len)) in names.iter().enumerate() {
        for k in 0..per_tensor.min(*len) {
            let idx = if *len <= per_tensor {
                k
            } else {
                (k * 7919 + 13) % len
            };
            let analytic = grads.tensors()[tensor_idx].2[idx];

            let eval = |delta: f64, params: &mut NetworkParams| {
                params.tensors_mut()[tensor_idx].1[idx] += delta;
                let l = loss_of(&obs, params, cfg, &target, d_r_norm, &bank, &loss_cfg);
                params.tensors_mut()[tensor_idx].1[idx] -= delta;
                l
            };
            let lp = eval(h, &mut params);
            let lm = eval(-h, &mut params);
            let fd = (lp - lm) / (2.0 * h);

            let denom = fd.abs().max(analytic.abs());
            if denom < 1e-7 {
                checked += 1;
                continue;
            }
            let rel = (fd - analytic).abs() / denom;
            assert!(
                rel < tol,
                "{name}[{idx}]: fd {fd:.3e} vs analytic {analytic:.3e} (rel {rel:.3e})"
            );
            checked += 1;
        }
    }
    checked
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let checked = run_gradcheck(&tiny_config(), 42, 3, 1e-4);
    assert!(checked >= 200, "only {checked} parameters probed");
}

#[test]
fn plain_trunk_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        arch: Arch::PlainMlp,
        n_heads: 1,
        ..tiny_config()
    };
    let checked = run_gradcheck(&cfg, 43, 3, 1e-4);
    assert!(checked >= 50, "only {checked} parameters probed");
}

#[test]
fn zero_adjoint_gives_zero_gradients() {
    let cfg = tiny_config();
    let mut rng = ChaCha12Rng::seed_from_u64(44);
    let params = NetworkParams::init(&cfg, &mut rng).unwrap();
    let obs = random_obs(&mut rng, cfg.image_size);
    let pass = forward_with_cache(&obs, &params, &cfg).unwrap();
    let mut grads = NetworkParams::zeros(&cfg).unwrap();
    backward(
        &pass,
        &params,
        &cfg,
        &vec![Vector3::zeros(); cfg.n_heads],
        &vec![0.0; cfg.n_heads],
        &mut grads,
    );
    for (name, _, data) in grads.tensors() {
        assert!(
            data.iter().all(|v| *v == 0.0),
            "{name} has nonzero gradient under zero adjoint"
        );
    }
}

#[test]
fn duplicated_sample_batch_mean_equals_single_gradient() {
    let cfg = tiny_config();
    let bank = HeadBank::default_four();
    let loss_cfg = LossConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(45);
    let params = NetworkParams::init(&cfg, &mut rng).unwrap();
    let obs = random_obs(&mut rng, cfg.image_size);
    let d_r = Vector3::new(0.02, 0.01, -0.01);
    let target = encode_targets(&d_r, &bank).unwrap();

    let single = analytic_grads(&obs, &params, &cfg, &target, d_r.norm(), &bank, &loss_cfg);

    // Batch of two copies: accumulate and divide by the batch size.
    let mut batch = NetworkParams::zeros(&cfg).unwrap();
    for _ in 0..2 {
        let g = analytic_grads(&obs, &params, &cfg, &target, d_r.norm(), &bank, &loss_cfg);
        batch.add_scaled(&g, 1.0);
    }
    batch.scale(0.5);

    for ((name, _, a), (_, _, b)) in batch.tensors().iter().zip(single.tensors().iter()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12, "{name} batch-mean mismatch");
        }
    }
}
