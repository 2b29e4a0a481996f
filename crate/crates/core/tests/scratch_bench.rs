use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use nalgebra::Vector3;
use tinyalign_core::dataset::encode_targets;
use tinyalign_core::model::*;
use tinyalign_core::mph::*;
use tinyalign_core::scene::{Image, Observation};

#[test]
fn bench_forward_backward() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let params = NetworkParams::init(&cfg, &mut rng).unwrap();
    println!("param count: {}", params.param_count());
    let obs = Observation {
        head_image: Image { width: 64, height: 64, pixels: (0..64*64).map(|_| rng.random_range(0.0..1.0)).collect() },
        torso_image: Image { width: 64, height: 64, pixels: (0..64*64).map(|_| rng.random_range(0.0..1.0)).collect() },
        head_yaw: 0.02, head_pitch: -0.03,
    };
    let bank = HeadBank::default_four();
    let d_r = Vector3::new(0.01, 0.02, -0.005);
    let target = encode_targets(&d_r, &bank).unwrap();
    let lc = LossConfig::default();

    let t0 = std::time::Instant::now();
    let n = 20;
    for _ in 0..n {
        let _ = forward(&obs, &params, &cfg).unwrap();
    }
    println!("forward: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t0 = std::time::Instant::now();
    let mut grads = NetworkParams::zeros(&cfg).unwrap();
    for _ in 0..n {
        let pass = forward_with_cache(&obs, &params, &cfg).unwrap();
        let (dd, dl) = mph_loss_grad(&pass.prediction, &target, d_r.norm(), &bank, &lc).unwrap();
        backward(&pass, &params, &cfg, &dd, &dl, &mut grads);
    }
    println!("fwd+bwd: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
