use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use tinyalign_core::dataset::read_dataset;
use tinyalign_core::model::*;

#[test]
fn probe_token_scales() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let params = NetworkParams::init(&cfg, &mut rng).unwrap();
    let ds = read_dataset(std::path::Path::new("/tmp/run2/dataset.tads")).unwrap();

    // Token content magnitude: tokenize two different observations and
    // subtract the shared position table (tokens = content + table).
    let t0 = tokenize_image(&ds.samples[0].observation.head_image, &params.head_tokenizer, &cfg).unwrap();
    let t1 = tokenize_image(&ds.samples[10].observation.head_image, &params.head_tokenizer, &cfg).unwrap();
    let diff = (&t0 - &t1).mapv(f64::abs).mean().unwrap();
    let abs0 = t0.mapv(f64::abs).mean().unwrap();
    println!("mean |token| = {abs0:.4}, mean |token diff across samples| = {diff:.5}");

    // Prediction spread across the dataset with random params.
    let mut preds = Vec::new();
    for s in ds.samples.iter().take(12) {
        let p = forward(&s.observation, &params, &cfg).unwrap();
        preds.push(p);
    }
    let l0: Vec<f64> = preds.iter().map(|p| p.logits[0]).collect();
    let d0: Vec<f64> = preds.iter().map(|p| p.distances[0].x).collect();
    println!("logit[0] across samples: {:?}", l0.iter().map(|v| (v*1e4).round()/1e4).collect::<Vec<_>>());
    println!("dist[0].x across samples: {:?}", d0.iter().map(|v| (v*1e4).round()/1e4).collect::<Vec<_>>());
}
