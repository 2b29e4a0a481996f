//! Network assembly: tokenizers → token sequence → trunk → heads, with the
//! matching reverse pass. Every forward stores exactly the intermediates its
//! backward needs, so `backward` is exact reverse-mode differentiation of
//! `forward` (checked against central finite differences in the tests).

use nalgebra::Vector3;
use ndarray::{Array2, Axis};

use super::layers::{
    attention_backward, attention_forward, conv_backward, conv_forward, gelu_backward,
    gelu_forward, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward,
    sinusoidal_position_table, AttentionCache, ConvCache, LayerNormCache,
};
use super::{
    DecoderLayerParams, EncoderLayerParams, ModelConfig, ModelError, NetworkParams,
    PlainMlpParams, TokenizerParams, TrunkParams,
};
use crate::mph::Prediction;
use crate::scene::{Image, Observation};

fn image_to_map(img: &Image) -> Array2<f64> {
    Array2::from_shape_vec(
        ((img.width * img.height) as usize, 1),
        img.pixels.iter().map(|&p| p as f64).collect(),
    )
    .expect("pixel count matches dims")
}

fn check_finite(x: &Array2<f64>, stage: &str) -> Result<(), ModelError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite {
            stage: stage.to_string(),
        })
    }
}

pub(super) struct TokenizerCache {
    /// Per conv layer: im2col cache, the normalization cache, and the
    /// pre-activation (post-norm) map feeding the nonlinearity.
    convs: Vec<(ConvCache, LayerNormCache, Array2<f64>)>,
    /// Input to the projection (post-activation of the last conv).
    proj_in: Array2<f64>,
}

fn tokenize_with_cache(
    img: &Image,
    tok: &TokenizerParams,
    cfg: &ModelConfig,
    label: &str,
) -> Result<(Array2<f64>, TokenizerCache), ModelError> {
    if img.width != cfg.image_size || img.height != cfg.image_size {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{0}x{0} image", cfg.image_size),
            got: format!("{}x{}", img.width, img.height),
        });
    }
    let mut x = image_to_map(img);
    let mut h = img.height as usize;
    let mut w = img.width as usize;
    let mut convs = Vec::with_capacity(tok.convs.len());
    for (conv, norm) in tok.convs.iter().zip(&tok.norms) {
        let (z, cache) = conv_forward(&x, h, w, conv);
        let (normed, norm_cache) = layer_norm_forward(&z, norm);
        x = gelu_forward(&normed);
        convs.push((cache, norm_cache, normed));
        h /= super::layers::CONV_STRIDE;
        w /= super::layers::CONV_STRIDE;
    }
    let proj_in = x;
    let mut tokens = linear_forward(&proj_in, &tok.proj);
    tokens += &sinusoidal_position_table(cfg.token_grid(), cfg.embed_dim);
    check_finite(&tokens, label)?;
    Ok((tokens, TokenizerCache { convs, proj_in }))
}

fn tokenizer_backward(
    cache: &TokenizerCache,
    d_tokens: &Array2<f64>,
    tok: &TokenizerParams,
    grad: &mut TokenizerParams,
) {
    // Position table is fixed, so the gradient passes straight through
    // the addition into the projection.
    let mut dx = linear_backward(&cache.proj_in, d_tokens, &tok.proj, &mut grad.proj);
    for (i, (conv_cache, norm_cache, normed)) in cache.convs.iter().enumerate().rev() {
        let d_normed = gelu_backward(normed, &dx);
        let dz = layer_norm_backward(norm_cache, &d_normed, &tok.norms[i], &mut grad.norms[i]);
        dx = conv_backward(conv_cache, &dz, &tok.convs[i], &mut grad.convs[i]);
    }
    // dx now holds the image gradient, which has no consumers.
}

/// Image token sequence: conv stack features flattened row-major, projected
/// to the embedding dimension, plus the fixed 2D sinusoidal table.
pub fn tokenize_image(
    img: &Image,
    tok: &TokenizerParams,
    cfg: &ModelConfig,
) -> Result<Array2<f64>, ModelError> {
    tokenize_with_cache(img, tok, cfg, "tokenizer").map(|(t, _)| t)
}

/// The joint-angle token: linear(2 → d) on [yaw, pitch] plus a learnable
/// positional embedding.
pub fn embed_angles(yaw: f64, pitch: f64, params: &NetworkParams) -> Array2<f64> {
    let input = Array2::from_shape_vec((1, 2), vec![yaw, pitch]).expect("2 angles");
    let mut token = linear_forward(&input, &params.angle_proj);
    token += &params.angle_pos;
    token
}

struct EncoderLayerCache {
    ln1: LayerNormCache,
    ln1_out: Array2<f64>,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    ff_z: Array2<f64>,
    ff_g: Array2<f64>,
}

fn encoder_layer_forward(
    x: &Array2<f64>,
    p: &EncoderLayerParams,
    n_attn: usize,
) -> (Array2<f64>, EncoderLayerCache) {
    let (ln1_out, ln1) = layer_norm_forward(x, &p.ln1);
    let (attn_out, attn) = attention_forward(&ln1_out, &ln1_out, &p.attn, n_attn);
    let mid = x + &attn_out;
    let (ln2_out, ln2) = layer_norm_forward(&mid, &p.ln2);
    let ff_z = linear_forward(&ln2_out, &p.ff1);
    let ff_g = gelu_forward(&ff_z);
    let out = &mid + &linear_forward(&ff_g, &p.ff2);
    (
        out,
        EncoderLayerCache {
            ln1,
            ln1_out,
            attn,
            ln2,
            ln2_out,
            ff_z,
            ff_g,
        },
    )
}

fn encoder_layer_backward(
    cache: &EncoderLayerCache,
    dy: &Array2<f64>,
    p: &EncoderLayerParams,
    grad: &mut EncoderLayerParams,
    n_attn: usize,
) -> Array2<f64> {
    let d_ff_g = linear_backward(&cache.ff_g, dy, &p.ff2, &mut grad.ff2);
    let d_ff_z = gelu_backward(&cache.ff_z, &d_ff_g);
    let d_ln2_out = linear_backward(&cache.ln2_out, &d_ff_z, &p.ff1, &mut grad.ff1);
    let mut d_mid = dy.clone();
    d_mid += &layer_norm_backward(&cache.ln2, &d_ln2_out, &p.ln2, &mut grad.ln2);

    let (dxq, dxkv) = attention_backward(
        &cache.ln1_out,
        &cache.ln1_out,
        &cache.attn,
        &d_mid,
        &p.attn,
        &mut grad.attn,
        n_attn,
    );
    let d_ln1_out = dxq + dxkv;
    let mut dx = d_mid;
    dx += &layer_norm_backward(&cache.ln1, &d_ln1_out, &p.ln1, &mut grad.ln1);
    dx
}

struct DecoderLayerCache {
    ln1: LayerNormCache,
    ln1_out: Array2<f64>,
    self_attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    cross_attn: AttentionCache,
    ln3: LayerNormCache,
    ln3_out: Array2<f64>,
    ff_z: Array2<f64>,
    ff_g: Array2<f64>,
}

fn decoder_layer_forward(
    tgt: &Array2<f64>,
    memory: &Array2<f64>,
    p: &DecoderLayerParams,
    n_attn: usize,
) -> (Array2<f64>, DecoderLayerCache) {
    let (ln1_out, ln1) = layer_norm_forward(tgt, &p.ln1);
    let (sa, self_attn) = attention_forward(&ln1_out, &ln1_out, &p.self_attn, n_attn);
    let a = tgt + &sa;
    let (ln2_out, ln2) = layer_norm_forward(&a, &p.ln2);
    let (ca, cross_attn) = attention_forward(&ln2_out, memory, &p.cross_attn, n_attn);
    let b = &a + &ca;
    let (ln3_out, ln3) = layer_norm_forward(&b, &p.ln3);
    let ff_z = linear_forward(&ln3_out, &p.ff1);
    let ff_g = gelu_forward(&ff_z);
    let out = &b + &linear_forward(&ff_g, &p.ff2);
    (
        out,
        DecoderLayerCache {
            ln1,
            ln1_out,
            self_attn,
            ln2,
            ln2_out,
            cross_attn,
            ln3,
            ln3_out,
            ff_z,
            ff_g,
        },
    )
}

/// Returns d_tgt; adds the cross-attention contribution into `d_memory`.
fn decoder_layer_backward(
    cache: &DecoderLayerCache,
    memory: &Array2<f64>,
    dy: &Array2<f64>,
    p: &DecoderLayerParams,
    grad: &mut DecoderLayerParams,
    d_memory: &mut Array2<f64>,
    n_attn: usize,
) -> Array2<f64> {
    let d_ff_g = linear_backward(&cache.ff_g, dy, &p.ff2, &mut grad.ff2);
    let d_ff_z = gelu_backward(&cache.ff_z, &d_ff_g);
    let d_ln3_out = linear_backward(&cache.ln3_out, &d_ff_z, &p.ff1, &mut grad.ff1);
    let mut d_b = dy.clone();
    d_b += &layer_norm_backward(&cache.ln3, &d_ln3_out, &p.ln3, &mut grad.ln3);

    let (d_ln2_out, d_mem) = attention_backward(
        &cache.ln2_out,
        memory,
        &cache.cross_attn,
        &d_b,
        &p.cross_attn,
        &mut grad.cross_attn,
        n_attn,
    );
    *d_memory += &d_mem;
    let mut d_a = d_b;
    d_a += &layer_norm_backward(&cache.ln2, &d_ln2_out, &p.ln2, &mut grad.ln2);

    let (dxq, dxkv) = attention_backward(
        &cache.ln1_out,
        &cache.ln1_out,
        &cache.self_attn,
        &d_a,
        &p.self_attn,
        &mut grad.self_attn,
        n_attn,
    );
    let d_ln1_out = dxq + dxkv;
    let mut d_tgt = d_a;
    d_tgt += &layer_norm_backward(&cache.ln1, &d_ln1_out, &p.ln1, &mut grad.ln1);
    d_tgt
}

struct TransformerCache {
    encoder: Vec<EncoderLayerCache>,
    enc_norm: LayerNormCache,
    memory: Array2<f64>,
    decoder: Vec<DecoderLayerCache>,
    dec_norm: LayerNormCache,
}

struct PlainCache {
    tokens_head_rows: usize,
    tokens_torso_rows: usize,
    concat: Array2<f64>,
    z1: Array2<f64>,
    g1: Array2<f64>,
}

fn flatten_rows(m: &Array2<f64>) -> Vec<f64> {
    m.iter().cloned().collect()
}

enum TrunkCache {
    Transformer(TransformerCache),
    Plain(PlainCache),
}

struct HeadCache {
    input: Array2<f64>,
    z1: Array2<f64>,
    g1: Array2<f64>,
    z2: Array2<f64>,
    g2: Array2<f64>,
}

/// Recorded forward pass: the prediction plus everything `backward` needs.
pub struct ForwardPass {
    pub prediction: Prediction,
    head_tok: TokenizerCache,
    torso_tok: TokenizerCache,
    angle_yaw: f64,
    angle_pitch: f64,
    trunk: TrunkCache,
    /// (n_heads, d) features feeding the output heads.
    features: Array2<f64>,
    heads: Vec<HeadCache>,
}

fn trunk_transformer_forward(
    memory_in: Array2<f64>,
    t: &super::TransformerParams,
    cfg: &ModelConfig,
) -> Result<(Array2<f64>, TrunkCache), ModelError> {
    let mut x = memory_in;
    let mut enc_caches = Vec::with_capacity(t.encoder.len());
    for (i, layer) in t.encoder.iter().enumerate() {
        let (next, cache) = encoder_layer_forward(&x, layer, cfg.attn_heads);
        check_finite(&next, &format!("encoder layer {i}"))?;
        enc_caches.push(cache);
        x = next;
    }
    let (memory, enc_norm) = layer_norm_forward(&x, &t.encoder_norm);

    let mut tgt = t.queries.clone();
    let mut dec_caches = Vec::with_capacity(t.decoder.len());
    for (i, layer) in t.decoder.iter().enumerate() {
        let (next, cache) = decoder_layer_forward(&tgt, &memory, layer, cfg.attn_heads);
        check_finite(&next, &format!("decoder layer {i}"))?;
        dec_caches.push(cache);
        tgt = next;
    }
    let (features, dec_norm) = layer_norm_forward(&tgt, &t.decoder_norm);
    Ok((
        features,
        TrunkCache::Transformer(TransformerCache {
            encoder: enc_caches,
            enc_norm,
            memory,
            decoder: dec_caches,
            dec_norm,
        }),
    ))
}

fn trunk_plain_forward(
    tokens_head: &Array2<f64>,
    tokens_torso: &Array2<f64>,
    angle_token: &Array2<f64>,
    p: &PlainMlpParams,
    cfg: &ModelConfig,
) -> Result<(Array2<f64>, TrunkCache), ModelError> {
    // Tokens are flattened, not pooled: pooling would average away the
    // spatial layout the regression depends on.
    let d = cfg.embed_dim;
    let n = tokens_head.nrows() + tokens_torso.nrows();
    let mut concat = Array2::zeros((1, (n + 1) * d));
    let mut flat = flatten_rows(tokens_head);
    flat.extend(flatten_rows(tokens_torso));
    flat.extend(angle_token.row(0).iter().cloned());
    concat
        .row_mut(0)
        .assign(&ndarray::Array1::from_vec(flat));
    let z1 = linear_forward(&concat, &p.lin1);
    let g1 = gelu_forward(&z1);
    let features = linear_forward(&g1, &p.lin2);
    check_finite(&features, "plain trunk")?;
    Ok((
        features,
        TrunkCache::Plain(PlainCache {
            tokens_head_rows: tokens_head.nrows(),
            tokens_torso_rows: tokens_torso.nrows(),
            concat,
            z1,
            g1,
        }),
    ))
}

/// Forward pass keeping the cache for a later [`backward`].
pub fn forward_with_cache(
    obs: &Observation,
    params: &NetworkParams,
    cfg: &ModelConfig,
) -> Result<ForwardPass, ModelError> {
    cfg.validate()?;
    let (tokens_head, head_tok) =
        tokenize_with_cache(&obs.head_image, &params.head_tokenizer, cfg, "head tokenizer")?;
    let (tokens_torso, torso_tok) = tokenize_with_cache(
        &obs.torso_image,
        &params.torso_tokenizer,
        cfg,
        "torso tokenizer",
    )?;
    let angle_token = embed_angles(obs.head_yaw, obs.head_pitch, params);

    let (features, trunk) = match &params.trunk {
        TrunkParams::Transformer(t) => {
            let mut memory_in = Array2::zeros((
                tokens_head.nrows() + tokens_torso.nrows() + 1,
                cfg.embed_dim,
            ));
            memory_in
                .slice_mut(ndarray::s![0..tokens_head.nrows(), ..])
                .assign(&tokens_head);
            memory_in
                .slice_mut(ndarray::s![
                    tokens_head.nrows()..tokens_head.nrows() + tokens_torso.nrows(),
                    ..
                ])
                .assign(&tokens_torso);
            let last = memory_in.nrows() - 1;
            memory_in
                .slice_mut(ndarray::s![last..last + 1, ..])
                .assign(&angle_token);
            trunk_transformer_forward(memory_in, t, cfg)?
        }
        TrunkParams::Plain(p) => {
            trunk_plain_forward(&tokens_head, &tokens_torso, &angle_token, p, cfg)?
        }
    };

    let mut distances = Vec::with_capacity(cfg.n_heads);
    let mut logits = Vec::with_capacity(cfg.n_heads);
    let mut head_caches = Vec::with_capacity(cfg.n_heads);
    for (h, head) in params.heads.iter().enumerate() {
        let input = features.row(h).insert_axis(Axis(0)).to_owned();
        let z1 = linear_forward(&input, &head.lin1);
        let g1 = gelu_forward(&z1);
        let z2 = linear_forward(&g1, &head.lin2);
        let g2 = gelu_forward(&z2);
        let out = linear_forward(&g2, &head.lin3);
        check_finite(&out, &format!("head {h}"))?;
        distances.push(Vector3::new(out[(0, 0)], out[(0, 1)], out[(0, 2)]));
        logits.push(linear_forward(&input, &params.confidence)[(0, 0)]);
        head_caches.push(HeadCache {
            input,
            z1,
            g1,
            z2,
            g2,
        });
    }

    Ok(ForwardPass {
        prediction: Prediction { distances, logits },
        head_tok,
        torso_tok,
        angle_yaw: obs.head_yaw,
        angle_pitch: obs.head_pitch,
        trunk,
        features,
        heads: head_caches,
    })
}

/// Forward pass without gradient bookkeeping.
pub fn forward(
    obs: &Observation,
    params: &NetworkParams,
    cfg: &ModelConfig,
) -> Result<Prediction, ModelError> {
    forward_with_cache(obs, params, cfg).map(|p| p.prediction)
}

/// Exact reverse-mode gradients of the recorded forward pass, given the loss
/// adjoints with respect to the per-head distances and the confidence
/// logits. Gradients are accumulated into `grads` (zero it for a fresh
/// gradient, keep accumulating for a batch sum).
pub fn backward(
    pass: &ForwardPass,
    params: &NetworkParams,
    cfg: &ModelConfig,
    d_distances: &[Vector3<f64>],
    d_logits: &[f64],
    grads: &mut NetworkParams,
) {
    assert_eq!(d_distances.len(), cfg.n_heads);
    assert_eq!(d_logits.len(), cfg.n_heads);

    // Heads and confidence back to the trunk features.
    let mut d_features = Array2::zeros(pass.features.raw_dim());
    for (h, (head, cache)) in params.heads.iter().zip(&pass.heads).enumerate() {
        let d_out = Array2::from_shape_vec(
            (1, 3),
            vec![d_distances[h].x, d_distances[h].y, d_distances[h].z],
        )
        .expect("3 components");
        let d_g2 = linear_backward(&cache.g2, &d_out, &head.lin3, &mut grads.heads[h].lin3);
        let d_z2 = gelu_backward(&cache.z2, &d_g2);
        let d_g1 = linear_backward(&cache.g1, &d_z2, &head.lin2, &mut grads.heads[h].lin2);
        let d_z1 = gelu_backward(&cache.z1, &d_g1);
        let mut d_input = linear_backward(&cache.input, &d_z1, &head.lin1, &mut grads.heads[h].lin1);

        let d_logit = Array2::from_shape_vec((1, 1), vec![d_logits[h]]).expect("scalar");
        d_input += &linear_backward(&cache.input, &d_logit, &params.confidence, &mut grads.confidence);

        d_features
            .row_mut(h)
            .zip_mut_with(&d_input.row(0), |a, b| *a += b);
    }

    // Trunk back to the token sequences.
    let (d_tokens_head, d_tokens_torso, d_angle_token) = match (&params.trunk, &pass.trunk) {
        (TrunkParams::Transformer(t), TrunkCache::Transformer(cache)) => {
            let TrunkParams::Transformer(tg) = &mut grads.trunk else {
                panic!("gradient structure mismatch");
            };
            let mut d_tgt =
                layer_norm_backward(&cache.dec_norm, &d_features, &t.decoder_norm, &mut tg.decoder_norm);
            let mut d_memory = Array2::zeros(cache.memory.raw_dim());
            for ((layer_cache, layer), layer_grad) in cache
                .decoder
                .iter()
                .zip(&t.decoder)
                .zip(tg.decoder.iter_mut())
                .rev()
            {
                d_tgt = decoder_layer_backward(
                    layer_cache,
                    &cache.memory,
                    &d_tgt,
                    layer,
                    layer_grad,
                    &mut d_memory,
                    cfg.attn_heads,
                );
            }
            tg.queries += &d_tgt;

            let mut d_x =
                layer_norm_backward(&cache.enc_norm, &d_memory, &t.encoder_norm, &mut tg.encoder_norm);
            for ((layer_cache, layer), layer_grad) in cache
                .encoder
                .iter()
                .zip(&t.encoder)
                .zip(tg.encoder.iter_mut())
                .rev()
            {
                d_x = encoder_layer_backward(layer_cache, &d_x, layer, layer_grad, cfg.attn_heads);
            }

            let n_img = cfg.tokens_per_image();
            let d_head = d_x.slice(ndarray::s![0..n_img, ..]).to_owned();
            let d_torso = d_x.slice(ndarray::s![n_img..2 * n_img, ..]).to_owned();
            let d_angle = d_x
                .slice(ndarray::s![d_x.nrows() - 1..d_x.nrows(), ..])
                .to_owned();
            (d_head, d_torso, d_angle)
        }
        (TrunkParams::Plain(p), TrunkCache::Plain(cache)) => {
            let TrunkParams::Plain(pg) = &mut grads.trunk else {
                panic!("gradient structure mismatch");
            };
            let d_g1 = linear_backward(&cache.g1, &d_features, &p.lin2, &mut pg.lin2);
            let d_z1 = gelu_backward(&cache.z1, &d_g1);
            let d_concat = linear_backward(&cache.concat, &d_z1, &p.lin1, &mut pg.lin1);

            let d = cfg.embed_dim;
            let nh = cache.tokens_head_rows;
            let nt = cache.tokens_torso_rows;
            let row = d_concat.row(0);
            let take = |start: usize, rows: usize| {
                Array2::from_shape_fn((rows, d), |(i, j)| row[start + i * d + j])
            };
            let d_head = take(0, nh);
            let d_torso = take(nh * d, nt);
            let d_angle = Array2::from_shape_fn((1, d), |(_, j)| row[(nh + nt) * d + j]);
            (d_head, d_torso, d_angle)
        }
        _ => panic!("trunk cache does not match trunk params"),
    };

    tokenizer_backward(
        &pass.head_tok,
        &d_tokens_head,
        &params.head_tokenizer,
        &mut grads.head_tokenizer,
    );
    tokenizer_backward(
        &pass.torso_tok,
        &d_tokens_torso,
        &params.torso_tokenizer,
        &mut grads.torso_tokenizer,
    );

    // Angle token: learnable positional embedding plus the linear layer.
    grads.angle_pos += &d_angle_token.row(0);
    let angle_in = Array2::from_shape_vec((1, 2), vec![pass.angle_yaw, pass.angle_pitch])
        .expect("2 angles");
    let _ = linear_backward(&angle_in, &d_angle_token, &params.angle_proj, &mut grads.angle_proj);
}
