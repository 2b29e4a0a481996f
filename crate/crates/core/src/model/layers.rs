//! Layer primitives with explicit forward/backward pairs.
//!
//! Everything operates on row-major `Array2<f64>` with tokens (or pixels) as
//! rows. Each forward returns whatever intermediate state its backward needs;
//! backwards accumulate parameter gradients with `+=` so one gradient buffer
//! can serve a whole batch.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// (out, in)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearParams {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let s = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-s..s)),
            bias: Array1::zeros(out_dim),
        }
    }
}

/// `Y = X·Wᵀ + b`
pub fn linear_forward(x: &Array2<f64>, p: &LinearParams) -> Array2<f64> {
    let mut y = x.dot(&p.weight.t());
    y += &p.bias;
    y
}

/// Returns dX; accumulates dW/db into `grad`.
pub fn linear_backward(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    p: &LinearParams,
    grad: &mut LinearParams,
) -> Array2<f64> {
    grad.weight += &dy.t().dot(x);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&p.weight)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Smooth GELU (tanh form). Chosen over ReLU so that central finite
/// differences of the whole network are meaningful at step 1e-5.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = x.mapv(gelu_grad);
    dx *= dy;
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn init(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }
}

const LN_EPS: f64 = 1e-5;

pub struct LayerNormCache {
    /// Normalized rows (x − μ)/σ.
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Per-token (per-row) normalization with learned scale and shift.
pub fn layer_norm_forward(x: &Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let mut x_hat = x.clone();
    for (mut row, m) in x_hat.rows_mut().into_iter().zip(mean.iter()) {
        row.mapv_inplace(|v| v - m);
    }
    let inv_std = x_hat
        .rows()
        .into_iter()
        .map(|r| 1.0 / (r.iter().map(|v| v * v).sum::<f64>() / d + LN_EPS).sqrt())
        .collect::<Array1<f64>>();
    for (mut row, s) in x_hat.rows_mut().into_iter().zip(inv_std.iter()) {
        row.mapv_inplace(|v| v * s);
    }
    let mut y = x_hat.clone();
    y *= &p.gamma;
    y += &p.beta;
    (y, LayerNormCache { x_hat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    dy: &Array2<f64>,
    p: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    grad.gamma += &(dy * &cache.x_hat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));

    let g = dy * &p.gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g_row = g.row(i);
        let xh = cache.x_hat.row(i);
        let mean_g = g_row.sum() / d;
        let mean_gx = g_row
            .iter()
            .zip(xh.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / d;
        let s = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[(i, j)] = (g_row[j] - mean_g - xh[j] * mean_gx) * s;
        }
    }
    dx
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

/// dS for `A = softmax_rows(S)`: `A ⊙ (dA − rowsum(dA ⊙ A))`.
pub fn softmax_rows_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = da.clone();
    for i in 0..a.nrows() {
        let dot = a
            .row(i)
            .iter()
            .zip(da.row(i).iter())
            .map(|(p, g)| p * g)
            .sum::<f64>();
        for j in 0..a.ncols() {
            ds[(i, j)] = a[(i, j)] * (da[(i, j)] - dot);
        }
    }
    ds
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
}

impl AttentionParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            wq: LinearParams::zeros(dim, dim),
            wk: LinearParams::zeros(dim, dim),
            wv: LinearParams::zeros(dim, dim),
            wo: LinearParams::zeros(dim, dim),
        }
    }

    pub fn init(dim: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            wq: LinearParams::init(dim, dim, rng),
            wk: LinearParams::init(dim, dim, rng),
            wv: LinearParams::init(dim, dim, rng),
            wo: LinearParams::init(dim, dim, rng),
        }
    }
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax attention matrices, one (n_q, n_kv) per attention head.
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

/// Multi-head scaled dot-product attention. `xq` provides the queries,
/// `xkv` the keys and values (`xq == xkv` for self-attention).
pub fn attention_forward(
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    p: &AttentionParams,
    n_heads: usize,
) -> (Array2<f64>, AttentionCache) {
    let d = xq.ncols();
    debug_assert_eq!(d % n_heads, 0);
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let q = linear_forward(xq, &p.wq);
    let k = linear_forward(xkv, &p.wk);
    let v = linear_forward(xkv, &p.wv);

    let mut concat = Array2::zeros((xq.nrows(), d));
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let scores = qh.dot(&kh.t()) * scale;
        let a = softmax_rows(&scores);
        let oh = a.dot(&vh);
        concat.slice_mut(ndarray::s![.., cols]).assign(&oh);
        attn.push(a);
    }
    let out = linear_forward(&concat, &p.wo);
    (
        out,
        AttentionCache {
            q,
            k,
            v,
            attn,
            concat,
        },
    )
}

/// Returns (dXq, dXkv); the caller adds them into its running gradients
/// (they alias the same tensor for self-attention).
pub fn attention_backward(
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    cache: &AttentionCache,
    dy: &Array2<f64>,
    p: &AttentionParams,
    grad: &mut AttentionParams,
    n_heads: usize,
) -> (Array2<f64>, Array2<f64>) {
    let d = xq.ncols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let d_concat = linear_backward(&cache.concat, dy, &p.wo, &mut grad.wo);

    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        let a = &cache.attn[h];
        let doh = d_concat.slice(ndarray::s![.., cols.clone()]);
        let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
        let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
        let kh = cache.k.slice(ndarray::s![.., cols.clone()]);

        let da = doh.dot(&vh.t());
        dv.slice_mut(ndarray::s![.., cols.clone()])
            .assign(&a.t().dot(&doh));
        let ds = softmax_rows_backward(a, &da) * scale;
        dq.slice_mut(ndarray::s![.., cols.clone()])
            .assign(&ds.dot(&kh));
        dk.slice_mut(ndarray::s![.., cols]).assign(&ds.t().dot(&qh));
    }

    let dxq = linear_backward(xq, &dq, &p.wq, &mut grad.wq);
    let mut dxkv = linear_backward(xkv, &dk, &p.wk, &mut grad.wk);
    dxkv += &linear_backward(xkv, &dv, &p.wv, &mut grad.wv);
    (dxq, dxkv)
}

/// 3×3 convolution, stride 2, padding 1; weights stored as
/// (c_out, c_in·9) so the forward is one matmul over unrolled patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;

impl ConvParams {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            weight: Array2::zeros((c_out, c_in * CONV_KERNEL * CONV_KERNEL)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn init(c_out: usize, c_in: usize, rng: &mut ChaCha12Rng) -> Self {
        let fan_in = c_in * CONV_KERNEL * CONV_KERNEL;
        let s = (6.0 / (fan_in + c_out) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((c_out, fan_in), |_| rng.random_range(-s..s)),
            bias: Array1::zeros(c_out),
        }
    }
}

/// Unrolls 3×3/stride-2/pad-1 patches of an (h·w, c) feature map into
/// rows of (out_h·out_w, c·9). Out-of-bounds taps contribute zero.
fn im2col(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c = x.ncols();
    let (oh, ow) = (h / CONV_STRIDE, w / CONV_STRIDE);
    let mut cols = Array2::zeros((oh * ow, c * 9));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for (tap, (dy, dx)) in (0..9).map(|t| (t, (t / 3, t % 3))) {
                let iy = (oy * CONV_STRIDE + dy) as isize - 1;
                let ix = (ox * CONV_STRIDE + dx) as isize - 1;
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                    continue;
                }
                let src = (iy as usize) * w + ix as usize;
                for ch in 0..c {
                    cols[(row, ch * 9 + tap)] = x[(src, ch)];
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto the input feature map.
fn col2im(dcols: &Array2<f64>, h: usize, w: usize, c: usize) -> Array2<f64> {
    let (oh, ow) = (h / CONV_STRIDE, w / CONV_STRIDE);
    let mut dx = Array2::zeros((h * w, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for tap in 0..9 {
                let (dy, dx_tap) = (tap / 3, tap % 3);
                let iy = (oy * CONV_STRIDE + dy) as isize - 1;
                let ix = (ox * CONV_STRIDE + dx_tap) as isize - 1;
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                    continue;
                }
                let dst = (iy as usize) * w + ix as usize;
                for ch in 0..c {
                    dx[(dst, ch)] += dcols[(row, ch * 9 + tap)];
                }
            }
        }
    }
    dx
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_h: usize,
    in_w: usize,
    in_c: usize,
}

/// Returns the (out_h·out_w, c_out) pre-activation map.
pub fn conv_forward(
    x: &Array2<f64>,
    h: usize,
    w: usize,
    p: &ConvParams,
) -> (Array2<f64>, ConvCache) {
    let cols = im2col(x, h, w);
    let mut y = cols.dot(&p.weight.t());
    y += &p.bias;
    (
        y,
        ConvCache {
            cols,
            in_h: h,
            in_w: w,
            in_c: x.ncols(),
        },
    )
}

pub fn conv_backward(
    cache: &ConvCache,
    dy: &Array2<f64>,
    p: &ConvParams,
    grad: &mut ConvParams,
) -> Array2<f64> {
    grad.weight += &dy.t().dot(&cache.cols);
    grad.bias += &dy.sum_axis(Axis(0));
    let dcols = dy.dot(&p.weight);
    col2im(&dcols, cache.in_h, cache.in_w, cache.in_c)
}

/// Fixed 2D sinusoidal position table for a g×g token grid, dimension `d`
/// (divisible by 4). The first d/2 dims encode the row coordinate, the last
/// d/2 the column; within each half, even indices carry sin and odd carry
/// cos of the coordinate scaled by 10000^(−2i/(d/2)).
pub fn sinusoidal_position_table(grid: usize, d: usize) -> Array2<f64> {
    assert_eq!(d % 4, 0, "embedding dim must be divisible by 4");
    let half = d / 2;
    let mut table = Array2::zeros((grid * grid, d));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for i in 0..half / 2 {
                let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                table[(row, 2 * i)] = (gy as f64 * omega).sin();
                table[(row, 2 * i + 1)] = (gy as f64 * omega).cos();
                table[(row, half + 2 * i)] = (gx as f64 * omega).sin();
                table[(row, half + 2 * i + 1)] = (gx as f64 * omega).cos();
            }
        }
    }
    table
}
