//! Minimal f64 neural-network kernel: parameters, transformer layers with
//! explicit forward/backward passes, and the AdamW optimizer.
//!
//! Everything is deterministic: initialization flows from seeded generators,
//! and all batched math goes through the fixed-decomposition helpers in
//! [`crate::math`], so parallel and sequential execution agree bitwise.
//! Gradients accumulate into each parameter until `zero_grad`, which is what
//! gradient accumulation and multi-source losses rely on.

pub mod optim;

use crate::math;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One trainable tensor with its gradient accumulator. Biases and norms are
/// stored as single-row matrices; `decay` marks whether weight decay applies.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub decay: bool,
}

impl Param {
    pub fn new(value: Array2<f64>, decay: bool) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad, decay }
    }

    pub fn zeros(rows: usize, cols: usize, decay: bool) -> Self {
        Self::new(Array2::zeros((rows, cols)), decay)
    }

    pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64, decay: bool) -> Self {
        Self::new(normal_matrix(rng, rows, cols, std), decay)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Zero-mean gaussian matrix via Box-Muller.
pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

// ---------------------------------------------------------------------------
// Linear

#[derive(Clone, Debug)]
pub struct Linear {
    /// `[out, in]`.
    pub w: Param,
    /// `[1, out]`.
    pub b: Param,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, std: f64) -> Self {
        Self {
            w: Param::normal(rng, out_dim, in_dim, std, true),
            b: Param::zeros(1, out_dim, false),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.nrows()
    }

    /// `y = x @ w^T + b`.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = math::matmul(x, &self.w.value.t());
        let b = &self.b.value;
        math::for_each_row_chunk_mut(&mut y, |_, chunk| {
            for mut row in chunk.rows_mut() {
                row += &b.row(0);
            }
        });
        y
    }

    /// Accumulates `dw`, `db`; returns `dx`.
    pub fn backward(&mut self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>) -> Array2<f64> {
        self.w.grad += &math::matmul(&dy.t(), x);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        math::matmul(dy, &self.w.value.view())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

// ---------------------------------------------------------------------------
// LayerNorm

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    /// Gain `[1, d]`.
    pub g: Param,
    /// Shift `[1, d]`.
    pub b: Param,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            g: Param::new(Array2::ones((1, dim)), false),
            b: Param::zeros(1, dim, false),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = vec![0.0; x.nrows()];
        {
            let inv_cells: Vec<_> = inv_std.iter_mut().collect();
            let mut rows: Vec<_> = xhat.rows_mut().into_iter().zip(inv_cells).collect();
            math::for_each_indexed(&mut rows, |_, (row, inv)| {
                let mean = row.sum() / d;
                let mut var = 0.0;
                for v in row.iter() {
                    let c = v - mean;
                    var += c * c;
                }
                var /= d;
                let istd = 1.0 / (var + LN_EPS).sqrt();
                **inv = istd;
                for v in row.iter_mut() {
                    *v = (*v - mean) * istd;
                }
            });
        }
        let mut y = xhat.clone();
        let (g, b) = (&self.g.value, &self.b.value);
        math::for_each_row_chunk_mut(&mut y, |_, chunk| {
            for mut row in chunk.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = *v * g[[0, j]] + b[[0, j]];
                }
            }
        });
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, dy: &ArrayView2<f64>, cache: &LayerNormCache) -> Array2<f64> {
        let d = dy.ncols() as f64;
        // Parameter grads are plain reductions over rows.
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.g.grad += &(dy.to_owned() * &cache.xhat)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));

        let g = &self.g.value;
        let mut dx = Array2::zeros(dy.raw_dim());
        let mut rows: Vec<_> = dx
            .rows_mut()
            .into_iter()
            .zip(dy.rows())
            .zip(cache.xhat.rows())
            .enumerate()
            .map(|(i, ((dxr, dyr), xr))| (i, dxr, dyr, xr))
            .collect();
        math::for_each_indexed(&mut rows, |_, (i, dxr, dyr, xr)| {
            let istd = cache.inv_std[*i];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..dyr.len() {
                let dxhat = dyr[j] * g[[0, j]];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xr[j];
            }
            for j in 0..dyr.len() {
                let dxhat = dyr[j] * g[[0, j]];
                dxr[j] = istd * (dxhat - sum_dxhat / d - xr[j] * sum_dxhat_xhat / d);
            }
        });
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.g, &mut self.b]
    }
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)

const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut y = x.to_owned();
    math::for_each_row_chunk_mut(&mut y, |_, chunk| {
        for v in chunk.iter_mut() {
            *v = gelu_scalar(*v);
        }
    });
    y
}

pub fn gelu_backward(x: &ArrayView2<f64>, dy: &ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    let mut rows: Vec<_> = dx.rows_mut().into_iter().zip(x.rows()).collect();
    math::for_each_indexed(&mut rows, |_, (drow, xrow)| {
        for (dv, xv) in drow.iter_mut().zip(xrow.iter()) {
            *dv *= gelu_grad_scalar(*xv);
        }
    });
    dx
}

// ---------------------------------------------------------------------------
// MLP

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize, std: f64) -> Self {
        Self {
            fc1: Linear::new(rng, dim, hidden, std),
            fc2: Linear::new(rng, hidden, dim, std),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = gelu(&pre.view());
        let y = self.fc2.forward(&act.view());
        (y, MlpCache { x: x.to_owned(), pre, act })
    }

    pub fn backward(&mut self, dy: &ArrayView2<f64>, cache: &MlpCache) -> Array2<f64> {
        let dact = self.fc2.backward(&cache.act.view(), dy);
        let dpre = gelu_backward(&cache.pre.view(), &dact.view());
        self.fc1.backward(&cache.x.view(), &dpre.view())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}

// ---------------------------------------------------------------------------
// Multi-head self-attention

#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    x: Array2<f64>,
    qkv_out: Array2<f64>,
    /// Softmax probabilities per (image, head), `[seq, seq]` each.
    probs: Vec<Array2<f64>>,
    attn_out: Array2<f64>,
    batch: usize,
    seq: usize,
}

impl Attention {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, std: f64) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(rng, dim, 3 * dim, std),
            proj: Linear::new(rng, dim, dim, std),
            heads,
        }
    }

    /// `x` is `[batch * seq, dim]` with each image's tokens contiguous.
    pub fn forward(&self, x: &ArrayView2<f64>, batch: usize, seq: usize) -> (Array2<f64>, AttentionCache) {
        let dim = x.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv_out = self.qkv.forward(x);

        // Per-image contexts and probabilities, computed in fixed slots.
        let per_image: Vec<(Array2<f64>, Vec<Array2<f64>>)> = math::map_indexed(batch, |i| {
            let rows = qkv_out.slice(s![i * seq..(i + 1) * seq, ..]);
            let mut ctx = Array2::<f64>::zeros((seq, dim));
            let mut probs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = rows.slice(s![.., h * dh..(h + 1) * dh]);
                let k = rows.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
                let v = rows.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
                let mut scores = q.dot(&k.t());
                scores *= scale;
                softmax_rows(&mut scores);
                let c = scores.dot(&v);
                ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&c);
                probs.push(scores);
            }
            (ctx, probs)
        });

        let mut attn_out = Array2::<f64>::zeros((batch * seq, dim));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for (i, (ctx, p)) in per_image.into_iter().enumerate() {
            attn_out.slice_mut(s![i * seq..(i + 1) * seq, ..]).assign(&ctx);
            probs.extend(p);
        }
        let y = self.proj.forward(&attn_out.view());
        (
            y,
            AttentionCache { x: x.to_owned(), qkv_out, probs, attn_out, batch, seq },
        )
    }

    pub fn backward(&mut self, dy: &ArrayView2<f64>, cache: &AttentionCache) -> Array2<f64> {
        let dim = cache.x.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (batch, seq) = (cache.batch, cache.seq);

        let dattn = self.proj.backward(&cache.attn_out.view(), dy);

        let per_image: Vec<Array2<f64>> = math::map_indexed(batch, |i| {
            let rows = cache.qkv_out.slice(s![i * seq..(i + 1) * seq, ..]);
            let drows = dattn.slice(s![i * seq..(i + 1) * seq, ..]);
            let mut dqkv = Array2::<f64>::zeros((seq, 3 * dim));
            for h in 0..self.heads {
                let q = rows.slice(s![.., h * dh..(h + 1) * dh]);
                let k = rows.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
                let v = rows.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
                let probs = &cache.probs[i * self.heads + h];
                let dctx = drows.slice(s![.., h * dh..(h + 1) * dh]);

                let dv = probs.t().dot(&dctx);
                let dprobs = dctx.dot(&v.t());
                // Softmax backward per row.
                let mut dscores = dprobs.clone();
                for (mut dsr, pr) in dscores.rows_mut().into_iter().zip(probs.rows()) {
                    let dot: f64 = dsr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                    for (dsv, pv) in dsr.iter_mut().zip(pr.iter()) {
                        *dsv = pv * (*dsv - dot);
                    }
                }
                dscores *= scale;
                let dq = dscores.dot(&k);
                let dk = dscores.t().dot(&q);
                dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
                dqkv.slice_mut(s![.., dim + h * dh..dim + (h + 1) * dh]).assign(&dk);
                dqkv.slice_mut(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]).assign(&dv);
            }
            dqkv
        });

        let mut dqkv_full = Array2::<f64>::zeros((batch * seq, 3 * dim));
        for (i, d) in per_image.into_iter().enumerate() {
            dqkv_full.slice_mut(s![i * seq..(i + 1) * seq, ..]).assign(&d);
        }
        self.qkv.backward(&cache.x.view(), &dqkv_full.view())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.qkv.params_mut();
        p.extend(self.proj.params_mut());
        p
    }
}

/// In-place numerically stable row softmax.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

// ---------------------------------------------------------------------------
// Transformer block and tower

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl Block {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, mlp_ratio: usize, std: f64) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(rng, dim, heads, std),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, dim * mlp_ratio, std),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>, batch: usize, seq: usize) -> (Array2<f64>, BlockCache) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&n1.view(), batch, seq);
        let h = x.to_owned() + &a;
        let (n2, ln2) = self.ln2.forward(&h.view());
        let (m, mlp) = self.mlp.forward(&n2.view());
        let y = h + &m;
        (y, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&mut self, dy: &ArrayView2<f64>, cache: &BlockCache) -> Array2<f64> {
        let dn2 = self.mlp.backward(dy, &cache.mlp);
        let mut dh = self.ln2.backward(&dn2.view(), &cache.ln2);
        dh += dy;
        let dn1 = self.attn.backward(&dh.view(), &cache.attn);
        let mut dx = self.ln1.backward(&dn1.view(), &cache.ln1);
        dx += &dh;
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.ln1.params_mut();
        p.extend(self.attn.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.mlp.params_mut());
        p
    }
}

/// Stack of blocks with a final layer norm.
#[derive(Clone, Debug)]
pub struct Tower {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

pub struct TowerCache {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl Tower {
    pub fn new(
        rng: &mut ChaCha8Rng,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
    ) -> Self {
        Self {
            blocks: (0..depth).map(|_| Block::new(rng, dim, heads, mlp_ratio, std)).collect(),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>, batch: usize, seq: usize) -> (Array2<f64>, TowerCache) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.to_owned();
        for block in &self.blocks {
            let (next, cache) = block.forward(&cur.view(), batch, seq);
            caches.push(cache);
            cur = next;
        }
        let (y, norm) = self.norm.forward(&cur.view());
        (y, TowerCache { blocks: caches, norm })
    }

    pub fn backward(&mut self, dy: &ArrayView2<f64>, cache: &TowerCache) -> Array2<f64> {
        let mut d = self.norm.backward(dy, &cache.norm);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = block.backward(&d.view(), bc);
        }
        d
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.norm.params_mut());
        p
    }
}

/// Mean over each image's `seq` token rows: `[b*seq, d]` -> `[b, d]`.
pub fn mean_pool(tokens: &ArrayView2<f64>, batch: usize, seq: usize) -> Array2<f64> {
    let d = tokens.ncols();
    let mut out = Array2::zeros((batch, d));
    for i in 0..batch {
        let block = tokens.slice(s![i * seq..(i + 1) * seq, ..]);
        out.row_mut(i).assign(&(block.sum_axis(Axis(0)) / seq as f64));
    }
    out
}

/// Backward of [`mean_pool`]: spreads each pooled gradient evenly.
pub fn mean_pool_backward(dpool: &ArrayView2<f64>, seq: usize) -> Array2<f64> {
    let (b, d) = dpool.dim();
    let mut out = Array2::zeros((b * seq, d));
    for i in 0..b {
        let g = dpool.row(i).mapv(|v| v / seq as f64);
        for r in 0..seq {
            out.row_mut(i * seq + r).assign(&g);
        }
    }
    out
}

/// Row-sum helper used by positional-embedding gradients.
pub fn sum_rows_at(src: &ArrayView2<f64>, positions: &[usize], out: &mut Array2<f64>) {
    for (row, &pos) in positions.iter().enumerate() {
        let mut dst = out.row_mut(pos);
        dst += &src.row(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn fd_check<F>(params: &mut [f64], loss: F, tol: f64)
    where
        F: Fn(&[f64]) -> (f64, Vec<f64>),
    {
        let (_, analytic) = loss(params);
        let h = 1e-5;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let (lp, _) = loss(params);
            params[i] = orig - h;
            let (lm, _) = loss(params);
            params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic[i] - fd).abs() / denom < tol,
                "param {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = rng_for(1, "nn-lin");
        let x = normal_matrix(&mut rng, 3, 4, 1.0);
        let layer = Linear::new(&mut rng, 4, 2, 0.5);
        let flat: Vec<f64> = layer.w.value.iter().chain(layer.b.value.iter()).cloned().collect();
        fd_check(
            &mut flat.clone(),
            |p| {
                let mut l = layer.clone();
                l.w.value = Array2::from_shape_vec((2, 4), p[..8].to_vec()).unwrap();
                l.b.value = Array2::from_shape_vec((1, 2), p[8..].to_vec()).unwrap();
                let y = l.forward(&x.view());
                let loss = y.iter().map(|v| v * v).sum::<f64>();
                let dy = y.mapv(|v| 2.0 * v);
                l.w.zero_grad();
                l.b.zero_grad();
                l.backward(&x.view(), &dy.view());
                let grads = l.w.grad.iter().chain(l.b.grad.iter()).cloned().collect();
                (loss, grads)
            },
            1e-6,
        );
        let _ = flat;
    }

    #[test]
    fn block_backward_matches_finite_differences_on_input() {
        // FD over the block input checks the full chain:
        // ln -> attention -> residual -> ln -> mlp -> residual.
        let mut rng = rng_for(2, "nn-block");
        let block = Block::new(&mut rng, 8, 2, 2, 0.3);
        let x0 = normal_matrix(&mut rng, 6, 8, 1.0); // 2 images x 3 tokens
        let loss_of = |x: &Array2<f64>| -> f64 {
            let (y, _) = block.forward(&x.view(), 2, 3);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = block.forward(&x0.view(), 2, 3);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = block.clone().backward(&dy.view(), &cache);

        let h = 1e-5;
        let mut x = x0.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / 8, idx % 8);
            let orig = x[[r, c]];
            x[[r, c]] = orig + h;
            let lp = loss_of(&x);
            x[[r, c]] = orig - h;
            let lm = loss_of(&x);
            x[[r, c]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = dx[[r, c]];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!((a - fd).abs() / denom < 1e-5, "dx[{r},{c}]: {a} vs {fd}");
        }
    }

    #[test]
    fn layernorm_output_is_normalized() {
        let mut rng = rng_for(3, "nn-ln");
        let x = normal_matrix(&mut rng, 5, 16, 3.0);
        let ln = LayerNorm::new(16);
        let (y, _) = ln.forward(&x.view());
        for row in y.rows() {
            let mean = row.sum() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_roundtrip_shapes() {
        let mut rng = rng_for(4, "nn-pool");
        let tokens = normal_matrix(&mut rng, 6, 4, 1.0);
        let pooled = mean_pool(&tokens.view(), 2, 3);
        assert_eq!(pooled.dim(), (2, 4));
        let back = mean_pool_backward(&pooled.view(), 3);
        assert_eq!(back.dim(), (6, 4));
        // Each token gets pooled/3.
        assert!((back[[0, 0]] - pooled[[0, 0]] / 3.0).abs() < 1e-12);
    }
}
