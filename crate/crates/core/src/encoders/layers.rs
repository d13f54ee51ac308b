//! Transformer building blocks with explicit forward caches and backward
//! passes. Row-vector convention throughout: activations are `tokens × dim`
//! and a linear layer computes `x·W + b`.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{visit1, visit1_mut, visit2, visit2_mut, join, Params, Visitor, VisitorMut};

pub(crate) fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub(crate) fn normal_vector<R: Rng>(rng: &mut R, n: usize, std: f64) -> Array1<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array1::from_shape_simple_fn(n, || dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: normal_matrix(rng, fan_in, fan_out, (1.0 / fan_in as f64).sqrt()),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Linear {
            w: Array2::eye(dim),
            b: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `g` and returns `∂/∂x`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.w += &x.t().dot(dy);
        g.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        visit2(prefix, "w", &self.w, f);
        visit1(prefix, "b", &self.b, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        visit2_mut(prefix, "w", &mut self.w, f);
        visit1_mut(prefix, "b", &mut self.b, f);
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache, dy: &Array2<f64>, g: &mut LayerNorm) -> Array2<f64> {
        g.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        g.bias += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gain;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dh = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_dh = dh.sum() / d;
            let mean_dh_xh = dh.dot(&xh) / d;
            let r = cache.rstd[i];
            dx.row_mut(i)
                .assign(&((&dh - mean_dh - &(&xh * mean_dh_xh)) * r));
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        visit1(prefix, "gain", &self.gain, f);
        visit1(prefix, "bias", &self.bias, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        visit1_mut(prefix, "gain", &mut self.gain, f);
        visit1_mut(prefix, "bias", &mut self.bias, f);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(rng, dim, hidden),
            fc2: Linear::new(rng, hidden, dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, c: &MlpCache, dy: &Array2<f64>, g: &mut Mlp) -> Array2<f64> {
        let dact = self.fc2.backward(&c.act, dy, &mut g.fc2);
        let dpre = dact * c.pre.mapv(gelu_grad);
        self.fc1.backward(&c.x, &dpre, &mut g.fc1)
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    x: Array2<f64>,
    qkv: Array2<f64>,
    /// Per head, `tokens × tokens` softmax weights.
    pub probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl Attention {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        Attention {
            qkv: Linear::new(rng, dim, 3 * dim),
            out: Linear::new(rng, dim, dim),
            heads,
        }
    }

    pub fn forward(&self, x: &Array2<f64>, causal: bool) -> (Array2<f64>, AttnCache) {
        let (t, d) = x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut concat = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t()) * scale;
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                let lim = if causal { i + 1 } else { t };
                let max = row.iter().take(lim).cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, e) in row.iter_mut().enumerate() {
                    if j < lim {
                        *e = (*e - max).exp();
                        sum += *e;
                    } else {
                        *e = 0.0;
                    }
                }
                row /= sum;
            }
            concat.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let y = self.out.forward(&concat);
        (
            y,
            AttnCache {
                x: x.clone(),
                qkv,
                probs,
                concat,
            },
        )
    }

    pub fn backward(&self, c: &AttnCache, dy: &Array2<f64>, g: &mut Attention) -> Array2<f64> {
        let (t, d) = c.x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.out.backward(&c.concat, dy, &mut g.out);
        let mut dqkv = Array2::zeros((t, 3 * d));
        for h in 0..self.heads {
            let q = c.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = c.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = c.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = &c.probs[h];
            let dout = dconcat.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            // softmax backward, row-wise
            let mut ds = &dp * p;
            for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                let dot: f64 = row.sum();
                let prow = p.row(i);
                row.zip_mut_with(&prow, |e, &pij| *e -= pij * dot);
            }
            ds *= scale;
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
                .assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&dv);
        }
        self.qkv.backward(&c.x, &dqkv, &mut g.qkv)
    }
}

impl Params for Attention {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LnCache,
    pub attn: AttnCache,
    ln2: LnCache,
    mlp: MlpCache,
}

impl Block {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, dim * mlp_ratio),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, causal: bool) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h1, causal);
        let x1 = x + &a;
        let (h2, ln2) = self.ln2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&h2);
        (x1 + &m, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&self, c: &BlockCache, dy: &Array2<f64>, g: &mut Block) -> Array2<f64> {
        let dh2 = self.mlp.backward(&c.mlp, dy, &mut g.mlp);
        let dx1 = dy + &self.ln2.backward(&c.ln2, &dh2, &mut g.ln2);
        let dh1 = self.attn.backward(&c.attn, &dx1, &mut g.attn);
        dx1 + &self.ln1.backward(&c.ln1, &dh1, &mut g.ln1)
    }
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Blocks followed by a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    pub blocks: Vec<BlockCache>,
    ln_final: LnCache,
}

impl StackCache {
    /// Attention weights of the last block, `heads × tokens × tokens`.
    pub fn last_attention(&self) -> ndarray::Array3<f64> {
        let probs = &self.blocks.last().expect("at least one block").attn.probs;
        let t = probs[0].nrows();
        let mut out = ndarray::Array3::zeros((probs.len(), t, t));
        for (h, p) in probs.iter().enumerate() {
            out.index_axis_mut(Axis(0), h).assign(p);
        }
        out
    }
}

impl Stack {
    pub fn new<R: Rng>(rng: &mut R, depth: usize, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Stack {
            blocks: (0..depth).map(|_| Block::new(rng, dim, heads, mlp_ratio)).collect(),
            ln_final: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: Array2<f64>, causal: bool) -> (Array2<f64>, StackCache) {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(&h, causal);
            caches.push(c);
            h = next;
        }
        let (y, ln_final) = self.ln_final.forward(&h);
        (
            y,
            StackCache {
                blocks: caches,
                ln_final,
            },
        )
    }

    pub fn backward(&self, c: &StackCache, dy: &Array2<f64>, g: &mut Stack) -> Array2<f64> {
        let mut dh = self.ln_final.backward(&c.ln_final, dy, &mut g.ln_final);
        for ((b, bc), gb) in self
            .blocks
            .iter()
            .zip(&c.blocks)
            .zip(g.blocks.iter_mut())
            .rev()
        {
            dh = b.backward(bc, &dh, gb);
        }
        dh
    }
}

impl Params for Stack {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit(&join(prefix, "ln_final"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit_mut(&join(prefix, "ln_final"), f);
    }
}
