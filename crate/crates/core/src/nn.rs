//! Small dense building blocks with hand-written gradients.
//!
//! Everything is `f64` and single-sequence: inputs are `T x d` matrices,
//! one row per position. Gradient containers have the same shape as the
//! parameters they belong to (`zeros_like`), which keeps optimizers and
//! finite-difference checks generic over [`Parameterized`].

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Which parameters an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    Adapter,
}

/// Uniform access to a model's tensors in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<(ParamKind, String, &Array2<f64>)>;
    fn params_mut(&mut self) -> Vec<(ParamKind, String, &mut Array2<f64>)>;
}

pub fn normal_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and nonnegative");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// `log(sum(exp(row)))` computed stably.
pub fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

/// Low-rank additive update `scale * A B` to a `d x d` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LowRank {
    /// `A` random, `B` zero, so the adapted projection starts equal to the base.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        rank: usize,
        alpha: f64,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            a: normal_matrix(dim, rank, std, rng),
            b: Array2::zeros((rank, dim)),
            scale: alpha / rank as f64,
        }
    }

    pub fn delta(&self) -> Array2<f64> {
        self.a.dot(&self.b) * self.scale
    }

    fn zeros_like(&self) -> Self {
        Self {
            a: Array2::zeros(self.a.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
            scale: self.scale,
        }
    }
}

/// One pre-activation-free transformer block: single-head causal
/// self-attention with a residual connection, then a GELU feed-forward
/// layer with a second residual connection. Optional low-rank adapters sit
/// on the query and value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub adapter_q: Option<LowRank>,
    pub adapter_v: Option<LowRank>,
}

/// Forward activations needed by [`AttentionBlock::backward`].
#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    c: Array2<f64>,
    h1: Array2<f64>,
    z: Array2<f64>,
    f: Array2<f64>,
    wq_eff: Array2<f64>,
    wv_eff: Array2<f64>,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            wq: normal_matrix(dim, dim, std, rng),
            wk: normal_matrix(dim, dim, std, rng),
            wv: normal_matrix(dim, dim, std, rng),
            wo: normal_matrix(dim, dim, std, rng),
            w1: normal_matrix(dim, hidden, std, rng),
            b1: Array2::zeros((1, hidden)),
            w2: normal_matrix(hidden, dim, std, rng),
            b2: Array2::zeros((1, dim)),
            adapter_q: None,
            adapter_v: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Array2<f64>| Array2::zeros(m.raw_dim());
        Self {
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
            adapter_q: self.adapter_q.as_ref().map(LowRank::zeros_like),
            adapter_v: self.adapter_v.as_ref().map(LowRank::zeros_like),
        }
    }

    fn effective(base: &Array2<f64>, adapter: &Option<LowRank>) -> Array2<f64> {
        match adapter {
            Some(lr) => base + &lr.delta(),
            None => base.clone(),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let t_len = x.nrows();
        let inv_sqrt_d = 1.0 / (self.dim() as f64).sqrt();
        let wq_eff = Self::effective(&self.wq, &self.adapter_q);
        let wv_eff = Self::effective(&self.wv, &self.adapter_v);
        let q = x.dot(&wq_eff);
        let k = x.dot(&self.wk);
        let v = x.dot(&wv_eff);
        let scores = q.dot(&k.t()) * inv_sqrt_d;
        let mut p = Array2::<f64>::zeros((t_len, t_len));
        for t in 0..t_len {
            let row = scores.row(t);
            let max = (0..=t).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=t {
                let e = (row[j] - max).exp();
                p[[t, j]] = e;
                sum += e;
            }
            for j in 0..=t {
                p[[t, j]] /= sum;
            }
        }
        let c = p.dot(&v);
        let h1 = x + &c.dot(&self.wo);
        let z = h1.dot(&self.w1) + &self.b1;
        let f = z.mapv(gelu);
        let out = &h1 + &f.dot(&self.w2) + &self.b2;
        let cache = BlockCache {
            x: x.clone(),
            q,
            k,
            v,
            p,
            c,
            h1,
            z,
            f,
            wq_eff,
            wv_eff,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the block input.
    pub fn backward(
        &self,
        cache: &BlockCache,
        d_out: &Array2<f64>,
        grads: &mut AttentionBlock,
    ) -> Array2<f64> {
        let inv_sqrt_d = 1.0 / (self.dim() as f64).sqrt();
        // feed-forward branch
        grads.w2 += &cache.f.t().dot(d_out);
        grads.b2 += &d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_f = d_out.dot(&self.w2.t());
        let d_z = d_f * &cache.z.mapv(gelu_grad);
        grads.w1 += &cache.h1.t().dot(&d_z);
        grads.b1 += &d_z.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_h1 = d_out + &d_z.dot(&self.w1.t());

        // attention branch
        grads.wo += &cache.c.t().dot(&d_h1);
        let d_c = d_h1.dot(&self.wo.t());
        let d_p = d_c.dot(&cache.v.t());
        let d_v = cache.p.t().dot(&d_c);
        let mut d_s = Array2::<f64>::zeros(cache.p.raw_dim());
        for t in 0..d_s.nrows() {
            let dot: f64 = (0..=t).map(|j| d_p[[t, j]] * cache.p[[t, j]]).sum();
            for j in 0..=t {
                d_s[[t, j]] = cache.p[[t, j]] * (d_p[[t, j]] - dot) * inv_sqrt_d;
            }
        }
        let d_q = d_s.dot(&cache.k);
        let d_k = d_s.t().dot(&cache.q);

        let d_wq = cache.x.t().dot(&d_q);
        let d_wk = cache.x.t().dot(&d_k);
        let d_wv = cache.x.t().dot(&d_v);
        if let (Some(lr), Some(g)) = (&self.adapter_q, grads.adapter_q.as_mut()) {
            g.a += &(d_wq.dot(&lr.b.t()) * lr.scale);
            g.b += &(lr.a.t().dot(&d_wq) * lr.scale);
        }
        if let (Some(lr), Some(g)) = (&self.adapter_v, grads.adapter_v.as_mut()) {
            g.a += &(d_wv.dot(&lr.b.t()) * lr.scale);
            g.b += &(lr.a.t().dot(&d_wv) * lr.scale);
        }
        grads.wq += &d_wq;
        grads.wk += &d_wk;
        grads.wv += &d_wv;

        d_h1 + d_q.dot(&cache.wq_eff.t()) + d_k.dot(&self.wk.t()) + d_v.dot(&cache.wv_eff.t())
    }
}

impl Parameterized for AttentionBlock {
    fn params(&self) -> Vec<(ParamKind, String, &Array2<f64>)> {
        let mut out = vec![
            (ParamKind::Base, "wq".to_string(), &self.wq),
            (ParamKind::Base, "wk".to_string(), &self.wk),
            (ParamKind::Base, "wv".to_string(), &self.wv),
            (ParamKind::Base, "wo".to_string(), &self.wo),
            (ParamKind::Base, "w1".to_string(), &self.w1),
            (ParamKind::Base, "b1".to_string(), &self.b1),
            (ParamKind::Base, "w2".to_string(), &self.w2),
            (ParamKind::Base, "b2".to_string(), &self.b2),
        ];
        for (name, lr) in [("q", &self.adapter_q), ("v", &self.adapter_v)] {
            if let Some(lr) = lr {
                out.push((ParamKind::Adapter, format!("adapter_{name}.a"), &lr.a));
                out.push((ParamKind::Adapter, format!("adapter_{name}.b"), &lr.b));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(ParamKind, String, &mut Array2<f64>)> {
        let mut out = vec![
            (ParamKind::Base, "wq".to_string(), &mut self.wq),
            (ParamKind::Base, "wk".to_string(), &mut self.wk),
            (ParamKind::Base, "wv".to_string(), &mut self.wv),
            (ParamKind::Base, "wo".to_string(), &mut self.wo),
            (ParamKind::Base, "w1".to_string(), &mut self.w1),
            (ParamKind::Base, "b1".to_string(), &mut self.b1),
            (ParamKind::Base, "w2".to_string(), &mut self.w2),
            (ParamKind::Base, "b2".to_string(), &mut self.b2),
        ];
        for (name, lr) in [("q", &mut self.adapter_q), ("v", &mut self.adapter_v)] {
            if let Some(lr) = lr {
                out.push((ParamKind::Adapter, format!("adapter_{name}.a"), &mut lr.a));
                out.push((ParamKind::Adapter, format!("adapter_{name}.b"), &mut lr.b));
            }
        }
        out
    }
}
