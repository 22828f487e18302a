//! Dense building blocks with hand-written backward passes, row-major over
//! `[tokens, features]` matrices.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};

use crate::params::{linear_uniform, Parameters};
use crate::rng::Rng;

/// `y = x W^T + b`, `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self { weight: linear_uniform((fan_out, fan_in), fan_in, rng), bias: Array1::zeros(fan_out) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_out, fan_in)), bias: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    /// Accumulates parameter gradients and returns `d loss / d x`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &dy.t().dot(x);
        grads.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub fn backward_vec(&self, x: &Array1<f64>, dy: &Array1<f64>, grads: &mut Linear) -> Array1<f64> {
        for (o, &g) in dy.iter().enumerate() {
            grads.weight.row_mut(o).scaled_add(g, x);
        }
        grads.bias += dy;
        self.weight.t().dot(dy)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.weight"), self.weight.view().into_dyn());
        f(&format!("{prefix}.bias"), self.bias.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.weight"), self.weight.view_mut().into_dyn());
        f(&format!("{prefix}.bias"), self.bias.view_mut().into_dyn());
    }
}

impl Parameters for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        Linear::visit(self, "linear", f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        Linear::visit_mut(self, "linear", f)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization with affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / n;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grads: &mut LayerNorm) -> Array2<f64> {
        grads.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grads.beta += &dy.sum_axis(Axis(0));
        let n = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / n;
            let mean_gx = g.dot(&xh) / n;
            let r = cache.rstd[i];
            for j in 0..dy.ncols() {
                dx[[i, j]] = r * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view_mut().into_dyn());
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let p = softmax(row.as_slice().expect("contiguous row"));
        row.assign(&Array1::from(p));
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            heads,
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let (n, c) = x.dim();
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let mut concat = Array2::zeros((n, c));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let y = self.output.forward(&concat);
        (y, AttentionCache { x: x.clone(), q, k, v, probs, concat })
    }

    pub fn backward(&self, cache: &AttentionCache, dy: &Array2<f64>, grads: &mut MultiHeadAttention) -> Array2<f64> {
        let (n, c) = cache.x.dim();
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let d_concat = self.output.backward(&cache.concat, dy, &mut grads.output);
        let mut dq = Array2::zeros((n, c));
        let mut dk = Array2::zeros((n, c));
        let mut dv = Array2::zeros((n, c));
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let a = &cache.probs[h];
            let d_head = d_concat.slice(cols);
            let da = d_head.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&d_head));
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let dot: f64 = a.row(i).dot(&da.row(i));
                for j in 0..n {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.query.backward(&cache.x, &dq, &mut grads.query);
        dx += &self.key.backward(&cache.x, &dk, &mut grads.key);
        dx += &self.value.backward(&cache.x, &dv, &mut grads.value);
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.query.visit(&format!("{prefix}.query"), f);
        self.key.visit(&format!("{prefix}.key"), f);
        self.value.visit(&format!("{prefix}.value"), f);
        self.output.visit(&format!("{prefix}.output"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.query.visit_mut(&format!("{prefix}.query"), f);
        self.key.visit_mut(&format!("{prefix}.key"), f);
        self.value.visit_mut(&format!("{prefix}.value"), f);
        self.output.visit_mut(&format!("{prefix}.output"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln1 x)`, then `h + ff(ln2 h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

pub struct TransformerLayerCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

impl TransformerLayer {
    pub fn new(dim: usize, heads: usize, ff_dim: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            ff_in: Linear::new(dim, ff_dim, rng),
            ff_out: Linear::new(ff_dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, TransformerLayerCache) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&n1);
        let h = x + &a;
        let (n2, ln2) = self.ln2.forward(&h);
        let ff_pre = self.ff_in.forward(&n2);
        let ff_act = ff_pre.mapv(gelu);
        let out = &h + &self.ff_out.forward(&ff_act);
        (out, TransformerLayerCache { ln1, attn, ln2, ln2_out: n2, ff_pre, ff_act })
    }

    pub fn backward(&self, cache: &TransformerLayerCache, dy: &Array2<f64>, grads: &mut TransformerLayer) -> Array2<f64> {
        let d_act = self.ff_out.backward(&cache.ff_act, dy, &mut grads.ff_out);
        let d_pre = &d_act * &cache.ff_pre.mapv(gelu_grad);
        let d_n2 = self.ff_in.backward(&cache.ln2_out, &d_pre, &mut grads.ff_in);
        let dh = dy + &self.ln2.backward(&cache.ln2, &d_n2, &mut grads.ln2);
        let d_n1 = self.attn.backward(&cache.attn, &dh, &mut grads.attn);
        &dh + &self.ln1.backward(&cache.ln1, &d_n1, &mut grads.ln1)
    }

    /// Zeroes attention and feed-forward weights so the block is the identity map.
    pub fn zero_mixing(&mut self) {
        for l in [&mut self.attn.query, &mut self.attn.key, &mut self.attn.value, &mut self.attn.output, &mut self.ff_in, &mut self.ff_out] {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ff_in.visit(&format!("{prefix}.ff_in"), f);
        self.ff_out.visit(&format!("{prefix}.ff_out"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ff_in.visit_mut(&format!("{prefix}.ff_in"), f);
        self.ff_out.visit_mut(&format!("{prefix}.ff_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random(shape: (usize, usize), r: &mut Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || r.random_range(-1.0..1.0))
    }

    /// Central differences of `sum(y * probe)` w.r.t. every input entry.
    fn fd_input_grad(x: &Array2<f64>, probe: &Array2<f64>, f: impl Fn(&Array2<f64>) -> Array2<f64>) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            g[[i, j]] = ((&f(&xp) * probe).sum() - (&f(&xm) * probe).sum()) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut r = rng::seeded(2);
        let mut ln = LayerNorm::new(6);
        ln.gamma = Array1::from_shape_simple_fn(6, || r.random_range(0.5..1.5));
        let x = random((3, 6), &mut r);
        let probe = random((3, 6), &mut r);
        let (_, cache) = ln.forward(&x);
        let mut grads = LayerNorm::new(6);
        let dx = ln.backward(&cache, &probe, &mut grads);
        let fd = fd_input_grad(&x, &probe, |x| ln.forward(x).0);
        assert_close(&dx, &fd, 1e-7);
    }

    #[test]
    fn attention_input_gradient() {
        let mut r = rng::seeded(4);
        let attn = MultiHeadAttention::new(8, 2, &mut r);
        let x = random((5, 8), &mut r);
        let probe = random((5, 8), &mut r);
        let (_, cache) = attn.forward(&x);
        let mut grads = attn.clone();
        grads.visit_mut("g", &mut |_, mut a| a.fill(0.0));
        let dx = attn.backward(&cache, &probe, &mut grads);
        let fd = fd_input_grad(&x, &probe, |x| attn.forward(x).0);
        assert_close(&dx, &fd, 1e-7);
    }

    #[test]
    fn transformer_layer_input_gradient() {
        let mut r = rng::seeded(6);
        let layer = TransformerLayer::new(8, 4, 16, &mut r);
        let x = random((4, 8), &mut r);
        let probe = random((4, 8), &mut r);
        let (_, cache) = layer.forward(&x);
        let mut grads = layer.clone();
        grads.visit_mut("g", &mut |_, mut a| a.fill(0.0));
        let dx = layer.backward(&cache, &probe, &mut grads);
        let fd = fd_input_grad(&x, &probe, |x| layer.forward(x).0);
        assert_close(&dx, &fd, 1e-7);
    }

    #[test]
    fn zeroed_mixing_is_identity() {
        let mut r = rng::seeded(8);
        let mut layer = TransformerLayer::new(8, 2, 16, &mut r);
        layer.zero_mixing();
        let x = random((3, 8), &mut r);
        assert_eq!(layer.forward(&x).0, x);
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
