//! Pre-norm cross-attention block with a hand-written backward pass.
//!
//! Layout: `h = q + MHA(LN_q(q), LN_kv(x))`, then `out = h + FFN(LN_ff(h))`
//! where the FFN is `GELU(h W1 + b1) W2 + b2` with a hidden width of 4d.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::HierError;

pub const LN_EPS: f64 = 1e-5;
pub const FF_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub heads: usize,
    pub q_norm_gain: Array1<f64>,
    pub q_norm_bias: Array1<f64>,
    pub kv_norm_gain: Array1<f64>,
    pub kv_norm_bias: Array1<f64>,
    pub w_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub w_value: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub ff_norm_gain: Array1<f64>,
    pub ff_norm_bias: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a))
}

impl BlockParams {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self, HierError> {
        if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
            return Err(HierError::Heads { dim, heads });
        }
        let v = || Array1::zeros(dim);
        let m = || Array2::zeros((dim, dim));
        let hidden = FF_MULT * dim;
        Ok(Self {
            heads,
            q_norm_gain: v(),
            q_norm_bias: v(),
            kv_norm_gain: v(),
            kv_norm_bias: v(),
            w_query: m(),
            w_key: m(),
            w_value: m(),
            w_out: m(),
            b_out: v(),
            ff_norm_gain: v(),
            ff_norm_bias: v(),
            w_ff1: Array2::zeros((dim, hidden)),
            b_ff1: Array1::zeros(hidden),
            w_ff2: Array2::zeros((hidden, dim)),
            b_ff2: v(),
        })
    }

    pub fn init<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self, HierError> {
        let mut p = Self::zeros(dim, heads)?;
        for g in [&mut p.q_norm_gain, &mut p.kv_norm_gain, &mut p.ff_norm_gain] {
            g.fill(1.0);
        }
        p.w_query = glorot(dim, dim, rng);
        p.w_key = glorot(dim, dim, rng);
        p.w_value = glorot(dim, dim, rng);
        p.w_out = glorot(dim, dim, rng);
        p.w_ff1 = glorot(dim, FF_MULT * dim, rng);
        p.w_ff2 = glorot(FF_MULT * dim, dim, rng);
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.w_query.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        vec![
            ("q_norm_gain", self.q_norm_gain.view().into_dyn()),
            ("q_norm_bias", self.q_norm_bias.view().into_dyn()),
            ("kv_norm_gain", self.kv_norm_gain.view().into_dyn()),
            ("kv_norm_bias", self.kv_norm_bias.view().into_dyn()),
            ("w_query", self.w_query.view().into_dyn()),
            ("w_key", self.w_key.view().into_dyn()),
            ("w_value", self.w_value.view().into_dyn()),
            ("w_out", self.w_out.view().into_dyn()),
            ("b_out", self.b_out.view().into_dyn()),
            ("ff_norm_gain", self.ff_norm_gain.view().into_dyn()),
            ("ff_norm_bias", self.ff_norm_bias.view().into_dyn()),
            ("w_ff1", self.w_ff1.view().into_dyn()),
            ("b_ff1", self.b_ff1.view().into_dyn()),
            ("w_ff2", self.w_ff2.view().into_dyn()),
            ("b_ff2", self.b_ff2.view().into_dyn()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        vec![
            ("q_norm_gain", self.q_norm_gain.view_mut().into_dyn()),
            ("q_norm_bias", self.q_norm_bias.view_mut().into_dyn()),
            ("kv_norm_gain", self.kv_norm_gain.view_mut().into_dyn()),
            ("kv_norm_bias", self.kv_norm_bias.view_mut().into_dyn()),
            ("w_query", self.w_query.view_mut().into_dyn()),
            ("w_key", self.w_key.view_mut().into_dyn()),
            ("w_value", self.w_value.view_mut().into_dyn()),
            ("w_out", self.w_out.view_mut().into_dyn()),
            ("b_out", self.b_out.view_mut().into_dyn()),
            ("ff_norm_gain", self.ff_norm_gain.view_mut().into_dyn()),
            ("ff_norm_bias", self.ff_norm_bias.view_mut().into_dyn()),
            ("w_ff1", self.w_ff1.view_mut().into_dyn()),
            ("b_ff1", self.b_ff1.view_mut().into_dyn()),
            ("w_ff2", self.w_ff2.view_mut().into_dyn()),
            ("b_ff2", self.b_ff2.view_mut().into_dyn()),
        ]
    }

    pub fn forward(&self, queries: ArrayView2<f64>, keys: ArrayView2<f64>) -> Result<(Array2<f64>, BlockCache), HierError> {
        let d = self.dim();
        if queries.ncols() != d {
            return Err(HierError::Dim { what: "queries", expected: d, got: queries.ncols() });
        }
        if keys.ncols() != d {
            return Err(HierError::Dim { what: "keys", expected: d, got: keys.ncols() });
        }
        if keys.nrows() == 0 {
            return Err(HierError::NoKeys);
        }
        let (qn, q_norm) = layer_norm(queries, self.q_norm_gain.view(), self.q_norm_bias.view());
        let (kn, kv_norm) = layer_norm(keys, self.kv_norm_gain.view(), self.kv_norm_bias.view());
        let qp = qn.dot(&self.w_query);
        let k = kn.dot(&self.w_key);
        let v = kn.dot(&self.w_value);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = Array2::zeros((queries.nrows(), d));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = qp.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut a);
            mixed.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let h1 = &queries + &(mixed.dot(&self.w_out) + &self.b_out);
        let (hn, ff_norm) = layer_norm(h1.view(), self.ff_norm_gain.view(), self.ff_norm_bias.view());
        let z = hn.dot(&self.w_ff1) + &self.b_ff1;
        let g = z.mapv(gelu);
        let out = &h1 + &(g.dot(&self.w_ff2) + &self.b_ff2);
        let cache = BlockCache { q_norm, kv_norm, qn, kn, qp, k, v, attn, mixed, ff_norm, hn, z, g };
        Ok((out, cache))
    }

    /// Accumulate parameter gradients into `grads` and return the gradients
    /// with respect to the queries and the keys.
    pub fn backward(&self, cache: &BlockCache, d_out: ArrayView2<f64>, grads: &mut BlockParams) -> (Array2<f64>, Array2<f64>) {
        // feed-forward branch
        grads.w_ff2 += &cache.g.t().dot(&d_out);
        grads.b_ff2 += &d_out.sum_axis(Axis(0));
        let mut dz = d_out.dot(&self.w_ff2.t());
        dz.zip_mut_with(&cache.z, |dg, &z| *dg *= gelu_grad(z));
        grads.w_ff1 += &cache.hn.t().dot(&dz);
        grads.b_ff1 += &dz.sum_axis(Axis(0));
        let dhn = dz.dot(&self.w_ff1.t());
        let dh1 = &d_out
            + &layer_norm_backward(dhn.view(), &cache.ff_norm, self.ff_norm_gain.view(), &mut grads.ff_norm_gain, &mut grads.ff_norm_bias);

        // attention branch
        grads.w_out += &cache.mixed.t().dot(&dh1);
        grads.b_out += &dh1.sum_axis(Axis(0));
        let d_mixed = dh1.dot(&self.w_out.t());
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqp = Array2::zeros(cache.qp.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, a) in cache.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dmh = d_mixed.slice(cols);
            let da = dmh.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dmh));
            // softmax backward: ds = a * (da - rowsum(da * a)), times the score scale
            let row_dot = (&da * a).sum_axis(Axis(1));
            let mut ds = a * scale;
            for (mut row, (da_row, r)) in ds.rows_mut().into_iter().zip(da.rows().into_iter().zip(row_dot.iter())) {
                row.zip_mut_with(&da_row, |x, &g| *x *= g - r);
            }
            dqp.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.qp.slice(cols)));
        }
        grads.w_query += &cache.qn.t().dot(&dqp);
        grads.w_key += &cache.kn.t().dot(&dk);
        grads.w_value += &cache.kn.t().dot(&dv);
        let dqn = dqp.dot(&self.w_query.t());
        let dkn = dk.dot(&self.w_key.t()) + dv.dot(&self.w_value.t());
        let dq = dh1
            + layer_norm_backward(dqn.view(), &cache.q_norm, self.q_norm_gain.view(), &mut grads.q_norm_gain, &mut grads.q_norm_bias);
        let dkeys =
            layer_norm_backward(dkn.view(), &cache.kv_norm, self.kv_norm_gain.view(), &mut grads.kv_norm_gain, &mut grads.kv_norm_bias);
        (dq, dkeys)
    }
}

/// Intermediates saved by [`BlockParams::forward`].
#[derive(Debug, Clone)]
pub struct BlockCache {
    q_norm: LnCache,
    kv_norm: LnCache,
    qn: Array2<f64>,
    kn: Array2<f64>,
    qp: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per head, `queries x keys`.
    pub attn: Vec<Array2<f64>>,
    /// Concatenated per-head attention outputs before the output projection.
    pub mixed: Array2<f64>,
    ff_norm: LnCache,
    hn: Array2<f64>,
    z: Array2<f64>,
    g: Array2<f64>,
}

impl BlockCache {
    /// Value projections of the normalized keys.
    pub fn values(&self) -> &Array2<f64> {
        &self.v
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: ArrayView2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *inv);
    }
    let y = &xhat * &gain + bias;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LnCache,
    gain: ArrayView1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let mut dx = &dy * &gain;
    for ((mut row, xh), &inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.inv_std.iter()) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        row.zip_mut_with(&xh, |g, &h| *g = inv * (*g - mean_d - h * mean_dx));
    }
    dx
}

pub(crate) fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

pub fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}
