//! The full trainable stack (hierarchy encoder plus toy decoder), gradient
//! descent and a finite-difference gradient check.

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{DecoderContext, ToyDecoder};
use super::hierarchy::{encode, encode_backward, FeatureHierarchy, HierParams};
use super::HierError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 64, heads: 4, vocab: 32, max_len: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub hier: HierParams,
    pub decoder: ToyDecoder,
}

/// One training instance: five views of patch features, prompt tokens and
/// the answer tokens to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyExample {
    pub patches: Vec<Array2<f64>>,
    pub context: DecoderContext,
    pub answer: Vec<usize>,
}

impl ToyExample {
    /// Uniform `[-1, 1)` patch features for five views and a three-token
    /// prompt (`1`, `2`, `3`).
    pub fn synthetic(dim: usize, patches_per_view: usize, answer: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToyExample {
            patches: (0..5).map(|_| Array2::from_shape_simple_fn((patches_per_view, dim), || rng.gen_range(-1.0..1.0))).collect(),
            context: DecoderContext { scene_text: vec![1], situation: vec![2], question: vec![3] },
            answer,
        }
    }
}

impl ToyModel {
    pub fn zeros(cfg: ModelConfig) -> Result<Self, HierError> {
        Ok(Self {
            hier: HierParams::zeros(cfg.dim, cfg.heads)?,
            decoder: ToyDecoder::zeros(cfg.dim, cfg.heads, cfg.vocab, cfg.max_len)?,
        })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, HierError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hier = HierParams::init(cfg.dim, cfg.heads, &mut rng)?;
        let decoder = ToyDecoder::init(cfg.dim, cfg.heads, cfg.vocab, cfg.max_len, &mut rng)?;
        Ok(Self { hier, decoder })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.hier.dim(),
            heads: self.hier.view_block.heads,
            vocab: self.decoder.vocab(),
            max_len: self.decoder.max_len(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<_> = self.hier.tensors().into_iter().map(|(n, t)| (format!("hier.{n}"), t)).collect();
        out.extend(self.decoder.tensors().into_iter().map(|(n, t)| (format!("decoder.{n}"), t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<_> = self.hier.tensors_mut().into_iter().map(|(n, t)| (format!("hier.{n}"), t)).collect();
        out.extend(self.decoder.tensors_mut().into_iter().map(|(n, t)| (format!("decoder.{n}"), t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn encode(&self, patches: Vec<Array2<f64>>) -> Result<FeatureHierarchy, HierError> {
        Ok(encode(&self.hier, patches)?.0)
    }

    pub fn loss(&self, ex: &ToyExample) -> Result<f64, HierError> {
        let (h, _) = encode(&self.hier, ex.patches.clone())?;
        Ok(self.decoder.forward(&h, &ex.context, &ex.answer)?.0)
    }

    /// Loss and the gradient of `scale * loss` for every parameter.
    pub fn loss_and_grad(&self, ex: &ToyExample, scale: f64) -> Result<(f64, ToyModel), HierError> {
        let (h, hcache) = encode(&self.hier, ex.patches.clone())?;
        let (loss, _, dcache) = self.decoder.forward(&h, &ex.context, &ex.answer)?;
        let mut grads = ToyModel::zeros(self.config())?;
        let d_fv = self.decoder.backward(&dcache, &h, &ex.context, &ex.answer, scale, &mut grads.decoder);
        encode_backward(&self.hier, &hcache, d_fv.view(), &mut grads.hier);
        Ok((loss, grads))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ToyModel) {
        for ((_, mut t), (_, o)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            t.scaled_add(alpha, &o);
        }
    }
}

/// Full-batch gradient descent. Returns the loss before each step.
pub fn train_toy(model: &mut ToyModel, examples: &[ToyExample], steps: usize, lr: f64) -> Result<Vec<f64>, HierError> {
    if examples.is_empty() {
        return Err(HierError::NoExamples);
    }
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut total = 0.0;
        let mut grads = ToyModel::zeros(model.config())?;
        for ex in examples {
            let (loss, g) = model.loss_and_grad(ex, 1.0)?;
            total += loss;
            grads.add_scaled(1.0, &g);
        }
        if !total.is_finite() {
            return Err(HierError::NonFiniteLoss { step });
        }
        trace.push(total);
        log::debug!("step {step}: loss {total:.6}");
        model.add_scaled(-lr, &grads);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Compare analytic gradients against central differences with step `h`.
/// The error per tensor is `|a - n| / max(|a|, |n|, 1e-8)` over the whole
/// tensor.
pub fn gradient_check(model: &ToyModel, ex: &ToyExample, h: f64) -> Result<Vec<TensorCheck>, HierError> {
    let (_, grads) = model.loss_and_grad(ex, 1.0)?;
    let mut probe = model.clone();
    let names: Vec<(String, usize)> = model.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut out = Vec::with_capacity(names.len());
    for (ti, ((name, len), (_, analytic))) in names.iter().zip(grads.tensors()).enumerate() {
        let mut numeric = Vec::with_capacity(*len);
        for e in 0..*len {
            let original = set(&mut probe, ti, e, |v| v + h);
            let plus = probe.loss(ex)?;
            set(&mut probe, ti, e, |_| original - h);
            let minus = probe.loss(ex)?;
            set(&mut probe, ti, e, |_| original);
            numeric.push((plus - minus) / (2.0 * h));
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let an = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        out.push(TensorCheck { name: name.clone(), relative_error: diff / an.max(nn).max(1e-8), analytic_norm: an });
    }
    Ok(out)
}

/// Replace element `e` of tensor `ti` with `f(old)`; returns the old value.
fn set(m: &mut ToyModel, ti: usize, e: usize, f: impl Fn(f64) -> f64) -> f64 {
    let mut ts = m.tensors_mut();
    let slot = ts[ti].1.iter_mut().nth(e).expect("index in range");
    let old = *slot;
    *slot = f(old);
    old
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn example(cfg: ModelConfig, n: usize, answer: Vec<usize>, seed: u64) -> ToyExample {
        ToyExample::synthetic(cfg.dim, n, answer, seed)
    }

    #[test]
    fn doubling_the_loss_doubles_gradients() {
        let cfg = ModelConfig { dim: 8, heads: 4, vocab: 6, max_len: 4 };
        let m = ToyModel::init(cfg, 3).unwrap();
        let ex = example(cfg, 2, vec![4, 5], 9);
        let (_, g1) = m.loss_and_grad(&ex, 1.0).unwrap();
        let (_, g2) = m.loss_and_grad(&ex, 2.0).unwrap();
        for ((_, a), (_, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| 2.0 * x == *y));
        }
    }

    #[test]
    fn unused_token_has_zero_gradient() {
        let cfg = ModelConfig { dim: 8, heads: 4, vocab: 6, max_len: 4 };
        let m = ToyModel::init(cfg, 4).unwrap();
        let ex = example(cfg, 2, vec![4, 1], 10);
        let (_, g) = m.loss_and_grad(&ex, 1.0).unwrap();
        // token 5 never appears; token 0 likewise
        for id in [0, 5] {
            assert!(g.decoder.token_embedding.row(id).iter().all(|&v| v == 0.0));
        }
        assert!(g.decoder.position_embedding.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_gradient_check() {
        let cfg = ModelConfig { dim: 8, heads: 4, vocab: 6, max_len: 3 };
        let m = ToyModel::init(cfg, 5).unwrap();
        let ex = example(cfg, 2, vec![4, 2], 11);
        for c in gradient_check(&m, &ex, 1e-5).unwrap() {
            assert!(c.relative_error < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let cfg = ModelConfig { dim: 8, heads: 4, vocab: 6, max_len: 4 };
        let mut m = ToyModel::init(cfg, 6).unwrap();
        let trace = train_toy(&mut m, &[example(cfg, 2, vec![1, 2], 12)], 5, 0.0).unwrap();
        assert!(trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let cfg = ModelConfig { dim: 8, heads: 4, vocab: 6, max_len: 4 };
        let mut m = ToyModel::init(cfg, 7).unwrap();
        m.decoder.b_head[0] = f64::NAN;
        let err = train_toy(&mut m, &[example(cfg, 2, vec![1], 13)], 3, 0.1).unwrap_err();
        assert!(matches!(err, HierError::NonFiniteLoss { step: 0 }));
        assert!(matches!(train_toy(&mut m, &[], 1, 0.1), Err(HierError::NoExamples)));
    }
}
