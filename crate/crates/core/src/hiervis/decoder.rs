//! Small autoregressive decoder that stands in for a language model: each
//! answer position cross-attends to the prompt tokens, the visual sequence
//! and the earlier answer tokens, then predicts the next token.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::block::{glorot, BlockCache, BlockParams};
use super::hierarchy::FeatureHierarchy;
use super::HierError;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    /// Query input for the first answer position.
    pub bos: Array1<f64>,
    pub block: BlockParams,
    pub w_head: Array2<f64>,
    pub b_head: Array1<f64>,
}

/// Token ids standing in for the scene text, the situation and the question.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecoderContext {
    pub scene_text: Vec<usize>,
    pub situation: Vec<usize>,
    pub question: Vec<usize>,
}

impl DecoderContext {
    pub fn prefix(&self) -> impl Iterator<Item = usize> + '_ {
        self.scene_text.iter().chain(&self.situation).chain(&self.question).copied()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    steps: Vec<StepCache>,
}

#[derive(Debug, Clone)]
struct StepCache {
    block: BlockCache,
    hidden: Array1<f64>,
    probs: Array1<f64>,
}

impl ToyDecoder {
    pub fn zeros(dim: usize, heads: usize, vocab: usize, max_len: usize) -> Result<Self, HierError> {
        if vocab < 2 {
            return Err(HierError::Vocab(vocab));
        }
        Ok(Self {
            token_embedding: Array2::zeros((vocab, dim)),
            position_embedding: Array2::zeros((max_len, dim)),
            bos: Array1::zeros(dim),
            block: BlockParams::zeros(dim, heads)?,
            w_head: Array2::zeros((dim, vocab)),
            b_head: Array1::zeros(vocab),
        })
    }

    pub fn init<R: Rng>(dim: usize, heads: usize, vocab: usize, max_len: usize, rng: &mut R) -> Result<Self, HierError> {
        if vocab < 2 {
            return Err(HierError::Vocab(vocab));
        }
        let token_embedding = glorot(vocab, dim, rng);
        let position_embedding = glorot(max_len, dim, rng);
        let bos = glorot(1, dim, rng).row(0).to_owned();
        let block = BlockParams::init(dim, heads, rng)?;
        let w_head = glorot(dim, vocab, rng);
        Ok(Self { token_embedding, position_embedding, bos, block, w_head, b_head: Array1::zeros(vocab) })
    }

    pub fn vocab(&self) -> usize {
        self.token_embedding.nrows()
    }

    pub fn max_len(&self) -> usize {
        self.position_embedding.nrows()
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.view().into_dyn()),
            ("position_embedding".to_string(), self.position_embedding.view().into_dyn()),
            ("bos".to_string(), self.bos.view().into_dyn()),
        ];
        out.extend(self.block.tensors().into_iter().map(|(n, t)| (format!("block.{n}"), t)));
        out.push(("w_head".into(), self.w_head.view().into_dyn()));
        out.push(("b_head".into(), self.b_head.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.view_mut().into_dyn()),
            ("position_embedding".to_string(), self.position_embedding.view_mut().into_dyn()),
            ("bos".to_string(), self.bos.view_mut().into_dyn()),
        ];
        out.extend(self.block.tensors_mut().into_iter().map(|(n, t)| (format!("block.{n}"), t)));
        out.push(("w_head".into(), self.w_head.view_mut().into_dyn()));
        out.push(("b_head".into(), self.b_head.view_mut().into_dyn()));
        out
    }

    fn check_ids(&self, ids: impl Iterator<Item = usize>) -> Result<(), HierError> {
        let vocab = self.vocab();
        for id in ids {
            if id >= vocab {
                return Err(HierError::TokenOutOfRange { id, vocab });
            }
        }
        Ok(())
    }

    fn keys(&self, prefix: &[usize], hierarchy: &FeatureHierarchy, history: &[usize]) -> Array2<f64> {
        let rows = prefix.len() + hierarchy.f_v.nrows() + history.len();
        let mut keys = Array2::zeros((rows, self.bos.len()));
        for (r, &id) in prefix.iter().enumerate() {
            keys.row_mut(r).assign(&self.token_embedding.row(id));
        }
        let f = prefix.len();
        keys.slice_mut(s![f..f + hierarchy.f_v.nrows(), ..]).assign(&hierarchy.f_v);
        let a = f + hierarchy.f_v.nrows();
        for (r, &id) in history.iter().enumerate() {
            keys.row_mut(a + r).assign(&self.token_embedding.row(id));
        }
        keys
    }

    /// Teacher-forced forward pass. Returns the summed negative log
    /// likelihood and the log-probabilities at each answer position.
    pub fn forward(
        &self,
        hierarchy: &FeatureHierarchy,
        context: &DecoderContext,
        targets: &[usize],
    ) -> Result<(f64, Array2<f64>, DecoderCache), HierError> {
        if targets.is_empty() {
            return Err(HierError::EmptyTarget);
        }
        if targets.len() > self.max_len() {
            return Err(HierError::TooLong { len: targets.len(), max: self.max_len() });
        }
        if hierarchy.f_v.ncols() != self.bos.len() {
            return Err(HierError::Dim { what: "visual tokens", expected: self.bos.len(), got: hierarchy.f_v.ncols() });
        }
        self.check_ids(context.prefix().chain(targets.iter().copied()))?;
        let prefix: Vec<usize> = context.prefix().collect();
        let mut loss = 0.0;
        let mut log_probs = Array2::zeros((targets.len(), self.vocab()));
        let mut steps = Vec::with_capacity(targets.len());
        for (i, &target) in targets.iter().enumerate() {
            let prev = if i == 0 { self.bos.view() } else { self.token_embedding.row(targets[i - 1]) };
            let query = (&prev + &self.position_embedding.row(i)).insert_axis(Axis(0));
            let keys = self.keys(&prefix, hierarchy, &targets[..i]);
            let (out, block) = self.block.forward(query.view(), keys.view())?;
            let hidden = out.row(0).to_owned();
            let logits = hidden.dot(&self.w_head) + &self.b_head;
            let m = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let log_z = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let lp = logits.mapv(|v| v - log_z);
            loss -= lp[target];
            let probs = lp.mapv(f64::exp);
            log_probs.row_mut(i).assign(&lp);
            steps.push(StepCache { block, hidden, probs });
        }
        Ok((loss, log_probs, DecoderCache { steps }))
    }

    /// Gradient of `scale * loss`, accumulated into `grads`; returns the
    /// gradient with respect to `f_v`.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        hierarchy: &FeatureHierarchy,
        context: &DecoderContext,
        targets: &[usize],
        scale: f64,
        grads: &mut ToyDecoder,
    ) -> Array2<f64> {
        let prefix: Vec<usize> = context.prefix().collect();
        let n_fv = hierarchy.f_v.nrows();
        let mut d_fv = Array2::zeros(hierarchy.f_v.raw_dim());
        for (i, (step, &target)) in cache.steps.iter().zip(targets).enumerate() {
            let mut d_logits = &step.probs * scale;
            d_logits[target] -= scale;
            grads.w_head += &step.hidden.view().insert_axis(Axis(1)).dot(&d_logits.view().insert_axis(Axis(0)));
            grads.b_head += &d_logits;
            let d_hidden = self.w_head.dot(&d_logits).insert_axis(Axis(0));
            let (dq, dk) = self.block.backward(&step.block, d_hidden.view(), &mut grads.block);
            let dq = dq.row(0);
            if i == 0 {
                grads.bos += &dq;
            } else {
                let mut row = grads.token_embedding.row_mut(targets[i - 1]);
                row += &dq;
            }
            let mut pos = grads.position_embedding.row_mut(i);
            pos += &dq;
            for (r, &id) in prefix.iter().enumerate() {
                let mut row = grads.token_embedding.row_mut(id);
                row += &dk.row(r);
            }
            let f = prefix.len();
            d_fv += &dk.slice(s![f..f + n_fv, ..]);
            for (r, &id) in targets[..i].iter().enumerate() {
                let mut row = grads.token_embedding.row_mut(id);
                row += &dk.row(f + n_fv + r);
            }
        }
        d_fv
    }
}
