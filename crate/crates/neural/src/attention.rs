//! Multi-head scaled dot-product self-attention.

use rand::Rng;

use crate::error::{NeuralError, Result};
use crate::graph::Var;
use crate::layers::Linear;
use crate::params::{Params, Session};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub width: usize,
    pub heads: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

/// Attention output plus the per-head `[n, n]` weight matrices.
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadSelfAttention {
    pub fn new(name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(NeuralError::Config(format!(
                "token width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            width,
            heads,
            query: Linear::new(format!("{name}.q"), width, width),
            key: Linear::new(format!("{name}.k"), width, width),
            value: Linear::new(format!("{name}.v"), width, width),
            output: Linear::new(format!("{name}.o"), width, width),
        })
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        self.query.init(params, rng);
        self.key.init(params, rng);
        self.value.init(params, rng);
        self.output.init(params, rng);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: Var) -> Result<Var> {
        Ok(self.forward_traced(s, tokens)?.output)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        tokens: Var,
    ) -> Result<AttentionTrace> {
        match s.graph.shape(tokens) {
            [_, d] if *d == self.width => {}
            other => {
                return Err(NeuralError::Shape(format!(
                    "attention expects [n, {}], got {:?}",
                    self.width, other
                )))
            }
        }
        let q = self.query.forward(s, tokens)?;
        let k = self.key.forward(s, tokens)?;
        let v = self.value.forward(s, tokens)?;
        let dh = self.width / self.heads;
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = s.graph.slice_cols(q, h * dh, dh)?;
            let kh = s.graph.slice_cols(k, h * dh, dh)?;
            let vh = s.graph.slice_cols(v, h * dh, dh)?;
            let kt = s.graph.transpose(kh)?;
            let logits = s.graph.matmul(qh, kt)?;
            let logits = s.graph.scale(logits, inv_sqrt);
            let attn = s.graph.softmax_rows(logits)?;
            heads.push(s.graph.matmul(attn, vh)?);
            weights.push(attn);
        }
        let joined = s.graph.concat_cols(&heads)?;
        let output = self.output.forward(s, joined)?;
        Ok(AttentionTrace { output, weights })
    }
}
