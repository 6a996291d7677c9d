//! Windowed transformer regressor.
//!
//! Each image in a yield point's window goes through the shared backbone to
//! produce one token. With fusion enabled, every token is combined with its
//! image's position and orientation scalars by a width-1 convolution over
//! three channels (feature, position, orientation). Tokens then pass a shared
//! linear embedding, as ViT does with its patches; the fused scalars are a
//! per-token constant shift, which pre-norm LayerNorm would otherwise erase.
//! A zero-initialized class token is prepended, the sequence runs through pre-norm encoder blocks, and
//! a linear decoder on the class token yields the scalar prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MultiHeadSelfAttention;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{NeuralError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Params, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub backbone: BackboneConfig,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of each encoder block's MLP.
    pub mlp_width: usize,
    pub class_token: bool,
    /// Combine position/orientation scalars with each token.
    pub fusion: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let d = backbone.feature_len;
        Self {
            backbone,
            depth: 2,
            heads: 8,
            mlp_width: 4 * d,
            class_token: true,
            fusion: true,
        }
    }
}

impl TransformerConfig {
    pub fn token_width(&self) -> usize {
        self.backbone.feature_len
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let d = self.token_width();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(NeuralError::Config(format!(
                "token width {d} must be divisible by {} heads",
                self.heads
            )));
        }
        if self.depth == 0 || self.mlp_width == 0 {
            return Err(NeuralError::Config("depth and mlp width must be >= 1".into()));
        }
        Ok(())
    }
}

/// One window member as seen by the model.
#[derive(Clone, Copy, Debug)]
pub struct WindowInput<'a, T> {
    pub image: &'a Tensor<T>,
    /// Along-row offset mapped to `[0, 1]`, yield point at 0.5.
    pub position: f64,
    /// 0.5 for South-facing, 1.0 for North-facing.
    pub orientation: f64,
}

/// Fuses per-image features with broadcast position/orientation scalars.
///
/// `features` is `[n, d]`; `weight` is `[1, 3]` over (feature, position,
/// orientation) and `bias` is `[1]`. Output row `i` is
/// `w_f * f_i + w_p * p_i + w_o * o_i + b`.
pub fn combine_positional<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    positions: &[f64],
    orientations: &[f64],
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let (n, d) = match g.shape(features) {
        [n, d] => (*n, *d),
        s => return Err(NeuralError::Shape(format!("features must be [n, d], got {s:?}"))),
    };
    if positions.len() != n || orientations.len() != n {
        return Err(NeuralError::Shape(format!(
            "{n} feature rows but {} positions and {} orientations",
            positions.len(),
            orientations.len()
        )));
    }
    if g.shape(weight) != [1, 3] || g.value(bias).len() != 1 {
        return Err(NeuralError::Shape("fusion weight must be [1, 3] with a scalar bias".into()));
    }
    let broadcast = |vals: &[f64]| Tensor::from_fn(&[n, d], |i| T::of(vals[i / d]));
    let p = g.constant(broadcast(positions));
    let o = g.constant(broadcast(orientations));
    let stacked = g.stack_channels(&[features, p, o])?;
    let fused = g.pointwise_conv1d(stacked, weight, bias)?;
    g.reshape(fused, &[n, d])
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadSelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderBlock {
    fn new(i: usize, d: usize, heads: usize, mlp: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(format!("encoder{i}.ln1"), d),
            attn: MultiHeadSelfAttention::new(&format!("encoder{i}.attn"), d, heads)?,
            ln2: LayerNorm::new(format!("encoder{i}.ln2"), d),
            fc1: Linear::new(format!("encoder{i}.mlp.fc1"), d, mlp),
            fc2: Linear::new(format!("encoder{i}.mlp.fc2"), mlp, d),
        })
    }

    fn init<T: Scalar>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        self.ln1.init(params);
        self.attn.init(params, rng);
        self.ln2.init(params);
        self.fc1.init(params, rng);
        self.fc2.init(params, rng);
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(s, x)?;
        let a = self.attn.forward(s, h)?;
        let x = s.graph.add(x, a)?;
        let h = self.ln2.forward(s, x)?;
        let h = self.fc1.forward(s, h)?;
        let h = s.graph.gelu(h);
        let h = self.fc2.forward(s, h)?;
        s.graph.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct WindowTransformer {
    pub config: TransformerConfig,
    backbone: Backbone,
    embed: Linear,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
    head: Linear,
}

impl WindowTransformer {
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.token_width();
        let backbone = Backbone::new(config.backbone.clone())?;
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(i, d, config.heads, config.mlp_width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            backbone,
            embed: Linear::new("embed", d, d),
            blocks,
            final_ln: LayerNorm::new("final_ln", d),
            head: Linear::new("head", d, 1),
            config,
        })
    }

    /// Random initialization; the decoder bias starts at `output_bias`.
    pub fn init<T: Scalar>(&self, rng: &mut impl Rng, output_bias: f64) -> Params<T> {
        let mut p = Params::new();
        let d = self.config.token_width();
        self.backbone.init(&mut p, rng, true);
        if self.config.fusion {
            p.init_uniform("fusion.weight", &[1, 3], 3, rng);
            p.init_uniform("fusion.bias", &[1], 3, rng);
        }
        if self.config.class_token {
            p.init_const("cls", &[1, d], 0.0);
        }
        self.embed.init(&mut p, rng);
        for b in &self.blocks {
            b.init(&mut p, rng);
        }
        self.final_ln.init(&mut p);
        self.head.init(&mut p, rng);
        p.init_const("head.bias", &[1], output_bias);
        p
    }

    /// Input tokens `[n, d]` after the backbone, optional positional fusion and embedding.
    pub fn tokens<T: Scalar>(&self, s: &mut Session<'_, T>, window: &[WindowInput<'_, T>]) -> Result<Var> {
        if window.is_empty() {
            return Err(NeuralError::Empty("window has no member images".into()));
        }
        let rows = window
            .iter()
            .map(|m| self.backbone.token(s, m.image))
            .collect::<Result<Vec<_>>>()?;
        let features = s.graph.concat_rows(&rows)?;
        let fused = if self.config.fusion {
            let pos: Vec<f64> = window.iter().map(|m| m.position).collect();
            let ori: Vec<f64> = window.iter().map(|m| m.orientation).collect();
            let w = s.param("fusion.weight")?;
            let b = s.param("fusion.bias")?;
            combine_positional(&mut s.graph, features, &pos, &ori, w, b)?
        } else {
            features
        };
        self.embed.forward(s, fused)
    }

    /// Scalar prediction `[1, 1]` for one window.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, window: &[WindowInput<'_, T>]) -> Result<Var> {
        let tokens = self.tokens(s, window)?;
        let n = window.len();
        let mut x = if self.config.class_token {
            let cls = s.param("cls")?;
            s.graph.concat_rows(&[cls, tokens])?
        } else {
            tokens
        };
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        let x = self.final_ln.forward(s, x)?;
        let summary = if self.config.class_token {
            s.graph.slice_rows(x, 0, 1)?
        } else {
            let avg = s.graph.constant(Tensor::full(&[1, n], T::of(1.0 / n as f64)));
            s.graph.matmul(avg, x)?
        };
        self.head.forward(s, summary)
    }

    /// Evaluation-mode prediction.
    pub fn predict<T: Scalar>(&self, params: &Params<T>, window: &[WindowInput<'_, T>]) -> Result<f64> {
        let mut s = Session::frozen(params);
        let y = self.forward(&mut s, window)?;
        Ok(s.graph.value(y).item().as_f64())
    }
}
