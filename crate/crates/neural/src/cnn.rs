//! Paired-image CNN regressor.
//!
//! Input is one North frame and one South frame concatenated along the width
//! (North on the left). The backbone output is flattened into a regression
//! head of two hidden layers (each Linear → ReLU → dropout) and a width-1
//! output layer. The raw output is the prediction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ConvStage};
use crate::error::{NeuralError, Result};
use crate::graph::Var;
use crate::layers::{dropout, Linear};
use crate::params::{Params, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnRegressorConfig {
    /// `input_width` is the width of the concatenated pair.
    pub backbone: BackboneConfig,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Stage whose activation Grad-CAM reads; `None` means the last stage.
    pub cam_stage: Option<usize>,
}

impl Default for CnnRegressorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                input_width: 128,
                stages: vec![
                    ConvStage { channels: 16, stride: 2 },
                    ConvStage { channels: 32, stride: 2 },
                    ConvStage { channels: 32, stride: 2 },
                    ConvStage { channels: 32, stride: 2 },
                ],
                ..BackboneConfig::default()
            },
            hidden: vec![1024, 1024],
            dropout: 0.2,
            cam_stage: None,
        }
    }
}

impl CnnRegressorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(NeuralError::Config("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NeuralError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if let Some(s) = self.cam_stage {
            if s >= self.backbone.stages.len() {
                return Err(NeuralError::Config(format!("cam stage {s} out of range")));
            }
        }
        Ok(())
    }

    pub fn cam_stage_index(&self) -> usize {
        self.cam_stage.unwrap_or(self.backbone.stages.len() - 1)
    }
}

/// Forward values needed by Grad-CAM.
pub struct CnnTrace {
    pub output: Var,
    pub cam_activation: Var,
}

#[derive(Clone, Debug)]
pub struct CnnRegressor {
    pub config: CnnRegressorConfig,
    backbone: Backbone,
    hidden: Vec<Linear>,
    out: Linear,
}

impl CnnRegressor {
    pub fn new(config: CnnRegressorConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone())?;
        let (c, h, w) = config.backbone.output_dims();
        let mut width = c * h * w;
        let hidden = config
            .hidden
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let l = Linear::new(format!("head.fc{i}"), width, out);
                width = out;
                l
            })
            .collect();
        let out = Linear::new("head.out", width, 1);
        Ok(Self {
            config,
            backbone,
            hidden,
            out,
        })
    }

    pub fn init<T: Scalar>(&self, rng: &mut impl Rng, output_bias: f64) -> Params<T> {
        let mut p = Params::new();
        self.backbone.init(&mut p, rng, false);
        for l in &self.hidden {
            l.init(&mut p, rng);
        }
        self.out.init(&mut p, rng);
        p.init_const("head.out.bias", &[1], output_bias);
        p
    }

    /// Name of the weight that must exist for Grad-CAM's designated layer.
    pub fn cam_layer_weight(&self) -> String {
        self.backbone
            .stage_weight_name(self.config.cam_stage_index())
            .expect("validated stage")
    }

    /// `pair` is `[C, H, 2W]`; `dropout_rng = None` is evaluation mode.
    pub fn forward_traced<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        pair: &Tensor<T>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<CnnTrace> {
        self.backbone.check_pair_input(pair)?;
        let x = s.graph.constant(pair.clone());
        let acts = self.backbone.activations(s, x)?;
        let cam_activation = acts[self.config.cam_stage_index()];
        let last = *acts.last().expect("stages");
        let n = s.graph.value(last).len();
        let mut h = s.graph.reshape(last, &[1, n])?;
        for l in &self.hidden {
            h = l.forward(s, h)?;
            h = s.graph.relu(h);
            h = dropout(s, h, self.config.dropout, dropout_rng.as_deref_mut())?;
        }
        let output = self.out.forward(s, h)?;
        Ok(CnnTrace {
            output,
            cam_activation,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        pair: &Tensor<T>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        Ok(self.forward_traced(s, pair, dropout_rng)?.output)
    }

    /// Evaluation-mode prediction for one concatenated pair.
    pub fn predict<T: Scalar>(&self, params: &Params<T>, pair: &Tensor<T>) -> Result<f64> {
        let mut s = Session::frozen(params);
        let y = self.forward(&mut s, pair, None)?;
        Ok(s.graph.value(y).item().as_f64())
    }

    /// Concatenates North (left) and South (right) frames.
    pub fn pair_input<T: Scalar>(north: &Tensor<T>, south: &Tensor<T>) -> Result<Tensor<T>> {
        Tensor::concat_width(north, south)
    }

    /// Mean prediction over every North × South combination.
    pub fn infer_all_pairs<T: Scalar>(
        &self,
        params: &Params<T>,
        north: &[&Tensor<T>],
        south: &[&Tensor<T>],
    ) -> Result<f64> {
        if north.is_empty() || south.is_empty() {
            return Err(NeuralError::Empty(format!(
                "need images on both sides (north {}, south {})",
                north.len(),
                south.len()
            )));
        }
        let mut total = 0.0;
        for n in north {
            for s in south {
                total += self.predict(params, &Self::pair_input(n, s)?)?;
            }
        }
        Ok(total / (north.len() * south.len()) as f64)
    }
}
