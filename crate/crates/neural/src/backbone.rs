//! Small convolutional feature extractor shared by both regressors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::graph::Var;
use crate::layers::{Conv2d, Linear};
use crate::params::{Params, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stages: Vec<ConvStage>,
    /// Length of the per-image feature vector (the transformer token width).
    pub feature_len: usize,
}

impl Default for BackboneConfig {
    /// 64×64 RGB input; four stages ending on a 16×16 map, so the
    /// filter-averaged map linearizes to exactly 256 values.
    fn default() -> Self {
        Self {
            in_channels: 3,
            input_height: 64,
            input_width: 64,
            stages: vec![
                ConvStage { channels: 16, stride: 2 },
                ConvStage { channels: 32, stride: 1 },
                ConvStage { channels: 32, stride: 2 },
                ConvStage { channels: 64, stride: 1 },
            ],
            feature_len: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_len == 0 {
            return Err(NeuralError::Config("feature_len must be >= 1".into()));
        }
        if self.stages.is_empty() {
            return Err(NeuralError::Config("backbone needs at least one stage".into()));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(NeuralError::Config("stage channels and stride must be > 0".into()));
        }
        if self.input_height == 0 || self.input_width == 0 || self.in_channels == 0 {
            return Err(NeuralError::Config("input dimensions must be > 0".into()));
        }
        Ok(())
    }

    pub fn convs(&self) -> Vec<Conv2d> {
        let mut c_in = self.in_channels;
        self.stages
            .iter()
            .enumerate()
            .map(|(i, st)| {
                let conv = Conv2d {
                    name: format!("backbone.conv{i}"),
                    in_channels: c_in,
                    out_channels: st.channels,
                    kernel: 3,
                    stride: st.stride,
                };
                c_in = st.channels;
                conv
            })
            .collect()
    }

    /// `(channels, height, width)` of the final activation map.
    pub fn output_dims(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.input_height, self.input_width);
        let convs = self.convs();
        for c in &convs {
            (h, w) = c.output_size(h, w);
        }
        (convs.last().map_or(self.in_channels, |c| c.out_channels), h, w)
    }

    /// Whether a learned projection is needed to reach `feature_len`.
    pub fn needs_projection(&self) -> bool {
        let (_, h, w) = self.output_dims();
        h * w != self.feature_len
    }

    fn projection(&self) -> Linear {
        let (_, h, w) = self.output_dims();
        Linear::new("backbone.proj", h * w, self.feature_len)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    convs: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let convs = config.convs();
        Ok(Self { config, convs })
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, rng: &mut impl Rng, with_projection: bool) {
        for c in &self.convs {
            c.init(params, rng);
        }
        if with_projection && self.config.needs_projection() {
            self.config.projection().init(params, rng);
        }
    }

    pub fn stage_count(&self) -> usize {
        self.convs.len()
    }

    pub fn stage_weight_name(&self, stage: usize) -> Option<String> {
        self.convs.get(stage).map(|c| c.weight_name())
    }

    fn check_input<T: Scalar>(&self, image: &Tensor<T>, width: usize) -> Result<()> {
        let want = [self.config.in_channels, self.config.input_height, width];
        if image.shape() != want {
            return Err(NeuralError::Shape(format!(
                "backbone expects {:?}, got {:?}",
                want,
                image.shape()
            )));
        }
        Ok(())
    }

    /// Runs every stage (conv + ReLU) and returns each stage's activation.
    pub fn activations<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(s, h)?;
            h = s.graph.relu(y);
            out.push(h);
        }
        Ok(out)
    }

    /// Per-image token: final map averaged over filters, linearized to `[1, feature_len]`.
    pub fn token<T: Scalar>(&self, s: &mut Session<'_, T>, image: &Tensor<T>) -> Result<Var> {
        self.check_input(image, self.config.input_width)?;
        let x = s.graph.constant(image.clone());
        let acts = self.activations(s, x)?;
        let last = *acts.last().expect("at least one stage");
        let mean = s.graph.channel_mean(last)?;
        let (_, h, w) = self.config.output_dims();
        let flat = s.graph.reshape(mean, &[1, h * w])?;
        if self.config.needs_projection() {
            self.config.projection().forward(s, flat)
        } else {
            Ok(flat)
        }
    }

    pub(crate) fn check_pair_input<T: Scalar>(&self, image: &Tensor<T>) -> Result<()> {
        self.check_input(image, self.config.input_width)
    }
}
