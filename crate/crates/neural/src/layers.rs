//! Parameterized building blocks bound through a [`Session`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::params::{Params, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dense layer `x[m, in] · W[in, out] + b[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        params.init_uniform(&self.weight(), &[self.inputs, self.outputs], self.inputs, rng);
        params.init_uniform(&self.bias(), &[self.outputs], self.inputs, rng);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(&self.weight())?;
        let b = s.param(&self.bias())?;
        let y = s.graph.matmul(x, w)?;
        s.graph.add_row_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub width: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, width: usize) -> Self {
        Self {
            name: name.into(),
            width,
        }
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>) {
        params.init_const(&format!("{}.gamma", self.name), &[self.width], 1.0);
        params.init_const(&format!("{}.beta", self.name), &[self.width], 0.0);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(&format!("{}.gamma", self.name))?;
        let b = s.param(&format!("{}.beta", self.name))?;
        s.graph.layer_norm_rows(x, g, b, T::of(Self::EPS))
    }
}

/// Square-kernel convolution with zero padding `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        params.init_uniform(
            &self.weight_name(),
            &[self.out_channels, self.in_channels, self.kernel, self.kernel],
            fan_in,
            rng,
        );
        params.init_uniform(&format!("{}.bias", self.name), &[self.out_channels], fan_in, rng);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let b = s.param(&format!("{}.bias", self.name))?;
        s.graph.conv2d(x, w, b, self.stride, self.kernel / 2)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Inverted dropout. `rng = None` is evaluation mode (identity).
pub fn dropout<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let rng = match rng {
        Some(r) if rate > 0.0 => r,
        _ => return Ok(x),
    };
    let keep = 1.0 - rate;
    let scale = T::of(1.0 / keep);
    let shape = s.graph.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| {
        if rng.random::<f64>() < keep {
            scale
        } else {
            T::zero()
        }
    });
    s.graph.mul_const(x, mask)
}
