//! General robust loss with an optionally learned shape parameter.
//!
//! The penalty is
//!
//! ```text
//! rho(x, a, c) = |a-2|/a * (((x/c)^2 / |a-2| + 1)^(a/2) - 1)
//! ```
//!
//! with the limits `0.5 (x/c)^2` at `a = 2` and `log(0.5 (x/c)^2 + 1)` at
//! `a = 0`. In adaptive mode the loss is the negative log-likelihood of the
//! matching density, `rho + log c + log Z(a)`, where `Z(a)` is tabulated once
//! by quadrature on `a ∈ [0, 2]`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

pub const ALPHA_MIN: f64 = 0.0;
pub const ALPHA_MAX: f64 = 2.0;
/// Knots in the log-partition table, spanning `[ALPHA_MIN, ALPHA_MAX]`.
pub const TABLE_POINTS: usize = 2001;

/// Below this distance from 0 or 2 the shape derivative uses a difference quotient.
const SINGULAR_BAND: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustLossParams {
    pub alpha: f64,
    pub scale: f64,
    /// Learn `alpha` (clamped to `[0, 2]`) and add the log-partition term.
    pub adaptive: bool,
}

impl Default for RobustLossParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            scale: 1.0,
            adaptive: true,
        }
    }
}

impl RobustLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(NeuralError::Config(format!(
                "robust loss scale must be > 0, got {}",
                self.scale
            )));
        }
        if !self.alpha.is_finite() {
            return Err(NeuralError::Config("robust loss alpha must be finite".into()));
        }
        Ok(())
    }
}

/// Penalty for a single residual. Errors when `c <= 0`.
pub fn robust_loss(x: f64, params: &RobustLossParams) -> Result<f64> {
    params.validate()?;
    Ok(rho_f64(x, params.alpha, params.scale))
}

/// Negative log-likelihood `rho + log c + log Z(alpha)`.
pub fn adaptive_nll(x: f64, params: &RobustLossParams) -> Result<f64> {
    params.validate()?;
    let (log_z, _) = log_partition_table().eval(params.alpha);
    Ok(rho_f64(x, params.alpha, params.scale) + params.scale.ln() + log_z)
}

pub(crate) fn rho<T: Scalar>(x: T, alpha: T, c: T) -> T {
    T::of(rho_f64(x.as_f64(), alpha.as_f64(), c.as_f64()))
}

pub fn rho_f64(x: f64, alpha: f64, c: f64) -> f64 {
    let z = (x / c) * (x / c);
    if alpha == 2.0 {
        return 0.5 * z;
    }
    if alpha == 0.0 {
        return (0.5 * z).ln_1p();
    }
    let b = (alpha - 2.0).abs();
    (b / alpha) * ((alpha / 2.0) * (z / b).ln_1p()).exp_m1()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct RhoPartials<T> {
    pub dx: T,
    pub dalpha: T,
    pub dscale: T,
}

pub(crate) fn rho_partials<T: Scalar>(x: T, alpha: T, c: T) -> RhoPartials<T> {
    let (dx, da, dc) = rho_partials_f64(x.as_f64(), alpha.as_f64(), c.as_f64());
    RhoPartials {
        dx: T::of(dx),
        dalpha: T::of(da),
        dscale: T::of(dc),
    }
}

/// `(∂rho/∂x, ∂rho/∂alpha, ∂rho/∂c)`.
pub fn rho_partials_f64(x: f64, alpha: f64, c: f64) -> (f64, f64, f64) {
    let z = (x / c) * (x / c);
    // q^(alpha/2 - 1), with q = z/|alpha-2| + 1; equals 1 at alpha = 2.
    let q_pow = if alpha == 2.0 {
        1.0
    } else {
        let b = (alpha - 2.0).abs();
        ((alpha / 2.0 - 1.0) * (z / b).ln_1p()).exp()
    };
    let dx = x / (c * c) * q_pow;
    let dc = -(z / c) * q_pow;
    let dalpha = if alpha.abs() < SINGULAR_BAND {
        let h = 1e-6;
        (rho_f64(x, alpha + h, c) - rho_f64(x, alpha - h, c)) / (2.0 * h)
    } else if (alpha - 2.0).abs() < SINGULAR_BAND {
        // The shape derivative diverges logarithmically at 2; use the left quotient.
        let h = 1e-6;
        let a = alpha.min(2.0);
        (rho_f64(x, a, c) - rho_f64(x, a - h, c)) / h
    } else {
        let b = (alpha - 2.0).abs();
        let s = (alpha - 2.0).signum();
        let l = (z / b).ln_1p();
        let e = ((alpha / 2.0) * l).exp_m1();
        let q_half = ((alpha / 2.0) * l).exp();
        let q = 1.0 + z / b;
        (s * alpha - b) / (alpha * alpha) * e
            + (b / alpha) * q_half * (0.5 * l - (alpha / 2.0) * z * s / (q * b * b))
    };
    (dx, dalpha, dc)
}

/// Cubic Hermite table of `log Z(alpha)` on `[0, 2]`.
///
/// Near `alpha = 2` the log-partition behaves like `-(b ln b)/4` with
/// `b = 2 - alpha` (the first-order change of `rho` is `(b z/4) ln b` and
/// `E[z] = 1` under the Gaussian limit). That term is removed before
/// tabulating and added back exactly, leaving a smooth remainder.
#[derive(Debug)]
pub struct LogPartitionTable {
    step: f64,
    values: Vec<f64>,
    tangents: Vec<f64>,
}

pub fn log_partition_table() -> &'static LogPartitionTable {
    static TABLE: OnceLock<LogPartitionTable> = OnceLock::new();
    TABLE.get_or_init(|| LogPartitionTable::build(TABLE_POINTS))
}

/// `-(b ln b)/4` and its derivative in `alpha`, for `b = 2 - alpha >= 0`.
fn singular_part(alpha: f64) -> (f64, f64) {
    let b = (ALPHA_MAX - alpha).max(0.0);
    if b == 0.0 {
        return (0.0, f64::NEG_INFINITY);
    }
    (-0.25 * b * b.ln(), 0.25 * (b.ln() + 1.0))
}

impl LogPartitionTable {
    pub fn build(points: usize) -> Self {
        assert!(points >= 5);
        let step = (ALPHA_MAX - ALPHA_MIN) / (points - 1) as f64;
        let values: Vec<f64> = (0..points)
            .map(|i| {
                let a = ALPHA_MIN + i as f64 * step;
                partition_by_quadrature(a).ln() - singular_part(a).0
            })
            .collect();
        let n = values.len();
        let v = &values;
        // Fourth-order differences; one-sided stencils at the ends.
        let tangents = (0..n)
            .map(|i| {
                let d = if i < 2 {
                    let j = i;
                    let f = |k: usize| v[k];
                    if j == 0 {
                        -25.0 * f(0) + 48.0 * f(1) - 36.0 * f(2) + 16.0 * f(3) - 3.0 * f(4)
                    } else {
                        -3.0 * f(0) - 10.0 * f(1) + 18.0 * f(2) - 6.0 * f(3) + f(4)
                    }
                } else if i + 2 >= n {
                    let f = |k: usize| v[n - 1 - k];
                    if i == n - 1 {
                        -(-25.0 * f(0) + 48.0 * f(1) - 36.0 * f(2) + 16.0 * f(3) - 3.0 * f(4))
                    } else {
                        -(-3.0 * f(0) - 10.0 * f(1) + 18.0 * f(2) - 6.0 * f(3) + f(4))
                    }
                } else {
                    v[i - 2] - 8.0 * v[i - 1] + 8.0 * v[i + 1] - v[i + 2]
                };
                d / (12.0 * step)
            })
            .collect();
        Self {
            step,
            values,
            tangents,
        }
    }

    pub fn knots(&self) -> usize {
        self.values.len()
    }

    /// Value and derivative of `log Z`; linear extrapolation outside the table.
    pub fn eval(&self, alpha: f64) -> (f64, f64) {
        if (ALPHA_MAX - alpha).abs() < 1e-6 {
            // The derivative diverges at 2; use the left secant, as rho does.
            let h = 1e-6;
            let a = alpha.min(ALPHA_MAX);
            let (v, _) = self.eval_smooth(alpha);
            let (lo, _) = self.eval_smooth(a - h);
            let s = |x: f64| singular_part(x).0;
            let value = v + s(a) + (alpha - a) * ((v + s(a)) - (lo + s(a - h))) / h;
            return (value, ((v + s(a)) - (lo + s(a - h))) / h);
        }
        let (v, d) = self.eval_smooth(alpha);
        let (sv, sd) = if alpha < ALPHA_MAX { singular_part(alpha) } else { (0.0, 0.0) };
        (v + sv, d + sd)
    }

    fn eval_smooth(&self, alpha: f64) -> (f64, f64) {
        let n = self.values.len();
        let hi = ALPHA_MIN + (n - 1) as f64 * self.step;
        if alpha <= ALPHA_MIN {
            let m = self.tangents[0];
            return (self.values[0] + m * (alpha - ALPHA_MIN), m);
        }
        if alpha >= hi {
            let m = self.tangents[n - 1];
            return (self.values[n - 1] + m * (alpha - hi), m);
        }
        let pos = (alpha - ALPHA_MIN) / self.step;
        let i = (pos.floor() as usize).min(n - 2);
        let u = pos - i as f64;
        let h = self.step;
        let (p0, p1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.tangents[i] * h, self.tangents[i + 1] * h);
        let (u2, u3) = (u * u, u * u * u);
        let v = (2.0 * u3 - 3.0 * u2 + 1.0) * p0
            + (u3 - 2.0 * u2 + u) * m0
            + (-2.0 * u3 + 3.0 * u2) * p1
            + (u3 - u2) * m1;
        let d = ((6.0 * u2 - 6.0 * u) * p0
            + (3.0 * u2 - 4.0 * u + 1.0) * m0
            + (-6.0 * u2 + 6.0 * u) * p1
            + (3.0 * u2 - 2.0 * u) * m1)
            / h;
        (v, d)
    }
}

/// `∫ exp(-rho(x, alpha, 1)) dx` over the real line.
///
/// Integrates `2 ∫ exp(-rho(e^s)) e^s ds` by composite 5-point Gauss–Legendre
/// on `s ∈ [-40, 60]`. In log space the slowly decaying tail of small `alpha`
/// is smooth, and the truncated ends contribute below 1e-17.
pub fn partition_by_quadrature(alpha: f64) -> f64 {
    const NODES: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683,
        0.538_469_310_105_683,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
        0.236_926_885_056_189,
    ];
    let (lo, hi, panels) = (-40.0, 60.0, 500);
    let width = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * width;
        for (node, w) in NODES.iter().zip(WEIGHTS) {
            let x = (mid + 0.5 * width * node).exp();
            total += w * 0.5 * width * (-rho_f64(x, alpha, 1.0)).exp() * x;
        }
    }
    2.0 * total
}

/// Builds the training loss for a batch of residuals.
///
/// Returns the mean penalty, plus `log c + log Z(alpha)` when adaptive.
pub fn robust_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    residuals: Var,
    alpha: Var,
    scale: Var,
    adaptive: bool,
) -> Result<Var> {
    let rho = g.robust_rho(residuals, alpha, scale)?;
    let mean = g.mean_all(rho);
    if !adaptive {
        return Ok(mean);
    }
    let log_c = g.ln(scale);
    let log_z = g.log_partition(alpha)?;
    let norm = g.add(log_c, log_z)?;
    g.add(mean, norm)
}
