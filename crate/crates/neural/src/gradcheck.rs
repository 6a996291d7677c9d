//! Reverse-mode vs central-difference gradient comparison.

use crate::error::{NeuralError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Params, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative error uses `max(|analytic|, |numeric|, REL_FLOOR)` as denominator,
/// so vanishing components are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Where the worst relative error occurred (`tensor name`, flat index).
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), idx));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

fn scalar_output<T: Scalar>(g: &Graph<T>, v: Var) -> Result<f64> {
    let val = g.value(v);
    if val.len() != 1 {
        return Err(NeuralError::Shape(format!(
            "gradient check needs a scalar output, got {:?}",
            val.shape()
        )));
    }
    Ok(val.item().as_f64())
}

/// Checks `d f / d x` at `point` over every coordinate.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, h: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, h, &coords)
}

/// Like [`grad_check`] but only over the listed flat coordinates.
pub fn grad_check_coords<T, F>(f: F, point: &Tensor<T>, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    scalar_output(&g, y)?;
    let grads = g.backward(y);
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    let eval = |p: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        scalar_output(&g, y)
    };
    let mut report = GradCheckReport::default();
    for &i in coords {
        let mut plus = point.clone();
        let mut minus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + T::of(h);
        minus.data_mut()[i] = minus.data()[i] - T::of(h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        report.record("x", i, analytic.data()[i].as_f64(), numeric);
    }
    Ok(report)
}

/// Checks the gradient of a scalar model output with respect to named
/// parameters. `coords(name, len)` selects which flat indices to perturb.
pub fn grad_check_params<T, F, C>(f: F, params: &Params<T>, h: f64, coords: C) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Session<'_, T>) -> Result<Var>,
    C: Fn(&str, usize) -> Vec<usize>,
{
    let mut s = Session::new(params);
    let y = f(&mut s)?;
    scalar_output(&s.graph, y)?;
    let grads = s.param_grads(y, T::one());
    let eval = |p: &Params<T>| -> Result<f64> {
        let mut s = Session::frozen(p);
        let y = f(&mut s)?;
        scalar_output(&s.graph, y)
    };
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (name, t) in params.iter() {
        let analytic = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in coords(name, t.len()) {
            let orig = t.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + T::of(h);
            let fp = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - T::of(h);
            let fm = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            report.record(name, i, analytic.data()[i].as_f64(), (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}
