//! Gradient-weighted class activation maps for the CNN regressor.

use crate::cnn::CnnRegressor;
use crate::error::{NeuralError, Result};
use crate::params::{Params, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Grad-CAM map for one concatenated pair, upsampled to the input size and
/// min-max normalized to `[0, 1]`. A map that is zero everywhere stays zero.
///
/// Errors when `params` lacks the designated activation layer.
pub fn grad_cam<T: Scalar>(model: &CnnRegressor, params: &Params<T>, pair: &Tensor<T>) -> Result<Tensor<f64>> {
    let layer = model.cam_layer_weight();
    if !params.contains(&layer) {
        return Err(NeuralError::Checkpoint(format!(
            "checkpoint lacks the designated activation layer `{layer}`"
        )));
    }
    let mut s = Session::new(params);
    let trace = model.forward_traced(&mut s, pair, None)?;
    let grads = s.graph.backward(trace.output);
    let act = s.graph.value(trace.cam_activation);
    let (c, h, w) = match act.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(NeuralError::Shape(format!("activation shape {other:?}"))),
    };
    let zero = Tensor::zeros(act.shape());
    let grad = grads.get(trace.cam_activation).unwrap_or(&zero);
    let mut cam = vec![0.0f64; h * w];
    for ch in 0..c {
        let g = &grad.data()[ch * h * w..(ch + 1) * h * w];
        let weight: f64 = g.iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64;
        if weight == 0.0 {
            continue;
        }
        for (m, a) in cam.iter_mut().zip(&act.data()[ch * h * w..(ch + 1) * h * w]) {
            *m += weight * a.as_f64();
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let (out_h, out_w) = (pair.shape()[1], pair.shape()[2]);
    let up = bilinear_upsample(&cam, h, w, out_h, out_w);
    Ok(Tensor::new(vec![out_h, out_w], min_max_normalize(up))?)
}

/// Half-pixel-centered bilinear resize of an `h × w` grid.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Scales to `[0, 1]`; all-zero input stays zero, a constant positive map becomes all ones.
pub fn min_max_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else if max - min <= f64::EPSILON * max {
        v.iter_mut().for_each(|x| *x = 1.0);
    } else {
        v.iter_mut().for_each(|x| *x = ((*x - min) / (max - min)).clamp(0.0, 1.0));
    }
    v
}
