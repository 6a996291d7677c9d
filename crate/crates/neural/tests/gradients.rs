//! Reverse-mode gradients against central differences (64-bit, h = 1e-5).
//!
//! The checks are plain functions so the acceptance run can call them too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vineyield_neural::backbone::{BackboneConfig, ConvStage};
use vineyield_neural::gradcheck::{grad_check, grad_check_params};
use vineyield_neural::robust::robust_loss_node;
use vineyield_neural::{
    combine_positional, CnnRegressor, CnnRegressorConfig, Graph, MultiHeadSelfAttention, Params,
    Session, Tensor, TransformerConfig, WindowInput, WindowTransformer,
};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks are not straddled by ±h.
fn rand_away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Reduces an arbitrary output to a scalar with fixed generic weights.
fn weighted_sum(g: &mut Graph<f64>, y: vineyield_neural::Var, seed: u64) -> vineyield_neural::Result<vineyield_neural::Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&shape, seed));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn assert_ok(name: &str, r: vineyield_neural::GradCheckReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_error < TOL, "{name}: {:?}", r);
}

pub fn sum_of_squares() {
    let x = rand_tensor(&[5], 1);
    let r = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum_all(sq))
        },
        &x,
        H,
    )
    .unwrap();
    assert_ok("sum_sq", r);
}

pub fn linear_layer() {
    let w = rand_tensor(&[4, 3], 2);
    let b = rand_tensor(&[3], 3);
    let x = rand_tensor(&[2, 4], 4);
    let r = grad_check(
        |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.matmul(x, wv)?;
            let y = g.add_row_bias(y, bv)?;
            weighted_sum(g, y, 5)
        },
        &x,
        H,
    )
    .unwrap();
    assert_ok("linear wrt input", r);
    let r = grad_check(
        |g, w| {
            let xv = g.constant(x.clone());
            let bv = g.constant(b.clone());
            let y = g.matmul(xv, w)?;
            let y = g.add_row_bias(y, bv)?;
            weighted_sum(g, y, 5)
        },
        &w,
        H,
    )
    .unwrap();
    assert_ok("linear wrt weight", r);
    let r = grad_check(
        |g, b| {
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.matmul(xv, wv)?;
            let y = g.add_row_bias(y, b)?;
            weighted_sum(g, y, 5)
        },
        &b,
        H,
    )
    .unwrap();
    assert_ok("linear wrt bias", r);
}

pub fn elementwise_ops() {
    let x = rand_away_from_zero(&[3, 4], 6);
    let other = rand_tensor(&[3, 4], 7);
    let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, vineyield_neural::Var) -> vineyield_neural::Result<vineyield_neural::Var>>)> = vec![
        ("relu", Box::new(|g, x| {
            let y = g.relu(x);
            weighted_sum(g, y, 8)
        })),
        ("gelu", Box::new(|g, x| {
            let y = g.gelu(x);
            weighted_sum(g, y, 8)
        })),
        ("scale", Box::new(|g, x| {
            let y = g.scale(x, -2.5);
            weighted_sum(g, y, 8)
        })),
        ("sub_mul", Box::new(|g, x| {
            let o = g.constant(other.clone());
            let d = g.sub(o, x)?;
            let y = g.mul(d, x)?;
            weighted_sum(g, y, 8)
        })),
        ("mean_all", Box::new(|g, x| {
            let y = g.mul(x, x)?;
            Ok(g.mean_all(y))
        })),
        ("ln", Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let y = g.ln(sq);
            weighted_sum(g, y, 8)
        })),
        ("transpose_reshape", Box::new(|g, x| {
            let t = g.transpose(x)?;
            let y = g.reshape(t, &[2, 6])?;
            weighted_sum(g, y, 9)
        })),
        ("mul_const", Box::new(|g, x| {
            let y = g.mul_const(x, Tensor::from_fn(&[3, 4], |i| (i % 3) as f64 * 1.25))?;
            weighted_sum(g, y, 8)
        })),
    ];
    for (name, f) in cases {
        let r = grad_check(|g, x| f(g, x), &x, H).unwrap();
        assert_ok(name, r);
    }
}

pub fn softmax_rows() {
    let x = rand_tensor(&[3, 5], 10);
    let r = grad_check(
        |g, x| {
            let y = g.softmax_rows(x)?;
            weighted_sum(g, y, 11)
        },
        &x,
        H,
    )
    .unwrap();
    assert_ok("softmax", r);
}

pub fn layer_norm() {
    let x = rand_tensor(&[3, 6], 12);
    let gamma = rand_tensor(&[6], 13);
    let beta = rand_tensor(&[6], 14);
    let r = grad_check(
        |g, x| {
            let gm = g.constant(gamma.clone());
            let bt = g.constant(beta.clone());
            let y = g.layer_norm_rows(x, gm, bt, 1e-5)?;
            weighted_sum(g, y, 15)
        },
        &x,
        H,
    )
    .unwrap();
    assert_ok("layer_norm wrt x", r);
    let r = grad_check(
        |g, gm| {
            let xv = g.constant(x.clone());
            let bt = g.constant(beta.clone());
            let y = g.layer_norm_rows(xv, gm, bt, 1e-5)?;
            weighted_sum(g, y, 15)
        },
        &gamma,
        H,
    )
    .unwrap();
    assert_ok("layer_norm wrt gamma", r);
}

pub fn conv2d_strided_and_padded() {
    let x = rand_tensor(&[2, 5, 6], 16);
    let w = rand_tensor(&[3, 2, 3, 3], 17);
    let b = rand_tensor(&[3], 18);
    for stride in [1, 2] {
        let r = grad_check(
            |g, x| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.conv2d(x, wv, bv, stride, 1)?;
                weighted_sum(g, y, 19)
            },
            &x,
            H,
        )
        .unwrap();
        assert_ok("conv2d wrt input", r);
        let r = grad_check(
            |g, w| {
                let xv = g.constant(x.clone());
                let bv = g.constant(b.clone());
                let y = g.conv2d(xv, w, bv, stride, 1)?;
                weighted_sum(g, y, 19)
            },
            &w,
            H,
        )
        .unwrap();
        assert_ok("conv2d wrt weight", r);
        let r = grad_check(
            |g, b| {
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                let y = g.conv2d(xv, wv, b, stride, 1)?;
                weighted_sum(g, y, 19)
            },
            &b,
            H,
        )
        .unwrap();
        assert_ok("conv2d wrt bias", r);
    }
}

pub fn channel_mean_concat_slice_stack() {
    let x = rand_tensor(&[3, 2, 4], 20);
    let r = grad_check(
        |g, x| {
            let m = g.channel_mean(x)?;
            let a = g.slice_rows(m, 1, 1)?;
            let b = g.slice_cols(m, 1, 2)?;
            let b = g.reshape(b, &[1, 4])?;
            let c = g.concat_rows(&[a, b, a])?;
            let d = g.concat_cols(&[c, c])?;
            let s = g.stack_channels(&[d, d])?;
            weighted_sum(g, s, 21)
        },
        &x,
        H,
    )
    .unwrap();
    assert_ok("structural ops", r);
}

pub fn pointwise_conv1d() {
    let x = rand_tensor(&[4, 3, 5], 22);
    let w = rand_tensor(&[2, 3], 23);
    let b = rand_tensor(&[2], 24);
    let r = grad_check(
        |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.pointwise_conv1d(x, wv, bv)?;
            weighted_sum(g, y, 25)
        },
        &x,
        H,
    )
    .unwrap();
    assert_ok("conv1d wrt input", r);
    let r = grad_check(
        |g, w| {
            let xv = g.constant(x.clone());
            let bv = g.constant(b.clone());
            let y = g.pointwise_conv1d(xv, w, bv)?;
            weighted_sum(g, y, 25)
        },
        &w,
        H,
    )
    .unwrap();
    assert_ok("conv1d wrt weight", r);
}

pub fn combine_positional_grads() {
    let feats = rand_tensor(&[5, 8], 26);
    let pos = [0.0, 0.25, 0.5, 0.9, 1.0];
    let ori = [0.5, 1.0, 1.0, 0.5, 1.0];
    let w = rand_tensor(&[1, 3], 27);
    let b = rand_tensor(&[1], 28);
    let r = grad_check(
        |g, f| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = combine_positional(g, f, &pos, &ori, wv, bv)?;
            weighted_sum(g, y, 29)
        },
        &feats,
        H,
    )
    .unwrap();
    assert_ok("combine_positional wrt features", r);
    let r = grad_check(
        |g, w| {
            let fv = g.constant(feats.clone());
            let bv = g.constant(b.clone());
            let y = combine_positional(g, fv, &pos, &ori, w, bv)?;
            weighted_sum(g, y, 29)
        },
        &w,
        H,
    )
    .unwrap();
    assert_ok("combine_positional wrt weights", r);
    let r = grad_check(
        |g, b| {
            let fv = g.constant(feats.clone());
            let wv = g.constant(w.clone());
            let y = combine_positional(g, fv, &pos, &ori, wv, b)?;
            weighted_sum(g, y, 29)
        },
        &b,
        H,
    )
    .unwrap();
    assert_ok("combine_positional wrt bias", r);
}

pub fn attention_layer() {
    let att = MultiHeadSelfAttention::new("att", 16, 8).unwrap();
    let mut params = Params::<f64>::new();
    att.init(&mut params, &mut ChaCha8Rng::seed_from_u64(30));
    let x = rand_tensor(&[4, 16], 31);
    let r = grad_check(
        |g, x| {
            // Rebind parameters as constants on the caller's graph.
            let mut s = Session::frozen(&params);
            std::mem::swap(&mut s.graph, g);
            let y = att.forward(&mut s, x)?;
            let out = weighted_sum(&mut s.graph, y, 32)?;
            std::mem::swap(&mut s.graph, g);
            Ok(out)
        },
        &x,
        H,
    )
    .unwrap();
    assert_ok("attention wrt tokens", r);
    let r = grad_check_params(
        |s| {
            let xv = s.graph.constant(x.clone());
            let y = att.forward(s, xv)?;
            weighted_sum(&mut s.graph, y, 32)
        },
        &params,
        H,
        |_, n| (0..n).step_by(7).collect(),
    )
    .unwrap();
    assert_ok("attention wrt params", r);
}

pub fn robust_loss_wrt_x_alpha_and_scale() {
    let residuals = rand_tensor(&[6], 33).map(|v| 3.0 * v);
    for &alpha in &[0.3337, 1.0003, 1.7771] {
        for adaptive in [false, true] {
            let scale = 0.8;
            let r = grad_check(
                |g, x| {
                    let a = g.constant(Tensor::scalar(alpha));
                    let c = g.constant(Tensor::scalar(scale));
                    robust_loss_node(g, x, a, c, adaptive)
                },
                &residuals,
                H,
            )
            .unwrap();
            assert_ok("robust wrt x", r);
            let r = grad_check(
                |g, a| {
                    let x = g.constant(residuals.clone());
                    let c = g.constant(Tensor::scalar(scale));
                    robust_loss_node(g, x, a, c, adaptive)
                },
                &Tensor::scalar(alpha),
                H,
            )
            .unwrap();
            assert_ok("robust wrt alpha", r);
            let r = grad_check(
                |g, c| {
                    let x = g.constant(residuals.clone());
                    let a = g.constant(Tensor::scalar(alpha));
                    robust_loss_node(g, x, a, c, adaptive)
                },
                &Tensor::scalar(scale),
                H,
            )
            .unwrap();
            assert_ok("robust wrt scale", r);
        }
    }
}

fn tiny_backbone(width: usize) -> BackboneConfig {
    BackboneConfig {
        in_channels: 3,
        input_height: 8,
        input_width: width,
        stages: vec![
            ConvStage { channels: 4, stride: 2 },
            ConvStage { channels: 4, stride: 1 },
        ],
        feature_len: 16,
    }
}

pub fn full_cnn_model() {
    let model = CnnRegressor::new(CnnRegressorConfig {
        backbone: tiny_backbone(16),
        hidden: vec![12, 12],
        dropout: 0.2,
        cam_stage: None,
    })
    .unwrap();
    let params: Params<f64> = model.init(&mut ChaCha8Rng::seed_from_u64(40), 0.3);
    let input = rand_tensor(&[3, 8, 16], 41);
    let r = grad_check_params(
        |s| model.forward(s, &input, None),
        &params,
        H,
        |_, n| (0..n).step_by(3).collect(),
    )
    .unwrap();
    assert_ok("cnn forward", r);
}

pub fn full_transformer_model() {
    for fusion in [true, false] {
        let model = WindowTransformer::new(TransformerConfig {
            backbone: tiny_backbone(8),
            depth: 2,
            heads: 8,
            mlp_width: 24,
            class_token: true,
            fusion,
        })
        .unwrap();
        let mut params: Params<f64> = model.init(&mut ChaCha8Rng::seed_from_u64(42), 0.0);
        // A zero class token sits on LayerNorm's flat point; perturb it so every path is exercised.
        *params.get_mut("cls").unwrap() = rand_tensor(&[1, 16], 43);
        let images: Vec<Tensor<f64>> = (0..3).map(|i| rand_tensor(&[3, 8, 8], 44 + i)).collect();
        let window: Vec<WindowInput<f64>> = images
            .iter()
            .zip([(0.1, 0.5), (0.5, 1.0), (0.8, 0.5)])
            .map(|(im, (p, o))| WindowInput { image: im, position: p, orientation: o })
            .collect();
        let r = grad_check_params(
            |s| model.forward(s, &window),
            &params,
            H,
            |_, n| (0..n).step_by(5).collect(),
        )
        .unwrap();
        assert_ok("transformer forward", r);
    }
}

// Harness entry points; the acceptance run calls the same functions directly.
macro_rules! as_tests {
    ($($f:ident),* $(,)?) => {
        mod run {
            $(#[test]
            fn $f() {
                super::$f()
            })*
        }
    };
}

as_tests!(
    sum_of_squares,
    linear_layer,
    elementwise_ops,
    softmax_rows,
    layer_norm,
    conv2d_strided_and_padded,
    channel_mean_concat_slice_stack,
    pointwise_conv1d,
    combine_positional_grads,
    attention_layer,
    robust_loss_wrt_x_alpha_and_scale,
    full_cnn_model,
    full_transformer_model,
);
