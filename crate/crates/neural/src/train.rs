//! Mini-batch training loops for both regressors.
//!
//! All randomness comes from one seed: the epoch order, per-sample frame
//! choices, augmentations and dropout masks are drawn from per-sample seeds
//! that are themselves drawn serially from the run's generator. Per-sample
//! gradients are computed in parallel and reduced in sample order, so a run
//! is reproducible regardless of thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::augment_frame;
use crate::cnn::CnnRegressor;
use crate::error::{NeuralError, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{ParamGrads, Params, Session};
use crate::robust::{robust_loss_node, RobustLossParams, ALPHA_MAX, ALPHA_MIN};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::{WindowInput, WindowTransformer};

pub const LOSS_ALPHA: &str = "loss.alpha";
pub const LOSS_SCALE: &str = "loss.scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the training set.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    /// Batches whose gradients are averaged into one optimizer step.
    pub accumulate: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub augment: bool,
}

impl ScheduleConfig {
    pub fn cnn_default() -> Self {
        Self {
            epochs: 25,
            steps_per_epoch: None,
            batch_size: 12,
            accumulate: 1,
            learning_rate: 1e-4,
            optimizer: OptimizerConfig::default(),
            augment: true,
        }
    }

    pub fn transformer_default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: None,
            batch_size: 6,
            accumulate: 2,
            learning_rate: 1e-4,
            optimizer: OptimizerConfig::default(),
            augment: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accumulate == 0 {
            return Err(NeuralError::Config(
                "epochs, batch size and accumulation must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(NeuralError::Config("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// A yield point for the CNN: candidate frames per side, by image index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPoint {
    pub north: Vec<usize>,
    pub south: Vec<usize>,
    pub target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMember {
    pub image: usize,
    pub position: f64,
    pub orientation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPoint {
    pub members: Vec<WindowMember>,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Weights of the epoch with the lowest validation loss.
    pub params: Params<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn best_val_loss(&self) -> f64 {
        self.history
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map_or(f64::NAN, |r| r.val_loss)
    }
}

fn check_nonempty(train: usize, val: usize) -> Result<()> {
    if train == 0 || val == 0 {
        return Err(NeuralError::Empty(format!(
            "training needs nonempty splits (train {train}, validation {val})"
        )));
    }
    Ok(())
}

fn mean_target(targets: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = targets.fold((0.0, 0usize), |(s, n), t| (s + t, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Shared loop: shuffled epochs, parallel per-sample gradients, accumulation,
/// per-epoch validation and best-epoch selection.
fn run<T, L, V, P>(
    mut params: Params<T>,
    n_train: usize,
    schedule: &ScheduleConfig,
    seed: u64,
    sample_loss: L,
    val_loss: V,
    post_step: P,
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    L: Fn(&Params<T>, usize, u64) -> Result<(f64, ParamGrads<T>)> + Sync,
    V: Fn(&Params<T>) -> Result<f64>,
    P: Fn(&mut Params<T>, &mut ParamGrads<T>),
{
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(schedule.optimizer.clone());
    let per_step = schedule.batch_size * schedule.accumulate;
    let steps_per_epoch = schedule
        .steps_per_epoch
        .unwrap_or_else(|| n_train.div_ceil(per_step).max(1));
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut cursor = n_train;
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut best: Option<(f64, usize, Params<T>)> = None;
    let mut global_step = 0usize;

    for epoch in 0..schedule.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let mut picks = Vec::with_capacity(per_step);
            for _ in 0..per_step {
                if cursor == n_train {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                picks.push((order[cursor], rng.random::<u64>()));
                cursor += 1;
            }
            let results: Vec<Result<(f64, ParamGrads<T>)>> = picks
                .par_iter()
                .map(|&(i, s)| sample_loss(&params, i, s))
                .collect();
            let mut grads = ParamGrads::new();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                grads.add(&g);
            }
            loss /= per_step as f64;
            global_step += 1;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(NeuralError::Divergence {
                    step: global_step,
                    loss,
                });
            }
            grads.scale(T::of(1.0 / per_step as f64));
            post_step(&mut params, &mut grads);
            opt.step(&mut params, &grads, schedule.learning_rate);
            clamp_alpha(&mut params);
            epoch_loss += loss;
        }
        let val = val_loss(&params)?;
        if !val.is_finite() {
            return Err(NeuralError::Divergence {
                step: global_step,
                loss: val,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss: val,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
            best = Some((val, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        history,
        steps: opt.steps(),
    })
}

fn clamp_alpha<T: Scalar>(params: &mut Params<T>) {
    if let Ok(a) = params.get_mut(LOSS_ALPHA) {
        for v in a.data_mut() {
            *v = T::of(v.as_f64().clamp(ALPHA_MIN, ALPHA_MAX));
        }
    }
}

/// Adds the robust-loss shape and scale to a parameter set.
pub fn attach_loss_params<T: Scalar>(params: &mut Params<T>, loss: &RobustLossParams) {
    params.init_const(LOSS_ALPHA, &[1], loss.alpha);
    params.init_const(LOSS_SCALE, &[1], loss.scale);
}

/// Reads back the robust-loss parameters stored alongside model weights.
pub fn loss_params<T: Scalar>(params: &Params<T>, adaptive: bool) -> Option<RobustLossParams> {
    Some(RobustLossParams {
        alpha: params.get(LOSS_ALPHA).ok()?.item().as_f64(),
        scale: params.get(LOSS_SCALE).ok()?.item().as_f64(),
        adaptive,
    })
}

/// Deterministic validation pairing: one North and one South frame per point.
pub fn seeded_pairs(points: &[PairPoint], seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11_da7e);
    points
        .iter()
        .map(|p| {
            let n = p.north[rng.random_range(0..p.north.len())];
            let s = p.south[rng.random_range(0..p.south.len())];
            (n, s)
        })
        .collect()
}

/// Trains the CNN with the robust loss (shape learned when adaptive).
///
/// Each step draws one random North and one random South frame per sampled
/// point; validation uses a fixed seeded pairing and reports MSE.
#[allow(clippy::too_many_arguments)]
pub fn train_cnn<T: Scalar>(
    model: &CnnRegressor,
    images: &[Tensor<T>],
    train: &[PairPoint],
    val: &[PairPoint],
    schedule: &ScheduleConfig,
    loss: &RobustLossParams,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    check_nonempty(train.len(), val.len())?;
    loss.validate()?;
    for p in train.iter().chain(val) {
        if p.north.is_empty() || p.south.is_empty() {
            return Err(NeuralError::Empty("pair point missing a side".into()));
        }
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.init::<T>(&mut init_rng, mean_target(train.iter().map(|p| p.target)));
    attach_loss_params(&mut params, loss);
    let val_pairs = seeded_pairs(val, seed);
    let val_inputs = val_pairs
        .iter()
        .map(|&(n, s)| CnnRegressor::pair_input(&images[n], &images[s]))
        .collect::<Result<Vec<_>>>()?;
    let augment = schedule.augment;
    let adaptive = loss.adaptive;

    let sample_loss = |params: &Params<T>, i: usize, s: u64| -> Result<(f64, ParamGrads<T>)> {
        let p = &train[i];
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = &images[p.north[rng.random_range(0..p.north.len())]];
        let so = &images[p.south[rng.random_range(0..p.south.len())]];
        let input = if augment {
            let n = augment_frame(n, &mut rng);
            let so = augment_frame(so, &mut rng);
            CnnRegressor::pair_input(&n, &so)?
        } else {
            CnnRegressor::pair_input(n, so)?
        };
        let mut sess = Session::new(params);
        let y = model.forward(&mut sess, &input, Some(&mut rng))?;
        let t = sess.graph.constant(Tensor::full(&[1, 1], T::of(p.target)));
        let r = sess.graph.sub(y, t)?;
        let alpha = sess.param(LOSS_ALPHA)?;
        let scale = sess.param(LOSS_SCALE)?;
        let l = robust_loss_node(&mut sess.graph, r, alpha, scale, adaptive)?;
        let value = sess.graph.value(l).item().as_f64();
        Ok((value, sess.param_grads(l, T::one())))
    };
    let val_loss = |params: &Params<T>| -> Result<f64> {
        let errs: Vec<Result<f64>> = val_inputs
            .par_iter()
            .zip(val)
            .map(|(x, p)| Ok((model.predict(params, x)? - p.target).powi(2)))
            .collect();
        let mut total = 0.0;
        for e in errs {
            total += e?;
        }
        Ok(total / val.len() as f64)
    };
    let post_step = |_: &mut Params<T>, g: &mut ParamGrads<T>| {
        g.grads.remove(LOSS_SCALE);
        if !adaptive {
            g.grads.remove(LOSS_ALPHA);
        }
    };
    run(params, train.len(), schedule, seed, sample_loss, val_loss, post_step)
}

fn window_inputs<'a, T: Scalar>(images: &'a [Tensor<T>], p: &WindowPoint) -> Vec<WindowInput<'a, T>> {
    p.members
        .iter()
        .map(|m| WindowInput {
            image: &images[m.image],
            position: m.position,
            orientation: m.orientation,
        })
        .collect()
}

/// Trains the windowed transformer with a mean-squared-error objective.
pub fn train_transformer<T: Scalar>(
    model: &WindowTransformer,
    images: &[Tensor<T>],
    train: &[WindowPoint],
    val: &[WindowPoint],
    schedule: &ScheduleConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    check_nonempty(train.len(), val.len())?;
    if train.iter().chain(val).any(|p| p.members.is_empty()) {
        return Err(NeuralError::Empty("window point without members".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.init::<T>(&mut init_rng, mean_target(train.iter().map(|p| p.target)));

    let sample_loss = |params: &Params<T>, i: usize, _s: u64| -> Result<(f64, ParamGrads<T>)> {
        let p = &train[i];
        let window = window_inputs(images, p);
        let mut sess = Session::new(params);
        let y = model.forward(&mut sess, &window)?;
        let t = sess.graph.constant(Tensor::full(&[1, 1], T::of(p.target)));
        let r = sess.graph.sub(y, t)?;
        let sq = sess.graph.mul(r, r)?;
        let l = sess.graph.mean_all(sq);
        let value = sess.graph.value(l).item().as_f64();
        Ok((value, sess.param_grads(l, T::one())))
    };
    let val_loss = |params: &Params<T>| -> Result<f64> {
        let errs: Vec<Result<f64>> = val
            .par_iter()
            .map(|p| Ok((model.predict(params, &window_inputs(images, p))? - p.target).powi(2)))
            .collect();
        let mut total = 0.0;
        for e in errs {
            total += e?;
        }
        Ok(total / val.len() as f64)
    };
    run(params, train.len(), schedule, seed, sample_loss, val_loss, |_, _| {})
}

/// Evaluation-mode transformer predictions, in input order.
pub fn predict_windows<T: Scalar>(
    model: &WindowTransformer,
    params: &Params<T>,
    images: &[Tensor<T>],
    points: &[WindowPoint],
) -> Result<Vec<f64>> {
    points
        .par_iter()
        .map(|p| model.predict(params, &window_inputs(images, p)))
        .collect()
}

/// All-pairs CNN inference, in input order.
pub fn predict_pairs<T: Scalar>(
    model: &CnnRegressor,
    params: &Params<T>,
    images: &[Tensor<T>],
    points: &[PairPoint],
) -> Result<Vec<f64>> {
    points
        .par_iter()
        .map(|p| {
            let n: Vec<&Tensor<T>> = p.north.iter().map(|&i| &images[i]).collect();
            let s: Vec<&Tensor<T>> = p.south.iter().map(|&i| &images[i]).collect();
            model.infer_all_pairs(params, &n, &s)
        })
        .collect()
}
