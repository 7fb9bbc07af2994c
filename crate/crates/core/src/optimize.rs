//! Adam optimizer and the soft-Dice training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentationSpec};
use crate::autodiff::Graph;
use crate::data::SliceSample;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::UNetModel;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient as `lambda * param`.
    pub l2_lambda: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]], learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            l2_lambda: 0.0,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
        }
    }

    pub fn for_params(params: &[Tensor], learning_rate: f64) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(Tensor::shape).collect();
        Self::new(&shapes, learning_rate)
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "parameter {i}: shape {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    state.m[i].shape()
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let p = p.data_mut();
        let m = m.data_mut();
        let v = v.data_mut();
        for i in 0..p.len() {
            let grad = g.data()[i] + state.l2_lambda * p[i];
            m[i] = b1 * m[i] + (1.0 - b1) * grad;
            v[i] = b2 * v[i] + (1.0 - b2) * grad * grad;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub l2_lambda: f64,
    pub seed: u64,
    /// Print a progress line every this many epochs (0 = silent).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: 100,
            batch_size: 4,
            l2_lambda: 0.0,
            seed: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted here (it freezes the model); the
    /// command line front end requires a positive one.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.max_epochs == 0 {
            v.push("max_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".into());
        }
        if self.l2_lambda.is_nan() || self.l2_lambda < 0.0 {
            v.push(format!(
                "l2_lambda must be non-negative, got {}",
                self.l2_lambda
            ));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub epochs: Vec<EpochLog>,
}

impl LossLog {
    /// CSV with header `epoch,mean_loss,wall_seconds`. With
    /// `zero_wall_clock` the timing column is written as 0 so identical
    /// runs produce identical bytes.
    pub fn to_csv(&self, zero_wall_clock: bool) -> String {
        let mut out = String::from("epoch,mean_loss,wall_seconds\n");
        for e in &self.epochs {
            let secs = if zero_wall_clock { 0.0 } else { e.wall_seconds };
            out.push_str(&format!("{},{:.17e},{:.3}\n", e.epoch, e.mean_loss, secs));
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Stacks slices into a `[N, 1, H, W]` batch and a `[N, H, W]` target.
pub fn stack_batch(samples: &[SliceSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = first.image.dims();
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut targets = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.dims() != (h, w) || s.target.dims() != (h, w) {
            return Err(Error::shape(
                "batch",
                format!(
                    "slice {}:{} is {:?}, expected {:?}",
                    s.case_id,
                    s.slice_index,
                    s.image.dims(),
                    (h, w)
                ),
            ));
        }
        images.extend_from_slice(s.image.data());
        targets.extend(s.target.data().iter().map(|&t| f64::from(t)));
    }
    Ok((
        Tensor::new(vec![samples.len(), 1, h, w], images)?,
        Tensor::new(vec![samples.len(), h, w], targets)?,
    ))
}

/// Runs one forward/backward pass and Adam update on a batch; returns the loss.
pub fn train_step(
    model: &mut UNetModel,
    state: &mut AdamState,
    images: Tensor,
    targets: &Tensor,
    dropout_seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let input = g.input(images);
    let (_, probs) = model.forward_graph(&mut g, input, true, dropout_seed)?;
    let loss = g.soft_dice_loss(probs, targets)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?.parameters();
    adam_step(model.parameters_mut(), &grads, state)?;
    Ok(value)
}

/// Trains `model` on `dataset` for `config.max_epochs` epochs.
///
/// Each epoch shuffles the slices with a seed derived from `config.seed`,
/// augments every slice with its own seed derived from the augmentation
/// seed, the epoch and the slice position, and performs one Adam step per
/// mini-batch. `on_epoch` is called after every epoch.
pub fn train(
    model: &mut UNetModel,
    dataset: &[SliceSample],
    aug: Option<&AugmentationSpec>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<LossLog> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let v = config.violations();
    if !v.is_empty() {
        return Err(Error::InvalidConfig(v));
    }
    let mut state = AdamState::for_params(model.parameters(), config.learning_rate);
    state.l2_lambda = config.l2_lambda;
    let mut log = LossLog::default();
    let start = Instant::now();
    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[epoch as u64],
        )));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<SliceSample> = chunk
                .iter()
                .map(|&i| match aug {
                    Some(spec) => augment(
                        &dataset[i],
                        spec,
                        derive_seed(spec.seed, &[epoch as u64, i as u64]),
                    ),
                    None => Ok(dataset[i].clone()),
                })
                .collect::<Result<_>>()?;
            let (images, targets) = stack_batch(&batch)?;
            let dropout_seed = derive_seed(config.seed, &[epoch as u64, b as u64, 0xD5]);
            let loss = train_step(model, &mut state, images, &targets, dropout_seed)?;
            total += loss * chunk.len() as f64;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: total / dataset.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_magnitude() {
        let mut p = vec![Tensor::scalar(0.3)];
        let mut s = AdamState::for_params(&p, 1e-4);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s).unwrap();
        let step = 0.3 - p[0].data()[0];
        let expected = 1e-4 / (1.0 + 1e-8);
        assert!((step - expected).abs() < 1e-15, "step {step}");
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![Tensor::from_fn(vec![3], |i| i as f64)];
        let before = p.clone();
        let mut s = AdamState::for_params(&p, 1e-3);
        adam_step(&mut p, &[Tensor::zeros(vec![3])], &mut s).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(vec![2])];
        let mut s = AdamState::for_params(&p, 1e-3);
        assert!(adam_step(&mut p, &[Tensor::zeros(vec![3])], &mut s).is_err());
        assert!(adam_step(&mut p, &[], &mut s).is_err());
    }

    #[test]
    fn l2_pulls_toward_zero() {
        let mut p = vec![Tensor::scalar(2.0)];
        let mut s = AdamState::for_params(&p, 0.1);
        s.l2_lambda = 0.5;
        adam_step(&mut p, &[Tensor::scalar(0.0)], &mut s).unwrap();
        assert!(p[0].data()[0] < 2.0);
    }

    #[test]
    fn scale_invariance_at_first_step() {
        for c in [0.01, 3.0, 250.0] {
            let mut a = vec![Tensor::scalar(1.0)];
            let mut b = vec![Tensor::scalar(1.0)];
            let mut sa = AdamState::for_params(&a, 1e-3);
            let mut sb = AdamState::for_params(&b, 1e-3);
            adam_step(&mut a, &[Tensor::scalar(0.7)], &mut sa).unwrap();
            adam_step(&mut b, &[Tensor::scalar(0.7 * c)], &mut sb).unwrap();
            assert!((a[0].data()[0] - b[0].data()[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut m = UNetModel::build(crate::model::UNetConfig::new(2, 2, 8), 0).unwrap();
        assert!(train(&mut m, &[], None, &TrainConfig::default(), |_| {}).is_err());
    }
}
