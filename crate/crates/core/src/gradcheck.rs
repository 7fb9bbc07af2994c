//! Central finite-difference checks of the analytic gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{UNetConfig, UNetModel};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Primitives covered by [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    /// Inputs: `x [N,C,H,W]`, `w [K,C,3,3]`, `b [K]`.
    Conv2d,
    /// Inputs: `x [N,C,H,W]`, `w [C,K,3,3]`, `b [K]`.
    ConvTranspose2d,
    /// Input: `x [N,C,H,W]`, filled with well-separated distinct values.
    MaxPool2d,
    /// Input: any shape, values kept away from the kink at 0.
    Relu,
    /// Inputs: `a [N,Ca,H,W]`, `b [N,Cb,H,W]`.
    ConcatChannels,
    /// Input: logits `[N,2,H,W]`.
    Softmax2,
    /// Input: probabilities `[N,2,H,W]`; a random binary target is drawn.
    SoftDice,
    /// Input: any shape; dropout rate 0.5 with a fixed mask seed.
    Dropout,
}

impl Primitive {
    pub const ALL: [Primitive; 8] = [
        Primitive::Conv2d,
        Primitive::ConvTranspose2d,
        Primitive::MaxPool2d,
        Primitive::Relu,
        Primitive::ConcatChannels,
        Primitive::Softmax2,
        Primitive::SoftDice,
        Primitive::Dropout,
    ];

    fn arity(self) -> usize {
        match self {
            Primitive::Conv2d | Primitive::ConvTranspose2d => 3,
            Primitive::ConcatChannels => 2,
            _ => 1,
        }
    }
}

/// Relative error between two gradient tensors: `|a - n|_2 / max(|a|_2, |n|_2)`,
/// or 0 when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic.data()).max(norm(numeric.data()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares analytic against central-difference gradients of the scalar
/// produced by `build` for every tensor in `params`. `build` receives the
/// graph and the registered parameter handles and returns the scalar loss.
///
/// Returns the largest per-tensor relative error.
pub fn check_gradients<F>(params: &[Tensor], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut values = params.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let mut numeric = Tensor::zeros(params[ti].shape().to_vec());
        for i in 0..params[ti].numel() {
            let orig = values[ti].data()[i];
            values[ti].data_mut()[i] = orig + step;
            let plus = eval(&values)?;
            values[ti].data_mut()[i] = orig - step;
            let minus = eval(&values)?;
            values[ti].data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Gradient check of a single primitive on seeded random inputs of the
/// given shapes. Each primitive's output is reduced to a scalar through a
/// random weighted sum so every output element contributes.
pub fn grad_check(op: Primitive, input_shapes: &[Vec<usize>], seed: u64) -> Result<f64> {
    if input_shapes.len() != op.arity() {
        return Err(Error::InvalidArgument(format!(
            "{op:?} takes {} input shapes, got {}",
            op.arity(),
            input_shapes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = match op {
        Primitive::MaxPool2d => {
            let shape = &input_shapes[0];
            let numel: usize = shape.iter().product();
            let mut order: Vec<usize> = (0..numel).collect();
            order.shuffle(&mut rng);
            vec![Tensor::new(
                shape.clone(),
                order.iter().map(|&i| i as f64 * 0.01 - 0.5).collect(),
            )?]
        }
        Primitive::Relu => {
            let t = uniform(&input_shapes[0], 0.01, 1.0, &mut rng);
            let signs: Vec<f64> = (0..t.numel())
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            vec![Tensor::new(
                t.shape().to_vec(),
                t.data().iter().zip(&signs).map(|(a, s)| a * s).collect(),
            )?]
        }
        Primitive::SoftDice => vec![uniform(&input_shapes[0], 0.05, 0.95, &mut rng)],
        _ => input_shapes
            .iter()
            .map(|s| uniform(s, -1.0, 1.0, &mut rng))
            .collect(),
    };
    let target = if op == Primitive::SoftDice {
        let (n, _, h, w) = inputs[0].dims4()?;
        Some(Tensor::from_fn(vec![n, h, w], |_| {
            if rng.random_bool(0.4) {
                1.0
            } else {
                0.0
            }
        }))
    } else {
        None
    };
    let weight_seed: u64 = rng.random();

    check_gradients(&inputs, FD_STEP, |g, v| {
        let out = match op {
            Primitive::Conv2d => g.conv2d(v[0], v[1], v[2])?,
            Primitive::ConvTranspose2d => g.conv_transpose2d(v[0], v[1], v[2])?,
            Primitive::MaxPool2d => g.maxpool2d(v[0])?,
            Primitive::Relu => g.relu(v[0]),
            Primitive::ConcatChannels => g.concat_channels(v[0], v[1])?,
            Primitive::Softmax2 => g.softmax2(v[0])?,
            Primitive::SoftDice => {
                return g.soft_dice_loss(v[0], target.as_ref().expect("target drawn above"))
            }
            Primitive::Dropout => g.dropout(v[0], 0.5, weight_seed, true)?,
        };
        let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
        let weights = uniform(g.value(out).shape(), -1.0, 1.0, &mut wrng);
        g.weighted_sum(out, weights)
    })
}

/// Gradient check of the whole U-Net: soft Dice of the forward pass on a
/// random `[batch, C, H, W]` input against a random target, differentiated
/// with respect to every parameter. Weights are drawn with `init_std`
/// (larger than the training default so activations are not vanishingly
/// small).
pub fn unet_grad_check(config: &UNetConfig, batch: usize, init_std: f64, seed: u64) -> Result<f64> {
    let model = UNetModel::build_with_std(config.clone(), seed, init_std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let (h, w) = (config.input_height, config.input_width);
    let input = uniform(&[batch, config.in_channels, h, w], -1.0, 1.0, &mut rng);
    let target = Tensor::from_fn(vec![batch, h, w], |_| {
        f64::from(u8::from(rng.random_bool(0.4)))
    });
    check_gradients(model.parameters(), FD_STEP, |g, vars| {
        let x = g.input(input.clone());
        let probs = model.forward_vars(g, x, vars, false, 0)?;
        g.soft_dice_loss(probs, &target)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_small() {
        let err = grad_check(
            Primitive::Conv2d,
            &[vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            11,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn transposed_small() {
        let err = grad_check(
            Primitive::ConvTranspose2d,
            &[vec![1, 2, 4, 4], vec![2, 3, 3, 3], vec![3]],
            12,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn maxpool_small() {
        let err = grad_check(Primitive::MaxPool2d, &[vec![1, 1, 4, 4]], 13).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn wrong_arity_rejected() {
        assert!(grad_check(Primitive::Relu, &[vec![2], vec![2]], 0).is_err());
    }

    #[test]
    fn relative_error_flags_mismatch() {
        let a = Tensor::full(vec![3], 2.0);
        let n = Tensor::full(vec![3], 1.0);
        assert!(relative_error(&a, &n) > 0.4);
    }
}
