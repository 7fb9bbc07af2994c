//! Soft Dice loss over the foreground probability channel.
//!
//! `loss = 1 - (2 * sum(p * g) + s) / (sum(p^2) + sum(g^2) + s)` with
//! smoothing `s = 1`, computed as a single global Dice over the whole batch.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive smoothing applied to numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

struct DiceTerms {
    numerator: f64,
    denominator: f64,
}

fn check(probs: &Tensor, target: &Tensor) -> Result<(usize, usize)> {
    let (n, c, h, w) = probs.dims4()?;
    if c != 2 {
        return Err(Error::shape(
            "soft_dice_loss",
            format!("expected 2 probability channels, got {c}"),
        ));
    }
    if target.shape() != [n, h, w] {
        return Err(Error::shape(
            "soft_dice_loss",
            format!(
                "target shape {:?} does not match [{n}, {h}, {w}]",
                target.shape()
            ),
        ));
    }
    if let Some(bad) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "soft Dice target must be binary, found {bad}"
        )));
    }
    Ok((n, h * w))
}

fn terms(probs: &Tensor, target: &Tensor) -> Result<DiceTerms> {
    let (n, plane) = check(probs, target)?;
    let (mut pg, mut pp, mut gg) = (0.0, 0.0, 0.0);
    for s in 0..n {
        let fg = &probs.data()[(2 * s + 1) * plane..(2 * s + 2) * plane];
        let tg = &target.data()[s * plane..(s + 1) * plane];
        for (&p, &g) in fg.iter().zip(tg) {
            pg += p * g;
            pp += p * p;
            gg += g * g;
        }
    }
    Ok(DiceTerms {
        numerator: 2.0 * pg + DICE_SMOOTH,
        denominator: pp + gg + DICE_SMOOTH,
    })
}

/// Soft Dice loss; `probs` is `[N, 2, H, W]` with channel 1 the foreground,
/// `target` is a binary `[N, H, W]` mask.
pub fn soft_dice_loss(probs: &Tensor, target: &Tensor) -> Result<f64> {
    let t = terms(probs, target)?;
    Ok(1.0 - t.numerator / t.denominator)
}

/// Gradient of [`soft_dice_loss`] with respect to `probs`. The background
/// channel receives zero gradient.
pub fn soft_dice_grad(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let t = terms(probs, target)?;
    let (n, _, h, w) = probs.dims4()?;
    let plane = h * w;
    let d2 = t.denominator * t.denominator;
    let mut grad = Tensor::zeros(probs.shape().to_vec());
    let gd = grad.data_mut();
    for s in 0..n {
        let off = (2 * s + 1) * plane;
        for i in 0..plane {
            let p = probs.data()[off + i];
            let g = target.data()[s * plane + i];
            gd[off + i] = -(2.0 * g * t.denominator - 2.0 * p * t.numerator) / d2;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_from_fg(n: usize, h: usize, w: usize, fg: &[f64]) -> Tensor {
        let plane = h * w;
        let mut data = vec![0.0; n * 2 * plane];
        for s in 0..n {
            for i in 0..plane {
                let p = fg[s * plane + i];
                data[2 * s * plane + i] = 1.0 - p;
                data[(2 * s + 1) * plane + i] = p;
            }
        }
        Tensor::new(vec![n, 2, h, w], data).unwrap()
    }

    #[test]
    fn perfect_hard_prediction() {
        let (n, h, w) = (2, 32, 32);
        let mask: Vec<f64> = (0..n * h * w).map(|i| ((i / 7) % 2) as f64).collect();
        let probs = probs_from_fg(n, h, w, &mask);
        let target = Tensor::new(vec![n, h, w], mask).unwrap();
        assert!(soft_dice_loss(&probs, &target).unwrap() < 1e-3);
    }

    #[test]
    fn half_probability_half_target() {
        let (h, w) = (40, 40);
        let fg = vec![0.5; h * w];
        let mask: Vec<f64> = (0..h * w).map(|i| (i % 2) as f64).collect();
        let probs = probs_from_fg(1, h, w, &fg);
        let target = Tensor::new(vec![1, h, w], mask).unwrap();
        // Dice = (M/2 + 1) / (3M/4 + 1) with M = 1600.
        let m = (h * w) as f64;
        let expected = 1.0 - (m / 2.0 + 1.0) / (0.75 * m + 1.0);
        let got = soft_dice_loss(&probs, &target).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn empty_empty_is_zero() {
        let probs = probs_from_fg(1, 4, 4, &[0.0; 16]);
        let target = Tensor::zeros(vec![1, 4, 4]);
        assert_eq!(soft_dice_loss(&probs, &target).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_binary_target() {
        let probs = probs_from_fg(1, 2, 2, &[0.5; 4]);
        let target = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.5, 0.0]).unwrap();
        assert!(soft_dice_loss(&probs, &target).is_err());
    }
}
