//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass in
//! execution order, so inputs of a record always precede it. [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients over fan-out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::loss;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Concat {
        a: Var,
        b: Var,
    },
    Softmax2(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Add(Var, Var),
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Tensor,
    },
    SoftDice {
        probs: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Result of [`Graph::backward`]: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Var>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like it when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }

    /// Gradients for every registered parameter, in registration order.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.params.iter().map(|&p| self.get_or_zeros(p)).collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a trainable parameter and adds it to the parameter registry.
    pub fn param(&mut self, value: Tensor) -> Var {
        let var = self.push(value, Op::Param);
        self.params.push(var);
        var
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// 3x3 (or 1x1) same-padded convolution with stride 1.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.conv2d_strided(input, weight, bias, 1)
    }

    /// Convolution with padding `ksize / 2` and an arbitrary stride. Stride 2
    /// is the adjoint partner of [`Graph::conv_transpose2d`].
    pub fn conv2d_strided(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
        ))
    }

    /// 3x3 transposed convolution doubling both spatial dims.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::conv_transpose2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
        )?;
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push(out, Op::Relu(input))
    }

    /// Concatenates along the channel axis; `a` occupies the leading channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (na, ca, ha, wa) = ta.dims4()?;
        let (nb, cb, hb, wb) = tb.dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "{:?} and {:?} differ outside the channel axis",
                    ta.shape(),
                    tb.shape()
                ),
            ));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for n in 0..na {
            data.extend_from_slice(&ta.data()[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    /// Per-pixel softmax over exactly two channels.
    pub fn softmax2(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        let (n, c, h, w) = t.dims4()?;
        if c != 2 {
            return Err(Error::shape(
                "softmax2",
                format!("expected 2 channels, got {c}"),
            ));
        }
        let plane = h * w;
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            let base = s * 2 * plane;
            for i in 0..plane {
                let (z0, z1) = (x[base + i], x[base + plane + i]);
                let m = z0.max(z1);
                let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
                let denom = e0 + e1;
                out[base + i] = e0 / denom;
                out[base + plane + i] = e1 / denom;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax2(logits)))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, input: Var, rate: f64, seed: u64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(input).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let t = self.value(input);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { input, mask }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum(input))
    }

    /// Scalar `sum(input * weights)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).dot(&weights)?);
        Ok(self.push(out, Op::WeightedSum { input, weights }))
    }

    /// Soft Dice loss of the foreground channel of `probs` against a binary
    /// `[N, H, W]` target.
    pub fn soft_dice_loss(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let value = loss::soft_dice_loss(self.value(probs), target)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftDice {
                probs,
                target: target.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &upstream,
                        *stride,
                    )?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate(&mut grads, *weight, gw)?;
                    accumulate(&mut grads, *bias, gb)?;
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                } => {
                    let (gx, gw, gb) = kernels::conv_transpose2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &upstream,
                    )?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate(&mut grads, *weight, gw)?;
                    accumulate(&mut grads, *bias, gb)?;
                }
                Op::MaxPool2d { input, argmax } => {
                    let g =
                        kernels::maxpool2d_backward(self.value(*input).shape(), argmax, &upstream);
                    accumulate(&mut grads, *input, g)?;
                }
                Op::Relu(input) => {
                    let x = self.value(*input);
                    let data = x
                        .data()
                        .iter()
                        .zip(upstream.data())
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *input, Tensor::new(x.shape().to_vec(), data)?)?;
                }
                Op::Concat { a, b } => {
                    let (na, ca, h, w) = self.value(*a).dims4()?;
                    let cb = self.value(*b).dims4()?.1;
                    let plane = h * w;
                    let mut ga = Vec::with_capacity(na * ca * plane);
                    let mut gb = Vec::with_capacity(na * cb * plane);
                    for chunk in upstream.data().chunks((ca + cb) * plane) {
                        ga.extend_from_slice(&chunk[..ca * plane]);
                        gb.extend_from_slice(&chunk[ca * plane..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![na, ca, h, w], ga)?)?;
                    accumulate(&mut grads, *b, Tensor::new(vec![na, cb, h, w], gb)?)?;
                }
                Op::Softmax2(input) => {
                    let (n, _, h, w) = node.value.dims4()?;
                    let plane = h * w;
                    let p = node.value.data();
                    let g = upstream.data();
                    let mut gx = vec![0.0; p.len()];
                    for s in 0..n {
                        let base = s * 2 * plane;
                        for i in 0..plane {
                            let (i0, i1) = (base + i, base + plane + i);
                            let dot = p[i0] * g[i0] + p[i1] * g[i1];
                            gx[i0] = p[i0] * (g[i0] - dot);
                            gx[i1] = p[i1] * (g[i1] - dot);
                        }
                    }
                    accumulate(
                        &mut grads,
                        *input,
                        Tensor::new(node.value.shape().to_vec(), gx)?,
                    )?;
                }
                Op::Dropout { input, mask } => {
                    let data = upstream
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(g, m)| g * m)
                        .collect();
                    accumulate(
                        &mut grads,
                        *input,
                        Tensor::new(upstream.shape().to_vec(), data)?,
                    )?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, upstream.clone())?;
                    accumulate(&mut grads, *b, upstream.clone())?;
                }
                Op::Sum(input) => {
                    let g = upstream.data()[0];
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(&mut grads, *input, Tensor::full(shape, g))?;
                }
                Op::WeightedSum { input, weights } => {
                    let g = upstream.data()[0];
                    accumulate(&mut grads, *input, weights.map(|w| w * g))?;
                }
                Op::SoftDice { probs, target } => {
                    let g = upstream.data()[0];
                    let grad = loss::soft_dice_grad(self.value(*probs), target)?;
                    accumulate(&mut grads, *probs, grad.map(|v| v * g))?;
                }
            }
            grads[idx] = Some(upstream);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, grad: Tensor) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let neg = g.input(Tensor::full(vec![4], -3.0));
        let r = g.relu(neg);
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_input_and_unit_gradient() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.param(Tensor::new(vec![1, 1, 4, 4], data.clone()).unwrap());
        let mut kernel = Tensor::zeros(vec![1, 1, 3, 3]);
        kernel.data_mut()[4] = 1.0;
        let w = g.input(kernel);
        let b = g.input(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f64));
        let w = g.input(Tensor::zeros(vec![1, 2, 3, 3]));
        let b = g.input(Tensor::full(vec![1], 0.7));
        let y = g.conv2d(x, w, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn maxpool_forward_and_routing() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(g.maxpool2d(x).is_err());
    }

    #[test]
    fn maxpool_halves_full_resolution() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 1, 240, 240]));
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 120, 120]);
    }

    #[test]
    fn transposed_conv_doubles_and_bias_only() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 3, 15, 15]));
        let w = g.input(Tensor::full(vec![3, 2, 3, 3], 0.3));
        let b = g.input(Tensor::full(vec![2], -1.5));
        let y = g.conv_transpose2d(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 30, 30]);
        assert!(g.value(y).data().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn concat_shapes_and_gradient_split() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f64));
        let b = g.param(Tensor::from_fn(vec![1, 1, 3, 3], |i| -(i as f64)));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 3, 3, 3]);
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 1.0));

        let empty = g.input(Tensor::zeros(vec![1, 0, 3, 3]));
        let same = g.concat_channels(a, empty).unwrap();
        assert_eq!(g.value(same), g.value(a));

        let bad = g.input(Tensor::zeros(vec![1, 1, 2, 3]));
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn softmax2_symmetry_and_shift() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(vec![1, 2, 1, 1]));
        let p = g.softmax2(z).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);

        let a = g.input(Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.5]).unwrap());
        let b = g.input(Tensor::new(vec![1, 2, 1, 1], vec![-20.0, -18.5]).unwrap());
        let (pa, pb) = (g.softmax2(a).unwrap(), g.softmax2(b).unwrap());
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            assert!((x - y).abs() < 1e-15);
        }

        let three = g.input(Tensor::zeros(vec![1, 3, 1, 1]));
        assert!(g.softmax2(three).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_rejection() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(vec![10], |i| i as f64));
        assert_eq!(g.dropout(x, 0.0, 1, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, 1, false).unwrap(), x);
        assert!(g.dropout(x, 1.0, 1, true).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
