//! U-Net topology: configuration, parameter layout, initialization and the
//! forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the normal weight initializer. Biases start at 0.
pub const INIT_STD: f64 = 0.01;

/// Number of output maps (background, foreground).
pub const OUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Encoder blocks; the decoder has one fewer. The full-size network uses
    /// 4 to 6, smaller depths are accepted for desk-scale runs.
    pub num_blocks: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Dropout after the second convolution of every block; 0 disables it.
    pub dropout_rate: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            num_blocks: 5,
            base_filters: 64,
            in_channels: 1,
            out_channels: OUT_CHANNELS,
            input_height: 240,
            input_width: 240,
            dropout_rate: 0.0,
        }
    }
}

/// Spatial size and channel count of one encoder level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn conv_params(c_in: usize, c_out: usize, ksize: usize) -> usize {
    c_out * c_in * ksize * ksize + c_out
}

impl UNetConfig {
    pub fn new(num_blocks: usize, base_filters: usize, size: usize) -> Self {
        Self {
            num_blocks,
            base_filters,
            input_height: size,
            input_width: size,
            ..Self::default()
        }
    }

    /// Every violated constraint, or an empty list when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(1..=6).contains(&self.num_blocks) {
            v.push(format!(
                "num_blocks must be in 1..=6, got {}",
                self.num_blocks
            ));
        }
        if self.base_filters == 0 {
            v.push("base_filters must be positive".into());
        }
        if self.in_channels == 0 {
            v.push("in_channels must be positive".into());
        }
        if self.out_channels != OUT_CHANNELS {
            v.push(format!(
                "out_channels must be {OUT_CHANNELS}, got {}",
                self.out_channels
            ));
        }
        if (1..=6).contains(&self.num_blocks) {
            let div = 1usize << (self.num_blocks - 1);
            for (name, size) in [
                ("input_height", self.input_height),
                ("input_width", self.input_width),
            ] {
                if size == 0 || size % div != 0 {
                    v.push(format!(
                        "{name} {size} must be a positive multiple of 2^(num_blocks-1) = {div}"
                    ));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            v.push(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    pub fn channels_at(&self, depth: usize) -> usize {
        self.base_filters << depth
    }

    /// Encoder level shapes, shallowest first.
    pub fn encoder_levels(&self) -> Vec<LevelShape> {
        (0..self.num_blocks)
            .map(|d| LevelShape {
                channels: self.channels_at(d),
                height: self.input_height >> d,
                width: self.input_width >> d,
            })
            .collect()
    }

    /// Shapes of every parameter tensor in registration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut conv = |c_in: usize, c_out: usize, k: usize| {
            shapes.push(vec![c_out, c_in, k, k]);
            shapes.push(vec![c_out]);
        };
        for d in 0..self.num_blocks {
            let c_in = if d == 0 {
                self.in_channels
            } else {
                self.channels_at(d - 1)
            };
            conv(c_in, self.channels_at(d), 3);
            conv(self.channels_at(d), self.channels_at(d), 3);
        }
        for d in (0..self.num_blocks - 1).rev() {
            let c = self.channels_at(d);
            shapes.push(vec![self.channels_at(d + 1), c, 3, 3]);
            shapes.push(vec![c]);
            shapes.push(vec![c, 2 * c, 3, 3]);
            shapes.push(vec![c]);
            shapes.push(vec![c, c, 3, 3]);
            shapes.push(vec![c]);
        }
        shapes.push(vec![self.out_channels, self.base_filters, 1, 1]);
        shapes.push(vec![self.out_channels]);
        shapes
    }

    /// Closed-form parameter count, summed layer by layer.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for d in 0..self.num_blocks {
            let c_in = if d == 0 {
                self.in_channels
            } else {
                self.channels_at(d - 1)
            };
            total += conv_params(c_in, self.channels_at(d), 3);
            total += conv_params(self.channels_at(d), self.channels_at(d), 3);
        }
        for d in 0..self.num_blocks - 1 {
            let c = self.channels_at(d);
            total += self.channels_at(d + 1) * c * 9 + c;
            total += conv_params(2 * c, c, 3);
            total += conv_params(c, c, 3);
        }
        total + conv_params(self.base_filters, self.out_channels, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    config: UNetConfig,
    params: Vec<Tensor>,
}

impl UNetModel {
    /// Builds a model with weights drawn from N(0, 0.01^2) and zero biases.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        Self::build_with_std(config, seed, INIT_STD)
    }

    /// Same as [`UNetModel::build`] with a custom weight standard deviation.
    pub fn build_with_std(config: UNetConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("init std {std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    Tensor::from_fn(shape, |_| normal.sample(&mut rng))
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Model with every parameter set to zero.
    pub fn zeros(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(Tensor::zeros)
            .collect();
        Ok(Self { config, params })
    }

    /// Assembles a model from existing parameters, checking their shapes.
    pub fn from_parameters(config: UNetConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::shape(
                "unet",
                format!(
                    "expected {} parameter tensors, got {}",
                    shapes.len(),
                    params.len()
                ),
            ));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return Err(Error::shape(
                    "unet",
                    format!("parameter {i} has shape {:?}, expected {s:?}", p.shape()),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// All parameters concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match *shape {
            [_, ch, h, w] if ch == c.in_channels && h == c.input_height && w == c.input_width => {
                Ok(())
            }
            _ => Err(Error::shape(
                "unet forward",
                format!(
                    "input shape {shape:?} does not match [N, {}, {}, {}]",
                    c.in_channels, c.input_height, c.input_width
                ),
            )),
        }
    }

    /// Records the forward pass on `graph`. Parameters are registered in
    /// order; returns their handles and the `[N, 2, H, W]` probability node.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        input: Var,
        training: bool,
        dropout_seed: u64,
    ) -> Result<(Vec<Var>, Var)> {
        let pv: Vec<Var> = self.params.iter().map(|t| graph.param(t.clone())).collect();
        let probs = self.forward_vars(graph, input, &pv, training, dropout_seed)?;
        Ok((pv, probs))
    }

    /// Like [`forward_graph`](Self::forward_graph) but with parameter handles
    /// already on the graph, in registration order.
    pub fn forward_vars(
        &self,
        graph: &mut Graph,
        input: Var,
        params: &[Var],
        training: bool,
        dropout_seed: u64,
    ) -> Result<Var> {
        self.check_input(graph.value(input).shape())?;
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} parameter handles, model has {}",
                    params.len(),
                    self.params.len()
                ),
            ));
        }
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter layout matches config");
        let rate = self.config.dropout_rate;
        let mut block = 0u64;
        let mut drop = |g: &mut Graph, x: Var| -> Result<Var> {
            block += 1;
            g.dropout(
                x,
                rate,
                dropout_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ block,
                training,
            )
        };

        let mut skips = Vec::with_capacity(self.config.num_blocks);
        let mut x = input;
        for d in 0..self.config.num_blocks {
            let (w, b) = (take(), take());
            x = graph.conv2d(x, w, b)?;
            x = graph.relu(x);
            let (w, b) = (take(), take());
            x = graph.conv2d(x, w, b)?;
            x = graph.relu(x);
            x = drop(graph, x)?;
            if d + 1 < self.config.num_blocks {
                skips.push(x);
                x = graph.maxpool2d(x)?;
            }
        }
        for skip in skips.into_iter().rev() {
            let (w, b) = (take(), take());
            let up = graph.conv_transpose2d(x, w, b)?;
            x = graph.concat_channels(up, skip)?;
            let (w, b) = (take(), take());
            x = graph.conv2d(x, w, b)?;
            x = graph.relu(x);
            let (w, b) = (take(), take());
            x = graph.conv2d(x, w, b)?;
            x = graph.relu(x);
            x = drop(graph, x)?;
        }
        let (w, b) = (take(), take());
        let logits = graph.conv2d(x, w, b)?;
        graph.softmax2(logits)
    }

    /// Per-pixel class probabilities for a `[N, C, H, W]` batch.
    pub fn forward(&self, batch: &Tensor, training: bool, dropout_seed: u64) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.input(batch.clone());
        let (_, probs) = self.forward_graph(&mut g, input, training, dropout_seed)?;
        Ok(g.value(probs).clone())
    }

    /// Foreground decision per pixel (argmax over the two channels), `[N, H, W]`.
    pub fn predict_mask(&self, batch: &Tensor) -> Result<Vec<u8>> {
        let probs = self.forward(batch, false, 0)?;
        let (n, _, h, w) = probs.dims4()?;
        let plane = h * w;
        let p = probs.data();
        let mut out = Vec::with_capacity(n * plane);
        for s in 0..n {
            for i in 0..plane {
                out.push(u8::from(p[(2 * s + 1) * plane + i] > p[2 * s * plane + i]));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Layer-by-layer count written out independently of `param_count`.
    fn enumerate_params(blocks: usize, base: usize, cin: usize) -> usize {
        let ch = |d: usize| base * 2usize.pow(d as u32);
        let mut layers: Vec<(usize, usize, usize)> = Vec::new();
        for d in 0..blocks {
            layers.push((if d == 0 { cin } else { ch(d - 1) }, ch(d), 3));
            layers.push((ch(d), ch(d), 3));
        }
        for d in 0..blocks - 1 {
            layers.push((ch(d + 1), ch(d), 3));
            layers.push((2 * ch(d), ch(d), 3));
            layers.push((ch(d), ch(d), 3));
        }
        layers.push((base, 2, 1));
        layers.iter().map(|&(c, k, s)| k * c * s * s + k).sum()
    }

    #[test]
    fn two_block_count() {
        let cfg = UNetConfig::new(2, 8, 16);
        assert_eq!(enumerate_params(2, 8, 1), 7074);
        assert_eq!(cfg.param_count(), 7074);
        let m = UNetModel::build(cfg, 0).unwrap();
        assert_eq!(m.flatten().len(), 7074);
    }

    #[test]
    fn count_matches_enumeration() {
        for blocks in 1..=6 {
            for base in [1, 4, 8, 64] {
                let cfg = UNetConfig::new(blocks, base, 64);
                assert_eq!(cfg.param_count(), enumerate_params(blocks, base, 1));
                let shapes: usize = cfg
                    .param_shapes()
                    .iter()
                    .map(|s| s.iter().product::<usize>())
                    .sum();
                assert_eq!(shapes, cfg.param_count());
            }
        }
    }

    #[test]
    fn width_scaling_is_quadratic() {
        let small = UNetConfig::new(5, 64, 240).param_count() as f64;
        let big = UNetConfig::new(5, 128, 240).param_count() as f64;
        let ratio = big / small;
        assert!((ratio - 4.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn full_size_level_shapes() {
        let levels = UNetConfig::default().encoder_levels();
        let sizes: Vec<usize> = levels.iter().map(|l| l.height).collect();
        let chans: Vec<usize> = levels.iter().map(|l| l.channels).collect();
        assert_eq!(sizes, vec![240, 120, 60, 30, 15]);
        assert_eq!(chans, vec![64, 128, 256, 512, 1024]);
    }

    #[test]
    fn invalid_config_names_every_violation() {
        let cfg = UNetConfig {
            num_blocks: 7,
            base_filters: 0,
            input_height: 30,
            dropout_rate: 1.0,
            ..UNetConfig::default()
        };
        let v = cfg.violations();
        assert!(v.iter().any(|m| m.contains("num_blocks")));
        assert!(v.iter().any(|m| m.contains("base_filters")));
        assert!(v.iter().any(|m| m.contains("dropout_rate")));
        assert!(UNetModel::build(cfg, 0).is_err());

        let odd = UNetConfig::new(5, 8, 40);
        assert!(odd.violations().iter().any(|m| m.contains("input_height")));
    }

    #[test]
    fn deterministic_build() {
        let cfg = UNetConfig::new(3, 4, 16);
        let a = UNetModel::build(cfg.clone(), 42).unwrap();
        let b = UNetModel::build(cfg.clone(), 42).unwrap();
        let c = UNetModel::build(cfg, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a
            .parameters()
            .iter()
            .filter(|t| t.shape().len() == 1)
            .all(|t| t.sum() == 0.0));
    }

    #[test]
    fn zero_model_outputs_half() {
        let cfg = UNetConfig::new(3, 4, 16);
        let m = UNetModel::zeros(cfg).unwrap();
        let x = Tensor::from_fn(vec![2, 1, 16, 16], |i| (i as f64).sin());
        let p = m.forward(&x, false, 0).unwrap();
        assert_eq!(p.shape(), &[2, 2, 16, 16]);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_rejects_wrong_size() {
        let m = UNetModel::build(UNetConfig::new(2, 4, 16), 0).unwrap();
        assert!(m
            .forward(&Tensor::zeros(vec![1, 1, 8, 8]), false, 0)
            .is_err());
        assert!(m
            .forward(&Tensor::zeros(vec![1, 2, 16, 16]), false, 0)
            .is_err());
    }
}
