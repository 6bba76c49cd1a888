//! A small U-Net: stride-2 convolutional encoder, nearest-neighbor upsampling
//! decoder with skip connections, instance normalization and leaky ReLUs.

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::{device, sigmoid};

const NORM_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub output_activation: OutputActivation,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(NnError::Config("U-Net needs at least one level".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(NnError::Config("U-Net channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Checks that `height` and `width` are divisible by `2^levels`.
    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let k = 1usize << self.levels;
        if height == 0 || width == 0 || height % k != 0 || width % k != 0 {
            return Err(NnError::Config(format!(
                "resolution {width}x{height} is not divisible by 2^{} = {k}",
                self.levels
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

struct Conv {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Conv> {
        let fan_in = (c_in * k * k) as f32;
        let bound = fan_in.sqrt().recip();
        let w: Vec<f32> = (0..c_out * c_in * k * k).map(|_| rng.random_range(-bound..bound)).collect();
        let b: Vec<f32> = (0..c_out).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Conv {
            weight: Var::from_vec(w, (c_out, c_in, k, k), &device())?,
            bias: Var::from_vec(b, c_out, &device())?,
            stride,
            padding: k / 2,
        })
    }

    fn zeros(c_in: usize, c_out: usize) -> Result<Conv> {
        Ok(Conv {
            weight: Var::zeros((c_out, c_in, 1, 1), DType::F32, &device())?,
            bias: Var::zeros(c_out, DType::F32, &device())?,
            stride: 1,
            padding: 0,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

struct Block {
    conv: Conv,
    gamma: Var,
    beta: Var,
}

impl Block {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, stride: usize) -> Result<Block> {
        Ok(Block {
            conv: Conv::new(rng, c_in, c_out, 3, stride)?,
            gamma: Var::ones(c_out, DType::F32, &device())?,
            beta: Var::zeros(c_out, DType::F32, &device())?,
        })
    }

    /// conv, instance norm with affine parameters, leaky ReLU.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let mean = y.mean_keepdim((2, 3))?;
        let centered = y.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((2, 3))?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        let c = self.gamma.dims()[0];
        let y = normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?;
        Ok(y.maximum(&(&y * LEAK)?)?)
    }
}

fn push_block<'a>(prefix: String, b: &'a Block, out: &mut Vec<(String, &'a Var)>) {
    out.push((format!("{prefix}.conv.weight"), &b.conv.weight));
    out.push((format!("{prefix}.conv.bias"), &b.conv.bias));
    out.push((format!("{prefix}.norm.gamma"), &b.gamma));
    out.push((format!("{prefix}.norm.beta"), &b.beta));
}

pub struct UNet {
    cfg: UNetConfig,
    stem: Block,
    down: Vec<(Block, Block)>,
    up: Vec<Block>,
    head: Conv,
}

impl UNet {
    /// Fan-in scaled uniform initialization from `rng`; the output
    /// convolution starts at zero so a fresh network emits a constant.
    pub fn new(cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Result<UNet> {
        cfg.validate()?;
        let stem = Block::new(rng, cfg.in_channels, cfg.channels(0), 1)?;
        let mut down = Vec::with_capacity(cfg.levels);
        for l in 1..=cfg.levels {
            let reduce = Block::new(rng, cfg.channels(l - 1), cfg.channels(l), 2)?;
            let refine = Block::new(rng, cfg.channels(l), cfg.channels(l), 1)?;
            down.push((reduce, refine));
        }
        let mut up = Vec::with_capacity(cfg.levels);
        for l in (1..=cfg.levels).rev() {
            up.push(Block::new(rng, cfg.channels(l) + cfg.channels(l - 1), cfg.channels(l - 1), 1)?);
        }
        let head = Conv::zeros(cfg.channels(0), cfg.out_channels)?;
        Ok(UNet {
            cfg: cfg.clone(),
            stem,
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Maps `(N, in_channels, H, W)` to `(N, out_channels, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(NnError::Config(format!(
                "expected {} input channels, found {c}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_resolution(h, w)?;
        let mut skips = vec![self.stem.forward(x)?];
        for (reduce, refine) in &self.down {
            let y = refine.forward(&reduce.forward(skips.last().unwrap())?)?;
            skips.push(y);
        }
        let mut y = skips.pop().unwrap();
        for block in &self.up {
            let skip = skips.pop().unwrap();
            let (_, _, sh, sw) = skip.dims4()?;
            let up = y.upsample_nearest2d(sh, sw)?;
            y = block.forward(&Tensor::cat(&[&up, &skip], 1)?)?;
        }
        let out = self.head.forward(&y)?;
        match self.cfg.output_activation {
            OutputActivation::Linear => Ok(out),
            OutputActivation::Sigmoid => sigmoid(&out),
        }
    }

    /// Every trainable variable with a stable name, in a fixed order.
    pub fn named_vars(&self) -> Vec<(String, &Var)> {
        let mut out = Vec::new();
        push_block("stem".into(), &self.stem, &mut out);
        for (l, (reduce, refine)) in self.down.iter().enumerate() {
            push_block(format!("down{}.reduce", l + 1), reduce, &mut out);
            push_block(format!("down{}.refine", l + 1), refine, &mut out);
        }
        for (k, b) in self.up.iter().enumerate() {
            push_block(format!("up{}", self.cfg.levels - k), b, &mut out);
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(act: OutputActivation) -> UNetConfig {
        UNetConfig {
            levels: 2,
            base_channels: 4,
            in_channels: 3,
            out_channels: 2,
            output_activation: act,
        }
    }

    fn randomize_head(net: &UNet, rng: &mut ChaCha8Rng) {
        for (name, var) in net.named_vars() {
            if name.starts_with("head") {
                let vals: Vec<f32> = (0..var.elem_count()).map(|_| rng.random_range(-2.0..2.0)).collect();
                var.set(&Tensor::from_vec(vals, var.shape(), &device()).unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn shapes_and_sigmoid_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::new(&cfg(OutputActivation::Sigmoid), &mut rng).unwrap();
        randomize_head(&net, &mut rng);
        let x = Tensor::randn(0f32, 3.0, (2, 3, 16, 12), &device()).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.dims4().unwrap(), (2, 2, 16, 12));
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(v.iter().any(|p| (p - 0.5).abs() > 1e-3));
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::new(&cfg(OutputActivation::Linear), &mut rng).unwrap();
        let x = Tensor::zeros((1, 3, 18, 16), DType::F32, &device()).unwrap();
        assert!(net.forward(&x).is_err());
        let x = Tensor::zeros((1, 4, 16, 16), DType::F32, &device()).unwrap();
        assert!(net.forward(&x).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = UNet::new(&cfg(OutputActivation::Linear), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = UNet::new(&cfg(OutputActivation::Linear), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for ((na, va), (nb, vb)) in a.named_vars().into_iter().zip(b.named_vars()) {
            assert_eq!(na, nb);
            let x: Vec<f32> = va.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = vb.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y);
        }
        assert!(a.parameter_count() > 0);
    }

    #[test]
    fn zero_levels_rejected() {
        let mut c = cfg(OutputActivation::Linear);
        c.levels = 0;
        assert!(UNet::new(&c, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
