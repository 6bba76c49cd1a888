//! The four sub-networks wired into one removal pipeline.
//!
//! All networks work in the log domain. Heads are residual so that freshly
//! initialized networks reproduce the input: `log T = log I - log L + r`,
//! `log L'_r = log L + r` and `log L'_o = log fill(L'_r) + r`, where the
//! fill is the texture inpainter applied to the object region.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};
use unshadow_core::dataset::{input_scale, normalize_proxy};
use unshadow_core::inpaint::{texture_inpaint, InpaintOperator};
use unshadow_core::util::stream_rng;
use unshadow_core::{CoreError, ImageBuffer, MaskImage};

use crate::batch::Batch;
use crate::error::{NnError, Result};
use crate::tensor::{image_to_tensor, images_to_tensor, log_clamped, masks_to_tensor, select, tensor_to_image, tensor_to_images, tensor_to_mask, LOG_FLOOR};
use crate::unet::{OutputActivation, UNet, UNetConfig};

/// Tag of the normalization conventions the networks were trained under.
pub const NORM_VERSION: &str = "receiver-max-proxy/receiver-mean-input/v1";

/// Bound on predicted log values, keeping `exp` finite.
const LOG_BOUND: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Net {
    Ss,
    Id,
    Sr,
    Li,
}

impl Net {
    pub const ALL: [Net; 4] = [Net::Ss, Net::Id, Net::Sr, Net::Li];

    pub fn name(self) -> &'static str {
        match self {
            Net::Ss => "ss",
            Net::Id => "id",
            Net::Sr => "sr",
            Net::Li => "li",
        }
    }

    fn stage_label(self) -> &'static str {
        match self {
            Net::Ss => "shadow segmentation",
            Net::Id => "intrinsic decomposition",
            Net::Sr => "shadow removal",
            Net::Li => "lighting inpainting",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Net::Ss => 7,
            Net::Id => 8,
            Net::Sr => 18,
            Net::Li => 7,
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            Net::Ss => 1,
            Net::Id => 6,
            Net::Sr | Net::Li => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            base_channels: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 512x512 configuration: five levels of 32 base channels.
    pub fn paper() -> Self {
        ModelConfig {
            levels: 5,
            base_channels: 32,
            seed: 0,
        }
    }

    pub fn unet(&self, net: Net) -> UNetConfig {
        UNetConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            in_channels: net.in_channels(),
            out_channels: net.out_channels(),
            output_activation: if net == Net::Ss {
                OutputActivation::Sigmoid
            } else {
                OutputActivation::Linear
            },
        }
    }
}

pub struct PipelineState {
    pub config: ModelConfig,
    pub norm_version: String,
    nets: [UNet; 4],
}

impl std::fmt::Debug for PipelineState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PipelineState")
            .field("config", &self.config)
            .field("norm_version", &self.norm_version)
            .field("parameters", &self.nets.iter().map(UNet::parameter_count).sum::<usize>())
            .finish()
    }
}

impl PipelineState {
    /// Fresh networks, each initialized from its own seed stream.
    pub fn new(cfg: &ModelConfig) -> Result<PipelineState> {
        let mk = |k: usize| UNet::new(&cfg.unet(Net::ALL[k]), &mut stream_rng(cfg.seed, 1000 + k as u64));
        Ok(PipelineState {
            config: cfg.clone(),
            norm_version: NORM_VERSION.to_string(),
            nets: [mk(0)?, mk(1)?, mk(2)?, mk(3)?],
        })
    }

    pub fn net(&self, net: Net) -> &UNet {
        &self.nets[net as usize]
    }

    pub fn configs(&self) -> Vec<UNetConfig> {
        self.nets.iter().map(|n| n.config().clone()).collect()
    }

    /// All variables, prefixed with the network name.
    pub fn named_vars(&self) -> Vec<(String, &Var)> {
        Net::ALL
            .iter()
            .flat_map(|&n| {
                self.net(n)
                    .named_vars()
                    .into_iter()
                    .map(move |(name, v)| (format!("{}.{name}", n.name()), v))
            })
            .collect()
    }

    pub fn net_vars(&self, net: Net) -> Vec<(String, &Var)> {
        self.net(net)
            .named_vars()
            .into_iter()
            .map(|(name, v)| (format!("{}.{name}", net.name()), v))
            .collect()
    }

    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        self.config.unet(Net::Ss).check_resolution(height, width)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.named_vars() {
            let vals: Vec<f32> = v.flatten_all()?.to_vec1()?;
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(NnError::Config(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    fn run(&self, net: Net, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = Tensor::cat(inputs, 1).map_err(|e| NnError::in_stage(net.stage_label())(e.into()))?;
        self.net(net).forward(&x).map_err(NnError::in_stage(net.stage_label()))
    }

    /// Soft shadow mask `S` in `[0, 1]` from 7 channels.
    pub fn shadow_segmentation(&self, log_i: &Tensor, log_p: &Tensor, m_r: &Tensor) -> Result<Tensor> {
        self.run(Net::Ss, &[log_i, log_p, m_r])
    }

    /// `(log L, log T)` from 8 channels.
    pub fn intrinsic_decomposition(&self, log_i: &Tensor, log_p: &Tensor, s: &Tensor, m_r: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.run(Net::Id, &[log_i, log_p, s, m_r])?;
        let log_l = out.narrow(1, 0, 3)?.clamp(-LOG_BOUND, LOG_BOUND)?;
        let log_t = (log_i - &log_l)? + out.narrow(1, 3, 3)?;
        Ok((log_l, log_t?.clamp(-LOG_BOUND, LOG_BOUND)?))
    }

    /// `log L'_r` from 18 channels.
    #[allow(clippy::too_many_arguments)]
    pub fn shadow_removal(
        &self,
        log_i: &Tensor,
        log_t: &Tensor,
        log_l: &Tensor,
        log_p: &Tensor,
        log_p_prime: &Tensor,
        s: &Tensor,
        m_r: &Tensor,
        m_o: &Tensor,
    ) -> Result<Tensor> {
        let out = self.run(Net::Sr, &[log_i, log_t, log_l, log_p, log_p_prime, s, m_r, m_o])?;
        Ok((log_l + out)?.clamp(-LOG_BOUND, LOG_BOUND)?)
    }

    /// `log L'_o` from 7 channels. `log_base` is the log of the filled
    /// lighting; the network sees it in place of `log L'_r` inside `M_o`.
    pub fn lighting_inpaint(&self, log_l_r_prime: &Tensor, log_base: &Tensor, log_p_prime: &Tensor, m_o: &Tensor) -> Result<Tensor> {
        let input = select(m_o, log_base, log_l_r_prime)?;
        let out = self.run(Net::Li, &[&input, log_p_prime, m_o])?;
        Ok((log_base + out)?.clamp(-LOG_BOUND, LOG_BOUND)?)
    }
}

/// Applies the texture inpainter to every batch item of a positive image
/// tensor, outside the autograd graph.
pub fn fill_holes(x: &Tensor, holes: &[MaskImage], op: &dyn InpaintOperator) -> Result<Tensor> {
    let images = tensor_to_images(&x.detach())?;
    if images.len() != holes.len() {
        return Err(NnError::Config(format!("{} images but {} masks", images.len(), holes.len())));
    }
    let filled: Vec<ImageBuffer> = images
        .iter()
        .zip(holes)
        .map(|(img, hole)| texture_inpaint(op, img, hole))
        .collect::<Result<_, CoreError>>()?;
    images_to_tensor(&filled.iter().collect::<Vec<_>>())
}

/// Off-receiver pixels 4-connected to `M_o` through other off-receiver
/// pixels, `M_o` included.
pub fn texture_hole(m_r: &MaskImage, m_o: &MaskImage) -> MaskImage {
    let (w, h) = (m_r.width(), m_r.height());
    let mut hole = vec![false; w * h];
    let mut stack: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| m_o.is_on(y, x) && !m_r.is_on(y, x))
        .collect();
    for &(y, x) in &stack {
        hole[y * w + x] = true;
    }
    while let Some((y, x)) = stack.pop() {
        let next = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
        for (yy, xx) in next {
            if yy < h && xx < w && !hole[yy * w + xx] && !m_r.is_on(yy, xx) {
                hole[yy * w + xx] = true;
                stack.push((yy, xx));
            }
        }
    }
    MaskImage::from_fn(w, h, |y, x| hole[y * w + x] as u8 as f32)
}

/// `g(T, M_o)` seeded only by receiver pixels.
pub fn receiver_texture_fill(op: &dyn InpaintOperator, t: &ImageBuffer, m_r: &MaskImage, m_o: &MaskImage) -> std::result::Result<ImageBuffer, CoreError> {
    let filled = texture_inpaint(op, t, &texture_hole(m_r, m_o))?;
    Ok(ImageBuffer::from_fn(t.width(), t.height(), t.channels(), |y, x, c| {
        if m_o.is_on(y, x) {
            filled.get(y, x, c)
        } else {
            t.get(y, x, c)
        }
    }))
}

/// `L' = (1 - M_o) L'_r + M_o L'_o` as an exact per-pixel selection.
pub fn lighting_composite(l_r_prime: &Tensor, l_o_prime: &Tensor, m_o: &Tensor) -> Result<Tensor> {
    select(m_o, l_o_prime, l_r_prime)
}

/// `I' = T' L' / s_in` on `M'_r` and `I` elsewhere, in display space.
/// Pixels outside `M'_r` are copied, so they equal the input bit for bit.
pub fn final_composite(
    t_prime: &ImageBuffer,
    l_prime: &ImageBuffer,
    i: &ImageBuffer,
    m_r_prime: &MaskImage,
    input_scale: &[f32; 3],
) -> Result<ImageBuffer> {
    t_prime.ensure_same_shape(l_prime, "final composite")?;
    t_prime.ensure_same_shape(i, "final composite")?;
    i.ensure_mask_shape(m_r_prime, "final composite")?;
    let mut out = i.clone();
    for y in 0..i.height() {
        for x in 0..i.width() {
            if m_r_prime.is_on(y, x) {
                for c in 0..i.channels() {
                    let v = t_prime.get(y, x, c) * l_prime.get(y, x, c) / input_scale[c];
                    out.set(y, x, c, v);
                }
            }
        }
    }
    Ok(out)
}

/// Differentiable intermediates of one pass over a batch.
pub struct Forward {
    pub s: Tensor,
    pub l: Tensor,
    pub t: Tensor,
    pub l_r_prime: Tensor,
    pub l_o_prime: Tensor,
    pub l_prime: Tensor,
    /// `g(T, M_o)`: filled inside `M_o` from the receiver (without
    /// gradient), `T` elsewhere.
    pub t_prime: Tensor,
}

impl PipelineState {
    /// Runs every stage on predicted intermediates.
    pub fn forward(&self, b: &Batch, op: &dyn InpaintOperator) -> Result<Forward> {
        let s = self.shadow_segmentation(&b.log_i, &b.log_p, &b.m_r)?;
        let (log_l, log_t) = self.intrinsic_decomposition(&b.log_i, &b.log_p, &s, &b.m_r)?;
        let log_lr = self.shadow_removal(&b.log_i, &log_t, &log_l, &b.log_p, &b.log_p_prime, &s, &b.m_r, &b.m_o)?;
        let l_r_prime = log_lr.exp()?;
        let base = log_clamped(&fill_holes(&l_r_prime, &b.m_o_images, op)?, LOG_FLOOR)?;
        let l_o_prime = self.lighting_inpaint(&log_lr, &base, &b.log_p_prime, &b.m_o)?.exp()?;
        let l_prime = lighting_composite(&l_r_prime, &l_o_prime, &b.m_o)?;
        let t = log_t.exp()?;
        let t_prime = select(&b.m_o, &fill_holes(&t, &b.texture_holes, op)?, &t)?;
        Ok(Forward {
            s,
            l: log_l.exp()?,
            t,
            l_r_prime,
            l_o_prime,
            l_prime,
            t_prime,
        })
    }
}

/// Inputs of one removal in display space.
pub struct PipelineInput<'a> {
    pub i: &'a ImageBuffer,
    pub p: &'a ImageBuffer,
    pub p_prime: &'a ImageBuffer,
    pub m_o: &'a MaskImage,
    pub m_r: &'a MaskImage,
}

/// Every intermediate of a removal. Lighting and texture images are in
/// normalized network space; `i_prime` is in the input's display space.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub i_prime: ImageBuffer,
    pub s: MaskImage,
    pub l: ImageBuffer,
    pub t: ImageBuffer,
    pub l_r_prime: ImageBuffer,
    pub l_o_prime: ImageBuffer,
    pub l_prime: ImageBuffer,
    pub t_prime: ImageBuffer,
    pub m_r_prime: MaskImage,
    pub input_scale: [f32; 3],
}

fn check_input(input: &PipelineInput) -> Result<()> {
    let i = input.i;
    if i.channels() != 3 {
        return Err(NnError::Config(format!("input image must have 3 channels, found {}", i.channels())));
    }
    for (img, name) in [(input.p, "proxy"), (input.p_prime, "removed proxy")] {
        if !img.same_shape(i) {
            return Err(NnError::Config(format!(
                "{name} is {}x{}x{}, input image is {}x{}x{}",
                img.width(),
                img.height(),
                img.channels(),
                i.width(),
                i.height(),
                i.channels()
            )));
        }
    }
    for (m, name) in [(input.m_o, "object mask"), (input.m_r, "receiver mask")] {
        if m.width() != i.width() || m.height() != i.height() {
            return Err(NnError::Config(format!(
                "{name} is {}x{}, input image is {}x{}",
                m.width(),
                m.height(),
                i.width(),
                i.height()
            )));
        }
        if !m.is_binary() {
            return Err(NnError::Config(format!("{name} is not binary")));
        }
    }
    i.check_finite()?;
    input.p.check_finite()?;
    input.p_prime.check_finite()?;
    Ok(())
}

/// Normalization, the four networks, lighting composite, texture inpainting
/// and the final composite.
pub fn run_pipeline(input: &PipelineInput, state: &PipelineState, op: &dyn InpaintOperator) -> Result<PipelineOutput> {
    check_input(input)?;
    state.check_resolution(input.i.height(), input.i.width())?;
    let m_r_prime = input.m_r.union(input.m_o)?;
    let s_in = input_scale(input.i, input.m_r)?;
    let i_n = input.i.scale_channels(&s_in);
    let (p, p_prime, _) = normalize_proxy(input.p, input.p_prime, &m_r_prime)?;

    let log_i = log_clamped(&image_to_tensor(&i_n)?, LOG_FLOOR)?;
    let log_p = log_clamped(&image_to_tensor(&p)?, LOG_FLOOR)?;
    let log_pp = log_clamped(&image_to_tensor(&p_prime)?, LOG_FLOOR)?;
    let m_r = masks_to_tensor(&[input.m_r])?;
    let m_o = masks_to_tensor(&[input.m_o])?;
    let holes = [input.m_o.clone()];

    let s = state.shadow_segmentation(&log_i, &log_p, &m_r)?;
    let (log_l, log_t) = state.intrinsic_decomposition(&log_i, &log_p, &s, &m_r)?;
    let log_lr = state.shadow_removal(&log_i, &log_t, &log_l, &log_p, &log_pp, &s, &m_r, &m_o)?;
    let l_r_prime = log_lr.exp()?;
    let base = log_clamped(&fill_holes(&l_r_prime, &holes, op).map_err(NnError::in_stage("lighting inpainting"))?, LOG_FLOOR)?;
    let l_o_prime = state.lighting_inpaint(&log_lr, &base, &log_pp, &m_o)?.exp()?;
    let l_prime = lighting_composite(&l_r_prime, &l_o_prime, &m_o)?;

    let t = tensor_to_image(&log_t.exp()?, 0)?;
    let t_prime = receiver_texture_fill(op, &t, input.m_r, input.m_o).map_err(|e| NnError::in_stage("texture inpainting")(e.into()))?;
    let l_prime = tensor_to_image(&l_prime, 0)?;
    let i_prime = final_composite(&t_prime, &l_prime, input.i, &m_r_prime, &s_in)?;
    Ok(PipelineOutput {
        i_prime,
        s: tensor_to_mask(&s, 0)?,
        l: tensor_to_image(&log_l.exp()?, 0)?,
        t,
        l_r_prime: tensor_to_image(&l_r_prime, 0)?,
        l_o_prime: tensor_to_image(&l_o_prime, 0)?,
        l_prime,
        t_prime,
        m_r_prime,
        input_scale: s_in,
    })
}
