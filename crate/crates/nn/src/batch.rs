//! Stacking prepared samples into network-ready tensors.

use candle_core::Tensor;
use unshadow_core::dataset::PreparedSample;
use unshadow_core::inpaint::InpaintOperator;
use unshadow_core::{ImageBuffer, MaskImage};

use crate::error::{NnError, Result};
use crate::pipeline::{fill_holes, texture_hole};
use crate::tensor::{images_to_tensor, log_clamped, masks_to_tensor, LOG_FLOOR};

/// A batch in normalized network space. Images are `(N, 3, H, W)`, masks
/// and the shadow target `(N, 1, H, W)`.
pub struct Batch {
    pub ids: Vec<String>,
    pub m_o_images: Vec<MaskImage>,
    /// Hole handed to texture inpainting, see [`texture_hole`].
    pub texture_holes: Vec<MaskImage>,
    pub input_scales: Vec<[f32; 3]>,
    /// Input scaled to receiver mean 0.5.
    pub i_n: Tensor,
    pub log_i: Tensor,
    pub log_p: Tensor,
    pub log_p_prime: Tensor,
    pub m_r: Tensor,
    pub m_o: Tensor,
    pub m_r_prime: Tensor,
    pub s_hat: Tensor,
    pub l_hat: Tensor,
    pub t_hat: Tensor,
    pub log_l_hat: Tensor,
    pub log_t_hat: Tensor,
    pub l_hat_prime: Tensor,
    /// Log of `L'_hat` with the object region refilled from its surroundings,
    /// the ground-truth stand-in for the lighting inpainting input.
    pub log_l_hat_prime_filled: Tensor,
    /// Target in the same scale as `i_n`.
    pub i_hat_prime_n: Tensor,
}

fn scaled(img: &ImageBuffer, s: &[f32; 3]) -> ImageBuffer {
    img.scale_channels(s)
}

impl Batch {
    pub fn new(samples: &[&PreparedSample], op: &dyn InpaintOperator) -> Result<Batch> {
        if samples.is_empty() {
            return Err(NnError::Config("empty batch".into()));
        }
        let scales: Vec<[f32; 3]> = samples.iter().map(|s| s.norm.input_scale).collect();
        let i_n: Vec<ImageBuffer> = samples.iter().zip(&scales).map(|(s, k)| scaled(&s.i, k)).collect();
        let ihp_n: Vec<ImageBuffer> = samples.iter().zip(&scales).map(|(s, k)| scaled(&s.i_hat_prime, k)).collect();
        let stack = |f: &dyn Fn(&PreparedSample) -> &ImageBuffer| images_to_tensor(&samples.iter().map(|s| f(s)).collect::<Vec<_>>());
        let masks = |f: &dyn Fn(&PreparedSample) -> &MaskImage| masks_to_tensor(&samples.iter().map(|s| f(s)).collect::<Vec<_>>());
        let i_n_t = images_to_tensor(&i_n.iter().collect::<Vec<_>>())?;
        let l_hat = stack(&|s| &s.l)?;
        let t_hat = stack(&|s| &s.t)?;
        let l_hat_prime = stack(&|s| &s.l_prime)?;
        let m_o_images: Vec<MaskImage> = samples.iter().map(|s| s.m_o.clone()).collect();
        let filled = fill_holes(&l_hat_prime, &m_o_images, op)?;
        Ok(Batch {
            ids: samples.iter().map(|s| s.scene_id.clone()).collect(),
            input_scales: scales,
            log_i: log_clamped(&i_n_t, LOG_FLOOR)?,
            i_n: i_n_t,
            log_p: log_clamped(&stack(&|s| &s.p)?, LOG_FLOOR)?,
            log_p_prime: log_clamped(&stack(&|s| &s.p_prime)?, LOG_FLOOR)?,
            m_r: masks(&|s| &s.m_r)?,
            m_o: masks(&|s| &s.m_o)?,
            m_r_prime: masks(&|s| &s.m_r_prime)?,
            s_hat: masks(&|s| &s.s_hat)?,
            log_l_hat: log_clamped(&l_hat, LOG_FLOOR)?,
            log_t_hat: log_clamped(&t_hat, LOG_FLOOR)?,
            l_hat,
            t_hat,
            log_l_hat_prime_filled: log_clamped(&filled, LOG_FLOOR)?,
            l_hat_prime,
            i_hat_prime_n: images_to_tensor(&ihp_n.iter().collect::<Vec<_>>())?,
            m_o_images,
            texture_holes: samples.iter().map(|s| texture_hole(&s.m_r, &s.m_o)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
