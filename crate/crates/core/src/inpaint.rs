//! Texture inpainting operators.
//!
//! An [`InpaintOperator`] fills the pixels of an image selected by a binary
//! hole mask and must leave every other pixel untouched. The built-in
//! [`DiffusionFill`] solves the discrete Laplace equation inside the hole with
//! the surrounding pixels as Dirichlet boundary.

use crate::error::{CoreError, Result};
use crate::image::{ImageBuffer, MaskImage};

pub trait InpaintOperator: Send + Sync {
    fn name(&self) -> &str;

    /// Fills `hole` (pixels with value > 0.5) of `image`.
    fn fill(&self, image: &ImageBuffer, hole: &MaskImage) -> Result<ImageBuffer>;
}

/// Applies `op` and then restores every pixel outside the hole bit-exactly,
/// so a misbehaving operator cannot leak changes outside the mask.
pub fn texture_inpaint(
    op: &dyn InpaintOperator,
    image: &ImageBuffer,
    hole: &MaskImage,
) -> Result<ImageBuffer> {
    image.ensure_mask_shape(hole, "texture_inpaint")?;
    if hole.is_empty() {
        return Ok(image.clone());
    }
    let filled = op
        .fill(image, hole)
        .map_err(|e| CoreError::Invalid(format!("inpaint operator '{}' failed: {e}", op.name())))?;
    filled.ensure_same_shape(image, "inpaint output")?;
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if hole.is_on(y, x) {
                out.pixel_mut(y, x).copy_from_slice(filled.pixel(y, x));
            }
        }
    }
    Ok(out)
}

/// Repeated masked neighbor averaging (successive over-relaxation) until the
/// largest update falls below `tolerance`.
#[derive(Clone, Debug)]
pub struct DiffusionFill {
    pub max_iterations: usize,
    pub tolerance: f32,
    pub relaxation: f32,
}

impl Default for DiffusionFill {
    fn default() -> Self {
        DiffusionFill {
            max_iterations: 20_000,
            tolerance: 1e-6,
            relaxation: 1.9,
        }
    }
}

impl InpaintOperator for DiffusionFill {
    fn name(&self) -> &str {
        "diffusion"
    }

    fn fill(&self, image: &ImageBuffer, hole: &MaskImage) -> Result<ImageBuffer> {
        image.ensure_mask_shape(hole, "diffusion fill")?;
        let (w, h, ch) = (image.width(), image.height(), image.channels());
        let holes: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| hole.is_on(y, x))
            .collect();
        if holes.len() == w * h {
            return Err(CoreError::Invalid("hole covers the whole image".into()));
        }
        let mut out = image.clone();

        // Start from the mean of the known pixels bordering the hole.
        let mut init = vec![0.0f64; ch];
        let mut n = 0usize;
        for &(y, x) in &holes {
            for (yy, xx) in neighbors(y, x, w, h) {
                if !hole.is_on(yy, xx) {
                    n += 1;
                    for (c, v) in init.iter_mut().enumerate() {
                        *v += image.get(yy, xx, c) as f64;
                    }
                }
            }
        }
        let n = n.max(1) as f64;
        for &(y, x) in &holes {
            for (c, v) in init.iter().enumerate() {
                out.set(y, x, c, (*v / n) as f32);
            }
        }

        let stencil: Vec<Vec<usize>> = holes
            .iter()
            .map(|&(y, x)| neighbors(y, x, w, h).map(|(yy, xx)| yy * w + xx).collect())
            .collect();
        let omega = self.relaxation as f64;
        let tolerance = self.tolerance as f64;
        let mut data: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
        for _ in 0..self.max_iterations {
            let mut max_delta = 0.0f64;
            for (&(y, x), nb) in holes.iter().zip(&stencil) {
                let base = (y * w + x) * ch;
                let k = nb.len() as f64;
                for c in 0..ch {
                    let avg = nb.iter().map(|&p| data[p * ch + c]).sum::<f64>() / k;
                    let old = data[base + c];
                    let new = old + omega * (avg - old);
                    max_delta = max_delta.max((new - old).abs());
                    data[base + c] = new;
                }
            }
            if max_delta < tolerance {
                break;
            }
        }
        for (o, v) in out.data_mut().iter_mut().zip(&data) {
            *o = *v as f32;
        }
        Ok(out)
    }
}

fn neighbors(y: usize, x: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (y as isize - 1, x as isize),
        (y as isize + 1, x as isize),
        (y as isize, x as isize - 1),
        (y as isize, x as isize + 1),
    ];
    cand.into_iter().filter_map(move |(yy, xx)| {
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then_some((yy as usize, xx as usize))
    })
}
