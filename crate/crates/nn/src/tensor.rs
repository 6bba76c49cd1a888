//! Conversions between interleaved [`ImageBuffer`]s and NCHW tensors.

use candle_core::{DType, Device, Tensor};
use unshadow_core::{ImageBuffer, MaskImage};

use crate::error::{NnError, Result};

/// Floor applied before taking logs of network inputs and outputs.
pub const LOG_FLOOR: f64 = 1e-4;

pub fn device() -> Device {
    Device::Cpu
}

fn check_batch<'a, T>(items: &'a [T], what: &str, dims: impl Fn(&T) -> (usize, usize)) -> Result<(usize, usize)> {
    let first = items
        .first()
        .ok_or_else(|| NnError::Config(format!("{what}: empty batch")))?;
    let (w, h) = dims(first);
    if items.iter().any(|i| dims(i) != (w, h)) {
        return Err(NnError::Config(format!("{what}: batch items differ in size")));
    }
    Ok((w, h))
}

/// Stacks images into an `(N, C, H, W)` f32 tensor.
pub fn images_to_tensor(images: &[&ImageBuffer]) -> Result<Tensor> {
    let (w, h) = check_batch(images, "images", |i| (i.width(), i.height()))?;
    let c = images[0].channels();
    if images.iter().any(|i| i.channels() != c) {
        return Err(NnError::Config("images: batch items differ in channel count".into()));
    }
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get(y, x, ch));
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &device())?)
}

pub fn image_to_tensor(image: &ImageBuffer) -> Result<Tensor> {
    images_to_tensor(&[image])
}

/// Stacks masks into an `(N, 1, H, W)` f32 tensor.
pub fn masks_to_tensor(masks: &[&MaskImage]) -> Result<Tensor> {
    let (w, h) = check_batch(masks, "masks", |m| (m.width(), m.height()))?;
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        data.extend_from_slice(m.data());
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), &device())?)
}

/// Extracts batch item `n` of an `(N, C, H, W)` tensor.
pub fn tensor_to_image(t: &Tensor, n: usize) -> Result<ImageBuffer> {
    let (_, c, h, w) = t.dims4()?;
    let chw: Vec<f32> = t.get(n)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(ImageBuffer::from_fn(w, h, c, |y, x, ch| chw[(ch * h + y) * w + x]))
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageBuffer>> {
    (0..t.dims4()?.0).map(|n| tensor_to_image(t, n)).collect()
}

pub fn tensor_to_mask(t: &Tensor, n: usize) -> Result<MaskImage> {
    let (_, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(NnError::Config(format!("mask tensor must have one channel, found {c}")));
    }
    let data: Vec<f32> = t.get(n)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(MaskImage::from_vec(w, h, data)?)
}

/// `ln(max(t, floor))`.
pub fn log_clamped(t: &Tensor, floor: f64) -> Result<Tensor> {
    Ok(t.maximum(floor)?.log()?)
}

/// Logistic function built from `exp` so it stays differentiable.
pub fn sigmoid(t: &Tensor) -> Result<Tensor> {
    Ok((t.neg()?.exp()? + 1.0)?.recip()?)
}

/// Elementwise `mask ? on : off` for `(N, 1, H, W)` binary masks broadcast
/// over channels. The result is an exact selection, not a blend.
pub fn select(mask: &Tensor, on: &Tensor, off: &Tensor) -> Result<Tensor> {
    let cond = mask.gt(0.5)?.broadcast_as(on.shape())?;
    Ok(cond.where_cond(on, off)?)
}

/// Sum over every axis but the first, giving one value per batch item.
pub fn per_item_sum(t: &Tensor) -> Result<Tensor> {
    let n = t.dims()[0];
    Ok(t.reshape((n, ()))?.sum(1)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = ImageBuffer::from_fn(5, 3, 3, |y, x, c| (y * 100 + x * 10 + c) as f32);
        let t = image_to_tensor(&img).unwrap();
        assert_eq!(t.dims4().unwrap(), (1, 3, 3, 5));
        assert_eq!(tensor_to_image(&t, 0).unwrap(), img);
        let m = MaskImage::from_fn(5, 3, |y, x| ((x + y) % 2) as f32);
        let mt = masks_to_tensor(&[&m, &m]).unwrap();
        assert_eq!(tensor_to_mask(&mt, 1).unwrap(), m);
    }

    #[test]
    fn select_is_exact() {
        let on = Tensor::new(&[[[[1.5f32, 2.5]]]], &device()).unwrap();
        let off = Tensor::new(&[[[[7.0f32, 8.0]]]], &device()).unwrap();
        let m = Tensor::new(&[[[[1.0f32, 0.0]]]], &device()).unwrap();
        let got: Vec<f32> = select(&m, &on, &off).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(got, vec![1.5, 8.0]);
    }

    #[test]
    fn batches_must_agree() {
        let a = ImageBuffer::new(4, 4, 3);
        let b = ImageBuffer::new(4, 5, 3);
        assert!(images_to_tensor(&[&a, &b]).is_err());
        assert!(images_to_tensor(&[]).is_err());
    }
}
