//! Linear-radiance float images and soft/binary masks.
//!
//! Pixels are stored row-major with interleaved channels, so sample
//! `(y, x, c)` lives at `(y * width + x) * channels + c`.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::util::median_in_place;

/// Default floor used before taking logarithms of radiance.
pub const LOG_FLOOR: f32 = 1e-4;

/// Separable binomial blur kernel used by the Gaussian pyramid.
pub const BINOMIAL_KERNEL: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        ImageBuffer {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(CoreError::Shape(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageBuffer {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &ImageBuffer, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(CoreError::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn ensure_mask_shape(&self, mask: &MaskImage, what: &str) -> Result<()> {
        if self.width == mask.width() && self.height == mask.height() {
            Ok(())
        } else {
            Err(CoreError::Shape(format!(
                "{what}: image {}x{} vs mask {}x{}",
                self.width,
                self.height,
                mask.width(),
                mask.height()
            )))
        }
    }

    /// Returns the first non-finite sample as an error.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => {
                let c = i % self.channels;
                let p = i / self.channels;
                Err(CoreError::NonFinite {
                    y: p / self.width,
                    x: p % self.width,
                    c,
                    value: self.data[i],
                })
            }
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ImageBuffer, f: impl Fn(f32, f32) -> f32) -> Result<ImageBuffer> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Extracts a single channel as a 1-channel image.
    pub fn channel(&self, c: usize) -> ImageBuffer {
        ImageBuffer::from_fn(self.width, self.height, 1, |y, x, _| self.get(y, x, c))
    }

    /// Multiplies channel `c` of every pixel by `scales[c]`.
    pub fn scale_channels(&self, scales: &[f32]) -> ImageBuffer {
        assert_eq!(scales.len(), self.channels);
        let ch = self.channels;
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: ch,
            data: self
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v * scales[i % ch])
                .collect(),
        }
    }

    /// Elementwise `ln(max(v, floor))`, computed in double precision.
    pub fn log_transform(&self, floor: f32) -> Result<ImageBuffer> {
        if !(floor > 0.0) || !floor.is_finite() {
            return Err(CoreError::Invalid(format!("log floor must be positive, got {floor}")));
        }
        self.check_finite()?;
        Ok(self.map(|v| (v.max(floor) as f64).ln() as f32))
    }

    /// Inverse of [`ImageBuffer::log_transform`] for inputs at or above the floor.
    pub fn exp_transform(&self) -> ImageBuffer {
        self.map(|v| (v as f64).exp() as f32)
    }

    /// Builds a Gaussian pyramid: level 0 is the input, each further level is
    /// blurred with the binomial kernel and decimated by two.
    pub fn gaussian_pyramid(&self, levels: usize) -> Result<Vec<ImageBuffer>> {
        if levels == 0 {
            return Err(CoreError::Invalid("pyramid needs at least one level".into()));
        }
        let min = 1usize << (levels - 1);
        if self.width < min || self.height < min {
            return Err(CoreError::TooSmall {
                width: self.width,
                height: self.height,
                levels,
            });
        }
        let mut out = Vec::with_capacity(levels);
        out.push(self.clone());
        for _ in 1..levels {
            let next = out.last().unwrap().blur_downsample();
            out.push(next);
        }
        Ok(out)
    }

    /// Separable binomial blur with edge replication.
    pub fn blur(&self) -> ImageBuffer {
        let (w, h, ch) = (self.width, self.height, self.channels);
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let mut tmp = ImageBuffer::new(w, h, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0f32;
                    for (k, wk) in BINOMIAL_KERNEL.iter().enumerate() {
                        let xx = clamp(x as isize + k as isize - 2, w);
                        acc += wk * self.get(y, xx, c);
                    }
                    tmp.set(y, x, c, acc);
                }
            }
        }
        let mut out = ImageBuffer::new(w, h, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0f32;
                    for (k, wk) in BINOMIAL_KERNEL.iter().enumerate() {
                        let yy = clamp(y as isize + k as isize - 2, h);
                        acc += wk * tmp.get(yy, x, c);
                    }
                    out.set(y, x, c, acc);
                }
            }
        }
        out
    }

    /// Blur followed by keeping every even row and column.
    pub fn blur_downsample(&self) -> ImageBuffer {
        let blurred = self.blur();
        let (w2, h2) = (self.width.div_ceil(2), self.height.div_ceil(2));
        ImageBuffer::from_fn(w2, h2, self.channels, |y, x, c| blurred.get(2 * y, 2 * x, c))
    }

    /// Forward differences with a zero last column (for d/dx) and last row
    /// (for d/dy). Output channel `2c` is d/dx of input channel `c`, channel
    /// `2c + 1` is d/dy.
    pub fn spatial_gradient(&self) -> Result<ImageBuffer> {
        if self.width < 2 || self.height < 2 {
            return Err(CoreError::Shape(format!(
                "gradient needs at least 2x2 pixels, got {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width, self.height);
        Ok(ImageBuffer::from_fn(w, h, 2 * self.channels, |y, x, k| {
            let c = k / 2;
            if k % 2 == 0 {
                if x + 1 < w {
                    self.get(y, x + 1, c) - self.get(y, x, c)
                } else {
                    0.0
                }
            } else if y + 1 < h {
                self.get(y + 1, x, c) - self.get(y, x, c)
            } else {
                0.0
            }
        }))
    }

    /// Per-channel median over pixels with `mask > 0.5`.
    pub fn channelwise_median(&self, mask: &MaskImage) -> Result<Vec<f32>> {
        self.ensure_mask_shape(mask, "channelwise_median")?;
        let mut values: Vec<Vec<f32>> = vec![Vec::new(); self.channels];
        for (p, &m) in mask.data().iter().enumerate() {
            if m > 0.5 {
                for (c, vals) in values.iter_mut().enumerate() {
                    vals.push(self.data[p * self.channels + c]);
                }
            }
        }
        values
            .iter_mut()
            .map(|v| median_in_place(v).ok_or(CoreError::EmptyMask("channelwise_median")))
            .collect()
    }

    /// Per-channel maximum over pixels with `mask > 0.5`; `None` when the mask is empty.
    pub fn masked_max(&self, mask: &MaskImage) -> Option<Vec<f32>> {
        let mut out = vec![f32::NEG_INFINITY; self.channels];
        let mut any = false;
        for (p, &m) in mask.data().iter().enumerate() {
            if m > 0.5 {
                any = true;
                for (c, o) in out.iter_mut().enumerate() {
                    *o = o.max(self.data[p * self.channels + c]);
                }
            }
        }
        any.then_some(out)
    }

    /// Per-channel mean over pixels with `mask > 0.5`; `None` when the mask is empty.
    pub fn masked_mean(&self, mask: &MaskImage) -> Option<Vec<f32>> {
        let mut sums = vec![0.0f64; self.channels];
        let mut n = 0usize;
        for (p, &m) in mask.data().iter().enumerate() {
            if m > 0.5 {
                n += 1;
                for (c, s) in sums.iter_mut().enumerate() {
                    *s += self.data[p * self.channels + c] as f64;
                }
            }
        }
        (n > 0).then(|| sums.iter().map(|s| (s / n as f64) as f32).collect())
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// Soft or binary mask with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl MaskImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        MaskImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CoreError::Shape(format!(
                "{} samples for a {width}x{height} mask",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::Invalid(format!("mask value {v} outside [0, 1]")));
        }
        Ok(MaskImage {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        MaskImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f32) {
        self.data[y * self.width + x] = value.clamp(0.0, 1.0);
    }

    #[inline]
    pub fn is_on(&self, y: usize, x: usize) -> bool {
        self.get(y, x) > 0.5
    }

    pub fn same_shape(&self, other: &MaskImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape(&self, other: &MaskImage, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(CoreError::Shape(format!(
                "{what}: mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of pixels with value above one half.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Pointwise sum clamped to one; for disjoint binary masks this is the union.
    pub fn union(&self, other: &MaskImage) -> Result<MaskImage> {
        self.ensure_same_shape(other, "union")?;
        Ok(MaskImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a + b).min(1.0))
                .collect(),
        })
    }

    /// Pointwise product; for binary masks this is the intersection.
    pub fn intersect(&self, other: &MaskImage) -> Result<MaskImage> {
        self.ensure_same_shape(other, "intersect")?;
        Ok(MaskImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn complement(&self) -> MaskImage {
        MaskImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// `1` where the value is strictly above `threshold`.
    pub fn threshold(&self, threshold: f32) -> MaskImage {
        MaskImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::from_vec(self.width, self.height, 1, self.data.clone()).unwrap()
    }

    /// Interprets a 1-channel image as a mask, clamping into `[0, 1]`.
    pub fn from_image(img: &ImageBuffer) -> Result<MaskImage> {
        if img.channels() != 1 {
            return Err(CoreError::Shape(format!(
                "mask needs 1 channel, got {}",
                img.channels()
            )));
        }
        Ok(MaskImage {
            width: img.width(),
            height: img.height(),
            data: img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    /// Binary dilation with a square structuring element of the given radius.
    pub fn dilate(&self, radius: usize) -> MaskImage {
        let r = radius as isize;
        MaskImage::from_fn(self.width, self.height, |y, x| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = y as isize + dy;
                    let xx = x as isize + dx;
                    if yy >= 0
                        && xx >= 0
                        && (yy as usize) < self.height
                        && (xx as usize) < self.width
                        && self.is_on(yy as usize, xx as usize)
                    {
                        return 1.0;
                    }
                }
            }
            0.0
        })
    }

    /// Binary erosion with a square structuring element; out-of-bounds counts as off.
    pub fn erode(&self, radius: usize) -> MaskImage {
        self.complement_binary().dilate_with_border(radius).complement_binary()
    }

    fn complement_binary(&self) -> MaskImage {
        MaskImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| if v > 0.5 { 0.0 } else { 1.0 })
                .collect(),
        }
    }

    fn dilate_with_border(&self, radius: usize) -> MaskImage {
        let r = radius as isize;
        MaskImage::from_fn(self.width, self.height, |y, x| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = y as isize + dy;
                    let xx = x as isize + dx;
                    if yy < 0 || xx < 0 || yy as usize >= self.height || xx as usize >= self.width {
                        return 1.0;
                    }
                    if self.is_on(yy as usize, xx as usize) {
                        return 1.0;
                    }
                }
            }
            0.0
        })
    }
}
