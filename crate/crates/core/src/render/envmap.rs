//! Equirectangular environment maps with importance sampling.
//!
//! Directions use polar angle `theta` from +y and azimuth `phi = atan2(z, x)`.
//! Map column `u` covers `phi - yaw` in `[0, 2 pi)`, row `v` covers `theta`.

use std::f64::consts::{PI, TAU};

use crate::error::{CoreError, Result};
use crate::image::ImageBuffer;
use crate::render::geometry::V3;
use crate::scene::{EnvSource, SkyParams};

#[derive(Clone, Debug)]
pub struct EnvironmentMap {
    image: ImageBuffer,
    yaw: f64,
    /// Cumulative row weights, `height + 1` entries starting at 0.
    marginal: Vec<f64>,
    /// Per-row cumulative texel weights, `width + 1` entries each.
    conditional: Vec<Vec<f64>>,
    /// Texel probabilities (sum 1), row-major.
    prob: Vec<f64>,
    peak: [f64; 3],
    uniform: bool,
}

impl EnvironmentMap {
    pub fn from_image(image: ImageBuffer, yaw: f64, gamma: f64) -> Result<Self> {
        if image.channels() != 3 || image.width() != 2 * image.height() {
            return Err(CoreError::Shape(format!(
                "environment map must be RGB with width = 2 x height, got {}x{}x{}",
                image.width(),
                image.height(),
                image.channels()
            )));
        }
        image.check_finite()?;
        if image.data().iter().any(|&v| v < 0.0) {
            return Err(CoreError::Invalid("environment map has negative texels".into()));
        }
        let image = if gamma == 1.0 {
            image
        } else {
            image.map(|v| (v as f64).powf(gamma) as f32)
        };
        let (w, h) = (image.width(), image.height());
        let mut weights = vec![0.0f64; w * h];
        let mut peak = [0.0f64; 3];
        for y in 0..h {
            let sin_t = ((y as f64 + 0.5) / h as f64 * PI).sin();
            for x in 0..w {
                let p = image.pixel(y, x);
                for c in 0..3 {
                    peak[c] = peak[c].max(p[c] as f64);
                }
                weights[y * w + x] = (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0 * sin_t;
            }
        }
        let first = image.pixel(0, 0).to_vec();
        let uniform = (0..h).all(|y| (0..w).all(|x| image.pixel(y, x) == &first[..]));
        let total: f64 = weights.iter().sum();
        let mut marginal = vec![0.0; h + 1];
        let mut conditional = Vec::with_capacity(h);
        let mut prob = vec![0.0; w * h];
        if total > 0.0 {
            for y in 0..h {
                let mut row = vec![0.0; w + 1];
                for x in 0..w {
                    prob[y * w + x] = weights[y * w + x] / total;
                    row[x + 1] = row[x] + weights[y * w + x];
                }
                marginal[y + 1] = marginal[y] + row[w];
                conditional.push(row);
            }
        }
        Ok(EnvironmentMap {
            image,
            yaw,
            marginal,
            conditional,
            prob,
            peak,
            uniform,
        })
    }

    pub fn constant(radiance: [f64; 3]) -> Self {
        let img = ImageBuffer::from_fn(16, 8, 3, |_, _, c| radiance[c] as f32);
        EnvironmentMap::from_image(img, 0.0, 1.0).expect("constant map is valid")
    }

    /// Builds the map for an environment description, applying yaw and gamma.
    pub fn from_source(source: &EnvSource, yaw: f64, gamma: f64) -> Result<Self> {
        let img = match source {
            EnvSource::Constant { radiance } => ImageBuffer::from_fn(16, 8, 3, |_, _, c| radiance[c] as f32),
            EnvSource::Procedural { sky, resolution } => rasterize_sky(sky, *resolution),
            EnvSource::File { path } => crate::io::read_pfm_channels(path, 3)?,
        };
        EnvironmentMap::from_image(img, yaw, gamma)
    }

    pub fn image(&self) -> &ImageBuffer {
        &self.image
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    /// Per-channel maximum texel value.
    pub fn peak(&self) -> [f64; 3] {
        self.peak
    }

    /// True when every texel holds the same radiance.
    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn can_sample(&self) -> bool {
        !self.conditional.is_empty()
    }

    fn texel_of(&self, dir: &V3) -> (usize, usize, f64) {
        let (w, h) = (self.image.width(), self.image.height());
        let theta = dir.y.clamp(-1.0, 1.0).acos();
        let phi = (dir.z.atan2(dir.x) - self.yaw).rem_euclid(TAU);
        let row = ((theta / PI * h as f64) as usize).min(h - 1);
        let col = ((phi / TAU * w as f64) as usize).min(w - 1);
        (row, col, theta)
    }

    pub fn radiance(&self, dir: &V3) -> V3 {
        let (row, col, _) = self.texel_of(dir);
        let p = self.image.pixel(row, col);
        V3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    /// Solid-angle density of [`sample`](Self::sample) at `dir`.
    pub fn pdf(&self, dir: &V3) -> f64 {
        if !self.can_sample() {
            return 0.0;
        }
        let (w, h) = (self.image.width(), self.image.height());
        let (row, col, theta) = self.texel_of(dir);
        let sin_t = theta.sin();
        if sin_t <= 0.0 {
            return 0.0;
        }
        let area = (PI / h as f64) * (TAU / w as f64);
        self.prob[row * w + col] / (area * sin_t)
    }

    /// Importance-samples a direction from two uniforms; `None` for a black map.
    pub fn sample(&self, u1: f64, u2: f64) -> Option<(V3, f64)> {
        if !self.can_sample() {
            return None;
        }
        let (w, h) = (self.image.width(), self.image.height());
        let (row, fy) = sample_cdf(&self.marginal, u1);
        let (col, fx) = sample_cdf(&self.conditional[row], u2);
        let theta = (row as f64 + fy) / h as f64 * PI;
        let phi = (col as f64 + fx) / w as f64 * TAU + self.yaw;
        let (st, ct) = theta.sin_cos();
        let dir = V3::new(st * phi.cos(), ct, st * phi.sin());
        let area = (PI / h as f64) * (TAU / w as f64);
        let pdf = if st > 0.0 { self.prob[row * w + col] / (area * st) } else { 0.0 };
        (pdf > 0.0).then_some((dir, pdf))
    }
}

/// Inverts a cumulative table: returns the bucket and the position inside it.
fn sample_cdf(cdf: &[f64], u: f64) -> (usize, f64) {
    let n = cdf.len() - 1;
    let target = u * cdf[n];
    // cdf[i] <= target < cdf[i + 1], so the chosen bucket has positive weight.
    let i = (cdf.partition_point(|&c| c <= target) - 1).min(n - 1);
    let width = cdf[i + 1] - cdf[i];
    let frac = if width > 0.0 { ((target - cdf[i]) / width).clamp(0.0, 1.0 - 1e-12) } else { 0.5 };
    (i, frac)
}

/// Rasterizes a procedural sky to a `2h x h` equirectangular map.
pub fn rasterize_sky(sky: &SkyParams, height: usize) -> ImageBuffer {
    let h = height.max(2);
    let w = 2 * h;
    let blobs: Vec<(V3, f64, [f64; 3])> = sky
        .blobs
        .iter()
        .map(|b| {
            let (se, ce) = b.elevation.sin_cos();
            (V3::new(ce * b.azimuth.cos(), se, ce * b.azimuth.sin()), b.width, b.radiance)
        })
        .collect();
    ImageBuffer::from_fn(w, h, 3, |y, x, c| {
        let theta = (y as f64 + 0.5) / h as f64 * PI;
        let phi = (x as f64 + 0.5) / w as f64 * TAU;
        let (st, ct) = theta.sin_cos();
        let dir = V3::new(st * phi.cos(), ct, st * phi.sin());
        let elevation = PI / 2.0 - theta;
        let base = if elevation >= 0.0 {
            let t = (elevation / (PI / 2.0)).sqrt();
            sky.horizon[c] * (1.0 - t) + sky.zenith[c] * t
        } else {
            let t = (-elevation / 0.1).min(1.0);
            sky.horizon[c] * (1.0 - t) + sky.ground[c] * t
        };
        let glow: f64 = blobs
            .iter()
            .map(|(d, width, rad)| {
                let ang = dir.dot(d).clamp(-1.0, 1.0).acos();
                rad[c] * (-0.5 * (ang / width).powi(2)).exp()
            })
            .sum();
        (base + glow) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn test_map() -> EnvironmentMap {
        let img = ImageBuffer::from_fn(32, 16, 3, |y, x, c| (0.1 + (y * 3 + x) as f32 * 0.01 + c as f32 * 0.05) * if x == 5 { 20.0 } else { 1.0 });
        EnvironmentMap::from_image(img, 0.3, 1.0).unwrap()
    }

    #[test]
    fn pdf_integrates_to_one() {
        // Quadrature over the sphere, independent of the sampling routine.
        let env = test_map();
        let (nt, np) = (400, 800);
        let mut total = 0.0;
        for i in 0..nt {
            let theta = (i as f64 + 0.5) / nt as f64 * PI;
            for j in 0..np {
                let phi = (j as f64 + 0.5) / np as f64 * TAU;
                let d = V3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin());
                total += env.pdf(&d) * theta.sin() * (PI / nt as f64) * (TAU / np as f64);
            }
        }
        assert!((total - 1.0).abs() < 1e-2, "{total}");
    }

    #[test]
    fn sample_pdf_matches_lookup() {
        let env = test_map();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (d, pdf) = env.sample(rng.random(), rng.random()).unwrap();
            assert!((d.norm() - 1.0).abs() < 1e-12);
            let p2 = env.pdf(&d);
            assert!((pdf - p2).abs() <= 1e-9 * pdf.max(1.0), "{pdf} vs {p2}");
        }
    }

    #[test]
    fn estimator_of_irradiance_is_unbiased() {
        let env = test_map();
        // Exact texel-wise integral of L cos over the upper hemisphere.
        let (w, h) = (env.image().width(), env.image().height());
        let mut quad = 0.0;
        for y in 0..h / 2 {
            let (t0, t1) = (y as f64 / h as f64 * PI, (y + 1) as f64 / h as f64 * PI);
            let band = (t1.sin().powi(2) - t0.sin().powi(2)) / 2.0 * (TAU / w as f64);
            for x in 0..w {
                quad += env.image().get(y, x, 0) as f64 * band;
            }
        }
        // Balance-heuristic combination of environment and cosine sampling; the
        // environment strategy alone has unbounded variance near the pole.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let pdf_cos = |d: &V3| d.y.max(0.0) / PI;
        let mut mc = 0.0;
        for _ in 0..n {
            let (d, pdf) = env.sample(rng.random(), rng.random()).unwrap();
            if d.y > 0.0 {
                mc += env.radiance(&d).x * d.y / (pdf + pdf_cos(&d));
            }
            let (u1, u2): (f64, f64) = (rng.random(), rng.random());
            let (r, phi) = (u1.sqrt(), TAU * u2);
            let d = V3::new(r * phi.cos(), (1.0 - u1).max(0.0).sqrt(), r * phi.sin());
            if d.y > 0.0 {
                mc += env.radiance(&d).x * d.y / (env.pdf(&d) + pdf_cos(&d));
            }
        }
        mc /= n as f64;
        assert!((mc - quad).abs() / quad < 0.01, "mc {mc} quad {quad}");
    }

    #[test]
    fn gamma_and_validation() {
        let img = ImageBuffer::filled(8, 4, 3, 4.0);
        let env = EnvironmentMap::from_image(img.clone(), 0.0, 0.5).unwrap();
        assert!((env.peak()[0] - 2.0).abs() < 1e-6);
        let same = EnvironmentMap::from_image(img.clone(), 0.0, 1.0).unwrap();
        assert_eq!(same.image(), &img);
        assert!(EnvironmentMap::from_image(ImageBuffer::filled(4, 4, 3, 1.0), 0.0, 1.0).is_err());
        assert!(EnvironmentMap::from_image(ImageBuffer::filled(8, 4, 3, -1.0), 0.0, 1.0).is_err());
        let black = EnvironmentMap::constant([0.0; 3]);
        assert!(black.sample(0.5, 0.5).is_none());
        assert_eq!(black.pdf(&V3::y()), 0.0);
    }

    #[test]
    fn yaw_rotates_lookup() {
        let img = ImageBuffer::from_fn(16, 8, 3, |_, x, _| if x == 0 { 1.0 } else { 0.0 });
        let env = EnvironmentMap::from_image(img, 1.0, 1.0).unwrap();
        // Column 0 covers map azimuth just above 0, i.e. world azimuth just above the yaw.
        let phi: f64 = 1.0 + 0.1;
        let d = V3::new(phi.cos(), 0.0, phi.sin());
        assert_eq!(env.radiance(&d).x, 1.0);
        assert_eq!(env.radiance(&V3::new(0.1f64.cos(), 0.0, 0.1f64.sin())).x, 0.0);
    }
}
