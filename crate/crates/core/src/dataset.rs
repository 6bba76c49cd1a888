//! Training samples: masks from depth, composition of the input and target
//! images, augmentation, shadow ground truth, normalization and storage.
//!
//! A stored sample keeps the raw renders. Normalization and composition run
//! when a sample is prepared for training or evaluation, after augmentation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{ImageBuffer, MaskImage};
use crate::io;
use crate::render::proxy::{build_proxy_mesh, perturb_lighting, render_proxy_pair, DepthNoiseConfig, PerturbConfig};
use crate::render::{render_scene, RenderConfig, RenderMetadata};
use crate::scene::{generate_scene, SceneConfig, SceneSpec};
use crate::util::{config_hash, mix_seed, sha256_hex, stream_rng, write_atomic};

pub type Rgb32 = [f32; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadowGtConfig {
    /// Soft-threshold width in normalized lighting units.
    pub alpha: f32,
    /// Strict threshold used to binarize soft shadow masks for metrics.
    pub binarize_threshold: f32,
}

impl Default for ShadowGtConfig {
    fn default() -> Self {
        ShadowGtConfig {
            alpha: 0.05,
            binarize_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Hue shift range in turns, `[-hue, hue]`.
    pub hue: f32,
    pub saturation: (f32, f32),
    pub brightness: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hue: 0.05,
            saturation: (0.7, 1.3),
            brightness: (0.6, 1.6),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            hue: 0.0,
            saturation: (1.0, 1.0),
            brightness: (1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub render: RenderConfig,
    pub noise: DepthNoiseConfig,
    pub perturb: PerturbConfig,
    pub shadow: ShadowGtConfig,
    pub augment: AugmentConfig,
    /// Relative depth tolerance for receiver and object masks.
    pub depth_tolerance: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            render: RenderConfig::default(),
            noise: DepthNoiseConfig::default(),
            perturb: PerturbConfig::default(),
            shadow: ShadowGtConfig::default(),
            augment: AugmentConfig::default(),
            depth_tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub lighting_scale: Rgb32,
    pub proxy_scale: Rgb32,
    pub input_scale: Rgb32,
}

/// Raw per-scene images as rendered and stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub scene_id: String,
    pub seed: u64,
    pub t_hat: ImageBuffer,
    pub l_hat: ImageBuffer,
    pub l_hat_prime: ImageBuffer,
    pub p: ImageBuffer,
    pub p_prime: ImageBuffer,
    pub d: ImageBuffer,
    pub d_prime: ImageBuffer,
    pub d_r: ImageBuffer,
    pub m_o: MaskImage,
    pub m_r: MaskImage,
    pub m_r_prime: MaskImage,
    pub s_hat: MaskImage,
    pub norm: NormalizationRecord,
}

/// A normalized sample ready for a network.
///
/// Lighting and proxies are normalized to unit receiver maximum. `i` and
/// `i_hat_prime` live in display space (lighting-normalized, before the input
/// scale); networks see `i * input_scale`, and the texture target `t` already
/// carries that scale so that `i * input_scale = t * l` on the receiver.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub scene_id: String,
    pub i: ImageBuffer,
    pub i_hat_prime: ImageBuffer,
    pub t: ImageBuffer,
    pub l: ImageBuffer,
    pub l_prime: ImageBuffer,
    pub p: ImageBuffer,
    pub p_prime: ImageBuffer,
    pub m_o: MaskImage,
    pub m_r: MaskImage,
    pub m_r_prime: MaskImage,
    pub s_hat: MaskImage,
    pub norm: NormalizationRecord,
}

/// Object, receiver and extended receiver masks from the three depth maps.
///
/// `M_o` marks pixels whose depth grows when the object is removed, `M_r`
/// pixels where the plane is the first hit, and `M'_r = M_o + M_r`.
pub fn compute_masks(
    d: &ImageBuffer,
    d_prime: &ImageBuffer,
    d_r: &ImageBuffer,
    tolerance: f32,
) -> Result<(MaskImage, MaskImage, MaskImage)> {
    d.ensure_same_shape(d_prime, "D'")?;
    d.ensure_same_shape(d_r, "D_r")?;
    if d.channels() != 1 {
        return Err(CoreError::Shape("depth maps must have one channel".into()));
    }
    let (w, h) = (d.width(), d.height());
    let m_o = MaskImage::from_fn(w, h, |y, x| {
        let (a, b) = (d.get(y, x, 0), d_prime.get(y, x, 0));
        (a.is_finite() && b > a * (1.0 + tolerance)) as u8 as f32
    });
    let m_r = MaskImage::from_fn(w, h, |y, x| {
        let (a, r) = (d.get(y, x, 0), d_r.get(y, x, 0));
        (r.is_finite() && a.is_finite() && (r - a).abs() <= tolerance * a) as u8 as f32
    });
    let m_r_prime = m_o.union(&m_r)?;
    Ok((m_o, m_r, m_r_prime))
}

/// `I = (M_r T + (1 - M_r)) L` and `I' = (M'_r T + (1 - M'_r)) L'`.
pub fn compose_images(
    t_hat: &ImageBuffer,
    l_hat: &ImageBuffer,
    l_hat_prime: &ImageBuffer,
    m_r: &MaskImage,
    m_r_prime: &MaskImage,
) -> Result<(ImageBuffer, ImageBuffer)> {
    t_hat.ensure_same_shape(l_hat, "L")?;
    t_hat.ensure_same_shape(l_hat_prime, "L'")?;
    t_hat.ensure_mask_shape(m_r, "M_r")?;
    t_hat.ensure_mask_shape(m_r_prime, "M'_r")?;
    let compose = |l: &ImageBuffer, m: &MaskImage| {
        ImageBuffer::from_fn(t_hat.width(), t_hat.height(), t_hat.channels(), |y, x, c| {
            let mv = m.get(y, x);
            (mv * t_hat.get(y, x, c) + (1.0 - mv)) * l.get(y, x, c)
        })
    };
    Ok((compose(l_hat, m_r), compose(l_hat_prime, m_r_prime)))
}

pub fn rgb_to_hsv(rgb: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max > 0.0 { delta / max } else { 0.0 };
    [h, s, max]
}

pub fn hsv_to_rgb(hsv: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsvJitter {
    pub hue: f32,
    pub saturation: f32,
    pub brightness: f32,
}

impl HsvJitter {
    pub fn identity() -> Self {
        HsvJitter {
            hue: 0.0,
            saturation: 1.0,
            brightness: 1.0,
        }
    }

    pub fn sample(rng: &mut dyn RngCore, cfg: &AugmentConfig) -> Self {
        let mut u = |lo: f32, hi: f32| {
            let r: f32 = rng.random();
            if hi > lo {
                lo + (hi - lo) * r
            } else {
                lo
            }
        };
        HsvJitter {
            hue: u(-cfg.hue, cfg.hue),
            saturation: u(cfg.saturation.0, cfg.saturation.1),
            brightness: u(cfg.brightness.0, cfg.brightness.1),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == HsvJitter::identity()
    }

    pub fn apply(&self, rgb: [f32; 3]) -> [f32; 3] {
        if self.is_identity() {
            return rgb;
        }
        let [h, s, v] = rgb_to_hsv(rgb);
        hsv_to_rgb([h + self.hue, (s * self.saturation).min(1.0), v * self.brightness])
    }
}

/// Smallest texture value kept after augmentation so logs stay meaningful.
pub const AUGMENTED_TEXTURE_FLOOR: f32 = 1e-3;

/// Jitters the texture per pixel in HSV space, and both lighting images by
/// one shared per-channel gain: the HSV jitter of their mean receiver color.
/// A shared gain keeps the ratio `L' / L` unchanged.
pub fn augment(sample: &TrainingSample, rng: &mut dyn RngCore, cfg: &AugmentConfig) -> Result<TrainingSample> {
    let tex = HsvJitter::sample(rng, cfg);
    let light = HsvJitter::sample(rng, cfg);
    let mut out = sample.clone();
    if !tex.is_identity() {
        let t = &mut out.t_hat;
        for y in 0..t.height() {
            for x in 0..t.width() {
                let p = t.pixel_mut(y, x);
                let j = tex.apply([p[0], p[1], p[2]]);
                for c in 0..3 {
                    p[c] = j[c].max(AUGMENTED_TEXTURE_FLOOR);
                }
            }
        }
    }
    if !light.is_identity() {
        let mean = sample
            .l_hat
            .masked_mean(&sample.m_r_prime)
            .ok_or(CoreError::EmptyMask("extended receiver"))?;
        let m = [mean[0], mean[1], mean[2]];
        let j = light.apply(m);
        let gain: Vec<f32> = (0..3)
            .map(|c| if m[c] > 0.0 { (j[c] / m[c]).max(1e-3) } else { 1.0 })
            .collect();
        out.l_hat = sample.l_hat.scale_channels(&gain);
        out.l_hat_prime = sample.l_hat_prime.scale_channels(&gain);
    }
    Ok(out)
}

fn logistic(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft shadow mask: per pixel, the largest over channels of
/// `sigmoid((median_c - L_c) / alpha)`, medians over the receiver; 0 off it.
pub fn compute_shadow_gt(lighting: &ImageBuffer, m_r: &MaskImage, cfg: &ShadowGtConfig) -> Result<MaskImage> {
    lighting.ensure_mask_shape(m_r, "shadow ground truth")?;
    if !(cfg.alpha > 0.0) {
        return Err(CoreError::Invalid(format!("alpha must be positive, got {}", cfg.alpha)));
    }
    let median = lighting.channelwise_median(m_r)?;
    Ok(MaskImage::from_fn(lighting.width(), lighting.height(), |y, x| {
        if !m_r.is_on(y, x) {
            return 0.0;
        }
        (0..lighting.channels())
            .map(|c| logistic((median[c] - lighting.get(y, x, c)) / cfg.alpha))
            .fold(0.0, f32::max)
    }))
}

/// Divides both images by their joint per-channel maximum over `mask`.
/// Returns the applied scale (the reciprocal of that maximum).
fn normalize_pair_max(a: &ImageBuffer, b: &ImageBuffer, mask: &MaskImage, what: &str) -> Result<(ImageBuffer, ImageBuffer, Rgb32)> {
    a.ensure_same_shape(b, what)?;
    let ma = a.masked_max(mask).ok_or(CoreError::EmptyMask("extended receiver"))?;
    let mb = b.masked_max(mask).ok_or(CoreError::EmptyMask("extended receiver"))?;
    let mut max = [0.0f32; 3];
    for c in 0..3 {
        max[c] = ma[c].max(mb[c]);
        if !(max[c] > 0.0) {
            return Err(CoreError::Invalid(format!("{what}: channel {c} is zero on the receiver")));
        }
    }
    let div = |img: &ImageBuffer| {
        let mut out = img.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] /= max[c];
            }
        }
        out
    };
    Ok((div(a), div(b), [1.0 / max[0], 1.0 / max[1], 1.0 / max[2]]))
}

/// Scales `L` and `L'` so their joint maximum over `M'_r` is 1 per channel.
pub fn normalize_lighting(l_hat: &ImageBuffer, l_hat_prime: &ImageBuffer, m_r_prime: &MaskImage) -> Result<(ImageBuffer, ImageBuffer, Rgb32)> {
    normalize_pair_max(l_hat, l_hat_prime, m_r_prime, "lighting")
}

/// Same contract as [`normalize_lighting`], for the proxy renders.
pub fn normalize_proxy(p: &ImageBuffer, p_prime: &ImageBuffer, m_r_prime: &MaskImage) -> Result<(ImageBuffer, ImageBuffer, Rgb32)> {
    normalize_pair_max(p, p_prime, m_r_prime, "proxy")
}

/// Per-channel scale `0.5 / mean(I over M_r)`.
pub fn input_scale(i: &ImageBuffer, m_r: &MaskImage) -> Result<Rgb32> {
    let mean = i.masked_mean(m_r).ok_or(CoreError::EmptyMask("receiver"))?;
    let mut s = [0.0f32; 3];
    for c in 0..3 {
        if !(mean[c] > 0.0) {
            return Err(CoreError::Invalid(format!("input: channel {c} has zero mean on the receiver")));
        }
        s[c] = 0.5 / mean[c];
    }
    Ok(s)
}

/// Scales `I` and `I'` by the shared factor that makes `I`'s receiver mean 0.5.
pub fn normalize_input(i: &ImageBuffer, i_hat_prime: &ImageBuffer, m_r: &MaskImage) -> Result<(ImageBuffer, ImageBuffer, Rgb32)> {
    i.ensure_same_shape(i_hat_prime, "input pair")?;
    let s = input_scale(i, m_r)?;
    Ok((i.scale_channels(&s), i_hat_prime.scale_channels(&s), s))
}

/// Normalizes and composes a stored sample, optionally augmenting first.
pub fn prepare_sample(
    sample: &TrainingSample,
    augmentation: Option<(&mut dyn RngCore, &AugmentConfig)>,
    shadow: &ShadowGtConfig,
) -> Result<PreparedSample> {
    let augmented;
    let src = match augmentation {
        Some((rng, cfg)) => {
            augmented = augment(sample, rng, cfg)?;
            &augmented
        }
        None => sample,
    };
    let (l, l_prime, lighting_scale) = normalize_lighting(&src.l_hat, &src.l_hat_prime, &src.m_r_prime)?;
    let (p, p_prime, proxy_scale) = normalize_proxy(&src.p, &src.p_prime, &src.m_r_prime)?;
    let (i, i_hat_prime) = compose_images(&src.t_hat, &l, &l_prime, &src.m_r, &src.m_r_prime)?;
    let s_in = input_scale(&i, &src.m_r)?;
    let t = src.t_hat.scale_channels(&s_in);
    let s_hat = compute_shadow_gt(&l, &src.m_r, shadow)?;
    Ok(PreparedSample {
        scene_id: src.scene_id.clone(),
        i,
        i_hat_prime,
        t,
        l,
        l_prime,
        p,
        p_prime,
        m_o: src.m_o.clone(),
        m_r: src.m_r.clone(),
        m_r_prime: src.m_r_prime.clone(),
        s_hat,
        norm: NormalizationRecord {
            lighting_scale,
            proxy_scale,
            input_scale: s_in,
        },
    })
}

const STREAM_NOISE: u64 = 101;
const STREAM_PERTURB: u64 = 102;
const STREAM_RENDER: u64 = 103;

/// Renders every image of one scene and assembles the stored sample.
pub fn generate_sample(scene: &SceneSpec, scene_id: &str, cfg: &DatasetConfig) -> Result<TrainingSample> {
    let mut render_cfg = cfg.render.clone();
    render_cfg.seed = mix_seed(scene.seed ^ cfg.render.seed, STREAM_RENDER);
    if render_cfg.resolution == 0 {
        render_cfg.resolution = scene.camera.resolution;
    }
    let out = render_scene(scene, &render_cfg)?;
    let (m_o, m_r, m_r_prime) = compute_masks(&out.d, &out.d_prime, &out.d_r, cfg.depth_tolerance)?;
    if m_r.is_empty() {
        return Err(CoreError::EmptyMask("receiver"));
    }
    let mut camera = scene.camera.clone();
    camera.resolution = render_cfg.resolution;
    let mut noise_rng = stream_rng(scene.seed, STREAM_NOISE);
    let proxies = build_proxy_mesh(&out.d, &camera, &cfg.noise, &scene.plane, &m_o, &mut noise_rng)?;
    let mut perturb_rng = stream_rng(scene.seed, STREAM_PERTURB);
    let lighting = perturb_lighting(&scene.lighting, &mut perturb_rng, &cfg.perturb);
    let (p, p_prime) = render_proxy_pair(&proxies, &lighting, &camera, &render_cfg)?;

    let (l, l_prime, lighting_scale) = normalize_lighting(&out.l_hat, &out.l_hat_prime, &m_r_prime)?;
    let (_, _, proxy_scale) = normalize_proxy(&p, &p_prime, &m_r_prime)?;
    let s_hat = compute_shadow_gt(&l, &m_r, &cfg.shadow)?;
    let (i, _) = compose_images(&out.t_hat, &l, &l_prime, &m_r, &m_r_prime)?;
    let input_scale = input_scale(&i, &m_r)?;
    Ok(TrainingSample {
        scene_id: scene_id.to_string(),
        seed: scene.seed,
        t_hat: out.t_hat,
        l_hat: out.l_hat,
        l_hat_prime: out.l_hat_prime,
        p,
        p_prime,
        d: out.d,
        d_prime: out.d_prime,
        d_r: out.d_r,
        m_o,
        m_r,
        m_r_prime,
        s_hat,
        norm: NormalizationRecord {
            lighting_scale,
            proxy_scale,
            input_scale,
        },
    })
}

pub const PFM_FILES: [&str; 9] = [
    "t_hat", "l_hat", "l_hat_prime", "p", "p_prime", "d", "d_prime", "d_r", "s_hat",
];
pub const PNG_FILES: [&str; 3] = ["m_o", "m_r", "m_r_prime"];

/// Every image file stored per scene.
pub fn sample_files() -> Vec<String> {
    PFM_FILES
        .iter()
        .map(|n| format!("{n}.pfm"))
        .chain(PNG_FILES.iter().map(|n| format!("{n}.png")))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scene_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub normalization: NormalizationRecord,
    pub render: RenderMetadata,
    /// sha256 of every image file, keyed by file name.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub images: Vec<String>,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::format(&path, e.to_string()))
    }
}

impl TrainingSample {
    fn pfm(&self, name: &str) -> &ImageBuffer {
        match name {
            "t_hat" => &self.t_hat,
            "l_hat" => &self.l_hat,
            "l_hat_prime" => &self.l_hat_prime,
            "p" => &self.p,
            "p_prime" => &self.p_prime,
            "d" => &self.d,
            "d_prime" => &self.d_prime,
            _ => &self.d_r,
        }
    }

    fn mask(&self, name: &str) -> &MaskImage {
        match name {
            "m_o" => &self.m_o,
            "m_r" => &self.m_r,
            _ => &self.m_r_prime,
        }
    }
}

/// Writes one scene directory: the 12 images plus `sample.json`.
pub fn write_sample(dir: &Path, sample: &TrainingSample, config_hash: &str, render: &RenderMetadata) -> Result<()> {
    let scene_dir = dir.join(&sample.scene_id);
    std::fs::create_dir_all(&scene_dir).map_err(|e| CoreError::io(&scene_dir, e))?;
    let mut files = BTreeMap::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = scene_dir.join(&name);
        write_atomic(&path, &bytes).map_err(|e| CoreError::io(&path, e))?;
        files.insert(name, sha256_hex(&bytes));
        Ok(())
    };
    for name in PFM_FILES {
        let bytes = if name == "s_hat" {
            io::encode_pfm(&sample.s_hat.to_image())?
        } else {
            io::encode_pfm(sample.pfm(name))?
        };
        put(format!("{name}.pfm"), bytes)?;
    }
    for name in PNG_FILES {
        put(format!("{name}.png"), io::encode_png_mask(sample.mask(name))?)?;
    }
    let record = SampleRecord {
        scene_id: sample.scene_id.clone(),
        seed: sample.seed,
        config_hash: config_hash.to_string(),
        normalization: sample.norm.clone(),
        render: render.clone(),
        files,
    };
    let path = scene_dir.join("sample.json");
    write_atomic(&path, crate::util::canonical_json(&record)?.as_bytes()).map_err(|e| CoreError::io(&path, e))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    write_atomic(&path, crate::util::canonical_json(manifest)?.as_bytes()).map_err(|e| CoreError::io(&path, e))
}

/// Loads and hash-checks one stored scene.
pub fn load_sample(dir: &Path, scene_id: &str) -> Result<TrainingSample> {
    let scene_dir = dir.join(scene_id);
    let rec_path = scene_dir.join("sample.json");
    let text = std::fs::read_to_string(&rec_path).map_err(|e| CoreError::io(&rec_path, e))?;
    let record: SampleRecord = serde_json::from_str(&text).map_err(|e| CoreError::format(&rec_path, e.to_string()))?;
    let read = |name: &str| -> Result<(PathBuf, Vec<u8>)> {
        let path = scene_dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
        let expected = record
            .files
            .get(name)
            .ok_or_else(|| CoreError::format(&rec_path, format!("no hash recorded for {name}")))?;
        if &sha256_hex(&bytes) != expected {
            return Err(CoreError::format(&path, "sha256 mismatch"));
        }
        Ok((path, bytes))
    };
    let mut pfms: BTreeMap<&str, ImageBuffer> = BTreeMap::new();
    for name in PFM_FILES {
        let (path, bytes) = read(&format!("{name}.pfm"))?;
        let img = io::decode_pfm(&bytes, &path)?;
        let expected = if matches!(name, "d" | "d_prime" | "d_r" | "s_hat") { 1 } else { 3 };
        if img.channels() != expected {
            return Err(CoreError::format(&path, format!("expected {expected} channel(s), found {}", img.channels())));
        }
        pfms.insert(name, img);
    }
    let mut masks: BTreeMap<&str, MaskImage> = BTreeMap::new();
    for name in PNG_FILES {
        let (path, bytes) = read(&format!("{name}.png"))?;
        masks.insert(name, io::decode_png_mask(&bytes, &path)?);
    }
    let s_hat_path = scene_dir.join("s_hat.pfm");
    let s_hat = MaskImage::from_image(&pfms.remove("s_hat").expect("s_hat"))
        .map_err(|e| CoreError::format(&s_hat_path, e.to_string()))?;
    let mut take = |n: &str| pfms.remove(n).expect("loaded above");
    let sample = TrainingSample {
        scene_id: record.scene_id.clone(),
        seed: record.seed,
        t_hat: take("t_hat"),
        l_hat: take("l_hat"),
        l_hat_prime: take("l_hat_prime"),
        p: take("p"),
        p_prime: take("p_prime"),
        d: take("d"),
        d_prime: take("d_prime"),
        d_r: take("d_r"),
        m_o: masks.remove("m_o").expect("m_o"),
        m_r: masks.remove("m_r").expect("m_r"),
        m_r_prime: masks.remove("m_r_prime").expect("m_r_prime"),
        s_hat,
        norm: record.normalization,
    };
    for img in [&sample.l_hat, &sample.l_hat_prime, &sample.p, &sample.p_prime] {
        sample.t_hat.ensure_same_shape(img, scene_id)?;
    }
    Ok(sample)
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Generates `count` scenes with seeds `base_seed + i` into `dir`, in parallel,
/// and writes the manifest last.
pub fn build_dataset(
    dir: &Path,
    count: usize,
    base_seed: u64,
    scene_cfg: &SceneConfig,
    cfg: &DatasetConfig,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let hash = config_hash(&(scene_cfg, cfg));
    let entries: Vec<ManifestEntry> = (0..count)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let seed = base_seed.wrapping_add(i as u64);
            let id = scene_id(i);
            let scene = generate_scene(seed, scene_cfg)?;
            let sample = generate_sample(&scene, &id, cfg)?;
            let meta = RenderMetadata {
                seed: mix_seed(seed ^ cfg.render.seed, STREAM_RENDER),
                samples_per_pixel: cfg.render.samples_per_pixel,
                shadow_samples: cfg.render.shadow_samples,
                resolution: sample.t_hat.width(),
            };
            write_sample(dir, &sample, &hash, &meta)?;
            let scene_path = dir.join(&id).join("scene.json");
            write_atomic(&scene_path, scene.canonical_json().as_bytes()).map_err(|e| CoreError::io(&scene_path, e))?;
            log::info!("rendered {id} (seed {seed})");
            Ok(ManifestEntry { scene_id: id, seed })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        version: 1,
        config_hash: hash,
        images: sample_files(),
        scenes: entries,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn img(w: usize, h: usize, f: impl FnMut(usize, usize, usize) -> f32) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 3, f)
    }

    #[test]
    fn mask_example() {
        let d = ImageBuffer::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dp = ImageBuffer::from_vec(2, 2, 1, vec![1.0, 5.0, 3.0, 4.0]).unwrap();
        let (m_o, m_r, m_rp) = compute_masks(&d, &dp, &d, 1e-4).unwrap();
        assert_eq!(m_o.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(m_r.data(), &[1.0; 4]);
        assert_eq!(m_rp.data(), &[1.0; 4]);
        let inf = ImageBuffer::filled(2, 2, 1, f32::INFINITY);
        let (m_o, m_r, _) = compute_masks(&inf, &inf, &inf, 1e-4).unwrap();
        assert!(m_o.is_empty() && m_r.is_empty());
    }

    #[test]
    fn compose_degenerate_masks() {
        let t = img(3, 3, |y, x, c| 0.1 + (y + x + c) as f32 * 0.1);
        let l = img(3, 3, |y, x, c| 0.5 + (y * x + c) as f32 * 0.05);
        let (i, _) = compose_images(&t, &l, &l, &MaskImage::ones(3, 3), &MaskImage::ones(3, 3)).unwrap();
        assert_eq!(i, t.zip_map(&l, |a, b| a * b).unwrap());
        let (i, _) = compose_images(&t, &l, &l, &MaskImage::zeros(3, 3), &MaskImage::zeros(3, 3)).unwrap();
        assert_eq!(i, l);
    }

    #[test]
    fn compose_matches_scalar_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut r = || rng.random::<f32>();
        let t = img(4, 4, |_, _, _| r());
        let l = img(4, 4, |_, _, _| r() * 2.0);
        let lp = img(4, 4, |_, _, _| r() * 2.0);
        let mr = MaskImage::from_fn(4, 4, |y, x| ((y + x) % 2) as f32);
        let mrp = MaskImage::from_fn(4, 4, |y, x| ((y + x) % 2 == 1 || y == 0) as u8 as f32);
        let (i, ip) = compose_images(&t, &l, &lp, &mr, &mrp).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let want = if mr.get(y, x) == 1.0 { t.get(y, x, c) * l.get(y, x, c) } else { l.get(y, x, c) };
                    assert_eq!(i.get(y, x, c), want);
                    let want = if mrp.get(y, x) == 1.0 { t.get(y, x, c) * lp.get(y, x, c) } else { lp.get(y, x, c) };
                    assert_eq!(ip.get(y, x, c), want);
                }
            }
        }
    }

    #[test]
    fn shadow_gt_examples() {
        let cfg = ShadowGtConfig::default();
        let flat = ImageBuffer::filled(4, 4, 3, 0.7);
        let s = compute_shadow_gt(&flat, &MaskImage::ones(4, 4), &cfg).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));

        let vals = [1.0, 1.0, 0.9, 0.2];
        let l = ImageBuffer::from_fn(4, 1, 3, |_, x, _| vals[x]);
        let s = compute_shadow_gt(&l, &MaskImage::ones(4, 1), &cfg).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((s.get(0, 3) as f64 - sig(15.0)).abs() < 1e-6);
        assert!((s.get(0, 0) as f64 - sig(-1.0)).abs() < 1e-6);
        assert!((s.get(0, 0) - 0.269).abs() < 1e-3);

        let hard = ShadowGtConfig { alpha: 1e-6, ..cfg };
        let s = compute_shadow_gt(&l, &MaskImage::ones(4, 1), &hard).unwrap();
        for x in 0..4 {
            assert_eq!(s.get(0, x), (vals[x] < 0.95) as u8 as f32);
        }
        assert!(compute_shadow_gt(&l, &MaskImage::zeros(4, 1), &cfg).is_err());
    }

    #[test]
    fn shadow_gt_is_zero_off_receiver() {
        let l = img(5, 5, |y, x, c| (y * 5 + x + c) as f32 / 30.0);
        let m = MaskImage::from_fn(5, 5, |y, _| (y < 3) as u8 as f32);
        let s = compute_shadow_gt(&l, &m, &ShadowGtConfig::default()).unwrap();
        for y in 3..5 {
            for x in 0..5 {
                assert_eq!(s.get(y, x), 0.0);
            }
        }
    }

    #[test]
    fn normalization_examples() {
        let m = MaskImage::ones(2, 1);
        let l = ImageBuffer::from_vec(2, 1, 3, vec![2.0, 0.5, 1.0, 1.0, 0.25, 0.5]).unwrap();
        let (a, b, s) = normalize_lighting(&l, &l, &m).unwrap();
        assert_eq!(s, [0.5, 2.0, 1.0]);
        let (_, _, s2) = normalize_lighting(&a, &b, &m).unwrap();
        assert_eq!(s2, [1.0, 1.0, 1.0]);
        let zero = ImageBuffer::filled(2, 1, 3, 0.0);
        assert!(normalize_lighting(&zero, &zero, &m).is_err());

        let i = ImageBuffer::from_vec(1, 1, 3, vec![0.25, 0.5, 1.0]).unwrap();
        let (a, b, s) = normalize_input(&i, &i.map(|v| v * 3.0), &MaskImage::ones(1, 1)).unwrap();
        assert_eq!(s, [2.0, 1.0, 0.5]);
        assert_eq!(a.data(), &[0.5, 0.5, 0.5]);
        assert_eq!(b.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let c = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
            let back = hsv_to_rgb(rgb_to_hsv(c));
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-5, "{c:?} -> {back:?}");
            }
        }
        assert_eq!(rgb_to_hsv([1.0, 0.0, 0.0]), [0.0, 1.0, 1.0]);
        assert_eq!(hsv_to_rgb([1.0 / 3.0, 1.0, 1.0]), [0.0, 1.0, 0.0]);
    }
}
