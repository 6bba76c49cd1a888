//! Deterministic direct-lighting ray tracer.
//!
//! Surfaces are Lambertian. Each primary sample gathers environment light with
//! one cosine-weighted and one importance-sampled direction per shadow sample,
//! combined with the balance heuristic (cosine sampling only under a uniform
//! sky), and adds the point light through a single shadow ray. There is no
//! indirect bounce.
//!
//! Every primary sample consumes a fixed number of random values whatever the
//! ray hits, and each 16x16 tile owns an RNG stream derived from
//! `(seed, tile)`. Two renders of the same scene with one extra occluder
//! therefore trace identical rays, and parallel renders are bit-identical to
//! serial ones.

pub mod envmap;
pub mod geometry;
pub mod mesh;
pub mod proxy;

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::ImageBuffer;
use crate::scene::{CameraSpec, LightingSpec, PointLight, SceneSpec};
use crate::util::stream_rng;

pub use envmap::EnvironmentMap;
pub use geometry::{PlaneAlbedo, Ray, World, V3};
pub use mesh::{Bvh, TriangleMesh};
pub use proxy::{build_proxy_mesh, perturb_lighting, render_proxy_pair, DepthNoiseConfig, PerturbConfig, ProxyMeshes};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Primary samples per pixel (sub-pixel positions).
    pub samples_per_pixel: usize,
    /// Environment shadow samples per pixel, spread evenly over the primary samples.
    pub shadow_samples: usize,
    pub seed: u64,
    /// Output width and height; 0 uses the camera's resolution.
    pub resolution: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_pixel: 64,
            shadow_samples: 64,
            seed: 0,
            resolution: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_pixel == 0 || self.shadow_samples == 0 {
            return Err(CoreError::Invalid("sample counts must be at least 1".into()));
        }
        Ok(())
    }

    fn size(&self, camera: &CameraSpec) -> usize {
        if self.resolution > 0 {
            self.resolution
        } else {
            camera.resolution
        }
    }

    fn shadow_per_primary(&self) -> usize {
        self.shadow_samples.div_ceil(self.samples_per_pixel).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadianceVariant {
    /// Plane albedo with every object removed.
    TextureOnly,
    /// Full scene with a white plane.
    WhitePlaneFull,
    /// White plane with the removable object taken out.
    WhitePlaneRemoved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthVariant {
    Full,
    Removed,
    PlaneOnly,
}

/// Pinhole camera with +y as the preferred up direction.
#[derive(Clone, Debug)]
pub struct Camera {
    pub eye: V3,
    forward: V3,
    right: V3,
    up: V3,
    tan_half: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(spec: &CameraSpec, width: usize, height: usize) -> Result<Self> {
        let eye = V3::from(spec.eye);
        let fwd = V3::from(spec.look_at) - eye;
        if fwd.norm() == 0.0 || !(spec.fov > 0.0 && spec.fov < PI) || width == 0 || height == 0 {
            return Err(CoreError::Invalid(format!("degenerate camera {spec:?}")));
        }
        let forward = fwd.normalize();
        // Looking straight down or up: fall back to -z as the up hint.
        let hint = if forward.y.abs() > 0.999 { -V3::z() } else { V3::y() };
        let right = forward.cross(&hint).normalize();
        let up = right.cross(&forward);
        Ok(Camera {
            eye,
            forward,
            right,
            up,
            tan_half: (spec.fov / 2.0).tan(),
            width,
            height,
        })
    }

    /// Unit-direction ray through continuous image coordinates (`x` right, `y` down).
    pub fn ray(&self, x: f64, y: f64) -> Ray {
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * x / self.width as f64 - 1.0) * self.tan_half * aspect;
        let sy = (1.0 - 2.0 * y / self.height as f64) * self.tan_half;
        Ray::new(self.eye, (self.forward + self.right * sx + self.up * sy).normalize())
    }

    pub fn center_ray(&self, px: usize, py: usize) -> Ray {
        self.ray(px as f64 + 0.5, py as f64 + 0.5)
    }
}

/// Light sources of a render: an environment map and an optional point light.
#[derive(Clone, Debug)]
pub struct Lights {
    pub env: Arc<EnvironmentMap>,
    pub point: Option<PointLight>,
}

impl Lights {
    pub fn from_spec(lighting: &LightingSpec) -> Result<Self> {
        let env = EnvironmentMap::from_source(&lighting.envmap, lighting.env_yaw, lighting.env_gamma)?;
        Ok(Lights {
            env: Arc::new(env),
            point: Some(lighting.point_light.clone()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShadeMode {
    Radiance,
    /// Albedo of the first hit, 1 where nothing is hit.
    Albedo,
}

const TILE: usize = 16;

fn onb(n: &V3) -> (V3, V3) {
    // Duff et al. branchless basis.
    let sign = 1f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    (
        V3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x),
        V3::new(b, sign + n.y * n.y * a, -n.y),
    )
}

/// Multiplier coprime to `n` used to decorrelate stratum orders.
fn coprime_stride(n: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let mut a = ((n as f64 * 0.618_034) as usize).max(1);
    while gcd(a, n) != 1 {
        a += 1;
    }
    a
}

/// Jittered 2D stratum `i` of `n` when `n` is a perfect square, plain uniforms otherwise.
fn stratified(i: usize, n: usize, stride: usize, r: (f64, f64)) -> (f64, f64) {
    let m = (n as f64).sqrt().round() as usize;
    if m * m != n || n == 1 {
        return r;
    }
    let j = (i * stride) % n;
    (((j % m) as f64 + r.0) / m as f64, ((j / m) as f64 + r.1) / m as f64)
}

/// Direct-lighting radiance leaving a hit point toward the camera.
/// `dirs` holds `(cosine u1, cosine u2, env u1, env u2)` per shadow sample.
fn shade(world: &World, lights: &Lights, p: &V3, n: &V3, albedo: &V3, dirs: &[(f64, f64, f64, f64)]) -> V3 {
    let eps = 1e-6 * (1.0 + p.abs().max());
    let origin = p + n * eps;
    let (t, b) = onb(n);
    let env = &lights.env;
    // Cosine sampling alone has zero variance under a uniform sky.
    let use_env = env.can_sample() && !env.is_uniform();
    let pdf_env = |w: &V3| if use_env { env.pdf(w) } else { 0.0 };
    let mut sum = V3::zeros();
    for &(u1, u2, e1, e2) in dirs {
        // Cosine-weighted direction.
        let r = u1.sqrt();
        let phi = TAU * u2;
        let cos_c = (1.0 - u1).max(0.0).sqrt();
        let wc = t * (r * phi.cos()) + b * (r * phi.sin()) + n * cos_c;
        if cos_c > 0.0 {
            let le = env.radiance(&wc);
            if le != V3::zeros() {
                let denom = cos_c / PI + pdf_env(&wc);
                if !world.occluded(&Ray::new(origin, wc), 0.0, f64::INFINITY) {
                    sum += le * (cos_c / denom);
                }
            }
        }
        // Environment importance sample.
        if let Some((we, pdf_e)) = env.sample(e1, e2).filter(|_| use_env) {
            let cos_e = we.dot(n);
            if cos_e > 0.0 {
                let le = env.radiance(&we);
                let denom = cos_e / PI + pdf_e;
                if !world.occluded(&Ray::new(origin, we), 0.0, f64::INFINITY) {
                    sum += le * (cos_e / denom);
                }
            }
        }
    }
    let mut radiance = sum / dirs.len() as f64;
    if let Some(pl) = &lights.point {
        let intensity = V3::from(pl.intensity);
        if intensity != V3::zeros() {
            let to = V3::from(pl.position) - origin;
            let dist = to.norm();
            let wl = to / dist;
            let cos_l = wl.dot(n);
            if cos_l > 0.0 && !world.occluded(&Ray::new(origin, wl), 0.0, dist) {
                radiance += intensity * (cos_l / (dist * dist));
            }
        }
    }
    radiance.component_mul(albedo) / PI
}

/// Renders `world` from `camera` into an RGB image.
pub fn render_world(world: &World, lights: &Lights, camera: &Camera, cfg: &RenderConfig, mode: ShadeMode) -> Result<ImageBuffer> {
    cfg.validate()?;
    let (w, h) = (camera.width, camera.height);
    let spp = cfg.samples_per_pixel;
    let k = cfg.shadow_per_primary();
    let dir_count = spp * k;
    let pixel_stride = coprime_stride(spp);
    let dir_stride = coprime_stride(dir_count);
    let (tx, ty) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let tiles: Vec<(usize, Vec<f32>)> = (0..tx * ty)
        .into_par_iter()
        .map(|tile| {
            let mut rng = stream_rng(cfg.seed, tile as u64);
            let (x0, y0) = ((tile % tx) * TILE, (tile / tx) * TILE);
            let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
            let mut dirs = vec![(0.0, 0.0, 0.0, 0.0); k];
            for py in y0..y1 {
                for px in x0..x1 {
                    let mut acc = V3::zeros();
                    for s in 0..spp {
                        let (jx, jy) = stratified(s, spp, pixel_stride, (rng.random(), rng.random()));
                        for (l, d) in dirs.iter_mut().enumerate() {
                            let (c1, c2) = stratified(s * k + l, dir_count, dir_stride, (rng.random(), rng.random()));
                            let (e1, e2) = stratified(s * k + l, dir_count, 1, (rng.random(), rng.random()));
                            *d = (c1, c2, e1, e2);
                        }
                        let ray = camera.ray(px as f64 + jx, py as f64 + jy);
                        let hit = world.intersect(&ray, 0.0, f64::INFINITY);
                        acc += match (mode, hit) {
                            (ShadeMode::Albedo, Some(hit)) => hit.albedo,
                            (ShadeMode::Albedo, None) => V3::repeat(1.0),
                            (ShadeMode::Radiance, None) => lights.env.radiance(&ray.dir),
                            (ShadeMode::Radiance, Some(hit)) => {
                                let p = ray.at(hit.t);
                                shade(world, lights, &p, &hit.normal, &hit.albedo, &dirs)
                            }
                        };
                    }
                    let v = acc / spp as f64;
                    out.extend_from_slice(&[v.x as f32, v.y as f32, v.z as f32]);
                }
            }
            (tile, out)
        })
        .collect();
    let mut img = ImageBuffer::new(w, h, 3);
    for (tile, data) in tiles {
        let (x0, y0) = ((tile % tx) * TILE, (tile / tx) * TILE);
        let x1 = (x0 + TILE).min(w);
        let row = (x1 - x0) * 3;
        for (r, chunk) in data.chunks(row).enumerate() {
            let start = img.index(y0 + r, x0, 0);
            img.data_mut()[start..start + row].copy_from_slice(chunk);
        }
    }
    Ok(img)
}

/// Renders one of the three radiance images of a scene.
pub fn render_radiance(scene: &SceneSpec, variant: RadianceVariant, cfg: &RenderConfig) -> Result<ImageBuffer> {
    let n = cfg.size(&scene.camera);
    let camera = Camera::new(&scene.camera, n, n)?;
    match variant {
        RadianceVariant::TextureOnly => {
            let tex = scene.plane.texture.rasterize(texture_resolution(scene))?;
            let world = World::from_scene(scene, PlaneAlbedo::Texture(Arc::new(tex)), false, false)?;
            let lights = Lights {
                env: Arc::new(EnvironmentMap::constant([0.0; 3])),
                point: None,
            };
            render_world(&world, &lights, &camera, cfg, ShadeMode::Albedo)
        }
        RadianceVariant::WhitePlaneFull | RadianceVariant::WhitePlaneRemoved => {
            let keep = variant == RadianceVariant::WhitePlaneFull;
            let world = World::from_scene(scene, PlaneAlbedo::Constant(V3::repeat(1.0)), true, keep)?;
            let lights = Lights::from_spec(&scene.lighting)?;
            render_world(&world, &lights, &camera, cfg, ShadeMode::Radiance)
        }
    }
}

fn texture_resolution(scene: &SceneSpec) -> usize {
    // Enough texels that each one covers well under a pixel at the camera's resolution.
    (scene.camera.resolution * 2).max(32)
}

/// Primary-ray hit distances; `+inf` where nothing is hit.
pub fn render_depth(scene: &SceneSpec, variant: DepthVariant, camera: &Camera) -> Result<ImageBuffer> {
    let (objects, removable) = match variant {
        DepthVariant::Full => (true, true),
        DepthVariant::Removed => (true, false),
        DepthVariant::PlaneOnly => (false, false),
    };
    let world = World::from_scene(scene, PlaneAlbedo::Constant(V3::repeat(1.0)), objects, removable)?;
    Ok(depth_of_world(&world, camera))
}

pub fn depth_of_world(world: &World, camera: &Camera) -> ImageBuffer {
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = camera.center_ray(x, y);
                    world.intersect(&ray, 0.0, f64::INFINITY).map_or(f32::INFINITY, |hit| hit.t as f32)
                })
                .collect()
        })
        .collect();
    ImageBuffer::from_vec(w, h, 1, rows.concat()).expect("depth buffer size")
}

/// The radiance and depth renders of one scene.
#[derive(Clone, Debug)]
pub struct RenderOutputs {
    pub t_hat: ImageBuffer,
    pub l_hat: ImageBuffer,
    pub l_hat_prime: ImageBuffer,
    pub d: ImageBuffer,
    pub d_prime: ImageBuffer,
    pub d_r: ImageBuffer,
}

pub fn render_scene(scene: &SceneSpec, cfg: &RenderConfig) -> Result<RenderOutputs> {
    let n = cfg.size(&scene.camera);
    let camera = Camera::new(&scene.camera, n, n)?;
    Ok(RenderOutputs {
        t_hat: render_radiance(scene, RadianceVariant::TextureOnly, cfg)?,
        l_hat: render_radiance(scene, RadianceVariant::WhitePlaneFull, cfg)?,
        l_hat_prime: render_radiance(scene, RadianceVariant::WhitePlaneRemoved, cfg)?,
        d: render_depth(scene, DepthVariant::Full, &camera)?,
        d_prime: render_depth(scene, DepthVariant::Removed, &camera)?,
        d_r: render_depth(scene, DepthVariant::PlaneOnly, &camera)?,
    })
}

/// Sidecar metadata stored next to renders. Wall-clock timings are left out
/// so repeated renders produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderMetadata {
    pub seed: u64,
    pub samples_per_pixel: usize,
    pub shadow_samples: usize,
    pub resolution: usize,
}
