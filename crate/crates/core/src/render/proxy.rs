//! Shadow and target proxies: a noisy mesh built from the depth map, and the
//! perturbed lighting it is rendered under.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{ImageBuffer, MaskImage};
use crate::render::geometry::{LocalShape, Object, World, V3};
use crate::render::mesh::{Bvh, TriangleMesh};
use crate::render::{render_world, Camera, Lights, RenderConfig, ShadeMode};
use crate::scene::{CameraSpec, LightingSpec, PlaneSpec};
use crate::util::median_in_place;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthNoiseConfig {
    /// Depth noise standard deviation is `sigma0 + sigma1 * z^2`.
    pub sigma0: f64,
    pub sigma1: f64,
    /// Triangles whose vertex depths spread more than this multiple of the
    /// median adjacent-pixel depth difference are dropped.
    pub discontinuity_factor: f64,
    /// Height below which a clean depth sample counts as ground.
    pub ground_tolerance: f64,
}

impl Default for DepthNoiseConfig {
    fn default() -> Self {
        DepthNoiseConfig {
            sigma0: 0.002,
            sigma1: 0.002,
            discontinuity_factor: 5.0,
            ground_tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProxyMeshes {
    pub full: TriangleMesh,
    pub removed: TriangleMesh,
    /// Fitted ground plane `n . p = offset` with unit `n` pointing up.
    pub plane_normal: V3,
    pub plane_offset: f64,
}

/// Least-squares plane through points: `(unit normal with n.y >= 0, offset)`.
pub fn fit_plane(points: &[V3]) -> Result<(V3, f64)> {
    if points.len() < 3 {
        return Err(CoreError::Degenerate(format!("plane fit needs 3 points, got {}", points.len())));
    }
    let c = points.iter().sum::<V3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (i, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("three eigenvalues");
    let mut n: V3 = eig.eigenvectors.column(i).into();
    if n.y < 0.0 {
        n = -n;
    }
    n.normalize_mut();
    Ok((n, n.dot(&c)))
}

/// Builds the full and object-removed proxy meshes from the unedited depth map.
///
/// Every pixel with finite depth becomes a vertex at its noisy depth. Pixels
/// whose clean depth lies on `y = 0` are ground; a plane fitted to their noisy
/// positions replaces them, and a quad of that plane spanning the plane extent
/// is added so the ground continues behind the removed object.
pub fn build_proxy_mesh(
    depth: &ImageBuffer,
    camera: &CameraSpec,
    noise: &DepthNoiseConfig,
    plane: &PlaneSpec,
    m_o: &MaskImage,
    rng: &mut dyn RngCore,
) -> Result<ProxyMeshes> {
    if depth.channels() != 1 {
        return Err(CoreError::Shape(format!("depth has {} channels", depth.channels())));
    }
    depth.ensure_mask_shape(m_o, "proxy mesh object mask")?;
    let (w, h) = (depth.width(), depth.height());
    let cam = Camera::new(camera, w, h)?;

    let mut points: Vec<Option<V3>> = vec![None; w * h];
    let mut ground = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let z = depth.get(y, x, 0) as f64;
            let n: f64 = StandardNormal.sample(rng);
            if !z.is_finite() || z <= 0.0 {
                continue;
            }
            let ray = cam.center_ray(x, y);
            ground[y * w + x] = ray.at(z).y.abs() < noise.ground_tolerance;
            let sigma = noise.sigma0 + noise.sigma1 * z * z;
            points[y * w + x] = Some(ray.at((z + sigma * n).max(1e-6)));
        }
    }

    let ground_pts: Vec<V3> = (0..w * h).filter(|&i| ground[i]).filter_map(|i| points[i]).collect();
    let (normal, offset) = fit_plane(&ground_pts)?;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !ground[i] || points[i].is_none() {
                continue;
            }
            let ray = cam.center_ray(x, y);
            let denom = normal.dot(&ray.dir);
            if denom.abs() > 1e-12 {
                let t = (offset - normal.dot(&ray.origin)) / denom;
                if t > 0.0 {
                    points[i] = Some(ray.at(t));
                }
            }
        }
    }

    let dist: Vec<f64> = points
        .iter()
        .map(|p| p.map_or(f64::NAN, |p| (p - cam.eye).norm()))
        .collect();
    let mut diffs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let a = dist[y * w + x];
            if x + 1 < w && a.is_finite() && dist[y * w + x + 1].is_finite() {
                diffs.push((a - dist[y * w + x + 1]).abs() as f32);
            }
            if y + 1 < h && a.is_finite() && dist[(y + 1) * w + x].is_finite() {
                diffs.push((a - dist[(y + 1) * w + x]).abs() as f32);
            }
        }
    }
    let tau = noise.discontinuity_factor * median_in_place(&mut diffs).unwrap_or(0.0) as f64;
    let tau = tau.max(1e-9);

    let mut vertices = Vec::new();
    let mut index = vec![u32::MAX; w * h];
    for (i, p) in points.iter().enumerate() {
        if let Some(p) = p {
            index[i] = vertices.len() as u32;
            vertices.push(*p);
        }
    }
    let mut full = Vec::new();
    let mut removed = Vec::new();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let (a, b, c, d) = (y * w + x, y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1);
            for tri in [[a, c, b], [b, c, d]] {
                if tri.iter().any(|&i| index[i] == u32::MAX) {
                    continue;
                }
                let zs = tri.map(|i| dist[i]);
                let spread = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - zs.iter().cloned().fold(f64::INFINITY, f64::min);
                if spread > tau {
                    continue;
                }
                let t = tri.map(|i| index[i]);
                full.push(t);
                if !tri.iter().any(|&i| m_o.is_on(i / w, i % w)) {
                    removed.push(t);
                }
            }
        }
    }

    // Fitted-plane quad over the plane extent, centered under the origin.
    let center = normal * offset;
    let u = (V3::x() - normal * normal.x).normalize();
    let v = normal.cross(&u);
    let e = plane.half_extent;
    let base = vertices.len() as u32;
    for (su, sv) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
        vertices.push(center + u * (su * e) + v * (sv * e));
    }
    for t in [[base, base + 1, base + 2], [base, base + 2, base + 3]] {
        full.push(t);
        removed.push(t);
    }

    Ok(ProxyMeshes {
        full: compact_white_mesh(&vertices, full)?,
        removed: compact_white_mesh(&vertices, removed)?,
        plane_normal: normal,
        plane_offset: offset,
    })
}

/// White mesh over the vertices referenced by `triangles`.
fn compact_white_mesh(vertices: &[V3], triangles: Vec<[u32; 3]>) -> Result<TriangleMesh> {
    let mut remap = vec![u32::MAX; vertices.len()];
    let mut kept = Vec::new();
    let tris: Vec<[u32; 3]> = triangles
        .into_iter()
        .map(|t| {
            t.map(|i| {
                if remap[i as usize] == u32::MAX {
                    remap[i as usize] = kept.len() as u32;
                    kept.push(vertices[i as usize]);
                }
                remap[i as usize]
            })
        })
        .collect();
    let n = tris.len();
    TriangleMesh::new(kept, tris, vec![V3::repeat(1.0); n])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Per-axis position jitter as a fraction of the light's distance from the origin.
    pub pos_sigma: f64,
    pub intensity_range: (f64, f64),
    /// Half width of the independent per-channel color factor around 1.
    pub color_jitter: f64,
    pub gamma_range: (f64, f64),
    pub yaw_max_deg: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            pos_sigma: 0.1,
            intensity_range: (0.7, 1.4),
            color_jitter: 0.1,
            gamma_range: (0.8, 1.25),
            yaw_max_deg: 10.0,
        }
    }
}

impl PerturbConfig {
    pub fn none() -> Self {
        PerturbConfig {
            pos_sigma: 0.0,
            intensity_range: (1.0, 1.0),
            color_jitter: 0.0,
            gamma_range: (1.0, 1.0),
            yaw_max_deg: 0.0,
        }
    }
}

fn uniform(rng: &mut dyn RngCore, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    if hi > lo {
        lo + (hi - lo) * u
    } else {
        lo
    }
}

/// Jitters the point light and applies a gamma and small rotation to the environment.
/// Always draws the same number of random values.
pub fn perturb_lighting(lighting: &LightingSpec, rng: &mut dyn RngCore, cfg: &PerturbConfig) -> LightingSpec {
    let mut out = lighting.clone();
    let p = V3::from(lighting.point_light.position);
    let sigma = cfg.pos_sigma * p.norm();
    let mut q = p;
    for k in 0..3 {
        let n: f64 = StandardNormal.sample(rng);
        q[k] += sigma * n;
    }
    if q.y <= 0.0 {
        q.y = if q.y < 0.0 { -q.y } else { p.y };
    }
    out.point_light.position = q.into();
    let scale = uniform(rng, cfg.intensity_range.0, cfg.intensity_range.1);
    for c in 0..3 {
        let color = uniform(rng, 1.0 - cfg.color_jitter, 1.0 + cfg.color_jitter);
        out.point_light.intensity[c] = lighting.point_light.intensity[c] * scale * color;
    }
    out.env_gamma = lighting.env_gamma * uniform(rng, cfg.gamma_range.0, cfg.gamma_range.1);
    let yaw_max = cfg.yaw_max_deg * PI / 180.0;
    out.env_yaw = lighting.env_yaw + uniform(rng, -yaw_max, yaw_max);
    out
}

fn mesh_world(mesh: &TriangleMesh) -> World {
    World {
        plane: None,
        objects: vec![Object::new(
            LocalShape::Mesh(Arc::new(Bvh::build(mesh))),
            0.0,
            1.0,
            V3::zeros(),
            V3::repeat(1.0),
        )],
    }
}

/// Renders the shadow proxy `P` (full mesh) and target proxy `P'` (object removed),
/// all surfaces white.
pub fn render_proxy_pair(
    proxies: &ProxyMeshes,
    lighting: &LightingSpec,
    camera: &CameraSpec,
    cfg: &RenderConfig,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let n = if cfg.resolution > 0 { cfg.resolution } else { camera.resolution };
    let cam = Camera::new(camera, n, n)?;
    let lights = Lights::from_spec(lighting)?;
    let p = render_world(&mesh_world(&proxies.full), &lights, &cam, cfg, ShadeMode::Radiance)?;
    let p_prime = render_world(&mesh_world(&proxies.removed), &lights, &cam, cfg, ShadeMode::Radiance)?;
    Ok((p, p_prime))
}
