//! Seeded procedural scene generation.
//!
//! A scene is a textured square ground plane at `y = 0` (world y is up), a
//! removable object at the origin surrounded by a ring of occluders, an
//! environment map plus one point light, and a camera on an upper hemisphere.
//! Generation is a pure function of `(seed, SceneConfig)`.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::ImageBuffer;
use crate::render::envmap::EnvironmentMap;
use crate::render::mesh::TriangleMesh;
use crate::util::stream_rng;

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Half side length of the square ground plane; every length below is in these units.
    pub plane_half_extent: f64,
    /// Minimum free border between object footprints and the plane edge.
    pub shadow_margin: f64,
    /// Inclusive range of object counts, central object included.
    pub object_count: (usize, usize),
    /// Footprint half-size range of the central object.
    pub central_size: (f64, f64),
    /// Footprint half-size range of the ring objects.
    pub ring_size: (f64, f64),
    /// Distance range of ring objects from the plane center.
    pub ring_radius: (f64, f64),
    pub placement_retries: usize,
    pub max_shrinks: usize,
    /// Directory of `.obj` meshes mixed in with procedural primitives.
    pub mesh_dir: Option<PathBuf>,
    pub mesh_probability: f64,
    pub camera: CameraConfig,
    pub lighting: LightingConfig,
    pub texture: TextureConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            plane_half_extent: 1.0,
            shadow_margin: 0.1,
            object_count: (6, 7),
            central_size: (0.16, 0.26),
            ring_size: (0.08, 0.16),
            ring_radius: (0.35, 0.75),
            placement_retries: 100,
            max_shrinks: 40,
            mesh_dir: None,
            mesh_probability: 0.5,
            camera: CameraConfig::default(),
            lighting: LightingConfig::default(),
            texture: TextureConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    /// Hemisphere radius as a multiple of the plane half extent.
    pub radius: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Vertical field of view.
    pub fov_deg: f64,
    pub resolution: usize,
    /// Half width of the uniform cube the eye is jittered in (orientation kept).
    pub pos_jitter: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            radius: 3.0,
            elevation_min_deg: 15.0,
            elevation_max_deg: 70.0,
            fov_deg: 36.0,
            resolution: 64,
            pos_jitter: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightingConfig {
    /// Point light distance range from the plane center, in plane half extents.
    pub light_distance: (f64, f64),
    /// Minimum elevation of the point light above the plane.
    pub light_min_elevation_deg: f64,
    /// Directory of equirectangular `.pfm` environment maps.
    pub envmap_dir: Option<PathBuf>,
    pub procedural_sky: bool,
    /// Height in texels of rasterized procedural skies (width is twice this).
    pub env_resolution: usize,
}

impl Default for LightingConfig {
    fn default() -> Self {
        LightingConfig {
            light_distance: (1.5, 4.0),
            light_min_elevation_deg: 10.0,
            envmap_dir: None,
            procedural_sky: true,
            env_resolution: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureConfig {
    pub resolution: usize,
    /// Directory of RGB `.pfm` textures mixed in with the procedural families.
    pub texture_dir: Option<PathBuf>,
    pub file_probability: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            resolution: 128,
            texture_dir: None,
            file_probability: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub plane: PlaneSpec,
    /// Index 0 is the central object, the removal target.
    pub objects: Vec<ObjectPlacement>,
    pub lighting: LightingSpec,
    pub camera: CameraSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub half_extent: f64,
    pub texture: TextureSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlacement {
    pub shape: Shape,
    pub scale: f64,
    pub yaw: f64,
    /// `(x, z)` on the plane.
    pub position: [f64; 2],
    pub albedo: Rgb,
    pub removable: bool,
}

/// Primitive in object-local units: centered on the vertical axis, resting on `y = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
    /// Horizontal infinitely thin disk floating at `height`; never sampled by the generator.
    Disk { radius: f64, height: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub primitive: Primitive,
    pub offset: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Primitive { primitive: Primitive },
    Composite { parts: Vec<Part> },
    Mesh { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingSpec {
    pub envmap: EnvSource,
    pub env_yaw: f64,
    /// Texels are raised to this power before use.
    pub env_gamma: f64,
    pub point_light: PointLight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: [f64; 3],
    pub intensity: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSource {
    Procedural { sky: SkyParams, resolution: usize },
    File { path: PathBuf },
    Constant { radiance: Rgb },
}

/// Two-band sky gradient plus Gaussian radiance blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkyParams {
    pub zenith: Rgb,
    pub horizon: Rgb,
    pub ground: Rgb,
    pub blobs: Vec<SkyBlob>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkyBlob {
    pub elevation: f64,
    pub azimuth: f64,
    /// Angular standard deviation in radians.
    pub width: f64,
    pub radiance: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
    /// Vertical field of view in radians.
    pub fov: f64,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TextureSpec {
    Flat { color: Rgb },
    Checker { colors: [Rgb; 2], tiles: u32 },
    Stripes { colors: [Rgb; 2], tiles: u32, vertical: bool },
    Noise { base: Rgb, tint: Rgb, period: u32, octaves: u32, seed: u64 },
    Voronoi { palette: Vec<Rgb>, cells: u32, seed: u64 },
    File { path: PathBuf },
}

/// Axis-aligned footprint rectangle in plane coordinates `(x, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Footprint {
    pub fn overlaps(&self, other: &Footprint) -> bool {
        self.min[0] < other.max[0]
            && other.min[0] < self.max[0]
            && self.min[1] < other.max[1]
            && other.min[1] < self.max[1]
    }

    pub fn max_abs(&self) -> f64 {
        self.min
            .iter()
            .chain(self.max.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl Primitive {
    /// Local-frame bounds `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Primitive::Box { half_extents: h } => ([-h[0], 0.0, -h[2]], [h[0], 2.0 * h[1], h[2]]),
            Primitive::Cylinder { radius, height } => ([-radius, 0.0, -radius], [radius, height, radius]),
            Primitive::Sphere { radius } => ([-radius, 0.0, -radius], [radius, 2.0 * radius, radius]),
            Primitive::Disk { radius, height } => ([-radius, height, -radius], [radius, height, radius]),
        }
    }
}

impl Shape {
    /// Local-frame bounds before scaling.
    pub fn local_bounds(&self) -> Result<([f64; 3], [f64; 3])> {
        match self {
            Shape::Primitive { primitive } => Ok(primitive.bounds()),
            Shape::Composite { parts } => {
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for part in parts {
                    let (a, b) = part.primitive.bounds();
                    for k in 0..3 {
                        lo[k] = lo[k].min(a[k] + part.offset[k]);
                        hi[k] = hi[k].max(b[k] + part.offset[k]);
                    }
                }
                Ok((lo, hi))
            }
            Shape::Mesh { path } => {
                let mesh = TriangleMesh::load_obj_normalized(path)?;
                Ok(mesh.bounds())
            }
        }
    }
}

impl ObjectPlacement {
    /// World-space footprint of the yawed, scaled shape.
    pub fn footprint(&self) -> Result<Footprint> {
        let (lo, hi) = self.shape.local_bounds()?;
        let (s, c) = self.yaw.sin_cos();
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for &lx in &[lo[0], hi[0]] {
            for &lz in &[lo[2], hi[2]] {
                let (x, z) = (lx * self.scale, lz * self.scale);
                // Rotation about +y: x' = c x + s z, z' = -s x + c z.
                let wx = c * x + s * z + self.position[0];
                let wz = -s * x + c * z + self.position[1];
                min = [min[0].min(wx), min[1].min(wz)];
                max = [max[0].max(wx), max[1].max(wz)];
            }
        }
        Ok(Footprint { min, max })
    }

    /// Lowest point of the object's local bounds, in world units.
    pub fn base_height(&self) -> Result<f64> {
        Ok(self.shape.local_bounds()?.0[1] * self.scale)
    }
}

impl SceneSpec {
    pub fn canonical_json(&self) -> String {
        crate::util::canonical_json(self).expect("scene serializes")
    }

    pub fn removable_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.removable)
    }

    /// Checks the geometric invariants of a generated scene.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| CoreError::Infeasible {
            seed: self.seed,
            reason,
        };
        if self.removable_index() != Some(0) {
            return Err(fail("object 0 must be the only removable object".into()));
        }
        let prints: Vec<Footprint> = self
            .objects
            .iter()
            .map(ObjectPlacement::footprint)
            .collect::<Result<_>>()?;
        for (i, a) in prints.iter().enumerate() {
            for (j, b) in prints.iter().enumerate().skip(i + 1) {
                if a.overlaps(b) {
                    return Err(fail(format!("objects {i} and {j} overlap")));
                }
            }
            if a.max_abs() > self.plane.half_extent {
                return Err(fail(format!("object {i} leaves the plane")));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.scale <= 0.0 || !(0.0..TAU).contains(&o.yaw) {
                return Err(fail(format!("object {i} has scale {} yaw {}", o.scale, o.yaw)));
            }
            if o.base_height()?.abs() > 1e-12 {
                return Err(fail(format!("object {i} does not rest on the plane")));
            }
        }
        if self.lighting.point_light.position[1] <= 0.0 {
            return Err(fail("point light below the plane".into()));
        }
        Ok(())
    }
}

const STREAM_OBJECTS: u64 = 1;
const STREAM_CAMERA: u64 = 2;
const STREAM_LIGHTING: u64 = 3;
const STREAM_TEXTURE: u64 = 4;
const STREAM_SKY: u64 = 5;

/// Generates a complete scene description for `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSpec> {
    validate_config(cfg)?;
    let objects = place_objects(seed, cfg)?;

    let mut sky_rng = stream_rng(seed, STREAM_SKY);
    let envmap = sample_env_source(&mut sky_rng, &cfg.lighting)?;
    let env = EnvironmentMap::from_source(&envmap, 0.0, 1.0)?;
    let peak = env.peak();
    let mut light_rng = stream_rng(seed, STREAM_LIGHTING);
    let mut lighting = sample_lighting(&mut light_rng, &cfg.lighting, cfg.plane_half_extent, peak);
    lighting.envmap = envmap;

    let mut cam_rng = stream_rng(seed, STREAM_CAMERA);
    let camera = sample_camera(&mut cam_rng, &cfg.camera, cfg.plane_half_extent);

    let mut tex_rng = stream_rng(seed, STREAM_TEXTURE);
    let texture = sample_texture_spec(&mut tex_rng, &cfg.texture)?;

    let scene = SceneSpec {
        seed,
        plane: PlaneSpec {
            half_extent: cfg.plane_half_extent,
            texture,
        },
        objects,
        lighting,
        camera,
    };
    scene.validate()?;
    Ok(scene)
}

fn validate_config(cfg: &SceneConfig) -> Result<()> {
    let bad = |m: &str| Err(CoreError::Invalid(m.to_string()));
    if cfg.object_count.0 == 0 || cfg.object_count.0 > cfg.object_count.1 {
        return bad("object_count must be a non-empty range starting at 1 or more");
    }
    if !(cfg.plane_half_extent > 0.0) {
        return bad("plane_half_extent must be positive");
    }
    let c = &cfg.camera;
    if !(0.0 < c.elevation_min_deg && c.elevation_min_deg < c.elevation_max_deg && c.elevation_max_deg < 90.0) {
        return bad("camera elevation bounds must satisfy 0 < min < max < 90 degrees");
    }
    if c.resolution == 0 {
        return bad("camera resolution must be positive");
    }
    let l = &cfg.lighting;
    if !(0.0 < l.light_distance.0 && l.light_distance.0 <= l.light_distance.1) {
        return bad("light_distance must be a positive range");
    }
    if !l.procedural_sky && l.envmap_dir.is_none() {
        return bad("procedural sky disabled and no envmap_dir given");
    }
    Ok(())
}

fn uniform(rng: &mut dyn RngCore, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn random_rgb(rng: &mut dyn RngCore, lo: f64, hi: f64) -> Rgb {
    [uniform(rng, (lo, hi)), uniform(rng, (lo, hi)), uniform(rng, (lo, hi))]
}

fn sample_primitive(rng: &mut dyn RngCore) -> Primitive {
    match rng.random_range(0..3) {
        0 => Primitive::Box {
            half_extents: [uniform(rng, (0.5, 1.0)), uniform(rng, (0.4, 1.2)), uniform(rng, (0.5, 1.0))],
        },
        1 => Primitive::Cylinder {
            radius: uniform(rng, (0.6, 1.0)),
            height: uniform(rng, (0.6, 2.4)),
        },
        _ => Primitive::Sphere {
            radius: uniform(rng, (0.7, 1.0)),
        },
    }
}

/// Random shape whose local footprint fits in `[-1, 1]^2` and whose base is `y = 0`.
fn sample_shape(rng: &mut dyn RngCore, meshes: &[PathBuf], mesh_probability: f64) -> Shape {
    if !meshes.is_empty() && rng.random_bool(mesh_probability.clamp(0.0, 1.0)) {
        let path = meshes[rng.random_range(0..meshes.len())].clone();
        return Shape::Mesh { path };
    }
    if rng.random_bool(0.7) {
        return Shape::Primitive {
            primitive: sample_primitive(rng),
        };
    }
    // Stack of 2-4 smaller primitives: a base on the plane, the rest on top
    // or beside it, so the composite still rests on y = 0.
    let n = rng.random_range(2..=4);
    let mut parts = Vec::with_capacity(n);
    let mut top = 0.0f64;
    for i in 0..n {
        let shrink = uniform(rng, (0.35, 0.7));
        let primitive = match sample_primitive(rng) {
            Primitive::Box { half_extents: h } => Primitive::Box {
                half_extents: [h[0] * shrink, h[1] * shrink, h[2] * shrink],
            },
            Primitive::Cylinder { radius, height } => Primitive::Cylinder {
                radius: radius * shrink,
                height: height * shrink,
            },
            Primitive::Sphere { radius } => Primitive::Sphere { radius: radius * shrink },
            disk => disk,
        };
        let (lo, hi) = primitive.bounds();
        let reach_x = 1.0 - hi[0].max(-lo[0]);
        let reach_z = 1.0 - hi[2].max(-lo[2]);
        let (ox, oz) = if i == 0 {
            (0.0, 0.0)
        } else {
            (uniform(rng, (-reach_x, reach_x)) * 0.8, uniform(rng, (-reach_z, reach_z)) * 0.8)
        };
        let oy = if i == 0 || rng.random_bool(0.3) { 0.0 } else { top };
        top = top.max(oy + hi[1]);
        parts.push(Part {
            primitive,
            offset: [ox, oy, oz],
        });
    }
    Shape::Composite { parts }
}

fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case(ext)) == Some(true))
        .collect();
    files.sort();
    Ok(files)
}

fn place_objects(seed: u64, cfg: &SceneConfig) -> Result<Vec<ObjectPlacement>> {
    let mut rng = stream_rng(seed, STREAM_OBJECTS);
    let meshes = match &cfg.mesh_dir {
        Some(dir) => list_files(dir, "obj")?,
        None => Vec::new(),
    };
    let count = rng.random_range(cfg.object_count.0..=cfg.object_count.1);
    let limit = cfg.plane_half_extent - cfg.shadow_margin;
    let mut placed: Vec<(ObjectPlacement, Footprint)> = Vec::with_capacity(count);

    for i in 0..count {
        let shape = sample_shape(&mut rng, &meshes, cfg.mesh_probability);
        let (lo, hi) = shape.local_bounds()?;
        // Normalize so the larger footprint half-size equals the sampled size.
        let local_half = hi[0].max(-lo[0]).max(hi[2]).max(-lo[2]).max(1e-9);
        let size_range = if i == 0 { cfg.central_size } else { cfg.ring_size };
        let mut scale = uniform(&mut rng, size_range) / local_half;
        let yaw = rng.random_range(0.0..TAU);
        let albedo = random_rgb(&mut rng, 0.15, 0.95);
        let mut accepted = None;
        'shrink: for _ in 0..=cfg.max_shrinks {
            for _ in 0..cfg.placement_retries.max(1) {
                let position = if i == 0 {
                    [0.0, 0.0]
                } else {
                    let r = uniform(&mut rng, cfg.ring_radius);
                    let a = rng.random_range(0.0..TAU);
                    [r * a.cos(), r * a.sin()]
                };
                let obj = ObjectPlacement {
                    shape: shape.clone(),
                    scale,
                    yaw,
                    position,
                    albedo,
                    removable: i == 0,
                };
                let fp = obj.footprint()?;
                if fp.max_abs() <= limit && placed.iter().all(|(_, other)| !fp.overlaps(other)) {
                    accepted = Some((obj, fp));
                    break 'shrink;
                }
                if i == 0 {
                    break;
                }
            }
            scale *= 0.9;
        }
        match accepted {
            Some(a) => placed.push(a),
            None => {
                return Err(CoreError::Infeasible {
                    seed,
                    reason: format!("could not place object {i} after {} shrinks", cfg.max_shrinks),
                })
            }
        }
    }
    Ok(placed.into_iter().map(|(o, _)| o).collect())
}

/// Camera on the upper hemisphere looking at the plane center, then shifted
/// by a uniform jitter with its orientation kept.
pub fn sample_camera(rng: &mut dyn RngCore, cfg: &CameraConfig, plane_half_extent: f64) -> CameraSpec {
    let radius = cfg.radius * plane_half_extent;
    let azimuth = rng.random_range(0.0..TAU);
    let elevation = rng.random_range(cfg.elevation_min_deg.to_radians()..cfg.elevation_max_deg.to_radians());
    let eye = [
        radius * elevation.cos() * azimuth.cos(),
        radius * elevation.sin(),
        radius * elevation.cos() * azimuth.sin(),
    ];
    let j = cfg.pos_jitter * plane_half_extent;
    let offset = if j > 0.0 {
        [rng.random_range(-j..j), rng.random_range(-j..j), rng.random_range(-j..j)]
    } else {
        [0.0; 3]
    };
    CameraSpec {
        eye: [eye[0] + offset[0], eye[1] + offset[1], eye[2] + offset[2]],
        look_at: offset,
        fov: cfg.fov_deg.to_radians(),
        resolution: cfg.resolution,
    }
}

/// Point light in the upper hemisphere plus a random environment rotation.
/// The returned spec carries a placeholder constant environment; callers
/// attach the sampled environment source.
pub fn sample_lighting(
    rng: &mut dyn RngCore,
    cfg: &LightingConfig,
    plane_half_extent: f64,
    envmap_peak: Rgb,
) -> LightingSpec {
    let d = uniform(rng, cfg.light_distance) * plane_half_extent;
    let azimuth = rng.random_range(0.0..TAU);
    // Uniform on the spherical cap above the minimum elevation.
    let sin_min = cfg.light_min_elevation_deg.to_radians().sin();
    let sin_el = uniform(rng, (sin_min, 1.0));
    let cos_el = (1.0 - sin_el * sin_el).max(0.0).sqrt();
    let position = [d * cos_el * azimuth.cos(), d * sin_el, d * cos_el * azimuth.sin()];
    let mut intensity = [0.0; 3];
    for (c, v) in intensity.iter_mut().enumerate() {
        *v = if envmap_peak[c] > 0.0 {
            rng.random_range(0.0..envmap_peak[c])
        } else {
            0.0
        };
    }
    let env_yaw = rng.random_range(0.0..TAU);
    LightingSpec {
        envmap: EnvSource::Constant { radiance: [1.0; 3] },
        env_yaw,
        env_gamma: 1.0,
        point_light: PointLight { position, intensity },
    }
}

fn sample_env_source(rng: &mut dyn RngCore, cfg: &LightingConfig) -> Result<EnvSource> {
    let files = match &cfg.envmap_dir {
        Some(dir) => list_files(dir, "pfm")?,
        None => Vec::new(),
    };
    if !cfg.procedural_sky && files.is_empty() {
        return Err(CoreError::Invalid(
            "procedural sky disabled and no environment maps found".into(),
        ));
    }
    let use_file = !files.is_empty() && (!cfg.procedural_sky || rng.random_bool(0.5));
    if use_file {
        return Ok(EnvSource::File {
            path: files[rng.random_range(0..files.len())].clone(),
        });
    }
    Ok(EnvSource::Procedural {
        sky: sample_sky(rng),
        resolution: cfg.env_resolution,
    })
}

/// Procedural sky: gradient plus 1-3 blobs ranging from sun-like to broad.
pub fn sample_sky(rng: &mut dyn RngCore) -> SkyParams {
    let zenith_level = uniform(rng, (0.2, 0.8));
    let tint = random_rgb(rng, 0.7, 1.0);
    let zenith = [zenith_level * tint[0] * 0.8, zenith_level * tint[1] * 0.9, zenith_level * tint[2]];
    let horizon_level = uniform(rng, (0.4, 1.2));
    let htint = random_rgb(rng, 0.8, 1.0);
    let horizon = [horizon_level * htint[0], horizon_level * htint[1], horizon_level * htint[2]];
    let ground = random_rgb(rng, 0.05, 0.25);
    let n = rng.random_range(1..=3);
    let blobs = (0..n)
        .map(|_| {
            let width = uniform(rng, (0.05, 0.5));
            // Irradiance at normal incidence, relative to the sky's ~pi * level.
            let strength = uniform(rng, (0.5, 6.0)) * PI * zenith_level;
            let level = strength / (TAU * width * width);
            let color = random_rgb(rng, 0.75, 1.0);
            SkyBlob {
                elevation: uniform(rng, (15f64.to_radians(), 80f64.to_radians())),
                azimuth: rng.random_range(0.0..TAU),
                width,
                radiance: [level * color[0], level * color[1], level * color[2]],
            }
        })
        .collect();
    SkyParams {
        zenith,
        horizon,
        ground,
        blobs,
    }
}

/// Samples a texture description and rasterizes it.
pub fn generate_texture(rng: &mut dyn RngCore, cfg: &TextureConfig) -> Result<ImageBuffer> {
    sample_texture_spec(rng, cfg)?.rasterize(cfg.resolution)
}

pub fn sample_texture_spec(rng: &mut dyn RngCore, cfg: &TextureConfig) -> Result<TextureSpec> {
    if let Some(dir) = &cfg.texture_dir {
        let files = list_files(dir, "pfm")?;
        if !files.is_empty() && rng.random_bool(cfg.file_probability.clamp(0.0, 1.0)) {
            return Ok(TextureSpec::File {
                path: files[rng.random_range(0..files.len())].clone(),
            });
        }
    }
    let pair = |rng: &mut dyn RngCore| {
        let a = random_rgb(rng, 0.1, 1.0);
        let contrast = uniform(rng, (0.2, 0.9));
        let b = [
            (a[0] * (1.0 - contrast) + uniform(rng, (0.0, 0.3))).clamp(0.05, 1.0),
            (a[1] * (1.0 - contrast) + uniform(rng, (0.0, 0.3))).clamp(0.05, 1.0),
            (a[2] * (1.0 - contrast) + uniform(rng, (0.0, 0.3))).clamp(0.05, 1.0),
        ];
        [a, b]
    };
    Ok(match rng.random_range(0..5) {
        0 => TextureSpec::Flat {
            color: random_rgb(rng, 0.2, 1.0),
        },
        1 => TextureSpec::Checker {
            colors: pair(rng),
            tiles: rng.random_range(2..=12),
        },
        2 => TextureSpec::Stripes {
            colors: pair(rng),
            tiles: rng.random_range(3..=16),
            vertical: rng.random_bool(0.5),
        },
        3 => TextureSpec::Noise {
            base: random_rgb(rng, 0.3, 1.0),
            tint: random_rgb(rng, 0.05, 0.6),
            period: rng.random_range(2..=8),
            octaves: rng.random_range(1..=4),
            seed: rng.next_u64(),
        },
        _ => {
            let n = rng.random_range(2..=5);
            TextureSpec::Voronoi {
                palette: (0..n).map(|_| random_rgb(rng, 0.1, 1.0)).collect(),
                cells: rng.random_range(4..=24),
                seed: rng.next_u64(),
            }
        }
    })
}

/// Minimum texel value; keeps textures strictly positive for log-domain use.
pub const TEXTURE_FLOOR: f32 = 0.02;

impl TextureSpec {
    /// Rasterizes a square tileable RGB texture.
    pub fn rasterize(&self, resolution: usize) -> Result<ImageBuffer> {
        let n = resolution.max(1);
        let img = match self {
            TextureSpec::Flat { color } => ImageBuffer::from_fn(n, n, 3, |_, _, c| color[c] as f32),
            TextureSpec::Checker { colors, tiles } => ImageBuffer::from_fn(n, n, 3, |y, x, c| {
                let t = *tiles as usize;
                let (ty, tx) = (y * t / n, x * t / n);
                colors[(ty + tx) % 2][c] as f32
            }),
            TextureSpec::Stripes { colors, tiles, vertical } => ImageBuffer::from_fn(n, n, 3, |y, x, c| {
                let t = *tiles as usize;
                let k = if *vertical { x } else { y } * t / n;
                colors[k % 2][c] as f32
            }),
            TextureSpec::Noise {
                base,
                tint,
                period,
                octaves,
                seed,
            } => {
                let noise = PeriodicNoise::new(*seed);
                ImageBuffer::from_fn(n, n, 3, |y, x, c| {
                    let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
                    let mut amp = 1.0;
                    let mut total = 0.0;
                    let mut norm = 0.0;
                    for o in 0..*octaves {
                        let p = *period << o;
                        total += amp * noise.sample(u * p as f64, v * p as f64, p);
                        norm += amp;
                        amp *= 0.5;
                    }
                    let t = 0.5 + 0.5 * total / norm;
                    (base[c] * (1.0 - t) + tint[c] * t) as f32
                })
            }
            TextureSpec::Voronoi { palette, cells, seed } => {
                let mut rng = stream_rng(*seed, 0);
                let sites: Vec<([f64; 2], usize)> = (0..*cells)
                    .map(|_| {
                        (
                            [rng.random::<f64>(), rng.random::<f64>()],
                            rng.random_range(0..palette.len()),
                        )
                    })
                    .collect();
                ImageBuffer::from_fn(n, n, 3, |y, x, c| {
                    let p = [(x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64];
                    let mut best = (f64::INFINITY, 0usize);
                    for (s, col) in &sites {
                        // Wrapped distance keeps the texture tileable.
                        let dx = (p[0] - s[0]).abs();
                        let dz = (p[1] - s[1]).abs();
                        let d = dx.min(1.0 - dx).powi(2) + dz.min(1.0 - dz).powi(2);
                        if d < best.0 {
                            best = (d, *col);
                        }
                    }
                    palette[best.1][c] as f32
                })
            }
            TextureSpec::File { path } => {
                let img = crate::io::read_pfm_channels(path, 3)?;
                img.check_finite()?;
                img
            }
        };
        Ok(img.map(|v| v.clamp(TEXTURE_FLOOR, 1.0)))
    }
}

/// Gradient noise on an integer lattice that wraps with the given period.
struct PeriodicNoise {
    perm: [u8; 256],
}

impl PeriodicNoise {
    fn new(seed: u64) -> Self {
        let mut rng = stream_rng(seed, 7);
        let mut perm = [0u8; 256];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = i as u8;
        }
        for i in (1..256).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        PeriodicNoise { perm }
    }

    fn gradient(&self, ix: i64, iy: i64, period: u32) -> (f64, f64) {
        let p = period as i64;
        let (ix, iy) = (ix.rem_euclid(p) as usize, iy.rem_euclid(p) as usize);
        let h = self.perm[(self.perm[ix & 255] as usize + iy) & 255];
        let a = h as f64 / 256.0 * TAU;
        (a.cos(), a.sin())
    }

    /// Value in roughly `[-1, 1]`.
    fn sample(&self, x: f64, y: f64, period: u32) -> f64 {
        let (x0, y0) = (x.floor() as i64, y.floor() as i64);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let dot = |ix: i64, iy: i64| {
            let g = self.gradient(ix, iy, period);
            g.0 * (x - ix as f64) + g.1 * (y - iy as f64)
        };
        let (u, v) = (fade(fx), fade(fy));
        let a = dot(x0, y0) * (1.0 - u) + dot(x0 + 1, y0) * u;
        let b = dot(x0, y0 + 1) * (1.0 - u) + dot(x0 + 1, y0 + 1) * u;
        (a * (1.0 - v) + b * v) * std::f64::consts::SQRT_2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(42, &cfg).unwrap().canonical_json();
        let b = generate_scene(42, &cfg).unwrap().canonical_json();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(43, &cfg).unwrap().canonical_json());
    }

    #[test]
    fn thousand_scenes_have_disjoint_footprints() {
        let cfg = SceneConfig::default();
        for seed in 0..1000 {
            let scene = generate_scene(seed, &cfg).unwrap();
            // Brute-force pairwise rectangle test, independent of Footprint::overlaps.
            let rects: Vec<_> = scene.objects.iter().map(|o| o.footprint().unwrap()).collect();
            for i in 0..rects.len() {
                for j in i + 1..rects.len() {
                    let (a, b) = (rects[i], rects[j]);
                    let sep = a.max[0] <= b.min[0] || b.max[0] <= a.min[0] || a.max[1] <= b.min[1] || b.max[1] <= a.min[1];
                    assert!(sep, "seed {seed}: objects {i},{j} overlap");
                }
            }
            assert!((6..=7).contains(&scene.objects.len()));
            assert_eq!(scene.objects[0].position, [0.0, 0.0]);
            assert!(scene.objects[0].removable);
            assert!(scene.objects[1..].iter().all(|o| !o.removable));
        }
    }

    #[test]
    fn objects_rest_on_plane_inside_extent() {
        let cfg = SceneConfig::default();
        for seed in 0..100 {
            let scene = generate_scene(seed, &cfg).unwrap();
            for o in &scene.objects {
                assert_eq!(o.base_height().unwrap(), 0.0);
                let fp = o.footprint().unwrap();
                assert!(fp.max_abs() <= cfg.plane_half_extent - cfg.shadow_margin + 1e-12);
            }
        }
    }

    #[test]
    fn camera_without_jitter_sits_on_hemisphere() {
        let cfg = CameraConfig {
            pos_jitter: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let cam = sample_camera(&mut rng, &cfg, 1.0);
            let r = cam.eye.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn camera_elevation_and_azimuth_distribution() {
        let cfg = CameraConfig {
            pos_jitter: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bins = 16usize;
        let mut hist = vec![0usize; bins];
        let n = 10_000;
        for _ in 0..n {
            let cam = sample_camera(&mut rng, &cfg, 1.0);
            let [x, y, z] = cam.eye;
            let el = (y / 3.0).asin().to_degrees();
            assert!(el >= 15.0 - 1e-9 && el <= 70.0 + 1e-9, "elevation {el}");
            let az = z.atan2(x).rem_euclid(TAU);
            hist[((az / TAU) * bins as f64) as usize % bins] += 1;
        }
        // Each bin is Binomial(n, 1/16); demand every count within 3 sigma.
        let p = 1.0 / bins as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, &h) in hist.iter().enumerate() {
            assert!((h as f64 - mean).abs() < 3.0 * sigma, "bin {i}: {h}");
        }
        // Chi-square with 15 dof; the 99.9% quantile is 37.7.
        let chi2: f64 = hist.iter().map(|&h| (h as f64 - mean).powi(2) / mean).sum();
        assert!(chi2 < 37.7, "chi2 {chi2}");
    }

    #[test]
    fn jitter_keeps_orientation() {
        let cfg = CameraConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let cam = sample_camera(&mut rng, &cfg, 1.0);
            let dir: Vec<f64> = (0..3).map(|k| cam.look_at[k] - cam.eye[k]).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lighting_bounds() {
        let cfg = LightingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let peak = [5.0, 2.0, 1.0];
        for _ in 0..10_000 {
            let l = sample_lighting(&mut rng, &cfg, 1.0, peak);
            let p = l.point_light.position;
            assert!(p[1] > 0.0);
            let d = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((1.5 - 1e-9..=4.0 + 1e-9).contains(&d), "distance {d}");
            for c in 0..3 {
                assert!((0.0..=peak[c]).contains(&l.point_light.intensity[c]));
            }
            assert!((0.0..TAU).contains(&l.env_yaw));
        }
        let dark = sample_lighting(&mut rng, &cfg, 1.0, [0.0; 3]);
        assert_eq!(dark.point_light.intensity, [0.0; 3]);
    }

    #[test]
    fn flat_and_checker_textures() {
        let flat = TextureSpec::Flat { color: [0.5; 3] }.rasterize(16).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.5));
        let checker = TextureSpec::Checker {
            colors: [[0.2, 0.3, 0.4], [0.9, 0.8, 0.7]],
            tiles: 4,
        }
        .rasterize(32)
        .unwrap();
        let mut distinct: Vec<Vec<u32>> = (0..32 * 32)
            .map(|p| checker.data()[p * 3..p * 3 + 3].iter().map(|v| v.to_bits()).collect())
            .collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn generated_textures_are_positive() {
        let cfg = TextureConfig {
            resolution: 32,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let t = generate_texture(&mut rng, &cfg).unwrap();
            assert!(t.min_value() > 0.0);
            assert!(t.max_value() <= 1.0);
        }
    }

    #[test]
    fn noise_and_voronoi_tile() {
        for spec in [
            TextureSpec::Noise {
                base: [0.8; 3],
                tint: [0.1; 3],
                period: 3,
                octaves: 3,
                seed: 4,
            },
            TextureSpec::Voronoi {
                palette: vec![[0.1; 3], [0.9; 3], [0.5; 3]],
                cells: 10,
                seed: 2,
            },
        ] {
            let t = spec.rasterize(64).unwrap();
            // Wrap-around neighbors differ no more than interior neighbors typically do.
            let edge: f32 = (0..64).map(|y| (t.get(y, 0, 0) - t.get(y, 63, 0)).abs()).sum::<f32>() / 64.0;
            let inner: f32 = (0..64).map(|y| (t.get(y, 31, 0) - t.get(y, 32, 0)).abs()).sum::<f32>() / 64.0;
            assert!(edge <= inner * 3.0 + 0.05, "{spec:?}: edge {edge} inner {inner}");
        }
    }

    #[test]
    fn missing_env_source_is_an_error() {
        let mut cfg = SceneConfig::default();
        cfg.lighting.procedural_sky = false;
        assert!(generate_scene(1, &cfg).is_err());
        cfg.lighting.envmap_dir = Some(PathBuf::from("/nonexistent/envmaps"));
        assert!(generate_scene(1, &cfg).is_err());
    }

    #[test]
    fn scene_json_round_trips() {
        let scene = generate_scene(8, &SceneConfig::default()).unwrap();
        let back: SceneSpec = serde_json::from_str(&scene.canonical_json()).unwrap();
        assert_eq!(back, scene);
    }
}
