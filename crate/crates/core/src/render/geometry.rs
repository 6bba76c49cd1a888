//! Rays, bounding boxes, analytic primitives and the traceable world.

use std::sync::Arc;

use nalgebra::{Rotation3, Vector3};

use crate::error::Result;
use crate::image::ImageBuffer;
use crate::render::mesh::{Bvh, TriangleMesh};
use crate::scene::{ObjectPlacement, Primitive, SceneSpec, Shape};

pub type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: V3,
    pub dir: V3,
}

impl Ray {
    pub fn new(origin: V3, dir: V3) -> Self {
        Ray { origin, dir }
    }

    pub fn at(&self, t: f64) -> V3 {
        self.origin + self.dir * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: V3,
    pub max: V3,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: V3::repeat(f64::INFINITY),
            max: V3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn grow(&mut self, p: &V3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn centroid(&self) -> V3 {
        (self.min + self.max) * 0.5
    }

    /// Slab test; `inv_dir` is the componentwise reciprocal of the ray direction.
    pub fn hit(&self, origin: &V3, inv_dir: &V3, tmin: f64, tmax: f64) -> bool {
        let mut t0 = tmin;
        let mut t1 = tmax;
        for k in 0..3 {
            let a = (self.min[k] - origin[k]) * inv_dir[k];
            let b = (self.max[k] - origin[k]) * inv_dir[k];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            // NaN (0 * inf) leaves the interval unchanged.
            if lo > t0 {
                t0 = lo;
            }
            if hi < t1 {
                t1 = hi;
            }
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

/// Nearest intersection; `normal` faces the incoming ray.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub normal: V3,
    pub albedo: V3,
    pub plane: bool,
}

fn face(normal: V3, dir: &V3) -> V3 {
    if normal.dot(dir) > 0.0 {
        -normal
    } else {
        normal
    }
}

/// Smallest root of `a t^2 + b t + c` inside `(tmin, tmax)`.
fn quadratic_root(a: f64, b: f64, c: f64, tmin: f64, tmax: f64) -> Option<f64> {
    if a == 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let q = if b < 0.0 { -0.5 * (b - sq) } else { -0.5 * (b + sq) };
    let (mut r0, mut r1) = (q / a, if q != 0.0 { c / q } else { q / a });
    if r0 > r1 {
        std::mem::swap(&mut r0, &mut r1);
    }
    [r0, r1].into_iter().find(|&t| t > tmin && t < tmax)
}

/// Intersects a local-frame primitive. Returns `(t, unnormalized local normal)`.
pub fn intersect_primitive(p: &Primitive, o: &V3, d: &V3, tmin: f64, tmax: f64) -> Option<(f64, V3)> {
    match *p {
        Primitive::Box { half_extents: h } => {
            let c = V3::new(0.0, h[1], 0.0);
            let (mut t0, mut t1) = (tmin, tmax);
            let (mut n0, mut n1) = (V3::zeros(), V3::zeros());
            for k in 0..3 {
                let oc = o[k] - c[k];
                if d[k] == 0.0 {
                    if oc.abs() > h[k] {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / d[k];
                let mut a = (-h[k] - oc) * inv;
                let mut b = (h[k] - oc) * inv;
                let mut na = V3::zeros();
                na[k] = -1.0;
                let mut nb = V3::zeros();
                nb[k] = 1.0;
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                    std::mem::swap(&mut na, &mut nb);
                }
                if a > t0 {
                    t0 = a;
                    n0 = na;
                }
                if b < t1 {
                    t1 = b;
                    n1 = nb;
                }
                if t0 > t1 {
                    return None;
                }
            }
            // Entering hit, or exit hit when the origin is inside.
            if t0 > tmin && n0 != V3::zeros() {
                Some((t0, n0))
            } else if t1 < tmax && n1 != V3::zeros() {
                Some((t1, n1))
            } else {
                None
            }
        }
        Primitive::Sphere { radius } => {
            let oc = o - V3::new(0.0, radius, 0.0);
            let t = quadratic_root(d.dot(d), 2.0 * oc.dot(d), oc.dot(&oc) - radius * radius, tmin, tmax)?;
            Some((t, oc + d * t))
        }
        Primitive::Cylinder { radius, height } => {
            let mut best: Option<(f64, V3)> = None;
            let a = d.x * d.x + d.z * d.z;
            let b = 2.0 * (o.x * d.x + o.z * d.z);
            let c = o.x * o.x + o.z * o.z - radius * radius;
            if a > 0.0 {
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                        if t > tmin && t < tmax {
                            let y = o.y + t * d.y;
                            if (0.0..=height).contains(&y) {
                                best = Some((t, V3::new(o.x + t * d.x, 0.0, o.z + t * d.z)));
                                break;
                            }
                        }
                    }
                }
            }
            if d.y != 0.0 {
                for (cap_y, ny) in [(0.0, -1.0), (height, 1.0)] {
                    let t = (cap_y - o.y) / d.y;
                    let limit = best.map_or(tmax, |b| b.0);
                    if t > tmin && t < limit {
                        let (x, z) = (o.x + t * d.x, o.z + t * d.z);
                        if x * x + z * z <= radius * radius {
                            best = Some((t, V3::new(0.0, ny, 0.0)));
                        }
                    }
                }
            }
            best
        }
        Primitive::Disk { radius, height } => {
            if d.y == 0.0 {
                return None;
            }
            let t = (height - o.y) / d.y;
            if t <= tmin || t >= tmax {
                return None;
            }
            let (x, z) = (o.x + t * d.x, o.z + t * d.z);
            (x * x + z * z <= radius * radius).then(|| (t, V3::new(0.0, 1.0, 0.0)))
        }
    }
}

#[derive(Clone, Debug)]
pub enum PlaneAlbedo {
    Constant(V3),
    /// Tiled once over the plane; texel rows follow +z, columns +x.
    Texture(Arc<ImageBuffer>),
}

#[derive(Clone, Debug)]
pub struct GroundPlane {
    pub half_extent: f64,
    pub albedo: PlaneAlbedo,
}

impl GroundPlane {
    pub fn albedo_at(&self, x: f64, z: f64) -> V3 {
        match &self.albedo {
            PlaneAlbedo::Constant(c) => *c,
            PlaneAlbedo::Texture(tex) => {
                let h = self.half_extent;
                let (w, n) = (tex.width(), tex.height());
                let u = ((x + h) / (2.0 * h)).clamp(0.0, 1.0);
                let v = ((z + h) / (2.0 * h)).clamp(0.0, 1.0);
                let col = ((u * w as f64) as usize).min(w - 1);
                let row = ((v * n as f64) as usize).min(n - 1);
                let p = tex.pixel(row, col);
                V3::new(p[0] as f64, p[1] as f64, p[2] as f64)
            }
        }
    }

    fn intersect(&self, ray: &Ray, tmin: f64, tmax: f64) -> Option<Hit> {
        if ray.dir.y == 0.0 {
            return None;
        }
        let t = -ray.origin.y / ray.dir.y;
        if t <= tmin || t >= tmax {
            return None;
        }
        let p = ray.at(t);
        if p.x.abs() > self.half_extent || p.z.abs() > self.half_extent {
            return None;
        }
        Some(Hit {
            t,
            normal: face(V3::y(), &ray.dir),
            albedo: self.albedo_at(p.x, p.z),
            plane: true,
        })
    }
}

#[derive(Clone, Debug)]
pub enum LocalShape {
    Parts(Vec<(Primitive, V3)>),
    Mesh(Arc<Bvh>),
}

/// A shape placed in the world by yaw, uniform scale and translation.
#[derive(Clone, Debug)]
pub struct Object {
    rotation: Rotation3<f64>,
    position: V3,
    scale: f64,
    shape: LocalShape,
    albedo: V3,
    bounds: Aabb,
}

impl Object {
    pub fn new(shape: LocalShape, yaw: f64, scale: f64, position: V3, albedo: V3) -> Self {
        let rotation = Rotation3::from_axis_angle(&V3::y_axis(), yaw);
        let local = match &shape {
            LocalShape::Parts(parts) => parts.iter().fold(Aabb::empty(), |acc, (p, off)| {
                let (lo, hi) = p.bounds();
                acc.merge(&Aabb {
                    min: V3::from(lo) + off,
                    max: V3::from(hi) + off,
                })
            }),
            LocalShape::Mesh(bvh) => bvh.bounds(),
        };
        let mut bounds = Aabb::empty();
        for i in 0..8 {
            let corner = V3::new(
                if i & 1 == 0 { local.min.x } else { local.max.x },
                if i & 2 == 0 { local.min.y } else { local.max.y },
                if i & 4 == 0 { local.min.z } else { local.max.z },
            );
            bounds.grow(&(rotation * corner * scale + position));
        }
        // Pad so grazing rays are not culled by rounding.
        let pad = V3::repeat(1e-9 + 1e-9 * bounds.max.abs().max());
        bounds.min -= pad;
        bounds.max += pad;
        Object {
            rotation,
            position,
            scale,
            shape,
            albedo,
            bounds,
        }
    }

    pub fn from_placement(obj: &ObjectPlacement) -> Result<Self> {
        let shape = match &obj.shape {
            Shape::Primitive { primitive } => LocalShape::Parts(vec![(primitive.clone(), V3::zeros())]),
            Shape::Composite { parts } => LocalShape::Parts(
                parts
                    .iter()
                    .map(|p| (p.primitive.clone(), V3::from(p.offset)))
                    .collect(),
            ),
            Shape::Mesh { path } => {
                let mesh = TriangleMesh::load_obj_normalized(path)?;
                LocalShape::Mesh(Arc::new(Bvh::build(&mesh)))
            }
        };
        Ok(Object::new(
            shape,
            obj.yaw,
            obj.scale,
            V3::new(obj.position[0], 0.0, obj.position[1]),
            V3::from(obj.albedo),
        ))
    }

    fn intersect(&self, ray: &Ray, inv_dir: &V3, tmin: f64, tmax: f64, any: bool) -> Option<Hit> {
        if !self.bounds.hit(&ray.origin, inv_dir, tmin, tmax) {
            return None;
        }
        // Uniform scale keeps the ray parameter t identical in both frames.
        let inv_rot = self.rotation.inverse();
        let o = inv_rot * (ray.origin - self.position) / self.scale;
        let d = inv_rot * ray.dir / self.scale;
        let mut best: Option<(f64, V3, Option<V3>)> = None;
        match &self.shape {
            LocalShape::Parts(parts) => {
                for (prim, off) in parts {
                    let limit = best.map_or(tmax, |b| b.0);
                    if let Some((t, n)) = intersect_primitive(prim, &(o - off), &d, tmin, limit) {
                        best = Some((t, n, None));
                        if any {
                            break;
                        }
                    }
                }
            }
            LocalShape::Mesh(bvh) => {
                if let Some((t, n, albedo)) = bvh.intersect(&o, &d, tmin, tmax, any) {
                    best = Some((t, n, Some(albedo)));
                }
            }
        }
        best.map(|(t, n, albedo)| {
            let normal = (self.rotation * n).normalize();
            Hit {
                t,
                normal: face(normal, &ray.dir),
                albedo: albedo.map_or(self.albedo, |a| a.component_mul(&self.albedo)),
                plane: false,
            }
        })
    }
}

/// Everything a ray can hit: an optional ground plane plus objects.
#[derive(Clone, Debug, Default)]
pub struct World {
    pub plane: Option<GroundPlane>,
    pub objects: Vec<Object>,
}

impl World {
    /// World for a scene, with an optional plane albedo override and the
    /// removable object optionally left out.
    pub fn from_scene(scene: &SceneSpec, plane_albedo: PlaneAlbedo, with_objects: bool, with_removable: bool) -> Result<Self> {
        let mut objects = Vec::new();
        if with_objects {
            for obj in &scene.objects {
                if obj.removable && !with_removable {
                    continue;
                }
                objects.push(Object::from_placement(obj)?);
            }
        }
        Ok(World {
            plane: Some(GroundPlane {
                half_extent: scene.plane.half_extent,
                albedo: plane_albedo,
            }),
            objects,
        })
    }

    pub fn intersect(&self, ray: &Ray, tmin: f64, tmax: f64) -> Option<Hit> {
        let inv_dir = ray.dir.map(|v| 1.0 / v);
        let mut best = self.plane.as_ref().and_then(|p| p.intersect(ray, tmin, tmax));
        for obj in &self.objects {
            let limit = best.map_or(tmax, |b| b.t);
            if let Some(h) = obj.intersect(ray, &inv_dir, tmin, limit, false) {
                best = Some(h);
            }
        }
        best
    }

    pub fn occluded(&self, ray: &Ray, tmin: f64, tmax: f64) -> bool {
        let inv_dir = ray.dir.map(|v| 1.0 / v);
        if self.plane.as_ref().is_some_and(|p| p.intersect(ray, tmin, tmax).is_some()) {
            return true;
        }
        self.objects
            .iter()
            .any(|o| o.intersect(ray, &inv_dir, tmin, tmax, true).is_some())
    }
}
