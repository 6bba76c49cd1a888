//! Triangle meshes, Wavefront OBJ import and a bounding volume hierarchy.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{CoreError, Result};
use crate::render::geometry::{Aabb, V3};

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<V3>,
    pub triangles: Vec<[u32; 3]>,
    /// One RGB albedo per triangle.
    pub albedo: Vec<V3>,
}

impl TriangleMesh {
    /// Validates indices and drops zero-area triangles.
    pub fn new(vertices: Vec<V3>, triangles: Vec<[u32; 3]>, albedo: Vec<V3>) -> Result<Self> {
        if albedo.len() != triangles.len() {
            return Err(CoreError::Shape(format!(
                "{} albedo entries for {} triangles",
                albedo.len(),
                triangles.len()
            )));
        }
        let n = vertices.len();
        let mut tris = Vec::with_capacity(triangles.len());
        let mut alb = Vec::with_capacity(triangles.len());
        for (t, a) in triangles.into_iter().zip(albedo) {
            if t.iter().any(|&i| i as usize >= n) {
                return Err(CoreError::Invalid(format!("triangle {t:?} indexes past {n} vertices")));
            }
            let [p0, p1, p2] = t.map(|i| vertices[i as usize]);
            if (p1 - p0).cross(&(p2 - p0)).norm() > 1e-14 {
                tris.push(t);
                alb.push(a);
            }
        }
        Ok(TriangleMesh {
            vertices,
            triangles: tris,
            albedo: alb,
        })
    }

    pub fn empty() -> Self {
        TriangleMesh {
            vertices: Vec::new(),
            triangles: Vec::new(),
            albedo: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut b = Aabb::empty();
        for t in &self.triangles {
            for &i in t {
                b.grow(&self.vertices[i as usize]);
            }
        }
        (b.min.into(), b.max.into())
    }

    /// Parses the vertex and face records of an OBJ file; faces are fan-triangulated.
    pub fn parse_obj(text: &str, path: &Path) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let err = |m: &str| CoreError::format(path, format!("line {}: {m}", lineno + 1));
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| err("bad vertex"))?;
                    if c.len() != 3 || c.iter().any(|v| !v.is_finite()) {
                        return Err(err("vertex needs three finite coordinates"));
                    }
                    vertices.push(V3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for tok in it {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| err("bad face index"))?;
                        let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        if resolved < 0 || resolved as usize >= vertices.len() {
                            return Err(err("face index out of range"));
                        }
                        idx.push(resolved as u32);
                    }
                    if idx.len() < 3 {
                        return Err(err("face needs at least three vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let albedo = vec![V3::repeat(1.0); triangles.len()];
        let mesh = TriangleMesh::new(vertices, triangles, albedo)?;
        if mesh.is_empty() {
            return Err(CoreError::format(path, "mesh has no non-degenerate triangles"));
        }
        Ok(mesh)
    }

    /// Loads an OBJ and rescales it into object-local units: centered on
    /// the vertical axis, base at `y = 0`, largest footprint half-size 1.
    /// Results are cached per path.
    pub fn load_obj_normalized(path: &Path) -> Result<Arc<TriangleMesh>> {
        static CACHE: OnceLock<Mutex<HashMap<PathBuf, Arc<TriangleMesh>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(m) = cache.lock().expect("mesh cache").get(path) {
            return Ok(m.clone());
        }
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut mesh = TriangleMesh::parse_obj(&text, path)?;
        let (lo, hi) = mesh.bounds();
        let center = V3::new(0.5 * (lo[0] + hi[0]), lo[1], 0.5 * (lo[2] + hi[2]));
        let half = (0.5 * (hi[0] - lo[0])).max(0.5 * (hi[2] - lo[2]));
        if half <= 0.0 {
            return Err(CoreError::format(path, "mesh has a zero-area footprint"));
        }
        for v in &mut mesh.vertices {
            *v = (*v - center) / half;
        }
        let mesh = Arc::new(mesh);
        cache
            .lock()
            .expect("mesh cache")
            .insert(path.to_path_buf(), mesh.clone());
        Ok(mesh)
    }
}

#[derive(Clone, Debug)]
struct Node {
    bounds: Aabb,
    /// Leaf: `[start, start + count)` into `tris`. Inner: children at `start`, `start + 1`.
    start: u32,
    count: u32,
}

#[derive(Clone, Copy, Debug)]
struct Tri {
    p0: V3,
    e1: V3,
    e2: V3,
    albedo: V3,
}

/// Median-split BVH over a triangle mesh.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    tris: Vec<Tri>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let mut tris: Vec<Tri> = mesh
            .triangles
            .iter()
            .zip(&mesh.albedo)
            .map(|(t, a)| {
                let [p0, p1, p2] = t.map(|i| mesh.vertices[i as usize]);
                Tri {
                    p0,
                    e1: p1 - p0,
                    e2: p2 - p0,
                    albedo: *a,
                }
            })
            .collect();
        let mut nodes = vec![Node {
            bounds: Aabb::empty(),
            start: 0,
            count: 0,
        }];
        if !tris.is_empty() {
            let n = tris.len();
            Self::split(&mut nodes, &mut tris, 0, 0, n);
        }
        Bvh { nodes, tris }
    }

    fn tri_bounds(t: &Tri) -> Aabb {
        let mut b = Aabb::empty();
        b.grow(&t.p0);
        b.grow(&(t.p0 + t.e1));
        b.grow(&(t.p0 + t.e2));
        b
    }

    fn split(nodes: &mut Vec<Node>, tris: &mut [Tri], node: usize, start: usize, end: usize) {
        let bounds = tris[start..end]
            .iter()
            .fold(Aabb::empty(), |acc, t| acc.merge(&Self::tri_bounds(t)));
        nodes[node].bounds = bounds;
        if end - start <= LEAF_SIZE {
            nodes[node].start = start as u32;
            nodes[node].count = (end - start) as u32;
            return;
        }
        let extent = bounds.max - bounds.min;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        let centroid = |t: &Tri| t.p0[axis] + (t.e1[axis] + t.e2[axis]) / 3.0;
        tris[start..end].select_nth_unstable_by(mid - start, |a, b| centroid(a).total_cmp(&centroid(b)));
        let left = nodes.len();
        nodes.push(Node {
            bounds: Aabb::empty(),
            start: 0,
            count: 0,
        });
        nodes.push(Node {
            bounds: Aabb::empty(),
            start: 0,
            count: 0,
        });
        nodes[node].start = left as u32;
        nodes[node].count = 0;
        Self::split(nodes, tris, left, start, mid);
        Self::split(nodes, tris, left + 1, mid, end);
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    /// Nearest (or, with `any`, first found) two-sided hit:
    /// `(t, geometric normal, albedo)`.
    pub fn intersect(&self, o: &V3, d: &V3, tmin: f64, tmax: f64, any: bool) -> Option<(f64, V3, V3)> {
        if self.tris.is_empty() {
            return None;
        }
        let inv = d.map(|v| 1.0 / v);
        let mut best: Option<(f64, usize)> = None;
        let mut limit = tmax;
        let mut stack = [0u32; 64];
        let mut sp = 1usize;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if !node.bounds.hit(o, &inv, tmin, limit) {
                continue;
            }
            if node.count > 0 {
                let s = node.start as usize;
                for i in s..s + node.count as usize {
                    if let Some(t) = moller_trumbore(&self.tris[i], o, d, tmin, limit) {
                        limit = t;
                        best = Some((t, i));
                        if any {
                            break;
                        }
                    }
                }
                if any && best.is_some() {
                    break;
                }
            } else {
                stack[sp] = node.start;
                stack[sp + 1] = node.start + 1;
                sp += 2;
            }
        }
        best.map(|(t, i)| {
            let tri = &self.tris[i];
            (t, tri.e1.cross(&tri.e2), tri.albedo)
        })
    }
}

fn moller_trumbore(tri: &Tri, o: &V3, d: &V3, tmin: f64, tmax: f64) -> Option<f64> {
    let p = d.cross(&tri.e2);
    let det = tri.e1.dot(&p);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = o - tri.p0;
    let u = s.dot(&p) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&tri.e1);
    let v = d.dot(&q) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = tri.e2.dot(&q) * inv_det;
    (t > tmin && t < tmax).then_some(t)
}
