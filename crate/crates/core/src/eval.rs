//! Error metrics, non-learned baselines, real-capture preprocessing and reports.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_shadow_gt, PreparedSample, ShadowGtConfig};
use crate::error::{CoreError, Result};
use crate::image::{ImageBuffer, MaskImage, LOG_FLOOR};
use crate::inpaint::{texture_inpaint, InpaintOperator};
use crate::render::proxy::fit_plane;
use crate::render::Camera;
use crate::scene::CameraSpec;
use crate::util::median_in_place;

/// Squared-error sum and sample count over one mask, so metrics can be pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSum {
    pub squared: f64,
    /// Pixels times channels.
    pub count: u64,
}

impl ErrorSum {
    pub fn of(pred: &ImageBuffer, gt: &ImageBuffer, mask: &MaskImage) -> Result<ErrorSum> {
        pred.ensure_same_shape(gt, "metric pair")?;
        pred.ensure_mask_shape(mask, "metric mask")?;
        let mut e = ErrorSum::default();
        for y in 0..pred.height() {
            for x in 0..pred.width() {
                if mask.is_on(y, x) {
                    for (a, b) in pred.pixel(y, x).iter().zip(gt.pixel(y, x)) {
                        let d = *a as f64 - *b as f64;
                        e.squared += d * d;
                    }
                    e.count += pred.channels() as u64;
                }
            }
        }
        Ok(e)
    }

    pub fn add(&mut self, other: &ErrorSum) {
        self.squared += other.squared;
        self.count += other.count;
    }

    pub fn rmse(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.squared / self.count as f64).sqrt())
    }
}

/// Root mean squared difference over the pixels and channels selected by `mask`.
pub fn rmse(pred: &ImageBuffer, gt: &ImageBuffer, mask: &MaskImage) -> Result<f64> {
    ErrorSum::of(pred, gt, mask)?
        .rmse()
        .ok_or(CoreError::EmptyMask("metric"))
}

/// `1(s > threshold)`, strict.
pub fn binarize_shadow_mask(s: &MaskImage, threshold: f32) -> MaskImage {
    s.threshold(threshold)
}

/// Binary shadow mask for a real capture pair: the soft-threshold rule
/// applied to `ln(I / I')` on the receiver, then binarized.
pub fn real_shadow_gt(i: &ImageBuffer, i_hat_prime: &ImageBuffer, m_r: &MaskImage, cfg: &ShadowGtConfig) -> Result<MaskImage> {
    i.ensure_same_shape(i_hat_prime, "capture pair")?;
    let ratio = i.zip_map(i_hat_prime, |a, b| (a.max(LOG_FLOOR) as f64 / b.max(LOG_FLOOR) as f64).ln() as f32)?;
    let soft = compute_shadow_gt(&ratio, m_r, cfg)?;
    Ok(binarize_shadow_mask(&soft, cfg.binarize_threshold))
}

/// Window median of a depth map, ignoring non-finite samples.
pub fn median_filter_depth(d: &ImageBuffer, radius: usize) -> Result<ImageBuffer> {
    if d.channels() != 1 {
        return Err(CoreError::Shape("depth must have one channel".into()));
    }
    let (w, h) = (d.width(), d.height());
    let r = radius as isize;
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    let mut out = d.clone();
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        let v = d.get(yy as usize, xx as usize, 0);
                        if v.is_finite() {
                            window.push(v);
                        }
                    }
                }
            }
            out.set(y, x, 0, median_in_place(&mut window).unwrap_or(f32::INFINITY));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier distance as a fraction of the median finite depth.
    pub tolerance_fraction: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 500,
            tolerance_fraction: 0.01,
            seed: 0,
        }
    }
}

/// A plane `normal . p = offset` in camera-world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

/// Fits the dominant plane of a depth map; inliers form the receiver mask.
pub fn ransac_plane_fit(d: &ImageBuffer, camera: &CameraSpec, cfg: &RansacConfig) -> Result<(Plane, MaskImage)> {
    if d.channels() != 1 {
        return Err(CoreError::Shape("depth must have one channel".into()));
    }
    let (w, h) = (d.width(), d.height());
    let cam = Camera::new(camera, w, h)?;
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let z = d.get(y, x, 0);
            if z.is_finite() && z > 0.0 {
                pts.push((y * w + x, cam.center_ray(x, y).at(z as f64)));
            }
        }
    }
    if pts.len() < 3 {
        return Err(CoreError::Degenerate(format!("{} finite depth pixels, need 3", pts.len())));
    }
    let mut depths: Vec<f32> = pts.iter().map(|(i, _)| d.data()[*i]).collect();
    let tol = cfg.tolerance_fraction * median_in_place(&mut depths).unwrap_or(1.0) as f64;
    let count = |n: &Vector3<f64>, off: f64| pts.iter().filter(|(_, p)| (n.dot(p) - off).abs() <= tol).count();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for _ in 0..cfg.iterations {
        let a = rng.random_range(0..pts.len());
        let b = rng.random_range(0..pts.len());
        let c = rng.random_range(0..pts.len());
        if a == b || b == c || a == c {
            continue;
        }
        let (pa, pb, pc) = (pts[a].1, pts[b].1, pts[c].1);
        let n = (pb - pa).cross(&(pc - pa));
        let scale = (pb - pa).norm() * (pc - pa).norm();
        if n.norm() <= 1e-9 * scale || scale == 0.0 {
            continue;
        }
        let n = n.normalize();
        let off = n.dot(&pa);
        let k = count(&n, off);
        if best.is_none_or(|b| k > b.0) {
            best = Some((k, n, off));
        }
    }
    let (_, n, off) = best.ok_or_else(|| CoreError::Degenerate("no non-collinear sample triple found".into()))?;
    let inliers: Vec<Vector3<f64>> = pts
        .iter()
        .filter(|(_, p)| (n.dot(p) - off).abs() <= tol)
        .map(|(_, p)| *p)
        .collect();
    let (normal, offset) = fit_plane(&inliers)?;
    let mut mask = MaskImage::zeros(w, h);
    for (i, p) in &pts {
        if (normal.dot(p) - offset).abs() <= tol {
            mask.set(i / w, i % w, 1.0);
        }
    }
    Ok((Plane { normal, offset }, mask))
}

/// Metrics of one scene in display space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub rmse: Option<f64>,
    pub shadow_rmse: Option<f64>,
    pub inpaint_rmse: Option<f64>,
    pub full: ErrorSum,
    pub shadow: ErrorSum,
    pub inpaint: ErrorSum,
}

impl SceneMetrics {
    /// Full-image RMSE, RMSE over the binarized shadow mask, and over `M_o`.
    pub fn compute(scene_id: &str, pred: &ImageBuffer, gt: &ImageBuffer, s_hat: &MaskImage, m_o: &MaskImage, threshold: f32) -> Result<Self> {
        let ones = MaskImage::ones(pred.width(), pred.height());
        let full = ErrorSum::of(pred, gt, &ones)?;
        let shadow = ErrorSum::of(pred, gt, &binarize_shadow_mask(s_hat, threshold))?;
        let inpaint = ErrorSum::of(pred, gt, m_o)?;
        Ok(SceneMetrics {
            scene_id: scene_id.to_string(),
            rmse: full.rmse(),
            shadow_rmse: shadow.rmse(),
            inpaint_rmse: inpaint.rmse(),
            full,
            shadow,
            inpaint,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub rmse: Option<f64>,
    pub shadow_rmse: Option<f64>,
    pub inpaint_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub scenes: Vec<SceneMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricsReport {
    /// Aggregates are root means over the squared errors pooled across scenes.
    pub fn new(method: &str, scenes: Vec<SceneMetrics>) -> Self {
        let (mut f, mut s, mut i) = (ErrorSum::default(), ErrorSum::default(), ErrorSum::default());
        for m in &scenes {
            f.add(&m.full);
            s.add(&m.shadow);
            i.add(&m.inpaint);
        }
        MetricsReport {
            method: method.to_string(),
            scenes,
            aggregate: AggregateMetrics {
                rmse: f.rmse(),
                shadow_rmse: s.rmse(),
                inpaint_rmse: i.rmse(),
            },
        }
    }
}

pub const REPORT_COLUMNS: [&str; 4] = ["method", "RMSE", "Shadow RMSE", "Inpaint RMSE"];

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// CSV with one row per method.
pub fn report_csv(reports: &[MetricsReport]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        let a = &r.aggregate;
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.method,
            fmt_metric(a.rmse),
            fmt_metric(a.shadow_rmse),
            fmt_metric(a.inpaint_rmse)
        ));
    }
    out
}

/// Column-aligned text table with one row per method.
pub fn report_table(reports: &[MetricsReport]) -> String {
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            let a = &r.aggregate;
            [r.method.clone(), fmt_metric(a.rmse), fmt_metric(a.shadow_rmse), fmt_metric(a.inpaint_rmse)]
        })
        .collect();
    let mut widths = REPORT_COLUMNS.map(str::len);
    for row in &rows {
        for (k, cell) in row.iter().enumerate() {
            widths[k] = widths[k].max(cell.len());
        }
    }
    let line = |cells: [&str; 4]| {
        let mut s = format!("{:<w$}", cells[0], w = widths[0]);
        for k in 1..4 {
            s.push_str(&format!("  {:>w$}", cells[k], w = widths[k]));
        }
        s.push('\n');
        s
    };
    let mut out = line(REPORT_COLUMNS);
    for row in &rows {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
    }
    out
}

/// Non-learned removal methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Output the input unchanged.
    Noop,
    /// Inpaint the object region only.
    Inpaint,
    /// Inpaint the object region extended by the proxy's shadow region.
    InpaintShadow,
}

impl Baseline {
    pub fn label(&self) -> &'static str {
        match self {
            Baseline::Noop => "no-op",
            Baseline::Inpaint => "inpaint",
            Baseline::InpaintShadow => "inpaint+shadow",
        }
    }
}

/// Pixels on the receiver where the object's proxy shadow darkens `P` by more
/// than 10% relative to `P'`.
pub fn proxy_shadow_mask(p: &ImageBuffer, p_prime: &ImageBuffer, m_r: &MaskImage) -> Result<MaskImage> {
    p.ensure_same_shape(p_prime, "proxy pair")?;
    Ok(MaskImage::from_fn(p.width(), p.height(), |y, x| {
        let dark = (0..p.channels()).any(|c| p.get(y, x, c) < 0.9 * p_prime.get(y, x, c));
        (m_r.is_on(y, x) && dark) as u8 as f32
    }))
}

/// Runs a baseline on a prepared sample; output is in display space.
pub fn run_baseline(method: Baseline, sample: &PreparedSample, op: &dyn InpaintOperator) -> Result<ImageBuffer> {
    match method {
        Baseline::Noop => Ok(sample.i.clone()),
        Baseline::Inpaint => texture_inpaint(op, &sample.i, &sample.m_o),
        Baseline::InpaintShadow => {
            let shadow = proxy_shadow_mask(&sample.p, &sample.p_prime, &sample.m_r)?;
            texture_inpaint(op, &sample.i, &sample.m_o.union(&shadow)?)
        }
    }
}
