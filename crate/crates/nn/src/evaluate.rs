//! Evaluation of removal methods on prepared scenes and report files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use unshadow_core::dataset::PreparedSample;
use unshadow_core::eval::{report_csv, report_table, run_baseline, Baseline, MetricsReport, SceneMetrics};
use unshadow_core::inpaint::InpaintOperator;
use unshadow_core::io::encode_pfm;
use unshadow_core::util::{canonical_json, write_atomic};
use unshadow_core::ImageBuffer;

use crate::error::{NnError, Result};
use crate::pipeline::{run_pipeline, PipelineInput, PipelineState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Baseline(Baseline),
    Pipeline,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Baseline(Baseline::Noop),
        Method::Baseline(Baseline::Inpaint),
        Method::Baseline(Baseline::InpaintShadow),
        Method::Pipeline,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline(b) => b.label(),
            Method::Pipeline => "pipeline",
        }
    }

    /// Parses a comma-separated method list, keeping its order.
    pub fn parse_list(list: &str) -> Result<Vec<Method>> {
        list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL.into_iter().find(|m| m.label() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.label()).collect();
            NnError::Config(format!("unknown method {s:?}; available methods: {}", names.join(", ")))
        })
    }
}

/// Output of one method on one scene, in display space.
pub fn predict(method: Method, sample: &PreparedSample, state: Option<&PipelineState>, op: &dyn InpaintOperator) -> Result<ImageBuffer> {
    match method {
        Method::Baseline(b) => Ok(run_baseline(b, sample, op)?),
        Method::Pipeline => {
            let state = state.ok_or_else(|| NnError::Config("the pipeline method needs a checkpoint".into()))?;
            let input = PipelineInput {
                i: &sample.i,
                p: &sample.p,
                p_prime: &sample.p_prime,
                m_o: &sample.m_o,
                m_r: &sample.m_r,
            };
            Ok(run_pipeline(&input, state, op)?.i_prime)
        }
    }
}

/// Metrics of one method over every scene, with each scene's prediction.
pub struct MethodResult {
    pub report: MetricsReport,
    pub outputs: Vec<ImageBuffer>,
}

pub fn evaluate(
    method: Method,
    samples: &[PreparedSample],
    state: Option<&PipelineState>,
    op: &dyn InpaintOperator,
    threshold: f32,
) -> Result<MethodResult> {
    let mut scenes = Vec::with_capacity(samples.len());
    let mut outputs = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict(method, s, state, op)?;
        scenes.push(SceneMetrics::compute(&s.scene_id, &pred, &s.i_hat_prime, &s.s_hat, &s.m_o, threshold)?);
        outputs.push(pred);
    }
    Ok(MethodResult {
        report: MetricsReport::new(method.label(), scenes),
        outputs,
    })
}

#[derive(Serialize)]
struct SceneRecord<'a> {
    method: &'a str,
    config_hash: &'a str,
    version: &'a str,
    metrics: &'a SceneMetrics,
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    config_hash: &'a str,
    version: &'a str,
    reports: &'a [MetricsReport],
}

fn put(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| NnError::io(dir, e))?;
    }
    write_atomic(path, bytes).map_err(|e| NnError::io(path, e))
}

/// Writes `report.csv`, `report.txt`, `report.json` and, per method and
/// scene, `<method>/<scene>/i_prime.pfm` next to its `metrics.json`.
pub fn write_reports(out: &Path, results: &[MethodResult], config_hash: &str) -> Result<()> {
    let version = env!("CARGO_PKG_VERSION");
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.report.clone()).collect();
    put(&out.join("report.csv"), report_csv(&reports).as_bytes())?;
    let table = format!("{}config {config_hash}\n", report_table(&reports));
    put(&out.join("report.txt"), table.as_bytes())?;
    let record = ReportRecord {
        config_hash,
        version,
        reports: &reports,
    };
    put(&out.join("report.json"), canonical_json(&record)?.as_bytes())?;
    for r in results {
        for (m, img) in r.report.scenes.iter().zip(&r.outputs) {
            let dir = out.join(&r.report.method).join(&m.scene_id);
            put(&dir.join("i_prime.pfm"), &encode_pfm(img)?)?;
            let rec = SceneRecord {
                method: &r.report.method,
                config_hash,
                version,
                metrics: m,
            };
            put(&dir.join("metrics.json"), canonical_json(&rec)?.as_bytes())?;
        }
    }
    Ok(())
}
