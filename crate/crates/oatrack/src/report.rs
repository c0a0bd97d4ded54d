//! Result and metric files.
//!
//! Per-sequence result JSON carries one box per frame (frame 0 is the
//! annotation), the per-frame tracker output and the run report. Every
//! wall-clock measurement lives in a field whose name starts with
//! `wall_clock`; nothing else in the file depends on timing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use oatrack_core::metrics::Curve;
use oatrack_core::{BBox, MetricReport, RunReport, TrackResult};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub sequence: String,
    pub attributes: Vec<String>,
    /// Flat run configuration the sequence was tracked with.
    pub config: Value,
    /// `[x, y, w, h]` for every frame, 0-indexed pixels.
    pub boxes: Vec<[f64; 4]>,
    pub frames: Vec<TrackResult>,
    pub report: RunReport,
}

impl SequenceResult {
    pub fn new(
        sequence: &str,
        attributes: &[String],
        config: Value,
        first_box: BBox,
        frames: Vec<TrackResult>,
        report: RunReport,
    ) -> Self {
        let mut boxes = Vec::with_capacity(frames.len() + 1);
        boxes.push(to_array(&first_box));
        boxes.extend(frames.iter().map(|r| to_array(&r.bbox)));
        Self { sequence: sequence.into(), attributes: attributes.to_vec(), config, boxes, frames, report }
    }

    pub fn predicted_boxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect()
    }
}

fn to_array(b: &BBox) -> [f64; 4] {
    [b.x, b.y, b.w, b.h]
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_result(path: &Path) -> Result<SequenceResult> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
}

/// Removes every object key starting with `wall_clock`, recursively.
pub fn strip_wall_clock(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.retain(|k, _| !k.starts_with("wall_clock"));
            m.values_mut().for_each(strip_wall_clock);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}

/// `threshold,value` rows under a header.
pub fn curve_csv(curve: &Curve) -> String {
    let mut s = String::from("threshold,value\n");
    for (t, v) in curve.thresholds.iter().zip(&curve.values) {
        let _ = writeln!(s, "{},{}", t, v);
    }
    s
}

/// Writes `metrics.json` plus `precision.csv` / `success.csv` and one pair
/// per attribute tag (`precision_<tag>.csv`, `success_<tag>.csv`).
pub fn write_metrics(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("metrics.json"), report)?;
    let put = |name: String, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    put("precision.csv".into(), curve_csv(&report.overall.precision))?;
    put("success.csv".into(), curve_csv(&report.overall.success))?;
    for (tag, m) in &report.attributes {
        let safe: String = tag.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
        put(format!("precision_{}.csv", safe), curve_csv(&m.precision))?;
        put(format!("success_{}.csv", safe), curve_csv(&m.success))?;
    }
    Ok(())
}
