//! Text tables, JSON Lines record streams and the external-metric hook.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::overlap::IouReport;
use crate::data::reference::cosine_similarity;
use crate::encoder::{extract_features, ExtractorSpec};
use crate::error::Result;
use crate::raster::Raster;

/// A scorer of one stylization, e.g. a wrapper around an external model.
pub trait MetricPlugin {
    fn name(&self) -> &str;
    fn score(&self, content: &Raster, style: &Raster, output: &Raster) -> Result<f64>;
}

/// Cosine between the surrogate style features of the reference and the output.
pub struct StyleFeatureCosine;

impl MetricPlugin for StyleFeatureCosine {
    fn name(&self) -> &str {
        "style_feature_cosine"
    }

    fn score(&self, _content: &Raster, style: &Raster, output: &Raster) -> Result<f64> {
        let spec = ExtractorSpec { size: style.width() };
        let a = extract_features(style, &spec)?.concat();
        let b = extract_features(output, &spec)?.concat();
        Ok(cosine_similarity(&a, &b))
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}%", 100.0 * v))
}

/// Stage × {similar, dissimilar} table followed by the per-layer values.
pub fn render_iou_table(r: &IouReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Expert routing overlap (IoU), {} samples, {} skipped", r.samples, r.skipped);
    let _ = writeln!(s, "{:<10} {:>10} {:>12}", "stage", "similar", "dissimilar");
    for st in &r.stages {
        let _ = writeln!(s, "{:<10} {:>10} {:>12}", st.stage, pct(st.similar), pct(st.dissimilar));
    }
    let _ = writeln!(
        s,
        "{:<10} {:>10} {:>12}",
        "overall",
        pct(Some(r.overall_similar)),
        pct(Some(r.overall_dissimilar))
    );
    let _ = writeln!(s);
    for (i, name) in r.layers.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<20} {:>10} {:>12}",
            name,
            pct(Some(r.per_layer_similar[i])),
            pct(Some(r.per_layer_dissimilar[i]))
        );
    }
    s
}

/// One JSON object per line.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}
