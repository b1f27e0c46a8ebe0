//! Signature description diagrams: top contributing channels with
//! original-space effects, plus an expression histogram.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ehr::ChannelId;
use crate::ica::IcaModel;
use crate::sampler::{RowStandardizer, RowTransform, Standardizer};
use crate::{stats, Error, Result};

/// Target standard deviation of rescaled expressions.
pub const EXPRESSION_SD: f64 = 0.5;
pub const HISTOGRAM_BINS: usize = 50;

/// Original-space effect of a loading at a given expression level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChangeDescriptor {
    /// Intensity multiplied by `per_unit_factor` per unit of expression.
    Multiplicative { per_unit_factor: f64, expression: f64, total_factor: f64 },
    /// Value shifted by `per_unit` per unit of expression.
    Additive { per_unit: f64, expression: f64, total_change: f64 },
    /// Probability shift, clamped to [−1, 1].
    Probability { per_unit: f64, expression: f64, total_change: f64 },
}

/// Maps `loading × expression` in standardized units back through the
/// channel's transform.
pub fn back_transform_change(row: &RowStandardizer, loading: f64, expression: f64) -> ChangeDescriptor {
    match row.transform {
        RowTransform::LogAffine => {
            let per_unit_factor = (loading * row.scale).exp();
            ChangeDescriptor::Multiplicative { per_unit_factor, expression, total_factor: per_unit_factor.powf(expression) }
        }
        RowTransform::Affine => {
            let per_unit = loading * row.scale;
            ChangeDescriptor::Additive { per_unit, expression, total_change: expression * per_unit }
        }
        RowTransform::Identity if row.channel.is_binary() => ChangeDescriptor::Probability {
            per_unit: loading,
            expression,
            total_change: (expression * loading).clamp(-1.0, 1.0),
        },
        RowTransform::Identity => {
            ChangeDescriptor::Additive { per_unit: loading, expression, total_change: expression * loading }
        }
    }
}

/// Multiplies each expression row by `c_j = 0.5 / SD_j` and divides the
/// matching signature by `c_j`, leaving `A·S` unchanged. Returns the
/// rescaled model and the factors.
pub fn rescale_to_half_sd(model: &IcaModel, sources: &DMatrix<f64>) -> Result<(IcaModel, Vec<f64>)> {
    if sources.nrows() != model.k() {
        return Err(Error::DimensionMismatch { expected: model.k(), got: sources.nrows() });
    }
    let factors: Vec<f64> = (0..model.k())
        .map(|j| {
            let row: Vec<f64> = sources.row(j).iter().copied().collect();
            let sd = stats::std_pop(&row);
            if sd > 0.0 {
                EXPRESSION_SD / sd
            } else {
                1.0
            }
        })
        .collect();
    let mut out = model.clone();
    for (j, c) in factors.iter().enumerate() {
        out.mixing.column_mut(j).scale_mut(1.0 / c);
        out.unmixing.row_mut(j).scale_mut(*c);
    }
    Ok((out, factors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// `ln(1 + count)` per bin.
    pub log_counts: Vec<f64>,
}

/// Equal-width histogram over the data range; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let (mut lo, mut hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if values.is_empty() {
        (lo, hi) = (0.0, 1.0);
    } else if lo == hi {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0; bins];
    for v in values {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let log_counts = counts.iter().map(|&c| (1.0 + c as f64).ln()).collect();
    Histogram { edges, counts, log_counts }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramEntry {
    pub channel: ChannelId,
    /// Rescaled loading (standardized units per unit of expression).
    pub loading: f64,
    /// Loading divided by the largest |loading| among the entries.
    pub normalized_change: f64,
    pub per_unit: ChangeDescriptor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureDiagram {
    pub signature_index: usize,
    pub signature_id: String,
    /// Factor applied to raw expressions.
    pub expression_scale: f64,
    pub entries: Vec<DiagramEntry>,
    pub histogram: Histogram,
    pub fraction_within_unit: f64,
}

/// Diagram for one signature. `expressions` are the raw expressions of that
/// source over the discovery cross-sections.
pub fn signature_diagram(
    model: &IcaModel,
    standardizer: &Standardizer,
    expressions: &[f64],
    signature_index: usize,
    top_m: usize,
) -> Result<SignatureDiagram> {
    if signature_index >= model.k() {
        return Err(Error::invalid(format!("signature {signature_index} out of range (k = {})", model.k())));
    }
    if standardizer.p() != model.p() {
        return Err(Error::DimensionMismatch { expected: model.p(), got: standardizer.p() });
    }
    if top_m == 0 {
        return Err(Error::invalid("top_m must be at least 1"));
    }
    let sd = stats::std_pop(expressions);
    let scale = if sd > 0.0 { EXPRESSION_SD / sd } else { 1.0 };
    let rescaled: Vec<f64> = expressions.iter().map(|e| e * scale).collect();
    let loadings: Vec<f64> = model.mixing.column(signature_index).iter().map(|a| a / scale).collect();

    let rows = &standardizer.rows;
    let mut order: Vec<usize> = (0..loadings.len()).collect();
    order.sort_by(|&a, &b| {
        loadings[b].abs().total_cmp(&loadings[a].abs()).then_with(|| rows[a].channel.name.cmp(&rows[b].channel.name))
    });
    order.truncate(top_m);
    let max_abs = order.iter().map(|&j| loadings[j].abs()).fold(0.0, f64::max);
    let entries = order
        .iter()
        .map(|&j| DiagramEntry {
            channel: rows[j].channel.clone(),
            loading: loadings[j],
            normalized_change: if max_abs > 0.0 { loadings[j] / max_abs } else { 0.0 },
            per_unit: back_transform_change(&rows[j], loadings[j], 1.0),
        })
        .collect();
    let within = rescaled.iter().filter(|e| e.abs() <= 1.0).count() as f64 / rescaled.len().max(1) as f64;
    Ok(SignatureDiagram {
        signature_index,
        signature_id: format!("source_{signature_index}"),
        expression_scale: scale,
        entries,
        histogram: histogram(&rescaled, HISTOGRAM_BINS),
        fraction_within_unit: within,
    })
}

fn describe(change: &ChangeDescriptor) -> String {
    match change {
        ChangeDescriptor::Multiplicative { per_unit_factor, .. } => format!("×{per_unit_factor:.3}"),
        ChangeDescriptor::Additive { per_unit, .. } => format!("{per_unit:+.3}"),
        ChangeDescriptor::Probability { total_change, .. } => format!("p {total_change:+.3}"),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static SVG: one horizontal bar per entry with `|normalized| ≥ cutoff`,
/// and the log-count histogram on the right.
pub fn render_svg(diagram: &SignatureDiagram, cutoff: f64) -> String {
    let shown: Vec<&DiagramEntry> = diagram.entries.iter().filter(|e| e.normalized_change.abs() >= cutoff).collect();
    let (row_h, label_w, bar_w, hist_w) = (22.0, 260.0, 220.0, 240.0);
    let height = 60.0 + row_h * shown.len().max(6) as f64;
    let width = label_w + 2.0 * bar_w + hist_w + 60.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape(&diagram.signature_id));
    let axis = label_w + bar_w;
    let _ = writeln!(s, r#"<line x1="{axis}" y1="34" x2="{axis}" y2="{}" stroke="black"/>"#, height - 10.0);
    for (i, e) in shown.iter().enumerate() {
        let y = 40.0 + row_h * i as f64;
        let len = e.normalized_change.abs() * bar_w;
        let x = if e.normalized_change >= 0.0 { axis } else { axis - len };
        let fill = if e.normalized_change >= 0.0 { "#c0392b" } else { "#2e86c1" };
        let _ = writeln!(s, r#"<rect x="{x:.2}" y="{y:.2}" width="{len:.2}" height="{:.2}" fill="{fill}"/>"#, row_h - 6.0);
        let _ = writeln!(s, r#"<text x="10" y="{:.2}">{}</text>"#, y + 12.0, escape(&e.channel.to_string()));
        let tx = if e.normalized_change >= 0.0 { axis + len + 4.0 } else { axis - len - 60.0 };
        let _ = writeln!(s, r#"<text x="{tx:.2}" y="{:.2}">{}</text>"#, y + 12.0, escape(&describe(&e.per_unit)));
    }
    let hx = label_w + 2.0 * bar_w + 40.0;
    let h = &diagram.histogram;
    let top = h.log_counts.iter().copied().fold(0.0, f64::max).max(1e-12);
    let bw = hist_w / h.counts.len() as f64;
    let base = height - 20.0;
    let hist_h = height - 70.0;
    for (b, lc) in h.log_counts.iter().enumerate() {
        let bh = lc / top * hist_h;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="#7f8c8d"/>"##,
            hx + bw * b as f64,
            base - bh,
            bw
        );
    }
    let _ = writeln!(s, r#"<text x="{hx}" y="{:.2}">expression (log count)</text>"#, height - 4.0);
    s.push_str("</svg>\n");
    s
}
