//! Self-contained SVG charts from metrics rows. No plotting service; the
//! CSV stays the canonical artifact and these are just views of it.

use crate::run::MetricsRow;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("nothing to plot")]
    NoData,
    #[error("unknown metrics column {0:?}")]
    UnknownColumn(String),
}

/// One line on a chart, optionally with a shaded (x, low, high) band.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub band: Option<Vec<(f64, f64, f64)>>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Compact tick text: engineering suffixes above 10k, trimmed decimals below.
fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a >= 1e7 {
        format!("{}M", trim(v / 1e6))
    } else if a >= 1e4 {
        format!("{}k", trim(v / 1e3))
    } else {
        trim(v)
    }
}

fn trim(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

struct Scale {
    lo: f64,
    span: f64,
    out_lo: f64,
    out_span: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> Self {
        // degenerate ranges get a unit span so single points still land
        let span = if hi > lo { hi - lo } else { 1.0 };
        let lo = if hi > lo { lo } else { lo - 0.5 };
        Self {
            lo,
            span,
            out_lo,
            out_span: out_hi - out_lo,
        }
    }

    fn map(&self, v: f64) -> f64 {
        self.out_lo + (v - self.lo) / self.span * self.out_span
    }
}

/// Multi-series line chart as a standalone SVG document string.
pub fn line_chart(
    series: &[Series],
    title: &str,
    x_label: &str,
    y_label: &str,
) -> Result<String, PlotError> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(PlotError::NoData);
    }
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        if let Some(band) = &s.band {
            for &(x, lo, hi) in band {
                x_min = x_min.min(x);
                x_max = x_max.max(x);
                y_min = y_min.min(lo);
                y_max = y_max.max(hi);
            }
        }
    }
    let pad = 0.05 * (y_max - y_min).max(f64::EPSILON);
    let sx = Scale::new(x_min, x_max, MARGIN_L, WIDTH - MARGIN_R);
    let sy = Scale::new(y_min - pad, y_max + pad, HEIGHT - MARGIN_B, MARGIN_T);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        esc(title)
    ));

    // gridlines and tick labels, 5 per axis
    for k in 0..5 {
        let f = k as f64 / 4.0;
        let xv = sx.lo + f * sx.span;
        let yv = sy.lo + f * sy.span;
        let xp = sx.map(xv);
        let yp = sy.map(yv);
        svg.push_str(&format!(
            "<line x1=\"{xp:.1}\" y1=\"{MARGIN_T}\" x2=\"{xp:.1}\" y2=\"{}\" \
             stroke=\"#ddd\"/>\n",
            HEIGHT - MARGIN_B
        ));
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{yp:.1}\" x2=\"{}\" y2=\"{yp:.1}\" \
             stroke=\"#ddd\"/>\n",
            WIDTH - MARGIN_R
        ));
        svg.push_str(&format!(
            "<text x=\"{xp:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 8.0,
            yp + 4.0,
            fmt_tick(yv)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 10.0,
        esc(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        esc(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(band) = &s.band {
            if band.len() >= 2 {
                let mut pts = String::new();
                for &(x, _, hi) in band {
                    pts.push_str(&format!("{:.1},{:.1} ", sx.map(x), sy.map(hi)));
                }
                for &(x, lo, _) in band.iter().rev() {
                    pts.push_str(&format!("{:.1},{:.1} ", sx.map(x), sy.map(lo)));
                }
                svg.push_str(&format!(
                    "<polygon points=\"{}\" fill=\"{color}\" opacity=\"0.15\"/>\n",
                    pts.trim_end()
                ));
            }
        }
        if s.points.len() == 1 {
            let (x, y) = s.points[0];
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                sx.map(x),
                sy.map(y)
            ));
        } else if !s.points.is_empty() {
            let mut pts = String::new();
            for &(x, y) in &s.points {
                pts.push_str(&format!("{:.1},{:.1} ", sx.map(x), sy.map(y)));
            }
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                 stroke-width=\"1.5\"/>\n",
                pts.trim_end()
            ));
        }
        // legend swatch + label, one row per series
        let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_R - 130.0;
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n",
            lx + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            lx + 24.0,
            ly + 4.0,
            esc(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Figure-style learning curve: IQM line with its shaded CI band plus the
/// plain mean, both against frames.
pub fn learning_curve(rows: &[MetricsRow]) -> Result<String, PlotError> {
    if rows.is_empty() {
        return Err(PlotError::NoData);
    }
    let iqm = Series {
        label: "iqm".to_string(),
        points: rows.iter().map(|r| (r.frame as f64, r.iqm)).collect(),
        band: Some(
            rows.iter()
                .map(|r| (r.frame as f64, r.ci_low, r.ci_high))
                .collect(),
        ),
    };
    let mean = Series {
        label: "mean".to_string(),
        points: rows.iter().map(|r| (r.frame as f64, r.mean)).collect(),
        band: None,
    };
    line_chart(&[iqm, mean], "evaluation return", "frame", "episode return")
}

/// Columns a single-metric plot can address by name.
pub const METRIC_COLUMNS: &[&str] = &[
    "mean",
    "iqm",
    "loss",
    "grad_norm",
    "epsilon",
    "action_gap",
    "churn",
    "dormant_pct",
    "srank",
    "l2_total",
];

fn column(row: &MetricsRow, name: &str) -> Option<f64> {
    Some(match name {
        "mean" => row.mean,
        "iqm" => row.iqm,
        "loss" => row.loss,
        "grad_norm" => row.grad_norm,
        "epsilon" => row.epsilon,
        "action_gap" => row.action_gap,
        "churn" => row.churn,
        "dormant_pct" => row.dormant_pct,
        "srank" => row.srank,
        "l2_total" => row.l2_total,
        _ => return None,
    })
}

/// One named column over frames (dormancy, srank, loss, ...).
pub fn metric_curve(rows: &[MetricsRow], name: &str) -> Result<String, PlotError> {
    if rows.is_empty() {
        return Err(PlotError::NoData);
    }
    let points = rows
        .iter()
        .map(|r| column(r, name).map(|v| (r.frame as f64, v)))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| PlotError::UnknownColumn(name.to_string()))?;
    let series = Series {
        label: name.to_string(),
        points,
        band: None,
    };
    line_chart(&[series], name, "frame", name)
}

/// Several runs' IQM curves on one chart (ablation comparison).
pub fn comparison_chart(runs: &[(String, Vec<MetricsRow>)]) -> Result<String, PlotError> {
    let series: Vec<Series> = runs
        .iter()
        .map(|(label, rows)| Series {
            label: label.clone(),
            points: rows.iter().map(|r| (r.frame as f64, r.iqm)).collect(),
            band: None,
        })
        .collect();
    line_chart(&series, "iqm by run", "frame", "iqm")
}

pub fn write_svg(path: &Path, svg: &str) -> Result<(), PlotError> {
    std::fs::write(path, svg).map_err(|e| PlotError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
