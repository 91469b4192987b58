use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::stats::{mean, std_err};
use crate::model::TapPoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Joint ASR and SLU finetuning.
    Mtl,
    /// SLU loss only; the ASR loss weight is zero.
    SluOnly,
    /// ASR transcripts fed to a text classifier.
    Pipeline,
    /// The text classifier on gold transcripts.
    Nlp,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Mtl => "mtl",
            Arm::SluOnly => "slu_only",
            Arm::Pipeline => "pipeline",
            Arm::Nlp => "nlp",
        }
    }

    pub fn is_cascade(self) -> bool {
        matches!(self, Arm::Pipeline | Arm::Nlp)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub size: usize,
    pub fold: usize,
    pub arm: Arm,
    pub tap: TapPoint,
    pub metric: String,
    pub value: f64,
}

/// Aggregate over folds for one `(size, arm, tap, metric)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub size: usize,
    pub arm: Arm,
    pub tap: TapPoint,
    pub metric: String,
    pub folds: usize,
    pub mean: f64,
    /// One standard error, the half-width of the 68% band.
    pub std_err: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveReport {
    pub config_hash: String,
    pub seed: u64,
    /// Headline metric name (`accuracy` or `macro_f1`).
    pub metric: String,
    pub rows: Vec<CurveRow>,
}

pub const CSV_HEADER: &str = "size,fold,arm,tap,metric,value";

impl CurveReport {
    /// Rows in the fixed column order, then a provenance comment line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.size, r.fold, r.arm, r.tap, r.metric, r.value
            );
        }
        let _ = writeln!(out, "# config_hash={} seed={}", self.config_hash, self.seed);
        out
    }

    /// Values of `metric` for one cell group, ordered by fold.
    pub fn values(&self, size: usize, arm: Arm, tap: Option<TapPoint>, metric: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.size == size && r.arm == arm && r.metric == metric && tap.is_none_or(|t| r.tap == t))
            .map(|r| (r.fold, r.value))
            .collect();
        v.sort_by_key(|&(fold, _)| fold);
        v
    }

    pub fn summary(&self) -> Vec<CurvePoint> {
        type Key = (String, usize, Arm, String);
        let mut groups: BTreeMap<Key, (TapPoint, Vec<f64>)> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.metric.clone(), r.size, r.arm, r.tap.to_string()))
                .or_insert_with(|| (r.tap, Vec::new()))
                .1
                .push(r.value);
        }
        groups
            .into_iter()
            .map(|((metric, size, arm, _), (tap, values))| {
                let (m, se) = (mean(&values), std_err(&values));
                CurvePoint {
                    size,
                    arm,
                    tap,
                    metric,
                    folds: values.len(),
                    mean: m,
                    std_err: se,
                    lo: m - se,
                    hi: m + se,
                }
            })
            .collect()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.config_hash,
            "seed": self.seed,
            "metric": self.metric,
            "points": self.summary(),
        })
    }

    /// Line plot of the headline metric against train size, one line per
    /// arm and tap, with the 68% band shaded.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 50.0;
        const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
        let points: Vec<CurvePoint> = self.summary().into_iter().filter(|p| p.metric == self.metric).collect();
        let mut sizes: Vec<usize> = points.iter().map(|p| p.size).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let x_of = |size: usize| {
            let i = sizes.iter().position(|&s| s == size).unwrap_or(0);
            if sizes.len() < 2 {
                W / 2.0
            } else {
                PAD + i as f64 * (W - 2.0 * PAD) / (sizes.len() - 1) as f64
            }
        };
        let y_of = |v: f64| H - PAD - v.clamp(0.0, 1.0) * (H - 2.0 * PAD);

        let mut series: BTreeMap<(Arm, String), Vec<&CurvePoint>> = BTreeMap::new();
        for p in &points {
            series.entry((p.arm, p.tap.to_string())).or_default().push(p);
        }
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(svg, "<!-- config_hash={} seed={} -->", self.config_hash, self.seed);
        svg.push_str("<!-- data\nsize,arm,tap,mean,lo,hi,folds\n");
        for p in &points {
            let _ = writeln!(
                svg,
                "{},{},{},{},{},{},{}",
                p.size, p.arm, p.tap, p.mean, p.lo, p.hi, p.folds
            );
        }
        svg.push_str("-->\n");
        let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
            H - PAD,
            W - PAD,
            H - PAD,
            H - PAD
        );
        for tick in 0..=4 {
            let v = tick as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v:.2}</text>"#,
                PAD - 6.0,
                y_of(v) + 4.0
            );
        }
        for &s in &sizes {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{s}</text>"#,
                x_of(s),
                H - PAD + 16.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">examples per class</text>"#,
            W / 2.0,
            H - 12.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
            H / 2.0,
            H / 2.0,
            self.metric
        );
        for (i, ((arm, tap), pts)) in series.iter().enumerate() {
            let colour = COLOURS[i % COLOURS.len()];
            let upper: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.1},{:.1}", x_of(p.size), y_of(p.hi)))
                .collect();
            let lower: Vec<String> = pts
                .iter()
                .rev()
                .map(|p| format!("{:.1},{:.1}", x_of(p.size), y_of(p.lo)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{} {}" fill="{colour}" fill-opacity="0.2" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
            let line: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.1},{:.1}", x_of(p.size), y_of(p.mean)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
                line.join(" ")
            );
            let label = if arm.is_cascade() {
                arm.to_string()
            } else {
                format!("{arm} ({tap})")
            };
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{label}</text>"#,
                PAD + 10.0,
                PAD + 16.0 * i as f64
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}
