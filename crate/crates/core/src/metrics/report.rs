use std::fmt::Write as _;

use super::{ClassMetrics, ConfusionCounts, PrCurve};
use crate::error::{Error, Result};

pub const TABLE_COLUMNS: [&str; 6] = ["AP", "AP50", "AP75", "Recall", "F1-score", "Fps"];
pub const CURVE_HEADER: &str = "threshold,precision,recall,f1";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// TP / (TP + FP), sometimes labelled accuracy.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fps: Option<f64>,
    pub counts: ConfusionCounts,
    pub conf_threshold: f64,
    pub num_images: usize,
    /// Pooled over classes, IoU 0.5.
    pub curve: PrCurve,
    pub classes: Vec<ClassMetrics>,
}

/// The six summary columns. Rates are fractions; fps is images per second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableRow {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub recall: f64,
    pub f1: f64,
    pub fps: Option<f64>,
}

fn fmt_fps(fps: Option<f64>) -> String {
    match fps {
        None => "-".into(),
        Some(f) if f.fract() == 0.0 => format!("{f}"),
        Some(f) => format!("{f:.1}"),
    }
}

impl TableRow {
    pub fn header() -> String {
        format!("| {} |", TABLE_COLUMNS.join(" | "))
    }

    /// Rates as percentages with one decimal.
    pub fn render(&self) -> String {
        let pct = |v: f64| format!("{:.1}", v * 100.0);
        format!(
            "| {} | {} | {} | {} | {} | {} |",
            pct(self.ap),
            pct(self.ap50),
            pct(self.ap75),
            pct(self.recall),
            pct(self.f1),
            fmt_fps(self.fps)
        )
    }
}

pub fn parse_table_row(line: &str) -> Result<TableRow> {
    let cells: Vec<&str> = line
        .trim()
        .trim_matches('|')
        .split('|')
        .map(str::trim)
        .collect();
    if cells.len() != TABLE_COLUMNS.len() {
        return Err(Error::InvalidArgument(format!(
            "table row needs {} cells, got {}",
            TABLE_COLUMNS.len(),
            cells.len()
        )));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad table cell `{s}`")))
    };
    let fps = match cells[5] {
        "-" => None,
        s => Some(num(s)?),
    };
    Ok(TableRow {
        ap: num(cells[0])? / 100.0,
        ap50: num(cells[1])? / 100.0,
        ap75: num(cells[2])? / 100.0,
        recall: num(cells[3])? / 100.0,
        f1: num(cells[4])? / 100.0,
        fps,
    })
}

impl EvalReport {
    pub fn table_row(&self) -> TableRow {
        TableRow {
            ap: self.ap,
            ap50: self.ap50,
            ap75: self.ap75,
            recall: self.recall,
            f1: self.f1,
            fps: self.fps,
        }
    }

    /// Key-value summary, the six-column row, then the per-class table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images = {}", self.num_images);
        let _ = writeln!(s, "conf_threshold = {}", self.conf_threshold);
        let _ = writeln!(s, "ap = {:.6}", self.ap);
        let _ = writeln!(s, "ap50 = {:.6}", self.ap50);
        let _ = writeln!(s, "ap75 = {:.6}", self.ap75);
        let _ = writeln!(s, "precision = {:.6}  # also called accuracy: TP / (TP + FP)", self.precision);
        let _ = writeln!(s, "recall = {:.6}", self.recall);
        let _ = writeln!(s, "f1 = {:.6}", self.f1);
        let _ = writeln!(s, "tp = {}", self.counts.tp);
        let _ = writeln!(s, "fp = {}", self.counts.fp);
        let _ = writeln!(s, "fn = {}", self.counts.fn_);
        if let Some(f) = self.fps {
            let _ = writeln!(s, "fps = {f:.2}");
        }
        s.push('\n');
        let _ = writeln!(s, "{}", TableRow::header());
        let _ = writeln!(s, "{}", self.table_row().render());
        s.push('\n');
        let _ = writeln!(s, "| class | gt | AP | AP50 | AP75 | Precision | Recall | F1-score |");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "| {} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} |",
                c.name,
                c.num_gt,
                c.ap * 100.0,
                c.ap50 * 100.0,
                c.ap75 * 100.0,
                c.precision * 100.0,
                c.recall * 100.0,
                c.f1 * 100.0
            );
        }
        s
    }
}

/// Header plus one row per threshold.
pub fn curve_csv(curve: &PrCurve) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{},{}", p.threshold, p.precision, p.recall, p.f1());
    }
    s
}

/// Precision against recall as a standalone SVG polyline.
pub fn curve_svg(curve: &PrCurve, title: &str) -> String {
    const W: f64 = 320.0;
    const M: f64 = 40.0;
    let pts: String = std::iter::once((0.0, curve.points.first().map_or(1.0, |p| p.precision)))
        .chain(curve.points.iter().map(|p| (p.recall, p.precision)))
        .map(|(r, p)| format!("{:.2},{:.2} ", M + r * W, M + (1.0 - p) * W))
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\">\n",
            "<rect x=\"{m}\" y=\"{m}\" width=\"{w}\" height=\"{w}\" fill=\"none\" stroke=\"#888\"/>\n",
            "<text x=\"{m}\" y=\"24\" font-size=\"14\">{title}</text>\n",
            "<text x=\"{m}\" y=\"{xl}\" font-size=\"12\">recall</text>\n",
            "<text x=\"4\" y=\"{m}\" font-size=\"12\">precision</text>\n",
            "<polyline fill=\"none\" stroke=\"#c33\" stroke-width=\"2\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        s = W + 2.0 * M,
        m = M,
        w = W,
        xl = W + M + 24.0,
        title = title,
        pts = pts.trim_end()
    )
}
