//! Box plots and summary tables from metric CSVs.
//!
//! Each metric column becomes one SVG with a box per input file: the box
//! spans the quartiles, whiskers reach the furthest points within 1.5 IQR,
//! the black line marks the median and the red line the mean.

use std::path::{Path, PathBuf};

use bsfa_core::metrics::{mean, median};

use crate::commands::report_hash;
use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

/// One metric CSV: its column names and numeric cells per image row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCsv {
    pub name: String,
    pub columns: Vec<String>,
    /// `rows[i][j]` is column `j` of image `i`; empty cells are `None`.
    pub rows: Vec<Vec<Option<f64>>>,
}

impl ParsedCsv {
    /// Parses the eval output format. Comment lines and the trailing
    /// `mean`/`median` summary rows are skipped.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| CliError::Usage(format!("{name}:{line}: {msg}"));
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (_, header) = lines.next().ok_or_else(|| bad(0, "no header"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("id") {
            return Err(bad(0, "first column must be 'id'"));
        }
        let columns: Vec<String> = cols.map(String::from).collect();
        let mut rows = Vec::new();
        for (n, line) in lines {
            let mut cells = line.split(',');
            let id = cells.next().unwrap_or_default();
            if id == "mean" || id == "median" {
                continue;
            }
            let values = cells
                .map(|c| {
                    let c = c.trim();
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>().map(Some).map_err(|_| bad(n + 1, &format!("'{c}' is not a number")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != columns.len() {
                return Err(bad(n + 1, "wrong number of cells"));
            }
            rows.push(values);
        }
        Ok(Self {
            name: name.to_string(),
            columns,
            rows,
        })
    }

    /// Finite values of column `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r[j]).filter(|v| v.is_finite()).collect()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

impl BoxStats {
    pub fn new(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let (q1, q3) = (quantile(&s, 0.25), quantile(&s, 0.75));
        let fence = 1.5 * (q3 - q1);
        let inside: Vec<f64> = s.iter().copied().filter(|v| *v >= q1 - fence && *v <= q3 + fence).collect();
        Some(Self {
            n: s.len(),
            mean: mean(values),
            median: median(&s),
            q1,
            q3,
            whisker_lo: inside.first().copied().unwrap_or(q1),
            whisker_hi: inside.last().copied().unwrap_or(q3),
            outliers: s.iter().copied().filter(|v| *v < q1 - fence || *v > q3 + fence).collect(),
        })
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// File-system safe version of a column name.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Renders one metric's boxes. Each box's group carries `data-mean` and
/// `data-median` attributes with the exact values.
pub fn box_plot_svg(metric: &str, boxes: &[(String, BoxStats)], hash: &str) -> String {
    let (w_box, left, top, plot_h) = (110.0, 70.0, 40.0, 260.0);
    let width = left + w_box * boxes.len() as f64 + 20.0;
    let height = top + plot_h + 70.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, b) in boxes {
        for v in [b.whisker_lo, b.whisker_hi, b.mean].iter().chain(&b.outliers) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| top + plot_h * (hi - v) / (hi - lo);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <!-- config_hash: {hash} -->\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"#444\"/>\n",
        width / 2.0,
        escape(metric),
        top + plot_h
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{v:.3}</text>\n",
            left - 6.0,
            y(v) + 4.0
        ));
    }
    for (i, (name, b)) in boxes.iter().enumerate() {
        let cx = left + w_box * (i as f64 + 0.5);
        let (x0, x1) = (cx - 30.0, cx + 30.0);
        s.push_str(&format!(
            "<g class=\"box\" data-name=\"{}\" data-n=\"{}\" data-mean=\"{}\" data-median=\"{}\">\n",
            escape(name),
            b.n,
            b.mean,
            b.median
        ));
        s.push_str(&format!(
            "<line x1=\"{cx}\" y1=\"{:.2}\" x2=\"{cx}\" y2=\"{:.2}\" stroke=\"#444\"/>\n\
             <line x1=\"{cx}\" y1=\"{:.2}\" x2=\"{cx}\" y2=\"{:.2}\" stroke=\"#444\"/>\n",
            y(b.whisker_hi),
            y(b.q3),
            y(b.q1),
            y(b.whisker_lo)
        ));
        s.push_str(&format!(
            "<rect x=\"{x0}\" y=\"{:.2}\" width=\"60\" height=\"{:.2}\" fill=\"#cfe0f3\" stroke=\"#444\"/>\n",
            y(b.q3),
            (y(b.q1) - y(b.q3)).max(0.5)
        ));
        s.push_str(&format!(
            "<line class=\"median\" x1=\"{x0}\" y1=\"{0:.2}\" x2=\"{x1}\" y2=\"{0:.2}\" stroke=\"black\" stroke-width=\"2\"/>\n",
            y(b.median)
        ));
        s.push_str(&format!(
            "<line class=\"mean\" x1=\"{x0}\" y1=\"{0:.2}\" x2=\"{x1}\" y2=\"{0:.2}\" stroke=\"red\" stroke-width=\"2\"/>\n",
            y(b.mean)
        ));
        for o in &b.outliers {
            s.push_str(&format!(
                "<circle cx=\"{cx}\" cy=\"{:.2}\" r=\"2.5\" fill=\"none\" stroke=\"#444\"/>\n",
                y(*o)
            ));
        }
        let base = top + plot_h;
        s.push_str(&format!(
            "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">median {:.4}</text>\n\
             <text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\" fill=\"red\">mean {:.4}</text>\n</g>\n",
            base + 18.0,
            escape(name),
            base + 34.0,
            b.median,
            base + 50.0,
            b.mean
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub plots: Vec<PathBuf>,
    pub table: PathBuf,
}

fn input_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| path.display().to_string())
}

/// Writes one SVG per metric and a Markdown summary into `cfg.run.out_dir`.
pub fn cmd_report(cfg: &RunConfig, csvs: &[PathBuf]) -> Result<ReportSummary> {
    if csvs.is_empty() {
        return Err(CliError::Usage("report needs at least one CSV".into()));
    }
    let mut texts = Vec::new();
    for p in csvs {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        texts.push((input_name(p), text));
    }
    let parsed = texts.iter().map(|(n, t)| ParsedCsv::parse(n, t)).collect::<Result<Vec<_>>>()?;
    let columns = parsed[0].columns.clone();
    if parsed.iter().any(|p| p.columns != columns) {
        return Err(CliError::Usage("input CSVs have different columns".into()));
    }
    let hash = report_hash(cfg, &texts);
    let out = &cfg.run.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;

    let mut plots = Vec::new();
    let mut table = format!(
        "<!-- config_hash: {hash} -->\n\n| metric | input | n | mean | median |\n|---|---|---|---|---|\n"
    );
    for (j, metric) in columns.iter().enumerate() {
        let boxes: Vec<(String, BoxStats)> = parsed
            .iter()
            .filter_map(|p| BoxStats::new(&p.column(j)).map(|b| (p.name.clone(), b)))
            .collect();
        if boxes.is_empty() {
            continue;
        }
        for (name, b) in &boxes {
            table.push_str(&format!("| {metric} | {name} | {} | {:.6} | {:.6} |\n", b.n, b.mean, b.median));
        }
        let path = out.join(format!("{}.svg", slug(metric)));
        std::fs::write(&path, box_plot_svg(metric, &boxes, &hash)).map_err(io_err(&path))?;
        plots.push(path);
    }
    let table_path = out.join("summary.md");
    std::fs::write(&table_path, table).map_err(io_err(&table_path))?;
    Ok(ReportSummary {
        plots,
        table: table_path,
    })
}
