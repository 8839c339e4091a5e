//! PSNR-versus-strength chart and merged metrics table.
//!
//! A run is given as `ARM@RHO=PATH` (for example `grid@2=runs/g2.csv`).
//! A bare `PATH` becomes arm `run` at strength equal to its position in
//! the argument list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::commands::{read_metrics, MetricRow, MEAN_ROW_LABEL};
use crate::error::{CliError, CliResult};
use crate::staging::StagedFiles;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 140.0;
const MARGIN_Y: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub arm: String,
    pub rho: f64,
    pub path: PathBuf,
}

impl RunSpec {
    pub fn parse(text: &str, position: usize) -> CliResult<Self> {
        let Some((label, path)) = text.split_once('=') else {
            return Ok(RunSpec { arm: "run".into(), rho: position as f64, path: PathBuf::from(text) });
        };
        let (arm, rho) = label
            .rsplit_once('@')
            .ok_or_else(|| CliError::config(format!("run `{text}`: expected ARM@RHO=PATH")))?;
        let rho: f64 = rho
            .parse()
            .ok()
            .filter(|r: &f64| r.is_finite())
            .ok_or_else(|| CliError::config(format!("run `{text}`: strength `{rho}` is not a number")))?;
        if arm.is_empty() || arm.contains(',') {
            return Err(CliError::config(format!("run `{text}`: bad arm name `{arm}`")));
        }
        Ok(RunSpec { arm: arm.to_string(), rho, path: PathBuf::from(path) })
    }
}

/// One loaded run: its rows and the value it contributes to the chart.
#[derive(Debug, Clone)]
pub struct Run {
    pub spec: RunSpec,
    pub rows: Vec<MetricRow>,
}

impl Run {
    /// The table's mean row, or the average of its view rows if absent.
    pub fn psnr(&self) -> f64 {
        if let Some(r) = self.rows.iter().rev().find(|r| r.view == MEAN_ROW_LABEL) {
            return r.psnr_db;
        }
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len() as f64
    }
}

/// Series keyed by arm, each a list of (rho, psnr) sorted by rho.
pub fn series(runs: &[Run]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in runs {
        out.entry(r.spec.arm.clone()).or_default().push((r.spec.rho, r.psnr()));
    }
    for pts in out.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the chart. Each arm is one `<polyline>`; higher PSNR is drawn
/// higher up (smaller y).
pub fn render_svg(runs: &[Run]) -> String {
    let s = series(runs);
    let (x0, x1) = padded_range(runs.iter().map(|r| r.spec.rho));
    let (y0, y1) = padded_range(runs.iter().map(|r| r.psnr()));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let px = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| MARGIN_Y + (y1 - y) / (y1 - y0) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN_LEFT, MARGIN_LEFT + plot_w, MARGIN_Y, MARGIN_Y + plot_h);
    let _ = writeln!(
        svg,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xv:.2}</text>"#,
            px(xv),
            bottom + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.2}</text>"#,
            left - 6.0,
            py(yv) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">perturbation strength rho</text>"#,
        left + plot_w / 2.0,
        HEIGHT - 6.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">held-out PSNR (dB)</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (i, (arm, pts)) in s.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline data-arm="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(arm),
            points.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            right + 12.0,
            right + 32.0
        );
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, right + 38.0, ly + 4.0, escape(arm));
    }
    svg.push_str("</svg>\n");
    svg
}

/// All input rows, prefixed by arm and strength.
pub fn merged_csv(runs: &[Run]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["arm", "rho", "scene", "view", "psnr_db", "ssim"])?;
    for r in runs {
        for row in &r.rows {
            w.write_record([
                r.spec.arm.clone(),
                r.spec.rho.to_string(),
                row.scene.clone(),
                row.view.clone(),
                row.psnr_db.to_string(),
                row.ssim.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| CliError::data(e.to_string()))
}

#[derive(Debug, Clone, clap::Args)]
pub struct ReportArgs {
    /// Metrics tables as `ARM@RHO=PATH` or bare paths.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<String>,
    /// SVG chart to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Merged table; defaults to the chart path with a `.csv` extension.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn merged_csv_path(out: &Path) -> PathBuf {
    out.with_extension("csv")
}

pub fn report(a: &ReportArgs) -> CliResult<String> {
    let specs = a
        .runs
        .iter()
        .enumerate()
        .map(|(i, t)| RunSpec::parse(t, i))
        .collect::<CliResult<Vec<_>>>()?;
    let csv_path = a.csv.clone().unwrap_or_else(|| merged_csv_path(&a.out));
    if csv_path == a.out {
        return Err(CliError::config("chart and merged table would share one path"));
    }
    let runs = specs
        .into_iter()
        .map(|spec| Ok(Run { rows: read_metrics(&spec.path)?, spec }))
        .collect::<CliResult<Vec<_>>>()?;
    let mut staged = StagedFiles::new();
    staged.add(&a.out, render_svg(&runs).as_bytes())?;
    staged.add(&csv_path, &merged_csv(&runs)?)?;
    staged.commit()?;
    Ok(format!(
        "{} runs in {} series; wrote {} and {}",
        runs.len(),
        series(&runs).len(),
        a.out.display(),
        csv_path.display()
    ))
}
