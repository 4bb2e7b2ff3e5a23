//! Hand-written SVG line charts. Output depends only on the input data, so
//! re-rendering the same inputs gives byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use fmocc::metrics::MetricsDocument;
use fmocc::pipeline::TRAIN_LOG;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

type Series = BTreeMap<String, Vec<(f64, f64)>>;

#[derive(Default)]
struct Inputs {
    metrics: Vec<PathBuf>,
    logs: Vec<PathBuf>,
}

fn is_metrics_file(p: &Path) -> bool {
    p.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("metrics_") && n.ends_with(".txt"))
}

fn collect(path: &Path, into: &mut Inputs) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| path.display().to_string())?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .with_context(|| path.display().to_string())?;
        entries.sort();
        for e in entries {
            if e.is_dir() || is_metrics_file(&e) || e.file_name().is_some_and(|n| n == TRAIN_LOG) {
                collect(&e, into)?;
            }
        }
    } else if path.is_file() {
        if path.file_name().is_some_and(|n| n == TRAIN_LOG) {
            into.logs.push(path.to_path_buf());
        } else {
            into.metrics.push(path.to_path_buf());
        }
    } else {
        bail!("{}: no such file or directory", path.display());
    }
    Ok(())
}

fn parent_name(p: &Path) -> String {
    p.parent()
        .and_then(|d| d.file_name())
        .and_then(|n| n.to_str())
        .unwrap_or("run")
        .to_string()
}

fn robustness_series(files: &[PathBuf]) -> Result<Series> {
    let mut out = Series::new();
    for f in files {
        let text = fs::read_to_string(f).with_context(|| f.display().to_string())?;
        let doc = MetricsDocument::parse(&text).with_context(|| f.display().to_string())?;
        let ratio = doc.number("mask_ratio").with_context(|| f.display().to_string())?;
        let miou = doc.number("miou").with_context(|| f.display().to_string())?;
        // Eval output sits in <run>/eval, so the grandparent names the run.
        let run = match doc.entries.get("run") {
            Some(r) => r.clone(),
            None => f.parent().map(parent_name).unwrap_or_else(|| "run".into()),
        };
        out.entry(run).or_default().push((ratio, miou));
    }
    for pts in out.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(out)
}

fn loss_series(files: &[PathBuf]) -> Result<Series> {
    let mut out = Series::new();
    for f in files {
        let text = fs::read_to_string(f).with_context(|| f.display().to_string())?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| *h == name)
                .with_context(|| format!("{}: column `{name}` missing", f.display()))
        };
        let (ce, fl, ep) = (col("ce_loss")?, col("flow_loss")?, col("epoch")?);
        let run = parent_name(f);
        for (n, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            let num = |i: usize, name: &str| -> Result<f64> {
                cells
                    .get(i)
                    .and_then(|c| c.parse().ok())
                    .with_context(|| format!("{} line {}: bad `{name}`", f.display(), n + 2))
            };
            let x = num(ep, "epoch")?;
            out.entry(format!("{run} ce")).or_default().push((x, num(ce, "ce_loss")?));
            let flow = num(fl, "flow_loss")?;
            if flow.is_finite() {
                out.entry(format!("{run} flow")).or_default().push((x, flow));
            }
        }
    }
    Ok(out)
}

fn bounds(series: &Series) -> (f64, f64, f64, f64) {
    let pts = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

fn chart(title: &str, xlabel: &str, ylabel: &str, series: &Series, y_floor: Option<(f64, f64)>) -> String {
    let (x0, x1, mut y0, mut y1) = bounds(series);
    if let Some((lo, hi)) = y_floor {
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    let pw = WIDTH - 2.0 * MARGIN;
    let ph = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            HEIGHT - MARGIN + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            WIDTH - MARGIN,
            sy(yv),
            sy(yv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 14.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        if pts.len() <= 32 {
            for &(x, y) in pts {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
            }
        }
        let ly = MARGIN + 14.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN - 150.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0,
            ly - 4.0,
            ly - 4.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 24.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `robustness.svg` (mIoU against mask ratio, one line per run) and
/// `loss.svg` (training losses per run) into `dest`, skipping a chart with no
/// data. Inputs are metrics files, `train_log.csv` files or directories
/// searched for either.
pub fn render(inputs: &[PathBuf], dest: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Inputs::default();
    for p in inputs {
        collect(p, &mut found)?;
    }
    let robustness = robustness_series(&found.metrics)?;
    let loss = loss_series(&found.logs)?;
    if robustness.is_empty() && loss.is_empty() {
        bail!("no metrics files or {TRAIN_LOG} found in the given inputs");
    }
    fs::create_dir_all(dest).with_context(|| dest.display().to_string())?;
    let mut written = Vec::new();
    if !robustness.is_empty() {
        let svg = chart("mIoU under input masking", "mask ratio", "mIoU", &robustness, Some((0.0, 1.0)));
        let p = dest.join("robustness.svg");
        fs::write(&p, svg).with_context(|| p.display().to_string())?;
        written.push(p);
    }
    if !loss.is_empty() {
        let svg = chart("Training loss", "epoch", "loss", &loss, None);
        let p = dest.join("loss.svg");
        fs::write(&p, svg).with_context(|| p.display().to_string())?;
        written.push(p);
    }
    Ok(written)
}
