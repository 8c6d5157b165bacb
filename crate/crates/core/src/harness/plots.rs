use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{read_step_records, StepRecord, Strategy, STEP_COLUMNS};

use super::HarnessError;

/// Bins of width 0.1 over `[-1, 1]`.
pub const COSINE_BINS: usize = 20;

const METRIC_COLUMNS: [&str; 7] = ["epoch", "strategy", "psnr", "ssim", "accuracy", "miou", "n_samples"];

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub strategy: Strategy,
    pub psnr: f64,
    pub ssim: f64,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub n_samples: usize,
}

pub(crate) fn write_metrics_rows(rows: &[MetricsRow]) -> Result<Vec<u8>, HarnessError> {
    let csv_err = |e: csv::Error| HarnessError::Csv {
        path: "metrics.csv".into(),
        reason: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRIC_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))
}

pub fn read_metrics_rows(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let malformed = |reason: String| HarnessError::Csv {
        path: path.display().to_string(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    let headers = r.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if headers.iter().ne(METRIC_COLUMNS.iter().copied()) {
        return Err(malformed(format!("unexpected columns {headers:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| malformed(e.to_string())))
        .collect()
}

/// Counts of `cosine_s` values per bin.
pub fn cosine_histogram(values: impl IntoIterator<Item = f64>) -> [usize; COSINE_BINS] {
    let mut bins = [0; COSINE_BINS];
    for s in values {
        let b = ((s + 1.0) * 10.0 + 1e-9).floor().clamp(0.0, (COSINE_BINS - 1) as f64);
        bins[b as usize] += 1;
    }
    bins
}

/// `steps.csv` and `metrics.csv` files below `root`, sorted by path.
pub fn collect_csvs(root: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(
                path.file_name().and_then(|n| n.to_str()),
                Some("steps.csv" | "metrics.csv")
            ) {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn color(s: Strategy) -> &'static str {
    match s {
        Strategy::None => "#7f7f7f",
        Strategy::RecognizerOnly => "#bcbd22",
        Strategy::Joint => "#1f77b4",
        Strategy::Frozen => "#ff7f0e",
        Strategy::GradProm => "#2ca02c",
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

/// Data-to-pixel mapping for one plot.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self {
            x: range(&mut xs.clone()),
            y: range(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn open_svg(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{title}</text>"#,
        WIDTH / 2.0
    );
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let (px, py) = (f.px(xv), f.py(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#,
            y0 + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y0 + 16.0,
            label(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/>"#,
            x0 - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            py + 4.0,
            label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{ylabel}</text>"#,
        (y0 + y1) / 2.0
    );
    s
}

fn legend(s: &mut String, names: &[Strategy]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 8.0 + 16.0 * i as f64;
        let x = WIDTH - RIGHT - 130.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="4" fill="{}"/>"#,
            y - 4.0,
            color(*name)
        );
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{name}</text>"#, x + 18.0);
    }
}

/// Lines of mean `y` per `x`, one per strategy.
fn line_plot(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &BTreeMap<Strategy, BTreeMap<usize, (f64, usize)>>,
) -> String {
    let means: BTreeMap<Strategy, Vec<(f64, f64)>> = series
        .iter()
        .map(|(k, pts)| {
            (
                *k,
                pts.iter().map(|(&x, &(sum, n))| (x as f64, sum / n as f64)).collect(),
            )
        })
        .collect();
    let all = || means.values().flatten();
    let frame = Frame::new(all().map(|p| p.0), all().map(|p| p.1));
    let mut s = open_svg(title, xlabel, ylabel, &frame);
    for (k, pts) in &means {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            color(*k),
            coords.join(" ")
        );
    }
    legend(&mut s, &means.keys().copied().collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

fn histogram_plot(hist: &BTreeMap<Strategy, [usize; COSINE_BINS]>) -> String {
    let max = hist.values().flatten().copied().max().unwrap_or(0) as f64;
    let frame = Frame {
        x: (-1.0, 1.0),
        y: (0.0, max.max(1.0)),
    };
    let mut s = open_svg(
        "cosine similarity of task and auxiliary gradients",
        "cosine_s",
        "steps",
        &frame,
    );
    let k = hist.len().max(1) as f64;
    for (j, (name, bins)) in hist.iter().enumerate() {
        for (b, &count) in bins.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let lo = -1.0 + 0.1 * b as f64;
            let w = (frame.px(lo + 0.1) - frame.px(lo)) / k;
            let x = frame.px(lo) + w * j as f64;
            let y = frame.py(count as f64);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{:.2}" fill="{}"/>"#,
                frame.py(0.0) - y,
                color(*name)
            );
        }
    }
    legend(&mut s, &hist.keys().copied().collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

fn add(series: &mut BTreeMap<Strategy, BTreeMap<usize, (f64, usize)>>, k: Strategy, x: usize, y: f64) {
    let e = series.entry(k).or_default().entry(x).or_insert((0.0, 0));
    e.0 += y;
    e.1 += 1;
}

/// Reads `steps.csv` / `metrics.csv` files (told apart by their header) and
/// writes `loss_ip.svg`, `psnr.svg`, `cosine_hist.svg` and `gate_open.svg`
/// into `out`. Runs of the same strategy are averaged. Empty files give
/// empty axes; any other header is an error.
pub fn emit_plots(csvs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut metrics: Vec<MetricsRow> = Vec::new();
    for path in csvs {
        let text = fs::read_to_string(path)?;
        let header = text.lines().next().unwrap_or("").trim();
        if header.is_empty() {
            continue;
        }
        if header == STEP_COLUMNS.join(",") {
            steps.extend(read_step_records(text.as_bytes()).map_err(|e| HarnessError::Csv {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?);
        } else if header == METRIC_COLUMNS.join(",") {
            metrics.extend(read_metrics_rows(path)?);
        } else {
            return Err(HarnessError::Csv {
                path: path.display().to_string(),
                reason: format!("unrecognized header {header:?}"),
            });
        }
    }

    let mut loss = BTreeMap::new();
    let mut gate = BTreeMap::new();
    let mut hist: BTreeMap<Strategy, [usize; COSINE_BINS]> = BTreeMap::new();
    for r in &steps {
        add(&mut loss, r.strategy, r.step, r.loss_ip);
        if r.strategy.uses_auxiliary() {
            add(&mut gate, r.strategy, r.epoch, if r.gate_open { 1.0 } else { 0.0 });
            let bins = hist.entry(r.strategy).or_insert([0; COSINE_BINS]);
            let one = cosine_histogram([r.cosine_s]);
            bins.iter_mut().zip(one).for_each(|(b, c)| *b += c);
        }
    }
    let mut psnr = BTreeMap::new();
    for m in &metrics {
        add(&mut psnr, m.strategy, m.epoch, m.psnr);
    }

    fs::create_dir_all(out)?;
    let files = [
        ("loss_ip.svg", line_plot("pixel loss", "step", "loss_ip", &loss)),
        ("psnr.svg", line_plot("evaluation PSNR", "epoch", "PSNR (dB)", &psnr)),
        ("cosine_hist.svg", histogram_plot(&hist)),
        (
            "gate_open.svg",
            line_plot("gate-open fraction", "epoch", "fraction open", &gate),
        ),
    ];
    let mut written = Vec::new();
    for (name, svg) in files {
        let path = out.join(name);
        fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_edges() {
        let h = cosine_histogram([-1.0, -0.95, -0.9, 0.0, 0.05, 0.99, 1.0]);
        assert_eq!(h[0], 2);
        assert_eq!(h[1], 1);
        assert_eq!(h[10], 2);
        assert_eq!(h[19], 2);
        assert_eq!(h.iter().sum::<usize>(), 7);
    }

    #[test]
    fn empty_csv_gives_empty_axes() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("steps.csv");
        fs::write(&empty, "").unwrap();
        let header_only = dir.path().join("metrics.csv");
        fs::write(&header_only, write_metrics_rows(&[]).unwrap()).unwrap();
        let files = emit_plots(&[empty, header_only], &dir.path().join("plots")).unwrap();
        assert_eq!(files.len(), 4);
        for f in files {
            let svg = fs::read_to_string(f).unwrap();
            assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
            assert!(!svg.contains("polyline") && !svg.contains("<rect x"));
        }
    }

    #[test]
    fn malformed_csv_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("x.csv");
        fs::write(&bad, "a,b\n1,2\n").unwrap();
        assert!(matches!(emit_plots(&[bad], dir.path()), Err(HarnessError::Csv { .. })));
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![MetricsRow {
            epoch: 5,
            strategy: Strategy::GradProm,
            psnr: 18.5,
            ssim: 0.7,
            accuracy: Some(0.75),
            miou: None,
            n_samples: 128,
        }];
        let path = dir.path().join("metrics.csv");
        fs::write(&path, write_metrics_rows(&rows).unwrap()).unwrap();
        assert_eq!(read_metrics_rows(&path).unwrap(), rows);
    }
}
