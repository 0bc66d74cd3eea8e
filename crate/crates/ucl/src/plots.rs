//! Static figures: a PNG plus the CSV behind it for each figure.
//!
//! Text needs a TrueType font. One is looked up at `$UCL_FONT` and a few
//! common system paths; without one, figures are drawn without labels.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;

use crate::analyze::{analysis_path, read_analysis, AnalysisKind, AnalysisReport};
use crate::error::{IoContext, Result, UclError};
use crate::record::{read_record_dir, MeanStd, RunRecord};

pub const FONT_ENV: &str = "UCL_FONT";

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

fn fonts_ready() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let env = std::env::var(FONT_ENV).ok();
        env.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied()).any(|p| match fs::read(p) {
            Ok(bytes) => {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
            }
            Err(_) => false,
        })
    })
}

fn plot_err(e: impl std::fmt::Display) -> UclError {
    UclError::Plot(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Accuracy,
    Fewshot,
    Cka,
    L2,
    Landscape,
    Features,
}

impl PlotKind {
    pub const ALL: [PlotKind; 6] =
        [PlotKind::Accuracy, PlotKind::Fewshot, PlotKind::Cka, PlotKind::L2, PlotKind::Landscape, PlotKind::Features];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Accuracy => "accuracy",
            PlotKind::Fewshot => "fewshot",
            PlotKind::Cka => "cka",
            PlotKind::L2 => "l2",
            PlotKind::Landscape => "landscape",
            PlotKind::Features => "features",
        }
    }
}

impl std::str::FromStr for PlotKind {
    type Err = UclError;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| UclError::Usage(format!("unknown plot kind `{s}`")))
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let (lo, hi) = if lo.is_finite() && hi.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad)..(hi + pad)
}

pub fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<()> {
    let labeled = fonts_ready();
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    let root = BitMapBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if labeled {
        builder.caption(title, ("sans-serif", 22)).x_label_area_size(44).y_label_area_size(64);
    }
    let mut chart = builder.build_cartesian_2d(padded(x0, x1), padded(y0, y1)).map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if labeled {
        mesh.x_desc(x_desc).y_desc(y_desc);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let drawn = chart.draw_series(LineSeries::new(s.points.clone(), color.stroke_width(2))).map_err(plot_err)?;
        if labeled {
            drawn.label(s.label.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
    }
    if labeled && !series.is_empty() {
        chart.configure_series_labels().background_style(WHITE.mix(0.85)).border_style(BLACK).draw().map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Viridis-like ramp for `t` in `[0, 1]`.
fn ramp(t: f64) -> RGBColor {
    const STOPS: [(f64, f64, f64); 5] =
        [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 } * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |x: f64, y: f64| (x + f * (y - x)).round() as u8;
    RGBColor(mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Cell grid: `cells[r][c]` drawn over `x_edges × y_edges`; `None` cells
/// are gray. The colour scale spans `[lo, hi]`.
pub struct Heatmap<'a> {
    pub title: &'a str,
    pub x_desc: &'a str,
    pub y_desc: &'a str,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub cells: Vec<Vec<Option<f64>>>,
    pub lo: f64,
    pub hi: f64,
}

pub fn heatmap(path: &Path, h: &Heatmap) -> Result<()> {
    let labeled = fonts_ready();
    let root = BitMapBackend::new(path, (640, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if labeled {
        builder.caption(h.title, ("sans-serif", 22)).x_label_area_size(44).y_label_area_size(64);
    }
    let (xa, xb) = (h.x_edges[0], *h.x_edges.last().expect("edges"));
    let (ya, yb) = (h.y_edges[0], *h.y_edges.last().expect("edges"));
    let mut chart = builder.build_cartesian_2d(xa..xb, ya..yb).map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    mesh.disable_mesh();
    if labeled {
        mesh.x_desc(h.x_desc).y_desc(h.y_desc);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(plot_err)?;
    let span = if h.hi > h.lo { h.hi - h.lo } else { 1.0 };
    let mut rects = Vec::new();
    for (r, row) in h.cells.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let color = match v {
                Some(v) => ramp((v - h.lo) / span).filled(),
                None => RGBColor(220, 220, 220).filled(),
            };
            rects.push(Rectangle::new([(h.x_edges[c], h.y_edges[r]), (h.x_edges[c + 1], h.y_edges[r + 1])], color));
        }
    }
    chart.draw_series(rects).map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Grayscale image from values in `[0, 1]`, enlarged `scale` times.
pub fn grayscale(path: &Path, pixels: &[f64], width: usize, height: usize, scale: u32) -> Result<()> {
    let img = image::GrayImage::from_fn(width as u32 * scale, height as u32 * scale, |x, y| {
        let v = pixels[(y / scale) as usize * width + (x / scale) as usize];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

fn file_label(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn write_csv(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).at(path)
}

fn unit_edges(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64).collect()
}

fn complete(dir: &Path, r: &RunRecord) -> Result<()> {
    if r.any_aborted() {
        return Err(UclError::Incomplete(format!("{} has aborted trials", dir.display())));
    }
    Ok(())
}

/// Mean over completed trials of each matrix entry.
fn mean_matrix(r: &RunRecord) -> Vec<Vec<Option<f64>>> {
    let t = r.config.num_tasks;
    let mut out = vec![vec![None; t]; t];
    for (tau, row) in out.iter_mut().enumerate() {
        for (i, cell) in row.iter_mut().enumerate() {
            let vals: Vec<f64> = r.trials.iter().filter_map(|tr| tr.accuracy_matrix.as_ref()?.get(tau, i)).collect();
            *cell = MeanStd::of(&vals).map(|m| m.mean);
        }
    }
    out
}

fn accuracy_figures(records: &[(PathBuf, RunRecord)], out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for (dir, r) in records {
        complete(dir, r)?;
        let label = file_label(&r.config.name);
        let cells = mean_matrix(r);
        let t = cells.len();
        let mut csv = String::from("tau,task,mean_accuracy\n");
        for (tau, row) in cells.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    csv.push_str(&format!("{tau},{i},{v}\n"));
                }
            }
        }
        let (png, csvp) = (out.join(format!("accuracy_{label}.png")), out.join(format!("accuracy_{label}.csv")));
        let h = Heatmap {
            title: &r.config.name,
            x_desc: "evaluated task",
            y_desc: "after training task",
            x_edges: unit_edges(t),
            y_edges: unit_edges(t),
            cells,
            lo: 0.0,
            hi: 1.0,
        };
        heatmap(&png, &h)?;
        write_csv(&csvp, &csv)?;
        files.extend([png, csvp]);
    }
    Ok(files)
}

fn fewshot_figures(records: &[(PathBuf, RunRecord)], out: &Path) -> Result<Vec<PathBuf>> {
    let mut groups: Vec<(String, Vec<(usize, &RunRecord)>)> = Vec::new();
    for (dir, r) in records {
        complete(dir, r)?;
        let cap = r.few_shot_cap.ok_or_else(|| UclError::Incomplete(format!("{} is not part of a few-shot sweep", dir.display())))?;
        match groups.iter_mut().find(|(n, _)| *n == r.config.name) {
            Some((_, v)) => v.push((cap, r)),
            None => groups.push((r.config.name.clone(), vec![(cap, r)])),
        }
    }
    let mut csv = String::from("label,cap,accuracy_mean,accuracy_std,forgetting_mean,forgetting_std\n");
    let mut series = Vec::new();
    for (name, mut pts) in groups {
        pts.sort_by_key(|(c, _)| *c);
        let mut points = Vec::new();
        for (cap, r) in pts {
            let a = r.summary.average_accuracy;
            let f = r.summary.forgetting;
            let cell = |m: Option<MeanStd>, pick: fn(&MeanStd) -> f64| m.map_or(String::new(), |m| pick(&m).to_string());
            csv.push_str(&format!(
                "{name},{cap},{},{},{},{}\n",
                cell(a, |m| m.mean),
                cell(a, |m| m.std),
                cell(f, |m| m.mean),
                cell(f, |m| m.std)
            ));
            if let Some(a) = a {
                points.push((cap as f64, a.mean));
            }
        }
        series.push(Series { label: name, points });
    }
    let (png, csvp) = (out.join("fewshot.png"), out.join("fewshot.csv"));
    line_chart(&png, "Few-shot training", "training instances per task", "average accuracy", &series)?;
    write_csv(&csvp, &csv)?;
    Ok(vec![png, csvp])
}

fn reports(records: &[(PathBuf, RunRecord)], kind: AnalysisKind) -> Result<Vec<AnalysisReport>> {
    let mut out: Vec<AnalysisReport> = Vec::new();
    for (dir, _) in records {
        let p = analysis_path(&dir.join("analysis"), kind);
        if !p.is_file() {
            return Err(UclError::Incomplete(format!("{} is missing; run `analyze --kind {}` first", p.display(), kind.name())));
        }
        let r = read_analysis(&p)?;
        if !out.contains(&r) {
            out.push(r);
        }
    }
    Ok(out)
}

fn analysis_figures(records: &[(PathBuf, RunRecord)], kind: PlotKind, out: &Path) -> Result<Vec<PathBuf>> {
    let akind = match kind {
        PlotKind::Cka => AnalysisKind::Cka,
        PlotKind::L2 => AnalysisKind::L2,
        PlotKind::Landscape => AnalysisKind::Landscape,
        _ => AnalysisKind::Features,
    };
    let mut files = Vec::new();
    let mut series = Vec::new();
    let mut csv = String::new();
    for report in reports(records, akind)? {
        match report {
            AnalysisReport::Cka { comparisons } => {
                if csv.is_empty() {
                    csv.push_str("comparison,block,cka\n");
                }
                for c in comparisons {
                    let label = format!("{} (task {}) vs {} (task {})", c.a, c.a_task, c.b, c.b_task);
                    for (b, s) in c.report.blocks.iter().zip(&c.report.scores) {
                        csv.push_str(&format!("{label},{b},{s}\n"));
                    }
                    let points = c.report.blocks.iter().zip(&c.report.scores).map(|(&b, &s)| (b as f64 + 1.0, s)).collect();
                    series.push(Series { label, points });
                }
            }
            AnalysisReport::L2 { series: list } => {
                if csv.is_empty() {
                    csv.push_str("series,task,distance\n");
                }
                for s in list {
                    for (t, d) in &s.distances {
                        csv.push_str(&format!("{},{t},{d}\n", s.label));
                    }
                    series.push(Series { label: s.label, points: s.distances.iter().map(|&(t, d)| (t as f64, d)).collect() });
                }
            }
            AnalysisReport::Landscape { entries } => {
                for e in entries {
                    let g = &e.grid;
                    let stem = format!("landscape_{}_task{}", file_label(&e.label), e.task);
                    let step = if g.resolution > 1 { g.coords[1] - g.coords[0] } else { 2.0 * g.extent.max(1e-12) };
                    let edges: Vec<f64> =
                        g.coords.iter().map(|c| c - step / 2.0).chain([g.coords[g.resolution - 1] + step / 2.0]).collect();
                    let finite: Vec<f64> =
                        g.losses.iter().copied().filter(|l| l.is_finite() && *l < ucl_core::analysis::SATURATED_LOSS).collect();
                    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let cells = (0..g.resolution)
                        .map(|i| (0..g.resolution).map(|j| Some(g.losses[i * g.resolution + j].min(hi))).collect())
                        .collect();
                    let title = format!("{} after task {}", e.label, e.task);
                    let h = Heatmap {
                        title: &title,
                        x_desc: "direction 2",
                        y_desc: "direction 1",
                        x_edges: edges.clone(),
                        y_edges: edges,
                        cells,
                        lo,
                        hi,
                    };
                    let (png, csvp) = (out.join(format!("{stem}.png")), out.join(format!("{stem}.csv")));
                    heatmap(&png, &h)?;
                    write_csv(&csvp, &g.to_csv())?;
                    files.extend([png, csvp]);
                }
            }
            AnalysisReport::Features { entries } => {
                for e in entries {
                    let t = &e.tiles;
                    let stem = format!("features_{}_task{}_block{}", file_label(&e.label), e.task, e.block);
                    let (png, csvp) = (out.join(format!("{stem}.png")), out.join(format!("{stem}.csv")));
                    grayscale(&png, &t.pixels, t.width(), t.height(), 4)?;
                    let mut body = String::from("row,col,value\n");
                    for (k, v) in t.pixels.iter().enumerate() {
                        body.push_str(&format!("{},{},{v}\n", k / t.width(), k % t.width()));
                    }
                    write_csv(&csvp, &body)?;
                    files.extend([png, csvp]);
                }
            }
        }
    }
    if !series.is_empty() {
        let (name, title, x, y) = match kind {
            PlotKind::Cka => ("cka", "Layer-wise CKA", "block", "linear CKA"),
            _ => ("l2", "Parameter distance", "task", "L2 distance"),
        };
        let (png, csvp) = (out.join(format!("{name}.png")), out.join(format!("{name}.csv")));
        line_chart(&png, title, x, y, &series)?;
        write_csv(&csvp, &csv)?;
        files.extend([png, csvp]);
    }
    Ok(files)
}

/// Writes the figures of `kind` for the given record directories into
/// `out`. Returns the files written.
pub fn emit_plots(records: &[PathBuf], kind: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let kind: PlotKind = kind.parse()?;
    if records.is_empty() {
        return Err(UclError::Usage("plot needs at least one record".into()));
    }
    let loaded = records.iter().map(|d| Ok((d.clone(), read_record_dir(d)?))).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).at(out)?;
    match kind {
        PlotKind::Accuracy => accuracy_figures(&loaded, out),
        PlotKind::Fewshot => fewshot_figures(&loaded, out),
        other => analysis_figures(&loaded, other, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), RGBColor(68, 1, 84));
        assert_eq!(ramp(1.0), RGBColor(253, 231, 37));
        assert_eq!(ramp(f64::NAN), ramp(0.0));
    }

    #[test]
    fn charts_render_to_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let s =
            [Series { label: "a".into(), points: vec![(0.0, 1.0), (1.0, 0.5)] }, Series { label: "b".into(), points: vec![(0.0, 0.0)] }];
        line_chart(&p, "t", "x", "y", &s).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (720, 480));
        let h = Heatmap {
            title: "m",
            x_desc: "x",
            y_desc: "y",
            x_edges: unit_edges(2),
            y_edges: unit_edges(2),
            cells: vec![vec![Some(0.2), None], vec![Some(0.4), Some(0.9)]],
            lo: 0.0,
            hi: 1.0,
        };
        heatmap(&dir.path().join("h.png"), &h).unwrap();
        grayscale(&dir.path().join("g.png"), &[0.0, 1.0, 0.5, 0.25], 2, 2, 3).unwrap();
        assert_eq!(image::open(dir.path().join("g.png")).unwrap().width(), 6);
    }

    #[test]
    fn unknown_kind_is_an_error() {
        assert!(matches!(emit_plots(&[PathBuf::from("x")], "histogram", Path::new("y")), Err(UclError::Usage(_))));
        assert!("cka".parse::<PlotKind>().is_ok());
    }
}
