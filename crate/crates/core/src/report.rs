//! Tables and figures rendered from artifacts already on disk.
//!
//! Nothing here touches a model. Every output is a function of manifests,
//! ablation tables and GI traces, and every figure is written next to the
//! data it was drawn from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{write_png, RgbImage};
use crate::error::{GidError, Result};
use crate::gism::GiType;
use crate::trainer::{AblationTable, GiTrace, Heatmap, RunManifest, MANIFEST_FILE};

/// A rectangular text table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| {} |", self.headers.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(self.headers.len()));
        for r in &self.rows {
            let _ = writeln!(s, "| {} |", r.join(" | "));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let quote = |c: &String| {
            if c.contains([',', '"', '\n']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        };
        let mut s = String::new();
        for r in std::iter::once(&self.headers).chain(&self.rows) {
            s.push_str(&r.iter().map(quote).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into())
}

/// One row per run: kind, variant, seed, steps and final metrics (in %).
pub fn runs_table(runs: &[(String, RunManifest)]) -> Table {
    let headers = ["run", "kind", "variant", "seed", "steps", "mAP", "AP50", "AP75"];
    let rows = runs
        .iter()
        .map(|(name, m)| {
            let e = m.final_eval.as_ref();
            vec![
                name.clone(),
                format!("{:?}", m.kind).to_lowercase(),
                m.detector.variant.name().to_string(),
                m.init_seed.to_string(),
                m.train.as_ref().map(|t| t.steps.to_string()).unwrap_or_else(|| "-".into()),
                pct(e.map(|e| e.map)),
                pct(e.map(|e| e.ap50)),
                pct(e.map(|e| e.ap75)),
            ]
        })
        .collect();
    Table {
        headers: headers.map(String::from).to_vec(),
        rows,
    }
}

/// Ablation rows with the gain over the baseline in mAP points.
pub fn ablation_table(t: &AblationTable) -> Table {
    let headers = ["cell", "mAP", "AP50", "gain", "status"];
    let mut rows = vec![vec![
        "baseline".to_string(),
        pct(Some(t.baseline_map)),
        "-".into(),
        "0.00".into(),
        "ok".into(),
    ]];
    for r in &t.rows {
        let status = match (&r.error, r.matches_baseline) {
            (Some(e), _) => format!("failed: {e}"),
            (None, Some(true)) => "ok (equals baseline)".into(),
            (None, Some(false)) => "ok (differs from baseline)".into(),
            (None, None) => "ok".into(),
        };
        rows.push(vec![
            r.label.clone(),
            pct(r.map),
            pct(r.ap50),
            r.map.map(|m| format!("{:+.2}", 100.0 * (m - t.baseline_map))).unwrap_or_else(|| "-".into()),
            status,
        ]);
    }
    Table {
        headers: headers.map(String::from).to_vec(),
        rows,
    }
}

/// Raw and smoothed per-image GI counts, one line per logged step.
pub fn gi_counts_table(trace: &GiTrace) -> Table {
    let mut headers = vec!["step".to_string()];
    for t in GiType::ALL {
        headers.push(format!("{}_mean", t.name()));
    }
    for t in GiType::ALL {
        headers.push(format!("{}_smoothed", t.name()));
    }
    let rows = trace
        .steps
        .iter()
        .map(|s| {
            std::iter::once(s.step.to_string())
                .chain(s.mean.iter().chain(&s.smoothed).map(|v| format!("{v}")))
                .collect()
        })
        .collect();
    Table { headers, rows }
}

const CURVE_COLORS: [&str; 4] = ["#d62728", "#ff7f0e", "#1f77b4", "#7f7f7f"];

/// Smoothed GI counts per type against training step, as an SVG line chart.
pub fn gi_counts_svg(trace: &GiTrace, title: &str) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (56.0, 120.0, 32.0, 40.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_step = trace.steps.last().map(|s| s.step).unwrap_or(0).max(1) as f64;
    let max_y = trace
        .steps
        .iter()
        .flat_map(|s| s.smoothed)
        .fold(trace.k as f64, f64::max)
        .max(1.0);
    let x = |step: usize| left + pw * step as f64 / max_step;
    let y = |v: f64| top + ph * (1.0 - v / max_y);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=4 {
        let v = max_y * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
        let st = (max_step * i as f64 / 4.0).round() as usize;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{st}</text>"#,
            x(st),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        left + pw / 2.0,
        h - 6.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">GIs per image</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (t, gi) in GiType::ALL.iter().enumerate() {
        if !trace.steps.is_empty() {
            let pts: Vec<String> = trace
                .steps
                .iter()
                .map(|st| format!("{:.2},{:.2}", x(st.step), y(st.smoothed[t])))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                pts.join(" "),
                CURVE_COLORS[t]
            );
        }
        let ly = top + 16.0 * t as f64 + 8.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            CURVE_COLORS[t],
            lx + 24.0,
            ly + 4.0,
            gi.name()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Black to red to yellow to white.
fn heat_color(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(3.0 * v), c(3.0 * v - 1.0), c(3.0 * v - 2.0)]
}

/// Pixels per cell of the finest level; coarser levels scale to the same size.
const HEATMAP_CELL: usize = 4;
const HEATMAP_GAP: usize = 2;

/// Largest GI score in the heatmap; colours are scaled by it.
pub fn heatmap_scale(h: &Heatmap) -> f64 {
    h.scores.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max)
}

/// Per-level GI score grids side by side, finest level first, scaled so the
/// largest score is white.
pub fn heatmap_image(h: &Heatmap) -> RgbImage {
    let grids = h.level_grids();
    let scale = heatmap_scale(h);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let finest = h.level_sizes.iter().copied().max().unwrap_or(1).max(1);
    let side = finest * HEATMAP_CELL;
    let n = grids.len().max(1);
    let width = n * side + (n - 1) * HEATMAP_GAP;
    let mut img = RgbImage {
        width,
        height: side,
        pixels: vec![255; width * side * 3],
    };
    for (l, (grid, &size)) in grids.iter().zip(&h.level_sizes).enumerate() {
        let x0 = l * (side + HEATMAP_GAP);
        for py in 0..side {
            for px in 0..side {
                let (gy, gx) = (py * size / side, px * size / side);
                let rgb = heat_color(grid[gy * size + gx] / scale);
                let o = (py * width + x0 + px) * 3;
                img.pixels[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }
    img
}

/// What [`render_report`] wrote.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSummary {
    pub runs: usize,
    pub ablations: usize,
    pub traces: usize,
    pub heatmaps: usize,
    pub files: Vec<PathBuf>,
}

fn write(path: &Path, text: &str, summary: &mut ReportSummary) -> Result<()> {
    std::fs::write(path, text).map_err(|e| GidError::io(path, e))?;
    summary.files.push(path.to_path_buf());
    Ok(())
}

fn run_dirs(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.join(MANIFEST_FILE).is_file() || root.join("ablation.json").is_file() {
        out.push(root.to_path_buf());
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| GidError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        run_dirs(&c, out)?;
    }
    Ok(())
}

fn run_name(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let base = root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let parts: Vec<String> = std::iter::once(base)
        .chain(rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()))
        .filter(|s| !s.is_empty())
        .collect();
    if parts.is_empty() {
        "run".into()
    } else {
        parts.join("_")
    }
}

/// Walks each input directory for run and ablation artifacts and writes
/// tables, GI count curves and heatmaps under `out_dir`, plus `report.md`
/// linking them.
pub fn render_report(inputs: &[PathBuf], out_dir: &Path) -> Result<ReportSummary> {
    let heat_dir = out_dir.join("heatmaps");
    std::fs::create_dir_all(&heat_dir).map_err(|e| GidError::io(&heat_dir, e))?;
    let mut summary = ReportSummary::default();
    let mut runs = Vec::new();
    let mut md = String::from("# GID report\n\n");
    let mut ablation_md = String::new();
    let mut trace_md = String::new();

    for root in inputs {
        if !root.is_dir() {
            return Err(GidError::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "report input is not a directory"),
            ));
        }
        let mut dirs = Vec::new();
        run_dirs(root, &mut dirs)?;
        for dir in dirs {
            let name = run_name(root, &dir);
            if dir.join("ablation.json").is_file() {
                let t = AblationTable::load(&dir)?;
                let table = ablation_table(&t);
                let stem = format!("ablation_{}_{}", t.kind.name(), name);
                write(&out_dir.join(format!("{stem}.md")), &table.to_markdown(), &mut summary)?;
                write(&out_dir.join(format!("{stem}.csv")), &table.to_csv(), &mut summary)?;
                let _ = write!(
                    ablation_md,
                    "### {} grid ({name}, seed {})\n\n{}\n",
                    t.kind.name(),
                    t.seed,
                    table.to_markdown()
                );
                summary.ablations += 1;
            }
            if dir.join(MANIFEST_FILE).is_file() {
                runs.push((name.clone(), RunManifest::load(&dir.join(MANIFEST_FILE))?));
            }
            if dir.join("gi_trace_meta.json").is_file() {
                let trace = GiTrace::load(&dir)?;
                let svg = out_dir.join(format!("gi_counts_{name}.svg"));
                write(&svg, &gi_counts_svg(&trace, &format!("GI counts, {name} (K = {})", trace.k)), &mut summary)?;
                write(
                    &out_dir.join(format!("gi_counts_{name}.csv")),
                    &gi_counts_table(&trace).to_csv(),
                    &mut summary,
                )?;
                let _ = writeln!(trace_md, "- {name}: ![GI counts](gi_counts_{name}.svg)");
                for h in &trace.heatmaps {
                    let stem = format!("{name}_step{:06}_img{:06}", h.step, h.image_id);
                    let png = heat_dir.join(format!("{stem}.png"));
                    write_png(&png, &heatmap_image(h))?;
                    summary.files.push(png);
                    let grids = serde_json::json!({
                        "step": h.step,
                        "image_id": h.image_id,
                        "level_sizes": h.level_sizes,
                        "max_score": heatmap_scale(h),
                        "grids": h.level_grids(),
                    });
                    write(
                        &heat_dir.join(format!("{stem}.json")),
                        &(serde_json::to_string(&grids)? + "\n"),
                        &mut summary,
                    )?;
                    summary.heatmaps += 1;
                }
                summary.traces += 1;
            }
        }
    }

    summary.runs = runs.len();
    let table = runs_table(&runs);
    write(&out_dir.join("runs.csv"), &table.to_csv(), &mut summary)?;
    write(&out_dir.join("runs.md"), &table.to_markdown(), &mut summary)?;
    let _ = write!(md, "## Runs\n\nmAP, AP50 and AP75 in percent.\n\n{}\n", table.to_markdown());
    if !ablation_md.is_empty() {
        let _ = write!(md, "## Ablations\n\n{ablation_md}");
    }
    if !trace_md.is_empty() {
        let _ = write!(
            md,
            "## GI counts\n\nSmoothed per-image counts of each GI type. Heatmaps are in `heatmaps/`, finest level on the left, each scaled to its own maximum (recorded in the matching JSON).\n\n{trace_md}"
        );
    }
    write(&out_dir.join("report.md"), &md, &mut summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_when_needed() {
        let t = Table {
            headers: vec!["a".into(), "b".into()],
            rows: vec![vec!["x,y".into(), "say \"hi\"".into()]],
        };
        assert_eq!(t.to_csv(), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\n");
        assert_eq!(t.to_markdown(), "| a | b |\n|---|---|\n| x,y | say \"hi\" |\n");
    }

    #[test]
    fn heat_colors_span_black_to_white() {
        assert_eq!(heat_color(0.0), [0, 0, 0]);
        assert_eq!(heat_color(1.0), [255, 255, 255]);
        assert_eq!(heat_color(f64::NAN), [0, 0, 0]);
    }

    #[test]
    fn heatmap_levels_share_a_height() {
        let h = Heatmap {
            step: 0,
            image_id: 1,
            level_sizes: vec![4, 2],
            anchors_per_location: 1,
            scores: (0..20).map(|i| i as f64 / 20.0).collect(),
        };
        let img = heatmap_image(&h);
        assert_eq!(img.height, 16);
        assert_eq!(img.width, 2 * 16 + HEATMAP_GAP);
        assert_eq!(img.pixels.len(), img.width * img.height * 3);
    }
}
