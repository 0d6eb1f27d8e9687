//! CSV tables, SVG line charts and PNG heatmaps. Files only; no display needed.

use std::fmt::Write as _;
use std::path::Path;

use mawm_core::analysis::{AttentionMap, ErrorCurve, FlopsRow};
use mawm_core::imagination::ImaginedRollout;

pub fn write_error_csv(path: &Path, c: &ErrorCurve) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "agent".into(), "mean_l1".into(), "std_l1".into()];
    header.extend((0..c.obs_dim).map(|d| format!("dim{d}")));
    w.write_record(&header)?;
    for s in 0..=c.horizon {
        for i in 0..c.n_agents {
            let mut row = vec![s.to_string(), i.to_string(), fmt(c.mean[s * c.n_agents + i]), fmt(c.std[s * c.n_agents + i])];
            let o = (s * c.n_agents + i) * c.obs_dim;
            row.extend(c.per_dim[o..o + c.obs_dim].iter().map(|x| fmt(*x)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_rollout_csv(path: &Path, r: &ImaginedRollout) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "rollout".into(), "agent".into(), "action".into(), "reward".into(), "discount".into(), "alive".into()];
    header.extend((0..r.obs_dim).map(|d| format!("obs{d}")));
    w.write_record(&header)?;
    let per = r.rollouts * r.n_agents;
    for t in 0..r.horizon {
        for ro in 0..r.rollouts {
            for i in 0..r.n_agents {
                let k = t * per + ro * r.n_agents + i;
                let mut row = vec![t.to_string(), ro.to_string(), i.to_string(), r.actions[k].to_string(), fmt(r.rewards[k]), fmt(r.discounts[k]), fmt(r.alive[k])];
                row.extend(r.obs_at(t, ro, i).iter().map(|x| fmt(*x)));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_flops(dir: &Path, rows: &[FlopsRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(dir.join("flops.csv"))?;
    w.write_record(["agents", "perceiver", "self_attention", "ratio"])?;
    let mut md = String::from("| agents | perceiver (G) | self-attention (G) |\n|---|---|---|\n");
    for r in rows {
        w.write_record([r.n_agents.to_string(), r.perceiver.to_string(), r.self_attention.to_string(), fmt(r.self_attention as f64 / r.perceiver as f64)])?;
        writeln!(md, "| {} | {:.3} | {:.3} |", r.n_agents, r.perceiver as f64 / 1e9, r.self_attention as f64 / 1e9)?;
    }
    w.flush()?;
    std::fs::write(dir.join("flops.md"), md)?;
    let series = vec![
        ("perceiver".to_string(), rows.iter().map(|r| (r.n_agents as f64, r.perceiver as f64 / 1e9)).collect()),
        ("self-attention".to_string(), rows.iter().map(|r| (r.n_agents as f64, r.self_attention as f64 / 1e9)).collect()),
    ];
    line_svg(&dir.join("flops.svg"), "Aggregator cost", "agents", "GFLOPs", &series)
}

/// Writes each map as CSV plus a PNG heatmap named `<source>_l<layer>_h<head>`.
pub fn write_attention(dir: &Path, maps: &[AttentionMap]) -> anyhow::Result<()> {
    for m in maps {
        let stem = format!("{}_l{}_h{}", m.source, m.layer, m.head);
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        for r in 0..m.rows {
            w.write_record((0..m.cols).map(|c| fmt(m.get(r, c))))?;
        }
        w.flush()?;
        heatmap_png(&dir.join(format!("{stem}.png")), m.rows, m.cols, &m.data, 8)?;
    }
    Ok(())
}

const COLORMAP: [[f64; 3]; 5] = [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];

/// Fixed five-stop colormap on `[0, 1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (v.floor() as usize).min(COLORMAP.len() - 2);
    let f = v - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (COLORMAP[i][c] * (1.0 - f) + COLORMAP[i + 1][c] * f).round() as u8;
    }
    out
}

/// Heatmap normalized to the map's own maximum, `scale` pixels per cell.
pub fn heatmap_png(path: &Path, rows: usize, cols: usize, data: &[f64], scale: u32) -> anyhow::Result<()> {
    let max = data.iter().cloned().fold(0.0_f64, f64::max);
    let norm = if max > 0.0 { max } else { 1.0 };
    let img = image::RgbImage::from_fn(cols as u32 * scale, rows as u32 * scale, |x, y| {
        let v = data[(y / scale) as usize * cols + (x / scale) as usize] / norm;
        image::Rgb(colormap(v))
    });
    img.save(path)?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal multi-series line chart.
pub fn line_svg(path: &Path, title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> anyhow::Result<()> {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#)?;
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title))?;
    writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m)?;
    writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m)?;
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(fx), h - m + 16.0, tick(fx))?;
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, m - 4.0, sy(fy) + 4.0, tick(fy))?;
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 16.0, esc(xlabel))?;
    writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, h / 2.0, h / 2.0, esc(ylabel))?;
    for (i, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, d.join(" "))?;
        writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, w - m - 120.0, m + 16.0 * i as f64, esc(name))?;
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

/// Error versus prediction step, one line per labelled curve.
pub fn error_svg(path: &Path, curves: &[(&str, &ErrorCurve)]) -> anyhow::Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = curves.iter().map(|(n, c)| (n.to_string(), (0..=c.horizon).map(|s| (s as f64, c.at(s))).collect())).collect();
    line_svg(path, "Prediction error", "prediction step", "mean L1 per dimension", &series)
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn tick(x: f64) -> String {
    if x.abs() >= 1000.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.3}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints_fixed() {
        assert_eq!(colormap(0.0), [68, 1, 84]);
        assert_eq!(colormap(1.0), [253, 231, 37]);
        assert_eq!(colormap(2.0), colormap(1.0));
    }

    #[test]
    fn artifacts_written_without_display() {
        let dir = tempfile::tempdir().unwrap();
        heatmap_png(&dir.path().join("m.png"), 2, 3, &[0.1, 0.2, 0.7, 0.5, 0.5, 0.0], 4).unwrap();
        let img = image::open(dir.path().join("m.png")).unwrap();
        assert_eq!((img.width(), img.height()), (12, 8));
        line_svg(&dir.path().join("l.svg"), "t", "x", "y", &[("a".into(), vec![(0.0, 1.0), (1.0, 2.0)])]).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("l.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
