//! Curve emission: merge metric files into aligned delimited text and render
//! a simple line chart PNG.

use crate::error::{Error, Result};
use crate::harness::metrics::read_metrics;
use image::{Rgb, RgbImage};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Test-accuracy (or loss) versus epoch from finetune metric files.
    Convergence,
    /// Accuracy versus target-pretraining epochs from a sweep table.
    Sweep,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "convergence" => Ok(PlotKind::Convergence),
            "sweep" => Ok(PlotKind::Sweep),
            other => Err(Error::Config(format!("unknown plot kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "series".into())
}

fn convergence_series(files: &[PathBuf]) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    let mut key: Option<String> = None;
    for f in files {
        let records = read_metrics(f)?;
        let this_key = ["test_accuracy", "test_miou", "total_loss"]
            .iter()
            .find(|k| records.iter().any(|r| r.get(k).is_some()))
            .map(|k| k.to_string())
            .ok_or_else(|| {
                Error::Config(format!("{}: no plottable metric found", f.display()))
            })?;
        match &key {
            None => key = Some(this_key.clone()),
            Some(k) if *k == this_key => {}
            Some(k) => {
                return Err(Error::Config(format!(
                    "schema mismatch: {} has '{this_key}', earlier files have '{k}'",
                    f.display()
                )))
            }
        }
        let points: Vec<(f64, f64)> = records
            .iter()
            .filter_map(|r| r.get(&this_key).map(|v| (r.step as f64, v)))
            .collect();
        out.push(Series { name: format!("{}:{}", stem(f), this_key), points });
    }
    Ok(out)
}

fn sweep_series(files: &[PathBuf]) -> Result<Vec<Series>> {
    // one series per label budget: x = target pretrain epochs, y = mean
    let mut out: Vec<Series> = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{}: empty sweep table", f.display())))?;
        if !header.starts_with("target_epochs,n_labeled,mean") {
            return Err(Error::Config(format!("{}: not a sweep table", f.display())));
        }
        for line in lines {
            let mut parts = line.split(',');
            let (Some(e), Some(b), Some(m)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Config(format!("{}: malformed row '{line}'", f.display())));
            };
            let x: f64 = e.parse().map_err(|_| Error::Config(format!("bad epoch '{e}'")))?;
            let y: f64 = m.parse().map_err(|_| Error::Config(format!("bad mean '{m}'")))?;
            let name = format!("{}:labels{}", stem(f), b.trim());
            match out.iter_mut().find(|s| s.name == name) {
                Some(s) => s.points.push((x, y)),
                None => out.push(Series { name, points: vec![(x, y)] }),
            }
        }
    }
    Ok(out)
}

/// Merge metric files into `<out_prefix>.csv` (union x-axis, explicit gaps)
/// and render `<out_prefix>.png`.
pub fn cmd_plot(kind: PlotKind, files: &[PathBuf], out_prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    if files.is_empty() {
        return Err(Error::Config("plot needs at least one input file".into()));
    }
    let series = match kind {
        PlotKind::Convergence => convergence_series(files)?,
        PlotKind::Sweep => sweep_series(files)?,
    };
    if let Some(parent) = out_prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }

    // union x-axis with explicit gaps
    let mut xs: BTreeSet<u64> = BTreeSet::new();
    for s in &series {
        for &(x, _) in &s.points {
            xs.insert(x.to_bits());
        }
    }
    let xs: Vec<f64> = xs.into_iter().map(f64::from_bits).collect();
    let mut csv = String::from("x");
    for s in &series {
        csv.push(',');
        csv.push_str(&s.name);
    }
    csv.push('\n');
    for &x in &xs {
        csv.push_str(&format!("{x}"));
        for s in &series {
            csv.push(',');
            if let Some(&(_, y)) = s.points.iter().find(|(px, _)| *px == x) {
                csv.push_str(&format!("{y}"));
            }
        }
        csv.push('\n');
    }
    let csv_path = out_prefix.with_extension("csv");
    std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;

    let png_path = out_prefix.with_extension("png");
    render_chart(&series, &png_path)?;
    Ok((csv_path, png_path))
}

const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [96, 99, 106],
];

fn render_chart(series: &[Series], path: &Path) -> Result<()> {
    let (w, h) = (640u32, 440u32);
    let (ml, mr, mt, mb) = (52i64, 16i64, 16i64, 36i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().cloned()).collect();
    let (mut x0, mut x1) = all.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (mut y0, mut y1) = all.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let plot_w = w as i64 - ml - mr;
    let plot_h = h as i64 - mt - mb;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        (
            ml + ((x - x0) / (x1 - x0) * plot_w as f64).round() as i64,
            mt + plot_h - ((y - y0) / (y1 - y0) * plot_h as f64).round() as i64,
        )
    };

    // grid and axes
    for gi in 0..=4 {
        let gx = ml + plot_w * gi / 4;
        let gy = mt + plot_h * gi / 4;
        draw_line(&mut img, gx, mt, gx, mt + plot_h, Rgb([232, 232, 232]));
        draw_line(&mut img, ml, gy, ml + plot_w, gy, Rgb([232, 232, 232]));
    }
    draw_line(&mut img, ml, mt + plot_h, ml + plot_w, mt + plot_h, Rgb([0, 0, 0]));
    draw_line(&mut img, ml, mt, ml, mt + plot_h, Rgb([0, 0, 0]));
    draw_number(&mut img, x0, ml - 6, mt + plot_h + 8);
    draw_number(&mut img, x1, ml + plot_w - 14, mt + plot_h + 8);
    draw_number(&mut img, y1, 8, mt);
    draw_number(&mut img, y0, 8, mt + plot_h - 5);

    for (si, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[si % PALETTE.len()]);
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in &s.points {
            let p = to_px(x, y);
            if let Some(q) = prev {
                draw_line(&mut img, q.0, q.1, p.0, p.1, color);
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    put(&mut img, p.0 + dx, p.1 + dy, color);
                }
            }
            prev = Some(p);
        }
        // legend swatch
        let ly = mt + 6 + 12 * si as i64;
        for dx in 0..18 {
            put(&mut img, ml + 8 + dx, ly, color);
            put(&mut img, ml + 8 + dx, ly + 1, color);
        }
    }
    img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

// 3x5 digit glyphs for minimal axis labels
const GLYPHS: [(char, [u8; 5]); 13] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
    ('-', [0b000, 0b000, 0b111, 0b000, 0b000]),
    ('e', [0b000, 0b111, 0b111, 0b100, 0b111]),
];

fn draw_number(img: &mut RgbImage, value: f64, x: i64, y: i64) {
    let text = if value == value.trunc() && value.abs() < 1e6 {
        format!("{}", value as i64)
    } else {
        format!("{value:.2}")
    };
    let mut cx = x;
    for ch in text.chars() {
        if let Some((_, glyph)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        put(img, cx + col as i64, y + row as i64, Rgb([60, 60, 60]));
                    }
                }
            }
        }
        cx += 4;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::MetricRecord;
    use crate::harness::metrics::MetricWriter;

    #[test]
    fn convergence_plot_round_trips_and_merges_gaps() {
        let dir = std::env::temp_dir().join(format!("tp-plot-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let f1 = dir.join("run_a.jsonl");
        let mut w = MetricWriter::create(&f1).unwrap();
        for (e, acc) in [(1u64, 0.5), (2, 0.625), (3, 0.75)] {
            w.append(&MetricRecord::new(e).set("test_accuracy", acc)).unwrap();
        }
        w.finish().unwrap();
        let f2 = dir.join("run_b.jsonl");
        let mut w = MetricWriter::create(&f2).unwrap();
        for (e, acc) in [(2u64, 0.25), (4, 0.5)] {
            w.append(&MetricRecord::new(e).set("test_accuracy", acc)).unwrap();
        }
        w.finish().unwrap();

        let (csv, png) =
            cmd_plot(PlotKind::Convergence, &[f1.clone(), f2], &dir.join("curves")).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5); // header + epochs {1,2,3,4}
        assert!(lines[0].starts_with("x,run_a:test_accuracy,run_b:test_accuracy"));
        // gap cells are empty
        assert_eq!(lines[1], "1,0.5,");
        assert_eq!(lines[2], "2,0.625,0.25");
        assert_eq!(lines[4], "4,,0.5");
        // re-parse equals the records
        for line in &lines[1..] {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 3);
            for c in &cols[1..] {
                if !c.is_empty() {
                    c.parse::<f64>().unwrap();
                }
            }
        }
        assert!(png.exists());
        // single input: curve identical to its records
        let (csv_single, _) =
            cmd_plot(PlotKind::Convergence, &[f1], &dir.join("single")).unwrap();
        let text = std::fs::read_to_string(&csv_single).unwrap();
        assert_eq!(text.lines().count(), 4);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sweep_plot_groups_by_budget_and_rejects_mismatched_schema() {
        let dir = std::env::temp_dir().join(format!("tp-plot2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let sweep = dir.join("sweep.csv");
        std::fs::write(
            &sweep,
            "target_epochs,n_labeled,mean,seed0\n0,16,0.4,0.4\n5,16,0.5,0.5\n0,64,0.7,0.7\n5,64,0.75,0.75\n",
        )
        .unwrap();
        let (csv, _) = cmd_plot(PlotKind::Sweep, &[sweep.clone()], &dir.join("sweepplot")).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.lines().next().unwrap().contains("labels16"));
        assert!(text.lines().next().unwrap().contains("labels64"));

        // a metrics jsonl is not a sweep table
        let bad = dir.join("bad.jsonl");
        std::fs::write(&bad, "{\"step\":1,\"metrics\":{}}\n").unwrap();
        assert!(cmd_plot(PlotKind::Sweep, &[bad], &dir.join("x")).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
