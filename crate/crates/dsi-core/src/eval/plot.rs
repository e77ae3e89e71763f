//! Minimal plot rendering: latent-space scatter plots and gold slot
//! histograms, each written as a PNG image plus the underlying CSV so the
//! picture is reproducible from data.

use std::io::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const PALETTE: &[[u8; 3]] = &[
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

fn color_for(index: usize) -> Rgb<u8> {
    Rgb(PALETTE[index % PALETTE.len()])
}

/// Write 2-D points colored by label. CSV columns: x, y, label.
pub fn scatter(
    points: &[(f64, f64)],
    labels: &[String],
    png_path: &Path,
    csv_path: &Path,
) -> Result<()> {
    let mut csv = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    writeln!(csv, "x,y,label").map_err(|e| Error::io(csv_path, e))?;
    for (p, l) in points.iter().zip(labels) {
        writeln!(csv, "{},{},{}", p.0, p.1, l).map_err(|e| Error::io(csv_path, e))?;
    }

    let size = 800u32;
    let margin = 40.0;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    if !points.is_empty() {
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            min_x = min_x.min(p.0);
            max_x = max_x.max(p.0);
            min_y = min_y.min(p.1);
            max_y = max_y.max(p.1);
        }
        let span_x = (max_x - min_x).max(1e-9);
        let span_y = (max_y - min_y).max(1e-9);
        let mut label_ids: Vec<&String> = labels.iter().collect();
        label_ids.sort();
        label_ids.dedup();
        for (p, l) in points.iter().zip(labels) {
            let label_index = label_ids.iter().position(|&x| x == l).unwrap_or(0);
            let px = margin + (p.0 - min_x) / span_x * (size as f64 - 2.0 * margin);
            let py = margin + (1.0 - (p.1 - min_y) / span_y) * (size as f64 - 2.0 * margin);
            draw_dot(&mut img, px as i64, py as i64, color_for(label_index));
        }
    }
    img.save(png_path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", png_path.display())))
}

fn draw_dot(img: &mut RgbImage, cx: i64, cy: i64, color: Rgb<u8>) {
    for dx in -2i64..=2 {
        for dy in -2i64..=2 {
            if dx * dx + dy * dy > 5 {
                continue;
            }
            let x = cx + dx;
            let y = cy + dy;
            if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Histogram of labeled counts. CSV columns: label, count.
pub fn bars(counts: &[(String, usize)], png_path: &Path, csv_path: &Path) -> Result<()> {
    let mut csv = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    writeln!(csv, "label,count").map_err(|e| Error::io(csv_path, e))?;
    for (label, count) in counts {
        writeln!(csv, "{label},{count}").map_err(|e| Error::io(csv_path, e))?;
    }

    let width = 800u32;
    let height = 500u32;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    if !counts.is_empty() {
        let max_count = counts.iter().map(|(_, c)| *c).max().unwrap_or(1).max(1);
        let margin = 40u32;
        let plot_w = width - 2 * margin;
        let plot_h = height - 2 * margin;
        let bar_w = (plot_w / counts.len() as u32).max(1);
        for (i, (_, count)) in counts.iter().enumerate() {
            let bar_h = (*count as f64 / max_count as f64 * plot_h as f64) as u32;
            let x0 = margin + i as u32 * bar_w;
            let color = color_for(i);
            for x in x0..(x0 + bar_w.saturating_sub(2)).min(width - 1) {
                for y in (height - margin - bar_h)..(height - margin) {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img.save(png_path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", png_path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_writes_png_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("s.png");
        let csv = dir.path().join("s.csv");
        let points = vec![(0.0, 0.0), (1.0, 1.0), (-1.0, 0.5)];
        let labels = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        scatter(&points, &labels, &png, &csv).unwrap();
        assert!(png.exists());
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("x,y,label"));
    }

    #[test]
    fn single_bar_histogram() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("b.png");
        let csv = dir.path().join("b.csv");
        bars(&[("area".into(), 7)], &png, &csv).unwrap();
        assert!(png.exists());
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.contains("area,7"));
    }

    #[test]
    fn empty_inputs_still_write_files() {
        let dir = tempfile::tempdir().unwrap();
        scatter(
            &[],
            &[],
            &dir.path().join("e.png"),
            &dir.path().join("e.csv"),
        )
        .unwrap();
        bars(&[], &dir.path().join("eb.png"), &dir.path().join("eb.csv")).unwrap();
    }
}
