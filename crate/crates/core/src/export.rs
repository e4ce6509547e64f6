//! Prediction export: per-sample depth and label PNGs, side-by-side
//! composites, and a loss-curve plot rendered from a run's step records.
//!
//! Depth files use the dataset convention: 16-bit grayscale millimeters,
//! zero marking invalid pixels. Label files are 8-bit class ids with 255 as
//! the ignore id.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::data::{class_color, Sample, IGNORE_ID};
use crate::depth_space::{DepthMap, DepthRange};
use crate::{Error, Result};

/// Writes a depth map as 16-bit grayscale millimeters (0 = invalid).
pub fn write_depth_png16(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = depth.shape();
    let mut mm = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let v = if depth.valid[(i, j)] {
                (depth.values[(i, j)] * 1000.0)
                    .round()
                    .clamp(1.0, f64::from(u16::MAX)) as u16
            } else {
                0
            };
            mm.push(v);
        }
    }
    let img = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, mm).expect("sized buffer");
    img.save(path)?;
    Ok(())
}

/// Reads a depth PNG written by [`write_depth_png16`] back to meters.
pub fn read_depth_png16(path: &Path) -> Result<DepthMap> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let mut values = Array2::zeros((h as usize, w as usize));
    let mut valid = Array2::from_elem((h as usize, w as usize), false);
    for (x, y, p) in img.enumerate_pixels() {
        let mm = p.0[0];
        if mm > 0 {
            values[(y as usize, x as usize)] = f64::from(mm) / 1000.0;
            valid[(y as usize, x as usize)] = true;
        }
    }
    DepthMap::new(values, valid)
}

/// Writes class labels as an 8-bit grayscale PNG of raw ids.
pub fn write_labels_png8(path: &Path, labels: &Array2<u32>) -> Result<()> {
    let (h, w) = labels.dim();
    let mut buf = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let v = labels[(i, j)];
            if v != IGNORE_ID && v > 254 {
                return Err(Error::InvalidInput(format!(
                    "label id {v} does not fit an 8-bit file"
                )));
            }
            buf.push(if v == IGNORE_ID { 255u8 } else { v as u8 });
        }
    }
    let img = GrayImage::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    img.save(path)?;
    Ok(())
}

fn put(img: &mut RgbImage, x0: u32, i: usize, j: usize, rgb: [f64; 3]) {
    let px = Rgb([
        (rgb[0].clamp(0.0, 1.0) * 255.0).round() as u8,
        (rgb[1].clamp(0.0, 1.0) * 255.0).round() as u8,
        (rgb[2].clamp(0.0, 1.0) * 255.0).round() as u8,
    ]);
    img.put_pixel(x0 + j as u32, i as u32, px);
}

fn paint_depth(img: &mut RgbImage, x0: u32, depth: &DepthMap, range: &DepthRange) {
    let (h, w) = depth.shape();
    for i in 0..h {
        for j in 0..w {
            let rgb = if depth.valid[(i, j)] {
                // normalized log depth: near = bright, far = dark
                let d = depth.values[(i, j)].clamp(range.d_min, range.d_max);
                let v = 1.0 - (d / range.d_min).ln() / range.log_span();
                [v, v, v]
            } else {
                [0.5, 0.0, 0.0]
            };
            put(img, x0, i, j, rgb);
        }
    }
}

fn paint_labels(img: &mut RgbImage, x0: u32, labels: &Array2<u32>) {
    let (h, w) = labels.dim();
    for i in 0..h {
        for j in 0..w {
            let v = labels[(i, j)];
            let rgb = if v == IGNORE_ID {
                [0.0, 0.0, 0.0]
            } else {
                class_color(v)
            };
            put(img, x0, i, j, rgb);
        }
    }
}

/// Builds the five-panel composite `input | gt depth | pred depth | gt labels
/// | pred labels`; the result is exactly five image-widths wide.
pub fn composite(
    sample: &Sample,
    pred_depth: &DepthMap,
    pred_labels: &Array2<u32>,
    range: &DepthRange,
) -> Result<RgbImage> {
    let (h, w) = sample.depth.shape();
    if pred_depth.shape() != (h, w) || pred_labels.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "prediction shape differs from sample {}",
            sample.id
        )));
    }
    let mut img = RgbImage::new(5 * w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let rgb = [
                sample.image[(i, j, 0)],
                sample.image[(i, j, 1)],
                sample.image[(i, j, 2)],
            ];
            put(&mut img, 0, i, j, rgb);
        }
    }
    paint_depth(&mut img, w as u32, &sample.depth, range);
    paint_depth(&mut img, 2 * w as u32, pred_depth, range);
    paint_labels(&mut img, 3 * w as u32, &sample.labels);
    paint_labels(&mut img, 4 * w as u32, pred_labels);
    Ok(img)
}

/// Writes one sample's three export files under `out_dir`:
/// `depth/<id>.png`, `label/<id>.png`, and `composite/<id>.png`.
pub fn export_sample(
    out_dir: &Path,
    sample: &Sample,
    pred_depth: &DepthMap,
    pred_labels: &Array2<u32>,
    range: &DepthRange,
) -> Result<()> {
    for d in ["depth", "label", "composite"] {
        fs::create_dir_all(out_dir.join(d))?;
    }
    let name = format!("{}.png", sample.id);
    write_depth_png16(&out_dir.join("depth").join(&name), pred_depth)?;
    write_labels_png8(&out_dir.join("label").join(&name), pred_labels)?;
    let img = composite(sample, pred_depth, pred_labels, range)?;
    img.save(out_dir.join("composite").join(&name))?;
    Ok(())
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// One parsed line of `log.records`, reduced to what the plot needs.
struct CurvePoint {
    step: f64,
    series: Vec<f64>,
}

const CURVE_KEYS: [&str; 3] = ["l_total", "l_depth", "l_seg"];
const CURVE_COLORS: [Rgb<u8>; 3] = [Rgb([20, 20, 20]), Rgb([40, 90, 200]), Rgb([40, 160, 60])];

/// Renders the loss curves (total, depth, segmentation) of a run's
/// `log.records` file as a PNG polyline plot.
pub fn plot_loss_curve(records: &Path, out: &Path) -> Result<()> {
    let file = fs::File::open(records)
        .map_err(|e| Error::Data { path: records.to_path_buf(), msg: e.to_string() })?;
    let mut points = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Data { path: records.to_path_buf(), msg: e.to_string() })?;
        let num = |k: &str| v.get(k).and_then(|x| x.as_f64());
        let step = num("step").ok_or_else(|| Error::Data {
            path: records.to_path_buf(),
            msg: "record without a step field".into(),
        })?;
        points.push(CurvePoint {
            step,
            series: CURVE_KEYS.map(|k| num(k).unwrap_or(f64::NAN)).to_vec(),
        });
    }
    if points.is_empty() {
        return Err(Error::Data {
            path: records.to_path_buf(),
            msg: "no step records to plot".into(),
        });
    }

    let (width, height, margin) = (800u32, 400u32, 40.0);
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (x0, x1) = (margin, f64::from(width) - margin);
    let (y0, y1) = (f64::from(height) - margin, margin);
    let axis = Rgb([120, 120, 120]);
    draw_line(&mut img, (x0, y0), (x1, y0), axis);
    draw_line(&mut img, (x0, y0), (x0, y1), axis);

    let smin = points.first().expect("non-empty").step;
    let smax = points.last().expect("non-empty").step.max(smin + 1.0);
    let finite: Vec<f64> = points
        .iter()
        .flat_map(|p| p.series.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let sx = |s: f64| x0 + (s - smin) / (smax - smin) * (x1 - x0);
    let sy = |v: f64| y0 + (v - lo) / (hi - lo) * (y1 - y0);

    for (idx, color) in CURVE_COLORS.iter().enumerate() {
        let mut prev: Option<(f64, f64)> = None;
        for p in &points {
            let v = p.series[idx];
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let cur = (sx(p.step), sy(v));
            if let Some(a) = prev {
                draw_line(&mut img, a, cur, *color);
            }
            prev = Some(cur);
        }
    }
    img.save(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_scene, SyntheticSpec};
    use crate::metrics::depth_metrics;
    use tempfile::tempdir;

    fn scene() -> (Sample, DepthRange) {
        let spec = SyntheticSpec::default();
        let sample = render_scene(11, 0, "export", &spec);
        let range = DepthRange::new(spec.d_min, spec.d_max).unwrap();
        (sample, range)
    }

    #[test]
    fn depth_png_round_trips_within_one_millimeter() {
        let (sample, _) = scene();
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.png");
        write_depth_png16(&path, &sample.depth).unwrap();
        let back = read_depth_png16(&path).unwrap();
        assert_eq!(back.valid, sample.depth.valid);
        for (a, b) in back.values.iter().zip(sample.depth.values.iter()) {
            assert!((a - b).abs() <= 0.001 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn composite_is_five_panels_wide() {
        let (sample, range) = scene();
        let img = composite(&sample, &sample.depth, &sample.labels, &range).unwrap();
        let (h, w) = sample.depth.shape();
        assert_eq!(img.dimensions(), (5 * w as u32, h as u32));
    }

    #[test]
    fn exporting_ground_truth_re_imports_metric_perfect() {
        // pipeline closure: gt -> png -> loader -> metrics is lossless up to
        // millimeter quantization
        let (sample, range) = scene();
        let dir = tempdir().unwrap();
        let path = dir.path().join("gt.png");
        write_depth_png16(&path, &sample.depth).unwrap();
        let back = read_depth_png16(&path).unwrap();
        let m = depth_metrics(&back, &sample.depth, &range).unwrap();
        assert!(m.abs_rel < 1e-2, "abs_rel {}", m.abs_rel);
        assert!((m.delta1 - 1.0).abs() < 1e-12);
        assert!(m.rmse < 1e-3, "rmse {}", m.rmse);
    }

    #[test]
    fn label_png_preserves_ids_and_ignore() {
        let (sample, _) = scene();
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.png");
        write_labels_png8(&path, &sample.labels).unwrap();
        let img = image::open(&path).unwrap().into_luma8();
        for (x, y, p) in img.enumerate_pixels() {
            let want = sample.labels[(y as usize, x as usize)];
            let got = u32::from(p.0[0]);
            let got = if got == 255 { IGNORE_ID } else { got };
            assert_eq!(got, want);
        }
    }

    #[test]
    fn loss_curve_plots_from_records() {
        let dir = tempdir().unwrap();
        let rec = dir.path().join("log.records");
        let mut text = String::new();
        for s in 1..=50 {
            text += &format!(
                "{{\"step\":{s},\"l_total\":{},\"l_depth\":{},\"l_seg\":{}}}\n",
                5.0 / s as f64,
                2.0 / s as f64,
                1.0 / s as f64
            );
        }
        std::fs::write(&rec, text).unwrap();
        let out = dir.path().join("loss.png");
        plot_loss_curve(&rec, &out).unwrap();
        let img = image::open(&out).unwrap().into_rgb8();
        assert_eq!(img.dimensions(), (800, 400));
        // the plot is not blank
        assert!(img.pixels().any(|p| p.0 != [255, 255, 255]));
        // empty record files are an error
        let empty = dir.path().join("empty.records");
        std::fs::write(&empty, "").unwrap();
        assert!(plot_loss_curve(&empty, &out).is_err());
    }
}
