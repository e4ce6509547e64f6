//! Dataset layout, the deterministic synthetic scene generator, loading, and
//! tensor conversion.
//!
//! On-disk layout: `root/split/image/*.png` (8-bit RGB), `root/split/depth/*.png`
//! (16-bit grayscale, millimeters, 0 = invalid), `root/split/label/*.png`
//! (8-bit class ids), paired by identical file stem, plus `root/manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth_space::{to_log_depth, DepthMap, DepthRange};
use crate::{Error, Result};

pub const IGNORE_ID: u32 = 255;

/// One scene: image in [0,1], metric depth, integer labels.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[H, W, 3]` in [0,1].
    pub image: Array3<f64>,
    pub depth: DepthMap,
    /// `[H, W]` in `{0..K-1} ∪ {ignore_id}`.
    pub labels: Array2<u32>,
    pub id: String,
}

/// Dataset-wide facts stored beside the splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub ignore_id: u32,
    pub d_min: f64,
    pub d_max: f64,
    pub class_names: Vec<String>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl DatasetManifest {
    pub fn range(&self) -> Result<DepthRange> {
        DepthRange::new(self.d_min, self.d_max)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(root.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if m.num_classes < 2 {
            return Err(Error::Data {
                path: path.to_path_buf(),
                msg: format!("num_classes must be at least 2, got {}", m.num_classes),
            });
        }
        if m.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Data {
                path: path.to_path_buf(),
                msg: "normalization std entries must be positive".into(),
            });
        }
        Ok(m)
    }
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 5,
            // d_max stays under the 65.535 m ceiling of 16-bit millimeters;
            // d_min keeps the dynamic range moderate, so a mis-localized
            // occlusion edge cannot produce a catastrophic relative error
            d_min: 1.0,
            d_max: 50.0,
            min_shapes: 3,
            max_shapes: 8,
            // pixel noise corrupts the shading that encodes depth, so it is
            // kept small enough to leave a few-percent depth noise floor
            noise_sigma: 0.005,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic generator needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 8 {
            return Err(Error::Config(format!(
                "synthetic generator supports at most 8 classes, got {}",
                self.num_classes
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic image size must be positive".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "invalid shape count range {}..={}",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.d_max * 1000.0 > u16::MAX as f64 {
            return Err(Error::Config(format!(
                "d_max {} m does not fit 16-bit millimeter depth files",
                self.d_max
            )));
        }
        DepthRange::new(self.d_min, self.d_max).map(|_| ())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            num_classes: self.num_classes,
            ignore_id: IGNORE_ID,
            d_min: self.d_min,
            d_max: self.d_max,
            class_names: (0..self.num_classes)
                .map(|c| if c == 0 { "background".to_string() } else { format!("class{c}") })
                .collect(),
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Base color of a class, chosen well separated in RGB.
pub fn class_color(c: u32) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.35, 0.35, 0.35],
        [0.90, 0.20, 0.20],
        [0.20, 0.85, 0.25],
        [0.20, 0.30, 0.95],
        [0.95, 0.85, 0.15],
        [0.80, 0.25, 0.85],
        [0.15, 0.85, 0.85],
        [0.95, 0.55, 0.15],
    ];
    PALETTE[c as usize % PALETTE.len()]
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rectangle,
    Ellipse,
}

struct Shape {
    kind: ShapeKind,
    class: u32,
    depth: f64,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Shape {
    fn covers(&self, i: usize, j: usize) -> bool {
        let dy = i as f64 + 0.5 - self.cy;
        let dx = j as f64 + 0.5 - self.cx;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= self.ry && dx.abs() <= self.rx,
            ShapeKind::Ellipse => {
                (dy / self.ry).powi(2) + (dx / self.rx).powi(2) <= 1.0
            }
        }
    }
}

fn draw_shapes(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Vec<Shape> {
    let n = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let log_min = spec.d_min.ln();
    let log_max = (spec.d_max * 0.9).ln();
    (0..n)
        .map(|_| Shape {
            kind: if rng.random_range(0.0..1.0) < 0.5 {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Ellipse
            },
            class: rng.random_range(1..spec.num_classes as u32),
            depth: (log_min + rng.random_range(0.0..=1.0) * (log_max - log_min)).exp(),
            cy: rng.random_range(0.0..h),
            cx: rng.random_range(0.0..w),
            ry: rng.random_range(h * 0.12..h * 0.40),
            rx: rng.random_range(w * 0.12..w * 0.40),
        })
        .collect()
}

/// Renders one scene: background plane at `d_max`, shapes painted
/// back-to-front so depth and labels agree about occlusion; RGB carries both a
/// class cue (base color) and a depth cue (shading).
pub fn render_scene(seed: u64, index: u64, split: &str, spec: &SyntheticSpec) -> Sample {
    let mut hasher_seed = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in split.bytes() {
        hasher_seed = hasher_seed.wrapping_mul(31).wrapping_add(u64::from(b));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hasher_seed);
    let (h, w) = (spec.height, spec.width);
    let range = DepthRange::new(spec.d_min, spec.d_max).expect("validated");

    let mut shapes = draw_shapes(&mut rng, spec);
    // back to front: farthest first, so nearer shapes overwrite
    shapes.sort_by(|a, b| b.depth.partial_cmp(&a.depth).expect("finite depths"));

    let mut depth = Array2::from_elem((h, w), spec.d_max);
    let mut labels = Array2::from_elem((h, w), 0u32);
    for s in &shapes {
        for i in 0..h {
            for j in 0..w {
                if s.covers(i, j) {
                    depth[(i, j)] = s.depth;
                    labels[(i, j)] = s.class;
                }
            }
        }
    }

    let mut image = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let base = class_color(labels[(i, j)]);
            let dlog = crate::depth_space::log_depth_scalar(depth[(i, j)], &range);
            let shade = 0.25 + 0.75 * (1.0 - dlog);
            for (c, &b) in base.iter().enumerate() {
                // Box-Muller noise
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                image[(i, j, c)] = (b * shade + spec.noise_sigma * z).clamp(0.0, 1.0);
            }
        }
    }

    Sample {
        image,
        depth: DepthMap::dense(depth),
        labels,
        id: format!("scene_{index:05}"),
    }
}

fn split_dirs(root: &Path, split: &str) -> (PathBuf, PathBuf, PathBuf) {
    let base = root.join(split);
    (base.join("image"), base.join("depth"), base.join("label"))
}

/// Writes `count` scenes of one split. Byte-identical given identical
/// arguments.
pub fn gen_synthetic(root: &Path, split: &str, seed: u64, count: usize, spec: &SyntheticSpec) -> Result<()> {
    spec.validate()?;
    let (img_dir, depth_dir, label_dir) = split_dirs(root, split);
    for d in [&img_dir, &depth_dir, &label_dir] {
        fs::create_dir_all(d)?;
    }
    spec.manifest().save(root)?;
    for index in 0..count {
        let sample = render_scene(seed, index as u64, split, spec);
        write_sample(root, split, &sample)?;
    }
    Ok(())
}

/// Writes one sample into the split's three directories.
pub fn write_sample(root: &Path, split: &str, sample: &Sample) -> Result<()> {
    let (img_dir, depth_dir, label_dir) = split_dirs(root, split);
    for d in [&img_dir, &depth_dir, &label_dir] {
        fs::create_dir_all(d)?;
    }
    let (h, w) = sample.depth.shape();

    let mut rgb = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                rgb.push((sample.image[(i, j, c)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("sized buffer");
    img.save(img_dir.join(format!("{}.png", sample.id)))?;

    let mut mm = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let v = if sample.depth.valid[(i, j)] {
                (sample.depth.values[(i, j)] * 1000.0).round().clamp(1.0, f64::from(u16::MAX)) as u16
            } else {
                0
            };
            mm.push(v);
        }
    }
    let dimg = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, mm)
        .expect("sized buffer");
    dimg.save(depth_dir.join(format!("{}.png", sample.id)))?;

    let mut lab = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let v = sample.labels[(i, j)];
            lab.push(if v == IGNORE_ID { 255u8 } else { v as u8 });
        }
    }
    let limg = image::GrayImage::from_raw(w as u32, h as u32, lab).expect("sized buffer");
    limg.save(label_dir.join(format!("{}.png", sample.id)))?;
    Ok(())
}

/// Loads every sample of a split in lexicographic id order. An absent or
/// empty split directory yields an empty list.
pub fn load_dataset(root: &Path, split: &str, manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    let (img_dir, depth_dir, label_dir) = split_dirs(root, split);
    if !img_dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut stems: Vec<String> = fs::read_dir(&img_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().is_some_and(|x| x == "png"))
                .then(|| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .flatten()
        })
        .collect();
    stems.sort();

    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        out.push(load_sample(&img_dir, &depth_dir, &label_dir, &stem, manifest)?);
    }
    Ok(out)
}

fn load_sample(
    img_dir: &Path,
    depth_dir: &Path,
    label_dir: &Path,
    stem: &str,
    manifest: &DatasetManifest,
) -> Result<Sample> {
    let img_path = img_dir.join(format!("{stem}.png"));
    let depth_path = depth_dir.join(format!("{stem}.png"));
    let label_path = label_dir.join(format!("{stem}.png"));
    let fail = |path: &Path, msg: String| Error::Data {
        path: path.to_path_buf(),
        msg,
    };

    let img = image::open(&img_path)
        .map_err(|e| fail(&img_path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut image_arr = Array3::zeros((h, w, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            image_arr[(y as usize, x as usize, c)] = f64::from(p.0[c]) / 255.0;
        }
    }

    let dimg = image::open(&depth_path).map_err(|e| fail(&depth_path, e.to_string()))?;
    let dimg = dimg.to_luma16();
    if (dimg.width() as usize, dimg.height() as usize) != (w, h) {
        return Err(fail(
            &depth_path,
            format!("depth size {}x{} mismatches image {}x{}", dimg.width(), dimg.height(), w, h),
        ));
    }
    let mut depth_vals = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for (x, y, p) in dimg.enumerate_pixels() {
        let mm = p.0[0];
        if mm > 0 {
            depth_vals[(y as usize, x as usize)] = f64::from(mm) / 1000.0;
            valid[(y as usize, x as usize)] = true;
        }
    }

    let limg = image::open(&label_path).map_err(|e| fail(&label_path, e.to_string()))?;
    let limg = limg.to_luma8();
    if (limg.width() as usize, limg.height() as usize) != (w, h) {
        return Err(fail(
            &label_path,
            format!("label size {}x{} mismatches image {}x{}", limg.width(), limg.height(), w, h),
        ));
    }
    let mut labels = Array2::zeros((h, w));
    for (x, y, p) in limg.enumerate_pixels() {
        let v = u32::from(p.0[0]);
        if v != manifest.ignore_id && v as usize >= manifest.num_classes {
            return Err(fail(
                &label_path,
                format!(
                    "label {v} at ({y}, {x}) outside 0..{} and not the ignore id {}",
                    manifest.num_classes, manifest.ignore_id
                ),
            ));
        }
        labels[(y as usize, x as usize)] = v;
    }

    Ok(Sample {
        image: image_arr,
        depth: DepthMap::new(depth_vals, valid)?,
        labels,
        id: stem.to_string(),
    })
}

/// One sample converted for training: normalized image, Eq.-10 log depth,
/// integer labels as reals, and the validity mask.
pub struct SampleTensors {
    /// `[3, H, W]`, per-channel normalized.
    pub image: ArrayD<f64>,
    /// `[1, H, W]` in [0,1]; 0 on invalid pixels.
    pub log_depth: ArrayD<f64>,
    /// `[H, W]` integer-valued.
    pub labels: ArrayD<f64>,
    /// `[H, W]`.
    pub valid: ArrayD<bool>,
    /// Ground-truth pixels clamped into the depth range by the log transform.
    pub clamped: usize,
}

/// Normalizes the image and maps depth through the log parameterization.
pub fn sample_to_tensors(sample: &Sample, manifest: &DatasetManifest) -> Result<SampleTensors> {
    let range = manifest.range()?;
    let (h, w) = sample.depth.shape();
    let mut image = ArrayD::zeros(IxDyn(&[3, h, w]));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                image[IxDyn(&[c, i, j])] =
                    (sample.image[(i, j, c)] - manifest.mean[c]) / manifest.std[c];
            }
        }
    }
    let (log_map, clamped) = to_log_depth(&sample.depth, &range)?;
    let mut log_depth = ArrayD::zeros(IxDyn(&[1, h, w]));
    let mut valid = ArrayD::from_elem(IxDyn(&[h, w]), false);
    for i in 0..h {
        for j in 0..w {
            log_depth[IxDyn(&[0, i, j])] = log_map.values[(i, j)];
            valid[IxDyn(&[i, j])] = log_map.valid[(i, j)];
        }
    }
    let labels = ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| f64::from(sample.labels[(ix[0], ix[1])]));
    Ok(SampleTensors {
        image,
        log_depth,
        labels,
        valid,
        clamped,
    })
}

/// Inverse of the image normalization, for export paths.
pub fn denormalize(channel: usize, v: f64, manifest: &DatasetManifest) -> f64 {
    v * manifest.std[channel] + manifest.mean[channel]
}

#[cfg(test)]
mod tests;
