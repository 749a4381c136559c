//! Procedural stick figures.
//!
//! A figure is a chain of `K − 1` segments drawn from keypoint 0 (the root) to
//! keypoint `K − 1`. All geometry is sampled in fractions of the image extents,
//! so the same seed rendered at `2H×2W` is the same figure at twice the size.
//! Joints are told apart by a disk on the root and by segment brightness
//! falling off along the chain.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export;
use crate::heatmaps::{Keypoint, KeypointSet};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const DEFAULT_KEYPOINTS: usize = 4;
pub const MAX_KEYPOINTS: usize = 17;
pub const MIN_EXTENT: usize = 32;
/// Keypoints stay this fraction of each extent away from the border.
pub const MARGIN: f64 = 0.125;
/// Stroke widths are 2–4 px up to this minimum extent and scale beyond it.
pub const REFERENCE_EXTENT: f64 = 48.0;
const MAX_TURN: f64 = 2.0 * PI / 3.0;
const MIN_SEPARATION: f64 = 0.12;
const TRAIN_FRACTION: f64 = 0.9;

const TAG_NOISE: u64 = 1;

/// Axis-aligned box in pixel coordinates, `x0 ≤ x < x1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FigureSample {
    pub seed: u64,
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor<f64>,
    pub keypoints: KeypointSet,
    pub occlusion_boxes: Vec<Rect>,
}

impl FigureSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

struct Geometry {
    /// Fractions of (width, height).
    points: Vec<(f64, f64)>,
}

fn sample_geometry(rng: &mut SplitMix64, height: usize, width: usize, k: usize) -> Geometry {
    let unit = height.min(width) as f64;
    let (h, w) = (height as f64, width as f64);
    let segments = k - 1;
    // longer chains get proportionally shorter segments
    let shrink = (3.0 / segments as f64).min(1.0);
    loop {
        let mut points = Vec::with_capacity(k);
        let mut p = (
            rng.uniform(MARGIN, 1.0 - MARGIN) * w,
            rng.uniform(MARGIN, 1.0 - MARGIN) * h,
        );
        points.push(p);
        let mut angle = rng.uniform(0.0, 2.0 * PI);
        for s in 0..segments {
            if s > 0 {
                angle += rng.uniform(-MAX_TURN, MAX_TURN);
            }
            let len = rng.uniform(0.15, 0.35) * shrink * unit;
            p = (p.0 + len * angle.cos(), p.1 + len * angle.sin());
            points.push(p);
        }
        let inside = points.iter().all(|&(x, y)| {
            x >= MARGIN * w && x <= (1.0 - MARGIN) * w && y >= MARGIN * h && y <= (1.0 - MARGIN) * h
        });
        let separated = (0..k).all(|a| {
            (a + 1..k).all(|b| {
                let (pa, pb) = (points[a], points[b]);
                (pa.0 - pb.0).hypot(pa.1 - pb.1) >= MIN_SEPARATION * unit
            })
        });
        if inside && separated {
            return Geometry {
                points: points.into_iter().map(|(x, y)| (x / w, y / h)).collect(),
            };
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (px - a.0 - t * dx).hypot(py - a.1 - t * dy)
}

/// Blends `color` over the pixels within `half_width` of the segment `a–b`,
/// with a one-pixel linear edge.
fn stroke(
    image: &mut [f64],
    height: usize,
    width: usize,
    a: (f64, f64),
    b: (f64, f64),
    half_width: f64,
    color: [f64; 3],
) {
    let pad = half_width + 1.0;
    let x_lo = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
    let x_hi = ((a.0.max(b.0) + pad).ceil() as usize).min(width - 1);
    let y_lo = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
    let y_hi = ((a.1.max(b.1) + pad).ceil() as usize).min(height - 1);
    let plane = height * width;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dist = segment_distance(x as f64, y as f64, a, b);
            let alpha = (half_width + 0.5 - dist).clamp(0.0, 1.0);
            if alpha > 0.0 {
                for (c, &col) in color.iter().enumerate() {
                    let v = &mut image[c * plane + y * width + x];
                    *v = *v * (1.0 - alpha) + col * alpha;
                }
            }
        }
    }
}

/// Full-value color from a hue in `[0, 6)` and a saturation.
fn hsv_to_rgb(hue: f64, saturation: f64) -> [f64; 3] {
    let c = saturation;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let m = 1.0 - c;
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// A figure with the default four keypoints (root, mid, elbow, end).
pub fn sample_figure(
    seed: u64,
    height: usize,
    width: usize,
    occlusion_p: f64,
) -> Result<FigureSample> {
    sample_chain(seed, height, width, occlusion_p, DEFAULT_KEYPOINTS)
}

pub fn sample_chain(
    seed: u64,
    height: usize,
    width: usize,
    occlusion_p: f64,
    keypoints: usize,
) -> Result<FigureSample> {
    if height < MIN_EXTENT || width < MIN_EXTENT {
        return Err(Error::Config(format!(
            "figures need extents of at least {MIN_EXTENT}, got {height}x{width}"
        )));
    }
    if !(2..=MAX_KEYPOINTS).contains(&keypoints) {
        return Err(Error::Config(format!(
            "keypoint count {keypoints} outside 2..={MAX_KEYPOINTS}"
        )));
    }
    if !(0.0..=1.0).contains(&occlusion_p) {
        return Err(Error::Config(format!(
            "occlusion probability {occlusion_p} outside [0, 1]"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let (h, w) = (height as f64, width as f64);
    let unit = h.min(w);
    let scale = (unit / REFERENCE_EXTENT).max(1.0);

    let geometry = sample_geometry(&mut rng, height, width, keypoints);
    let points: Vec<(f64, f64)> = geometry
        .points
        .iter()
        .map(|&(fx, fy)| (fx * w, fy * h))
        .collect();

    let stroke_width = rng.uniform(2.0, 4.0) * scale;
    let base = hsv_to_rgb(rng.uniform(0.0, 6.0), rng.uniform(0.2, 0.8));
    let background = rng.uniform(0.0, 0.2);

    let occlusion = if rng.bernoulli(occlusion_p) {
        let target = rng.below(keypoints);
        let side = (rng.uniform(0.15, 0.3) * unit, rng.uniform(0.15, 0.3) * unit);
        let shift = (rng.next_f64(), rng.next_f64());
        let color: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.0, 1.0));
        Some((target, side, shift, color))
    } else {
        None
    };

    let plane = height * width;
    let mut noise = SplitMix64::derive(seed, TAG_NOISE);
    let mut image: Vec<f64> = (0..3 * plane)
        .map(|_| (background + noise.uniform(-0.05, 0.05)).clamp(0.0, 1.0))
        .collect();

    let segments = keypoints - 1;
    for s in 0..segments {
        let shade = 1.0 - 0.55 * s as f64 / (segments.max(2) - 1) as f64;
        let color = base.map(|c| c * shade);
        stroke(
            &mut image,
            height,
            width,
            points[s],
            points[s + 1],
            stroke_width / 2.0,
            color,
        );
    }
    // root marker: a disk is a zero-length stroke
    stroke(
        &mut image,
        height,
        width,
        points[0],
        points[0],
        stroke_width / 2.0 + 1.5,
        base,
    );

    let mut boxes = Vec::new();
    if let Some((target, mut side, shift, color)) = occlusion {
        let (tx, ty) = points[target];
        loop {
            let x0 = tx - shift.0 * side.0;
            let y0 = ty - shift.1 * side.1;
            let rect = Rect {
                x0: x0.max(0.0),
                y0: y0.max(0.0),
                x1: (x0 + side.0).min(w),
                y1: (y0 + side.1).min(h),
            };
            let others_clear = points
                .iter()
                .enumerate()
                .all(|(i, &(x, y))| i == target || !rect.contains(x, y));
            if others_clear && rect.contains(tx, ty) {
                boxes.push(rect);
                break;
            }
            side = (side.0 * 0.8, side.1 * 0.8);
        }
        let rect = boxes[0];
        for y in 0..height {
            for x in 0..width {
                if rect.contains(x as f64, y as f64) {
                    for (c, &col) in color.iter().enumerate() {
                        image[c * plane + y * width + x] = col;
                    }
                }
            }
        }
    }

    Ok(FigureSample {
        seed,
        image: Tensor::new(&[3, height, width], image)?,
        keypoints: KeypointSet::new(
            points
                .iter()
                .map(|&(x, y)| Keypoint::visible(x, y))
                .collect(),
        ),
        occlusion_boxes: boxes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub occlusion_p: f64,
    pub samples: Vec<FigureSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn keypoints(&self) -> usize {
        self.samples.first().map_or(0, |s| s.keypoints.len())
    }

    /// First 90% for training, the rest held out.
    pub fn split(&self) -> (&[FigureSample], &[FigureSample]) {
        self.samples.split_at(train_count(self.samples.len()))
    }

    pub fn split_at(&self, train: usize) -> (&[FigureSample], &[FigureSample]) {
        self.samples.split_at(train.min(self.samples.len()))
    }
}

/// Size of the training part in [`Dataset::split`].
pub fn train_count(n: usize) -> usize {
    ((n as f64 * TRAIN_FRACTION).floor() as usize).clamp(n.min(1), n)
}

/// Per-sample seeds drawn from one stream.
pub fn sample_seeds(n: usize, seed: u64) -> Vec<u64> {
    let mut stream = SplitMix64::new(seed);
    (0..n).map(|_| stream.next_u64()).collect()
}

pub fn make_dataset(
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
    occlusion_p: f64,
) -> Result<Dataset> {
    make_dataset_k(n, seed, height, width, occlusion_p, DEFAULT_KEYPOINTS)
}

pub fn make_dataset_k(
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
    occlusion_p: f64,
    keypoints: usize,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let samples = sample_seeds(n, seed)
        .into_iter()
        .map(|s| sample_chain(s, height, width, occlusion_p, keypoints))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seed,
        height,
        width,
        occlusion_p,
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct Meta {
    seed: u64,
    height: usize,
    width: usize,
    occlusion_p: f64,
    keypoints: usize,
    samples: Vec<SampleMeta>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    file: String,
    seed: u64,
    occlusion_boxes: Vec<Rect>,
}

/// Writes `img_NNNNN.ppm` files, `keypoints.csv` and `meta.json` into `dir`.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("sample,keypoint,x,y,visible\n");
    let mut samples = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let file = format!("img_{i:05}.ppm");
        export::write_ppm(&dir.join(&file), s.image.data(), s.height(), s.width())?;
        for (k, kp) in s.keypoints.points.iter().enumerate() {
            csv.push_str(&format!(
                "{i},{k},{},{},{}\n",
                export::fmt_real(kp.x),
                export::fmt_real(kp.y),
                u8::from(kp.visible)
            ));
        }
        samples.push(SampleMeta {
            file,
            seed: s.seed,
            occlusion_boxes: s.occlusion_boxes.clone(),
        });
    }
    fs::write(dir.join("keypoints.csv"), csv)?;
    let meta = Meta {
        seed: dataset.seed,
        height: dataset.height,
        width: dataset.width,
        occlusion_p: dataset.occlusion_p,
        keypoints: dataset.keypoints(),
        samples,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads a directory written by [`export_dataset`]. Images come back at the
/// 16-bit precision of the files.
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let csv = fs::read_to_string(dir.join("keypoints.csv"))?;
    let mut points = vec![vec![None; meta.keypoints]; meta.samples.len()];
    for (lineno, line) in csv
        .lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let bad = || Error::Format(format!("keypoints.csv line {}: {line:?}", lineno + 1));
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 5 {
            return Err(bad());
        }
        let i: usize = cells[0].parse().map_err(|_| bad())?;
        let k: usize = cells[1].parse().map_err(|_| bad())?;
        let x: f64 = cells[2].parse().map_err(|_| bad())?;
        let y: f64 = cells[3].parse().map_err(|_| bad())?;
        let visible = match cells[4] {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        let slot = points
            .get_mut(i)
            .and_then(|p| p.get_mut(k))
            .ok_or_else(bad)?;
        *slot = Some(Keypoint {
            x,
            y,
            score: 1.0,
            visible,
        });
    }
    let mut samples = Vec::with_capacity(meta.samples.len());
    for (i, (sm, pts)) in meta.samples.into_iter().zip(points).enumerate() {
        let (h, w, image) = export::read_ppm(&dir.join(&sm.file))?;
        if (h, w) != (meta.height, meta.width) {
            return Err(Error::Format(format!(
                "{} is {h}x{w}, dataset is {}x{}",
                sm.file, meta.height, meta.width
            )));
        }
        let pts = pts
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Format(format!("sample {i} misses keypoints")))?;
        samples.push(FigureSample {
            seed: sm.seed,
            image: Tensor::new(&[3, h, w], image)?,
            keypoints: KeypointSet::new(pts),
            occlusion_boxes: sm.occlusion_boxes,
        });
    }
    Ok(Dataset {
        seed: meta.seed,
        height: meta.height,
        width: meta.width,
        occlusion_p: meta.occlusion_p,
        samples,
    })
}
