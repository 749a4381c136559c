//! Gaussian targets, heatmap loss, sub-pixel decoding and PCK.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 2.0;
/// Guards `log(0)` in the refinement step.
pub const LOG_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Pixels, input-image frame.
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn visible(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            score: 1.0,
            visible: true,
        }
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn visibility(&self) -> Vec<bool> {
        self.points.iter().map(|p| p.visible).collect()
    }

    /// Coordinates multiplied by `factor` (resolution changes).
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.points
                .iter()
                .map(|p| Keypoint {
                    x: p.x * factor,
                    y: p.y * factor,
                    ..*p
                })
                .collect(),
        )
    }
}

/// `K×H*×W*` activation grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    values: Tensor<T>,
}

impl<T: Scalar> Heatmap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let (k, h, w) = values.dims3()?;
        if k == 0 || h == 0 || w == 0 {
            return Err(dim_err("heatmap", values.shape(), &[1, 1, 1]));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// `(height, width)`.
    pub fn extent(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn channel(&self, k: usize) -> &[T] {
        let (h, w) = self.extent();
        &self.values.data()[k * h * w..(k + 1) * h * w]
    }
}

/// One Gaussian per keypoint at `(x/stride, y/stride)` cells; invisible
/// keypoints get an all-zero channel.
pub fn gaussian_target<T: Scalar>(
    kps: &KeypointSet,
    sigma: f64,
    height: usize,
    width: usize,
    stride: usize,
) -> Result<Heatmap<T>> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Config(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let s = stride as f64;
    let two_var = 2.0 * sigma * sigma;
    let mut data = vec![T::zero(); kps.len() * height * width];
    for (k, kp) in kps.points.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        let (cx, cy) = (kp.x / s, kp.y / s);
        let plane = &mut data[k * height * width..(k + 1) * height * width];
        for y in 0..height {
            let dy = y as f64 - cy;
            for x in 0..width {
                let dx = x as f64 - cx;
                plane[y * width + x] = T::cast((-(dx * dx + dy * dy) / two_var).exp());
            }
        }
    }
    Heatmap::new(Tensor::new(&[kps.len(), height, width], data)?)
}

/// Mean squared error over the cells of visible channels.
pub fn mse_loss<T: Scalar>(pred: &Heatmap<T>, target: &Heatmap<T>, visible: &[bool]) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.values.clone());
    let loss = tape.masked_mse(p, &target.values, visible)?;
    Ok(tape.value(loss).item())
}

/// Tape version of [`mse_loss`] for training.
pub fn mse_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Heatmap<T>,
    visible: &[bool],
) -> Result<Var> {
    tape.masked_mse(pred, &target.values, visible)
}

/// First maximum in row-major order; `None` when the channel holds a
/// non-finite value or nothing positive.
fn argmax<T: Scalar>(plane: &[T]) -> Option<usize> {
    let mut best = 0;
    for (i, v) in plane.iter().enumerate() {
        if !v.is_finite() {
            return None;
        }
        if *v > plane[best] {
            best = i;
        }
    }
    (plane[best] > T::zero()).then_some(best)
}

/// Log-Taylor offset at `(mx, my)`, clamped to half a cell per axis; zero at
/// borders or where the log-Hessian is not negative definite.
fn refine<T: Scalar>(plane: &[T], height: usize, width: usize, mx: usize, my: usize) -> (f64, f64) {
    if mx == 0 || my == 0 || mx + 1 >= width || my + 1 >= height {
        return (0.0, 0.0);
    }
    let l = |x: usize, y: usize| (plane[y * width + x].as_f64().max(0.0) + LOG_EPS).ln();
    let c = l(mx, my);
    let gx = 0.5 * (l(mx + 1, my) - l(mx - 1, my));
    let gy = 0.5 * (l(mx, my + 1) - l(mx, my - 1));
    let hxx = l(mx + 1, my) - 2.0 * c + l(mx - 1, my);
    let hyy = l(mx, my + 1) - 2.0 * c + l(mx, my - 1);
    let hxy =
        0.25 * (l(mx + 1, my + 1) - l(mx + 1, my - 1) - l(mx - 1, my + 1) + l(mx - 1, my - 1));
    let det = hxx * hyy - hxy * hxy;
    if !(hxx < 0.0 && det > 0.0) {
        return (0.0, 0.0);
    }
    // Newton step −H⁻¹∇
    let ox = -(hyy * gx - hxy * gy) / det;
    let oy = -(hxx * gy - hxy * gx) / det;
    if !ox.is_finite() || !oy.is_finite() {
        return (0.0, 0.0);
    }
    (ox.clamp(-0.5, 0.5), oy.clamp(-0.5, 0.5))
}

fn decode_with<T: Scalar>(hm: &Heatmap<T>, stride: usize, refined: bool) -> KeypointSet {
    let (h, w) = hm.extent();
    let s = stride as f64;
    let points = (0..hm.channels())
        .map(|k| {
            let plane = hm.channel(k);
            match argmax(plane) {
                None => Keypoint {
                    x: 0.0,
                    y: 0.0,
                    score: 0.0,
                    visible: false,
                },
                Some(m) => {
                    let (mx, my) = (m % w, m / w);
                    let (ox, oy) = if refined {
                        refine(plane, h, w, mx, my)
                    } else {
                        (0.0, 0.0)
                    };
                    Keypoint {
                        x: (mx as f64 + ox) * s,
                        y: (my as f64 + oy) * s,
                        score: plane[m].as_f64(),
                        visible: true,
                    }
                }
            }
        })
        .collect();
    KeypointSet::new(points)
}

/// Argmax plus log-Taylor sub-pixel refinement, scaled to input pixels.
pub fn decode<T: Scalar>(hm: &Heatmap<T>, stride: usize) -> KeypointSet {
    decode_with(hm, stride, true)
}

/// Integer argmax only.
pub fn decode_argmax<T: Scalar>(hm: &Heatmap<T>, stride: usize) -> KeypointSet {
    decode_with(hm, stride, false)
}

/// `(hits, counted)` over visible ground-truth keypoints.
pub fn pck_counts(pred: &KeypointSet, gt: &KeypointSet, alpha: f64, norm: f64) -> (usize, usize) {
    let thresh = alpha * norm;
    let mut hits = 0;
    let mut total = 0;
    for (p, g) in pred.points.iter().zip(&gt.points) {
        if !g.visible {
            continue;
        }
        total += 1;
        if p.visible && p.distance(g) <= thresh {
            hits += 1;
        }
    }
    (hits, total)
}

/// Fraction of visible keypoints within `alpha·norm`; 1 when none is visible.
pub fn pck(pred: &KeypointSet, gt: &KeypointSet, alpha: f64, norm: f64) -> f64 {
    let (hits, total) = pck_counts(pred, gt, alpha, norm);
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// Pooled PCK over many samples.
pub fn pck_pooled<'a>(
    pairs: impl IntoIterator<Item = (&'a KeypointSet, &'a KeypointSet)>,
    alpha: f64,
    norm: f64,
) -> f64 {
    let (mut hits, mut total) = (0, 0);
    for (p, g) in pairs {
        let (h, t) = pck_counts(p, g, alpha, norm);
        hits += h;
        total += t;
    }
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// Image diagonal, the PCK normalizer.
pub fn diagonal(height: usize, width: usize) -> f64 {
    (height as f64).hypot(width as f64)
}
