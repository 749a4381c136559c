//! Position embeddings: fixed 2D sine, learnable table, or none.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the learnable table at initialization.
pub const LEARNABLE_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeKind {
    Sine2D,
    Learnable,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbedding<T> {
    kind: PeKind,
    /// `L×d`, absent for [`PeKind::None`].
    table: Option<Tensor<T>>,
    height: usize,
    width: usize,
}

impl<T: Scalar> PositionEmbedding<T> {
    pub fn none(height: usize, width: usize) -> Self {
        Self {
            kind: PeKind::None,
            table: None,
            height,
            width,
        }
    }

    /// Fixed 2D sine table on an `height×width` grid with `d` channels.
    ///
    /// Channels `[0, d/2)` encode the row index `p_y`, channels `[d/2, d)` the
    /// column index `p_x`. Within a block, pair `(2i, 2i+1)` holds
    /// `sin/cos(2π·p / (extent · 10000^(2i/(d/2))))` for `i < d/4`. Rows of the
    /// table follow the row-major flatten `j = p_y·width + p_x`.
    pub fn sine(height: usize, width: usize, d: usize) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "sine position embedding needs d divisible by 4, got {d}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Config(
                "position grid extents must be positive".into(),
            ));
        }
        let half = d / 2;
        let mut data = vec![T::zero(); height * width * d];
        for py in 0..height {
            for px in 0..width {
                let row = &mut data[(py * width + px) * d..(py * width + px + 1) * d];
                for i in 0..d / 4 {
                    let freq = 10000f64.powf((2 * i) as f64 / half as f64);
                    let ay = 2.0 * PI * py as f64 / (height as f64 * freq);
                    let ax = 2.0 * PI * px as f64 / (width as f64 * freq);
                    row[2 * i] = T::cast(ay.sin());
                    row[2 * i + 1] = T::cast(ay.cos());
                    row[half + 2 * i] = T::cast(ax.sin());
                    row[half + 2 * i + 1] = T::cast(ax.cos());
                }
            }
        }
        Ok(Self {
            kind: PeKind::Sine2D,
            table: Some(Tensor::new(&[height * width, d], data)?),
            height,
            width,
        })
    }

    /// Trainable table drawn from `N(0, 0.02²)`.
    pub fn learnable(height: usize, width: usize, d: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let table = Tensor::from_fn(&[height * width, d], |_| {
            T::cast(rng.normal(0.0, LEARNABLE_INIT_STD))
        });
        Self::from_table(PeKind::Learnable, height, width, table).expect("consistent extents")
    }

    pub fn from_table(kind: PeKind, height: usize, width: usize, table: Tensor<T>) -> Result<Self> {
        let (l, _) = table.dims2()?;
        if l != height * width || kind == PeKind::None {
            return Err(Error::Config(format!(
                "table with {l} rows does not match a {height}x{width} {kind:?} grid"
            )));
        }
        Ok(Self {
            kind,
            table: Some(table),
            height,
            width,
        })
    }

    pub fn kind(&self) -> PeKind {
        self.kind
    }

    pub fn table(&self) -> Option<&Tensor<T>> {
        self.table.as_ref()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pairwise cosine similarity of table rows, `L×L`.
    pub fn cosine_similarity(&self) -> Result<Tensor<T>> {
        let table = self
            .table
            .as_ref()
            .ok_or_else(|| Error::Usage("no position embedding table to compare".into()))?;
        let (l, d) = table.dims2()?;
        let norms: Vec<T> = (0..l)
            .map(|i| table.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut out = vec![T::zero(); l * l];
        for i in 0..l {
            out[i * l + i] = if norms[i] > T::zero() {
                T::one()
            } else {
                T::zero()
            };
            for j in i + 1..l {
                let denom = norms[i] * norms[j];
                let s = if denom > T::zero() {
                    let dot: T = (0..d).map(|c| table.row(i)[c] * table.row(j)[c]).sum();
                    dot / denom
                } else {
                    T::zero()
                };
                out[i * l + j] = s;
                out[j * l + i] = s;
            }
        }
        Tensor::new(&[l, l], out)
    }

    /// Adapts the embedding to a `height×width` grid: sine tables are rebuilt,
    /// learnable tables are bilinearly resampled as a `d×H×W` image.
    pub fn resample(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(
                "position grid extents must be positive".into(),
            ));
        }
        match (self.kind, &self.table) {
            (PeKind::None, _) | (_, None) => Ok(Self::none(height, width)),
            (PeKind::Sine2D, Some(t)) => Self::sine(height, width, t.shape()[1]),
            (PeKind::Learnable, Some(t)) => {
                let (l, d) = t.dims2()?;
                let chw = t.transpose()?;
                let resized =
                    kernels::bilinear_resize(chw.data(), d, self.height, self.width, height, width);
                debug_assert_eq!(l, self.height * self.width);
                let table = Tensor::new(&[d, height * width], resized)?.transpose()?;
                Self::from_table(PeKind::Learnable, height, width, table)
            }
        }
    }
}

/// Mean similarity of 4-neighbours on the grid and of pairs at least half the
/// grid diagonal apart, from an `L×L` similarity matrix.
pub fn neighbour_contrast<T: Scalar>(
    similarity: &Tensor<T>,
    height: usize,
    width: usize,
) -> Result<(f64, f64)> {
    let l = height * width;
    if similarity.shape() != [l, l] {
        return Err(dim_err("similarity matrix", similarity.shape(), &[l, l]));
    }
    let far = 0.5 * ((height * height + width * width) as f64).sqrt();
    let (mut near_sum, mut near_n, mut far_sum, mut far_n) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..l {
        let (ay, ax) = ((a / width) as f64, (a % width) as f64);
        for b in a + 1..l {
            let (by, bx) = ((b / width) as f64, (b % width) as f64);
            let dist = (ay - by).hypot(ax - bx);
            let s = similarity.data()[a * l + b].as_f64();
            if dist == 1.0 {
                near_sum += s;
                near_n += 1;
            } else if dist >= far {
                far_sum += s;
                far_n += 1;
            }
        }
    }
    if near_n == 0 || far_n == 0 {
        return Err(Error::Usage(format!(
            "a {height}x{width} grid has no neighbour or no distant pairs"
        )));
    }
    Ok((near_sum / near_n as f64, far_sum / far_n as f64))
}
