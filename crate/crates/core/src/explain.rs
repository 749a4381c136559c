//! Attention-based explanations: dependency and affected areas read off an
//! attention matrix, and checks that the gradient of a head output w.r.t. an
//! encoder input token follows the attention score.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    encoder_layer_forward, AttentionRecord, EncoderLayerParams, LayerMode, LAYER_NORM_EPS,
};
use crate::error::{dim_err, Error, Result};
use crate::export::{fmt_real, pgm_string, PgmScale};
use crate::heatmaps::Keypoint;
use crate::model::{ForwardOptions, HeadUpsample, Model};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Attention threshold used for the dependency-area figures.
pub const DEFAULT_DELTA: f64 = 0.00075;

/// Step of the central differences in the empirical linearity check.
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaKind {
    /// Row `A[i, :]`: where query `i` looks.
    Dependency,
    /// Column `A[:, j]`: which queries look at `j`.
    Affected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaEntry {
    /// Sequence index `row·W + col`.
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Thresholded attention row (or column) of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyReport {
    pub kind: AreaKind,
    pub keypoint_index: Option<usize>,
    /// Query location `i` (dependency) or source location `j` (affected).
    pub query: usize,
    pub layer_index: usize,
    pub delta: f64,
    /// Attention grid `(H, W)`, with `L = H·W`.
    pub grid: (usize, usize),
    /// Positions scoring at least `delta`, highest score first.
    pub area: Vec<AreaEntry>,
    /// The whole row (or column), length `L`.
    pub full_row: Vec<f64>,
}

impl DependencyReport {
    pub fn with_keypoint(mut self, k: usize) -> Self {
        self.keypoint_index = Some(k);
        self
    }

    pub fn contains(&self, index: usize) -> bool {
        self.area.iter().any(|e| e.index == index)
    }
}

fn check_area_args<T: Scalar>(
    rec: &AttentionRecord<T>,
    grid: (usize, usize),
    index: usize,
    delta: f64,
) -> Result<usize> {
    let l = rec.len();
    if grid.0 * grid.1 != l {
        return Err(dim_err("attention grid", &[grid.0, grid.1], &[l]));
    }
    if delta.is_nan() || delta < 0.0 {
        return Err(Error::Usage(format!(
            "threshold must be non-negative, got {delta}"
        )));
    }
    if index >= l {
        return Err(Error::Usage(format!(
            "sequence index {index} out of range for L = {l}"
        )));
    }
    Ok(l)
}

fn build_area(
    kind: AreaKind,
    rec_layer: usize,
    grid: (usize, usize),
    query: usize,
    delta: f64,
    full_row: Vec<f64>,
) -> DependencyReport {
    let w = grid.1;
    let mut area: Vec<AreaEntry> = full_row
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= delta)
        .map(|(index, &score)| AreaEntry {
            index,
            row: index / w,
            col: index % w,
            score,
        })
        .collect();
    // Stable: equal scores keep ascending index order.
    area.sort_by(|a, b| b.score.total_cmp(&a.score));
    DependencyReport {
        kind,
        keypoint_index: None,
        query,
        layer_index: rec_layer,
        delta,
        grid,
        area,
        full_row,
    }
}

/// Positions `j` with `A[i, j] ≥ delta`.
pub fn dependency_area<T: Scalar>(
    rec: &AttentionRecord<T>,
    grid: (usize, usize),
    i: usize,
    delta: f64,
) -> Result<DependencyReport> {
    let l = check_area_args(rec, grid, i, delta)?;
    let row = (0..l).map(|j| rec.score(i, j).as_f64()).collect();
    Ok(build_area(
        AreaKind::Dependency,
        rec.layer_index,
        grid,
        i,
        delta,
        row,
    ))
}

/// Positions `i` with `A[i, j] ≥ delta`. Columns are not normalized.
pub fn affected_area<T: Scalar>(
    rec: &AttentionRecord<T>,
    grid: (usize, usize),
    j: usize,
    delta: f64,
) -> Result<DependencyReport> {
    let l = check_area_args(rec, grid, j, delta)?;
    let col = (0..l).map(|i| rec.score(i, j).as_f64()).collect();
    Ok(build_area(
        AreaKind::Affected,
        rec.layer_index,
        grid,
        j,
        delta,
        col,
    ))
}

/// Sequence index of the attention cell holding a keypoint given in input
/// pixels: heatmap cell over the head's upsample factor, rounded, clamped.
pub fn query_index(kp: &Keypoint, downsample: usize, grid: (usize, usize)) -> usize {
    let to_cell = |p: f64, n: usize| ((p / downsample as f64).round().max(0.0) as usize).min(n - 1);
    to_cell(kp.y, grid.0) * grid.1 + to_cell(kp.x, grid.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearityMode {
    /// Last layer with identity norms, no feed-forward sublayer and frozen
    /// attention: the Jacobian is exactly linear in the attention scores.
    Strict,
    /// As `Strict`, with `A[i, j]` forced to zero in every head.
    StrictMasked,
    /// The full model, differentiated numerically.
    Empirical,
}

/// Jacobian of head output `h_i` (K values) w.r.t. last-layer input token
/// `x_j` (d values), measured and predicted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub mode: LinearityMode,
    pub i: usize,
    pub j: usize,
    pub layer_index: usize,
    pub grid: (usize, usize),
    /// Head-averaged `A[i, j]` of the last layer.
    pub a_ij: f64,
    /// `K×d`.
    pub jacobian_numeric: Tensor<f64>,
    /// `K×d`: `W_f·(δ_ij·I + Σ_h A_h[i, j]·(W_v,h·W_o,h)ᵀ)`.
    pub jacobian_predicted: Tensor<f64>,
    pub max_rel_err: f64,
    /// Empirical mode: `‖∂h_i/∂x_j‖_F` for every `j`.
    pub norms: Option<Vec<f64>>,
    /// Empirical mode: `A[i, :]`.
    pub attention_row: Option<Vec<f64>>,
    /// Empirical mode: Pearson correlation of `norms` with `attention_row`
    /// over `j ≠ i` (the residual path makes `j = i` an outlier).
    pub correlation: Option<f64>,
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Plain copies of one layer's weights and the head's position-wise linear.
struct Weights {
    d: usize,
    heads: usize,
    ffn: usize,
    keypoints: usize,
    wq: Vec<f64>,
    bq: Vec<f64>,
    wk: Vec<f64>,
    bk: Vec<f64>,
    wv: Vec<f64>,
    bv: Vec<f64>,
    wo: Vec<f64>,
    bo: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    g1: Vec<f64>,
    be1: Vec<f64>,
    g2: Vec<f64>,
    be2: Vec<f64>,
    /// `K×d`.
    wf: Vec<f64>,
    bf: Vec<f64>,
}

impl Weights {
    fn new(model: &Model<f64>, layer: &EncoderLayerParams) -> Self {
        let p = model.params();
        let get = |id| p.get(id).data().to_vec();
        let out = &model.head().output;
        Self {
            d: layer.d,
            heads: layer.heads,
            ffn: layer.ffn_dim,
            keypoints: model.config().keypoints,
            wq: get(layer.query.weight),
            bq: get(layer.query.bias),
            wk: get(layer.key.weight),
            bk: get(layer.key.bias),
            wv: get(layer.value.weight),
            bv: get(layer.value.bias),
            wo: get(layer.output.weight),
            bo: get(layer.output.bias),
            w1: get(layer.ffn_in.weight),
            b1: get(layer.ffn_in.bias),
            w2: get(layer.ffn_out.weight),
            b2: get(layer.ffn_out.bias),
            g1: get(layer.norm1.gamma),
            be1: get(layer.norm1.beta),
            g2: get(layer.norm2.gamma),
            be2: get(layer.norm2.beta),
            wf: get(out.weight),
            bf: out
                .bias
                .map_or_else(|| vec![0.0; model.config().keypoints], get),
        }
    }

    /// `W_f·(δ_ij·I + Σ_h a_h·(W_v,h·W_o,h)ᵀ)` for per-head scores `a`.
    fn closed_form(&self, a: &[f64], diagonal: bool) -> Vec<f64> {
        let (d, dh, kk) = (self.d, self.d / self.heads, self.keypoints);
        // m[c·d + e] = ∂z_c / ∂x_e
        let mut m = vec![0.0; d * d];
        for (h, &ah) in a.iter().enumerate() {
            for e in 0..d {
                for t in h * dh..(h + 1) * dh {
                    let s = ah * self.wv[e * d + t];
                    for c in 0..d {
                        m[c * d + e] += s * self.wo[t * d + c];
                    }
                }
            }
        }
        if diagonal {
            for c in 0..d {
                m[c * d + c] += 1.0;
            }
        }
        let mut j = vec![0.0; kk * d];
        for k in 0..kk {
            for c in 0..d {
                let w = self.wf[k * d + c];
                for e in 0..d {
                    j[k * d + e] += w * m[c * d + e];
                }
            }
        }
        j
    }
}

/// `x·W + b` for one row, `W` stored `in×out`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    let n = b.len();
    for (e, &xe) in x.iter().enumerate() {
        for (yc, &wc) in y.iter_mut().zip(&w[e * n..(e + 1) * n]) {
            *yc += xe * wc;
        }
    }
    y
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, g), b)| (v - mean) * inv * g + b)
        .collect()
}

/// Row-`i` path of the last layer plus the head, evaluated without the tape.
struct RowPath<'a> {
    w: &'a Weights,
    x: &'a [f64],
    pe: Option<&'a [f64]>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl<'a> RowPath<'a> {
    fn new(w: &'a Weights, x: &'a [f64], pe: Option<&'a [f64]>) -> Self {
        let d = w.d;
        let l = x.len() / d;
        let mut keys = Vec::with_capacity(l * d);
        let mut values = Vec::with_capacity(l * d);
        for t in 0..l {
            keys.extend(affine(&Self::qk_input(x, pe, t, d), &w.wk, &w.bk));
            values.extend(affine(&x[t * d..(t + 1) * d], &w.wv, &w.bv));
        }
        Self {
            w,
            x,
            pe,
            keys,
            values,
        }
    }

    fn qk_input(x: &[f64], pe: Option<&[f64]>, t: usize, d: usize) -> Vec<f64> {
        let row = &x[t * d..(t + 1) * d];
        match pe {
            Some(p) => row
                .iter()
                .zip(&p[t * d..(t + 1) * d])
                .map(|(a, b)| a + b)
                .collect(),
            None => row.to_vec(),
        }
    }

    /// `h_i` with token `j` replaced by `xj`.
    fn eval(&self, i: usize, j: usize, xj: &[f64]) -> Vec<f64> {
        let w = self.w;
        let (d, dh) = (w.d, w.d / w.heads);
        let l = self.x.len() / d;
        let token = |t: usize| -> Vec<f64> {
            if t == j {
                xj.to_vec()
            } else {
                self.x[t * d..(t + 1) * d].to_vec()
            }
        };
        let qk_j = match self.pe {
            Some(p) => xj
                .iter()
                .zip(&p[j * d..(j + 1) * d])
                .map(|(a, b)| a + b)
                .collect(),
            None => xj.to_vec(),
        };
        let kj = affine(&qk_j, &w.wk, &w.bk);
        let vj = affine(xj, &w.wv, &w.bv);
        let xi = token(i);
        let qi = if i == j {
            affine(&qk_j, &w.wq, &w.bq)
        } else {
            affine(&Self::qk_input(self.x, self.pe, i, d), &w.wq, &w.bq)
        };
        let key = |t: usize| {
            if t == j {
                &kj[..]
            } else {
                &self.keys[t * d..(t + 1) * d]
            }
        };
        let value = |t: usize| {
            if t == j {
                &vj[..]
            } else {
                &self.values[t * d..(t + 1) * d]
            }
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = vec![0.0; d];
        let mut scores = vec![0.0; l];
        for h in 0..w.heads {
            let cols = h * dh..(h + 1) * dh;
            for (t, s) in scores.iter_mut().enumerate() {
                let k = &key(t)[cols.clone()];
                *s = qi[cols.clone()]
                    .iter()
                    .zip(k)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale;
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for (t, s) in scores.iter().enumerate() {
                let a = s / total;
                for (o, v) in concat[cols.clone()].iter_mut().zip(&value(t)[cols.clone()]) {
                    *o += a * v;
                }
            }
        }
        let y = affine(&concat, &w.wo, &w.bo);
        let z: Vec<f64> = y.iter().zip(&xi).map(|(a, b)| a + b).collect();
        let z = layer_norm(&z, &w.g1, &w.be1);
        let mut f = affine(&z, &w.w1, &w.b1);
        f.iter_mut().for_each(|v| *v = v.max(0.0));
        debug_assert_eq!(f.len(), w.ffn);
        let f = affine(&f, &w.w2, &w.b2);
        let out: Vec<f64> = f.iter().zip(&z).map(|(a, b)| a + b).collect();
        let out = layer_norm(&out, &w.g2, &w.be2);
        (0..w.keypoints)
            .map(|k| {
                w.bf[k]
                    + w.wf[k * d..(k + 1) * d]
                        .iter()
                        .zip(&out)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Central-difference `K×d` Jacobian of `h_i` w.r.t. `x_j`.
    fn jacobian(&self, i: usize, j: usize) -> Vec<f64> {
        let (d, kk) = (self.w.d, self.w.keypoints);
        let base = &self.x[j * d..(j + 1) * d];
        let mut jac = vec![0.0; kk * d];
        let mut xj = base.to_vec();
        for e in 0..d {
            xj[e] = base[e] + FD_STEP;
            let up = self.eval(i, j, &xj);
            xj[e] = base[e] - FD_STEP;
            let down = self.eval(i, j, &xj);
            xj[e] = base[e];
            for k in 0..kk {
                jac[k * d + e] = (up[k] - down[k]) / (2.0 * FD_STEP);
            }
        }
        jac
    }
}

fn max_rel_err(numeric: &[f64], predicted: &[f64]) -> f64 {
    let diff = numeric
        .iter()
        .zip(predicted)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = predicted.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Last-layer input, position embedding and per-head last-layer attention
/// of an inference pass.
struct LastLayerState {
    x: Tensor<f64>,
    pe: Option<Tensor<f64>>,
    grid: (usize, usize),
    per_head: Tensor<f64>,
    mean: Tensor<f64>,
    heatmaps: Tensor<f64>,
}

fn last_layer_state(model: &Model<f64>, image: &Tensor<f64>) -> Result<LastLayerState> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let opts = ForwardOptions {
        dropout: None,
        capture_heads: true,
    };
    let out = model.forward_tape(&mut tape, &bound, x, opts)?;
    let last = out.records.last().expect("at least one layer");
    Ok(LastLayerState {
        x: tape
            .value(*out.layer_inputs.last().expect("at least one layer"))
            .clone(),
        pe: out.position.map(|p| tape.value(p).clone()),
        grid: out.grid,
        per_head: last.per_head.clone().expect("heads captured"),
        mean: last.matrix.clone(),
        heatmaps: tape.value(out.heatmaps).clone(),
    })
}

fn head_scores(per_head: &Tensor<f64>, i: usize, j: usize) -> Vec<f64> {
    let (heads, l, _) = per_head.dims3().expect("heads×L×L");
    (0..heads)
        .map(|h| per_head.data()[(h * l + i) * l + j])
        .collect()
}

/// Compares the Jacobian `∂h_i/∂x_j` of the head output at position `i` w.r.t.
/// last-layer input token `j` against its closed form (strict modes), or
/// relates its norm to the attention row (empirical mode). Requires a
/// position-wise head (`head_upsample = none`), so that heatmap cell `i` is
/// encoder position `i`. Runs in double precision whatever `T` is.
pub fn grad_linearity_check<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    i: usize,
    j: usize,
    mode: LinearityMode,
) -> Result<LinearityReport> {
    if model.config().head_upsample != HeadUpsample::None {
        return Err(Error::Usage(
            "gradient-linearity checks need a position-wise head (head_upsample = none)".into(),
        ));
    }
    let model = model.cast::<f64>();
    let state = last_layer_state(&model, &image.cast())?;
    let (l, d) = state.x.dims2()?;
    if i >= l || j >= l {
        return Err(Error::Usage(format!(
            "indices ({i}, {j}) out of range for L = {l}"
        )));
    }
    let layer_index = model.layers().len() - 1;
    let layer = &model.layers()[layer_index];
    let weights = Weights::new(&model, layer);
    let kk = weights.keypoints;
    match mode {
        LinearityMode::Strict | LinearityMode::StrictMasked => {
            let masked = mode == LinearityMode::StrictMasked;
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, false);
            let xv = tape.param(state.x.clone());
            let pe = state.pe.clone().map(|p| tape.constant(p));
            let lm = LayerMode {
                freeze_attention: true,
                zero_attention: masked.then_some((i, j)),
                identity_norm: true,
                skip_ffn: true,
                capture_heads: true,
                dropout: None,
            };
            let (z, rec) =
                encoder_layer_forward(&mut tape, &bound, layer, xv, pe, lm, layer_index)?;
            let hm = model.head_forward(&mut tape, &bound, z, state.grid)?;
            let mut numeric = vec![0.0; kk * d];
            for k in 0..kk {
                let o = tape.pick(hm, k * l + i)?;
                tape.backward(o)?;
                let g = tape.grad(xv).expect("input requires grad");
                numeric[k * d..(k + 1) * d].copy_from_slice(&g[j * d..(j + 1) * d]);
            }
            let per_head = rec.per_head.expect("heads captured");
            let scores = head_scores(&per_head, i, j);
            let predicted = weights.closed_form(&scores, i == j);
            Ok(LinearityReport {
                mode,
                i,
                j,
                layer_index,
                grid: state.grid,
                a_ij: rec.matrix.at(&[i, j]),
                max_rel_err: max_rel_err(&numeric, &predicted),
                jacobian_numeric: Tensor::new(&[kk, d], numeric)?,
                jacobian_predicted: Tensor::new(&[kk, d], predicted)?,
                norms: None,
                attention_row: None,
                correlation: None,
            })
        }
        LinearityMode::Empirical => {
            let path = RowPath::new(
                &weights,
                state.x.data(),
                state.pe.as_ref().map(|p| p.data()),
            );
            let mut norms = Vec::with_capacity(l);
            let mut numeric = Vec::new();
            for t in 0..l {
                let jac = path.jacobian(i, t);
                norms.push(jac.iter().map(|v| v * v).sum::<f64>().sqrt());
                if t == j {
                    numeric = jac;
                }
            }
            let row: Vec<f64> = state.mean.row(i).to_vec();
            let (n_off, r_off): (Vec<f64>, Vec<f64>) = (0..l)
                .filter(|&t| t != i)
                .map(|t| (norms[t], row[t]))
                .unzip();
            let correlation = if l > 1 { pearson(&n_off, &r_off) } else { 0.0 };
            let predicted = weights.closed_form(&head_scores(&state.per_head, i, j), i == j);
            Ok(LinearityReport {
                mode,
                i,
                j,
                layer_index,
                grid: state.grid,
                a_ij: row[j],
                max_rel_err: max_rel_err(&numeric, &predicted),
                jacobian_numeric: Tensor::new(&[kk, d], numeric)?,
                jacobian_predicted: Tensor::new(&[kk, d], predicted)?,
                norms: Some(norms),
                attention_row: Some(row),
                correlation: Some(correlation),
            })
        }
    }
}

/// Head output at cell `i` recomputed by the tape-free row path used in the
/// empirical check, next to the model's own heatmap values there.
pub fn row_path_agreement<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    i: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let model = model.cast::<f64>();
    let state = last_layer_state(&model, &image.cast())?;
    let (l, d) = state.x.dims2()?;
    if i >= l {
        return Err(Error::Usage(format!("index {i} out of range for L = {l}")));
    }
    let layer = model.layers().last().expect("at least one layer");
    let weights = Weights::new(&model, layer);
    let path = RowPath::new(
        &weights,
        state.x.data(),
        state.pe.as_ref().map(|p| p.data()),
    );
    let own = path.eval(i, i, &state.x.data()[i * d..(i + 1) * d]);
    let expected = (0..weights.keypoints)
        .map(|k| state.heatmaps.data()[k * l + i])
        .collect();
    Ok((own, expected))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Pgm,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "pgm" => Ok(Self::Pgm),
            "json" => Ok(Self::Json),
            other => Err(Error::Usage(format!(
                "unknown export format '{other}' (csv|pgm|json)"
            ))),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Pgm => "pgm",
            Self::Json => "json",
        })
    }
}

/// Reports that [`export_report`] can write.
pub trait Report: Serialize {
    fn to_csv(&self) -> String;
    /// Grayscale picture over the attention grid, if the report has one.
    fn to_pgm(&self) -> Option<String>;
}

impl Report for DependencyReport {
    /// `index,row,col,score`, one line per area entry.
    fn to_csv(&self) -> String {
        let mut out = String::from("index,row,col,score\n");
        for e in &self.area {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.index,
                e.row,
                e.col,
                fmt_real(e.score)
            ));
        }
        out
    }

    /// The full row on the `H×W` grid, scaled by its maximum.
    fn to_pgm(&self) -> Option<String> {
        Some(pgm_string(
            &self.full_row,
            self.grid.0,
            self.grid.1,
            PgmScale::GlobalMax,
        ))
    }
}

impl Report for LinearityReport {
    /// `k,channel,numeric,predicted` over the `K×d` Jacobian.
    fn to_csv(&self) -> String {
        let (kk, d) = self.jacobian_numeric.dims2().expect("K×d");
        let mut out = String::from("k,channel,numeric,predicted\n");
        for k in 0..kk {
            for c in 0..d {
                out.push_str(&format!(
                    "{k},{c},{},{}\n",
                    fmt_real(self.jacobian_numeric.at(&[k, c])),
                    fmt_real(self.jacobian_predicted.at(&[k, c]))
                ));
            }
        }
        out
    }

    /// Empirical mode: the Jacobian norms on the `H×W` grid.
    fn to_pgm(&self) -> Option<String> {
        self.norms
            .as_ref()
            .map(|n| pgm_string(n, self.grid.0, self.grid.1, PgmScale::GlobalMax))
    }
}

pub fn export_report<R: Report>(report: &R, path: &Path, format: ExportFormat) -> Result<()> {
    let text = match format {
        ExportFormat::Csv => report.to_csv(),
        ExportFormat::Pgm => report
            .to_pgm()
            .ok_or_else(|| Error::Usage("this report has no grid picture".into()))?,
        ExportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
    };
    fs::write(path, text)?;
    Ok(())
}

/// Reads back the area entries of a dependency-report CSV.
pub fn parse_area_csv(text: &str) -> Result<Vec<AreaEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some("index,row,col,score") {
        return Err(Error::Format(
            "area CSV header must be index,row,col,score".into(),
        ));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad area CSV line '{line}'"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(AreaEntry {
                index: f[0].parse().map_err(|_| bad())?,
                row: f[1].parse().map_err(|_| bad())?,
                col: f[2].parse().map_err(|_| bad())?,
                score: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneKind, ModelConfig};

    fn record(rows: &[&[f64]]) -> AttentionRecord<f64> {
        AttentionRecord {
            layer_index: 0,
            matrix: Tensor::from_rows(rows).unwrap(),
            per_head: None,
        }
    }

    #[test]
    fn area_thresholds_and_sorts() {
        let rec = record(&[
            &[0.1, 0.6, 0.3, 0.0],
            &[0.25, 0.25, 0.25, 0.25],
            &[0.0; 4],
            &[1.0, 0.0, 0.0, 0.0],
        ]);
        let r = dependency_area(&rec, (2, 2), 0, 0.2).unwrap();
        let idx: Vec<usize> = r.area.iter().map(|e| e.index).collect();
        assert_eq!(idx, vec![1, 2]);
        assert_eq!((r.area[1].row, r.area[1].col), (1, 0));
        assert_eq!(dependency_area(&rec, (2, 2), 1, 0.0).unwrap().area.len(), 4);
        assert!(dependency_area(&rec, (2, 2), 0, 0.61)
            .unwrap()
            .area
            .is_empty());
        assert!(matches!(
            dependency_area(&rec, (2, 2), 0, -0.1),
            Err(Error::Usage(_))
        ));
        assert!(dependency_area(&rec, (2, 2), 4, 0.1).is_err());
        assert!(dependency_area(&rec, (3, 2), 0, 0.1).is_err());
        let c = affected_area(&rec, (2, 2), 0, 0.2).unwrap();
        let idx: Vec<usize> = c.area.iter().map(|e| e.index).collect();
        assert_eq!(idx, vec![3, 1]);
        assert_eq!(c.full_row, vec![0.1, 0.25, 0.0, 1.0]);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let rec = record(&[&[0.1 + 1e-17, 1.0 / 3.0], &[0.5, 0.5]]);
        let r = dependency_area(&rec, (1, 2), 0, 0.0).unwrap();
        assert_eq!(parse_area_csv(&r.to_csv()).unwrap(), r.area);
        assert!(parse_area_csv("a,b\n").is_err());
    }

    #[test]
    fn query_index_maps_pixels_to_cells() {
        let kp = Keypoint::visible(13.0, 30.0);
        assert_eq!(query_index(&kp, 4, (16, 12)), 8 * 12 + 3);
        assert_eq!(query_index(&kp, 8, (8, 6)), 4 * 6 + 2);
        assert_eq!(
            query_index(&Keypoint::visible(500.0, -3.0), 4, (16, 12)),
            11
        );
    }

    #[test]
    fn pearson_basics() {
        // deviations (-1, 0, 1) and (-13, -1, 14)/6: r = 4.5 / sqrt(2 · 61/6)
        let expected = 4.5 / (2.0f64 * 61.0 / 6.0).sqrt();
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]) - expected).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn strict_check_needs_positionwise_head() {
        let mut c = ModelConfig::toy();
        c.backbone = BackboneKind::ResNetS;
        c.downsample = 8;
        c.head_upsample = HeadUpsample::Bilinear;
        let model = Model::<f64>::build(c, 1).unwrap();
        let img = Tensor::zeros(&[3, 64, 48]);
        assert!(matches!(
            grad_linearity_check(&model, &img, 0, 1, LinearityMode::Strict),
            Err(Error::Usage(_))
        ));
    }
}
