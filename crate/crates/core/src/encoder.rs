//! Post-norm Transformer encoder with attention capture.
//!
//! One layer computes
//!
//! ```text
//! Q = (X + P)·W_q + b_q      K = (X + P)·W_k + b_k      V = X·W_v + b_v
//! A_h = softmax(Q_h K_hᵀ / √(d/heads))
//! Z  = LayerNorm(concat_h(A_h V_h)·W_o + b_o + X)
//! X* = LayerNorm(W_2·ReLU(W_1 Z + b_1) + b_2 + Z)
//! ```
//!
//! where `P` is the position embedding, re-added at every layer and never to
//! the values.

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// `y = x·W + b` with `W[in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn he<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            weight: params.add_he(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng),
            bias: params.add_filled(format!("{name}.bias"), &[fan_out], 0.0),
            fan_in,
            fan_out,
        }
    }

    pub fn xavier<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            weight: params.add_xavier(
                format!("{name}.weight"),
                &[fan_in, fan_out],
                fan_in,
                fan_out,
                rng,
            ),
            bias: params.add_filled(format!("{name}.bias"), &[fan_out], 0.0),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
    ) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add_row_bias(y, bound.var(self.bias))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: params.add_filled(format!("{name}.gamma"), &[d], 1.0),
            beta: params.add_filled(format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
    ) -> Result<Var> {
        tape.layer_norm(
            x,
            bound.var(self.gamma),
            bound.var(self.beta),
            LAYER_NORM_EPS,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub d: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout_p: f64,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
}

impl EncoderLayerParams {
    /// Registers one layer's tensors: Xavier for the attention projections,
    /// He for the feed-forward layers.
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        d: usize,
        ffn_dim: usize,
        heads: usize,
        dropout_p: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d = {d} is not divisible by heads = {heads}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Config(format!(
                "dropout probability {dropout_p} outside [0, 1)"
            )));
        }
        Ok(Self {
            d,
            ffn_dim,
            heads,
            dropout_p,
            query: Linear::xavier(params, &format!("{name}.attn.q"), d, d, rng),
            key: Linear::xavier(params, &format!("{name}.attn.k"), d, d, rng),
            value: Linear::xavier(params, &format!("{name}.attn.v"), d, d, rng),
            output: Linear::xavier(params, &format!("{name}.attn.out"), d, d, rng),
            ffn_in: Linear::he(params, &format!("{name}.ffn.in"), d, ffn_dim, rng),
            ffn_out: Linear::he(params, &format!("{name}.ffn.out"), ffn_dim, d, rng),
            norm1: LayerNormParams::new(params, &format!("{name}.norm1"), d),
            norm2: LayerNormParams::new(params, &format!("{name}.norm2"), d),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Scalar count of one layer: four `d×d` projections with biases, the
    /// feed-forward pair, and two norms.
    pub fn count(d: usize, ffn_dim: usize) -> usize {
        4 * (d * d + d) + (d * ffn_dim + ffn_dim) + (ffn_dim * d + d) + 4 * d
    }
}

/// Head-averaged attention of one layer, rows are query positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub layer_index: usize,
    /// `L×L`, mean over heads.
    pub matrix: Tensor<T>,
    /// `heads×L×L`.
    pub per_head: Option<Tensor<T>>,
}

impl<T: Scalar> AttentionRecord<T> {
    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(&self, i: usize, j: usize) -> T {
        self.matrix.at(&[i, j])
    }
}

/// Switches used by training, inference and the gradient diagnostics.
#[derive(Debug, Default)]
pub struct LayerMode<'a> {
    /// Dropout stream; `None` disables dropout (inference).
    pub dropout: Option<&'a mut SplitMix64>,
    /// Treat attention scores as constants (stop-gradient on the softmax output).
    pub freeze_attention: bool,
    /// With frozen attention: force `A_h[i, j] = 0` in every head.
    pub zero_attention: Option<(usize, usize)>,
    /// Replace both LayerNorms by the identity.
    pub identity_norm: bool,
    /// Drop the feed-forward sublayer, residual included (`X* = Z`).
    pub skip_ffn: bool,
    pub capture_heads: bool,
}

impl LayerMode<'_> {
    pub fn inference() -> Self {
        Self::default()
    }

    fn reborrow(&mut self) -> LayerMode<'_> {
        LayerMode {
            dropout: self.dropout.as_deref_mut(),
            freeze_attention: self.freeze_attention,
            zero_attention: self.zero_attention,
            identity_norm: self.identity_norm,
            skip_ffn: self.skip_ffn,
            capture_heads: self.capture_heads,
        }
    }
}

fn maybe_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    rng: Option<&mut SplitMix64>,
) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => tape.dropout(x, p, rng),
        _ => Ok(x),
    }
}

/// Multi-head self-attention over `x[L×d]`; `pe` (also `L×d`) enters queries
/// and keys only.
pub fn mhsa_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    layer: &EncoderLayerParams,
    x: Var,
    pe: Option<Var>,
    mode: &LayerMode<'_>,
    layer_index: usize,
) -> Result<(Var, AttentionRecord<T>)> {
    let (l, d) = tape.value(x).dims2()?;
    if d != layer.d {
        return Err(crate::error::dim_err("mhsa input", &[l, d], &[l, layer.d]));
    }
    let qk_in = match pe {
        Some(p) => tape.add(x, p)?,
        None => x,
    };
    let q = layer.query.forward(tape, bound, qk_in)?;
    let k = layer.key.forward(tape, bound, qk_in)?;
    let v = layer.value.forward(tape, bound, x)?;
    let dh = layer.head_dim();
    let inv_scale = T::one() / T::count(dh).sqrt();
    let mut outs = Vec::with_capacity(layer.heads);
    let mut mean = vec![T::zero(); l * l];
    let mut per_head = mode
        .capture_heads
        .then(|| Vec::with_capacity(layer.heads * l * l));
    for h in 0..layer.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_scale);
        let mut attn = tape.softmax_rows(scores)?;
        if mode.freeze_attention {
            let mut frozen = tape.value(attn).clone();
            if let Some((i, j)) = mode.zero_attention {
                frozen.data_mut()[i * l + j] = T::zero();
            }
            attn = tape.constant(frozen);
        }
        let a = tape.value(attn).data();
        mean.iter_mut().zip(a).for_each(|(m, &v)| *m += v);
        if let Some(ph) = per_head.as_mut() {
            ph.extend_from_slice(a);
        }
        outs.push(tape.matmul(attn, vh)?);
    }
    let heads = T::count(layer.heads);
    mean.iter_mut().for_each(|m| *m /= heads);
    let concat = tape.concat_cols(&outs)?;
    let y = layer.output.forward(tape, bound, concat)?;
    let record = AttentionRecord {
        layer_index,
        matrix: Tensor::new(&[l, l], mean)?,
        per_head: per_head
            .map(|ph| Tensor::new(&[layer.heads, l, l], ph))
            .transpose()?,
    };
    Ok((y, record))
}

/// One post-norm encoder layer.
pub fn encoder_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    layer: &EncoderLayerParams,
    x: Var,
    pe: Option<Var>,
    mut mode: LayerMode<'_>,
    layer_index: usize,
) -> Result<(Var, AttentionRecord<T>)> {
    let (attn, record) = mhsa_forward(tape, bound, layer, x, pe, &mode, layer_index)?;
    let attn = maybe_dropout(tape, attn, layer.dropout_p, mode.dropout.as_deref_mut())?;
    let mut z = tape.add(attn, x)?;
    if !mode.identity_norm {
        z = layer.norm1.forward(tape, bound, z)?;
    }
    if mode.skip_ffn {
        return Ok((z, record));
    }
    let f = layer.ffn_in.forward(tape, bound, z)?;
    let f = tape.relu(f);
    let f = maybe_dropout(tape, f, layer.dropout_p, mode.dropout.as_deref_mut())?;
    let f = layer.ffn_out.forward(tape, bound, f)?;
    let mut out = tape.add(f, z)?;
    if !mode.identity_norm {
        out = layer.norm2.forward(tape, bound, out)?;
    }
    Ok((out, record))
}

/// Output of [`encoder_forward`].
#[derive(Debug)]
pub struct EncoderOutput<T> {
    pub output: Var,
    /// Input of each layer, `layer_inputs[0]` being the flattened features.
    pub layer_inputs: Vec<Var>,
    pub records: Vec<AttentionRecord<T>>,
}

/// Applies `layers` in order, all with the same `mode`.
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    layers: &[EncoderLayerParams],
    x: Var,
    pe: Option<Var>,
    mut mode: LayerMode<'_>,
) -> Result<EncoderOutput<T>> {
    if layers.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    let mut h = x;
    let mut layer_inputs = Vec::with_capacity(layers.len());
    let mut records = Vec::with_capacity(layers.len());
    for (idx, layer) in layers.iter().enumerate() {
        layer_inputs.push(h);
        let (out, rec) = encoder_layer_forward(tape, bound, layer, h, pe, mode.reborrow(), idx)?;
        h = out;
        records.push(rec);
    }
    Ok(EncoderOutput {
        output: h,
        layer_inputs,
        records,
    })
}
