//! Backbone → flatten → encoder → head.

use serde::{Deserialize, Serialize};

use crate::encoder::{self, AttentionRecord, EncoderLayerParams, LayerMode, DEFAULT_DROPOUT};
use crate::error::{dim_err, Error, Result};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::posembed::{PeKind, PositionEmbedding};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Heatmaps are always produced at a quarter of the input resolution.
pub const HEATMAP_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// Two stride-2 3×3 convolutions, `r = 4`.
    TinyStem,
    /// Truncated ResNet-50 (stem, layer1, layer2) plus a 1×1 reduction, `r = 8`.
    ResNetS,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadUpsample {
    None,
    Bilinear,
    Deconv,
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Downsampling rate of the attention grid w.r.t. the input.
    #[serde(rename = "r")]
    pub downsample: usize,
    #[serde(rename = "N")]
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer.
    #[serde(rename = "h")]
    pub ffn_dim: usize,
    pub pe_kind: PeKind,
    pub head_upsample: HeadUpsample,
    #[serde(rename = "K")]
    pub keypoints: usize,
    pub input_h: usize,
    pub input_w: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl ModelConfig {
    /// The desk-scale model used for training experiments.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneKind::TinyStem,
            downsample: 4,
            layers: 2,
            d: 32,
            heads: 4,
            ffn_dim: 64,
            pe_kind: PeKind::Sine2D,
            head_upsample: HeadUpsample::None,
            keypoints: 4,
            input_h: 64,
            input_w: 48,
            dropout: DEFAULT_DROPOUT,
        }
    }

    /// ResNet-S, 3 layers, d = 256, 8 heads, h = 1024, deconvolution head, 17 keypoints.
    pub fn tp_r_a3() -> Self {
        Self {
            backbone: BackboneKind::ResNetS,
            downsample: 8,
            layers: 3,
            d: 256,
            heads: 8,
            ffn_dim: 1024,
            pe_kind: PeKind::Sine2D,
            head_upsample: HeadUpsample::Deconv,
            keypoints: 17,
            input_h: 256,
            input_w: 192,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let expected_r = match self.backbone {
            BackboneKind::TinyStem => 4,
            BackboneKind::ResNetS => 8,
        };
        if self.downsample != expected_r {
            return fail(format!(
                "{:?} downsamples by {expected_r}, config says r = {}",
                self.backbone, self.downsample
            ));
        }
        match (self.downsample, self.head_upsample) {
            (4, HeadUpsample::None) | (8, HeadUpsample::Bilinear | HeadUpsample::Deconv) => {}
            (r, up) => {
                return fail(format!(
                    "head upsampling {up:?} cannot bridge r = {r} to the 1/4 heatmap"
                ))
            }
        }
        if !self.input_h.is_multiple_of(self.downsample)
            || !self.input_w.is_multiple_of(self.downsample)
            || self.input_h == 0
            || self.input_w == 0
        {
            return fail(format!(
                "input {}x{} not divisible by r = {}",
                self.input_h, self.input_w, self.downsample
            ));
        }
        if self.d == 0 || !self.d.is_multiple_of(4) {
            return fail(format!("d = {} must be a positive multiple of 4", self.d));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!(
                "d = {} not divisible by heads = {}",
                self.d, self.heads
            ));
        }
        if self.layers == 0 || self.keypoints == 0 || self.ffn_dim == 0 {
            return fail("layers, keypoints and h must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Attention grid for an input of `h×w` pixels.
    pub fn grid_for(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.downsample, w / self.downsample)
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid_for(self.input_h, self.input_w)
    }

    pub fn heatmap_extent(&self) -> (usize, usize) {
        (self.input_h / HEATMAP_STRIDE, self.input_w / HEATMAP_STRIDE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    fn he<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            weight: params.add_he(
                format!("{name}.weight"),
                &[c_out, c_in, k, k],
                c_in * k * k,
                rng,
            ),
            bias: bias.then(|| params.add_filled(format!("{name}.bias"), &[c_out], 0.0)),
            stride,
            pad: k / 2,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bound.var(self.weight),
            self.bias.map(|b| bound.var(b)),
            self.stride,
            self.pad,
        )
    }
}

/// Frozen batch norm as a per-channel scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAffine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl ChannelAffine {
    fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, c: usize) -> Self {
        Self {
            scale: params.add_filled(format!("{name}.scale"), &[c], 1.0),
            shift: params.add_filled(format!("{name}.shift"), &[c], 0.0),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        tape.channel_affine(x, bound.var(self.scale), bound.var(self.shift))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: ConvParams,
    pub bn: ChannelAffine,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            conv: ConvParams::he(
                params,
                &format!("{name}.conv"),
                c_in,
                c_out,
                k,
                stride,
                false,
                rng,
            ),
            bn: ChannelAffine::new(params, &format!("{name}.bn"), c_out),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, bound, x)?;
        self.bn.forward(tape, bound, y)
    }
}

/// 1×1 → 3×3 (strided) → 1×1 expanding ×4, with a projection shortcut when
/// the shape changes.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub reduce: ConvBn,
    pub spatial: ConvBn,
    pub expand: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl Bottleneck {
    fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        planes: usize,
        stride: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let c_out = planes * 4;
        Self {
            reduce: ConvBn::new(params, &format!("{name}.reduce"), c_in, planes, 1, 1, rng),
            spatial: ConvBn::new(
                params,
                &format!("{name}.spatial"),
                planes,
                planes,
                3,
                stride,
                rng,
            ),
            expand: ConvBn::new(params, &format!("{name}.expand"), planes, c_out, 1, 1, rng),
            shortcut: (stride != 1 || c_in != c_out).then(|| {
                ConvBn::new(
                    params,
                    &format!("{name}.shortcut"),
                    c_in,
                    c_out,
                    1,
                    stride,
                    rng,
                )
            }),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        let y = self.reduce.forward(tape, bound, x)?;
        let y = tape.relu(y);
        let y = self.spatial.forward(tape, bound, y)?;
        let y = tape.relu(y);
        let y = self.expand.forward(tape, bound, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, bound, x)?,
            None => x,
        };
        let y = tape.add(y, skip)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneParams {
    TinyStem {
        conv1: ConvParams,
        conv2: ConvParams,
    },
    ResNetS {
        stem: ConvBn,
        blocks: Vec<Bottleneck>,
        reduce: ConvParams,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadUpsampler {
    None,
    Bilinear,
    Deconv { weight: ParamId, bn: ChannelAffine },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub upsample: HeadUpsampler,
    /// Position-wise linear `d → K` (a 1×1 convolution).
    pub output: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    backbone: BackboneParams,
    pe_table: Option<ParamId>,
    sine: Option<PositionEmbedding<T>>,
    layers: Vec<EncoderLayerParams>,
    head: HeadParams,
}

/// Itemized scalar counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub backbone: usize,
    pub position_embedding: usize,
    pub encoder: usize,
    pub head: usize,
    /// All stored values, fixed sine tables included.
    pub total: usize,
    pub trainable: usize,
}

/// Options of [`Model::forward_tape`].
#[derive(Debug, Default)]
pub struct ForwardOptions<'a> {
    pub dropout: Option<&'a mut SplitMix64>,
    pub capture_heads: bool,
}

#[derive(Debug)]
pub struct ForwardOutput<T> {
    /// `K×H*×W*`.
    pub heatmaps: Var,
    pub records: Vec<AttentionRecord<T>>,
    pub layer_inputs: Vec<Var>,
    pub encoder_output: Var,
    pub grid: (usize, usize),
    pub position: Option<Var>,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut params = ParamSet::new();
        let d = config.d;
        let backbone = match config.backbone {
            BackboneKind::TinyStem => BackboneParams::TinyStem {
                conv1: ConvParams::he(
                    &mut params,
                    "backbone.conv1",
                    3,
                    d / 2,
                    3,
                    2,
                    true,
                    &mut rng,
                ),
                conv2: ConvParams::he(
                    &mut params,
                    "backbone.conv2",
                    d / 2,
                    d,
                    3,
                    2,
                    true,
                    &mut rng,
                ),
            },
            BackboneKind::ResNetS => {
                let stem = ConvBn::new(&mut params, "backbone.stem", 3, 64, 7, 2, &mut rng);
                let mut blocks = Vec::new();
                let mut c_in = 64;
                for (stage, (planes, count, stride)) in
                    [(64, 3, 1), (128, 4, 2)].into_iter().enumerate()
                {
                    for b in 0..count {
                        let s = if b == 0 { stride } else { 1 };
                        let name = format!("backbone.layer{}.{b}", stage + 1);
                        blocks.push(Bottleneck::new(
                            &mut params,
                            &name,
                            c_in,
                            planes,
                            s,
                            &mut rng,
                        ));
                        c_in = planes * 4;
                    }
                }
                let reduce = ConvParams::he(
                    &mut params,
                    "backbone.reduce",
                    c_in,
                    d,
                    1,
                    1,
                    false,
                    &mut rng,
                );
                BackboneParams::ResNetS {
                    stem,
                    blocks,
                    reduce,
                }
            }
        };
        let (gh, gw) = config.grid();
        let (pe_table, sine) = match config.pe_kind {
            PeKind::Sine2D => (None, Some(PositionEmbedding::sine(gh, gw, d)?)),
            PeKind::Learnable => {
                let pe = PositionEmbedding::<T>::learnable(gh, gw, d, rng.next_u64());
                let table = pe.table().expect("learnable has a table").clone();
                (Some(params.add("pe.table", table)), None)
            }
            PeKind::None => (None, None),
        };
        let layers = (0..config.layers)
            .map(|i| {
                EncoderLayerParams::init(
                    &mut params,
                    &format!("encoder.layer{i}"),
                    d,
                    config.ffn_dim,
                    config.heads,
                    config.dropout,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let upsample = match config.head_upsample {
            HeadUpsample::None => HeadUpsampler::None,
            HeadUpsample::Bilinear => HeadUpsampler::Bilinear,
            HeadUpsample::Deconv => HeadUpsampler::Deconv {
                weight: params.add_he("head.deconv.weight", &[d, d, 4, 4], d * 16, &mut rng),
                bn: ChannelAffine::new(&mut params, "head.deconv.bn", d),
            },
        };
        let output = ConvParams::he(
            &mut params,
            "head.output",
            d,
            config.keypoints,
            1,
            1,
            true,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            backbone,
            pe_table,
            sine,
            layers,
            head: HeadParams { upsample, output },
        })
    }

    /// Same model in another precision (through the checkpoint encoding, so
    /// `f32 → f64` is exact).
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let bytes = crate::checkpoint::to_bytes(self).expect("config serializes");
        crate::checkpoint::from_bytes(&bytes).expect("own encoding decodes")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn layers(&self) -> &[EncoderLayerParams] {
        &self.layers
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    /// Position embedding on the trained grid.
    pub fn position_embedding(&self) -> PositionEmbedding<T> {
        let (gh, gw) = self.config.grid();
        match (self.config.pe_kind, self.pe_table) {
            (PeKind::Learnable, Some(id)) => PositionEmbedding::from_table(
                PeKind::Learnable,
                gh,
                gw,
                self.params.get(id).clone(),
            )
            .expect("table matches grid"),
            (PeKind::Sine2D, _) => self.sine.clone().expect("sine table built"),
            _ => PositionEmbedding::none(gh, gw),
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let mut count = ParamCount {
            backbone: 0,
            position_embedding: 0,
            encoder: 0,
            head: 0,
            total: 0,
            trainable: self.params.scalar_count(),
        };
        for (name, t) in self.params.iter() {
            let slot = match name.split('.').next() {
                Some("backbone") => &mut count.backbone,
                Some("pe") => &mut count.position_embedding,
                Some("encoder") => &mut count.encoder,
                _ => &mut count.head,
            };
            *slot += t.len();
        }
        if let Some(sine) = &self.sine {
            count.position_embedding += sine.table().map_or(0, Tensor::len);
        }
        count.total = count.backbone + count.position_embedding + count.encoder + count.head;
        count
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<(usize, usize)> {
        let (c, h, w) = image.dims3()?;
        let r = self.config.downsample;
        if c != 3 || h == 0 || w == 0 || h % r != 0 || w % r != 0 {
            return Err(dim_err(
                "model input",
                image.shape(),
                &[3, self.config.input_h, self.config.input_w],
            ));
        }
        Ok((h, w))
    }

    /// Backbone features flattened to `L×d` (row `y·W + x`).
    pub fn features(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        image: Var,
    ) -> Result<(Var, (usize, usize))> {
        let fmap = match &self.backbone {
            BackboneParams::TinyStem { conv1, conv2 } => {
                let y = conv1.forward(tape, bound, image)?;
                let y = tape.relu(y);
                let y = conv2.forward(tape, bound, y)?;
                tape.relu(y)
            }
            BackboneParams::ResNetS {
                stem,
                blocks,
                reduce,
            } => {
                let y = stem.forward(tape, bound, image)?;
                let y = tape.relu(y);
                let mut y = tape.max_pool2d(y, 3, 2, 1)?;
                for b in blocks {
                    y = b.forward(tape, bound, y)?;
                }
                reduce.forward(tape, bound, y)?
            }
        };
        let (d, gh, gw) = tape.value(fmap).dims3()?;
        let flat = tape.reshape(fmap, &[d, gh * gw])?;
        Ok((tape.transpose(flat)?, (gh, gw)))
    }

    /// Position embedding var for a `gh×gw` grid; the trainable table itself on
    /// the trained grid, a resampled constant elsewhere.
    pub fn position_var(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        grid: (usize, usize),
    ) -> Result<Option<Var>> {
        let (gh, gw) = grid;
        match self.config.pe_kind {
            PeKind::None => Ok(None),
            PeKind::Learnable if grid == self.config.grid() => {
                Ok(Some(bound.var(self.pe_table.expect("table"))))
            }
            PeKind::Learnable => {
                let pe = self.position_embedding().resample(gh, gw)?;
                Ok(Some(tape.constant(pe.table().expect("table").clone())))
            }
            PeKind::Sine2D => {
                let pe = match &self.sine {
                    Some(s) if s.grid() == grid => s.clone(),
                    _ => PositionEmbedding::sine(gh, gw, self.config.d)?,
                };
                Ok(Some(tape.constant(pe.table().expect("table").clone())))
            }
        }
    }

    /// Encoder output `L×d` → heatmaps `K×(r·gh/4)×(r·gw/4)`.
    pub fn head_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        e: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let (gh, gw) = grid;
        let d = self.config.d;
        let chw = tape.transpose(e)?;
        let mut y = tape.reshape(chw, &[d, gh, gw])?;
        let factor = self.config.downsample / HEATMAP_STRIDE;
        match &self.head.upsample {
            HeadUpsampler::None => {}
            HeadUpsampler::Bilinear => y = tape.upsample_bilinear(y, factor)?,
            HeadUpsampler::Deconv { weight, bn } => {
                y = tape.conv_transpose2d(y, bound.var(*weight), None, 2, 1)?;
                y = bn.forward(tape, bound, y)?;
                y = tape.relu(y);
            }
        }
        self.head.output.forward(tape, bound, y)
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        image: Var,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput<T>> {
        self.check_image(tape.value(image))?;
        let (tokens, grid) = self.features(tape, bound, image)?;
        let position = self.position_var(tape, bound, grid)?;
        let mode = LayerMode {
            dropout: opts.dropout,
            capture_heads: opts.capture_heads,
            ..LayerMode::default()
        };
        let enc = encoder::encoder_forward(tape, bound, &self.layers, tokens, position, mode)?;
        let heatmaps = self.head_forward(tape, bound, enc.output, grid)?;
        Ok(ForwardOutput {
            heatmaps,
            records: enc.records,
            layer_inputs: enc.layer_inputs,
            encoder_output: enc.output,
            grid,
            position,
        })
    }

    /// Inference: heatmaps `K×H_I/4×W_I/4` and, on request, one attention
    /// record per layer.
    pub fn forward(
        &self,
        image: &Tensor<T>,
        capture_attention: bool,
    ) -> Result<(Tensor<T>, Vec<AttentionRecord<T>>)> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = self.forward_tape(&mut tape, &bound, x, ForwardOptions::default())?;
        let records = if capture_attention {
            out.records
        } else {
            Vec::new()
        };
        Ok((tape.value(out.heatmaps).clone(), records))
    }
}

/// Closed-form scalar count for a configuration, summed layer by layer.
pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    Ok(Model::<f32>::build(config.clone(), 0)?.param_count())
}
