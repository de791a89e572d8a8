//! Sensor-independent band-fusion encoder.
//!
//! Pipeline per tile: per-band descriptors feed an expand MLP
//! (descriptor -> 3/4*d_token -> d_token), a stack of post-norm transformer
//! encoder layers fuses the band tokens, a contract MLP
//! (d_token -> d_token/2 -> d_token/4 -> C) produces one feature vector per
//! band, and an output block turns reflectance plus features into C fixed
//! feature maps. Band count varies per sample; batches are padded with
//! constant -0.5 bands, and the padding level picks how aggressively those
//! are neutralized:
//!
//! * level 1 averages feature maps over all band slots (padding included),
//! * level 2 divides by the number of real bands only,
//! * level 3 additionally masks padding tokens out of attention, making the
//!   output of real bands bit-exact regardless of padding.

use crate::descriptor::{build_descriptor_batch, BandSpec, EncodingVariant, StatsVariant};
use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

/// Fill value for padding band planes. The output block shifts bands by
/// +0.5 before weighting, so planes held at -0.5 contribute exactly zero.
pub const BAND_PAD: f64 = -0.5;

/// How padding bands are neutralized. Integer levels 1..3 in CLI and docs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingLevel {
    /// Average feature maps over every band slot, padding included.
    MeanAll,
    /// Divide the feature-map sum by the number of real bands only.
    MeanReal,
    /// MeanReal plus an attention mask that excludes padding tokens.
    MeanRealMasked,
}

impl PaddingLevel {
    pub fn from_int(v: u8) -> Result<Self> {
        match v {
            1 => Ok(PaddingLevel::MeanAll),
            2 => Ok(PaddingLevel::MeanReal),
            3 => Ok(PaddingLevel::MeanRealMasked),
            other => Err(Error::invalid("PaddingLevel", format!("level {other} not in 1..=3"))),
        }
    }

    pub fn as_int(self) -> u8 {
        match self {
            PaddingLevel::MeanAll => 1,
            PaddingLevel::MeanReal => 2,
            PaddingLevel::MeanRealMasked => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputBlock {
    /// (reflectance + 0.5) * feature, averaged over bands. Padding bands
    /// cancel to exact zero by construction.
    BandMultiplication,
    /// Learnable sinusoidal pixel map, averaged over real bands. Kept for
    /// benchmarking; roughly 3.5x slower at equal output width.
    BandEmbedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Total width of the wavelength encoding block (split across min/max).
    pub d_enc: usize,
    pub d_token: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub c_out: usize,
    pub padding_level: PaddingLevel,
    pub output_block: OutputBlock,
    pub encoding: EncodingVariant,
    pub stats: StatsVariant,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_enc: 32,
            d_token: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            c_out: 4,
            padding_level: PaddingLevel::MeanRealMasked,
            output_block: OutputBlock::BandMultiplication,
            encoding: EncodingVariant::FastSensei,
            stats: StatsVariant::FourSummary,
        }
    }
}

impl EncoderConfig {
    /// 32 output feature maps instead of 4; slower output block and a wider
    /// downstream segnet input.
    pub fn out32() -> Self {
        EncoderConfig { c_out: 32, ..Default::default() }
    }

    /// Body scaled back to the pre-reduction size: 64-dim wavelength
    /// encoding and doubled token/FFN widths. Output stays at 4 maps.
    pub fn original_size() -> Self {
        EncoderConfig { d_enc: 64, d_token: 128, d_ffn: 512, ..Default::default() }
    }

    pub fn band_embedding() -> Self {
        EncoderConfig { output_block: OutputBlock::BandEmbedding, ..Default::default() }
    }

    pub fn v2_encoding() -> Self {
        EncoderConfig { encoding: EncodingVariant::SenseiV2, ..Default::default() }
    }

    /// Minimal config for gradient checks and fast tests: 12-dim
    /// descriptors, 8-dim tokens, one layer, two heads, ~1k parameters.
    pub fn tiny() -> Self {
        EncoderConfig {
            d_enc: 8,
            d_token: 8,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 32,
            c_out: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_enc < 4 || self.d_enc % 4 != 0 {
            return Err(Error::invalid(
                "EncoderConfig",
                format!("d_enc {} must be a positive multiple of 4", self.d_enc),
            ));
        }
        if self.d_token < 4 || self.d_token % 4 != 0 {
            return Err(Error::invalid(
                "EncoderConfig",
                format!("d_token {} must be a positive multiple of 4", self.d_token),
            ));
        }
        if self.n_heads == 0 || self.d_token % self.n_heads != 0 {
            return Err(Error::invalid(
                "EncoderConfig",
                format!("d_token {} not divisible by {} heads", self.d_token, self.n_heads),
            ));
        }
        if self.n_layers == 0 {
            return Err(Error::invalid("EncoderConfig", "need at least one fusion layer"));
        }
        if self.d_ffn == 0 {
            return Err(Error::invalid("EncoderConfig", "d_ffn must be positive"));
        }
        if self.c_out == 0 {
            return Err(Error::invalid("EncoderConfig", "c_out must be >= 1"));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.d_enc + self.stats.len()
    }

    pub fn expand_hidden(&self) -> usize {
        self.d_token * 3 / 4
    }

    pub fn contract_dims(&self) -> [usize; 3] {
        [self.d_token / 2, self.d_token / 4, self.c_out]
    }
}

#[derive(Clone, Debug)]
pub struct Linear<S> {
    /// [in, out]
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct AttnLayerParams<S> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ln1: LayerNormParams<S>,
    pub ffn1: Linear<S>,
    pub ffn2: Linear<S>,
    pub ln2: LayerNormParams<S>,
}

#[derive(Clone, Debug)]
pub struct EmbedParams<S> {
    pub alpha: Tensor<S>,
    pub beta: Tensor<S>,
    pub gamma: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct EncoderParams<S> {
    pub expand: Vec<Linear<S>>,
    pub layers: Vec<AttnLayerParams<S>>,
    pub contract: Vec<Linear<S>>,
    /// Present only for the BandEmbedding output block.
    pub embed: Option<EmbedParams<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.numel());
        n
    }

    /// Visits every parameter tensor in a fixed order. The optimizer and the
    /// checkpoint format both rely on this order staying stable.
    pub fn visit(&self, f: &mut impl FnMut(&Tensor<S>)) {
        for l in &self.expand {
            f(&l.w);
            f(&l.b);
        }
        for layer in &self.layers {
            for l in [&layer.wq, &layer.wk, &layer.wv, &layer.wo] {
                f(&l.w);
                f(&l.b);
            }
            f(&layer.ln1.gamma);
            f(&layer.ln1.beta);
            f(&layer.ffn1.w);
            f(&layer.ffn1.b);
            f(&layer.ffn2.w);
            f(&layer.ffn2.b);
            f(&layer.ln2.gamma);
            f(&layer.ln2.beta);
        }
        for l in &self.contract {
            f(&l.w);
            f(&l.b);
        }
        if let Some(e) = &self.embed {
            f(&e.alpha);
            f(&e.beta);
            f(&e.gamma);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor<S>)) {
        for l in &mut self.expand {
            f(&mut l.w);
            f(&mut l.b);
        }
        for layer in &mut self.layers {
            for l in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo] {
                f(&mut l.w);
                f(&mut l.b);
            }
            f(&mut layer.ln1.gamma);
            f(&mut layer.ln1.beta);
            f(&mut layer.ffn1.w);
            f(&mut layer.ffn1.b);
            f(&mut layer.ffn2.w);
            f(&mut layer.ffn2.b);
            f(&mut layer.ln2.gamma);
            f(&mut layer.ln2.beta);
        }
        for l in &mut self.contract {
            f(&mut l.w);
            f(&mut l.b);
        }
        if let Some(e) = &mut self.embed {
            f(&mut e.alpha);
            f(&mut e.beta);
            f(&mut e.gamma);
        }
    }

    pub fn cast<T: Scalar>(&self) -> EncoderParams<T> {
        let lin = |l: &Linear<S>| Linear { w: l.w.cast(), b: l.b.cast() };
        EncoderParams {
            expand: self.expand.iter().map(lin).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| AttnLayerParams {
                    wq: lin(&l.wq),
                    wk: lin(&l.wk),
                    wv: lin(&l.wv),
                    wo: lin(&l.wo),
                    ln1: LayerNormParams { gamma: l.ln1.gamma.cast(), beta: l.ln1.beta.cast() },
                    ffn1: lin(&l.ffn1),
                    ffn2: lin(&l.ffn2),
                    ln2: LayerNormParams { gamma: l.ln2.gamma.cast(), beta: l.ln2.beta.cast() },
                })
                .collect(),
            contract: self.contract.iter().map(lin).collect(),
            embed: self.embed.as_ref().map(|e| EmbedParams {
                alpha: e.alpha.cast(),
                beta: e.beta.cast(),
                gamma: e.gamma.cast(),
            }),
        }
    }
}

fn he_uniform_linear<S: Scalar>(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Linear<S> {
    he_uniform_biased(rng, d_in, d_out, 0.0)
}

/// ReLU-feeding layers get a small positive bias so that no unit starts
/// dead; at the narrow widths of the small presets, all-negative
/// pre-activations are otherwise a real risk.
fn relu_feeding_linear<S: Scalar>(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Linear<S> {
    he_uniform_biased(rng, d_in, d_out, 0.01)
}

fn he_uniform_biased<S: Scalar>(
    rng: &mut ChaCha8Rng,
    d_in: usize,
    d_out: usize,
    bias: f64,
) -> Linear<S> {
    let limit = (6.0 / d_in as f64).sqrt();
    Linear {
        w: Tensor::from_flat_fn(&[d_in, d_out], |_| S::from_f64(rng.gen_range(-limit..limit))),
        b: Tensor::full(&[d_out], S::from_f64(bias)),
    }
}

fn identity_norm<S: Scalar>(d: usize) -> LayerNormParams<S> {
    LayerNormParams { gamma: Tensor::full(&[d], S::one()), beta: Tensor::zeros(&[d]) }
}

pub fn init_encoder<S: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_token;
    let ddim = config.descriptor_dim();
    let hidden = config.expand_hidden();
    let expand = vec![
        relu_feeding_linear(&mut rng, ddim, hidden),
        he_uniform_linear(&mut rng, hidden, d),
    ];
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(AttnLayerParams {
            wq: he_uniform_linear(&mut rng, d, d),
            wk: he_uniform_linear(&mut rng, d, d),
            wv: he_uniform_linear(&mut rng, d, d),
            wo: he_uniform_linear(&mut rng, d, d),
            ln1: identity_norm(d),
            ffn1: relu_feeding_linear(&mut rng, d, config.d_ffn),
            ffn2: he_uniform_linear(&mut rng, config.d_ffn, d),
            ln2: identity_norm(d),
        });
    }
    let dims = config.contract_dims();
    // The last contract layer produces the per-band gates (or embedding
    // coefficients). Biasing it to 1.0 opens the gates at init, so the
    // untrained encoder already passes band intensities through instead of
    // emitting a near-constant map; that keeps early training out of the
    // single-class basin.
    let contract = vec![
        relu_feeding_linear(&mut rng, d, dims[0]),
        relu_feeding_linear(&mut rng, dims[0], dims[1]),
        he_uniform_biased(&mut rng, dims[1], dims[2], 1.0),
    ];
    let embed = match config.output_block {
        OutputBlock::BandMultiplication => None,
        OutputBlock::BandEmbedding => Some(EmbedParams {
            alpha: Tensor::from_flat_fn(&[config.c_out], |_| {
                S::from_f64(rng.gen_range(0.5..1.5))
            }),
            beta: Tensor::from_flat_fn(&[config.c_out], |_| {
                S::from_f64(rng.gen_range(-0.5..0.5))
            }),
            gamma: Tensor::from_flat_fn(&[config.c_out], |_| {
                S::from_f64(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
            }),
        }),
    };
    Ok(EncoderParams { expand, layers, contract, embed })
}

// Tape-side parameter handles, in the same order as `visit`.

pub(crate) struct BoundLinear {
    pub w: VarId,
    pub b: VarId,
}

pub(crate) struct BoundLayer {
    pub wq: BoundLinear,
    pub wk: BoundLinear,
    pub wv: BoundLinear,
    pub wo: BoundLinear,
    pub ln1: (VarId, VarId),
    pub ffn1: BoundLinear,
    pub ffn2: BoundLinear,
    pub ln2: (VarId, VarId),
}

pub(crate) struct BoundEncoder {
    pub expand: Vec<BoundLinear>,
    pub layers: Vec<BoundLayer>,
    pub contract: Vec<BoundLinear>,
    pub embed: Option<(VarId, VarId, VarId)>,
}

pub(crate) fn bind_encoder<S: Scalar>(
    tape: &mut Tape<S>,
    params: &EncoderParams<S>,
) -> BoundEncoder {
    let lin =
        |tape: &mut Tape<S>, l: &Linear<S>| BoundLinear { w: tape.leaf(l.w.clone()), b: tape.leaf(l.b.clone()) };
    BoundEncoder {
        expand: params.expand.iter().map(|l| lin(tape, l)).collect(),
        layers: params
            .layers
            .iter()
            .map(|l| BoundLayer {
                wq: lin(tape, &l.wq),
                wk: lin(tape, &l.wk),
                wv: lin(tape, &l.wv),
                wo: lin(tape, &l.wo),
                ln1: (tape.leaf(l.ln1.gamma.clone()), tape.leaf(l.ln1.beta.clone())),
                ffn1: lin(tape, &l.ffn1),
                ffn2: lin(tape, &l.ffn2),
                ln2: (tape.leaf(l.ln2.gamma.clone()), tape.leaf(l.ln2.beta.clone())),
            })
            .collect(),
        contract: params.contract.iter().map(|l| lin(tape, l)).collect(),
        embed: params.embed.as_ref().map(|e| {
            (
                tape.leaf(e.alpha.clone()),
                tape.leaf(e.beta.clone()),
                tape.leaf(e.gamma.clone()),
            )
        }),
    }
}

/// Parameter variables in `visit` order; pairs with `visit_mut` during SGD.
pub(crate) fn encoder_param_vars(bound: &BoundEncoder) -> Vec<VarId> {
    let mut out = Vec::new();
    for l in &bound.expand {
        out.push(l.w);
        out.push(l.b);
    }
    for layer in &bound.layers {
        for l in [&layer.wq, &layer.wk, &layer.wv, &layer.wo] {
            out.push(l.w);
            out.push(l.b);
        }
        out.push(layer.ln1.0);
        out.push(layer.ln1.1);
        out.push(layer.ffn1.w);
        out.push(layer.ffn1.b);
        out.push(layer.ffn2.w);
        out.push(layer.ffn2.b);
        out.push(layer.ln2.0);
        out.push(layer.ln2.1);
    }
    for l in &bound.contract {
        out.push(l.w);
        out.push(l.b);
    }
    if let Some((a, b, g)) = &bound.embed {
        out.push(*a);
        out.push(*b);
        out.push(*g);
    }
    out
}

fn linear_on_tape<S: Scalar>(tape: &mut Tape<S>, x: VarId, l: &BoundLinear) -> Result<VarId> {
    let m = tape.matmul(x, l.w)?;
    tape.add_row_bias(m, l.b)
}

pub(crate) fn expand_tokens_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    desc: VarId,
    bound: &BoundEncoder,
) -> Result<VarId> {
    let h = linear_on_tape(tape, desc, &bound.expand[0])?;
    let h = tape.relu(h);
    linear_on_tape(tape, h, &bound.expand[1])
}

pub(crate) fn fuse_attention_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: VarId,
    validity: &[bool],
    bound: &BoundEncoder,
    config: &EncoderConfig,
) -> Result<VarId> {
    let n = tape.value(tokens).dim(0);
    if validity.len() != n {
        return Err(Error::shape(
            "fuse_attention",
            format!("{} validity flags for {n} tokens", validity.len()),
        ));
    }
    if !validity.iter().any(|&v| v) {
        return Err(Error::invalid("fuse_attention", "no valid tokens"));
    }
    let masked = config.padding_level == PaddingLevel::MeanRealMasked;
    let key_mask: Vec<bool> = if masked { validity.to_vec() } else { vec![true; n] };
    let dh = config.d_token / config.n_heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());

    let mut x = tokens;
    for layer in &bound.layers {
        let q = linear_on_tape(tape, x, &layer.wq)?;
        let k = linear_on_tape(tape, x, &layer.wk)?;
        let v = linear_on_tape(tape, x, &layer.wv)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax(scores, &key_mask)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let mut proj = linear_on_tape(tape, cat, &layer.wo)?;
        if masked {
            // padding rows are not queries; drop whatever they attended to
            proj = tape.zero_rows(proj, validity)?;
        }
        let res = tape.add(x, proj)?;
        let x1 = tape.layer_norm(res, layer.ln1.0, layer.ln1.1, LN_EPS)?;
        let f = linear_on_tape(tape, x1, &layer.ffn1)?;
        let f = tape.relu(f);
        let f = linear_on_tape(tape, f, &layer.ffn2)?;
        let res2 = tape.add(x1, f)?;
        x = tape.layer_norm(res2, layer.ln2.0, layer.ln2.1, LN_EPS)?;
    }
    Ok(x)
}

pub(crate) fn contract_features_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: VarId,
    bound: &BoundEncoder,
) -> Result<VarId> {
    let h = linear_on_tape(tape, tokens, &bound.contract[0])?;
    let h = tape.relu(h);
    let h = linear_on_tape(tape, h, &bound.contract[1])?;
    let h = tape.relu(h);
    linear_on_tape(tape, h, &bound.contract[2])
}

fn divisor_for(level: PaddingLevel, bmax: usize, n_real: usize) -> f64 {
    match level {
        PaddingLevel::MeanAll => bmax as f64,
        _ => n_real as f64,
    }
}

pub(crate) fn output_block_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    bands: VarId,
    feats: VarId,
    validity: &[bool],
    bound: &BoundEncoder,
    config: &EncoderConfig,
) -> Result<VarId> {
    let bmax = tape.value(bands).dim(0);
    let n_real = validity.iter().filter(|&&v| v).count();
    if n_real == 0 {
        return Err(Error::invalid("output_block", "no real bands"));
    }
    match config.output_block {
        OutputBlock::BandMultiplication => {
            let divisor = divisor_for(config.padding_level, bmax, n_real);
            tape.band_multiply_mean(bands, feats, divisor)
        }
        OutputBlock::BandEmbedding => {
            let (a, b, g) = bound
                .embed
                .ok_or_else(|| Error::invalid("output_block", "embedding parameters missing"))?;
            tape.band_embed_mean(bands, feats, a, b, g, validity, n_real as f64)
        }
    }
}

/// Staged input for one tile: bands and descriptors on the tape plus the
/// validity mask derived from the spec count.
pub(crate) struct EncoderInput {
    pub bands: VarId,
    pub desc: VarId,
    pub validity: Vec<bool>,
}

pub(crate) fn stage_encoder_input<S: Scalar>(
    tape: &mut Tape<S>,
    bands: Tensor<S>,
    specs: &[BandSpec],
    config: &EncoderConfig,
) -> Result<EncoderInput> {
    let (desc, validity) =
        build_descriptor_batch(specs, &bands, config.d_enc, config.encoding, config.stats)?;
    if desc.dim(1) != config.descriptor_dim() {
        return Err(Error::shape(
            "encoder_forward",
            format!("descriptor width {} vs config {}", desc.dim(1), config.descriptor_dim()),
        ));
    }
    let bands = tape.leaf(bands);
    let desc = tape.leaf(desc);
    Ok(EncoderInput { bands, desc, validity })
}

pub(crate) fn encoder_body_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    input: &EncoderInput,
    bound: &BoundEncoder,
    config: &EncoderConfig,
) -> Result<VarId> {
    let tokens = expand_tokens_on_tape(tape, input.desc, bound)?;
    let fused = fuse_attention_on_tape(tape, tokens, &input.validity, bound, config)?;
    let feats = contract_features_on_tape(tape, fused, bound)?;
    output_block_on_tape(tape, input.bands, feats, &input.validity, bound, config)
}

/// Full forward pass. `bands` is [Bmax,H,W]; the first `specs.len()` planes
/// are real bands, the rest must hold the padding constant -0.5.
pub fn encoder_forward<S: Scalar>(
    bands: &Tensor<S>,
    specs: &[BandSpec],
    params: &EncoderParams<S>,
    config: &EncoderConfig,
) -> Result<Tensor<S>> {
    config.validate()?;
    let mut tape = Tape::new();
    let bound = bind_encoder(&mut tape, params);
    let input = stage_encoder_input(&mut tape, bands.clone(), specs, config)?;
    let out = encoder_body_on_tape(&mut tape, &input, &bound, config)?;
    let value = tape.value(out).clone();
    if !value.all_finite() {
        return Err(Error::NonFinite { op: "encoder_forward" });
    }
    Ok(value)
}

// Value-level stage wrappers, used directly by tests and tools.

pub fn expand_tokens<S: Scalar>(
    descriptors: &Tensor<S>,
    params: &EncoderParams<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bound = bind_encoder(&mut tape, params);
    let d = tape.leaf(descriptors.clone());
    let out = expand_tokens_on_tape(&mut tape, d, &bound)?;
    Ok(tape.value(out).clone())
}

pub fn fuse_attention<S: Scalar>(
    tokens: &Tensor<S>,
    validity: &[bool],
    params: &EncoderParams<S>,
    config: &EncoderConfig,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bound = bind_encoder(&mut tape, params);
    let t = tape.leaf(tokens.clone());
    let out = fuse_attention_on_tape(&mut tape, t, validity, &bound, config)?;
    Ok(tape.value(out).clone())
}

pub fn contract_features<S: Scalar>(
    tokens: &Tensor<S>,
    params: &EncoderParams<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bound = bind_encoder(&mut tape, params);
    let t = tape.leaf(tokens.clone());
    let out = contract_features_on_tape(&mut tape, t, &bound)?;
    Ok(tape.value(out).clone())
}

/// Output block: M_b = (bands_b + 0.5) * f_b summed over bands, divided by
/// Bmax (level 1) or the real-band count (levels 2 and 3).
pub fn band_multiply_mean<S: Scalar>(
    bands: &Tensor<S>,
    features: &Tensor<S>,
    validity: &[bool],
    level: PaddingLevel,
) -> Result<Tensor<S>> {
    let bmax = match bands.shape() {
        [b, _, _] => *b,
        other => return Err(Error::shape("band_multiply_mean", format!("bands {other:?}"))),
    };
    if validity.len() != bmax {
        return Err(Error::shape(
            "band_multiply_mean",
            format!("{} validity flags for {bmax} bands", validity.len()),
        ));
    }
    let n_real = validity.iter().filter(|&&v| v).count();
    if n_real == 0 {
        return Err(Error::invalid("band_multiply_mean", "no real bands"));
    }
    let mut tape = Tape::new();
    let b = tape.leaf(bands.clone());
    let f = tape.leaf(features.clone());
    let out = tape.band_multiply_mean(b, f, divisor_for(level, bmax, n_real))?;
    Ok(tape.value(out).clone())
}

pub fn band_embedding<S: Scalar>(
    bands: &Tensor<S>,
    features: &Tensor<S>,
    validity: &[bool],
    embed: &EmbedParams<S>,
) -> Result<Tensor<S>> {
    let n_real = validity.iter().filter(|&&v| v).count();
    if n_real == 0 {
        return Err(Error::invalid("band_embedding", "no real bands"));
    }
    let mut tape = Tape::new();
    let b = tape.leaf(bands.clone());
    let f = tape.leaf(features.clone());
    let a = tape.leaf(embed.alpha.clone());
    let be = tape.leaf(embed.beta.clone());
    let g = tape.leaf(embed.gamma.clone());
    let out = tape.band_embed_mean(b, f, a, be, g, validity, n_real as f64)?;
    Ok(tape.value(out).clone())
}
