//! Desk-scale training loop and evaluation driver.
//!
//! The pieces compose in layers: a warmup-plus-cosine learning-rate
//! schedule, AdamW with decoupled weight decay, dihedral-8 augmentation,
//! per-sample random band subsets, and a step loop that stages the
//! encoder (optional) and segmentation head on one tape so a single
//! backward pass yields every gradient. Evaluation runs tiles through the
//! same forward staging and accumulates a confusion matrix.

use crate::encoder::{
    bind_encoder, encoder_body_on_tape, encoder_param_vars, stage_encoder_input, BoundEncoder,
    EncoderConfig, EncoderParams, PaddingLevel, BAND_PAD,
};
use crate::error::{Error, Result};
use crate::io::{quantize_input_u8, TileSample};
use crate::metrics::{class_metrics, ConfusionMatrix, MetricsReport, IGNORE_LABEL};
use crate::segnet::{
    bind_segnet, calibrate_activations, predict_classes, segnet_body_on_tape, segnet_param_vars,
    BoundSegNet, QuantMode, SegNetConfig, SegNetParams,
};
use crate::tensor::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// lr reached at the end of training, as a fraction of base_lr.
    pub final_lr_frac: f64,
    /// lr at step zero, as a fraction of base_lr.
    pub warmup_start_frac: f64,
    /// Global L2 norm ceiling for gradients; None disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            weight_decay: 5e-3,
            batch_size: 4,
            epochs: 5,
            warmup_epochs: 3,
            final_lr_frac: 0.2,
            warmup_start_frac: 0.1,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("train_config", "base_lr must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("train_config", "weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train_config", "batch_size must be positive"));
        }
        if !(self.warmup_start_frac > 0.0 && self.warmup_start_frac <= 1.0) {
            return Err(Error::invalid("train_config", "warmup_start_frac must lie in (0, 1]"));
        }
        if !(self.final_lr_frac > 0.0 && self.final_lr_frac <= 1.0) {
            return Err(Error::invalid("train_config", "final_lr_frac must lie in (0, 1]"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("train_config", "clip_norm must be positive"));
            }
        }
        if self.epochs <= self.warmup_epochs {
            return Err(Error::invalid("train_config", "epochs must exceed warmup_epochs"));
        }
        Ok(())
    }
}

/// Learning rate at a fractional epoch position in [0, epochs]: linear
/// ramp from warmup_start_frac*base to base over the warmup epochs, then
/// cosine annealing down to final_lr_frac*base at the last epoch.
pub fn lr_schedule(epoch_progress: f64, config: &TrainConfig) -> f64 {
    let base = config.base_lr;
    let warmup = config.warmup_epochs as f64;
    if epoch_progress < warmup {
        let frac = (epoch_progress / warmup).clamp(0.0, 1.0);
        return base * (config.warmup_start_frac + (1.0 - config.warmup_start_frac) * frac);
    }
    let end = base * config.final_lr_frac;
    let tau =
        ((epoch_progress - warmup) / (config.epochs as f64 - warmup)).clamp(0.0, 1.0);
    end + (base - end) * (1.0 + (std::f64::consts::PI * tau).cos()) / 2.0
}

/// Maps raw annotation labels to the training convention. Raw values:
/// 0 Clear, 1 Shadow, 2 Thin, 3 Thick, 4 or 255 Undefined. Shadow folds
/// into Clear; Undefined becomes the ignore label.
pub fn merge_shadow_to_clear(raw: &[u8]) -> Result<Vec<u8>> {
    raw.iter()
        .map(|&v| match v {
            0 | 1 => Ok(0),
            2 => Ok(2),
            3 => Ok(1),
            4 | 255 => Ok(IGNORE_LABEL),
            other => Err(Error::invalid("merge_shadow_to_clear", format!("raw label {other}"))),
        })
        .collect()
}

/// Draws k uniform on {1..n_bands}, then a uniform k-subset without
/// replacement, returned ascending.
pub fn sample_band_subset<R: Rng>(n_bands: usize, rng: &mut R) -> Result<(Vec<usize>, usize)> {
    if n_bands == 0 {
        return Err(Error::invalid("sample_band_subset", "no bands to sample from"));
    }
    let k = rng.gen_range(1..=n_bands);
    let mut idx = rand::seq::index::sample(rng, n_bands, k).into_vec();
    idx.sort_unstable();
    Ok((idx, k))
}

fn flip_h<T: Copy>(d: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(d.len());
    for r in 0..h {
        for c in 0..w {
            out.push(d[r * w + (w - 1 - c)]);
        }
    }
    out
}

/// Clockwise quarter turn; h x w becomes w x h.
fn rot90<T: Copy>(d: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(d.len());
    for r in 0..w {
        for c in 0..h {
            out.push(d[(h - 1 - c) * w + r]);
        }
    }
    out
}

fn transform_plane<T: Copy>(d: &[T], h: usize, w: usize, element: u8) -> (Vec<T>, usize, usize) {
    let mut cur = if element >= 4 { flip_h(d, h, w) } else { d.to_vec() };
    let (mut h, mut w) = (h, w);
    for _ in 0..element % 4 {
        cur = rot90(&cur, h, w);
        std::mem::swap(&mut h, &mut w);
    }
    (cur, h, w)
}

/// Applies one of the 8 dihedral elements to all bands and the mask.
/// Elements 0..4 are quarter turns, 4..8 prepend a horizontal flip.
pub fn apply_dihedral(tile: &TileSample, element: u8) -> Result<TileSample> {
    if element >= 8 {
        return Err(Error::invalid("apply_dihedral", format!("element {element} out of 0..8")));
    }
    let (h, w) = (tile.height(), tile.width());
    if element % 4 != 0 && h != w {
        return Err(Error::invalid("apply_dihedral", "rotation requires square tiles"));
    }
    let b = tile.n_bands();
    let mut bands = Vec::with_capacity(b * h * w);
    let mut out_dims = (h, w);
    for plane in tile.bands.data().chunks_exact(h * w) {
        let (t, th, tw) = transform_plane(plane, h, w, element);
        out_dims = (th, tw);
        bands.extend_from_slice(&t);
    }
    let mask = match &tile.mask {
        Some(m) => Some(transform_plane(m, h, w, element).0),
        None => None,
    };
    TileSample::new(
        Tensor::from_vec(&[b, out_dims.0, out_dims.1], bands)?,
        tile.specs.clone(),
        mask,
    )
}

/// Uniformly random dihedral transform.
pub fn augment<R: Rng>(tile: &TileSample, rng: &mut R) -> Result<TileSample> {
    apply_dihedral(tile, rng.gen_range(0..8))
}

/// Keeps only the bands at `idx` (ascending positions into the tile).
pub fn subset_tile(tile: &TileSample, idx: &[usize]) -> Result<TileSample> {
    if idx.is_empty() {
        return Err(Error::invalid("subset_tile", "empty band subset"));
    }
    let hw = tile.height() * tile.width();
    let mut bands = Vec::with_capacity(idx.len() * hw);
    let mut specs = Vec::with_capacity(idx.len());
    for &i in idx {
        if i >= tile.n_bands() {
            return Err(Error::invalid("subset_tile", format!("band index {i} out of range")));
        }
        bands.extend_from_slice(&tile.bands.data()[i * hw..(i + 1) * hw]);
        specs.push(tile.specs[i]);
    }
    TileSample::new(
        Tensor::from_vec(&[idx.len(), tile.height(), tile.width()], bands)?,
        specs,
        tile.mask.clone(),
    )
}

/// Widens [k,H,W] bands to [bmax,H,W]; appended planes hold the padding
/// constant so they contribute nothing under level-3 masking.
pub fn pad_bands<S: Scalar>(bands: &Tensor<f32>, bmax: usize) -> Result<Tensor<S>> {
    if bands.shape().len() != 3 {
        return Err(Error::shape("pad_bands", format!("want [B,H,W], got {:?}", bands.shape())));
    }
    let (k, h, w) = (bands.dim(0), bands.dim(1), bands.dim(2));
    if k > bmax {
        return Err(Error::invalid("pad_bands", format!("{k} bands exceed bmax {bmax}")));
    }
    let mut data = Vec::with_capacity(bmax * h * w);
    data.extend(bands.data().iter().map(|&v| S::from_f64(v as f64)));
    data.resize(bmax * h * w, S::from_f64(BAND_PAD));
    Tensor::from_vec(&[bmax, h, w], data)
}

/// Trainable parameter collection, visited in a fixed order that matches
/// the tape binding order; the optimizer relies on this alignment.
pub trait ParamSet<S: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor<S>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<S>));

    fn n_tensors(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }
}

impl<S: Scalar> ParamSet<S> for EncoderParams<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor<S>)) {
        self.visit(&mut |t| f(t));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<S>)) {
        self.visit_mut(&mut |t| f(t));
    }
}

impl<S: Scalar> ParamSet<S> for SegNetParams<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor<S>)) {
        self.visit(&mut |t| f(t));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<S>)) {
        self.visit_mut(&mut |t| f(t));
    }
}

/// Spectral encoder (optional) plus segmentation network. Without the
/// encoder the segmentation network consumes raw reflectance planes from
/// a fixed sensor.
#[derive(Clone)]
pub struct Model<S: Scalar> {
    pub encoder: Option<(EncoderParams<S>, EncoderConfig)>,
    pub segnet: SegNetParams<S>,
    pub segnet_config: SegNetConfig,
}

impl<S: Scalar> Model<S> {
    pub fn with_encoder(
        enc: EncoderParams<S>,
        enc_config: EncoderConfig,
        seg: SegNetParams<S>,
        seg_config: SegNetConfig,
    ) -> Result<Self> {
        enc_config.validate()?;
        seg_config.validate()?;
        if enc_config.c_out != seg_config.in_channels {
            return Err(Error::invalid(
                "model",
                format!(
                    "encoder emits {} channels, segnet expects {}",
                    enc_config.c_out, seg_config.in_channels
                ),
            ));
        }
        Ok(Model { encoder: Some((enc, enc_config)), segnet: seg, segnet_config: seg_config })
    }

    pub fn baseline(seg: SegNetParams<S>, seg_config: SegNetConfig) -> Result<Self> {
        seg_config.validate()?;
        Ok(Model { encoder: None, segnet: seg, segnet_config: seg_config })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            encoder: self.encoder.as_ref().map(|(p, c)| (p.cast::<T>(), c.clone())),
            segnet: self.segnet.cast::<T>(),
            segnet_config: self.segnet_config.clone(),
        }
    }
}

impl<S: Scalar> ParamSet<S> for Model<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor<S>)) {
        if let Some((enc, _)) = &self.encoder {
            enc.visit(&mut |t| f(t));
        }
        self.segnet.visit(&mut |t| f(t));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<S>)) {
        if let Some((enc, _)) = &mut self.encoder {
            enc.visit_mut(&mut |t| f(t));
        }
        self.segnet.visit_mut(&mut |t| f(t));
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn for_params<S: Scalar>(params: &impl ParamSet<S>) -> Self {
        let mut m = Vec::new();
        params.visit_params(&mut |t| m.push(vec![0.0; t.numel()]));
        AdamState { v: m.clone(), m, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
/// `grads` aligns with the parameter visit order; None means zero
/// gradient (decay still applies).
pub fn adamw_step<S: Scalar>(
    params: &mut impl ParamSet<S>,
    grads: &[Option<Tensor<S>>],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} grads for {} parameter tensors", grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let wd = config.weight_decay;
    let mut i = 0;
    let mut err: Option<Error> = None;
    params.visit_params_mut(&mut |t| {
        if err.is_some() {
            return;
        }
        if i >= grads.len() {
            i += 1;
            return;
        }
        if let Some(g) = &grads[i] {
            if g.shape() != t.shape() {
                err = Some(Error::shape(
                    "adamw_step",
                    format!("grad {:?} vs param {:?} at tensor {i}", g.shape(), t.shape()),
                ));
                return;
            }
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = t.data_mut();
        for j in 0..data.len() {
            let g = grads[i].as_ref().map_or(0.0, |g| g.data()[j].to_f64());
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let theta = data[j].to_f64();
            data[j] =
                S::from_f64(theta - lr * m_hat / (v_hat.sqrt() + ADAM_EPS) - lr * wd * theta);
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != grads.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} grads for {i} parameter tensors", grads.len()),
        ));
    }
    Ok(())
}

struct BoundModel {
    enc: Option<BoundEncoder>,
    seg: BoundSegNet,
}

fn bind_model<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>) -> BoundModel {
    BoundModel {
        enc: model.encoder.as_ref().map(|(p, _)| bind_encoder(tape, p)),
        seg: bind_segnet(tape, &model.segnet),
    }
}

fn model_param_vars(bound: &BoundModel) -> Vec<VarId> {
    let mut vars = bound.enc.as_ref().map(encoder_param_vars).unwrap_or_default();
    vars.extend(segnet_param_vars(&bound.seg));
    vars
}

/// Stages one tile's forward pass and returns the logits node.
fn logits_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    tile: &TileSample,
    model: &Model<S>,
    bound: &BoundModel,
    bmax: usize,
    level_override: Option<PaddingLevel>,
    quantized: bool,
) -> Result<VarId> {
    let x = match (&model.encoder, &bound.enc) {
        (Some((_, base_config)), Some(enc)) => {
            let mut config = base_config.clone();
            if let Some(level) = level_override {
                config.padding_level = level;
            }
            let bands = pad_bands::<S>(&tile.bands, bmax)?;
            let input = stage_encoder_input(tape, bands, &tile.specs, &config)?;
            encoder_body_on_tape(tape, &input, enc, &config)?
        }
        _ => {
            // fixed-sensor baseline; the quantized variant consumes the
            // u8-rescaled reflectance instead of raw values
            let bands = tile.bands.cast::<S>();
            let staged = if quantized { quantize_input_u8(&bands).1 } else { bands };
            tape.leaf(staged)
        }
    };
    let scales = model.segnet.act_scales.clone();
    let mode = match (quantized, &scales) {
        (false, _) => QuantMode::Float,
        (true, Some(s)) => QuantMode::Quantized(s),
        (true, None) => return Err(Error::MissingCalibration),
    };
    segnet_body_on_tape(tape, x, &bound.seg, &model.segnet_config, mode, None)
}

/// Forward one tile to logits [n_classes, H, W].
pub fn model_forward(
    model: &Model<f64>,
    tile: &TileSample,
    bmax: usize,
    level_override: Option<PaddingLevel>,
    quantized: bool,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model);
    let out = logits_on_tape(&mut tape, tile, model, &bound, bmax, level_override, quantized)?;
    let value = tape.value(out).clone();
    if !value.all_finite() {
        return Err(Error::NonFinite { op: "model_forward" });
    }
    Ok(value)
}

/// Batch loss and its gradient for every parameter tensor, in visit
/// order. Forwards every sample on a shared tape, averages the
/// per-sample cross-entropy weighted by labeled pixel counts, and runs
/// one backward pass. A None gradient means the tensor did not reach the
/// loss.
pub fn loss_and_grads(
    batch: &[TileSample],
    model: &Model<f64>,
    bmax: usize,
    quantized: bool,
) -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model);
    let mut terms: Vec<(VarId, usize)> = Vec::with_capacity(batch.len());
    for tile in batch {
        let mask = tile
            .mask
            .as_ref()
            .ok_or_else(|| Error::invalid("train_step", "tile has no label mask"))?;
        let n_valid = mask.iter().filter(|&&l| l != IGNORE_LABEL).count();
        if n_valid == 0 {
            continue;
        }
        let logits = logits_on_tape(&mut tape, tile, model, &bound, bmax, None, quantized)?;
        let loss = tape.cross_entropy_mean(logits, mask, IGNORE_LABEL)?;
        terms.push((loss, n_valid));
    }
    if terms.is_empty() {
        return Err(Error::AllIgnored);
    }
    let total_pixels: usize = terms.iter().map(|&(_, n)| n).sum();
    let mut total: Option<VarId> = None;
    for (loss, n) in terms {
        let scaled = tape.scale(loss, n as f64 / total_pixels as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("at least one loss term");
    let loss_value = tape.value(total).item()?;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }
    let mut grads = tape.backward(total)?;
    let collected: Vec<Option<Tensor<f64>>> =
        model_param_vars(&bound).into_iter().map(|id| grads.take(id)).collect();
    Ok((loss_value, collected))
}

/// Scales all gradients by max_norm/norm when their global L2 norm
/// exceeds max_norm; a no-op otherwise.
pub fn clip_grad_norm(grads: &mut [Option<Tensor<f64>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|&v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One optimizer step over a batch: loss, backward, clip, AdamW update.
/// Returns the batch loss.
pub fn train_step(
    batch: &[TileSample],
    model: &mut Model<f64>,
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
    bmax: usize,
    quantized: bool,
) -> Result<f64> {
    let (loss_value, mut grads) = loss_and_grads(batch, model, bmax, quantized)?;
    if let Some(max_norm) = config.clip_norm {
        clip_grad_norm(&mut grads, max_norm);
    }
    adamw_step(model, &grads, state, lr, config)?;
    Ok(loss_value)
}

/// Runs float forwards over the tiles and freezes per-site activation
/// scales into the model.
pub fn calibrate_model(model: &mut Model<f64>, tiles: &[TileSample], bmax: usize) -> Result<()> {
    let mut inputs = Vec::with_capacity(tiles.len());
    for tile in tiles {
        let input = match &model.encoder {
            Some((params, config)) => {
                let bands = pad_bands::<f64>(&tile.bands, bmax)?;
                crate::encoder::encoder_forward(&bands, &tile.specs, params, config)?
            }
            // calibration must see the same u8-rescaled input quantized
            // inference will see
            None => quantize_input_u8(&tile.bands.cast::<f64>()).1,
        };
        inputs.push(input);
    }
    let scales = calibrate_activations(&model.segnet, &model.segnet_config, &inputs)?;
    model.segnet.act_scales = Some(scales);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub level_override: Option<PaddingLevel>,
    /// Evaluate on random subsets of exactly k bands per tile.
    pub fixed_k: Option<usize>,
    /// Pad target; defaults to each tile's own band count.
    pub pad_to: Option<usize>,
    pub quantized: bool,
    /// Seed for subset sampling when fixed_k is set.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { level_override: None, fixed_k: None, pad_to: None, quantized: false, seed: 0 }
    }
}

/// Forward every tile, argmax to classes, and accumulate a confusion
/// matrix against the tile masks.
pub fn evaluate(
    model: &Model<f64>,
    tiles: &[TileSample],
    opts: &EvalOptions,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    if tiles.is_empty() {
        return Err(Error::invalid("evaluate", "no tiles to evaluate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cm = ConfusionMatrix::new();
    for tile in tiles {
        let truth = tile
            .mask
            .as_ref()
            .ok_or_else(|| Error::invalid("evaluate", "tile has no label mask"))?
            .clone();
        let tile = match opts.fixed_k {
            Some(k) => {
                if k == 0 || k > tile.n_bands() {
                    return Err(Error::invalid("evaluate", format!("fixed_k {k} out of range")));
                }
                let mut idx = rand::seq::index::sample(&mut rng, tile.n_bands(), k).into_vec();
                idx.sort_unstable();
                subset_tile(tile, &idx)?
            }
            None => tile.clone(),
        };
        let bmax = opts.pad_to.unwrap_or(tile.n_bands());
        let logits = model_forward(model, &tile, bmax, opts.level_override, opts.quantized)?;
        let pred = predict_classes(&logits)?;
        cm.update(&pred, &truth)?;
    }
    let report = class_metrics(&cm);
    Ok((cm, report))
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    /// Total optimizer steps; the lr schedule maps them onto epochs.
    pub steps: usize,
    /// Draw a fresh random band subset per sample.
    pub random_band_subsets: bool,
    /// Force subsets of exactly k bands instead of random k.
    pub fixed_k: Option<usize>,
    pub augment: bool,
    /// Pad target for the encoder path; defaults to the widest tile.
    pub bmax: Option<usize>,
    /// Train against the fake-quantized forward (requires calibration).
    pub quantized: bool,
    /// Validate every n steps; 0 validates only at the end.
    pub eval_every: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            steps: 200,
            random_band_subsets: false,
            fixed_k: None,
            augment: false,
            bmax: None,
            quantized: false,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub losses: Vec<f64>,
    /// (step, validation mIoU) at each validation point.
    pub evals: Vec<(usize, f64)>,
    pub best_miou: f64,
    pub best_step: usize,
}

/// Step loop: sample a batch, optionally subset bands and augment, take
/// one AdamW step at the scheduled lr. Keeps the parameters with the best
/// validation mIoU and restores them into `model` at the end.
pub fn fit(
    model: &mut Model<f64>,
    train: &[TileSample],
    val: &[TileSample],
    config: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("fit", "no training tiles"));
    }
    if opts.steps == 0 {
        return Err(Error::invalid("fit", "steps must be positive"));
    }
    let bmax = opts.bmax.unwrap_or_else(|| {
        train.iter().chain(val.iter()).map(|t| t.n_bands()).max().unwrap_or(1)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::for_params(model);
    let mut losses = Vec::with_capacity(opts.steps);
    let mut evals = Vec::new();
    let mut best: Option<(f64, usize, Model<f64>)> = None;

    let eval_opts = EvalOptions {
        fixed_k: opts.fixed_k,
        pad_to: Some(bmax),
        quantized: opts.quantized,
        seed: config.seed,
        ..Default::default()
    };

    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let mut tile = train[rng.gen_range(0..train.len())].clone();
            if let Some(k) = opts.fixed_k {
                if k == 0 || k > tile.n_bands() {
                    return Err(Error::invalid("fit", format!("fixed_k {k} out of range")));
                }
                let mut idx = rand::seq::index::sample(&mut rng, tile.n_bands(), k).into_vec();
                idx.sort_unstable();
                tile = subset_tile(&tile, &idx)?;
            } else if opts.random_band_subsets {
                let (idx, _) = sample_band_subset(tile.n_bands(), &mut rng)?;
                tile = subset_tile(&tile, &idx)?;
            }
            if opts.augment {
                tile = augment(&tile, &mut rng)?;
            }
            batch.push(tile);
        }
        let epoch_progress = step as f64 * config.epochs as f64 / opts.steps as f64;
        let lr = lr_schedule(epoch_progress, config);
        losses.push(train_step(&batch, model, &mut state, lr, config, bmax, opts.quantized)?);

        let due = opts.eval_every > 0 && (step + 1) % opts.eval_every == 0;
        if !val.is_empty() && (due || step + 1 == opts.steps) {
            let (_, report) = evaluate(model, val, &eval_opts)?;
            evals.push((step + 1, report.miou));
            let improved = best.as_ref().map_or(true, |(b, _, _)| report.miou > *b);
            if improved {
                best = Some((report.miou, step + 1, model.clone()));
            }
        }
    }

    match best {
        Some((miou, step, params)) => {
            *model = params;
            Ok(FitReport { losses, evals, best_miou: miou, best_step: step })
        }
        None => Ok(FitReport { losses, evals, best_miou: f64::NAN, best_step: opts.steps }),
    }
}
