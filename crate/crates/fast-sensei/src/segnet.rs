//! Compact encoder-decoder segmentation network.
//!
//! Four downsampling stages, a bottleneck, and four upsampling stages, each
//! with two 3x3 convolutions; channels double on the way down from 8 to 128
//! and halve back up. Upsampling is nearest-neighbor and there are no skip
//! connections, so the whole forward pass is a single chain. A fake-quantized
//! mode emulates low-bit inference: 8-bit weights on the first and last
//! convolution, 4-bit on the rest, and 4-bit unsigned activations after every
//! ReLU using calibrated scales.

use crate::error::{Error, Result};
use crate::tensor::quant::QuantSpec;
use crate::tensor::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EDGE_WEIGHT_BITS: u8 = 8;
pub const INNER_WEIGHT_BITS: u8 = 4;
pub const ACT_BITS: u8 = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_stages: usize,
    pub n_classes: usize,
    pub quantized: bool,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            in_channels: 4,
            base_channels: 8,
            n_stages: 4,
            n_classes: 3,
            quantized: false,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("SegNetConfig", "channel counts must be positive"));
        }
        if self.n_stages == 0 || self.n_stages > 8 {
            return Err(Error::invalid("SegNetConfig", "n_stages must be in 1..=8"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("SegNetConfig", "need at least two classes"));
        }
        Ok(())
    }

    /// Spatial stride of the full encoder: input H,W must divide by this.
    pub fn stride(&self) -> usize {
        1 << self.n_stages
    }

    pub fn enc_channels(&self) -> Vec<usize> {
        (0..self.n_stages).map(|s| self.base_channels << s).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.n_stages
    }

    pub fn dec_channels(&self) -> Vec<usize> {
        (0..self.n_stages).map(|s| self.base_channels << (self.n_stages - 1 - s)).collect()
    }

    pub fn n_convs(&self) -> usize {
        4 * self.n_stages + 3
    }

    /// Quantized activation sites: one per conv except the logits head.
    pub fn n_act_sites(&self) -> usize {
        self.n_convs() - 1
    }

    /// (in, out) channel pairs for all convs in schedule order.
    pub fn conv_plan(&self) -> Vec<(usize, usize)> {
        let mut plan = Vec::with_capacity(self.n_convs());
        let mut cin = self.in_channels;
        for c in self.enc_channels() {
            plan.push((cin, c));
            plan.push((c, c));
            cin = c;
        }
        let bn = self.bottleneck_channels();
        plan.push((cin, bn));
        plan.push((bn, bn));
        cin = bn;
        for c in self.dec_channels() {
            plan.push((cin, c));
            plan.push((c, c));
            cin = c;
        }
        plan.push((cin, self.n_classes));
        plan
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer<S> {
    /// [out, in, 3, 3]
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct SegNetParams<S> {
    /// Convolutions in schedule order: encoder pairs, bottleneck pair,
    /// decoder pairs, logits head. Checkpoints serialize in this order.
    pub convs: Vec<ConvLayer<S>>,
    /// Per-site activation quantization scales, one per conv except the
    /// head. Required by the quantized forward path.
    pub act_scales: Option<Vec<f64>>,
}

impl<S: Scalar> SegNetParams<S> {
    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.w.numel() + c.b.numel()).sum()
    }

    pub fn visit(&self, f: &mut impl FnMut(&Tensor<S>)) {
        for c in &self.convs {
            f(&c.w);
            f(&c.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor<S>)) {
        for c in &mut self.convs {
            f(&mut c.w);
            f(&mut c.b);
        }
    }

    pub fn cast<T: Scalar>(&self) -> SegNetParams<T> {
        SegNetParams {
            convs: self
                .convs
                .iter()
                .map(|c| ConvLayer { w: c.w.cast(), b: c.b.cast() })
                .collect(),
            act_scales: self.act_scales.clone(),
        }
    }
}

pub fn init_segnet<S: Scalar>(config: &SegNetConfig, seed: u64) -> Result<SegNetParams<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = config.conv_plan();
    let head = plan.len() - 1;
    let convs = plan
        .into_iter()
        .enumerate()
        .map(|(i, (cin, cout))| {
            // every conv but the logits head feeds a ReLU; a small positive
            // bias keeps narrow layers from starting dead. The head itself is
            // scaled down so initial logits sit near zero and the first
            // updates train features instead of unwinding random class
            // preferences.
            let (scale, bias) = if i == head { (0.1, 0.0) } else { (1.0, 0.01) };
            let limit = scale * (6.0 / (cin * 9) as f64).sqrt();
            ConvLayer {
                w: Tensor::from_flat_fn(&[cout, cin, 3, 3], |_| {
                    S::from_f64(rng.gen_range(-limit..limit))
                }),
                b: Tensor::full(&[cout], S::from_f64(bias)),
            }
        })
        .collect();
    Ok(SegNetParams { convs, act_scales: None })
}

#[derive(Clone, Debug)]
pub struct StageStat {
    pub name: String,
    pub params: usize,
    /// Multiply-accumulates for one forward at the given input size,
    /// closed-form H*W*Cin*Cout*9 per conv at its operating resolution.
    pub macs: u64,
}

/// Per-stage parameter and MAC report for an H x W input.
pub fn stage_report(config: &SegNetConfig, h: usize, w: usize) -> Result<Vec<StageStat>> {
    config.validate()?;
    check_spatial(config, h, w)?;
    let plan = config.conv_plan();
    let conv_params = |(cin, cout): (usize, usize)| cin * cout * 9 + cout;
    let conv_macs =
        |(cin, cout): (usize, usize), hh: usize, ww: usize| (hh * ww * cin * cout * 9) as u64;
    let mut out = Vec::new();
    let mut idx = 0;
    let (mut hh, mut ww) = (h, w);
    for s in 0..config.n_stages {
        let pair = [plan[idx], plan[idx + 1]];
        out.push(StageStat {
            name: format!("enc{s}"),
            params: pair.iter().copied().map(conv_params).sum(),
            macs: pair.iter().map(|&p| conv_macs(p, hh, ww)).sum(),
        });
        idx += 2;
        hh /= 2;
        ww /= 2;
    }
    let pair = [plan[idx], plan[idx + 1]];
    out.push(StageStat {
        name: "bottleneck".into(),
        params: pair.iter().copied().map(conv_params).sum(),
        macs: pair.iter().map(|&p| conv_macs(p, hh, ww)).sum(),
    });
    idx += 2;
    for s in 0..config.n_stages {
        hh *= 2;
        ww *= 2;
        let pair = [plan[idx], plan[idx + 1]];
        out.push(StageStat {
            name: format!("dec{s}"),
            params: pair.iter().copied().map(conv_params).sum(),
            macs: pair.iter().map(|&p| conv_macs(p, hh, ww)).sum(),
        });
        idx += 2;
    }
    out.push(StageStat {
        name: "head".into(),
        params: conv_params(plan[idx]),
        macs: conv_macs(plan[idx], hh, ww),
    });
    Ok(out)
}

pub(crate) struct BoundSegNet {
    pub convs: Vec<(VarId, VarId)>,
}

pub(crate) fn bind_segnet<S: Scalar>(tape: &mut Tape<S>, params: &SegNetParams<S>) -> BoundSegNet {
    BoundSegNet {
        convs: params
            .convs
            .iter()
            .map(|c| (tape.leaf(c.w.clone()), tape.leaf(c.b.clone())))
            .collect(),
    }
}

pub(crate) fn segnet_param_vars(bound: &BoundSegNet) -> Vec<VarId> {
    bound.convs.iter().flat_map(|&(w, b)| [w, b]).collect()
}

#[derive(Clone, Copy)]
pub(crate) enum QuantMode<'a> {
    Float,
    /// Per-site activation scales, one per conv except the head.
    Quantized(&'a [f64]),
}

fn weight_bits(idx: usize, n_convs: usize) -> u8 {
    if idx == 0 || idx + 1 == n_convs {
        EDGE_WEIGHT_BITS
    } else {
        INNER_WEIGHT_BITS
    }
}

/// One conv plus its activation: conv -> ReLU -> optional fake quantization.
/// The head conv skips both the ReLU and the activation quantizer. `w` is
/// expected to be pre-quantized by the caller in quantized mode.
fn conv_step<S: Scalar>(
    tape: &mut Tape<S>,
    x: VarId,
    w: VarId,
    b: VarId,
    act_scale: Option<f64>,
    is_head: bool,
    collector: &mut Option<&mut Vec<f64>>,
) -> Result<VarId> {
    let y = tape.conv2d_3x3_same(x, w, b)?;
    if is_head {
        return Ok(y);
    }
    let y = tape.relu(y);
    if let Some(c) = collector.as_deref_mut() {
        c.push(tape.value(y).max_abs().to_f64());
    }
    match act_scale {
        Some(s) => {
            let spec = QuantSpec::unsigned(ACT_BITS, s)?;
            Ok(tape.fake_quantize(y, spec))
        }
        None => Ok(y),
    }
}

pub(crate) fn segnet_body_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: VarId,
    bound: &BoundSegNet,
    config: &SegNetConfig,
    mode: QuantMode<'_>,
    mut collector: Option<&mut Vec<f64>>,
) -> Result<VarId> {
    let n_convs = bound.convs.len();
    if n_convs != config.n_convs() {
        return Err(Error::shape(
            "segnet_forward",
            format!("{n_convs} convs bound, config wants {}", config.n_convs()),
        ));
    }
    let scales = match mode {
        QuantMode::Float => None,
        QuantMode::Quantized(s) => {
            if s.len() != config.n_act_sites() {
                return Err(Error::MissingCalibration);
            }
            Some(s)
        }
    };
    let mut cur = x;
    let mut idx = 0;
    let step = |tape: &mut Tape<S>,
                cur: VarId,
                idx: usize,
                is_head: bool,
                collector: &mut Option<&mut Vec<f64>>|
     -> Result<VarId> {
        let (mut w, b) = bound.convs[idx];
        if scales.is_some() {
            // weight scale is recomputed from the live weights at bind time
            let spec = QuantSpec::for_weights(tape.value(w), weight_bits(idx, n_convs))?;
            w = tape.fake_quantize(w, spec);
        }
        let act_scale = if is_head { None } else { scales.map(|s| s[idx]) };
        conv_step(tape, cur, w, b, act_scale, is_head, collector)
    };
    for _ in 0..config.n_stages {
        for _ in 0..2 {
            cur = step(tape, cur, idx, false, &mut collector)?;
            idx += 1;
        }
        cur = tape.maxpool_2x2(cur)?;
    }
    for _ in 0..2 {
        cur = step(tape, cur, idx, false, &mut collector)?;
        idx += 1;
    }
    for _ in 0..config.n_stages {
        cur = tape.upsample_nearest_2x(cur)?;
        for _ in 0..2 {
            cur = step(tape, cur, idx, false, &mut collector)?;
            idx += 1;
        }
    }
    step(tape, cur, idx, true, &mut collector)
}

fn check_spatial(config: &SegNetConfig, h: usize, w: usize) -> Result<()> {
    let stride = config.stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(
            "segnet_forward",
            format!("input {h}x{w} not divisible by the total stride {stride}"),
        ));
    }
    Ok(())
}

fn check_input<S: Scalar>(x: &Tensor<S>, config: &SegNetConfig) -> Result<()> {
    match x.shape() {
        [c, h, w] if *c == config.in_channels => check_spatial(config, *h, *w),
        other => Err(Error::shape(
            "segnet_forward",
            format!("input {other:?}, want [{}, H, W]", config.in_channels),
        )),
    }
}

pub fn segnet_forward<S: Scalar>(
    x: &Tensor<S>,
    params: &SegNetParams<S>,
    config: &SegNetConfig,
) -> Result<Tensor<S>> {
    config.validate()?;
    check_input(x, config)?;
    let mut tape = Tape::new();
    let bound = bind_segnet(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let out = segnet_body_on_tape(&mut tape, xv, &bound, config, QuantMode::Float, None)?;
    let v = tape.value(out).clone();
    if !v.all_finite() {
        return Err(Error::NonFinite { op: "segnet_forward" });
    }
    Ok(v)
}

pub fn segnet_forward_quantized<S: Scalar>(
    x: &Tensor<S>,
    params: &SegNetParams<S>,
    config: &SegNetConfig,
) -> Result<Tensor<S>> {
    config.validate()?;
    check_input(x, config)?;
    let scales = params.act_scales.as_ref().ok_or(Error::MissingCalibration)?;
    let mut tape = Tape::new();
    let bound = bind_segnet(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let out =
        segnet_body_on_tape(&mut tape, xv, &bound, config, QuantMode::Quantized(scales), None)?;
    let v = tape.value(out).clone();
    if !v.all_finite() {
        return Err(Error::NonFinite { op: "segnet_forward_quantized" });
    }
    Ok(v)
}

/// Runs float forwards over calibration tiles and derives one activation
/// scale per quantization site from the running max, scale = max / qmax.
/// Sites that never fire (max 0) fall back to scale 1.0.
pub fn calibrate_activations<S: Scalar>(
    params: &SegNetParams<S>,
    config: &SegNetConfig,
    tiles: &[Tensor<S>],
) -> Result<Vec<f64>> {
    config.validate()?;
    if tiles.is_empty() {
        return Err(Error::invalid("calibrate_activations", "no calibration tiles"));
    }
    let qmax = ((1u32 << ACT_BITS) - 1) as f64;
    let mut maxes = vec![0.0f64; config.n_act_sites()];
    for x in tiles {
        check_input(x, config)?;
        let mut got = Vec::with_capacity(maxes.len());
        let mut tape = Tape::new();
        let bound = bind_segnet(&mut tape, params);
        let xv = tape.leaf(x.clone());
        segnet_body_on_tape(&mut tape, xv, &bound, config, QuantMode::Float, Some(&mut got))?;
        for (m, g) in maxes.iter_mut().zip(&got) {
            *m = m.max(*g);
        }
    }
    Ok(maxes.into_iter().map(|m| if m > 0.0 { m / qmax } else { 1.0 }).collect())
}

/// Per-pixel argmax over class logits [K,H,W]; ties go to the lowest index.
pub fn predict_classes<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<u8>> {
    let (k, h, w) = match logits.shape() {
        [k, h, w] if (2..=255).contains(k) => (*k, *h, *w),
        other => return Err(Error::shape("predict_classes", format!("logits {other:?}"))),
    };
    let data = logits.data();
    let hw = h * w;
    let mut out = Vec::with_capacity(hw);
    for p in 0..hw {
        let mut best = 0u8;
        let mut best_v = data[p];
        for c in 1..k {
            let v = data[c * hw + p];
            if v > best_v {
                best_v = v;
                best = c as u8;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_input(r: &mut ChaCha8Rng, c: usize, hw: usize) -> Tensor<f64> {
        Tensor::from_flat_fn(&[c, hw, hw], |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn schedule_matches_doubling_rule() {
        let c = SegNetConfig::default();
        assert_eq!(c.enc_channels(), vec![8, 16, 32, 64]);
        assert_eq!(c.bottleneck_channels(), 128);
        assert_eq!(c.dec_channels(), vec![64, 32, 16, 8]);
        assert_eq!(c.n_convs(), 19);
        let plan = c.conv_plan();
        assert_eq!(plan[0], (4, 8));
        assert_eq!(plan[8], (64, 128));
        assert_eq!(plan[18], (8, 3));
        let params: SegNetParams<f32> = init_segnet(&c, 1).unwrap();
        assert_eq!(params.convs.len(), 19);
        assert_eq!(params.convs[9].w.shape(), &[128, 128, 3, 3]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = SegNetConfig::default();
        let a: SegNetParams<f32> = init_segnet(&c, 5).unwrap();
        let b: SegNetParams<f32> = init_segnet(&c, 5).unwrap();
        let d: SegNetParams<f32> = init_segnet(&c, 6).unwrap();
        assert_eq!(a.convs[3].w, b.convs[3].w);
        assert_ne!(a.convs[3].w, d.convs[3].w);
    }

    #[test]
    fn stage_report_matches_closed_form() {
        let c = SegNetConfig::default();
        let report = stage_report(&c, 64, 64).unwrap();
        assert_eq!(report.len(), 10);
        // enc0: conv 4->8 (296 params) + conv 8->8 (584), both at 64x64
        assert_eq!(report[0].params, 296 + 584);
        assert_eq!(report[0].macs, (4 * 8 + 8 * 8) * 9 * 64 * 64);
        // bottleneck runs at 4x4 after four pools
        assert_eq!(report[4].name, "bottleneck");
        assert_eq!(report[4].macs, (64 * 128 + 128 * 128) * 9 * 4 * 4);
        // the doubling schedule balances encoder MACs across stages
        for s in 1..4 {
            assert_eq!(report[s].macs, report[0].macs, "stage {s}");
        }
        let total: usize = report.iter().map(|s| s.params).sum();
        let params: SegNetParams<f32> = init_segnet(&c, 1).unwrap();
        assert_eq!(total, params.param_count());
    }

    #[test]
    fn forward_keeps_spatial_resolution() {
        let c = SegNetConfig::default();
        let params: SegNetParams<f64> = init_segnet(&c, 2).unwrap();
        let mut r = rng(20);
        let x = rand_input(&mut r, 4, 32);
        let y = segnet_forward(&x, &params, &c).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32]);
    }

    #[test]
    fn forward_rejects_bad_spatial_dims_and_channels() {
        let c = SegNetConfig::default();
        let params: SegNetParams<f64> = init_segnet(&c, 2).unwrap();
        let x = Tensor::<f64>::zeros(&[4, 24, 24]);
        assert!(segnet_forward(&x, &params, &c).is_err(), "24 not divisible by 16");
        let x = Tensor::<f64>::zeros(&[5, 32, 32]);
        assert!(segnet_forward(&x, &params, &c).is_err(), "wrong channel count");
    }

    #[test]
    fn zero_weights_with_head_bias_give_constant_logits() {
        let c = SegNetConfig::default();
        let mut params: SegNetParams<f64> = init_segnet(&c, 3).unwrap();
        for conv in &mut params.convs {
            conv.w = Tensor::zeros(conv.w.shape());
        }
        params.convs[18].b = Tensor::from_vec(&[3], vec![0.7, -1.2, 0.3]).unwrap();
        let mut r = rng(21);
        let x = rand_input(&mut r, 4, 16);
        let y = segnet_forward(&x, &params, &c).unwrap();
        for cls in 0..3 {
            let want = params.convs[18].b.at(&[cls]);
            for p in 0..16 * 16 {
                assert_eq!(y.data()[cls * 256 + p], want);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let c = SegNetConfig::default();
        let params: SegNetParams<f64> = init_segnet(&c, 4).unwrap();
        let mut r = rng(22);
        let x = rand_input(&mut r, 4, 16);
        let a = segnet_forward(&x, &params, &c).unwrap();
        let b = segnet_forward(&x, &params, &c).unwrap();
        assert_eq!(a.data(), b.data());
    }

    /// Zero-padded convs break translation covariance at borders, so the
    /// exact statement uses a shift that maps the periodic input to itself:
    /// a 16px torus roll of an 8-periodic tile is the identity, and the
    /// logits of the rolled tensor must match bit for bit.
    #[test]
    fn total_stride_shift_of_periodic_input_fixes_logits() {
        let c = SegNetConfig::default();
        let params: SegNetParams<f64> = init_segnet(&c, 5).unwrap();
        let mut r = rng(23);
        let pattern: Vec<f64> = (0..4 * 8 * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_flat_fn(&[4, 32, 32], |i| {
            let (ch, rest) = (i / (32 * 32), i % (32 * 32));
            let (row, col) = (rest / 32, rest % 32);
            pattern[ch * 64 + (row % 8) * 8 + (col % 8)]
        });
        let rolled = Tensor::from_flat_fn(&[4, 32, 32], |i| {
            let (ch, rest) = (i / (32 * 32), i % (32 * 32));
            let (row, col) = (rest / 32, rest % 32);
            x.at(&[ch, (row + 16) % 32, (col + 16) % 32])
        });
        assert_eq!(x.data(), rolled.data());
        let a = segnet_forward(&x, &params, &c).unwrap();
        let b = segnet_forward(&rolled, &params, &c).unwrap();
        assert_eq!(a.data(), b.data());
    }

    /// No skip connections: in the forward graph every reachable node feeds
    /// at most one consumer, i.e. the network is a pure chain through the
    /// bottleneck. A skip would give some encoder output two consumers.
    #[test]
    fn forward_graph_is_skip_free_chain() {
        let c = SegNetConfig::default();
        let params: SegNetParams<f64> = init_segnet(&c, 6).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let bound = bind_segnet(&mut tape, &params);
        let x = tape.leaf(Tensor::zeros(&[4, 16, 16]));
        let out =
            segnet_body_on_tape(&mut tape, x, &bound, &c, QuantMode::Float, None).unwrap();

        let mut reachable = vec![false; tape.len()];
        let mut consumers = vec![0usize; tape.len()];
        let mut stack = vec![out];
        let mut conv_nodes = 0;
        while let Some(id) = stack.pop() {
            if reachable[id.0] {
                continue;
            }
            reachable[id.0] = true;
            let parents = tape.parents(id);
            if parents.len() == 3 {
                conv_nodes += 1; // conv2d is the only 3-input op in this graph
            }
            for p in parents {
                consumers[p.0] += 1;
                stack.push(p);
            }
        }
        assert_eq!(conv_nodes, 19);
        for (i, &n) in consumers.iter().enumerate() {
            assert!(n <= 1, "node {i} has {n} consumers; graph is not a chain");
        }
    }

    #[test]
    fn quantized_forward_requires_calibration() {
        let c = SegNetConfig::default();
        let params: SegNetParams<f64> = init_segnet(&c, 7).unwrap();
        let x = Tensor::<f64>::zeros(&[4, 16, 16]);
        match segnet_forward_quantized(&x, &params, &c) {
            Err(Error::MissingCalibration) => {}
            other => panic!("expected MissingCalibration, got {other:?}"),
        }
    }

    #[test]
    fn quantized_matches_float_on_zero_input_with_zero_biases() {
        let c = SegNetConfig::default();
        let mut params: SegNetParams<f64> = init_segnet(&c, 8).unwrap();
        for conv in params.convs.iter_mut() {
            conv.b = Tensor::zeros(&[conv.b.numel()]);
        }
        params.act_scales = Some(vec![1.0; c.n_act_sites()]);
        let x = Tensor::<f64>::zeros(&[4, 16, 16]);
        let float = segnet_forward(&x, &params, &c).unwrap();
        let quant = segnet_forward_quantized(&x, &params, &c).unwrap();
        assert_eq!(float.data(), quant.data(), "0 lies on every quantization grid");
    }

    /// Zero weights and on-grid biases make every intermediate value land
    /// exactly on its activation grid, so fake quantization is the identity
    /// and the two paths agree bit for bit with nonzero activations.
    #[test]
    fn quantized_matches_float_when_values_sit_on_the_grids() {
        let c = SegNetConfig::default();
        let mut params: SegNetParams<f64> = init_segnet(&c, 9).unwrap();
        let mut scales = Vec::new();
        for (i, conv) in params.convs.iter_mut().enumerate() {
            conv.w = Tensor::zeros(conv.w.shape());
            if i + 1 < 19 {
                let v = 0.25 * (i + 1) as f64;
                conv.b = Tensor::full(&[conv.b.numel()], v);
                scales.push(v); // activation v sits at grid step 1 of 15
            } else {
                conv.b = Tensor::from_vec(&[3], vec![-0.3, 0.1, 0.4]).unwrap();
            }
        }
        params.act_scales = Some(scales);
        let mut r = rng(24);
        let x = rand_input(&mut r, 4, 16);
        let float = segnet_forward(&x, &params, &c).unwrap();
        let quant = segnet_forward_quantized(&x, &params, &c).unwrap();
        assert_eq!(float.data(), quant.data());
        assert!(float.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn calibration_scales_cover_observed_activations() {
        let c = SegNetConfig::default();
        let params: SegNetParams<f64> = init_segnet(&c, 10).unwrap();
        let mut r = rng(25);
        let tiles = vec![rand_input(&mut r, 4, 16), rand_input(&mut r, 4, 16)];
        let scales = calibrate_activations(&params, &c, &tiles).unwrap();
        assert_eq!(scales.len(), c.n_act_sites());
        assert!(scales.iter().all(|&s| s > 0.0));
        // rerun one tile and confirm no post-ReLU value exceeds the grid top
        let mut got = Vec::new();
        let mut tape = Tape::new();
        let bound = bind_segnet(&mut tape, &params);
        let xv = tape.leaf(tiles[0].clone());
        segnet_body_on_tape(&mut tape, xv, &bound, &c, QuantMode::Float, Some(&mut got))
            .unwrap();
        for (m, s) in got.iter().zip(&scales) {
            assert!(*m <= s * 15.0 + 1e-12);
        }
    }

    #[test]
    fn predict_classes_follows_argmax_with_low_index_ties() {
        let logits =
            Tensor::from_vec(&[3, 1, 2], vec![2.0, 1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        // pixel 0: [2,1,0] -> 0; pixel 1: [1,1,1] -> 0
        assert_eq!(predict_classes(&logits).unwrap(), vec![0, 0]);

        let mut r = rng(26);
        let rand = Tensor::from_flat_fn(&[3, 4, 4], |_| r.gen_range(-1.0..1.0f64));
        let got = predict_classes(&rand).unwrap();
        for p in 0..16 {
            let vals = [rand.data()[p], rand.data()[16 + p], rand.data()[32 + p]];
            let mut best = 0;
            for c in 1..3 {
                if vals[c] > vals[best] {
                    best = c;
                }
            }
            assert_eq!(got[p], best as u8);
        }
        assert!(predict_classes(&Tensor::<f64>::zeros(&[4])).is_err());
    }
}
