//! Tape-based reverse-mode autodiff.
//!
//! Forward calls evaluate eagerly through the kernels and append one node per
//! op; [`Tape::backward`] walks the nodes in reverse. Values are owned by the
//! tape, variables are plain indices. Gradients are reported only for tensors
//! that actually participate in the loss; everything else stays `None`.

use crate::error::{Error, Result};
use crate::tensor::kernels as k;
use crate::tensor::quant::{fake_quantize, QuantSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    Matmul { a: VarId, b: VarId },
    Transpose { x: VarId },
    Add { a: VarId, b: VarId },
    AddRowBias { x: VarId, bias: VarId },
    AddScalar { x: VarId },
    Scale { x: VarId, factor: S },
    Mul { a: VarId, b: VarId },
    Relu { x: VarId },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, eps: f64 },
    MaskedSoftmax { x: VarId, mask: Vec<bool> },
    Conv2d { x: VarId, w: VarId, b: VarId },
    MaxPool { x: VarId, argmax: Vec<usize> },
    Upsample { x: VarId },
    CrossEntropyMean { logits: VarId, labels: Vec<u8>, ignore: u8 },
    FakeQuant { x: VarId, spec: QuantSpec },
    SliceCols { x: VarId, c0: usize, c1: usize },
    ConcatCols { parts: Vec<VarId> },
    ZeroRows { x: VarId, keep: Vec<bool> },
    SumAll { x: VarId },
    BandMulMean { bands: VarId, feats: VarId, divisor: f64 },
    BandEmbedMean {
        bands: VarId,
        feats: VarId,
        alpha: VarId,
        beta: VarId,
        gamma: VarId,
        valid: Vec<bool>,
        divisor: f64,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Per-variable gradients from one backward pass.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. this variable, or None if the variable
    /// never fed into the loss.
    pub fn get(&self, id: VarId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: VarId, delta: Tensor<S>) {
    match &mut grads[id.0] {
        Some(t) => k::add_inplace(t, &delta),
        slot => *slot = Some(delta),
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Direct inputs of a node, for structural graph checks.
    // graph-inspection helper for structural tests
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn parents(&self, id: VarId) -> Vec<VarId> {
        match &self.nodes[id.0].op {
            Op::Leaf => vec![],
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Transpose { x }
            | Op::AddScalar { x }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::MaskedSoftmax { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Upsample { x }
            | Op::FakeQuant { x, .. }
            | Op::SliceCols { x, .. }
            | Op::ZeroRows { x, .. }
            | Op::SumAll { x } => vec![*x],
            Op::AddRowBias { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, b } => vec![*x, *w, *b],
            Op::CrossEntropyMean { logits, .. } => vec![*logits],
            Op::ConcatCols { parts } => parts.clone(),
            Op::BandMulMean { bands, feats, .. } => vec![*bands, *feats],
            Op::BandEmbedMean { bands, feats, alpha, beta, gamma, .. } => {
                vec![*bands, *feats, *alpha, *beta, *gamma]
            }
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> VarId {
        debug_assert!(value.all_finite(), "non-finite value on tape");
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<S>) -> VarId {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let v = k::transpose(self.value(x))?;
        Ok(self.push(v, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k::elementwise_add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    /// Adds a length-C bias vector to every row of an RxC matrix.
    pub fn add_row_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (r, c) = match xv.shape() {
            [r, c] => (*r, *c),
            other => return Err(Error::shape("add_row_bias", format!("x rank {other:?}"))),
        };
        if bv.shape() != [c] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} vs {c} columns", bv.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bv.data()[j];
            }
        }
        let v = Tensor::from_vec(&[r, c], out)?;
        Ok(self.push(v, Op::AddRowBias { x, bias }))
    }

    pub fn add_scalar(&mut self, x: VarId, offset: S) -> VarId {
        let v = self.value(x).map(|t| t + offset);
        self.push(v, Op::AddScalar { x })
    }

    pub fn scale(&mut self, x: VarId, factor: S) -> VarId {
        let v = self.value(x).map(|t| t * factor);
        self.push(v, Op::Scale { x, factor })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k::elementwise_mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = k::relu(self.value(x));
        self.push(v, Op::Relu { x })
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let v = k::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn masked_softmax(&mut self, x: VarId, mask: &[bool]) -> Result<VarId> {
        let v = k::masked_softmax(self.value(x), mask)?;
        Ok(self.push(v, Op::MaskedSoftmax { x, mask: mask.to_vec() }))
    }

    pub fn conv2d_3x3_same(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let v = k::conv2d_3x3_same(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Op::Conv2d { x, w, b }))
    }

    pub fn maxpool_2x2(&mut self, x: VarId) -> Result<VarId> {
        let (v, argmax) = k::maxpool_2x2_with_argmax(self.value(x))?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    pub fn upsample_nearest_2x(&mut self, x: VarId) -> Result<VarId> {
        let v = k::upsample_nearest_2x(self.value(x))?;
        Ok(self.push(v, Op::Upsample { x }))
    }

    /// Scalar-valued mean cross-entropy; pixels labeled `ignore` are skipped.
    pub fn cross_entropy_mean(&mut self, logits: VarId, labels: &[u8], ignore: u8) -> Result<VarId> {
        let loss = k::cross_entropy_mean(self.value(logits), labels, ignore)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean { logits, labels: labels.to_vec(), ignore },
        ))
    }

    /// Fake quantization with straight-through gradient: backward passes the
    /// gradient unchanged wherever the input was inside the clip range.
    pub fn fake_quantize(&mut self, x: VarId, spec: QuantSpec) -> VarId {
        let v = fake_quantize(self.value(x), &spec);
        self.push(v, Op::FakeQuant { x, spec })
    }

    pub fn slice_cols(&mut self, x: VarId, c0: usize, c1: usize) -> Result<VarId> {
        let xv = self.value(x);
        let (r, c) = match xv.shape() {
            [r, c] => (*r, *c),
            other => return Err(Error::shape("slice_cols", format!("x rank {other:?}"))),
        };
        if c0 >= c1 || c1 > c {
            return Err(Error::invalid("slice_cols", format!("range {c0}..{c1} of {c}")));
        }
        let w = c1 - c0;
        let mut out = vec![S::zero(); r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&xv.data()[i * c + c0..i * c + c1]);
        }
        let v = Tensor::from_vec(&[r, w], out)?;
        Ok(self.push(v, Op::SliceCols { x, c0, c1 }))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols", "no parts"));
        }
        let r = match self.value(parts[0]).shape() {
            [r, _] => *r,
            other => return Err(Error::shape("concat_cols", format!("part rank {other:?}"))),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.value(p).shape() {
                [pr, pc] if *pr == r => widths.push(*pc),
                other => {
                    return Err(Error::shape(
                        "concat_cols",
                        format!("part {other:?} vs {r} rows"),
                    ))
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let v = Tensor::from_vec(&[r, total], out)?;
        Ok(self.push(v, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Zeroes whole rows where `keep` is false. Used to blank padding tokens
    /// after attention output projection.
    pub fn zero_rows(&mut self, x: VarId, keep: &[bool]) -> Result<VarId> {
        let xv = self.value(x);
        let (r, c) = match xv.shape() {
            [r, c] => (*r, *c),
            other => return Err(Error::shape("zero_rows", format!("x rank {other:?}"))),
        };
        if keep.len() != r {
            return Err(Error::shape("zero_rows", format!("{} flags for {r} rows", keep.len())));
        }
        let mut out = xv.data().to_vec();
        for (i, &kf) in keep.iter().enumerate() {
            if !kf {
                out[i * c..(i + 1) * c].fill(S::zero());
            }
        }
        let v = Tensor::from_vec(&[r, c], out)?;
        Ok(self.push(v, Op::ZeroRows { x, keep: keep.to_vec() }))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn band_multiply_mean(&mut self, bands: VarId, feats: VarId, divisor: f64) -> Result<VarId> {
        let v = k::band_mul_mean(self.value(bands), self.value(feats), divisor)?;
        Ok(self.push(v, Op::BandMulMean { bands, feats, divisor }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn band_embed_mean(
        &mut self,
        bands: VarId,
        feats: VarId,
        alpha: VarId,
        beta: VarId,
        gamma: VarId,
        valid: &[bool],
        divisor: f64,
    ) -> Result<VarId> {
        let v = k::band_embed_mean(
            self.value(bands),
            self.value(feats),
            self.value(alpha),
            self.value(beta),
            self.value(gamma),
            valid,
            divisor,
        )?;
        Ok(self.push(
            v,
            Op::BandEmbedMean { bands, feats, alpha, beta, gamma, valid: valid.to_vec(), divisor },
        ))
    }

    pub fn backward(&self, loss: VarId) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward", "loss variable is not on this tape"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let bt = k::transpose(self.value(*b))?;
                    let at = k::transpose(self.value(*a))?;
                    acc(&mut grads, *a, k::matmul(&g, &bt)?);
                    acc(&mut grads, *b, k::matmul(&at, &g)?);
                }
                Op::Transpose { x } => {
                    acc(&mut grads, *x, k::transpose(&g)?);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRowBias { x, bias } => {
                    let c = self.value(*bias).numel();
                    let r = g.numel() / c;
                    let mut db = vec![S::zero(); c];
                    for i2 in 0..r {
                        for j in 0..c {
                            db[j] += g.data()[i2 * c + j];
                        }
                    }
                    acc(&mut grads, *bias, Tensor::from_vec(&[c], db)?);
                    acc(&mut grads, *x, g.clone());
                }
                Op::AddScalar { x } => {
                    acc(&mut grads, *x, g.clone());
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    acc(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Mul { a, b } => {
                    acc(&mut grads, *a, k::elementwise_mul(&g, self.value(*b))?);
                    acc(&mut grads, *b, k::elementwise_mul(&g, self.value(*a))?);
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                        .collect();
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), data)?);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let d = gv.numel();
                    let rows = xv.numel() / d;
                    let xd = xv.data();
                    let gad = gv.data();
                    let gr = g.data();
                    let eps_s = S::from_f64(*eps);
                    let inv_d = S::from_f64(1.0 / d as f64);
                    let mut dx = vec![S::zero(); xv.numel()];
                    let mut dgamma = vec![S::zero(); d];
                    let mut dbeta = vec![S::zero(); d];
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let grow = &gr[r * d..(r + 1) * d];
                        let mean = row.iter().copied().sum::<S>() * inv_d;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                        let inv = (var + eps_s).sqrt().recip();
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv;
                            let dxh = grow[j] * gad[j];
                            m1 += dxh;
                            m2 += dxh * xh;
                            dgamma[j] += grow[j] * xh;
                            dbeta[j] += grow[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv;
                            let dxh = grow[j] * gad[j];
                            dx[r * d + j] = inv * (dxh - m1 - xh * m2);
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                    acc(&mut grads, *gamma, Tensor::from_vec(&[d], dgamma)?);
                    acc(&mut grads, *beta, Tensor::from_vec(&[d], dbeta)?);
                }
                Op::MaskedSoftmax { x, mask } => {
                    let y = &self.nodes[i].value;
                    let n = mask.len();
                    let rows = y.numel() / n;
                    let yd = y.data();
                    let gr = g.data();
                    let mut dx = vec![S::zero(); y.numel()];
                    for r in 0..rows {
                        let mut s = S::zero();
                        for j in 0..n {
                            s += gr[r * n + j] * yd[r * n + j];
                        }
                        for j in 0..n {
                            if mask[j] {
                                dx[r * n + j] = yd[r * n + j] * (gr[r * n + j] - s);
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(y.shape(), dx)?);
                }
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) =
                        k::conv2d_3x3_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = vec![S::zero(); xv.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g.data()[o];
                    }
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                Op::Upsample { x } => {
                    let xv = self.value(*x);
                    let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
                    let (ho, wo) = (2 * h, 2 * w);
                    let gd = g.data();
                    let mut dx = vec![S::zero(); xv.numel()];
                    for ch in 0..c {
                        for oi in 0..ho {
                            let grow = &gd[ch * ho * wo + oi * wo..ch * ho * wo + (oi + 1) * wo];
                            let drow = &mut dx[ch * h * w + (oi / 2) * w
                                ..ch * h * w + (oi / 2) * w + w];
                            for (oj, &gv) in grow.iter().enumerate() {
                                drow[oj / 2] += gv;
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                Op::CrossEntropyMean { logits, labels, ignore } => {
                    let dl = k::cross_entropy_backward(
                        self.value(*logits),
                        labels,
                        *ignore,
                        g.item()?,
                    );
                    acc(&mut grads, *logits, dl);
                }
                Op::FakeQuant { x, spec } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if spec.in_range(v) { gv } else { S::zero() })
                        .collect();
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), data)?);
                }
                Op::SliceCols { x, c0, c1 } => {
                    let xv = self.value(*x);
                    let (r, c) = (xv.dim(0), xv.dim(1));
                    let w = c1 - c0;
                    let mut dx = vec![S::zero(); r * c];
                    for i2 in 0..r {
                        dx[i2 * c + c0..i2 * c + c1]
                            .copy_from_slice(&g.data()[i2 * w..(i2 + 1) * w]);
                    }
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                Op::ConcatCols { parts } => {
                    let total = self.nodes[i].value.dim(1);
                    let r = self.nodes[i].value.dim(0);
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).dim(1);
                        let mut dp = vec![S::zero(); r * w];
                        for i2 in 0..r {
                            dp[i2 * w..(i2 + 1) * w].copy_from_slice(
                                &g.data()[i2 * total + off..i2 * total + off + w],
                            );
                        }
                        acc(&mut grads, p, Tensor::from_vec(&[r, w], dp)?);
                        off += w;
                    }
                }
                Op::ZeroRows { x, keep } => {
                    let xv = self.value(*x);
                    let c = xv.dim(1);
                    let mut dx = g.data().to_vec();
                    for (i2, &kf) in keep.iter().enumerate() {
                        if !kf {
                            dx[i2 * c..(i2 + 1) * c].fill(S::zero());
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                Op::SumAll { x } => {
                    let xv = self.value(*x);
                    acc(&mut grads, *x, Tensor::full(xv.shape(), g.item()?));
                }
                Op::BandMulMean { bands, feats, divisor } => {
                    let (dbands, dfeats) = k::band_mul_mean_backward(
                        self.value(*bands),
                        self.value(*feats),
                        *divisor,
                        &g,
                    );
                    acc(&mut grads, *bands, dbands);
                    acc(&mut grads, *feats, dfeats);
                }
                Op::BandEmbedMean { bands, feats, alpha, beta, gamma, valid, divisor } => {
                    let (dbands, dfeats, da, db, dg) = k::band_embed_mean_backward(
                        self.value(*bands),
                        self.value(*feats),
                        self.value(*alpha),
                        self.value(*beta),
                        self.value(*gamma),
                        valid,
                        *divisor,
                        &g,
                    );
                    acc(&mut grads, *bands, dbands);
                    acc(&mut grads, *feats, dfeats);
                    acc(&mut grads, *alpha, da);
                    acc(&mut grads, *beta, db);
                    acc(&mut grads, *gamma, dg);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
