//! Forward and backward kernels as plain functions over tensors.
//!
//! Everything here is single-threaded and allocation-per-call. The loops are
//! arranged so the innermost dimension is contiguous; that is what makes the
//! dev-profile test suite and the benchmark numbers usable without pulling in
//! a BLAS dependency.

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Scalar, Tensor};

fn as_2d<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected rank 2, got {other:?}"))),
    }
}

fn as_3d<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(op, format!("expected rank 3, got {other:?}"))),
    }
}

/// `a[m×k] · b[k×n]`, ikj loop order.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = as_2d("matmul", a)?;
    let (kb, n) = as_2d("matmul", b)?;
    if k != kb {
        return Err(Error::shape("matmul", format!("inner dims {k} vs {kb}")));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

pub fn transpose<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = as_2d("transpose", x)?;
    let xd = x.data();
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.max(S::zero()))
}

/// Normalizes over the last dimension with population variance, then applies
/// the affine pair. `x` may have any rank; `gamma`/`beta` are 1-D of length
/// equal to the last dim.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let d = *x.shape().last().expect("non-empty shape");
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma {:?} / beta {:?} vs last dim {d}", gamma.shape(), beta.shape()),
        ));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid("layer_norm", format!("eps {eps} must be positive finite")));
    }
    let rows = x.numel() / d;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let eps = S::from_f64(eps);
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut out = vec![S::zero(); x.numel()];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let orow = &mut out[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let inv = (var + eps).sqrt().recip();
        for j in 0..d {
            orow[j] = (row[j] - mean) * inv * gd[j] + bd[j];
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Softmax over the last dimension with a shared boolean mask. Masked
/// positions come out exactly 0.0 and take no part in the max/denominator.
pub fn masked_softmax<S: Scalar>(x: &Tensor<S>, mask: &[bool]) -> Result<Tensor<S>> {
    let n = *x.shape().last().expect("non-empty shape");
    if mask.len() != n {
        return Err(Error::shape(
            "masked_softmax",
            format!("mask len {} vs last dim {n}", mask.len()),
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    let rows = x.numel() / n;
    let xd = x.data();
    let mut out = vec![S::zero(); x.numel()];
    for r in 0..rows {
        let row = &xd[r * n..(r + 1) * n];
        let orow = &mut out[r * n..(r + 1) * n];
        let mut max = S::neg_infinity();
        for j in 0..n {
            if mask[j] && row[j] > max {
                max = row[j];
            }
        }
        let mut denom = S::zero();
        for j in 0..n {
            if mask[j] {
                let e = (row[j] - max).exp();
                orow[j] = e;
                denom += e;
            }
        }
        for (j, o) in orow.iter_mut().enumerate() {
            if mask[j] {
                *o = *o / denom;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// 3x3 convolution with zero padding, stride 1, same output size.
/// `x`: [Cin,H,W], `w`: [Cout,Cin,3,3], `b`: [Cout].
pub fn conv2d_3x3_same<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (cin, h, wd) = as_3d("conv2d_3x3_same", x)?;
    let (cout, wcin) = match w.shape() {
        [co, ci, 3, 3] => (*co, *ci),
        other => {
            return Err(Error::shape("conv2d_3x3_same", format!("weights {other:?}")));
        }
    };
    if wcin != cin || b.shape() != [cout] {
        return Err(Error::shape(
            "conv2d_3x3_same",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let xd = x.data();
    let wdall = w.data();
    let bd = b.data();
    let plane = h * wd;
    let mut out = vec![S::zero(); cout * plane];
    for co in 0..cout {
        let op = &mut out[co * plane..(co + 1) * plane];
        op.fill(bd[co]);
        for ci in 0..cin {
            let xp = &xd[ci * plane..(ci + 1) * plane];
            let wbase = (co * cin + ci) * 9;
            for kh in 0..3usize {
                let dy = kh as isize - 1;
                let r0 = (-dy).max(0) as usize;
                let r1 = ((h as isize - dy).min(h as isize)) as usize;
                for kw in 0..3usize {
                    let dx = kw as isize - 1;
                    let wv = wdall[wbase + kh * 3 + kw];
                    if wv == S::zero() {
                        continue;
                    }
                    let c0 = (-dx).max(0) as usize;
                    let c1 = ((wd as isize - dx).min(wd as isize)) as usize;
                    if c0 >= c1 {
                        continue;
                    }
                    for r in r0..r1 {
                        let src = (r as isize + dy) as usize * wd;
                        let srow = &xp[(src as isize + c0 as isize + dx) as usize
                            ..(src as isize + c1 as isize - 1 + dx) as usize + 1];
                        let drow = &mut op[r * wd + c0..r * wd + c1];
                        for (o, &v) in drow.iter_mut().zip(srow) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[cout, h, wd], out)
}

/// Backward of [`conv2d_3x3_same`]: gradients for input, weights, bias.
pub(crate) fn conv2d_3x3_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let cout = w.dim(0);
    let plane = h * wd;
    let xd = x.data();
    let wdall = w.data();
    let gd = g.data();
    let mut dx = vec![S::zero(); cin * plane];
    let mut dw = vec![S::zero(); cout * cin * 9];
    let mut db = vec![S::zero(); cout];
    for co in 0..cout {
        let gp = &gd[co * plane..(co + 1) * plane];
        db[co] = gp.iter().copied().sum::<S>();
        for ci in 0..cin {
            let xp = &xd[ci * plane..(ci + 1) * plane];
            let dxp = &mut dx[ci * plane..(ci + 1) * plane];
            let wbase = (co * cin + ci) * 9;
            for kh in 0..3usize {
                let dy = kh as isize - 1;
                let r0 = (-dy).max(0) as usize;
                let r1 = ((h as isize - dy).min(h as isize)) as usize;
                for kw in 0..3usize {
                    let dx_off = kw as isize - 1;
                    let c0 = (-dx_off).max(0) as usize;
                    let c1 = ((wd as isize - dx_off).min(wd as isize)) as usize;
                    if c0 >= c1 || r0 >= r1 {
                        continue;
                    }
                    let wv = wdall[wbase + kh * 3 + kw];
                    let mut wacc = S::zero();
                    for r in r0..r1 {
                        let src0 = ((r as isize + dy) as usize * wd) as isize;
                        let xs = (src0 + c0 as isize + dx_off) as usize;
                        let xe = (src0 + c1 as isize - 1 + dx_off) as usize + 1;
                        let xrow = &xp[xs..xe];
                        let grow = &gp[r * wd + c0..r * wd + c1];
                        // dw accumulates x·g over the valid window; dx scatters
                        // g back through the same shift.
                        let mut dot = S::zero();
                        for (&xv, &gv) in xrow.iter().zip(grow) {
                            dot += xv * gv;
                        }
                        wacc += dot;
                        if wv != S::zero() {
                            let dxrow = &mut dxp[xs..xe];
                            for (o, &gv) in dxrow.iter_mut().zip(grow) {
                                *o += wv * gv;
                            }
                        }
                    }
                    dw[wbase + kh * 3 + kw] = wacc;
                }
            }
        }
    }
    (
        Tensor::from_vec(&[cin, h, wd], dx).expect("shape fixed"),
        Tensor::from_vec(&[cout, cin, 3, 3], dw).expect("shape fixed"),
        Tensor::from_vec(&[cout], db).expect("shape fixed"),
    )
}

/// 2x2 max pooling, stride 2. Requires even spatial dims. Also returns the
/// flat input index of each selected maximum (first win on ties) so the
/// backward pass can scatter.
pub(crate) fn maxpool_2x2_with_argmax<S: Scalar>(
    x: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let (c, h, w) = as_3d("maxpool_2x2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool_2x2", format!("odd spatial dims {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![S::zero(); c * ho * wo];
    let mut arg = vec![0usize; c * ho * wo];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let i0 = base + (2 * i) * w + 2 * j;
                let i1 = i0 + 1;
                let i2 = i0 + w;
                let i3 = i2 + 1;
                let mut best = i0;
                for cand in [i1, i2, i3] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                let o = (ch * ho + i) * wo + j;
                out[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    Ok((Tensor::from_vec(&[c, ho, wo], out)?, arg))
}

pub fn maxpool_2x2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(maxpool_2x2_with_argmax(x)?.0)
}

/// Nearest-neighbor 2x upsampling: each input pixel becomes a 2x2 block.
pub fn upsample_nearest_2x<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = as_3d("upsample_nearest_2x", x)?;
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![S::zero(); c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            let src = &xd[ch * h * w + (i / 2) * w..ch * h * w + (i / 2) * w + w];
            let dst = &mut out[ch * ho * wo + i * wo..ch * ho * wo + i * wo + wo];
            for j in 0..wo {
                dst[j] = src[j / 2];
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out)
}

/// Mean cross-entropy over pixels whose label differs from `ignore`.
/// `logits`: [K,H,W] with K >= 2; `labels`: H*W entries, each < K or == ignore.
pub fn cross_entropy_mean<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u8],
    ignore: u8,
) -> Result<S> {
    let (k, h, w) = as_3d("cross_entropy_mean", logits)?;
    if k < 2 {
        return Err(Error::shape("cross_entropy_mean", format!("need >= 2 classes, got {k}")));
    }
    if k > ignore as usize {
        return Err(Error::invalid(
            "cross_entropy_mean",
            format!("class count {k} collides with ignore label {ignore}"),
        ));
    }
    let plane = h * w;
    if labels.len() != plane {
        return Err(Error::shape(
            "cross_entropy_mean",
            format!("{} labels for {plane} pixels", labels.len()),
        ));
    }
    let ld = logits.data();
    let mut total = S::zero();
    let mut count = 0usize;
    for p in 0..plane {
        let y = labels[p];
        if y == ignore {
            continue;
        }
        if y as usize >= k {
            return Err(Error::invalid(
                "cross_entropy_mean",
                format!("label {y} out of range for {k} classes"),
            ));
        }
        let mut max = ld[p];
        for c in 1..k {
            max = max.max(ld[c * plane + p]);
        }
        let mut denom = S::zero();
        for c in 0..k {
            denom += (ld[c * plane + p] - max).exp();
        }
        total += denom.ln() + max - ld[y as usize * plane + p];
        count += 1;
    }
    if count == 0 {
        return Err(Error::AllIgnored);
    }
    let loss = total / S::from_f64(count as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy_mean" });
    }
    Ok(loss)
}

/// Backward of [`cross_entropy_mean`]: (softmax - onehot) / count per
/// contributing pixel, scaled by the incoming scalar gradient.
pub(crate) fn cross_entropy_backward<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u8],
    ignore: u8,
    gscale: S,
) -> Tensor<S> {
    let (k, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2));
    let plane = h * w;
    let ld = logits.data();
    let count = labels.iter().filter(|&&y| y != ignore).count();
    let inv = gscale / S::from_f64(count as f64);
    let mut dl = vec![S::zero(); k * plane];
    for p in 0..plane {
        let y = labels[p];
        if y == ignore {
            continue;
        }
        let mut max = ld[p];
        for c in 1..k {
            max = max.max(ld[c * plane + p]);
        }
        let mut denom = S::zero();
        for c in 0..k {
            denom += (ld[c * plane + p] - max).exp();
        }
        for c in 0..k {
            let sm = (ld[c * plane + p] - max).exp() / denom;
            let onehot = if c == y as usize { S::one() } else { S::zero() };
            dl[c * plane + p] = (sm - onehot) * inv;
        }
    }
    Tensor::from_vec(logits.shape(), dl).expect("shape fixed")
}

/// Fused output head: `out[c,p] = sum_b (bands[b,p] + 0.5) * feats[b,c] / divisor`.
/// Padding bands hold the constant -0.5, so they contribute exactly zero and
/// need no explicit exclusion here; the divisor carries the padding policy.
pub(crate) fn band_mul_mean<S: Scalar>(
    bands: &Tensor<S>,
    feats: &Tensor<S>,
    divisor: f64,
) -> Result<Tensor<S>> {
    let (b, h, w) = as_3d("band_multiply_mean", bands)?;
    let (bf, c) = as_2d("band_multiply_mean", feats)?;
    if b != bf {
        return Err(Error::shape("band_multiply_mean", format!("{b} bands vs {bf} feature rows")));
    }
    if !(divisor > 0.0) {
        return Err(Error::invalid("band_multiply_mean", format!("divisor {divisor}")));
    }
    let plane = h * w;
    let bd = bands.data();
    let fd = feats.data();
    let inv = S::from_f64(1.0 / divisor);
    let half = S::from_f64(0.5);
    let mut out = vec![S::zero(); c * plane];
    for band in 0..b {
        let bp = &bd[band * plane..(band + 1) * plane];
        for ch in 0..c {
            let fv = fd[band * c + ch] * inv;
            if fv == S::zero() {
                continue;
            }
            let op = &mut out[ch * plane..(ch + 1) * plane];
            for (o, &v) in op.iter_mut().zip(bp) {
                *o += (v + half) * fv;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

pub(crate) fn band_mul_mean_backward<S: Scalar>(
    bands: &Tensor<S>,
    feats: &Tensor<S>,
    divisor: f64,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (b, h, w) = (bands.dim(0), bands.dim(1), bands.dim(2));
    let c = feats.dim(1);
    let plane = h * w;
    let bd = bands.data();
    let fd = feats.data();
    let gd = g.data();
    let inv = S::from_f64(1.0 / divisor);
    let half = S::from_f64(0.5);
    let mut dbands = vec![S::zero(); b * plane];
    let mut dfeats = vec![S::zero(); b * c];
    for band in 0..b {
        let bp = &bd[band * plane..(band + 1) * plane];
        let dbp = &mut dbands[band * plane..(band + 1) * plane];
        for ch in 0..c {
            let gp = &gd[ch * plane..(ch + 1) * plane];
            let fv = fd[band * c + ch] * inv;
            let mut facc = S::zero();
            for p in 0..plane {
                dbp[p] += gp[p] * fv;
                facc += gp[p] * (bp[p] + half);
            }
            dfeats[band * c + ch] = facc * inv;
        }
    }
    (
        Tensor::from_vec(bands.shape(), dbands).expect("shape fixed"),
        Tensor::from_vec(feats.shape(), dfeats).expect("shape fixed"),
    )
}

/// Sinusoidal embedding head: for each output channel c,
/// `out[c,p] = sum_{b valid} sin(alpha[c]*bands[b,p] + beta[c]*m_b + gamma[c]) / divisor`
/// where `m_b` is the mean of band b's feature vector. Unlike the
/// multiplication head this one must skip padding bands explicitly because
/// sin of the padding constant is not zero.
pub(crate) fn band_embed_mean<S: Scalar>(
    bands: &Tensor<S>,
    feats: &Tensor<S>,
    alpha: &Tensor<S>,
    beta: &Tensor<S>,
    gamma: &Tensor<S>,
    valid: &[bool],
    divisor: f64,
) -> Result<Tensor<S>> {
    let (b, h, w) = as_3d("band_embedding", bands)?;
    let (bf, fc) = as_2d("band_embedding", feats)?;
    let c = alpha.numel();
    if b != bf || valid.len() != b {
        return Err(Error::shape(
            "band_embedding",
            format!("{b} bands, {bf} feature rows, {} validity flags", valid.len()),
        ));
    }
    if beta.numel() != c || gamma.numel() != c {
        return Err(Error::shape("band_embedding", "alpha/beta/gamma lengths differ"));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::invalid("band_embedding", "no valid bands"));
    }
    if !(divisor > 0.0) {
        return Err(Error::invalid("band_embedding", format!("divisor {divisor}")));
    }
    let plane = h * w;
    let bd = bands.data();
    let fd = feats.data();
    let inv = S::from_f64(1.0 / divisor);
    let inv_fc = S::from_f64(1.0 / fc as f64);
    let mut out = vec![S::zero(); c * plane];
    for band in 0..b {
        if !valid[band] {
            continue;
        }
        let bp = &bd[band * plane..(band + 1) * plane];
        let m = fd[band * fc..(band + 1) * fc].iter().copied().sum::<S>() * inv_fc;
        for ch in 0..c {
            let a = alpha.data()[ch];
            let phase = beta.data()[ch] * m + gamma.data()[ch];
            let op = &mut out[ch * plane..(ch + 1) * plane];
            for (o, &v) in op.iter_mut().zip(bp) {
                *o += (a * v + phase).sin() * inv;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn band_embed_mean_backward<S: Scalar>(
    bands: &Tensor<S>,
    feats: &Tensor<S>,
    alpha: &Tensor<S>,
    beta: &Tensor<S>,
    gamma: &Tensor<S>,
    valid: &[bool],
    divisor: f64,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>) {
    let (b, h, w) = (bands.dim(0), bands.dim(1), bands.dim(2));
    let fc = feats.dim(1);
    let c = alpha.numel();
    let plane = h * w;
    let bd = bands.data();
    let fd = feats.data();
    let gd = g.data();
    let inv = S::from_f64(1.0 / divisor);
    let inv_fc = S::from_f64(1.0 / fc as f64);
    let mut dbands = vec![S::zero(); b * plane];
    let mut dfeats = vec![S::zero(); b * fc];
    let mut dalpha = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    let mut dgamma = vec![S::zero(); c];
    for band in 0..b {
        if !valid[band] {
            continue;
        }
        let bp = &bd[band * plane..(band + 1) * plane];
        let dbp = &mut dbands[band * plane..(band + 1) * plane];
        let m = fd[band * fc..(band + 1) * fc].iter().copied().sum::<S>() * inv_fc;
        let mut dm = S::zero();
        for ch in 0..c {
            let a = alpha.data()[ch];
            let be = beta.data()[ch];
            let phase = be * m + gamma.data()[ch];
            let gp = &gd[ch * plane..(ch + 1) * plane];
            let mut da = S::zero();
            let mut dg = S::zero();
            for p in 0..plane {
                let cosv = (a * bp[p] + phase).cos() * inv * gp[p];
                dbp[p] += cosv * a;
                da += cosv * bp[p];
                dg += cosv;
            }
            dalpha[ch] += da;
            dbeta[ch] += dg * m;
            dgamma[ch] += dg;
            dm += dg * be;
        }
        // m_b is a mean over the feature row, so its gradient spreads evenly.
        let per = dm * inv_fc;
        for j in 0..fc {
            dfeats[band * fc + j] = per;
        }
    }
    (
        Tensor::from_vec(bands.shape(), dbands).expect("shape fixed"),
        Tensor::from_vec(feats.shape(), dfeats).expect("shape fixed"),
        Tensor::from_vec(&[c], dalpha).expect("shape fixed"),
        Tensor::from_vec(&[c], dbeta).expect("shape fixed"),
        Tensor::from_vec(&[c], dgamma).expect("shape fixed"),
    )
}

pub(crate) fn add_inplace<S: Scalar>(acc: &mut Tensor<S>, delta: &Tensor<S>) {
    debug_assert_eq!(acc.shape(), delta.shape());
    for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

pub(crate) fn elementwise_add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub(crate) fn elementwise_mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_flat_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng(11);
        let a = rand_tensor(&mut r, &[4, 6]);
        let b = rand_tensor(&mut r, &[6, 5]);
        let got = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for p in 0..6 {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((got.at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut r = rng(12);
        let a = rand_tensor(&mut r, &[3, 3]);
        let eye = Tensor::from_flat_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&a, &eye).unwrap(), a);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn transpose_round_trips() {
        let mut r = rng(13);
        let a = rand_tensor(&mut r, &[3, 7]);
        let t = transpose(&a).unwrap();
        assert_eq!(t.shape(), &[7, 3]);
        assert_eq!(transpose(&t).unwrap(), a);
        assert_eq!(t.at(&[5, 2]), a.at(&[2, 5]));
    }

    #[test]
    fn relu_clamps_negatives_only() {
        let x = Tensor::from_vec(&[4], vec![-2.0, -0.0, 0.5, 3.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut r = rng(14);
        let x = rand_tensor(&mut r, &[5, 8]);
        let gamma = Tensor::full(&[8], 1.0);
        let beta = Tensor::zeros(&[8]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for row in 0..5 {
            let vals: Vec<f64> = (0..8).map(|j| y.at(&[row, j])).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 8.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9, "row {row} mean {mean}");
            // population variance lands just below 1 because of eps
            assert!((var - 1.0).abs() < 1e-3, "row {row} var {var}");
        }
    }

    #[test]
    fn layer_norm_affine_applies_after_normalization() {
        let x = Tensor::from_vec(&[1, 2], vec![0.0f64, 2.0]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![3.0f64, 3.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![10.0f64, 10.0]).unwrap();
        let y = layer_norm(&x, &gamma, &beta, 1e-12).unwrap();
        // normalized row is (-1, 1) up to eps
        assert!((y.at(&[0, 0]) - 7.0).abs() < 1e-5);
        assert!((y.at(&[0, 1]) - 13.0).abs() < 1e-5);
    }

    #[test]
    fn masked_softmax_matches_subset_oracle() {
        let mut r = rng(15);
        let x = rand_tensor(&mut r, &[3, 6]);
        let mask = [true, false, true, true, false, true];
        let y = masked_softmax(&x, &mask).unwrap();
        for row in 0..3 {
            let mut denom = 0.0;
            let mx = (0..6)
                .filter(|&j| mask[j])
                .map(|j| x.at(&[row, j]))
                .fold(f64::NEG_INFINITY, f64::max);
            for j in 0..6 {
                if mask[j] {
                    denom += (x.at(&[row, j]) - mx).exp();
                }
            }
            let mut sum = 0.0;
            for j in 0..6 {
                if mask[j] {
                    let want = (x.at(&[row, j]) - mx).exp() / denom;
                    assert!((y.at(&[row, j]) - want).abs() < 1e-12);
                    sum += y.at(&[row, j]);
                } else {
                    assert_eq!(y.at(&[row, j]), 0.0, "masked positions must be exactly zero");
                }
            }
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_ignores_extreme_masked_logits() {
        // A huge logit under the mask must not shift the result at all.
        let a = Tensor::from_vec(&[1, 3], vec![1.0, 500.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 3], vec![1.0, -500.0, 2.0]).unwrap();
        let mask = [true, false, true];
        let ya = masked_softmax(&a, &mask).unwrap();
        let yb = masked_softmax(&b, &mask).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn masked_softmax_all_masked_is_an_error() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(masked_softmax(&x, &[false, false, false]), Err(Error::AllMasked)));
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut r = rng(16);
        let x = rand_tensor(&mut r, &[3, 6, 7]);
        let w = rand_tensor(&mut r, &[4, 3, 3, 3]);
        let b = rand_tensor(&mut r, &[4]);
        let got = conv2d_3x3_same(&x, &w, &b).unwrap();
        assert_eq!(got.shape(), &[4, 6, 7]);
        for co in 0..4 {
            for i in 0..6usize {
                for j in 0..7usize {
                    let mut acc = b.at(&[co]);
                    for ci in 0..3 {
                        for kh in 0..3usize {
                            for kw in 0..3usize {
                                let ii = i as isize + kh as isize - 1;
                                let jj = j as isize + kw as isize - 1;
                                if ii >= 0 && ii < 6 && jj >= 0 && jj < 7 {
                                    acc += x.at(&[ci, ii as usize, jj as usize])
                                        * w.at(&[co, ci, kh, kw]);
                                }
                            }
                        }
                    }
                    let diff = (got.at(&[co, i, j]) - acc).abs();
                    assert!(diff < 1e-12, "mismatch at {co},{i},{j}: {diff}");
                }
            }
        }
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut r = rng(17);
        let x = rand_tensor(&mut r, &[1, 5, 5]);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center tap
        let b = Tensor::zeros(&[1]);
        let y = conv2d_3x3_same(&x, &w, &b).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_border_uses_zero_padding() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_3x3_same(&x, &w, &b).unwrap();
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn maxpool_picks_block_maxima_first_on_ties() {
        let x = Tensor::from_vec(
            &[1, 2, 4],
            vec![
                1.0, 3.0, 5.0, 5.0, //
                2.0, 0.0, 4.0, 1.0,
            ],
        )
        .unwrap();
        let (y, arg) = maxpool_2x2_with_argmax(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[3.0, 5.0]);
        assert_eq!(arg, vec![1, 2], "tie in second block resolves to first scan position");
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4]);
        assert!(maxpool_2x2(&x).is_err());
    }

    #[test]
    fn upsample_replicates_2x2_blocks() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest_2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(
            y.data(),
            &[
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ]
        );
    }

    #[test]
    fn maxpool_then_upsample_preserves_shape() {
        let mut r = rng(18);
        let x = rand_tensor(&mut r, &[2, 8, 6]);
        let y = upsample_nearest_2x(&maxpool_2x2(&x).unwrap()).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Two pixels, two classes; third pixel ignored.
        let logits = Tensor::from_vec(&[2, 1, 3], vec![2.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = [0u8, 1, 255];
        let got = cross_entropy_mean(&logits, &labels, 255).unwrap();
        let l0 = -(2.0f64.exp() / (2.0f64.exp() + 1.0)).ln();
        let l1 = -0.5f64.ln();
        assert!((got - (l0 + l1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros(&[3, 2, 2]);
        let labels = [0u8, 1, 2, 0];
        let got = cross_entropy_mean(&logits, &labels, 255).unwrap();
        assert!((got - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let mut r = rng(19);
        let logits = rand_tensor(&mut r, &[3, 2, 2]);
        let shifted = logits.map(|v| v + 100.0);
        let labels = [0u8, 1, 2, 255];
        let a = cross_entropy_mean(&logits, &labels, 255).unwrap();
        let b = cross_entropy_mean(&shifted, &labels, 255).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_all_ignored_is_an_error() {
        let logits = Tensor::<f64>::zeros(&[2, 1, 2]);
        assert!(matches!(
            cross_entropy_mean(&logits, &[255, 255], 255),
            Err(Error::AllIgnored)
        ));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_labels() {
        let logits = Tensor::<f64>::zeros(&[2, 1, 2]);
        assert!(cross_entropy_mean(&logits, &[0, 7], 255).is_err());
    }

    #[test]
    fn band_mul_padding_rows_contribute_nothing() {
        let mut r = rng(20);
        let real = rand_tensor(&mut r, &[2, 4, 4]);
        let feats = rand_tensor(&mut r, &[3, 5]);
        let mut padded = Tensor::full(&[3, 4, 4], -0.5);
        padded.data_mut()[..32].copy_from_slice(&real.data()[..32]);
        let out = band_mul_mean(&padded, &feats, 2.0).unwrap();
        // Oracle over the two real bands only.
        for c in 0..5 {
            for p in 0..16 {
                let mut acc = 0.0;
                for b in 0..2 {
                    acc += (real.data()[b * 16 + p] + 0.5) * feats.at(&[b, c]);
                }
                assert!((out.data()[c * 16 + p] - acc / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn band_embed_skips_invalid_rows() {
        let mut r = rng(21);
        let bands = rand_tensor(&mut r, &[3, 2, 2]);
        let feats = rand_tensor(&mut r, &[3, 4]);
        let alpha = rand_tensor(&mut r, &[2]);
        let beta = rand_tensor(&mut r, &[2]);
        let gamma = rand_tensor(&mut r, &[2]);
        let valid = [true, false, true];
        let out = band_embed_mean(&bands, &feats, &alpha, &beta, &gamma, &valid, 2.0).unwrap();
        for c in 0..2 {
            for p in 0..4 {
                let mut acc = 0.0;
                for b in [0usize, 2] {
                    let m: f64 = (0..4).map(|j| feats.at(&[b, j])).sum::<f64>() / 4.0;
                    acc += (alpha.at(&[c]) * bands.data()[b * 4 + p]
                        + beta.at(&[c]) * m
                        + gamma.at(&[c]))
                    .sin();
                }
                assert!((out.data()[c * 4 + p] - acc / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn band_embed_zero_frequency_gives_constant_map() {
        let mut r = rng(22);
        let bands = rand_tensor(&mut r, &[1, 3, 3]);
        let feats = Tensor::full(&[1, 4], 0.25);
        let alpha = Tensor::zeros(&[2]);
        let beta = Tensor::zeros(&[2]);
        let gamma = Tensor::from_vec(&[2], vec![0.5, 1.2]).unwrap();
        let out =
            band_embed_mean(&bands, &feats, &alpha, &beta, &gamma, &[true], 1.0).unwrap();
        for c in 0..2 {
            let want = gamma.at(&[c]).sin();
            for p in 0..9 {
                assert!((out.data()[c * 9 + p] - want).abs() < 1e-12);
            }
        }
    }
}
