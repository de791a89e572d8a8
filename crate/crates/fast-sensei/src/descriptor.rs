//! Per-band spectral descriptors.
//!
//! Each band is summarized by a fixed-length vector: sinusoidal encodings of
//! its minimum and maximum wavelengths plus reflectance statistics of the
//! tile. With the default 32-dim encoding and four summary statistics the
//! descriptor has 36 entries. Two encoding layouts are supported:
//!
//! * `FastSensei`: shift normalization (lambda - 400) and the standard
//!   transformer layout where each sin/cos pair shares one frequency,
//!   `y_j = norm / 10000^(2j/D)` for j in 0..D/2.
//! * `SenseiV2`: log normalization `log10(lambda - 300) - 2` and a layout
//!   where every position gets its own denominator,
//!   `x_i = norm / 10000^(2i/D)` for i in 0..D, alternating sin/cos. Pairs
//!   do not share a frequency, and the log compression leaves most
//!   dimensions nearly constant over the VNIR range.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sanity window for band wavelengths, in nanometers.
pub const LAMBDA_WINDOW_NM: (f64, f64) = (300.0, 20000.0);

/// Default total width of the wavelength encoding block (both wavelengths).
pub const DEFAULT_ENC_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandSpec {
    lambda_min_nm: f64,
    lambda_max_nm: f64,
}

impl BandSpec {
    pub fn new(lambda_min_nm: f64, lambda_max_nm: f64) -> Result<Self> {
        let (lo, hi) = LAMBDA_WINDOW_NM;
        if !lambda_min_nm.is_finite() || !lambda_max_nm.is_finite() {
            return Err(Error::invalid("BandSpec", "non-finite wavelength"));
        }
        if lambda_min_nm > lambda_max_nm {
            return Err(Error::invalid(
                "BandSpec",
                format!("min {lambda_min_nm} nm > max {lambda_max_nm} nm"),
            ));
        }
        if lambda_min_nm <= lo || lambda_max_nm >= hi {
            return Err(Error::invalid(
                "BandSpec",
                format!("wavelengths [{lambda_min_nm}, {lambda_max_nm}] outside ({lo}, {hi}) nm"),
            ));
        }
        Ok(BandSpec { lambda_min_nm, lambda_max_nm })
    }

    pub fn lambda_min_nm(&self) -> f64 {
        self.lambda_min_nm
    }

    pub fn lambda_max_nm(&self) -> f64 {
        self.lambda_max_nm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingVariant {
    FastSensei,
    SenseiV2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsVariant {
    /// (min, max, mean, population std)
    FourSummary,
    /// (p1, p10, p50, p90, p99), linear interpolation between closest ranks.
    FivePercentile,
}

impl StatsVariant {
    pub fn len(&self) -> usize {
        match self {
            StatsVariant::FourSummary => 4,
            StatsVariant::FivePercentile => 5,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn normalize_wavelength(lambda_nm: f64, variant: EncodingVariant) -> Result<f64> {
    if !lambda_nm.is_finite() || lambda_nm <= 0.0 {
        return Err(Error::invalid("normalize_wavelength", format!("lambda {lambda_nm} nm")));
    }
    match variant {
        EncodingVariant::FastSensei => Ok(lambda_nm - 400.0),
        EncodingVariant::SenseiV2 => {
            if lambda_nm <= 300.0 {
                return Err(Error::invalid(
                    "normalize_wavelength",
                    format!("lambda {lambda_nm} nm <= 300 under log normalization"),
                ));
            }
            Ok((lambda_nm - 300.0).log10() - 2.0)
        }
    }
}

/// Sinusoidal encoding of one wavelength into `d` values.
pub fn spectral_encode(lambda_nm: f64, d: usize, variant: EncodingVariant) -> Result<Vec<f64>> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::invalid("spectral_encode", format!("dim {d} must be even and >= 2")));
    }
    let norm = normalize_wavelength(lambda_nm, variant)?;
    let mut out = vec![0.0; d];
    match variant {
        EncodingVariant::FastSensei => {
            for j in 0..d / 2 {
                let y = norm / 10000f64.powf(2.0 * j as f64 / d as f64);
                out[2 * j] = y.sin();
                out[2 * j + 1] = y.cos();
            }
        }
        EncodingVariant::SenseiV2 => {
            for (i, o) in out.iter_mut().enumerate() {
                let x = norm / 10000f64.powf(2.0 * i as f64 / d as f64);
                *o = if i % 2 == 0 { x.sin() } else { x.cos() };
            }
        }
    }
    Ok(out)
}

/// Tile-level reflectance statistics of one band, in the variant's order.
pub fn band_statistics<S: Scalar>(band: &Tensor<S>, variant: StatsVariant) -> Result<Vec<f64>> {
    if !band.all_finite() {
        return Err(Error::NonFinite { op: "band_statistics" });
    }
    let vals: Vec<f64> = band.data().iter().map(|&v| Scalar::to_f64(v)).collect();
    let n = vals.len() as f64;
    match variant {
        StatsVariant::FourSummary => {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for &v in &vals {
                min = min.min(v);
                max = max.max(v);
                sum += v;
            }
            let mean = sum / n;
            let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Ok(vec![min, max, mean, var.sqrt()])
        }
        StatsVariant::FivePercentile => {
            let mut sorted = vals;
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
            let pct = |p: f64| -> f64 {
                let rank = p / 100.0 * (sorted.len() - 1) as f64;
                let lo = rank.floor() as usize;
                let frac = rank - lo as f64;
                if lo + 1 < sorted.len() {
                    sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
                } else {
                    sorted[lo]
                }
            };
            Ok([1.0, 10.0, 50.0, 90.0, 99.0].iter().map(|&p| pct(p)).collect())
        }
    }
}

/// Full per-band descriptor: [enc(lambda_min), enc(lambda_max), statistics].
#[derive(Clone, Debug, PartialEq)]
pub struct BandDescriptor {
    values: Vec<f64>,
}

impl BandDescriptor {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_enc_dim(d_enc: usize) -> Result<()> {
    // Each wavelength gets d_enc/2 values, which must itself be even.
    if d_enc < 4 || d_enc % 4 != 0 {
        return Err(Error::invalid(
            "build_descriptor",
            format!("encoding width {d_enc} must be a positive multiple of 4"),
        ));
    }
    Ok(())
}

pub fn build_descriptor<S: Scalar>(
    spec: &BandSpec,
    band: &Tensor<S>,
    d_enc: usize,
    encoding: EncodingVariant,
    stats: StatsVariant,
) -> Result<BandDescriptor> {
    check_enc_dim(d_enc)?;
    let mut values = spectral_encode(spec.lambda_min_nm(), d_enc / 2, encoding)?;
    values.extend(spectral_encode(spec.lambda_max_nm(), d_enc / 2, encoding)?);
    values.extend(band_statistics(band, stats)?);
    debug_assert!(values[..d_enc].iter().all(|v| (-1.0..=1.0).contains(v)));
    Ok(BandDescriptor { values })
}

/// Descriptors for a padded band stack. `bands` is [Bmax, H, W] where the
/// first `specs.len()` planes are real bands and the rest hold the padding
/// constant -0.5. Padding rows get all-zero descriptors and validity false;
/// any constant would do because every consumer either masks them (levels 2
/// and 3) or is deliberately exposed to them (level 1).
pub fn build_descriptor_batch<S: Scalar>(
    specs: &[BandSpec],
    bands: &Tensor<S>,
    d_enc: usize,
    encoding: EncodingVariant,
    stats: StatsVariant,
) -> Result<(Tensor<S>, Vec<bool>)> {
    check_enc_dim(d_enc)?;
    let (bmax, h, w) = match bands.shape() {
        [b, h, w] => (*b, *h, *w),
        other => {
            return Err(Error::shape("build_descriptor_batch", format!("bands {other:?}")))
        }
    };
    let n_real = specs.len();
    if n_real == 0 || n_real > bmax {
        return Err(Error::invalid(
            "build_descriptor_batch",
            format!("{n_real} band specs for {bmax} planes"),
        ));
    }
    let ddim = d_enc + stats.len();
    let plane = h * w;
    let mut out = vec![S::zero(); bmax * ddim];
    let mut validity = vec![false; bmax];
    for (i, spec) in specs.iter().enumerate() {
        let band = Tensor::from_vec(&[h, w], bands.data()[i * plane..(i + 1) * plane].to_vec())?;
        let desc = build_descriptor(spec, &band, d_enc, encoding, stats)?;
        for (j, &v) in desc.values().iter().enumerate() {
            out[i * ddim + j] = S::from_f64(v);
        }
        validity[i] = true;
    }
    Ok((Tensor::from_vec(&[bmax, ddim], out)?, validity))
}
