//! Seeded synthetic cloud-masking task for desk-scale training runs.
//!
//! Each tile starts from a coarse Gaussian field, bilinearly upsampled to
//! full resolution, acting as a smooth "cloudiness" latent. Labels come from
//! two fixed thresholds on the latent (Clear / Thin / Thick), a small random
//! fraction of pixels is marked ignore, and every band renders the latent
//! through its own affine response plus pixel noise. Any single band is
//! informative about the class, but the value-to-class mapping depends on
//! the band's gain and offset, so a model has to combine reflectance with
//! band identity, which is exactly what the spectral encoder provides.

use crate::descriptor::BandSpec;
use crate::error::Result;
use crate::io::TileSample;
use crate::metrics::IGNORE_LABEL;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub n_tiles: usize,
    pub tile: usize,
    /// Edge length of the coarse latent grid before upsampling.
    pub coarse: usize,
    pub ignore_frac: f64,
    /// Per-pixel reflectance noise sigma.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_tiles: 24,
            tile: 64,
            coarse: 5,
            ignore_frac: 0.01,
            noise: 0.005,
            seed: 7,
        }
    }
}

/// Latent thresholds separating Clear / Thin / Thick.
const THIN_AT: f64 = -0.1;
const THICK_AT: f64 = 0.55;

/// Five Sentinel-2-style VNIR bands (blue, green, red, NIR, red edge).
pub fn sentinel_vnir_specs() -> Vec<BandSpec> {
    [
        (458.0, 523.0),
        (543.0, 578.0),
        (650.0, 680.0),
        (785.0, 900.0),
        (698.0, 713.0),
    ]
    .iter()
    .map(|&(a, b)| BandSpec::new(a, b).expect("fixed VNIR ranges are valid"))
    .collect()
}

/// Per-band affine response to the cloudiness signal. Gains stay well above
/// zero so every band separates the classes on its own.
fn band_response(b: usize) -> (f64, f64) {
    let gain = 0.55 + 0.09 * b as f64;
    let offset = 0.05 + 0.04 * b as f64;
    (gain, offset)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; fresh pair per call keeps the stream simple to reason about
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Bilinear upsample of a coarse x coarse grid to size x size, sampling cell
/// centers (align-corners false), clamped at the edges.
fn upsample_bilinear(coarse: &[f64], n: usize, size: usize) -> Vec<f64> {
    let scale = size as f64 / n as f64;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let sy = ((r as f64 + 0.5) / scale - 0.5).clamp(0.0, (n - 1) as f64);
            let sx = ((c as f64 + 0.5) / scale - 0.5).clamp(0.0, (n - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let top = coarse[y0 * n + x0] * (1.0 - fx) + coarse[y0 * n + x1] * fx;
            let bot = coarse[y1 * n + x0] * (1.0 - fx) + coarse[y1 * n + x1] * fx;
            out[r * size + c] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Monotone cloudiness-to-brightness map with a soft step at each class
/// threshold: classes separate cleanly in value while the map stays
/// invertible, mirroring how thick clouds read far brighter than haze.
fn brightness(z: f64) -> f64 {
    0.5 * (sigmoid(2.5 * (z - THIN_AT)) + sigmoid(2.5 * (z - THICK_AT)))
}

fn generate_tile(rng: &mut ChaCha8Rng, config: &SyntheticConfig) -> Result<TileSample> {
    let size = config.tile;
    let coarse: Vec<f64> = (0..config.coarse * config.coarse).map(|_| gaussian(rng)).collect();
    let latent = upsample_bilinear(&coarse, config.coarse, size);

    let mut mask = Vec::with_capacity(size * size);
    for &z in &latent {
        let label = if z < THIN_AT {
            0u8
        } else if z < THICK_AT {
            2
        } else {
            1
        };
        mask.push(if rng.gen_bool(config.ignore_frac) { IGNORE_LABEL } else { label });
    }

    let specs = sentinel_vnir_specs();
    let n_bands = specs.len();
    let mut bands = vec![0.0f32; n_bands * size * size];
    for b in 0..n_bands {
        let (gain, offset) = band_response(b);
        for (p, &z) in latent.iter().enumerate() {
            let v = offset + gain * brightness(z) + config.noise * gaussian(rng);
            bands[b * size * size + p] = v.clamp(0.0, 1.3) as f32;
        }
    }
    TileSample::new(
        crate::tensor::Tensor::from_vec(&[n_bands, size, size], bands)?,
        specs,
        Some(mask),
    )
}

/// Deterministic dataset for the given config; the same seed always yields
/// bit-identical tiles.
pub fn generate_dataset(config: &SyntheticConfig) -> Result<Vec<TileSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_tiles).map(|_| generate_tile(&mut rng, config)).collect()
}
