//! Encoder throughput harness.
//!
//! Timings cover the spectral encoder alone: it is the part whose cost
//! moves with the architecture variants, and the segmentation head is
//! common to all of them. Inputs are seeded, kernels are single-threaded,
//! and the report carries the median over a fixed iteration count after
//! warmup. Medians on an otherwise idle machine replicate within about
//! 15%; the ratio checks in the test suite use wide margins on top of
//! that.

use crate::descriptor::BandSpec;
use crate::encoder::{encoder_forward, init_encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

pub const MIN_ITERS: usize = 10;
pub const MIN_WARMUP: usize = 3;
pub const DEFAULT_TILE: usize = 512;

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub variant: String,
    pub bands: usize,
    pub h: usize,
    pub w: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub fps: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Peak resident set of the process, when the platform exposes it.
    pub peak_rss_mb: Option<f64>,
}

impl BenchReport {
    pub fn text(&self) -> String {
        let rss = match self.peak_rss_mb {
            Some(mb) => format!("{mb:.1} MB peak rss"),
            None => "peak rss unavailable".to_string(),
        };
        format!(
            "{} | {} band(s) {}x{} | median {:.3} ms ({:.2} fps, min {:.3}, max {:.3}) over {} iters after {} warmup | {}",
            self.variant,
            self.bands,
            self.h,
            self.w,
            self.median_ms,
            self.fps,
            self.min_ms,
            self.max_ms,
            self.iterations,
            self.warmup,
            rss
        )
    }

    pub fn json_line(&self) -> String {
        let rss = match self.peak_rss_mb {
            Some(mb) => format!("{mb:.3}"),
            None => "null".to_string(),
        };
        format!(
            "{{\"variant\":\"{}\",\"bands\":{},\"h\":{},\"w\":{},\"iterations\":{},\"warmup\":{},\"median_ms\":{:.6},\"fps\":{:.6},\"min_ms\":{:.6},\"max_ms\":{:.6},\"peak_rss_mb\":{}}}",
            self.variant,
            self.bands,
            self.h,
            self.w,
            self.iterations,
            self.warmup,
            self.median_ms,
            self.fps,
            self.min_ms,
            self.max_ms,
            rss
        )
    }
}

pub fn variant_names() -> &'static [&'static str] {
    &["fast", "band-embedding", "out32", "orig-size", "v2-encoding"]
}

pub fn variant_config(name: &str) -> Result<EncoderConfig> {
    match name {
        "fast" => Ok(EncoderConfig::default()),
        "band-embedding" => Ok(EncoderConfig::band_embedding()),
        "out32" => Ok(EncoderConfig::out32()),
        "orig-size" => Ok(EncoderConfig::original_size()),
        "v2-encoding" => Ok(EncoderConfig::v2_encoding()),
        other => Err(Error::invalid(
            "bench",
            format!("unknown variant {other:?}; expected one of {:?}", variant_names()),
        )),
    }
}

/// Peak resident set in MB from /proc/self/status (VmHWM), if readable.
pub fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

/// Evenly spread synthetic band ranges for a benchmark input.
fn bench_specs(n: usize) -> Vec<BandSpec> {
    (0..n)
        .map(|i| {
            let lo = 420.0 + 80.0 * i as f64;
            BandSpec::new(lo, lo + 40.0).expect("synthetic ranges are valid")
        })
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Times `iters` forward passes of the chosen encoder variant over a
/// seeded random tile, after `warmup` untimed passes.
pub fn bench_encoder(
    variant: &str,
    bands: usize,
    size: usize,
    iters: usize,
    warmup: usize,
) -> Result<BenchReport> {
    let config = variant_config(variant)?;
    if bands == 0 || bands > 64 {
        return Err(Error::invalid("bench", format!("band count {bands} out of 1..=64")));
    }
    if size == 0 {
        return Err(Error::invalid("bench", "tile size must be positive"));
    }
    if iters < MIN_ITERS {
        return Err(Error::invalid("bench", format!("need at least {MIN_ITERS} iterations")));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::invalid("bench", format!("need at least {MIN_WARMUP} warmup runs")));
    }
    let params = init_encoder::<f32>(&config, 99)?;
    let specs = bench_specs(bands);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = Tensor::from_flat_fn(&[bands, size, size], |_| rng.gen_range(0.0f32..1.0));

    for _ in 0..warmup {
        encoder_forward(&input, &specs, &params, &config)?;
    }
    let mut laps = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let out = encoder_forward(&input, &specs, &params, &config)?;
        laps.push(t0.elapsed().as_secs_f64() * 1000.0);
        // keep the result alive so the pass cannot be optimized away
        std::hint::black_box(out.data().len());
    }
    laps.sort_by(|a, b| a.total_cmp(b));
    let median_ms = median(&laps);
    Ok(BenchReport {
        variant: variant.to_string(),
        bands,
        h: size,
        w: size,
        iterations: iters,
        warmup,
        median_ms,
        fps: 1000.0 / median_ms,
        min_ms: laps[0],
        max_ms: laps[iters - 1],
        peak_rss_mb: peak_rss_mb(),
    })
}
