//! File formats, calibration, tiling, and checkpoints.
//!
//! Two small binary containers carry data tiles: MSTF (magic "MST1") holds a
//! band-major f32 reflectance tile plus per-band wavelength ranges, MSK
//! (magic "MSK1") holds a u8 label mask. Model checkpoints use the same
//! style: "SEN1" for the spectral encoder, "SGN1" for the segmentation
//! network, both little-endian with f32 tensor payloads in a fixed traversal
//! order. All round-trips are bitwise lossless for f32 data.

use crate::descriptor::{BandSpec, EncodingVariant, StatsVariant};
use crate::encoder::{init_encoder, EncoderConfig, EncoderParams, OutputBlock, PaddingLevel};
use crate::error::{Error, Result};
use crate::segnet::{init_segnet, SegNetConfig, SegNetParams};
use crate::tensor::{Scalar, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MSTF_MAGIC: &[u8; 4] = b"MST1";
pub const MASK_MAGIC: &[u8; 4] = b"MSK1";
pub const ENCODER_MAGIC: &[u8; 4] = b"SEN1";
pub const SEGNET_MAGIC: &[u8; 4] = b"SGN1";

pub fn is_legal_label(v: u8) -> bool {
    matches!(v, 0 | 1 | 2 | 255)
}

/// One training/inference tile: real bands only (padding is added by the
/// batcher, never stored), band specs, and an optional label mask.
#[derive(Clone, Debug)]
pub struct TileSample {
    pub bands: Tensor<f32>,
    pub specs: Vec<BandSpec>,
    pub mask: Option<Vec<u8>>,
}

impl TileSample {
    pub fn new(bands: Tensor<f32>, specs: Vec<BandSpec>, mask: Option<Vec<u8>>) -> Result<Self> {
        let (b, h, w) = match bands.shape() {
            [b, h, w] => (*b, *h, *w),
            other => return Err(Error::shape("TileSample", format!("bands {other:?}"))),
        };
        if specs.len() != b {
            return Err(Error::shape(
                "TileSample",
                format!("{} specs for {b} bands", specs.len()),
            ));
        }
        if let Some(m) = &mask {
            if m.len() != h * w {
                return Err(Error::shape(
                    "TileSample",
                    format!("mask has {} labels for {h}x{w} pixels", m.len()),
                ));
            }
            if let Some(v) = m.iter().find(|v| !is_legal_label(**v)) {
                return Err(Error::invalid("TileSample", format!("label {v}")));
            }
        }
        Ok(TileSample { bands, specs, mask })
    }

    pub fn n_bands(&self) -> usize {
        self.bands.dim(0)
    }

    pub fn height(&self) -> usize {
        self.bands.dim(1)
    }

    pub fn width(&self) -> usize {
        self.bands.dim(2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::shape(
                "LabelMask",
                format!("{} labels for {h}x{w}", labels.len()),
            ));
        }
        if let Some(v) = labels.iter().find(|v| !is_legal_label(**v)) {
            return Err(Error::invalid("LabelMask", format!("label {v}")));
        }
        Ok(LabelMask { h, w, labels })
    }
}

// Little-endian primitives with path-tagged errors.

struct FileReader {
    r: BufReader<File>,
    path: String,
}

impl FileReader {
    fn open(path: &Path) -> Result<Self> {
        Ok(FileReader { r: BufReader::new(File::open(path)?), path: path.display().to_string() })
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format { path: self.path.clone(), detail: detail.into() }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.fail("truncated file")
            } else {
                Error::Io(e)
            }
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.bytes::<4>()?;
        if &got != want {
            return Err(self.fail(format!(
                "bad magic {:?}, want {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    /// Dimension fields get a sanity cap so corrupt headers fail cleanly
    /// instead of attempting huge allocations.
    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()? as usize;
        if v == 0 || v > 1 << 20 {
            return Err(self.fail(format!("{what} = {v} out of range")));
        }
        Ok(v)
    }

    fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.r.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(self.fail("trailing bytes after payload")),
        }
    }
}

struct FileWriter {
    w: BufWriter<File>,
}

impl FileWriter {
    fn create(path: &Path) -> Result<Self> {
        Ok(FileWriter { w: BufWriter::new(File::create(path)?) })
    }

    fn raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.w.write_all(bytes)?;
        Ok(())
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        self.raw(&[v])
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.raw(&v.to_le_bytes())
    }

    fn f32(&mut self, v: f32) -> Result<()> {
        self.raw(&v.to_le_bytes())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

pub fn write_mstf(path: impl AsRef<Path>, sample: &TileSample) -> Result<()> {
    let mut w = FileWriter::create(path.as_ref())?;
    w.raw(MSTF_MAGIC)?;
    w.u32(1)?; // version
    w.u32(sample.height() as u32)?;
    w.u32(sample.width() as u32)?;
    w.u32(sample.n_bands() as u32)?;
    for s in &sample.specs {
        w.f32(s.lambda_min_nm() as f32)?;
        w.f32(s.lambda_max_nm() as f32)?;
    }
    for &v in sample.bands.data() {
        w.f32(v)?;
    }
    w.finish()
}

pub fn read_mstf(path: impl AsRef<Path>) -> Result<TileSample> {
    let mut r = FileReader::open(path.as_ref())?;
    r.magic(MSTF_MAGIC)?;
    let version = r.u32()?;
    if version != 1 {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let h = r.dim("H")?;
    let w = r.dim("W")?;
    let b = r.dim("B")?;
    let mut specs = Vec::with_capacity(b);
    for i in 0..b {
        let lo = r.f32()? as f64;
        let hi = r.f32()? as f64;
        specs.push(
            BandSpec::new(lo, hi)
                .map_err(|e| r.fail(format!("band record {i}: {e}")))?,
        );
    }
    let mut data = vec![0.0f32; b * h * w];
    for v in &mut data {
        *v = r.f32()?;
    }
    r.finish()?;
    TileSample::new(Tensor::from_vec(&[b, h, w], data)?, specs, None)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    let mut w = FileWriter::create(path.as_ref())?;
    w.raw(MASK_MAGIC)?;
    w.u32(mask.h as u32)?;
    w.u32(mask.w as u32)?;
    w.raw(&mask.labels)?;
    w.finish()
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let mut r = FileReader::open(path.as_ref())?;
    r.magic(MASK_MAGIC)?;
    let h = r.dim("H")?;
    let w = r.dim("W")?;
    let mut labels = vec![0u8; h * w];
    for v in &mut labels {
        *v = r.u8()?;
    }
    if let Some(v) = labels.iter().find(|v| !is_legal_label(**v)) {
        return Err(r.fail(format!("illegal label {v}")));
    }
    r.finish()?;
    LabelMask::new(h, w, labels)
}

/// Landsat Collection-2 L1 DN to TOA reflectance. The affine map is exact
/// for the reference points: 5000 -> 0.0, 0 -> -0.1, 55000 -> 1.0.
pub fn toa_landsat(dn: u32) -> f64 {
    dn as f64 * 2.0 / 100_000.0 - 0.1
}

/// Sentinel-2 L1C DN to TOA reflectance; oversaturated values pass through.
pub fn toa_sentinel(dn: u32) -> f64 {
    dn as f64 / 10_000.0
}

/// Splits a scene into non-overlapping tile x tile samples, row-major, with
/// right/bottom remainders dropped.
pub fn tile_scene(scene: &Tensor<f32>, specs: &[BandSpec], tile: usize) -> Result<Vec<TileSample>> {
    let (b, hs, ws) = match scene.shape() {
        [b, h, w] => (*b, *h, *w),
        other => return Err(Error::shape("tile_scene", format!("scene {other:?}"))),
    };
    if specs.len() != b {
        return Err(Error::shape("tile_scene", format!("{} specs for {b} bands", specs.len())));
    }
    if tile == 0 {
        return Err(Error::invalid("tile_scene", "tile size must be positive"));
    }
    if hs < tile || ws < tile {
        return Err(Error::invalid(
            "tile_scene",
            format!("scene {hs}x{ws} smaller than one {tile}x{tile} tile"),
        ));
    }
    let (ni, nj) = (hs / tile, ws / tile);
    let mut out = Vec::with_capacity(ni * nj);
    for i in 0..ni {
        for j in 0..nj {
            let mut data = Vec::with_capacity(b * tile * tile);
            for band in 0..b {
                for row in 0..tile {
                    let start = band * hs * ws + (i * tile + row) * ws + j * tile;
                    data.extend_from_slice(&scene.data()[start..start + tile]);
                }
            }
            out.push(TileSample::new(
                Tensor::from_vec(&[b, tile, tile], data)?,
                specs.to_vec(),
                None,
            )?);
        }
    }
    Ok(out)
}

/// Rescales reflectance to the 8-bit range: u = round(clip(x*255, 0, 255)),
/// and returns both the u8 image and the back-mapped real tensor u/255.
pub fn quantize_input_u8<S: Scalar>(x: &Tensor<S>) -> (Vec<u8>, Tensor<S>) {
    let codes: Vec<u8> = x
        .data()
        .iter()
        .map(|&v| (v.to_f64() * 255.0).clamp(0.0, 255.0).round() as u8)
        .collect();
    let mut back = Tensor::zeros(x.shape());
    for (o, &u) in back.data_mut().iter_mut().zip(&codes) {
        *o = S::from_f64(u as f64 / 255.0);
    }
    (codes, back)
}

// Checkpoints. Tensors are stored as f32 little-endian in the parameter
// traversal order; shapes come from the config header, so files stay small
// and self-describing.

fn write_params<S: Scalar>(
    w: &mut FileWriter,
    visit: impl FnOnce(&mut dyn FnMut(&Tensor<S>)),
) -> Result<()> {
    let mut err: Option<Error> = None;
    visit(&mut |t: &Tensor<S>| {
        if err.is_some() {
            return;
        }
        for &v in t.data() {
            if let Err(e) = w.f32(v.to_f64() as f32) {
                err = Some(e);
                return;
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn read_params(
    r: &mut FileReader,
    visit_mut: impl FnOnce(&mut dyn FnMut(&mut Tensor<f32>)),
) -> Result<()> {
    let mut err: Option<Error> = None;
    visit_mut(&mut |t: &mut Tensor<f32>| {
        if err.is_some() {
            return;
        }
        for v in t.data_mut() {
            match r.f32() {
                Ok(x) => *v = x,
                Err(e) => {
                    err = Some(e);
                    return;
                }
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn encoding_code(v: EncodingVariant) -> u8 {
    match v {
        EncodingVariant::FastSensei => 0,
        EncodingVariant::SenseiV2 => 1,
    }
}

fn stats_code(v: StatsVariant) -> u8 {
    match v {
        StatsVariant::FourSummary => 0,
        StatsVariant::FivePercentile => 1,
    }
}

fn output_code(v: OutputBlock) -> u8 {
    match v {
        OutputBlock::BandMultiplication => 0,
        OutputBlock::BandEmbedding => 1,
    }
}

pub fn save_encoder<S: Scalar>(
    path: impl AsRef<Path>,
    params: &EncoderParams<S>,
    config: &EncoderConfig,
) -> Result<()> {
    config.validate()?;
    let mut w = FileWriter::create(path.as_ref())?;
    w.raw(ENCODER_MAGIC)?;
    w.u32(1)?; // version
    for v in [config.d_enc, config.d_token, config.n_layers, config.n_heads, config.d_ffn, config.c_out]
    {
        w.u32(v as u32)?;
    }
    w.u8(config.padding_level.as_int())?;
    w.u8(output_code(config.output_block))?;
    w.u8(encoding_code(config.encoding))?;
    w.u8(stats_code(config.stats))?;
    write_params(&mut w, |f| params.visit(&mut |t| f(t)))?;
    w.finish()
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<(EncoderParams<f32>, EncoderConfig)> {
    let mut r = FileReader::open(path.as_ref())?;
    r.magic(ENCODER_MAGIC)?;
    let version = r.u32()?;
    if version != 1 {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let d_enc = r.dim("d_enc")?;
    let d_token = r.dim("d_token")?;
    let n_layers = r.dim("n_layers")?;
    let n_heads = r.dim("n_heads")?;
    let d_ffn = r.dim("d_ffn")?;
    let c_out = r.dim("c_out")?;
    let padding_level = PaddingLevel::from_int(r.u8()?)
        .map_err(|e| r.fail(format!("padding level: {e}")))?;
    let output_block = match r.u8()? {
        0 => OutputBlock::BandMultiplication,
        1 => OutputBlock::BandEmbedding,
        v => return Err(r.fail(format!("output block code {v}"))),
    };
    let encoding = match r.u8()? {
        0 => EncodingVariant::FastSensei,
        1 => EncodingVariant::SenseiV2,
        v => return Err(r.fail(format!("encoding code {v}"))),
    };
    let stats = match r.u8()? {
        0 => StatsVariant::FourSummary,
        1 => StatsVariant::FivePercentile,
        v => return Err(r.fail(format!("stats code {v}"))),
    };
    let config = EncoderConfig {
        d_enc,
        d_token,
        n_layers,
        n_heads,
        d_ffn,
        c_out,
        padding_level,
        output_block,
        encoding,
        stats,
    };
    config.validate().map_err(|e| r.fail(format!("config: {e}")))?;
    let mut params: EncoderParams<f32> = init_encoder(&config, 0)?;
    read_params(&mut r, |f| params.visit_mut(&mut |t| f(t)))?;
    r.finish()?;
    Ok((params, config))
}

pub fn save_segnet<S: Scalar>(
    path: impl AsRef<Path>,
    params: &SegNetParams<S>,
    config: &SegNetConfig,
) -> Result<()> {
    config.validate()?;
    if params.convs.len() != config.n_convs() {
        return Err(Error::shape(
            "save_segnet",
            format!("{} convs vs config {}", params.convs.len(), config.n_convs()),
        ));
    }
    if let Some(s) = &params.act_scales {
        if s.len() != config.n_act_sites() {
            return Err(Error::shape(
                "save_segnet",
                format!("{} activation scales vs {} sites", s.len(), config.n_act_sites()),
            ));
        }
    }
    let mut w = FileWriter::create(path.as_ref())?;
    w.raw(SEGNET_MAGIC)?;
    w.u32(1)?; // version
    for v in [config.in_channels, config.base_channels, config.n_stages, config.n_classes] {
        w.u32(v as u32)?;
    }
    // the stored flag mirrors whether calibration scales travel with the file
    w.u8(u8::from(params.act_scales.is_some()))?;
    write_params(&mut w, |f| params.visit(&mut |t| f(t)))?;
    if let Some(scales) = &params.act_scales {
        for &s in scales {
            w.f32(s as f32)?;
        }
    }
    w.finish()
}

pub fn load_segnet(path: impl AsRef<Path>) -> Result<(SegNetParams<f32>, SegNetConfig)> {
    let mut r = FileReader::open(path.as_ref())?;
    r.magic(SEGNET_MAGIC)?;
    let version = r.u32()?;
    if version != 1 {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let in_channels = r.dim("in_channels")?;
    let base_channels = r.dim("base_channels")?;
    let n_stages = r.dim("n_stages")?;
    let n_classes = r.dim("n_classes")?;
    let quantized = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(r.fail(format!("quantized flag {v}"))),
    };
    let config = SegNetConfig { in_channels, base_channels, n_stages, n_classes, quantized };
    config.validate().map_err(|e| r.fail(format!("config: {e}")))?;
    let mut params: SegNetParams<f32> = init_segnet(&config, 0)?;
    read_params(&mut r, |f| params.visit_mut(&mut |t| f(t)))?;
    if quantized {
        let mut scales = Vec::with_capacity(config.n_act_sites());
        for _ in 0..config.n_act_sites() {
            scales.push(r.f32()? as f64);
        }
        params.act_scales = Some(scales);
    }
    r.finish()?;
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sample_tile(r: &mut ChaCha8Rng, b: usize, hw: usize) -> TileSample {
        let specs: Vec<BandSpec> = (0..b)
            .map(|i| BandSpec::new(400.0 + 50.0 * i as f64, 430.0 + 50.0 * i as f64).unwrap())
            .collect();
        let bands = Tensor::from_flat_fn(&[b, hw, hw], |_| r.gen_range(-0.1..1.2f32));
        TileSample::new(bands, specs, None).unwrap()
    }

    #[test]
    fn mstf_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(30);
        let tile = sample_tile(&mut r, 5, 16);
        let p1 = dir.path().join("a.mstf");
        let p2 = dir.path().join("b.mstf");
        write_mstf(&p1, &tile).unwrap();
        let back = read_mstf(&p1).unwrap();
        assert_eq!(back.bands.data(), tile.bands.data());
        assert_eq!(back.specs, tile.specs);
        write_mstf(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mstf_rejects_bad_magic_truncation_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(31);
        let tile = sample_tile(&mut r, 2, 4);
        let p = dir.path().join("t.mstf");
        write_mstf(&p, &tile).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_mstf(&p), Err(Error::Format { .. })));

        std::fs::write(&p, &good[..good.len() - 2]).unwrap();
        assert!(matches!(read_mstf(&p), Err(Error::Format { .. })));

        let mut long = good.clone();
        long.push(0);
        std::fs::write(&p, &long).unwrap();
        assert!(matches!(read_mstf(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn mstf_rejects_swapped_wavelengths() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(32);
        let tile = sample_tile(&mut r, 1, 2);
        let p = dir.path().join("t.mstf");
        write_mstf(&p, &tile).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // band record starts after magic(4) + version(4) + H/W/B(12)
        let lo = 700.0f32.to_le_bytes();
        let hi = 500.0f32.to_le_bytes();
        bytes[20..24].copy_from_slice(&lo);
        bytes[24..28].copy_from_slice(&hi);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_mstf(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn mask_round_trip_and_label_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.msk");
        let mask = LabelMask::new(2, 3, vec![0, 1, 2, 255, 1, 0]).unwrap();
        write_mask(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[12] = 7; // first label byte
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_mask(&p), Err(Error::Format { .. })));
        assert!(LabelMask::new(1, 1, vec![3]).is_err());
    }

    #[test]
    fn toa_reference_points_are_exact() {
        assert_eq!(toa_landsat(5000), 0.0);
        assert_eq!(toa_landsat(0), -0.1);
        assert_eq!(toa_landsat(55000), 1.0);
        assert_eq!(toa_sentinel(10000), 1.0);
        assert_eq!(toa_sentinel(0), 0.0);
        assert_eq!(toa_sentinel(12000), 1.2, "oversaturation passes through");
    }

    #[test]
    fn tile_scene_drops_remainders_row_major() {
        let mut r = rng(33);
        let specs = vec![BandSpec::new(450.0, 520.0).unwrap()];
        let scene = Tensor::from_flat_fn(&[1, 33, 35], |_| r.gen_range(0.0..1.0f32));
        let tiles = tile_scene(&scene, &specs, 16).unwrap();
        assert_eq!(tiles.len(), 4, "33x35 at tile 16 -> 2x2 grid");
        for (idx, (i, j)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
            // tile (i,j) pixel (0,0) equals scene pixel (16i, 16j)
            assert_eq!(tiles[idx].bands.at(&[0, 0, 0]), scene.at(&[0, 16 * i, 16 * j]));
            // and an interior pixel
            assert_eq!(tiles[idx].bands.at(&[0, 3, 5]), scene.at(&[0, 16 * i + 3, 16 * j + 5]));
        }
        assert!(tile_scene(&scene, &specs, 64).is_err(), "scene smaller than one tile");
    }

    #[test]
    fn input_quantization_clips_rounds_and_back_maps() {
        let x = Tensor::from_vec(&[5], vec![0.0f64, 1.2, 0.5, -0.3, 1.0]).unwrap();
        let (codes, back) = quantize_input_u8(&x);
        assert_eq!(codes, vec![0, 255, 128, 0, 255]);
        assert_eq!(back.shape(), &[5]);
        assert_eq!(back.data()[2], 128.0 / 255.0);
        assert_eq!(back.data()[1], 1.0);
    }

    #[test]
    fn encoder_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for config in [EncoderConfig::tiny(), EncoderConfig::band_embedding()] {
            let params: EncoderParams<f32> = init_encoder(&config, 77).unwrap();
            let p = dir.path().join("e.sen1");
            save_encoder(&p, &params, &config).unwrap();
            let (back, back_config) = load_encoder(&p).unwrap();
            assert_eq!(back_config, config);
            assert_eq!(back.param_count(), params.param_count());
            let mut want = Vec::new();
            params.visit(&mut |t| want.extend_from_slice(t.data()));
            let mut got = Vec::new();
            back.visit(&mut |t| got.extend_from_slice(t.data()));
            assert_eq!(want, got, "f32 round-trip must be bitwise");
        }
    }

    #[test]
    fn segnet_checkpoint_round_trips_with_and_without_scales() {
        let dir = tempfile::tempdir().unwrap();
        let config = SegNetConfig::default();
        let mut params: SegNetParams<f32> = init_segnet(&config, 78).unwrap();
        let p = dir.path().join("s.sgn1");

        save_segnet(&p, &params, &config).unwrap();
        let (back, cfg) = load_segnet(&p).unwrap();
        assert!(!cfg.quantized);
        assert!(back.act_scales.is_none());
        assert_eq!(back.convs[7].w, params.convs[7].w);

        params.act_scales = Some((0..config.n_act_sites()).map(|i| 0.5 + i as f64).collect());
        save_segnet(&p, &params, &config).unwrap();
        let (back, cfg) = load_segnet(&p).unwrap();
        assert!(cfg.quantized);
        let got = back.act_scales.unwrap();
        for (g, w) in got.iter().zip(params.act_scales.as_ref().unwrap()) {
            assert_eq!(*g, *w as f32 as f64);
        }
    }

    #[test]
    fn checkpoint_loaders_reject_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let config = SegNetConfig::default();
        let params: SegNetParams<f32> = init_segnet(&config, 79).unwrap();
        let p = dir.path().join("x.bin");
        save_segnet(&p, &params, &config).unwrap();
        assert!(matches!(load_encoder(&p), Err(Error::Format { .. })));
    }
}
