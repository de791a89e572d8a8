//! Command-line tools: encode tiles to spectral features, segment them
//! into cloud masks, train on a directory of tiles, score predictions,
//! and benchmark encoder variants.

use clap::{Parser, Subcommand};
use fast_sensei::bench::{bench_encoder, DEFAULT_TILE, MIN_WARMUP};
use fast_sensei::encoder::{encoder_forward, init_encoder, EncoderConfig, PaddingLevel};
use fast_sensei::error::{Error, Result};
use fast_sensei::io::{
    load_encoder, load_segnet, read_mask, read_mstf, save_encoder, save_segnet, write_mask,
    write_mstf, LabelMask, TileSample,
};
use fast_sensei::metrics::{
    binary_metrics, class_metrics, format_report, report_json_line, ConfusionMatrix,
};
use fast_sensei::segnet::{init_segnet, predict_classes, SegNetConfig};
use fast_sensei::synthetic::{generate_dataset, SyntheticConfig};
use fast_sensei::train::{
    calibrate_model, fit, model_forward, FitOptions, Model, TrainConfig,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fast-sensei", about = "Sensor-independent cloud masking tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the spectral encoder over a tile and dump raw f32 features.
    Encode {
        /// Input tile (.mstf)
        #[arg(long)]
        input: PathBuf,
        /// Encoder checkpoint
        #[arg(long)]
        params: PathBuf,
        /// Padding level 1, 2 or 3
        #[arg(long)]
        level: u8,
        /// Output path for raw little-endian f32, C x H x W
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce a cloud mask for a tile.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        encoder_params: PathBuf,
        #[arg(long)]
        segnet_params: PathBuf,
        /// Use the quantized inference path (requires calibrated params)
        #[arg(long)]
        quantized: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a directory of .mstf/.msk tile pairs.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key = value configuration file
        #[arg(long)]
        config: PathBuf,
        /// Directory for the trained checkpoints
        #[arg(long)]
        out: PathBuf,
        /// Generate the synthetic desk-scale dataset into --data first
        #[arg(long)]
        synthetic: bool,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Collapse Thin and Thick into one Cloud class
        #[arg(long)]
        binary: bool,
    },
    /// Benchmark an encoder variant.
    Bench {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        bands: usize,
        #[arg(long)]
        iters: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Encode { input, params, level, out } => cmd_encode(&input, &params, level, &out),
        Cmd::Segment { input, encoder_params, segnet_params, quantized, out } => {
            cmd_segment(&input, &encoder_params, &segnet_params, quantized, &out)
        }
        Cmd::Train { data, config, out, synthetic } => cmd_train(&data, &config, &out, synthetic),
        Cmd::Eval { pred, truth, binary } => cmd_eval(&pred, &truth, binary),
        Cmd::Bench { variant, bands, iters } => cmd_bench(&variant, bands, iters),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(if e.is_validation() { 2 } else { 1 });
    }
}

fn cmd_encode(input: &Path, params: &Path, level: u8, out: &Path) -> Result<()> {
    let tile = read_mstf(input)?;
    let (enc, mut config) = load_encoder(params)?;
    config.padding_level = PaddingLevel::from_int(level)?;
    let feats = encoder_forward(&tile.bands, &tile.specs, &enc, &config)?;
    let mut buf = Vec::with_capacity(feats.numel() * 4);
    for &v in feats.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(out, buf)?;
    println!(
        "wrote {} ({}x{}x{} raw f32, level {})",
        out.display(),
        feats.dim(0),
        feats.dim(1),
        feats.dim(2),
        level
    );
    Ok(())
}

fn cmd_segment(
    input: &Path,
    encoder_params: &Path,
    segnet_params: &Path,
    quantized: bool,
    out: &Path,
) -> Result<()> {
    let tile = read_mstf(input)?;
    let (enc, enc_config) = load_encoder(encoder_params)?;
    let (seg, seg_config) = load_segnet(segnet_params)?;
    let model = Model::with_encoder(enc.cast::<f64>(), enc_config, seg.cast::<f64>(), seg_config)?;
    let logits = model_forward(&model, &tile, tile.n_bands(), None, quantized)?;
    let pred = predict_classes(&logits)?;
    write_mask(out, &LabelMask::new(tile.height(), tile.width(), pred)?)?;
    println!("wrote {} ({}x{} mask)", out.display(), tile.height(), tile.width());
    Ok(())
}

fn cmd_eval(pred_dir: &Path, truth_dir: &Path, binary: bool) -> Result<()> {
    let mut cm = ConfusionMatrix::new();
    let mut pairs = 0;
    for path in sorted_files(truth_dir, "msk")? {
        let name = path.file_name().expect("listing yields file names");
        let pred_path = pred_dir.join(name);
        if !pred_path.exists() {
            return Err(Error::invalid(
                "eval",
                format!("no prediction for {}", name.to_string_lossy()),
            ));
        }
        let truth = read_mask(&path)?;
        let pred = read_mask(&pred_path)?;
        if (truth.h, truth.w) != (pred.h, pred.w) {
            return Err(Error::shape(
                "eval",
                format!("{}: {}x{} vs {}x{}", name.to_string_lossy(), pred.h, pred.w, truth.h, truth.w),
            ));
        }
        cm.update(&pred.labels, &truth.labels)?;
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::invalid("eval", "no .msk files in the truth directory"));
    }
    let report = if binary { binary_metrics(&cm) } else { class_metrics(&cm) };
    print!("{}", format_report(&report));
    println!("{}", report_json_line(&report));
    Ok(())
}

fn cmd_bench(variant: &str, bands: usize, iters: usize) -> Result<()> {
    let report = bench_encoder(variant, bands, DEFAULT_TILE, iters, MIN_WARMUP)?;
    println!("{}", report.text());
    println!("{}", report.json_line());
    Ok(())
}

/// Training run options parsed from the key = value config file,
/// everything beyond the optimizer hyperparameters.
struct RunSpec {
    steps: usize,
    eval_every: usize,
    encoder: String,
    segnet_base: usize,
    segnet_stages: usize,
    band_subsets: bool,
    augment: bool,
    quantize: bool,
    val_tiles: Option<usize>,
    tiles: usize,
    tile_size: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            steps: 200,
            eval_every: 50,
            encoder: "tiny".to_string(),
            segnet_base: 4,
            segnet_stages: 2,
            band_subsets: true,
            augment: true,
            quantize: false,
            val_tiles: None,
            tiles: 24,
            tile_size: 64,
        }
    }
}

fn parse_train_config(text: &str) -> Result<(TrainConfig, RunSpec)> {
    let mut train = TrainConfig::default();
    let mut run = RunSpec::default();
    let bad = |k: &str, v: &str| Error::invalid("train_config", format!("bad value {v:?} for {k}"));
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid("train_config", format!("expected key = value: {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "base_lr" => train.base_lr = value.parse().map_err(|_| bad(key, value))?,
            "weight_decay" => train.weight_decay = value.parse().map_err(|_| bad(key, value))?,
            "batch_size" => train.batch_size = value.parse().map_err(|_| bad(key, value))?,
            "epochs" => train.epochs = value.parse().map_err(|_| bad(key, value))?,
            "warmup_epochs" => train.warmup_epochs = value.parse().map_err(|_| bad(key, value))?,
            "final_lr_frac" => train.final_lr_frac = value.parse().map_err(|_| bad(key, value))?,
            "warmup_start_frac" => {
                train.warmup_start_frac = value.parse().map_err(|_| bad(key, value))?
            }
            "clip_norm" => {
                train.clip_norm = match value {
                    "off" => None,
                    v => Some(v.parse().map_err(|_| bad(key, value))?),
                }
            }
            "seed" => train.seed = value.parse().map_err(|_| bad(key, value))?,
            "steps" => run.steps = value.parse().map_err(|_| bad(key, value))?,
            "eval_every" => run.eval_every = value.parse().map_err(|_| bad(key, value))?,
            "encoder" => match value {
                "tiny" | "fast" | "none" => run.encoder = value.to_string(),
                _ => return Err(bad(key, value)),
            },
            "segnet_base" => run.segnet_base = value.parse().map_err(|_| bad(key, value))?,
            "segnet_stages" => run.segnet_stages = value.parse().map_err(|_| bad(key, value))?,
            "band_subsets" => run.band_subsets = value.parse().map_err(|_| bad(key, value))?,
            "augment" => run.augment = value.parse().map_err(|_| bad(key, value))?,
            "quantize" => run.quantize = value.parse().map_err(|_| bad(key, value))?,
            "val_tiles" => run.val_tiles = Some(value.parse().map_err(|_| bad(key, value))?),
            "tiles" => run.tiles = value.parse().map_err(|_| bad(key, value))?,
            "tile_size" => run.tile_size = value.parse().map_err(|_| bad(key, value))?,
            other => return Err(Error::invalid("train_config", format!("unknown key {other:?}"))),
        }
    }
    Ok((train, run))
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn load_tile_pairs(dir: &Path) -> Result<Vec<TileSample>> {
    let mut tiles = Vec::new();
    for path in sorted_files(dir, "mstf")? {
        let mut tile = read_mstf(&path)?;
        let mask_path = path.with_extension("msk");
        if !mask_path.exists() {
            return Err(Error::invalid(
                "train",
                format!("{} has no matching .msk file", path.display()),
            ));
        }
        let mask = read_mask(&mask_path)?;
        if (mask.h, mask.w) != (tile.height(), tile.width()) {
            return Err(Error::shape(
                "train",
                format!("{}: mask {}x{} vs tile {}x{}", path.display(), mask.h, mask.w, tile.height(), tile.width()),
            ));
        }
        tile.mask = Some(mask.labels);
        tiles.push(tile);
    }
    if tiles.is_empty() {
        return Err(Error::invalid("train", "no .mstf files in the data directory"));
    }
    Ok(tiles)
}

fn cmd_train(data: &Path, config_path: &Path, out: &Path, synthetic: bool) -> Result<()> {
    let text = std::fs::read_to_string(config_path)?;
    let (train_config, run) = parse_train_config(&text)?;
    train_config.validate()?;

    if synthetic {
        std::fs::create_dir_all(data)?;
        let spec = SyntheticConfig {
            n_tiles: run.tiles,
            tile: run.tile_size,
            seed: train_config.seed,
            ..Default::default()
        };
        for (i, tile) in generate_dataset(&spec)?.iter().enumerate() {
            let stem = data.join(format!("tile{i:03}"));
            write_mstf(stem.with_extension("mstf"), tile)?;
            let mask = tile.mask.clone().expect("synthetic tiles carry masks");
            write_mask(
                stem.with_extension("msk"),
                &LabelMask::new(tile.height(), tile.width(), mask)?,
            )?;
        }
        println!("generated {} synthetic tiles in {}", run.tiles, data.display());
    }

    let tiles = load_tile_pairs(data)?;
    let n_val = run
        .val_tiles
        .unwrap_or_else(|| if tiles.len() > 1 { (tiles.len() / 5).max(1) } else { 0 });
    if n_val >= tiles.len() {
        return Err(Error::invalid(
            "train",
            format!("{n_val} validation tiles requested from {} total", tiles.len()),
        ));
    }
    let (train_tiles, val_tiles) = tiles.split_at(tiles.len() - n_val);

    let seed = train_config.seed;
    let n_bands = train_tiles[0].n_bands();
    let mut model = match run.encoder.as_str() {
        "none" => {
            let seg_config = SegNetConfig {
                in_channels: n_bands,
                base_channels: run.segnet_base,
                n_stages: run.segnet_stages,
                n_classes: 3,
                quantized: run.quantize,
            };
            Model::baseline(init_segnet::<f64>(&seg_config, seed ^ 1)?, seg_config)?
        }
        kind => {
            let enc_config = if kind == "tiny" {
                EncoderConfig::tiny()
            } else {
                EncoderConfig::default()
            };
            let seg_config = SegNetConfig {
                in_channels: enc_config.c_out,
                base_channels: run.segnet_base,
                n_stages: run.segnet_stages,
                n_classes: 3,
                quantized: run.quantize,
            };
            Model::with_encoder(
                init_encoder::<f64>(&enc_config, seed)?,
                enc_config,
                init_segnet::<f64>(&seg_config, seed ^ 1)?,
                seg_config,
            )?
        }
    };

    let opts = FitOptions {
        steps: run.steps,
        random_band_subsets: run.band_subsets && model.encoder.is_some(),
        augment: run.augment,
        eval_every: run.eval_every,
        ..Default::default()
    };
    let report = fit(&mut model, train_tiles, val_tiles, &train_config, &opts)?;
    let first = report.losses.first().copied().unwrap_or(f64::NAN);
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!("trained {} steps: loss {first:.4} -> {last:.4}", report.losses.len());
    if !report.evals.is_empty() {
        println!("best validation mIoU {:.4} at step {}", report.best_miou, report.best_step);
    }

    if run.quantize {
        let bmax = tiles.iter().map(|t| t.n_bands()).max().unwrap_or(1);
        calibrate_model(&mut model, train_tiles, bmax)?;
        println!("calibrated activation scales on {} tiles", train_tiles.len());
    }

    std::fs::create_dir_all(out)?;
    if let Some((enc, enc_config)) = &model.encoder {
        let path = out.join("encoder.sen1");
        save_encoder(&path, &enc.cast::<f32>(), enc_config)?;
        println!("wrote {}", path.display());
    }
    let seg_path = out.join("segnet.sgn1");
    save_segnet(&seg_path, &model.segnet.cast::<f32>(), &model.segnet_config)?;
    println!("wrote {}", seg_path.display());
    Ok(())
}
