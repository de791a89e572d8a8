//! Temporary hyperparameter probe; delete before shipping.

use fast_sensei::encoder::{init_encoder, EncoderConfig};
use fast_sensei::segnet::{init_segnet, SegNetConfig};
use fast_sensei::synthetic::{generate_dataset, SyntheticConfig};
use fast_sensei::train::{fit, FitOptions, Model, TrainConfig};

#[test]
#[ignore]
fn sweep() {
    let tiles = generate_dataset(&SyntheticConfig::default()).unwrap();
    let split = tiles.len() - 6;
    let (train, val) = tiles.split_at(split);

    for (lr, stages, base, batch, mseed, dtok, cout) in [
        (7e-3, 1, 4, 16, 1u64, 8, 2),
        (7e-3, 1, 4, 16, 2, 8, 2),
        (7e-3, 1, 4, 16, 3, 8, 2),
        (7e-3, 1, 4, 16, 4, 8, 2),
        (7e-3, 1, 4, 16, 5, 8, 2),
        (1e-2, 1, 4, 16, 1, 8, 2),
        (1e-2, 1, 4, 16, 2, 8, 2),
        (1e-2, 1, 4, 16, 3, 8, 2),
        (1e-2, 1, 4, 16, 4, 8, 2),
        (1e-2, 1, 4, 16, 5, 8, 2),
    ] {
        let (epochs, warmup) = (8, 1);
        let steps = 200;
        let enc_config = EncoderConfig { d_token: dtok, c_out: cout, ..EncoderConfig::tiny() };
        let seg_config = SegNetConfig {
            in_channels: enc_config.c_out,
            base_channels: base,
            n_stages: stages,
            n_classes: 3,
            quantized: false,
        };
        let mut model = Model::with_encoder(
            init_encoder(&enc_config, mseed).unwrap(),
            enc_config,
            init_segnet(&seg_config, mseed ^ 0xA5).unwrap(),
            seg_config,
        )
        .unwrap();
        let config = TrainConfig {
            base_lr: lr,
            batch_size: batch,
            epochs,
            warmup_epochs: warmup,
            seed: 7,
            ..Default::default()
        };
        let opts = FitOptions {
            steps,
            random_band_subsets: true,
            eval_every: 25,
            ..Default::default()
        };
        let t0 = std::time::Instant::now();
        let report = fit(&mut model, train, val, &config, &opts).unwrap();
        let first = report.losses[..10].iter().sum::<f64>() / 10.0;
        let last = report.losses[report.losses.len() - 10..].iter().sum::<f64>() / 10.0;
        let curve: Vec<String> =
            report.losses.iter().step_by(25).map(|l| format!("{l:.3}")).collect();
        let evals: Vec<String> =
            report.evals.iter().map(|(s, m)| format!("{s}:{m:.3}")).collect();
        eprintln!(
            "lr {lr} stages {stages} base {base} batch {batch} mseed {mseed} steps {steps}: first {first:.3} last {last:.3} best {:.3} ({:.1}s)\n  losses {}\n  evals  {}",
            report.best_miou,
            t0.elapsed().as_secs_f64(),
            curve.join(" "),
            evals.join(" ")
        );
    }
}
