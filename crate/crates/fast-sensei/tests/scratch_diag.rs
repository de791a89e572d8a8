//! Temporary training diagnostic; delete before shipping.

use fast_sensei::encoder::{init_encoder, EncoderConfig};
use fast_sensei::segnet::{init_segnet, SegNetConfig};
use fast_sensei::synthetic::{generate_dataset, SyntheticConfig};
use fast_sensei::train::{
    calibrate_model, evaluate, fit, EvalOptions, FitOptions, Model, TrainConfig,
};

#[test]
#[ignore]
fn diag() {
    let tiles = generate_dataset(&SyntheticConfig::default()).unwrap();
    let split = tiles.len() - 6;
    let (train, val) = tiles.split_at(split);

    let mseed = 2u64;
    let enc_config = EncoderConfig::tiny();
    let seg_config = SegNetConfig {
        in_channels: enc_config.c_out,
        base_channels: 8,
        n_stages: 1,
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
        base_lr: 7e-3,
        batch_size: 16,
        epochs: 8,
        warmup_epochs: 1,
        seed: 7,
        ..Default::default()
    };
    let opts =
        FitOptions { steps: 200, random_band_subsets: true, eval_every: 50, ..Default::default() };
    let report = fit(&mut model, train, val, &config, &opts).unwrap();
    eprintln!("float best miou {:.4}", report.best_miou);

    let mut cal = model.clone();
    calibrate_model(&mut cal, train, 5).unwrap();
    let (_, m) = evaluate(
        &cal,
        val,
        &EvalOptions { pad_to: Some(5), quantized: true, ..Default::default() },
    )
    .unwrap();
    eprintln!("calibrated, no fine-tune: quant miou {:.4}", m.miou);

    for (qlr, qsteps, qbatch, qepochs) in
        [(1e-3, 200, 16, 5), (7e-4, 200, 16, 5)]
    {
        let mut qm = cal.clone();
        let qconfig = TrainConfig {
            base_lr: qlr,
            batch_size: qbatch,
            epochs: qepochs,
            warmup_epochs: 1,
            seed: 23,
            ..Default::default()
        };
        let qopts = FitOptions {
            steps: qsteps,
            random_band_subsets: false,
            quantized: true,
            eval_every: 10,
            ..Default::default()
        };
        let qreport = fit(&mut qm, train, val, &qconfig, &qopts).unwrap();
        let evals: Vec<String> =
            qreport.evals.iter().map(|(s, m)| format!("{s}:{m:.3}")).collect();
        calibrate_model(&mut qm, train, 5).unwrap();
        let (_, recal) = evaluate(
            &qm,
            val,
            &EvalOptions { pad_to: Some(5), quantized: true, ..Default::default() },
        )
        .unwrap();
        eprintln!(
            "qat lr {qlr} steps {qsteps} batch {qbatch}: best {:.4} recal {:.4}\n  evals {}",
            qreport.best_miou,
            recal.miou,
            evals.join(" ")
        );
    }
}
