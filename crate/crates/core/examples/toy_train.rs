//! Trains on the procedural toy scene and reports train-view PSNR.
//!
//! `cargo run --release -p genie-core --example toy_train -- [steps]`

use std::time::Instant;

use genie_core::io::toy::{gaussians_from_points, generate_toy_scene, ToySpec};
use genie_core::render::{psnr, render_image};
use genie_core::{RunConfig, Trainer};

fn main() -> genie_core::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let toy = generate_toy_scene(&ToySpec::default(), 0);
    let mut cfg = RunConfig::toy();
    cfg.train.steps = steps;
    cfg.train.densify.end_step = Some(steps / 2);
    let init = gaussians_from_points(&toy.dataset.init_points, cfg.train.densify.init_log_scale);
    println!("initial gaussians: {}", init.len());
    let mut trainer = Trainer::new(cfg, init)?;
    let start = Instant::now();
    trainer.train_until(&toy.dataset, steps, |p| {
        println!("{p} elapsed={:.1}s", start.elapsed().as_secs_f64())
    })?;
    trainer.bake()?;
    let mut mse = 0.0;
    let index = trainer.config.splash.build_index(&trainer.set)?;
    let mut splash = trainer.config.splash.clone();
    splash.mode = genie_core::FeatureMode::Baked;
    for f in &toy.dataset.frames {
        let img = render_image(&f.camera, &trainer.set, Some(&index), &trainer.grid, &trainer.net, &splash, &trainer.config.render)?;
        mse += img.rgb.iter().zip(&f.rgb).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / img.rgb.len() as f64;
    }
    mse /= toy.dataset.frames.len() as f64;
    println!("train-view psnr {:.2} dB after {:.1}s", psnr(mse), start.elapsed().as_secs_f64());
    Ok(())
}
