use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use genie_core::edit::{EditOp, EditScript, EditSession};
use genie_core::io::camera::CameraSpec;
use genie_core::io::dataset::{load_dataset, write_dataset};
use genie_core::io::toy::{gaussians_from_points, generate_toy_scene, ToySpec};
use genie_core::trainer::{run_training, ConfidenceMode};
use genie_core::verify::{check_drop_bound, check_gradients, check_proximity, CheckResult, VerifyOptions};
use genie_core::{
    load_checkpoint, save_checkpoint, FeatureMode, GenieError, RadiusMode, RunConfig, SplashConfig, Trainer, Vec3,
};
use genie_service::{LoadRequest, ServiceOptions, WriterPolicy};

use crate::args::*;
use crate::{CliError, CliResult};

const RANDOM_INIT_POINTS: usize = 2000;

fn apply_splash(splash: &mut SplashConfig, a: &SplashArgs) {
    if let Some(q) = a.q {
        splash.q = q;
    }
    if let Some(k) = a.k {
        splash.k = k;
    }
    if a.raw_eigenvalue_radius {
        splash.radius_mode = RadiusMode::RawEigenvalue;
    }
}

fn feature_mode(m: ModeArg) -> FeatureMode {
    match m {
        ModeArg::Live => FeatureMode::Live,
        ModeArg::Baked => FeatureMode::Baked,
    }
}

pub fn train(a: TrainArgs) -> CliResult {
    let data = load_dataset(&a.dataset)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::from_bundle(load_checkpoint(path)?)?;
            if let Some(s) = a.steps {
                t.config.train.set_steps(s);
            }
            log::info!("resuming at step {}", t.step_count());
            t
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => {
                    let mut c = RunConfig::default();
                    if let Some([lo, hi]) = data.aabb {
                        c.grid.bounds_min = lo;
                        c.grid.bounds_max = hi;
                    }
                    c
                }
            };
            cfg.render.background = data.background;
            apply_splash(&mut cfg.splash, &a.splash);
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(s) = a.steps {
                cfg.train.set_steps(s);
            }
            if let Some(m) = a.confidence_mode {
                cfg.train.prune.mode = match m {
                    ConfidenceArg::Additive => ConfidenceMode::Additive,
                    ConfidenceArg::Multiplicative => ConfidenceMode::Multiplicative,
                };
            }
            if a.learnable_means {
                cfg.train.learnable_means = true;
            }
            if a.no_learnable_means {
                cfg.train.learnable_means = false;
            }
            cfg.validate()?;
            let points = if data.init_points.is_empty() {
                random_points(&cfg, cfg.train.seed)
            } else {
                data.init_points.clone()
            };
            let init = gaussians_from_points(&points, cfg.train.densify.init_log_scale);
            log::info!("{} frames, {} initial gaussians", data.frames.len(), init.len());
            Trainer::new(cfg, init)?
        }
    };
    let start = Instant::now();
    let bundle = run_training(&mut trainer, &data, Some(&a.out), |p| {
        log::info!("{p} elapsed={:.1}s", start.elapsed().as_secs_f64());
    })?;
    log::info!(
        "wrote {} ({} gaussians, step {})",
        a.out.display(),
        bundle.set.len(),
        trainer.step_count()
    );
    Ok(())
}

/// Uniform points inside the grid bounds.
fn random_points(cfg: &RunConfig, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1417);
    let (lo, hi) = (Vec3::from(cfg.grid.bounds_min), Vec3::from(cfg.grid.bounds_max));
    (0..RANDOM_INIT_POINTS)
        .map(|_| lo + (hi - lo).component_mul(&Vec3::new(rng.random(), rng.random(), rng.random())))
        .collect()
}

pub fn render(a: RenderArgs) -> CliResult {
    let mut bundle = load_checkpoint(&a.checkpoint)?;
    let camera = match (&a.camera, &a.dataset, a.frame) {
        (Some(path), _, _) => CameraSpec::load(path)?.to_camera(a.width, a.height)?,
        (None, Some(ds), Some(f)) => {
            let data = load_dataset(ds)?;
            let frame = data.frames.get(f).ok_or_else(|| {
                CliError::Usage(format!("--frame {f} out of range ({} frames)", data.frames.len()))
            })?;
            let mut c = frame.camera.clone();
            if a.width.is_some() || a.height.is_some() {
                let spec = CameraSpec::from_camera(&c);
                c = spec.to_camera(a.width, a.height)?;
            }
            c
        }
        _ => return Err(CliError::Usage("give --camera or --dataset with --frame".into())),
    };
    apply_splash(&mut bundle.config.splash, &a.splash);
    if let Some(s) = a.seed {
        bundle.config.render.seed = s;
    }
    if let Some(n) = a.samples {
        bundle.config.render.samples_per_ray = n;
    }
    bundle.config.validate()?;
    let splash = bundle.render_splash(a.mode.map(feature_mode));
    let index = bundle.build_index()?;
    let img = bundle.render(&camera, index.as_ref(), &splash, &bundle.config.render)?;
    img.write_png(&a.out)?;
    if let Some(raw) = &a.raw {
        img.write_raw(raw)?;
    }
    log::info!("wrote {} ({}x{})", a.out.display(), img.width, img.height);
    Ok(())
}

pub fn edit(a: EditArgs) -> CliResult {
    let mut bundle = load_checkpoint(&a.checkpoint)?;
    let script = EditScript::load(&a.script)?;
    let base = a.script.parent().unwrap_or(Path::new("."));
    if let Some(dir) = &a.snapshots {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut session = EditSession::new(bundle.set.clone());
    for (i, op) in script.edit.iter().enumerate() {
        let ordinal = i + 1;
        session
            .apply(op, base)
            .map_err(|source| CliError::Edit { ordinal, source })?;
        if let (Some(dir), EditOp::DeformFrame { frame }) = (&a.snapshots, op) {
            bundle.set = session.set.clone();
            let path = dir.join(format!("frame_{frame:04}.ckpt"));
            save_checkpoint(&bundle, &path)?;
        }
        log::info!("command {ordinal} applied, epoch {}", session.set.epoch());
    }
    bundle.set = session.set;
    save_checkpoint(&bundle, &a.out)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

pub fn verify(a: VerifyArgs) -> CliResult {
    let mut bundle = load_checkpoint(&a.checkpoint)?;
    apply_splash(&mut bundle.config.splash, &a.splash);
    bundle.config.splash.validate()?;
    let splash = bundle.render_splash(a.mode.map(feature_mode));
    let Some(mut index) = bundle.build_index()? else {
        return Err(GenieError::EmptyScene.into());
    };
    if a.inject_radius_fault {
        index.radii_mut()[0] *= 0.5;
    }
    let opts = VerifyOptions {
        queries: a.queries,
        drop_trials: a.trials,
        seed: a.seed,
        ..Default::default()
    };
    let features = genie_core::splash::FeatureTable::for_mode(&bundle.set, &bundle.grid, splash.mode)?;
    let set = &bundle.set;
    let mut results: Vec<CheckResult> = Vec::new();
    let want = |s: Suite| a.suite == Suite::All || a.suite == s;
    if want(Suite::Rtgps) {
        results.push(check_proximity(set, &index, &opts));
    }
    if want(Suite::DropBound) {
        results.push(check_drop_bound(set, &index, &features, &opts));
    }
    if want(Suite::Gradients) {
        results.push(check_gradients(set, &index, &features, &bundle.net, &bundle.grid, &splash, &opts));
    }
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed))
    }
}

pub fn serve(a: ServeArgs) -> CliResult {
    let options = ServiceOptions {
        bind: a.bind,
        writer_policy: if a.queue_writers {
            WriterPolicy::Queue
        } else {
            WriterPolicy::Reject
        },
        ..Default::default()
    };
    let initial = a.checkpoint.map(|checkpoint_path| LoadRequest {
        version: None,
        checkpoint_path,
        mesh_path: a.mesh,
    });
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Usage(format!("runtime: {e}")))?;
    rt.block_on(genie_service::serve(options, initial))
        .map_err(|e| CliError::io(Path::new(&a.bind.to_string()), e))
}

pub fn gen_toy(a: GenToyArgs) -> CliResult {
    let spec = ToySpec {
        blobs: a.blobs,
        cameras: a.cameras,
        width: a.size,
        height: a.size,
        ..Default::default()
    };
    let toy = generate_toy_scene(&spec, a.seed);
    let manifest = write_dataset(&a.out, &toy.dataset)?;
    let cfg_path = a.out.join("config.toml");
    std::fs::write(&cfg_path, RunConfig::toy().to_toml_string()).map_err(|e| CliError::io(&cfg_path, e))?;
    println!("{}", manifest.display());
    log::info!(
        "{} frames, {} initial points, config at {}",
        toy.dataset.frames.len(),
        toy.dataset.init_points.len(),
        cfg_path.display()
    );
    Ok(())
}
