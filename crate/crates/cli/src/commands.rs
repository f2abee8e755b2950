use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use semsplat_core::bundle::{bundle_losses, evaluate_bundles, read_bundle, render_bundle, write_bundle};
use semsplat_core::fit::{fit_scene, FitConfig};
use semsplat_core::io;
use semsplat_core::losses::{LossReport, LossWeights};
use semsplat_core::raster::render;
use semsplat_core::scene::Camera;
use semsplat_core::semantic::encode_features;
use semsplat_core::synth::{perturb_scene, synthesize, SceneSpec};

use crate::{Cli, Command, EvalArgs, FitArgs, LossesArgs, RenderArgs, SynthArgs};

pub fn run(cli: &Cli) -> Result<()> {
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .context("building thread pool")?;
    log::info!("using {threads} threads");
    pool.install(|| match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Render(a) => render_cmd(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Eval(a) => eval(a),
        Command::Losses(a) => losses(cli, a),
    })
}

fn weights(cli: &Cli) -> Result<LossWeights> {
    let mut w = match &cli.weights {
        Some(p) => io::read_json::<LossWeights>(p)?,
        None => LossWeights::shipped(),
    };
    if let Some(r) = cli.conf_ratio {
        w.conf_ratio = r;
    }
    w.validate()?;
    Ok(w)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        io::write_json(p, value)?;
    }
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let mut spec = SceneSpec::from_json(&text).with_context(|| a.spec.display().to_string())?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(r) = cli.res {
        spec.resolution = r as usize;
    }
    let bundle = synthesize(&spec)?;
    write_bundle(&a.out, &bundle)?;
    log::info!("wrote {} views to {}", bundle.views.len(), a.out.display());
    Ok(())
}

/// Rescales intrinsics to a `res × res` image with the same field of view.
fn rescale(camera: &Camera, res: usize) -> Camera {
    let (sx, sy) = (res as f64 / camera.width as f64, res as f64 / camera.height as f64);
    Camera {
        fx: camera.fx * sx,
        fy: camera.fy * sy,
        cx: (camera.cx + 0.5) * sx - 0.5,
        cy: (camera.cy + 0.5) * sy - 0.5,
        width: res,
        height: res,
        ..camera.clone()
    }
}

fn render_cmd(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let codec = a.codec.as_deref().map(io::read_codec).transpose()?;
    if let Some(bundle_dir) = &a.bundle {
        let gt = read_bundle(bundle_dir)?;
        let scene = match &a.scene {
            Some(p) => io::read_scene(p)?,
            None => gt.scene.clone(),
        };
        let codec = codec.unwrap_or_else(|| gt.codec.clone());
        let cams: Vec<Camera> = gt
            .cameras()
            .into_iter()
            .map(|c| cli.res.map_or_else(|| c.clone(), |r| rescale(c, r as usize)))
            .collect();
        let refs: Vec<&Camera> = cams.iter().collect();
        let out = render_bundle(gt.seed, &scene, &codec, &gt.prototypes, &refs)?;
        write_bundle(&a.out, &out)?;
        return Ok(());
    }
    let Some(cam_path) = &a.camera else {
        bail!("render needs --camera or --bundle");
    };
    let Some(scene_path) = &a.scene else {
        bail!("render with --camera needs --scene");
    };
    let mut camera = io::read_camera(cam_path)?;
    if let Some(r) = cli.res {
        camera = rescale(&camera, r as usize);
    }
    let mut scene = io::read_scene(scene_path)?;
    if !scene.is_compressed() {
        let Some(codec) = &codec else {
            bail!("{} has no compressed features; pass --codec", scene_path.display());
        };
        scene = encode_features(&scene, codec)?;
    }
    let out = render(&scene, &camera)?;
    io::write_ppm(&a.out.join("color.ppm"), &out.color)?;
    io::write_fmap(&a.out.join("color.fmap"), &out.color)?;
    io::write_fmap(&a.out.join("features.fmap"), &out.features)?;
    io::write_fmap(&a.out.join("depth.fmap"), &out.depth)?;
    io::write_fmap(&a.out.join("alpha.fmap"), &out.alpha)?;
    Ok(())
}

#[derive(Serialize)]
struct FitTrace<'a> {
    config: &'a FitConfig,
    trace: &'a [LossReport],
    #[serde(rename = "final")]
    final_loss: &'a LossReport,
}

fn fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let gt = read_bundle(&a.bundle)?;
    let seed = cli.seed.unwrap_or(gt.seed);
    let init = match &a.init {
        Some(p) => io::read_scene(p)?,
        None => gt.scene.clone(),
    };
    let init = if a.perturb > 0.0 {
        perturb_scene(&init, a.perturb, seed)?
    } else {
        init
    };
    let cfg = FitConfig {
        iterations: a.iterations,
        lr: a.lr,
        weights: weights(cli)?,
        train_geometry: !a.freeze.iter().any(|f| f == "geometry"),
        train_semantics: !a.freeze.iter().any(|f| f == "semantics"),
        train_codec: !a.freeze.iter().any(|f| f == "codec"),
        seed,
    };
    let views = gt.fit_views()?;
    let result = fit_scene(&init, &gt.codec, &views, &cfg)?;
    io::write_scene(&a.out.join("scene.sgs"), &result.scene)?;
    io::write_codec(&a.out.join("codec.json"), &result.codec)?;
    io::write_json(
        &a.out.join("trace.json"),
        &FitTrace {
            config: &cfg,
            trace: &result.trace,
            final_loss: &result.final_loss,
        },
    )?;
    log::info!(
        "l_total {:.6e} -> {:.6e}",
        result.trace[0].l_total,
        result.final_loss.l_total
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let pred = read_bundle(&a.pred)?;
    let gt = read_bundle(&a.gt)?;
    let protos = match &a.prototypes {
        Some(p) => io::read_prototypes(p)?,
        None => gt.prototypes.clone(),
    };
    let report = evaluate_bundles(&pred, &gt, &protos)?;
    emit(&report, a.out.as_deref())
}

fn losses(cli: &Cli, a: &LossesArgs) -> Result<()> {
    let pred = read_bundle(&a.pred)?;
    let gt = read_bundle(&a.gt)?;
    let report = bundle_losses(&pred, &gt, &weights(cli)?)?;
    emit(&report, a.out.as_deref())
}
