use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use far_core::codec::PatchCodec;
use far_core::metrics::{rollout_scene, score_lengths, write_metrics_csv};
use far_core::model::load_checkpoint;
use far_core::rollout::{
    bench, default_grid, parse_grid, write_bench_csv, write_latency_csv, SamplerConfig,
};
use far_core::scene::{
    generate_scene, generate_scenes, read_dataset, read_manifest, read_scene, read_scene_file,
    write_dataset, write_manifest, write_scene_file, CodecInfo, Manifest, SceneConfig,
};
use far_core::train::{train, Stage, TrainConfig, TrainData};
use far_sim::{resolve_addr, Server, ServerOptions};

use crate::{BenchArgs, Command, EvalArgs, GenDataArgs, RolloutArgs, ServeArgs, TrainArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Serve(a) => serve(a),
        Command::Eval(a) => eval(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = SceneConfig {
        views: a.views,
        height: a.height,
        width: a.width,
        frames: a.frames,
        agents: a.agents,
        max_boxes: SceneConfig::default().max_boxes.max(a.agents),
        straight: a.straight,
        ..Default::default()
    };
    cfg.validate()?;
    PatchCodec::new(a.patch, a.seed)?.grid(a.height, a.width)?;
    let scenes = generate_scenes(a.seed, a.scenes, &cfg)?;
    let manifest = Manifest::new(
        &cfg,
        a.seed,
        a.scenes,
        CodecInfo {
            patch: a.patch,
            seed: a.seed,
        },
    );
    write_dataset(&a.out, &manifest, &scenes)?;
    println!(
        "wrote {} scenes of {} frames to {}",
        a.scenes,
        a.frames,
        a.out.display()
    );
    Ok(())
}

/// File keys first, then `--stage`, `--init` and `--set` overrides; the result is validated
/// before any data is read.
fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.stage = a.stage.parse::<Stage>()?;
    if let Some(init) = &a.init {
        cfg.init = Some(init.clone());
    }
    for kv in &a.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let data = TrainData::from_dataset(read_dataset(&a.data)?)?;
    let loss_csv = a
        .loss_csv
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let trainer = train(cfg, &data, &a.out, &loss_csv)?;
    let last = trainer.log.last().map_or(f32::NAN, |r| r.loss);
    println!(
        "{} steps of {}; last loss {last:.5}; checkpoint {}",
        trainer.step,
        trainer.config.stage,
        a.out.display()
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn rollout_cmd(a: RolloutArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let codec = ckpt.codec()?;
    let scene = read_scene_file(&a.scene)?;
    let source = read_manifest(a.scene.parent().unwrap_or(Path::new(".")))?;
    let sampler = SamplerConfig {
        steps: a.steps,
        cfg_scale: a.cfg,
        kv_cache: a.kv_cache.on(),
        cond_cache: a.cond_cache.on(),
        ref_window: a.ref_window,
        seed: a.seed,
    };
    sampler.validate()?;
    let (record, out) = rollout_scene(&ckpt.model, &codec, &sampler, &scene, a.len)?;
    if record.frames.data().iter().any(|v| !v.is_finite()) {
        bail!("rollout produced non-finite values");
    }

    let name = a
        .scene
        .file_name()
        .and_then(|n| n.to_str())
        .context("scene path has no file name")?
        .to_string();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut scene_cfg = source.scene_config.clone();
    scene_cfg.frames = a.len + 1;
    let mut manifest = Manifest::new(&scene_cfg, source.seed, 0, source.codec);
    manifest.scenes.clear();
    if a.out.join("manifest.json").exists() {
        let existing = read_manifest(&a.out)?;
        if existing.frames != manifest.frames || existing.views != manifest.views {
            bail!(
                "{} already holds rollouts of {} frames; use a separate directory",
                a.out.display(),
                existing.frames
            );
        }
        manifest.scenes = existing.scenes;
    }
    if !manifest.scenes.contains(&name) {
        manifest.scenes.push(name.clone());
    }
    manifest.n_scenes = manifest.scenes.len();
    write_scene_file(&a.out.join(&name), &record)?;
    write_manifest(&a.out, &manifest)?;
    let stem = name.trim_end_matches(".fars");
    let latency = a.out.join(format!("{stem}.latency.csv"));
    write_latency_csv(&latency, &out.records)?;
    let mean = out.records.iter().map(|r| r.seconds).sum::<f64>() / out.records.len().max(1) as f64;
    println!(
        "{} frames to {}; {:.4} s/frame; {} model evaluations",
        a.len,
        a.out.join(&name).display(),
        mean,
        out.counters.model_evals
    );
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let codec = ckpt.codec()?;
    let rows = match &a.grid {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_grid(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => default_grid(),
    };
    let cfg = &ckpt.model.config;
    let scene = match &a.scene {
        Some(path) => read_scene_file(path)?,
        None => generate_scene(
            a.seed,
            &SceneConfig {
                views: cfg.views,
                height: cfg.image_height,
                width: cfg.image_width,
                max_boxes: cfg.max_boxes,
                agents: cfg.max_boxes.min(SceneConfig::default().agents),
                frames: a.history + a.frames,
                ..Default::default()
            },
        )?,
    };
    let results = bench(
        &ckpt.model,
        &codec,
        &scene,
        &rows,
        a.history,
        a.frames,
        a.seed,
    )?;
    write_bench_csv(&a.out, &results)?;
    for r in &results {
        println!(
            "steps={} kv={} cfg={} cond={}: {:.4} s/frame, {} evals/frame",
            r.row.steps,
            r.row.kv_cache,
            r.row.cfg_scale,
            r.row.cond_cache,
            r.mean_s_per_frame,
            r.model_evals_per_frame
        );
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let options = ServerOptions {
        max_line: a.max_line,
        ..Default::default()
    };
    let server = Server::from_checkpoint(&a.ckpt, options)?;
    let addr = resolve_addr(a.addr.as_deref());
    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
    println!("listening on {}", listener.local_addr()?);
    server.serve(listener)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred_manifest = read_manifest(&a.pred)?;
    let ref_manifest = read_manifest(&a.reference)?;
    let mut pred = Vec::with_capacity(pred_manifest.scenes.len());
    let mut reference = Vec::with_capacity(pred_manifest.scenes.len());
    for name in &pred_manifest.scenes {
        if !ref_manifest.scenes.contains(name) {
            bail!(
                "{name} is not part of the reference dataset {}",
                a.reference.display()
            );
        }
        pred.push(read_scene(&a.pred.join(name), &pred_manifest)?);
        reference.push(read_scene(&a.reference.join(name), &ref_manifest)?);
    }
    let points = score_lengths(&pred, &reference, &a.lengths, a.seed)?;
    let label = if a.label.is_empty() {
        a.pred.display().to_string()
    } else {
        a.label.clone()
    };
    let rows: Vec<_> = points.iter().flat_map(|p| p.rows(a.seed, &label)).collect();
    write_metrics_csv(&a.out, &rows)?;
    for p in &points {
        println!(
            "length {}: fd {:.4} fvd {:.4} road_iou {:.3} box_iou {:.3}",
            p.length, p.fd, p.fvd, p.road_iou, p.box_iou
        );
    }
    Ok(())
}
