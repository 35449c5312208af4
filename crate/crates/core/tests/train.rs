use far_core::codec::PatchCodec;
use far_core::model::{
    load_checkpoint, CanvasFrame, ForwardInput, ForwardOptions, FrameFlags, FrameInputs, Model,
};
use far_core::rollout::{rollout, SamplerConfig};
use far_core::scene::{generate_scenes, SceneConfig};
use far_core::train::{
    arhc_step, bf_step, clip_loss, fm_loss, train, BlendState, Clip, HorizonDist, Stage,
    StepConfig, TrainConfig, TrainData, Trainer, LOSS_HEADER,
};
use far_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene_config(frames: usize) -> SceneConfig {
    SceneConfig {
        views: 2,
        height: 8,
        width: 8,
        frames,
        agents: 2,
        max_boxes: 3,
        ..Default::default()
    }
}

fn data(n: usize, frames: usize) -> TrainData {
    let records = generate_scenes(3, n, &scene_config(frames)).unwrap();
    TrainData::new(records, PatchCodec::new(4, 0).unwrap()).unwrap()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        batch: 2,
        clip_len: 4,
        d_model: 16,
        n_heads: 2,
        backbone_depth: 2,
        control_depth: 1,
        crossview_period: 1,
        max_t: 8,
        mlp_ratio: 2,
        prompt_dim: 8,
        bf_max_len: 6,
        bf_window: 4,
        rollout_steps: 2,
        ..Default::default()
    }
}

fn step_config(cfg: &TrainConfig) -> StepConfig {
    StepConfig {
        batch: cfg.batch,
        clip_len: cfg.clip_len,
        p_uncond: cfg.p_uncond,
        rollout_steps: cfg.rollout_steps,
        bf_max_len: cfg.bf_max_len,
        bf_window: cfg.bf_window,
    }
}

fn smoothed(xs: &[f32], window: usize) -> (f32, f32) {
    let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
    (mean(&xs[..window]), mean(&xs[xs.len() - window..]))
}

#[test]
fn hundred_arhc_steps_reduce_loss() {
    let data = data(8, 8);
    let mut trainer = Trainer::new(tiny_train_config(), &data).unwrap();
    let losses: Vec<f32> = (0..100)
        .map(|_| trainer.train_step(&data).unwrap().loss)
        .collect();
    let (first, last) = smoothed(&losses, 20);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn reference_rows_receive_zero_loss_gradient() {
    let data = data(1, 3);
    let cfg = tiny_train_config();
    let mut model = Model::new(cfg.model_config(&data.structure), 0).unwrap();
    model.perturb(0.1, 3);
    let mc = &model.config;
    let (v, s, c, t_len) = (mc.views, mc.tokens_per_view(), mc.latent_channels(), 3);
    let rec = &data.records[0];
    let frames: Vec<FrameInputs> = (0..t_len)
        .map(|t| FrameInputs {
            control: &rec.controls[t],
            canvas: CanvasFrame {
                current: rec.canvas(t),
                previous: (t > 0).then(|| rec.canvas(t - 1)),
            },
        })
        .collect();
    let mut lat = Vec::new();
    for view in 0..v {
        for t in 0..t_len {
            lat.extend_from_slice(&data.latents[0][t].data()[view * s * c..(view + 1) * s * c]);
        }
    }
    let refs = 2;
    let mut tape = Tape::new();
    let (cond, valid) = model
        .encode_conditions(&mut tape, &frames, 1, t_len)
        .unwrap();
    let latents = tape.leaf(Tensor::new(vec![v * t_len * s, c], lat).unwrap(), true);
    let flags: Vec<FrameFlags> = (0..t_len)
        .map(|t| FrameFlags {
            is_ref: t < refs,
            drop_cond: false,
        })
        .collect();
    let input = ForwardInput {
        batch: 1,
        positions: (0..t_len).collect(),
        t_diff: (0..t_len)
            .map(|t| if t < refs { 0.0 } else { 0.6 })
            .collect(),
        flags,
        prompt_valid: valid,
        latents,
    };
    let out = model
        .forward(&mut tape, &input, &cond, None, ForwardOptions::default())
        .unwrap();
    let rows: Vec<bool> = (0..v * t_len * s)
        .map(|i| (i / s) % t_len >= refs)
        .collect();
    let target = Tensor::zeros(vec![v * t_len * s, c]);
    let loss = fm_loss(&mut tape, out.velocity, &target, &rows).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(out.velocity).unwrap();
    for (i, &supervised) in rows.iter().enumerate() {
        let row = &g[i * c..(i + 1) * c];
        if supervised {
            assert!(row.iter().any(|&x| x != 0.0), "row {i}");
        } else {
            assert!(row.iter().all(|&x| x == 0.0), "row {i}");
        }
    }
    // A clip with nothing to supervise is a contract violation.
    let clip = Clip {
        scene: 0,
        start: 0,
        latents: data.latents[0].clone(),
        refs: 3,
        drop_cond: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(clip_loss(&mut model, &data, &[clip], &mut rng).is_err());
}

#[test]
fn blendforce_alternates_and_counts_alpha_updates() {
    let data = data(3, 8);
    let mut cfg = tiny_train_config();
    let mut trainer = Trainer::new(cfg.clone(), &data).unwrap();
    trainer.train_step(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.fard");
    trainer.save(&path).unwrap();

    cfg.stage = Stage::Blendforce;
    cfg.alpha_rate = 0.05;
    let mut bf = Trainer::from_checkpoint(cfg, &data, load_checkpoint(&path).unwrap()).unwrap();
    let n = 5;
    let stages: Vec<Stage> = (0..2 * n)
        .map(|_| bf.train_step(&data).unwrap().stage)
        .collect();
    assert_eq!(bf.blend.updates, n as u64);
    assert!((bf.blend.alpha() - 0.25).abs() < 1e-6);
    for (i, s) in stages.iter().enumerate() {
        assert_eq!(
            *s,
            if i % 2 == 0 {
                Stage::Blendforce
            } else {
                Stage::Arhc
            }
        );
    }
}

#[test]
fn blendforce_without_first_stage_checkpoint_is_rejected() {
    let data = data(1, 4);
    let cfg = TrainConfig {
        stage: Stage::Blendforce,
        ..tiny_train_config()
    };
    assert!(Trainer::new(cfg.clone(), &data).is_err());
    let dir = tempfile::tempdir().unwrap();
    let err = train(
        cfg,
        &data,
        &dir.path().join("b.fard"),
        &dir.path().join("b.csv"),
    )
    .err()
    .unwrap();
    assert!(err.to_string().contains("checkpoint"), "{err}");
}

#[test]
fn train_writes_checkpoints_and_loss_log_and_round_trips() {
    let data = data(2, 6);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.fard");
    let csv = dir.path().join("loss.csv");
    let cfg = TrainConfig {
        steps: 4,
        ckpt_interval: 2,
        ..tiny_train_config()
    };
    let trainer = train(cfg, &data, &out, &csv).unwrap();
    assert!(dir.path().join("m.step2.fard").exists());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some(LOSS_HEADER));
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(1).unwrap().starts_with("0,arhc,"));

    let ck = load_checkpoint(&out).unwrap();
    assert_eq!(ck.meta["stage"], "arhc");
    assert_eq!(ck.meta["step"], 4);
    assert_eq!(ck.optimizer.as_ref().unwrap().step_count(), 4);
    let scene = &data.records[0];
    let z0 = &data.latents[0][0];
    let run = |m: &Model| {
        rollout(
            m,
            &data.codec,
            &SamplerConfig::default(),
            Some((z0, &scene.controls[0])),
            &scene.controls[1..],
            2,
        )
        .unwrap()
        .latents
    };
    assert_eq!(run(&trainer.model), run(&ck.model));
}

#[test]
fn zero_alpha_blend_forcing_matches_teacher_forcing() {
    // With alpha held at 0 the history is ground truth, so the losses should be
    // distributed like plain flow matching on the same windows.
    let data = data(4, 8);
    let cfg = tiny_train_config();
    let sc = step_config(&cfg);
    let mut model = Model::new(cfg.model_config(&data.structure), 1).unwrap();
    model.perturb(0.05, 2);
    let mut state = BlendState::new(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bf = Vec::new();
    for _ in 0..100 {
        let out = bf_step(&mut model, &data, &sc, &mut state, &mut rng).unwrap();
        assert_eq!(out.alpha, 0.0);
        bf.push(out.loss as f64);
    }
    // Teacher forcing on the same window shape: `min(bf_window, R)` clean frames then one target.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tf = Vec::new();
    for _ in 0..100 {
        use rand::Rng;
        let r = rng.random_range(2..=sc.bf_max_len.min(7));
        let w = sc.bf_window.min(r);
        let scene = rng.random_range(0..data.len());
        let start = rng.random_range(0..=8 - r - 1) + r - w;
        let clip = Clip {
            scene,
            start,
            latents: data.latents[scene][start..=start + w].to_vec(),
            refs: w,
            drop_cond: rng.random::<f32>() < sc.p_uncond,
        };
        tf.push(clip_loss(&mut model, &data, &[clip], &mut rng).unwrap() as f64);
    }
    let stats = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        (m, var / xs.len() as f64)
    };
    let ((m1, se1), (m2, se2)) = (stats(&bf), stats(&tf));
    let z = (m1 - m2).abs() / (se1 + se2).sqrt();
    assert!(z < 3.5, "means {m1} vs {m2}, z = {z}");
}

#[test]
fn rollout_inside_blend_forcing_starts_from_ground_truth() {
    let data = data(2, 8);
    let cfg = tiny_train_config();
    let sc = StepConfig {
        batch: 1,
        ..step_config(&cfg)
    };
    let mut model = Model::new(cfg.model_config(&data.structure), 0).unwrap();
    let mut state = BlendState {
        rate: 1.0,
        updates: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = bf_step(&mut model, &data, &sc, &mut state, &mut rng).unwrap();
    assert_eq!(out.alpha, 1.0);
    assert!(out.loss.is_finite());
    assert!((2..=6).contains(&out.rollout_len));
}

#[test]
fn arhc_step_covers_text_to_video_regime() {
    let data = data(2, 4);
    let cfg = tiny_train_config();
    let sc = step_config(&cfg);
    let mut model = Model::new(cfg.model_config(&data.structure), 0).unwrap();
    let only_zero = HorizonDist::new(&[1.0], 0.0, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = arhc_step(&mut model, &data, &sc, &only_zero, &mut rng).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    let last_only = HorizonDist::new(&[0.0, 0.0, 0.0, 1.0], 0.0, 4).unwrap();
    assert!(arhc_step(&mut model, &data, &sc, &last_only, &mut rng)
        .unwrap()
        .is_finite());
}

#[test]
fn config_file_drives_training() {
    let text = "batch = 1\nclip_len = 3\nsteps = 2\nd_model = 16\nn_heads = 2\nbackbone_depth = 1\ncontrol_depth = 1\n\
                crossview_period = 1\nprompt_dim = 8\nmlp_ratio = 2\n";
    let cfg = TrainConfig::parse(text).unwrap();
    let data = data(1, 4);
    let dir = tempfile::tempdir().unwrap();
    let trainer = train(
        cfg,
        &data,
        &dir.path().join("c.fard"),
        &dir.path().join("c.csv"),
    )
    .unwrap();
    assert_eq!(trainer.step, 2);
    assert_eq!(trainer.model.config.d_model, 16);
}
