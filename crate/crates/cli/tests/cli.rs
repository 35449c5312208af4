use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use far_core::scene::{read_dataset, SceneConfig};
use far_sim::{scripted_agent, AgentOptions};

fn far(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_far"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "d_model=16",
    "--set",
    "n_heads=2",
    "--set",
    "backbone_depth=2",
    "--set",
    "control_depth=1",
    "--set",
    "crossview_period=1",
    "--set",
    "max_t=4",
    "--set",
    "prompt_dim=8",
    "--set",
    "mlp_ratio=2",
    "--set",
    "batch=2",
    "--set",
    "clip_len=4",
];

fn gen(dir: &Path, frames: usize) {
    let frames = frames.to_string();
    let out = far(&[
        "gen-data",
        "--scenes",
        "2",
        "--frames",
        &frames,
        "--views",
        "2",
        "--seed",
        "7",
        "--height",
        "8",
        "--width",
        "8",
        "--agents",
        "2",
        "--out",
        p(dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn train_tiny(data: &Path, ckpt: &Path, config: &Path) {
    fs::write(config, "steps = 4\nlr = 1e-3\n").unwrap();
    let mut args = vec![
        "train",
        "--stage",
        "arhc",
        "--data",
        p(data),
        "--config",
        p(config),
        "--out",
        p(ckpt),
    ];
    args.extend_from_slice(TINY);
    let out = far(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_one() {
    let out = far(&[]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&far(&["frobnicate"])), 1);
    assert_eq!(code(&far(&["gen-data", "--scenes", "1", "--bogus"])), 1);
    assert_eq!(code(&far(&["rollout", "--kv-cache", "maybe"])), 1);
    assert_eq!(code(&far(&["--help"])), 0);
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = far(&[
            "gen-data",
            "--scenes",
            "2",
            "--frames",
            "16",
            "--views",
            "3",
            "--seed",
            "7",
            "--out",
            p(dir),
        ]);
        assert_eq!(code(&out), 0);
    }
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for n in names {
        assert_eq!(
            fs::read(a.join(&n)).unwrap(),
            fs::read(b.join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn train_rollout_eval_bench_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 66);
    let ckpt = tmp.path().join("ck").join("model.fard");
    train_tiny(&data, &ckpt, &tmp.path().join("train.cfg"));
    let loss = fs::read_to_string(tmp.path().join("ck").join("model.fard.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);

    let roll = tmp.path().join("roll");
    let scene = data.join("scene_0001.fars");
    let out = far(&[
        "rollout",
        "--ckpt",
        p(&ckpt),
        "--scene",
        p(&scene),
        "--len",
        "64",
        "--steps",
        "3",
        "--kv-cache",
        "on",
        "--cond-cache",
        "off",
        "--cfg",
        "1.5",
        "--out",
        p(&roll),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ds = read_dataset(&roll).unwrap();
    assert_eq!(ds.scenes[0].frames_len(), 65);
    assert!(ds.scenes[0].frames.data().iter().all(|v| v.is_finite()));
    let latency = fs::read_to_string(roll.join("scene_0001.latency.csv")).unwrap();
    assert_eq!(latency.lines().count(), 65);
    assert!(
        latency.lines().nth(1).unwrap().contains(",6,"),
        "3 steps x 2 passes: {latency}"
    );

    let too_long = far(&[
        "rollout",
        "--ckpt",
        p(&ckpt),
        "--scene",
        p(&scene),
        "--len",
        "66",
        "--out",
        p(&roll),
    ]);
    assert_eq!(code(&too_long), 2);

    let csv = tmp.path().join("metrics.csv");
    let out = far(&[
        "eval",
        "--pred",
        p(&roll),
        "--ref",
        p(&data),
        "--lengths",
        "16,32,64",
        "--out",
        p(&csv),
        "--label",
        "ck",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("metric,length,value,seed,checkpoint\n"));
    assert_eq!(text.lines().filter(|l| l.starts_with("fd,")).count(), 3);

    let grid = tmp.path().join("grid.csv");
    fs::write(
        &grid,
        "steps,kv_cache,cfg_scale,cond_cache\n2,on,1,on\n2,off,2,off\n",
    )
    .unwrap();
    let bench_csv = tmp.path().join("bench.csv");
    let out = far(&[
        "bench",
        "--ckpt",
        p(&ckpt),
        "--grid",
        p(&grid),
        "--out",
        p(&bench_csv),
        "--history",
        "2",
        "--frames",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&bench_csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(2).unwrap().ends_with(",4"), "{text}");
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 6);
    let ckpt = tmp.path().join("m.fard");
    let mut args = vec![
        "train",
        "--stage",
        "blendforce",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
    ];
    args.extend_from_slice(TINY);
    let out = far(&args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    assert_eq!(
        code(&far(&[
            "train",
            "--stage",
            "arhc",
            "--data",
            p(&data),
            "--out",
            p(&ckpt),
            "--set",
            "colour=red"
        ])),
        2
    );
    let missing = tmp.path().join("nope");
    assert_eq!(
        code(&far(&[
            "eval",
            "--pred",
            p(&missing),
            "--ref",
            p(&data),
            "--lengths",
            "8",
            "--out",
            "x"
        ])),
        2
    );
}

struct Child(std::process::Child);

impl Drop for Child {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_answers_the_scripted_agent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 6);
    let ckpt: PathBuf = tmp.path().join("m.fard");
    train_tiny(&data, &ckpt, &tmp.path().join("c.cfg"));
    let mut child = Child(
        Command::new(env!("CARGO_BIN_EXE_far"))
            .args(["serve", "--ckpt", p(&ckpt)])
            .env("FAR_ADDR", "127.0.0.1:0")
            .stdout(Stdio::piped())
            .spawn()
            .unwrap(),
    );
    let mut line = String::new();
    BufReader::new(child.0.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap()
        .to_string();
    let options = AgentOptions {
        scene: SceneConfig {
            views: 2,
            height: 8,
            width: 8,
            agents: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let t = scripted_agent(addr.as_str(), 1, 4, &options).unwrap();
    assert_eq!(t.frames.len(), 4);
}
