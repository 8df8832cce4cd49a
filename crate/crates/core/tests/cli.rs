use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avatar_core::body::{load_body_asset, BodyParams};
use avatar_core::field::{load_checkpoint, ModelConfig, Scene};
use avatar_core::geometry::TriMesh;
use avatar_core::math::Vec3;

const MINI: &str = r#"
[model]
triplane_resolution = 8
triplane_channels = 4
style_dim = 3
deform_hidden = 8
deform_layers = 2
decoder_hidden = 8
pe_frequencies = 2

[fit]
iterations = 3
rays_per_step = 48
samples = 12
coarse_size = 8
eikonal_points = 16
warmup_steps = 2
"#;

fn avatar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avatar"))
        .current_dir(dir)
        .env_remove("AVATAR_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// The resolved-configuration echo at the top of stdout.
fn echoed(out: &Output) -> toml::Table {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let body = text.strip_prefix("# resolved configuration\n").expect("echo comes first");
    // the echo is one TOML document followed by free-form result lines
    let doc: String = body
        .lines()
        .take_while(|l| !["wrote", "rendered", "PASS", "FAIL"].iter().any(|p| l.starts_with(p)))
        .collect::<Vec<_>>()
        .join("\n");
    doc.parse().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mini.toml"), MINI).unwrap();
        ok(avatar(
            dir.path(),
            &["maketargets", "--out", "tg", "--views", "3", "--size", "16", "--resolution", "28"],
        ));
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        avatar(self.dir.path(), args)
    }

    fn fit(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec!["--config", "mini.toml", "fit", "--targets", "tg", "--out", out];
        args.extend_from_slice(extra);
        self.run(&args)
    }
}

#[test]
fn verify_gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(avatar(dir.path(), &["verify", "--suite", "gradcheck"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS gradcheck"), "{text}");
}

#[test]
fn verify_json_reports_each_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(avatar(dir.path(), &["verify", "--suite", "density", "--json"]));
    let text = String::from_utf8(out.stdout).unwrap();
    let line = text.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["suite"], "density");
    assert!(v["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn unknown_suite_is_a_parameter_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&avatar(dir.path(), &["verify", "--suite", "nope"])), 3);
}

#[test]
fn genbody_writes_a_loadable_asset() {
    let dir = tempfile::tempdir().unwrap();
    ok(avatar(dir.path(), &["genbody", "--out", "b.json", "--resolution", "20", "--girth", "1.2"]));
    let body = load_body_asset(&dir.path().join("b.json")).unwrap();
    assert_eq!(body.joint_count(), 16);
    assert_eq!(code(&avatar(dir.path(), &["genbody", "--out", "c.json", "--resolution", "3"])), 3);
    assert!(!dir.path().join("c.json").exists());
    assert_eq!(code(&avatar(dir.path(), &["genbody", "--out", "missing/c.json"])), 2);
}

#[test]
fn zero_iterations_write_the_initial_scene() {
    let f = Fixture::new();
    ok(f.fit("zero.ckpt", &["--iterations", "0", "--seed", "7"]));
    let body = load_body_asset(&f.path("tg/body.json")).unwrap();
    let model: ModelConfig = toml::from_str::<toml::Table>(MINI).unwrap()["model"].clone().try_into().unwrap();
    let init = Scene::new(model, &body, 7).unwrap();
    assert_eq!(load_checkpoint(&f.path("zero.ckpt")).unwrap(), init);
}

#[test]
fn flags_override_file_override_defaults() {
    let f = Fixture::new();
    fs::write(f.path("p.toml"), MINI.replace("samples = 12", "samples = 10")).unwrap();
    let out = ok(f.run(&["--config", "p.toml", "fit", "--targets", "tg", "--out", "p.ckpt", "--iterations", "0"]));
    let echo = echoed(&out);
    let fit = echo["config"]["fit"].as_table().unwrap();
    // flag
    assert_eq!(fit["iterations"].as_integer(), Some(0));
    // file
    assert_eq!(fit["samples"].as_integer(), Some(10));
    assert_eq!(echo["config"]["model"]["triplane_resolution"].as_integer(), Some(8));
    // default
    assert_eq!(fit["foreground_fraction"].as_float(), Some(0.5));
    assert_eq!(echo["config"]["render"]["samples"].as_integer(), Some(48));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let f = Fixture::new();
    let first = ok(f.fit("a.ckpt", &["--iterations", "2", "--rays", "40"]));
    let echo = echoed(&first);
    fs::write(f.path("echo.toml"), toml::to_string(&echo["config"]).unwrap()).unwrap();
    ok(f.run(&["--config", "echo.toml", "fit", "--targets", "tg", "--out", "b.ckpt"]));
    assert_eq!(load_checkpoint(&f.path("a.ckpt")).unwrap(), load_checkpoint(&f.path("b.ckpt")).unwrap());
}

#[test]
fn threads_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_avatar"))
            .current_dir(dir.path())
            .env("AVATAR_THREADS", "3")
            .args(args)
            .output()
            .unwrap()
    };
    let env_only = ok(run(&["verify", "--suite", "density"]));
    assert_eq!(echoed(&env_only)["threads"].as_integer(), Some(3));
    let flag = ok(run(&["--threads", "2", "verify", "--suite", "density"]));
    assert_eq!(echoed(&flag)["threads"].as_integer(), Some(2));
}

#[test]
fn fit_history_and_resume() {
    let f = Fixture::new();
    let out = ok(f.fit("a.ckpt", &["--history", "h.jsonl", "--checkpoint-every", "2"]));
    assert!(String::from_utf8(out.stdout).unwrap().contains("after 3 steps"));
    let lines: Vec<serde_json::Value> = fs::read_to_string(f.path("h.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.iter().map(|v| v["step"].as_u64().unwrap()).collect::<Vec<_>>(), [0, 1, 2]);
    assert!(lines.iter().all(|v| v["total"].as_f64().unwrap().is_finite()));
    assert!(!f.path("a.ckpt.partial").exists());

    // a finished run resumes to itself
    ok(f.run(&["fit", "--targets", "tg", "--out", "b.ckpt", "--resume", "a.ckpt"]));
    assert_eq!(load_checkpoint(&f.path("a.ckpt")).unwrap(), load_checkpoint(&f.path("b.ckpt")).unwrap());
}

#[test]
fn divergence_exits_4_and_cleans_up() {
    let f = Fixture::new();
    let wild = MINI.replace(
        "warmup_steps = 2",
        "warmup_steps = 0\niterations = 60\ndivergence_factor = 1.5\ndivergence_patience = 3\n\n[fit.rates]\ntriplane = 50.0\nnetwork = 50.0\nstyle = 50.0\nlog_alpha = 50.0",
    );
    let wild = wild.replace("iterations = 3\n", "");
    fs::write(f.path("wild.toml"), wild).unwrap();
    let out = f.run(&[
        "--config", "wild.toml", "fit", "--targets", "tg", "--out", "w.ckpt", "--history", "w.jsonl",
        "--checkpoint-every", "1",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!f.path("w.ckpt").exists());
    assert!(!f.path("w.jsonl").exists());
}

#[test]
fn bad_inputs_fail_before_any_output() {
    let f = Fixture::new();
    ok(f.fit("a.ckpt", &["--iterations", "0"]));
    let render = |pose: &str, out: &str| {
        f.run(&[
            "render", "--checkpoint", "a.ckpt", "--body", "tg/body.json", "--cameras", "tg/cameras.json", "--pose",
            pose, "--out", out,
        ])
    };
    assert_eq!(code(&render("missing.jsonl", "r1")), 2);
    assert!(!f.path("r1").exists());
    let mut p = BodyParams::rest(3, 1);
    p.theta[0] = [0.1, 0.0, 0.0];
    fs::write(f.path("short.jsonl"), serde_json::to_string(&p).unwrap()).unwrap();
    assert_eq!(code(&render("short.jsonl", "r2")), 3);
    assert!(!f.path("r2").exists());
    fs::write(f.path("junk.jsonl"), "{not json").unwrap();
    assert_eq!(code(&render("junk.jsonl", "r3")), 2);
    assert!(!f.path("r3").exists());
    fs::write(f.path("bad.toml"), "[fit]\niterationz = 3\n").unwrap();
    let out = f.run(&["--config", "bad.toml", "fit", "--targets", "tg", "--out", "x.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(!f.path("x.ckpt").exists());
    assert_eq!(code(&f.fit("y.ckpt", &["--rays", "0"])), 3);
    assert!(!f.path("y.ckpt").exists());
}

#[test]
fn render_records_samples_and_writes_images() {
    let f = Fixture::new();
    ok(f.fit("a.ckpt", &["--iterations", "0"]));
    ok(f.run(&[
        "render", "--checkpoint", "a.ckpt", "--body", "tg/body.json", "--cameras", "tg/cameras.json", "--out", "r",
    ]));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("r/view_000.json")).unwrap()).unwrap();
    assert_eq!(meta["samples_per_ray"], 48);
    for suffix in [".ppm", "_depth.pfm", "_alpha.pfm"] {
        for v in 0..3 {
            assert!(f.path(&format!("r/view_{v:03}{suffix}")).exists());
        }
    }
    ok(f.run(&[
        "render", "--checkpoint", "a.ckpt", "--body", "tg/body.json", "--cameras", "tg/cameras.json", "--out", "s",
        "--samples", "12",
    ]));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("s/view_000.json")).unwrap()).unwrap();
    assert_eq!(meta["samples_per_ray"], 12);
}

#[test]
fn animation_frames_follow_their_poses() {
    let f = Fixture::new();
    ok(f.fit("a.ckpt", &["--iterations", "0"]));
    let poses: Vec<String> = [0.0, 0.5, -0.4]
        .iter()
        .map(|&a| {
            let mut p = BodyParams::rest(16, 1);
            p.theta[5] = [0.0, 0.0, a];
            serde_json::to_string(&p).unwrap()
        })
        .collect();
    fs::write(f.path("fwd.jsonl"), poses.join("\n")).unwrap();
    let rev: Vec<String> = poses.iter().rev().cloned().collect();
    fs::write(f.path("rev.jsonl"), rev.join("\n")).unwrap();
    for (poses, out) in [("fwd.jsonl", "fwd"), ("rev.jsonl", "rev")] {
        ok(f.run(&[
            "animate", "--checkpoint", "a.ckpt", "--body", "tg/body.json", "--cameras", "tg/cameras.json", "--poses",
            poses, "--out", out, "--samples", "12",
        ]));
    }
    let frame = |dir: &str, k: usize| fs::read(f.path(&format!("{dir}/frame_{k:04}.ppm"))).unwrap();
    for k in 0..3 {
        assert_eq!(frame("fwd", k), frame("rev", 2 - k));
    }
    assert_ne!(frame("fwd", 0), frame("fwd", 1));

    ok(f.run(&[
        "animate", "--checkpoint", "a.ckpt", "--body", "tg/body.json", "--cameras", "tg/cameras.json", "--poses",
        "fwd.jsonl", "--out", "mid", "--samples", "12", "--inbetweens", "1",
    ]));
    assert_eq!(frame("mid", 2), frame("fwd", 1));
    assert!(f.path("mid/frame_0004.ppm").exists());
    assert_eq!(code(&f.run(&[
        "animate", "--checkpoint", "a.ckpt", "--body", "tg/body.json", "--cameras", "tg/cameras.json", "--poses",
        "fwd.jsonl", "--out", "bad", "--view", "9",
    ])), 3);
}

#[test]
fn extracted_mesh_is_a_closed_surface() {
    let f = Fixture::new();
    ok(f.fit("a.ckpt", &["--iterations", "0"]));
    ok(f.run(&[
        "extract-mesh", "--checkpoint", "a.ckpt", "--body", "tg/body.json", "--resolution", "40", "--out", "m.obj",
    ]));
    let text = fs::read_to_string(f.path("m.obj")).unwrap();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts.map(|x| x.parse().unwrap()).collect();
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = parts.map(|x| x.split('/').next().unwrap().parse::<u32>().unwrap() - 1).collect();
                triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let mesh = TriMesh::new(vertices, triangles).unwrap();
    assert!(mesh.triangles().len() > 100);
    assert!(mesh.is_watertight());
    assert!(mesh.signed_volume() > 0.0);
}
