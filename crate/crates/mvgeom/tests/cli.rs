//! End-to-end checks of the `mvgeom` binary: scene dumps, pipeline runs,
//! trace artifacts, and pose evaluation, all through the public file formats.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mvgeom")
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mvgeom_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_scene(dir: &Path) -> PathBuf {
    let path = dir.join("scene.cfg");
    std::fs::write(
        &path,
        "\
width=16
height=16
seed=5
trajectory=xtrans n=3 step=0.25
primitive=plane z=2 tex=noise
",
    )
    .unwrap();
    path
}

fn run_ok(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "mvgeom {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn scene_command_writes_reference_layout() {
    let dir = workdir("scene");
    let scene = write_scene(&dir);
    let out = dir.join("gt");
    run_ok(&["scene", "--config", scene.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    for n in 0..3 {
        assert!(out.join(format!("ref_{n:03}.fgrid")).exists());
        assert!(out.join(format!("depth_{n:03}.fgrid")).exists());
        assert!(out.join(format!("frame_{n:02}.ppm")).exists());
    }
    assert!(out.join("trajectory.txt").exists());
    // the dump is loadable as a reference set
    let refs = mvgeom::featurefield::ReferenceSet::load_dir(&out).unwrap();
    assert_eq!(refs.len(), 3);
}

#[test]
fn run_command_produces_frames_and_trace() {
    let dir = workdir("run");
    write_scene(&dir);
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "\
t_total=8
t_rep=4
t_comp=2
latent_height=16
latent_width=16
latent_channels=4
seed=3
denoiser=oracle
scene=scene.cfg
",
    )
    .unwrap();
    let out = dir.join("out");
    run_ok(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--trace",
    ]);
    for n in 0..3 {
        let latent = mvgeom::grid::read_grid(&out.join(format!("frame_{n:02}.fgrid"))).unwrap();
        assert_eq!(latent.shape(), (16, 16, 4));
        assert!(out.join(format!("frame_{n:02}.ppm")).exists());
    }
    // trace artifacts for a replacement step: masks and rendered features for
    // the two non-anchor frames, plus completed latents during completion
    let step1 = out.join("trace").join("step_01");
    for n in 1..3 {
        assert!(step1.join(format!("mask_f{n:02}.fgrid")).exists());
        assert!(step1.join(format!("rendered_f{n:02}.fgrid")).exists());
    }
    assert!(step1.join("completed_f01.fgrid").exists());
    assert!(!out.join("trace").join("step_05").join("mask_f01.fgrid").exists());
}

#[test]
fn run_with_toynet_and_references() {
    let dir = workdir("toynet");
    let scene = write_scene(&dir);
    let refs = dir.join("refs");
    run_ok(&["scene", "--config", scene.to_str().unwrap(), "--out", refs.to_str().unwrap()]);
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "\
t_total=6
t_rep=2
t_comp=1
latent_height=16
latent_width=16
latent_channels=4
seed=9
denoiser=toynet
toynet_seed=21
scene=scene.cfg
refs=refs
field_head=slab
slab_z=2.0
slab_half_thickness=0.2
near=0.5
far=4.0
samples_per_ray=16
",
    )
    .unwrap();
    let out = dir.join("out");
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let latent = mvgeom::grid::read_grid(&out.join("frame_00.fgrid")).unwrap();
    assert!(latent.data().iter().all(|v| v.is_finite()));
}

#[test]
fn eval_command_scores_trajectories() {
    let dir = workdir("eval");
    let scene = write_scene(&dir);
    let gt = dir.join("gt");
    run_ok(&["scene", "--config", scene.to_str().unwrap(), "--out", gt.to_str().unwrap()]);
    let traj = gt.join("trajectory.txt");

    // identical trajectories score 1
    let out = run_ok(&[
        "eval",
        "--gen",
        traj.to_str().unwrap(),
        "--est",
        traj.to_str().unwrap(),
    ]);
    assert!(out.contains("CPA: 1.000000"), "got {out}");

    // one missing frame of three scores 2/3
    let text = std::fs::read_to_string(&traj).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[1] = "missing".to_string();
    let est = dir.join("est.txt");
    std::fs::write(&est, lines.join("\n") + "\n").unwrap();
    let out = run_ok(&[
        "eval",
        "--gen",
        traj.to_str().unwrap(),
        "--est",
        est.to_str().unwrap(),
    ]);
    assert!(out.contains("CPA: 0.666667"), "got {out}");

    // a failed reconstruction scores 0
    let failed = dir.join("failed.txt");
    std::fs::write(&failed, "FAILED\n").unwrap();
    let out = run_ok(&[
        "eval",
        "--gen",
        traj.to_str().unwrap(),
        "--est",
        failed.to_str().unwrap(),
    ]);
    assert!(out.contains("CPA: 0.000000"), "got {out}");
}

#[test]
fn run_fails_cleanly_on_bad_config() {
    let dir = workdir("bad");
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "denoiser=imagination\n").unwrap();
    let out = Command::new(bin())
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", dir.join("out").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "stderr: {stderr}");
}
