use clap::{Parser, Subcommand};
use mvgeom::camera::{read_trajectory, read_trajectory_with_missing, write_trajectory};
use mvgeom::error::{MvError, Result};
use mvgeom::grid::{write_grid, write_ppm, FeatureGrid};
use mvgeom::metrics::{camera_pose_accuracy, PoseSequencePair};
use mvgeom::pipeline::run_inference;
use mvgeom::runconfig::RunFileConfig;
use mvgeom::synthscene::{render_ground_truth, SceneSpec};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mvgeom", about = "Multi-view consistency engine on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampling pipeline described by a key=value config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-step masks, rendered features and completed latents.
        #[arg(long)]
        trace: bool,
    },
    /// Camera pose accuracy between a generated and an estimated trajectory.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        est: PathBuf,
    },
    /// Render ground-truth frames, depths and a reference set for a scene.
    Scene {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, trace } => cmd_run(&config, &out, trace),
        Command::Eval { gen, est } => cmd_eval(&gen, &est),
        Command::Scene { config, out } => cmd_scene(&config, &out),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn clamp01(grid: &FeatureGrid) -> FeatureGrid {
    let data = grid.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    FeatureGrid::new(grid.height(), grid.width(), grid.channels(), data).expect("clamped grid")
}

fn cmd_run(config: &Path, out: &Path, trace: bool) -> Result<()> {
    let rc = RunFileConfig::from_file(config)?;
    let mut run = rc.assemble()?;
    run.cfg.trace = trace;
    std::fs::create_dir_all(out)?;

    let field_ctx = run.field_ctx();
    let output = run_inference(
        &run.cfg,
        &run.cond,
        run.provider.as_ref(),
        field_ctx.as_ref(),
        run.denoiser.as_ref(),
    )?;

    for (n, frame) in output.latents.frames().iter().enumerate() {
        write_grid(frame, &out.join(format!("frame_{n:02}.fgrid")))?;
        write_ppm(&clamp01(&output.rgb[n]), &out.join(format!("frame_{n:02}.ppm")))?;
    }
    write_trajectory(output.latents.poses(), &out.join("trajectory.txt"))?;

    if let Some(d) = output.artifacts.d_med {
        println!("median depth used: {d}");
        if output.artifacts.grid_search_fell_back {
            println!("warning: grid search found no evaluable candidate; fell back");
        }
    }
    if trace {
        let trace_dir = out.join("trace");
        for step in &output.artifacts.steps {
            let dir = trace_dir.join(format!("step_{:02}", step.step));
            std::fs::create_dir_all(&dir)?;
            for (n, mask) in step.masks.iter().enumerate() {
                if let Some(mask) = mask {
                    write_grid(mask, &dir.join(format!("mask_f{n:02}.fgrid")))?;
                }
            }
            for (n, rendered) in step.rendered.iter().enumerate() {
                if let Some(rendered) = rendered {
                    write_grid(rendered, &dir.join(format!("rendered_f{n:02}.fgrid")))?;
                }
            }
            if let Some(completed) = &step.completed {
                for (n, frame) in completed.iter().enumerate() {
                    write_grid(frame, &dir.join(format!("completed_f{n:02}.fgrid")))?;
                }
            }
        }
    }
    println!("wrote {} frames to {}", output.latents.num_frames(), out.display());
    Ok(())
}

fn cmd_eval(gen: &Path, est: &Path) -> Result<()> {
    let generated = read_trajectory(gen)?;
    let est_text = std::fs::read_to_string(est)?;
    let failed = est_text.lines().next().map(str::trim) == Some("FAILED");
    let pair = if failed {
        PoseSequencePair {
            generated: generated.iter().map(|c| *c.pose.rotation()).collect(),
            estimated: vec![None; generated.len()],
            reconstruction_failed: true,
        }
    } else {
        let estimated = read_trajectory_with_missing(est)?;
        if estimated.len() != generated.len() {
            return Err(MvError::domain(format!(
                "{} generated cameras but {} estimates",
                generated.len(),
                estimated.len()
            )));
        }
        PoseSequencePair {
            generated: generated.iter().map(|c| *c.pose.rotation()).collect(),
            estimated: estimated.iter().map(|c| c.as_ref().map(|c| *c.pose.rotation())).collect(),
            reconstruction_failed: false,
        }
    };
    let score = camera_pose_accuracy(&pair)?;
    println!("CPA: {score:.6}");
    Ok(())
}

fn cmd_scene(config: &Path, out: &Path) -> Result<()> {
    let scene = SceneSpec::from_config_str(&std::fs::read_to_string(config)?)?;
    let cams = scene.cameras()?;
    std::fs::create_dir_all(out)?;
    let h = scene.intrinsics.height as usize;
    let w = scene.intrinsics.width as usize;
    for (n, cam) in cams.iter().enumerate() {
        let (features, depth) = render_ground_truth(&scene, cam, h, w);
        write_grid(&features, &out.join(format!("ref_{n:03}.fgrid")))?;
        write_grid(&depth, &out.join(format!("depth_{n:03}.fgrid")))?;
        write_ppm(&clamp01(&features), &out.join(format!("frame_{n:02}.ppm")))?;
    }
    write_trajectory(&cams, &out.join("trajectory.txt"))?;
    println!("wrote {} ground-truth views to {}", cams.len(), out.display());
    Ok(())
}
