use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use dynsplat::pipeline::{
    evaluate, format_table, generate_scene, load_checkpoint, plot_intervals, run_ablation, save_checkpoint, EvalRecord,
    SceneSpec, Split, Stage, TrainConfig, TrainState,
};
use dynsplat::render::{write_png, write_ppm, RenderedImage};
use dynsplat::scaffold::ply::save_points;
use dynsplat::tia::parse_interval_log;

#[derive(Parser)]
#[command(name = "dynsplat", version, about = "Compact dynamic Gaussian splatting on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both stages, writing checkpoints and the metrics log.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// `key=value` override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render one view of a checkpoint.
    Render {
        checkpoint: PathBuf,
        #[arg(long)]
        time: f64,
        #[arg(long)]
        camera: usize,
        /// `.png` or `.ppm`.
        #[arg(long)]
        out: PathBuf,
        /// Render the static canonical scene instead of the deformed one.
        #[arg(long)]
        global: bool,
    },
    /// Evaluate a checkpoint on the held-out frames; prints one JSON line.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Score training frames instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Generate a synthetic scene: frames, cameras and initial points.
    GenScene {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw the interval log as an image.
    PlotIntervals {
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation grid and print a comparison table.
    Ablate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut c = TrainConfig::from_text(&text)?;
    for o in overrides {
        c.apply_override(o)?;
    }
    c.validate()?;
    Ok(c)
}

fn save_image(img: &RenderedImage, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(path, img.width, img.height, &img.pixels)?,
        Some("png") => write_png(path, img.width, img.height, &img.pixels)?,
        _ => bail!("output must end in .png or .ppm: {}", path.display()),
    }
    Ok(())
}

fn eval_json(e: &EvalRecord, stage: Stage) -> serde_json::Value {
    json!({
        "stage": stage.name(),
        "psnr": e.psnr,
        "ssim": e.ssim,
        "storage_bytes": e.storage_bytes,
        "per_frame": e.per_frame.iter().map(|m| json!({
            "frame": m.frame,
            "camera": m.camera,
            "time": m.time,
            "psnr": m.psnr,
            "ssim": m.ssim,
        })).collect::<Vec<_>>(),
    })
}

fn train(config: &Path, out: &Path, overrides: &[String]) -> Result<()> {
    let c = load_config(config, overrides)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.cfg"), c.to_text())?;
    let scene = generate_scene(&c.scene)?;
    let mut state = TrainState::new(&scene, &c)?;
    let mut metrics = fs::File::create(out.join("metrics.tsv"))?;
    writeln!(metrics, "# iter\tloss\tpsnr\tanchors\tt_c")?;
    let mut logged = 0;
    let every = c.checkpoint_every;
    for stage in [Stage::Global, Stage::Local] {
        if stage == Stage::Local {
            state.begin_local(&scene)?;
        }
        writeln!(metrics, "# stage {}", stage.name())?;
        let mut hook = |s: &TrainState| -> Result<(), dynsplat::pipeline::PipelineError> {
            for r in &s.log[logged..] {
                writeln!(metrics, "{}", r.line())?;
                log::info!("{} {}", stage.name(), r.line());
            }
            logged = s.log.len();
            if every > 0 && s.iteration % every == 0 {
                let p = out.join(format!("ckpt_{}_{:06}.mdgs", stage.name(), s.iteration));
                save_checkpoint(&p, s, &scene.cameras)?;
            }
            Ok(())
        };
        state.run_stage(&scene, &mut hook)?;
        save_checkpoint(&out.join(format!("{}.mdgs", stage.name())), &state, &scene.cameras)?;
    }
    if let Some(tia) = &state.tia {
        fs::write(out.join("intervals.tsv"), tia.log_text())?;
    }
    let e = evaluate(&state.model, &scene, Split::Test, Stage::Local)?;
    println!("{}", eval_json(&e, Stage::Local));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, overrides } => train(&config, &out, &overrides),
        Command::Render {
            checkpoint,
            time,
            camera,
            out,
            global,
        } => {
            if !(0.0..=1.0).contains(&time) {
                bail!("--time must lie in [0, 1]");
            }
            let ck = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let cam = ck
                .cameras
                .get(camera)
                .with_context(|| format!("camera {camera} not in checkpoint ({} cameras)", ck.cameras.len()))?;
            let stage = if global { Stage::Global } else { ck.stage };
            let img = ck.model.render(cam, time, stage)?;
            save_image(&img, &out)
        }
        Command::Eval {
            checkpoint,
            config,
            overrides,
            train_split,
        } => {
            let c = load_config(&config, &overrides)?;
            let ck = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let scene = generate_scene(&c.scene)?;
            let split = if train_split { Split::Train } else { Split::Test };
            let e = evaluate(&ck.model, &scene, split, ck.stage)?;
            println!("{}", eval_json(&e, ck.stage));
            Ok(())
        }
        Command::GenScene { spec, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec = SceneSpec::from_text(&text)?;
            let scene = generate_scene(&spec)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("scene.cfg"), spec.to_text())?;
            let mut cams = String::new();
            for c in &scene.cameras {
                let v: Vec<String> = c.to_flat().iter().map(|x| x.to_string()).collect();
                cams.push_str(&v.join(" "));
                cams.push('\n');
            }
            fs::write(out.join("cameras.txt"), cams)?;
            let times: String = scene.timestamps.iter().map(|t| format!("{t}\n")).collect();
            fs::write(out.join("timestamps.txt"), times)?;
            save_points(&out.join("points.ply"), &scene.init_points)?;
            for (f, frame) in scene.frames.iter().enumerate() {
                for (c, img) in frame.iter().enumerate() {
                    save_image(img, &out.join(format!("frame{f:03}_cam{c}.png")))?;
                }
            }
            Ok(())
        }
        Command::PlotIntervals { log, out } => {
            let text = fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let records = parse_interval_log(&text)?;
            if records.is_empty() {
                bail!("{} holds no interval records", log.display());
            }
            plot_intervals(&records, &out)?;
            Ok(())
        }
        Command::Ablate { config, overrides, out } => {
            let c = load_config(&config, &overrides)?;
            let scene = generate_scene(&c.scene)?;
            let results = run_ablation(&scene, &c, &mut |r| {
                log::info!("{} psnr {:.2} storage {}", r.row.label, r.eval.psnr, r.eval.storage_bytes)
            })?;
            let table = format_table(&results);
            print!("{table}");
            if let Some(p) = out {
                fs::write(p, &table)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
