use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vpguide::ctnsr;
use vpguide::dense::{vp_patch, vp_region};
use vpguide::metrics::{argmax_labels, Evaluator};
use vpguide::motion::{assign_directions, PatchGrid};
use vpguide::pipeline::{run_pipeline, train_synthetic, ModelParams, PipelineConfig, TrainConfig, VpReport};
use vpguide::proximity::{proximity_map, Proximity};
use vpguide::synth::{generate_many, save_scene, RandomScene, CLASS_NAMES};
use vpguide::{detect_vp, Exec, GrayImage, InstanceMap, InvalidMask, LabelMap, VpConfig};

#[derive(Parser)]
#[command(
    name = "vpguide",
    version,
    about = "Vanishing point guided video segmentation toolkit"
)]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Vanishing point detection and proximity maps.
    #[command(subcommand)]
    Vp(VpCmd),
    /// Motion sampling inspection.
    #[command(subcommand)]
    Motion(MotionCmd),
    /// Dense region inspection.
    #[command(subcommand)]
    Dense(DenseCmd),
    /// Run or train the segmentation stack.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Segmentation metrics.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Synthetic road scenes.
    #[command(subcommand)]
    Synth(SynthCmd),
}

#[derive(Subcommand)]
enum VpCmd {
    /// Detect the vanishing point of one frame; prints JSON.
    Detect {
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Proximity map for a known vanishing point.
    Proximity {
        image: PathBuf,
        /// Pixel coordinates `X,Y`.
        #[arg(long, value_parser = parse_point)]
        vp: (f64, f64),
        #[arg(long, default_value = "linear")]
        variant: Proximity,
        #[arg(short, long)]
        output: PathBuf,
        /// 8-bit rendering.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GridArgs {
    /// `c×h×w` feature tensor.
    #[arg(long)]
    features: PathBuf,
    /// Patch-grid coordinates `X,Y` (column, row).
    #[arg(long, value_parser = parse_point)]
    vp: (f64, f64),
    #[arg(long)]
    patch_size: usize,
}

#[derive(Subcommand)]
enum MotionCmd {
    /// Assigned sampling direction of every patch as CSV.
    Directions {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum DenseCmd {
    /// Region membership and dense windows as JSON.
    Region {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(short, default_value_t = 1)]
        a: usize,
        #[arg(short, default_value_t = 1)]
        b: usize,
        #[arg(long)]
        json: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Segment the last frame of a clip.
    Run {
        /// Comma-separated PGM frames, oldest first.
        #[arg(long, value_delimiter = ',', required = true)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parameter directory; seeded from the config when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train on synthetic scenes.
    Train {
        #[arg(long, required = true)]
        synthetic: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Seeds both the parameters and the scenes.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Score a prediction against ground truth.
    Eval {
        /// `K×H×W` logits (`.ctnsr`) or a label PGM.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        invalid_mask: Option<PathBuf>,
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Class count for label PGM predictions.
        #[arg(long, default_value_t = CLASS_NAMES.len())]
        classes: usize,
        #[arg(long)]
        json: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Write random scenes to `dir/scene_NNN/`.
    Generate {
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn parse_point(s: &str) -> std::result::Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(x)?, num(y)?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_frame(path: &Path) -> Result<GrayImage> {
    GrayImage::load_pgm(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(PipelineConfig::from_json(&text)?)
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn class_names(k: usize) -> Vec<String> {
    if k == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("class_{i}")).collect()
    }
}

fn feature_grid(args: &GridArgs) -> Result<PatchGrid> {
    let f = ctnsr::load(&args.features).with_context(|| format!("reading {}", args.features.display()))?;
    let (_, h, w) = f.dims3()?;
    let grid = PatchGrid::new(h, w, args.patch_size)?;
    let (x, y) = args.vp;
    ensure!(
        (0.0..grid.width() as f64).contains(&x) && (0.0..grid.height() as f64).contains(&y),
        "vanishing point {x},{y} outside the {}×{} patch grid",
        grid.height(),
        grid.width()
    );
    Ok(grid)
}

fn vp_cmd(cmd: VpCmd) -> Result<()> {
    match cmd {
        VpCmd::Detect { image, seed, json } => {
            let est = detect_vp(&load_frame(&image)?, &VpConfig::default().with_seed(seed))?;
            println!("{}", serde_json::to_string(&est)?);
            if let Some(p) = json {
                write_json(&p, &est)?;
            }
        }
        VpCmd::Proximity {
            image,
            vp,
            variant,
            output,
            pgm,
        } => {
            let (h, w) = load_frame(&image)?.dims();
            let map = proximity_map(vp, h, w, variant)?;
            ctnsr::save(&output, &map.values)?;
            if let Some(p) = pgm {
                map.to_gray()?.save_pgm(p)?;
            }
        }
    }
    Ok(())
}

fn motion_cmd(cmd: MotionCmd) -> Result<()> {
    let MotionCmd::Directions { grid, output } = cmd;
    let g = feature_grid(&grid)?;
    let mut csv = String::from("row,col,u,v\n");
    for (i, (u, v)) in assign_directions(g, grid.vp).into_iter().enumerate() {
        let (x, y) = g.coords(i);
        csv.push_str(&format!("{y},{x},{u},{v}\n"));
    }
    fs::write(&output, csv)?;
    Ok(())
}

fn dense_cmd(cmd: DenseCmd) -> Result<()> {
    let DenseCmd::Region { grid, a, b, json } = cmd;
    let g = feature_grid(&grid)?;
    let region = vp_region(vp_patch(grid.vp, g), a, b, g)?;
    let report = json!({
        "region": region,
        "members": region.members(),
        "nominal_len": region.nominal_len(),
        "len": region.len(),
        "clipped": region.is_clipped(),
        "stride": region.stride(),
        "nominal_windows": region.nominal_windows(),
        "windows": region.windows(),
    });
    write_json(&json, &report)
}

fn render_unit(t: &vpguide::Tensor, dir: &Path, prefix: &str) -> Result<()> {
    let (k, h, w) = t.dims3()?;
    for c in 0..k {
        let px = t.data()[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::new(h, w, px)?.save_pgm(dir.join(format!("{prefix}_{c}.pgm")))?;
    }
    Ok(())
}

fn pipeline_cmd(cmd: PipelineCmd, exec: Exec) -> Result<()> {
    match cmd {
        PipelineCmd::Run {
            frames,
            config,
            params,
            output,
        } => {
            let cfg = load_config(config.as_deref())?;
            let clip = frames.iter().map(|p| load_frame(p)).collect::<Result<Vec<_>>>()?;
            let params = match params {
                Some(dir) => ModelParams::load(dir, &cfg)?,
                None => ModelParams::seeded(&cfg)?,
            };
            let (prep, out) = run_pipeline(&clip, &params, &cfg, exec)?;
            fs::create_dir_all(&output)?;
            ctnsr::save(output.join("P_c.ctnsr"), &out.context_logits)?;
            ctnsr::save(output.join("P_d.ctnsr"), &out.detail_logits)?;
            ctnsr::save(output.join("P_f.ctnsr"), &out.fused_logits)?;
            ctnsr::save(output.join("O.ctnsr"), &out.gate)?;
            render_unit(&out.gate, &output, "O")?;
            argmax_labels(&out.fused_logits)?.save_pgm(output.join("prediction.pgm"))?;
            write_json(&output.join("vp.json"), &VpReport::new(&prep))?;
        }
        PipelineCmd::Train {
            synthetic,
            config,
            steps,
            seed,
            lr,
            scenes,
            output,
        } => {
            if !synthetic {
                bail!("only --synthetic training is available");
            }
            let mut cfg = load_config(config.as_deref())?;
            let mut tcfg = TrainConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
                tcfg.seed = s;
            }
            tcfg.steps = steps.unwrap_or(tcfg.steps);
            tcfg.lr = lr.unwrap_or(tcfg.lr);
            tcfg.scenes = scenes.unwrap_or(tcfg.scenes);
            let (params, report) = train_synthetic(&cfg, &tcfg, exec)?;
            params.save(&output)?;
            write_json(&output.join("config.json"), &cfg)?;
            write_json(&output.join("train_config.json"), &tcfg)?;
            write_json(&output.join("train_report.json"), &report)?;
            eprintln!(
                "loss {:.4} -> {:.4} ({:.1}% lower), held-out mIoU {}",
                report.initial_loss,
                report.final_loss,
                100.0 * report.reduction,
                report.held_out.miou.map_or("n/a".into(), |v| format!("{v:.3}"))
            );
        }
    }
    Ok(())
}

fn metrics_cmd(cmd: MetricsCmd) -> Result<()> {
    let MetricsCmd::Eval {
        pred,
        gt,
        invalid_mask,
        instances,
        classes,
        json,
    } = cmd;
    let (labels, k) = if pred.extension().is_some_and(|e| e == "ctnsr") {
        let logits = ctnsr::load(&pred)?;
        let k = logits.dims3()?.0;
        (argmax_labels(&logits)?, k)
    } else {
        (LabelMap::load_pgm(&pred)?, classes)
    };
    let gt = LabelMap::load_pgm(&gt)?;
    let inst = instances.map(InstanceMap::load_pgm).transpose()?;
    let mask = invalid_mask.map(InvalidMask::load_pgm).transpose()?;
    let mut ev = Evaluator::new(k);
    ev.add(&labels, &gt, inst.as_ref(), mask.as_ref())?;
    let names = class_names(k);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    write_json(&json, &ev.report(&refs))
}

fn synth_cmd(cmd: SynthCmd, exec: Exec) -> Result<()> {
    let SynthCmd::Generate {
        scenes,
        seed,
        height,
        width,
        frames,
        noise,
        output,
    } = cmd;
    let opts = RandomScene {
        height,
        width,
        frames,
        noise,
        ..RandomScene::default()
    };
    for (i, seq) in generate_many(&opts, scenes, seed, exec)?.iter().enumerate() {
        save_scene(seq, output.join(format!("scene_{i:03}")))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::Vp(c) => vp_cmd(c),
        Command::Motion(c) => motion_cmd(c),
        Command::Dense(c) => dense_cmd(c),
        Command::Pipeline(c) => pipeline_cmd(c, exec),
        Command::Metrics(c) => metrics_cmd(c),
        Command::Synth(c) => synth_cmd(c, exec),
    }
}
