//! `vedit` command line.

use std::error::Error as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::denoiser::{EditCode, EditInstruction};
use crate::diffusion::NoiseSchedule;
use crate::editor::FrameEditor;
use crate::error::{Error, Result};
use crate::localadapt::{MaskDir, MaskProvider};
use crate::metrics::{FlowConfig, MetricsReport};
use crate::rng::SeedStreams;
use crate::synthvid::{ground_truth_mask_provider, render_video, EditTask, SceneOptions, SceneSpec};

use super::ablation::{run_ablation, AblationMatrix, Toggle, Toggles};
use super::frames::{read_frames, write_frames};
use super::{load_model, run_edit, train_model, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "vedit", version, about = "Instruction-driven, temporally consistent video editing on synthetic frame sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic video with ground-truth masks.
    Gen(GenArgs),
    /// Train the base editing model on a synthetic corpus.
    Train(TrainArgs),
    /// Edit a frame directory.
    Edit(EditArgs),
    /// Score an edited frame directory against its source.
    Eval(EvalArgs),
    /// Run the paired ablation matrix on generated benchmark videos.
    Ablate(AblateArgs),
    /// DDIM-invert and reconstruct a frame directory.
    Invert(InvertArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// `key=value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    output: PathBuf,
    /// Scene file to render instead of a random scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint path to write.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EditFlags {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `code` or `code:param`, e.g. `recolor_fg:0.6`.
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long)]
    mask_dir: Option<PathBuf>,
    #[arg(long)]
    group_size: Option<usize>,
    /// Step indices, e.g. `0-7` or `0,2,4`.
    #[arg(long)]
    adapt_steps: Option<String>,
    /// `progressive` or `static`.
    #[arg(long)]
    blend_mode: Option<String>,
    /// `literal` or `reversed`.
    #[arg(long)]
    blend_direction: Option<String>,
    #[arg(long, overrides_with = "no_tta")]
    tta: bool,
    #[arg(long, overrides_with = "tta")]
    no_tta: bool,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: EditFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Edited frame directory.
    #[arg(long)]
    input: PathBuf,
    /// Source frame directory.
    #[arg(long)]
    source: PathBuf,
    /// Scene file of the source, enabling edit accuracy.
    #[arg(long, requires = "instruction")]
    scene: Option<PathBuf>,
    #[arg(long)]
    instruction: Option<String>,
    /// Directory for `metrics.csv` and `series.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    block: usize,
    #[arg(long, default_value_t = 4)]
    radius: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: EditFlags,
    #[arg(long)]
    frames: Option<usize>,
    /// Number of paired seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Add the chunked baseline with this chunk length.
    #[arg(long)]
    chunk: Option<usize>,
}

#[derive(Args, Debug)]
struct InvertArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: EditFlags,
}

fn build_config(common: &Common, flags: Option<&EditFlags>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
    if let Some(f) = flags {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        set("input", path(&f.input))?;
        set("output", path(&f.output))?;
        set("checkpoint", path(&f.checkpoint))?;
        set("mask_dir", path(&f.mask_dir))?;
        set("instruction", f.instruction.clone())?;
        set("group_size", f.group_size.map(|v| v.to_string()))?;
        set("adapt_steps", f.adapt_steps.clone())?;
        set("blend_mode", f.blend_mode.clone())?;
        set("blend_direction", f.blend_direction.clone())?;
        if f.tta {
            set("tta", Some("true".into()))?;
        }
        if f.no_tta {
            set("tta", Some("false".into()))?;
        }
    }
    set("seed", common.seed.map(|v| v.to_string()))?;
    set("workers", common.workers.map(|v| v.to_string()))?;
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{what} is required")))
}

fn existing<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = required(p, what)?;
    if !p.exists() {
        return Err(Error::Config(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen(a: &GenArgs) -> Result<()> {
    let mut cfg = build_config(&a.common, None)?;
    if let Some(f) = a.frames {
        cfg.set("frames", &f.to_string())?;
    }
    if let Some(r) = a.resolution {
        cfg.set("resolution", &r.to_string())?;
    }
    let spec = match &a.scene {
        Some(p) => SceneSpec::from_text(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => {
            let seed = cfg.require_seed()?;
            let opts = SceneOptions {
                resolution: cfg.resolution,
                frames: cfg.frames,
                max_shapes: 2,
                moving: true,
            };
            SceneSpec::random(opts, &mut SeedStreams::new(seed).stream("scene"))
        }
    };
    let video = render_video(&spec)?;
    create_dir(&a.output)?;
    write_frames(&video.sequence(), &a.output)?;
    let masks = a.output.join("masks");
    create_dir(&masks)?;
    for (i, m) in ground_truth_mask_provider(&video).0.iter().enumerate() {
        m.write_png(&super::frames::frame_path(&masks, i))?;
    }
    write_text(&a.output.join("scene.txt"), &spec.to_text())?;
    println!("wrote {} frames to {}", video.len(), a.output.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = build_config(&a.common, None)?;
    let seed = cfg.require_seed()?;
    let mut acc = 0.0;
    let (den, losses) = train_model(&cfg, seed, |s, l| {
        acc += l;
        if (s + 1) % 250 == 0 {
            eprintln!("step {} loss {:.5}", s + 1, acc / 250.0);
            acc = 0.0;
        }
    })?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    den.save(&a.output)?;
    println!(
        "trained {} steps, final loss {:.5}, saved {}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        a.output.display()
    );
    Ok(())
}

fn edit(a: &EditArgs) -> Result<()> {
    let cfg = build_config(&a.common, Some(&a.flags))?;
    let seed = cfg.require_seed()?;
    let ckpt = existing(&cfg.checkpoint, "checkpoint")?;
    let input = existing(&cfg.input, "input")?;
    let output = required(&cfg.output, "output")?;
    if let Some(m) = &cfg.mask_dir {
        existing(&Some(m.clone()), "mask dir")?;
    }
    let instruction = cfg.instruction.ok_or_else(|| Error::Config("instruction is required".into()))?;
    let den = load_model(ckpt)?;
    let seq = read_frames(input)?;
    let masks = cfg.mask_dir.clone().map(|dir| MaskDir { dir });
    let schedule = NoiseSchedule::standard();
    let _ = seed;
    let result = run_edit(&cfg, &den, &schedule, &seq, &instruction, masks.as_ref().map(|m| m as &dyn MaskProvider))?;
    create_dir(output)?;
    write_frames(&result.frames, output)?;
    write_text(&output.join("manifest.txt"), &result.manifest.to_text())?;
    write_text(&output.join("config.txt"), &cfg.to_text())?;
    println!(
        "edited {} frames (tta {:.1}s, gather {:.1}s, swap {:.1}s) into {}",
        seq.len(),
        result.manifest.tta_seconds,
        result.manifest.gather_seconds,
        result.manifest.swap_seconds,
        output.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let edited = read_frames(&a.input)?;
    let source = read_frames(&a.source)?;
    let flow = FlowConfig {
        block: a.block,
        radius: a.radius,
    };
    let truth = match (&a.scene, &a.instruction) {
        (Some(p), Some(i)) => {
            let spec = SceneSpec::from_text(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
            Some((render_video(&spec)?, EditTask::new(EditInstruction::parse(i)?)))
        }
        _ => None,
    };
    let report = MetricsReport::evaluate(&edited, &source, truth.as_ref().map(|(v, t)| (t, v.frames.as_slice())), flow)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.output {
        create_dir(out)?;
        write_text(&out.join("metrics.csv"), &report.to_csv())?;
        write_text(&out.join("series.csv"), &report.series_csv())?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = build_config(&a.common, Some(&a.flags))?;
    if let Some(f) = a.frames {
        cfg.set("frames", &f.to_string())?;
    }
    if let Some(n) = a.seeds {
        cfg.set("ablation_seeds", &n.to_string())?;
    }
    let seed = cfg.require_seed()?;
    let den = load_model(existing(&cfg.checkpoint, "checkpoint")?)?;
    let output = required(&cfg.output, "output")?.to_path_buf();
    let code = cfg.instruction.map(|i| i.code()).unwrap_or(EditCode::RecolorFg);
    let streams = SeedStreams::new(seed);
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|i| streams.child_seed(&format!("ablation-{i}"))).collect();
    let mut cells = vec![Toggles::FULL];
    cells.extend(Toggle::ALL.iter().map(|t| Toggles::FULL.without(*t)));
    let frames = cfg.frames;
    let mut matrix = AblationMatrix::from_seeds(cells, seeds, cfg, frames, code)?;
    matrix.chunked = a.chunk;
    let report = run_ablation(&matrix, &den, &NoiseSchedule::standard())?;
    create_dir(&output)?;
    write_text(&output.join("ablation.csv"), &report.to_csv())?;
    let table = report.to_table();
    write_text(&output.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn invert(a: &InvertArgs) -> Result<()> {
    let cfg = build_config(&a.common, Some(&a.flags))?;
    let seed = cfg.require_seed()?;
    let den = load_model(existing(&cfg.checkpoint, "checkpoint")?)?;
    let seq = read_frames(existing(&cfg.input, "input")?)?;
    let output = required(&cfg.output, "output")?;
    let instruction = cfg.instruction.unwrap_or(EditInstruction::parse("invert_style")?);
    let schedule = NoiseSchedule::standard();
    let editor = FrameEditor::new(&den, &schedule, cfg.sampler, seed);
    let frames = super::super::stadapt::parallel_frames(cfg.workers, seq.len(), |i| editor.reconstruct(i, seq.frame(i), &instruction))?;
    let recon = crate::video::FrameSequence::new(frames)?.clamped();
    let mae = recon
        .frames()
        .iter()
        .zip(seq.frames())
        .map(|(r, s)| r.mean_abs_diff(s))
        .sum::<f64>()
        / seq.len() as f64;
    create_dir(output)?;
    write_frames(&recon, output)?;
    println!("reconstruction MAE {mae:.5} over {} frames", seq.len());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Invert(a) => invert(a),
    }
}

/// Parses `argv` (including the program name), runs, and returns the exit
/// code: 0 on success, 2 on usage errors, 1 on runtime failures.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = e.source();
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            1
        }
    }
}
