//! Orchestration: configuration, frame I/O, model training, video edits,
//! ablations and the `vedit` command line.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod frames;

use std::path::Path;
use std::time::Instant;

use crate::denoiser::{Denoiser, EditCode, EditInstruction};
use crate::diffusion::{train_with, NoiseSchedule};
use crate::editor::{FrameEditor, LocalMasks};
use crate::error::{Error, Result};
use crate::localadapt::MaskProvider;
use crate::rng::SeedStreams;
use crate::stadapt::{edit_video, VideoEdit, VideoEditConfig};
use crate::synthvid::{random_instruction, render_video, training_corpus, EditTask, RenderedVideo, SceneOptions, SceneSpec};
use crate::tta::RootSelector;
use crate::video::FrameSequence;

pub use config::RunConfig;
pub use frames::{read_frames, write_frames};

/// Trains a base editing model from a synthetic corpus. All randomness
/// comes from `train`/`init` sub-streams of `seed`.
pub fn train_model(cfg: &RunConfig, seed: u64, mut progress: impl FnMut(usize, f64)) -> Result<(Denoiser, Vec<f64>)> {
    let streams = SeedStreams::new(seed);
    let t = &cfg.training;
    let data = training_corpus(&EditCode::ALL, t.pairs, streams.child_seed("corpus"), t.model.resolution)?;
    let mut den = Denoiser::init(t.model.clone(), streams.child_seed("init"))?;
    let losses = train_with(&mut den, &data, &NoiseSchedule::standard(), &t.train, &mut streams.stream("train"), |s, l| {
        progress(s, l)
    })?;
    Ok((den, losses))
}

pub fn load_model(path: &Path) -> Result<Denoiser> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Denoiser::load(path)
}

pub fn video_config(cfg: &RunConfig) -> VideoEditConfig {
    VideoEditConfig {
        gather: cfg.gather.clone(),
        tta: cfg.tta_config(),
        root: RootSelector::First,
        workers: cfg.workers,
        spatiotemporal: cfg.spatiotemporal,
    }
}

/// TTA (optional), gather and swap on `seq` with the settings in `cfg`.
pub fn run_edit(
    cfg: &RunConfig,
    den: &Denoiser,
    schedule: &NoiseSchedule,
    seq: &FrameSequence,
    instruction: &EditInstruction,
    masks: Option<&dyn MaskProvider>,
) -> Result<VideoEdit> {
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let mut vc = video_config(cfg);
    if let Some(t) = vc.tta.as_mut() {
        t.seed = SeedStreams::new(seed).child_seed("tta");
    }
    let editor = FrameEditor::new(den, schedule, cfg.sampler, seed)
        .with_init(cfg.init)
        .with_masks(masks.map(|provider| LocalMasks {
            provider,
            blend: cfg.blend(),
        }));
    edit_video(&editor, den, seq, instruction, &vc)
}

/// One generated benchmark video with its edit task.
#[derive(Debug, Clone)]
pub struct BenchCase {
    pub seed: u64,
    pub video: RenderedVideo,
    pub instruction: EditInstruction,
    pub task: EditTask,
}

impl BenchCase {
    /// A random moving scene and a random instruction with the given code,
    /// both drawn from the `scene` stream of `seed`.
    pub fn generate(seed: u64, frames: usize, resolution: usize, code: EditCode) -> Result<Self> {
        let mut rng = SeedStreams::new(seed).stream("scene");
        let spec = SceneSpec::random(
            SceneOptions {
                resolution,
                frames,
                max_shapes: 2,
                moving: true,
            },
            &mut rng,
        );
        let instruction = random_instruction(code, &mut rng);
        Ok(Self {
            seed,
            video: render_video(&spec)?,
            instruction,
            task: EditTask::new(instruction),
        })
    }

    pub fn source(&self) -> FrameSequence {
        self.video.sequence()
    }
}

/// Seconds elapsed while running `f`.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let out = f()?;
    Ok((out, t.elapsed().as_secs_f64()))
}
