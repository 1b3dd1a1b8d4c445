//! Run configuration from `key=value` files and command-line overrides.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::denoiser::{parse_key_values, DenoiserConfig, EditInstruction};
use crate::diffusion::{Guidance, SamplerConfig, TimestepSampling, TrainConfig};
use crate::editor::InitMode;
use crate::error::{Error, Result};
use crate::localadapt::{BlendDirection, BlendMode, BlendSchedule};
use crate::stadapt::{GatherConfig, GatherMode};
use crate::tta::TtaConfig;

/// Base-model training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub pairs: usize,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            pairs: 3000,
            model: DenoiserConfig::default(),
            train: TrainConfig {
                steps: 3000,
                timesteps: TimestepSampling::Grid(10),
                cosine_decay: true,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub mask_dir: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub instruction: Option<EditInstruction>,
    pub gather: GatherConfig,
    pub blend_mode: BlendMode,
    pub blend_direction: BlendDirection,
    pub tta_enabled: bool,
    pub tta: TtaConfig,
    /// Gather and swap; off edits frames independently.
    pub spatiotemporal: bool,
    pub workers: usize,
    pub init: InitMode,
    pub sampler: SamplerConfig,
    pub training: TrainSettings,
    pub frames: usize,
    pub resolution: usize,
    pub ablation_seeds: usize,
    pub chunk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            input: None,
            output: None,
            checkpoint: None,
            mask_dir: None,
            source: None,
            scene: None,
            instruction: None,
            gather: GatherConfig::default(),
            blend_mode: BlendMode::Progressive,
            blend_direction: BlendDirection::Literal,
            tta_enabled: true,
            tta: TtaConfig::default(),
            spatiotemporal: true,
            workers: 1,
            init: InitMode::SharedNoise,
            sampler: SamplerConfig::default(),
            training: TrainSettings::default(),
            frames: 24,
            resolution: 32,
            ablation_seeds: 4,
            chunk: 24,
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value {value:?} for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

/// `"0-7"`, `"0,2,5"`, `"none"` or empty.
pub fn parse_index_set(key: &str, value: &str) -> Result<BTreeSet<usize>> {
    let v = value.trim();
    if v.is_empty() || v == "none" {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for part in v.split(',') {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (num(key, a)?, num(key, b)?);
                if a > b {
                    return Err(bad(key, value));
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(num(key, part)?);
            }
        }
    }
    Ok(out)
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn blend(&self) -> BlendSchedule {
        BlendSchedule {
            mode: self.blend_mode,
            direction: self.blend_direction,
            steps: self.sampler.steps,
        }
    }

    pub fn tta_config(&self) -> Option<TtaConfig> {
        self.tta_enabled.then_some(TtaConfig {
            seed: self.tta.seed,
            ..self.tta
        })
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required (--seed or seed= in the config)".into()))
    }

    /// Sets one key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value.trim()));
        match key {
            "seed" => self.seed = Some(num(key, value)?),
            "input" => self.input = path(),
            "output" => self.output = path(),
            "checkpoint" => self.checkpoint = path(),
            "mask_dir" => self.mask_dir = path(),
            "source" => self.source = path(),
            "scene" => self.scene = path(),
            "instruction" => self.instruction = Some(EditInstruction::parse(value.trim())?),
            "group_size" => self.gather.group_size = num(key, value)?,
            "adapt_steps" => self.gather.adapt_steps = parse_index_set(key, value)?,
            "layers" => self.gather.layers = parse_index_set(key, value)?.into_iter().collect(),
            "gather_mode" => self.gather.mode = GatherMode::parse(value.trim()).ok_or_else(|| bad(key, value))?,
            "blend_mode" => {
                self.blend_mode = match value.trim() {
                    "progressive" => BlendMode::Progressive,
                    "static" => BlendMode::Static,
                    _ => return Err(bad(key, value)),
                }
            }
            "blend_direction" => {
                self.blend_direction = match value.trim() {
                    "literal" => BlendDirection::Literal,
                    "reversed" => BlendDirection::Reversed,
                    _ => return Err(bad(key, value)),
                }
            }
            "tta" => self.tta_enabled = boolean(key, value)?,
            "spatiotemporal" => self.spatiotemporal = boolean(key, value)?,
            "tta_steps" => self.tta.steps = num(key, value)?,
            "tta_set_size" => self.tta.set_size = num(key, value)?,
            "tta_batch" => self.tta.batch = num(key, value)?,
            "tta_lr" => self.tta.lr = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "init" => self.init = InitMode::parse(value.trim()).ok_or_else(|| bad(key, value))?,
            "steps" => self.sampler.steps = num(key, value)?,
            "guidance_image" => self.sampler.guidance.image = num(key, value)?,
            "guidance_instruction" => self.sampler.guidance.instruction = num(key, value)?,
            "clip_x0" => self.sampler.clip_x0 = boolean(key, value)?,
            "train_pairs" => self.training.pairs = num(key, value)?,
            "train_steps" => self.training.train.steps = num(key, value)?,
            "train_batch" => self.training.train.batch = num(key, value)?,
            "train_lr" => self.training.train.lr = num(key, value)?,
            "channels" => {
                let c: Vec<usize> = value.split(',').map(|c| num(key, c)).collect::<Result<_>>()?;
                self.training.model.channels = c.try_into().map_err(|_| bad(key, value))?;
            }
            "frames" => self.frames = num(key, value)?,
            "resolution" => {
                self.resolution = num(key, value)?;
                self.training.model.resolution = self.resolution;
            }
            "ablation_seeds" => self.ablation_seeds = num(key, value)?,
            "chunk" => self.chunk = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text) {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.gather.group_size == 0 {
            return Err(Error::Config("group size must be at least 1".into()));
        }
        if self.chunk == 0 || self.frames == 0 {
            return Err(Error::Config("frames and chunk must be positive".into()));
        }
        if let Some(&s) = self.gather.adapt_steps.iter().next_back() {
            if s >= self.sampler.steps {
                return Err(Error::Config(format!("adapted step {s} outside the {}-step grid", self.sampler.steps)));
            }
        }
        Ok(())
    }

    /// `key=value` echo of the settings that affect outputs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "seed={}", self.seed.map(|v| v.to_string()).unwrap_or_default());
        let _ = writeln!(s, "input={}", opt(&self.input));
        let _ = writeln!(s, "checkpoint={}", opt(&self.checkpoint));
        let _ = writeln!(s, "mask_dir={}", opt(&self.mask_dir));
        if let Some(i) = &self.instruction {
            let _ = writeln!(s, "instruction={i}");
        }
        let _ = writeln!(s, "group_size={}", self.gather.group_size);
        let _ = writeln!(s, "adapt_steps={}", join(&self.gather.adapt_steps));
        let _ = writeln!(s, "layers={}", join(&self.gather.layers));
        let _ = writeln!(s, "gather_mode={}", self.gather.mode.as_str());
        let _ = writeln!(
            s,
            "blend_mode={}",
            if self.blend_mode == BlendMode::Progressive { "progressive" } else { "static" }
        );
        let _ = writeln!(
            s,
            "blend_direction={}",
            if self.blend_direction == BlendDirection::Literal { "literal" } else { "reversed" }
        );
        let _ = writeln!(s, "tta={}", self.tta_enabled);
        let _ = writeln!(s, "spatiotemporal={}", self.spatiotemporal);
        let _ = writeln!(s, "tta_steps={}", self.tta.steps);
        let _ = writeln!(s, "tta_set_size={}", self.tta.set_size);
        let _ = writeln!(s, "tta_batch={}", self.tta.batch);
        let _ = writeln!(s, "tta_lr={}", self.tta.lr);
        let _ = writeln!(s, "workers={}", self.workers);
        let _ = writeln!(s, "init={}", self.init.as_str());
        let _ = writeln!(s, "steps={}", self.sampler.steps);
        let _ = writeln!(s, "guidance_image={}", self.sampler.guidance.image);
        let _ = writeln!(s, "guidance_instruction={}", self.sampler.guidance.instruction);
        let _ = writeln!(s, "clip_x0={}", self.sampler.clip_x0);
        s
    }

    pub fn guidance(&self) -> Guidance {
        self.sampler.guidance
    }
}
