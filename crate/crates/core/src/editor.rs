//! Single-frame editing: the per-frame unit that TTA, gather and swap all
//! call. Optionally confined by a mask through local latent adaptation.

use crate::attn::{Branch, FrameHooks};
use crate::denoiser::{Conditioning, EditInstruction};
use crate::diffusion::{ddim_invert, randn_like, sample, Guidance, LatentState, NoisePredictor, NoiseSchedule, SamplerConfig};
use crate::error::{ensure, Result};
use crate::localadapt::{guided_local_edit, BlendSchedule, MaskProvider};
use crate::numkit::Tensor;
use crate::rng::SeedStreams;

/// Where sampling starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Gaussian noise drawn from the `sampling` stream for the frame index.
    Noise,
    /// One noise draw shared by every frame.
    SharedNoise,
    /// The top of the frame's own DDIM inversion.
    Inverted,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Noise => "noise",
            InitMode::SharedNoise => "shared-noise",
            InitMode::Inverted => "inverted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "noise" => Some(InitMode::Noise),
            "shared-noise" => Some(InitMode::SharedNoise),
            "inverted" => Some(InitMode::Inverted),
            _ => None,
        }
    }
}

/// Mask source plus blending schedule for local edits.
#[derive(Clone, Copy)]
pub struct LocalMasks<'a> {
    pub provider: &'a dyn MaskProvider,
    pub blend: BlendSchedule,
}

#[derive(Debug, Clone)]
pub struct FrameEdit {
    pub edited: Tensor,
    /// DDIM reconstruction of the source, when a mask was applied.
    pub reconstruction: Option<Tensor>,
}

#[derive(Clone, Copy)]
pub struct FrameEditor<'a> {
    pub model: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
    pub init: InitMode,
    pub streams: SeedStreams,
    pub masks: Option<LocalMasks<'a>>,
}

impl<'a> FrameEditor<'a> {
    pub fn new(model: &'a dyn NoisePredictor, schedule: &'a NoiseSchedule, sampler: SamplerConfig, seed: u64) -> Self {
        Self {
            model,
            schedule,
            sampler,
            init: InitMode::Noise,
            streams: SeedStreams::new(seed),
            masks: None,
        }
    }

    pub fn with_masks(self, masks: Option<LocalMasks<'a>>) -> Self {
        Self { masks, ..self }
    }

    pub fn with_init(self, init: InitMode) -> Self {
        Self { init, ..self }
    }

    pub fn with_model(self, model: &'a dyn NoisePredictor) -> Self {
        Self { model, ..self }
    }

    /// Sampler used for inversion and reconstruction: unguided, null
    /// instruction.
    pub fn recon_config(&self) -> SamplerConfig {
        SamplerConfig {
            guidance: Guidance::NONE,
            ..self.sampler
        }
    }

    pub fn invert(&self, frame: usize, source: &Tensor, instruction: &EditInstruction) -> Result<Vec<LatentState>> {
        let cond = Conditioning::new(source, instruction).for_branch(Branch::Image);
        ddim_invert(
            self.model,
            self.schedule,
            &self.recon_config(),
            frame,
            source,
            &cond,
            &mut FrameHooks::none(frame),
        )
    }

    /// Invert then sample back, both without an instruction.
    pub fn reconstruct(&self, frame: usize, source: &Tensor, instruction: &EditInstruction) -> Result<Tensor> {
        let inv = self.invert(frame, source, instruction)?;
        let cond = Conditioning::new(source, instruction).for_branch(Branch::Image);
        let top = inv[self.sampler.steps].z.clone();
        sample(self.model, self.schedule, &self.recon_config(), frame, top, &cond, &mut FrameHooks::none(frame))
    }

    pub fn noise(&self, frame: usize, like: &Tensor) -> Tensor {
        let index = if self.init == InitMode::SharedNoise { 0 } else { frame as u64 };
        randn_like(like, &mut self.streams.indexed("sampling", index))
    }

    pub fn edit(&self, frame: usize, source: &Tensor, instruction: &EditInstruction, hooks: &mut FrameHooks) -> Result<Tensor> {
        Ok(self.edit_detailed(frame, source, instruction, hooks)?.edited)
    }

    /// Edits `source` as frame `frame`. The output is clamped to `[0, 1]`.
    pub fn edit_detailed(
        &self,
        frame: usize,
        source: &Tensor,
        instruction: &EditInstruction,
        hooks: &mut FrameHooks,
    ) -> Result<FrameEdit> {
        ensure!(hooks.frame == frame, Contract, "hooks for frame {} used on frame {frame}", hooks.frame);
        let cond = Conditioning::new(source, instruction);
        let needs_inversion = self.masks.is_some() || self.init == InitMode::Inverted;
        let inversion = if needs_inversion {
            Some(self.invert(frame, source, instruction)?)
        } else {
            None
        };
        let z_top = match (self.init, &inversion) {
            (InitMode::Inverted, Some(inv)) => inv[self.sampler.steps].z.clone(),
            _ => self.noise(frame, source),
        };
        let unit = |t: Tensor| t.map(|v| v.clamp(0.0, 1.0));
        match (self.masks, inversion) {
            (Some(m), Some(inv)) => {
                let mask = m.provider.mask(frame)?;
                let recon_cond = Conditioning::new(source, instruction).for_branch(Branch::Image);
                let r = guided_local_edit(
                    self.model,
                    self.schedule,
                    &self.sampler,
                    &self.recon_config(),
                    frame,
                    z_top,
                    &cond,
                    &recon_cond,
                    &inv,
                    &mask,
                    &m.blend,
                    hooks,
                )?;
                Ok(FrameEdit {
                    edited: unit(r.edited),
                    reconstruction: Some(unit(r.reconstruction)),
                })
            }
            _ => Ok(FrameEdit {
                edited: unit(sample(self.model, self.schedule, &self.sampler, frame, z_top, &cond, hooks)?),
                reconstruction: None,
            }),
        }
    }
}
