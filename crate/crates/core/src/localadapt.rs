//! Masked latent blending with a timestep-dependent mask.
//!
//! At every sampling level `t = T..1` the edited latent and the source's
//! inversion latent are mixed, `z = M_t·z_edit + (1 − M_t)·z_inv`, before
//! the sampler advances. The mask weight `M_t` follows the blend schedule:
//! `M·t/T` (literal), `M·(1 − t/T)` (reversed), or `M` (static).

use std::path::Path;

use crate::attn::FrameHooks;
use crate::denoiser::Conditioning;
use crate::diffusion::{sample, sample_with, LatentState, NoiseSchedule, NoisePredictor, SamplerConfig};
use crate::error::{ensure, Error, Result};
use crate::numkit::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    GroundTruth,
    External,
}

/// Binary region mask. 1 marks the region to edit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
    pub source: MaskSource,
}

impl EditMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>, source: MaskSource) -> Result<Self> {
        ensure!(data.len() == height * width, Dimension, "mask data length {} for {height}x{width}", data.len());
        ensure!(data.iter().all(|v| *v <= 1), Contract, "mask values must be 0 or 1");
        Ok(Self {
            height,
            width,
            data,
            source,
        })
    }

    pub fn from_fn(height: usize, width: usize, source: MaskSource, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| u8::from(f(i / width, i % width))).collect();
        Self {
            height,
            width,
            data,
            source,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, MaskSource::External, |_, _| false)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, MaskSource::External, |_, _| true)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|v| usize::from(*v)).sum()
    }

    pub fn union(&self, other: &EditMask) -> Result<EditMask> {
        self.same_size(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(Self { data, ..self.clone() })
    }

    pub fn xor(&self, other: &EditMask) -> Result<EditMask> {
        self.same_size(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a ^ b).collect();
        Ok(Self { data, ..self.clone() })
    }

    fn same_size(&self, other: &EditMask) -> Result<()> {
        ensure!(
            self.height == other.height && self.width == other.width,
            Dimension,
            "mask sizes {}x{} and {}x{}",
            self.height,
            self.width,
            other.height,
            other.width
        );
        Ok(())
    }

    /// Any pixel within Chebyshev distance `r` of the mask.
    pub fn dilate(&self, r: usize) -> EditMask {
        self.morph(r, true)
    }

    /// Pixels whose whole in-frame `(2r+1)²` neighbourhood is in the mask.
    pub fn erode(&self, r: usize) -> EditMask {
        self.morph(r, false)
    }

    fn morph(&self, r: usize, dilate: bool) -> EditMask {
        let (h, w) = (self.height, self.width);
        Self::from_fn(h, w, self.source, |y, x| {
            let ys = y.saturating_sub(r)..(y + r + 1).min(h);
            let mut hits = ys.flat_map(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).map(move |xx| (yy, xx)));
            if dilate {
                hits.any(|(yy, xx)| self.get(yy, xx))
            } else {
                hits.all(|(yy, xx)| self.get(yy, xx))
            }
        })
    }

    /// Ring of pixels within `r` of the mask edge on either side.
    pub fn boundary_band(&self, r: usize) -> EditMask {
        self.dilate(r).xor(&self.erode(r)).expect("same size")
    }

    /// Max-pools to `height × width`; both must divide the mask size.
    pub fn downsample_to(&self, height: usize, width: usize) -> Result<EditMask> {
        ensure!(
            height > 0 && width > 0 && self.height % height == 0 && self.width % width == 0,
            Dimension,
            "cannot max-pool a {}x{} mask to {height}x{width}",
            self.height,
            self.width
        );
        let (fy, fx) = (self.height / height, self.width / width);
        Ok(Self::from_fn(height, width, self.source, |y, x| {
            (0..fy).any(|dy| (0..fx).any(|dx| self.get(y * fy + dy, x * fx + dx)))
        }))
    }

    /// Mask as an `[H, W, 3]` tensor, scaled by `scale`.
    pub fn to_tensor(&self, scale: f32) -> Tensor {
        let data = self.data.iter().flat_map(|v| [f32::from(*v) * scale; 3]).collect();
        Tensor::from_parts(vec![self.height, self.width, 3], data)
    }

    /// Reads an 8-bit single-channel PNG holding only 0 and 255.
    pub fn read_png(path: &Path) -> Result<EditMask> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        let img = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::format(
                    path,
                    format!("mask must be 8-bit single-channel, got {:?}", other.color()),
                ))
            }
        };
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity((w * h) as usize);
        for p in img.pixels() {
            match p.0[0] {
                0 => data.push(0),
                255 => data.push(1),
                v => return Err(Error::format(path, format!("mask value {v}; only 0 and 255 are allowed"))),
            }
        }
        EditMask::new(h as usize, w as usize, data, MaskSource::External)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|v| v * 255).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf).expect("sized buffer");
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Supplies the edit region of each frame.
pub trait MaskProvider: Sync {
    fn mask(&self, frame: usize) -> Result<EditMask>;
}

/// Masks held in memory, one per frame.
#[derive(Debug, Clone)]
pub struct MaskList(pub Vec<EditMask>);

impl MaskProvider for MaskList {
    fn mask(&self, frame: usize) -> Result<EditMask> {
        self.0
            .get(frame)
            .cloned()
            .ok_or_else(|| Error::Range(format!("no mask for frame {frame} of {}", self.0.len())))
    }
}

/// `frame_%05d.png` files in a directory, max-pooled to the latent size on use.
#[derive(Debug, Clone)]
pub struct MaskDir {
    pub dir: std::path::PathBuf,
}

impl MaskProvider for MaskDir {
    fn mask(&self, frame: usize) -> Result<EditMask> {
        EditMask::read_png(&self.dir.join(format!("frame_{frame:05}.png")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendMode {
    Progressive,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendDirection {
    /// `M_t = M·t/T`.
    Literal,
    /// `M_t = M·(1 − t/T)`.
    Reversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlendSchedule {
    pub mode: BlendMode,
    pub direction: BlendDirection,
    pub steps: usize,
}

impl BlendSchedule {
    pub fn progressive(direction: BlendDirection, steps: usize) -> Self {
        Self {
            mode: BlendMode::Progressive,
            direction,
            steps,
        }
    }

    pub fn static_mask(steps: usize) -> Self {
        Self {
            mode: BlendMode::Static,
            direction: BlendDirection::Literal,
            steps,
        }
    }

    /// Mask weight at level `t` for a pixel inside the mask.
    pub fn coefficient(&self, t: usize) -> Result<f32> {
        ensure!(self.steps >= 1, Config, "blend schedule needs T >= 1");
        ensure!(t <= self.steps, Range, "level {t} beyond T = {}", self.steps);
        let frac = t as f32 / self.steps as f32;
        Ok(match (self.mode, self.direction) {
            (BlendMode::Static, _) => 1.0,
            (BlendMode::Progressive, BlendDirection::Literal) => frac,
            (BlendMode::Progressive, BlendDirection::Reversed) => 1.0 - frac,
        })
    }
}

/// `M_t` as an `[H, W, 3]` tensor.
pub fn mask_at(schedule: &BlendSchedule, mask: &EditMask, t: usize) -> Result<Tensor> {
    Ok(mask.to_tensor(schedule.coefficient(t)?))
}

/// `M_t·z_edit + (1 − M_t)·z_inv`, element-wise.
pub fn blend_latents(z_edit: &Tensor, z_inv: &Tensor, m: &Tensor) -> Result<Tensor> {
    z_edit.ensure_shape(z_inv, "blend_latents")?;
    z_edit.ensure_shape(m, "blend_latents mask")?;
    ensure!(
        m.data().iter().all(|v| (0.0..=1.0).contains(v)),
        Contract,
        "mask weights must lie in [0, 1]"
    );
    let data = z_edit
        .data()
        .iter()
        .zip(z_inv.data())
        .zip(m.data())
        .map(|((&e, &i), &w)| {
            if w == 0.0 {
                i
            } else if w == 1.0 {
                e
            } else {
                w * e + (1.0 - w) * i
            }
        })
        .collect();
    Ok(Tensor::from_parts(z_edit.shape().to_vec(), data))
}

/// Brings a mask to the latent resolution.
pub fn fit_mask(mask: &EditMask, height: usize, width: usize) -> Result<EditMask> {
    if mask.height() == height && mask.width() == width {
        Ok(mask.clone())
    } else {
        mask.downsample_to(height, width)
    }
}

/// Result of a masked edit of one frame.
#[derive(Debug, Clone)]
pub struct LocalEdit {
    pub edited: Tensor,
    /// Plain DDIM reconstruction of the source from its inverted latent.
    pub reconstruction: Tensor,
}

/// Masked edit of one frame.
///
/// `inversion` is the source's inversion trajectory (levels `0..=T`),
/// `recon_cond` the conditioning it was computed with. The edit starts
/// from `z_top`; at each level the latent is blended with the inversion
/// state before the sampler step. The returned frame is
/// `M·z_edit_0 + (1 − M)·recon_0`, so the region outside the mask is the
/// reconstruction exactly.
pub fn guided_local_edit(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    recon_config: &SamplerConfig,
    frame: usize,
    z_top: Tensor,
    cond: &Conditioning,
    recon_cond: &Conditioning,
    inversion: &[LatentState],
    mask: &EditMask,
    blend: &BlendSchedule,
    hooks: &mut FrameHooks,
) -> Result<LocalEdit> {
    ensure!(
        inversion.len() == config.steps + 1 && inversion.iter().enumerate().all(|(l, s)| s.t == l),
        Integrity,
        "inversion trajectory has {} states, sampling grid needs {}",
        inversion.len(),
        config.steps + 1
    );
    ensure!(
        blend.steps == config.steps && recon_config.steps == config.steps,
        Integrity,
        "blend schedule has T = {}, sampler has T = {}",
        blend.steps,
        config.steps
    );
    let shape = inversion[0].z.shape();
    ensure!(z_top.shape() == shape, Dimension, "z_T shape {:?} vs {:?}", z_top.shape(), shape);
    let mask = fit_mask(mask, shape[0], shape[1])?;

    let recon_top = inversion[config.steps].z.clone();
    let reconstruction = sample(model, schedule, recon_config, frame, recon_top, recon_cond, &mut FrameHooks::none(frame))?;

    let traj = sample_with(model, schedule, config, frame, z_top, cond, hooks, |t, z| {
        let m = mask_at(blend, &mask, t)?;
        blend_latents(&z, &inversion[t].z, &m)
    })?;
    let z0 = &traj.last().expect("non-empty").z;
    let edited = blend_latents(z0, &reconstruction, &mask.to_tensor(1.0))?;
    Ok(LocalEdit { edited, reconstruction })
}
