//! Test-time editing adaptation.
//!
//! Edit one root frame, warp the (source, edit) pair with random small
//! affine transforms, and fine-tune a copy of the denoiser on the result so
//! the instruction settles on one visual direction for this video.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;

use crate::attn::FrameHooks;
use crate::denoiser::{manifest_path, Denoiser, EditInstruction};
use crate::diffusion::{train_with, Dropout, NoiseSchedule, TimestepSampling, TrainConfig, TrainingPair};
use crate::editor::FrameEditor;
use crate::error::{ensure, Error, Result};
use crate::numkit::Tensor;
use crate::rng::Rng;
use crate::video::FrameSequence;

pub const MAX_ROTATION: f32 = 5.0;
pub const MAX_TRANSLATION: f32 = 0.05;
pub const MIN_CROP: f32 = 0.75;
pub const MAX_SHEAR: f32 = 10.0;

/// Applied as rotate, translate, shear, then a centred crop resized back to
/// the original size. Sampling is bilinear with edge-replicate fill.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f32,
    /// Fractions of width and height.
    pub translate: (f32, f32),
    /// Side fraction kept, in `[0.75, 1]`.
    pub crop: f32,
    pub shear_deg: f32,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        translate: (0.0, 0.0),
        crop: 1.0,
        shear_deg: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.rotation_deg.abs() <= MAX_ROTATION
                && self.translate.0.abs() <= MAX_TRANSLATION
                && self.translate.1.abs() <= MAX_TRANSLATION
                && (MIN_CROP..=1.0).contains(&self.crop)
                && self.shear_deg.abs() <= MAX_SHEAR,
            Range,
            "affine parameters out of range: {self:?}"
        );
        Ok(())
    }

    /// Source-image position sampled for output position `(x, y)`, both in
    /// continuous pixel coordinates (pixel centres at `i + 0.5`).
    pub fn source_point(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let crop = f64::from(self.crop);
        // Undo crop: output covers the centred crop window.
        let (ux, uy) = ((x - cx) * crop, (y - cy) * crop);
        // Undo shear x' = x + tan(s)·y.
        let k = f64::from(self.shear_deg).to_radians().tan();
        let (sx, sy) = (ux - k * uy, uy);
        // Undo translation.
        let (tx, ty) = (
            sx - f64::from(self.translate.0) * width as f64,
            sy - f64::from(self.translate.1) * height as f64,
        );
        // Undo rotation about the centre.
        let (sin, cos) = f64::from(self.rotation_deg).to_radians().sin_cos();
        (cos * tx + sin * ty + cx, -sin * tx + cos * ty + cy)
    }
}

/// Uniform draw within the allowed ranges.
pub fn sample_affine(rng: &mut Rng) -> AffineParams {
    AffineParams {
        rotation_deg: rng.gen_range(-MAX_ROTATION..=MAX_ROTATION),
        translate: (
            rng.gen_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
            rng.gen_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
        ),
        crop: rng.gen_range(MIN_CROP..=1.0),
        shear_deg: rng.gen_range(-MAX_SHEAR..=MAX_SHEAR),
    }
}

fn bilinear(img: &Tensor, x: f64, y: f64, out: &mut [f32]) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = ((fx - x0) as f32, (fy - y0) as f32);
    let ix = |v: f64| v.clamp(0.0, (w - 1) as f64) as usize;
    let iy = |v: f64| v.clamp(0.0, (h - 1) as f64) as usize;
    let (xa, xb, ya, yb) = (ix(x0), ix(x0 + 1.0), iy(y0), iy(y0 + 1.0));
    let d = img.data();
    for (c, o) in out.iter_mut().enumerate() {
        let p = |yy: usize, xx: usize| d[(yy * w + xx) * 3 + c];
        let top = p(ya, xa) * (1.0 - ax) + p(ya, xb) * ax;
        let bot = p(yb, xa) * (1.0 - ax) + p(yb, xb) * ax;
        *o = top * (1.0 - ay) + bot * ay;
    }
}

pub fn apply_affine(img: &Tensor, p: &AffineParams) -> Result<Tensor> {
    p.validate()?;
    let s = img.shape();
    ensure!(s.len() == 3 && s[2] == 3, Dimension, "apply_affine: expected [H, W, 3], got {s:?}");
    let (h, w) = (s[0], s[1]);
    let mut out = vec![0.0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = p.source_point(x as f64 + 0.5, y as f64 + 0.5, w, h);
            let i = (y * w + x) * 3;
            bilinear(img, sx, sy, &mut out[i..i + 3]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningTriple {
    pub source: Tensor,
    pub edited: Tensor,
    pub instruction: EditInstruction,
    pub params: AffineParams,
}

/// `n` triples; triple 0 is the untransformed pair, each later one warps
/// both images with one fresh draw.
pub fn build_tuning_set(
    s_root: &Tensor,
    e_root: &Tensor,
    instruction: &EditInstruction,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<TuningTriple>> {
    ensure!(n >= 1, Contract, "tuning set size must be at least 1");
    s_root.ensure_shape(e_root, "build_tuning_set")?;
    let params: Vec<AffineParams> = std::iter::once(AffineParams::IDENTITY)
        .chain((1..n).map(|_| sample_affine(rng)))
        .collect();
    params
        .into_par_iter()
        .map(|p| {
            Ok(TuningTriple {
                source: apply_affine(s_root, &p)?,
                edited: apply_affine(e_root, &p)?,
                instruction: *instruction,
                params: p,
            })
        })
        .collect()
}

/// Which frame gets the root edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RootSelector {
    #[default]
    First,
    Fixed(usize),
    Random(u64),
}

impl RootSelector {
    pub fn select(&self, len: usize) -> Result<usize> {
        ensure!(len > 0, Contract, "cannot select a root frame from an empty sequence");
        let idx = match *self {
            RootSelector::First => 0,
            RootSelector::Fixed(i) => i,
            RootSelector::Random(seed) => Rng::seed_from_u64(seed).gen_range(0..len),
        };
        ensure!(idx < len, Range, "root frame {idx} outside 0..{len}");
        Ok(idx)
    }
}

#[derive(Debug, Clone)]
pub struct RootEdit {
    pub index: usize,
    pub source: Tensor,
    pub edited: Tensor,
}

pub fn edit_root(editor: &FrameEditor, seq: &FrameSequence, instruction: &EditInstruction, selector: RootSelector) -> Result<RootEdit> {
    let index = selector.select(seq.len())?;
    let source = seq.frame(index).clone();
    let edited = editor.edit(index, &source, instruction, &mut FrameHooks::none(index))?;
    Ok(RootEdit { index, source, edited })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtaConfig {
    pub set_size: usize,
    pub lr: f32,
    pub batch: usize,
    pub steps: usize,
    pub weight_decay: f32,
    pub timesteps: TimestepSampling,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            set_size: 64,
            lr: 5e-4,
            batch: 16,
            steps: 100,
            weight_decay: 1e-4,
            timesteps: TimestepSampling::Grid(10),
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.set_size >= 1 && self.batch >= 1 && self.steps >= 1,
            Config,
            "tta sizes and steps must be positive"
        );
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), Config, "tta learning rate must be finite and non-negative");
        Ok(())
    }
}

/// Tuning result: the tuned copy and its per-step losses.
#[derive(Debug, Clone)]
pub struct Tuned {
    pub model: Denoiser,
    pub losses: Vec<f64>,
}

/// Fine-tunes a copy of `den` on `set`; `den` itself is untouched.
pub fn finetune(den: &Denoiser, set: &[TuningTriple], schedule: &NoiseSchedule, config: &TtaConfig, rng: &mut Rng) -> Result<Tuned> {
    config.validate()?;
    ensure!(!set.is_empty(), Contract, "empty tuning set");
    let data: Vec<TrainingPair> = set
        .iter()
        .map(|t| TrainingPair {
            source: t.source.clone(),
            target: t.edited.clone(),
            instruction: t.instruction,
        })
        .collect();
    let mut model = den.clone();
    let train = TrainConfig {
        steps: config.steps,
        batch: config.batch,
        lr: config.lr,
        weight_decay: config.weight_decay,
        dropout: Dropout::default(),
        timesteps: config.timesteps,
        cosine_decay: false,
    };
    let losses = train_with(&mut model, &data, schedule, &train, rng, |_, _| {})?;
    Ok(Tuned { model, losses })
}

/// Full adaptation: root edit, tuning set, fine-tune.
pub fn adapt(
    editor: &FrameEditor,
    den: &Denoiser,
    seq: &FrameSequence,
    instruction: &EditInstruction,
    selector: RootSelector,
    config: &TtaConfig,
) -> Result<(Tuned, RootEdit)> {
    let root = edit_root(editor, seq, instruction, selector)?;
    let mut rng = Rng::seed_from_u64(config.seed);
    let set = build_tuning_set(&root.source, &root.edited, instruction, config.set_size, &mut rng)?;
    let tuned = finetune(den, &set, editor.schedule, config, &mut rng)?;
    Ok((tuned, root))
}

/// `<base>-tta`.
pub fn tuned_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push("-tta");
    PathBuf::from(s)
}

/// Saves the tuned model next to `base` and appends the tuning config and
/// root index to its manifest.
pub fn save_tuned(tuned: &Denoiser, base: &Path, config: &TtaConfig, root_index: usize) -> Result<PathBuf> {
    let path = tuned_path(base);
    tuned.save(&path)?;
    let mpath = manifest_path(&path);
    let mut m = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let _ = writeln!(m, "tta_set_size={}", config.set_size);
    let _ = writeln!(m, "tta_lr={}", config.lr);
    let _ = writeln!(m, "tta_batch={}", config.batch);
    let _ = writeln!(m, "tta_steps={}", config.steps);
    let _ = writeln!(m, "tta_weight_decay={}", config.weight_decay);
    let _ = writeln!(m, "tta_seed={}", config.seed);
    let _ = writeln!(m, "tta_root_index={root_index}");
    std::fs::write(&mpath, m).map_err(|e| Error::io(&mpath, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::rng::Rng;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn smooth(n: usize) -> Tensor {
        let mut data = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f32 / n as f32, y as f32 / n as f32);
                data.extend([0.5 + 0.3 * (3.0 * fx).sin(), 0.5 + 0.3 * (2.0 * fy).cos(), 0.4 + 0.2 * (fx + fy)]);
            }
        }
        Tensor::new(vec![n, n, 3], data).unwrap()
    }

    #[test]
    fn ranges_monte_carlo() {
        let mut rng = Rng::seed_from_u64(0);
        let draws: Vec<AffineParams> = (0..10_000).map(|_| sample_affine(&mut rng)).collect();
        assert!(draws.iter().all(|p| p.validate().is_ok()));
        let max_rot = draws.iter().map(|p| p.rotation_deg.abs()).fold(0.0, f32::max);
        let min_crop = draws.iter().map(|p| p.crop).fold(1.0, f32::min);
        assert!(max_rot > 4.9 && min_crop < 0.76);
        let mut a = Rng::seed_from_u64(3);
        let mut b = Rng::seed_from_u64(3);
        assert_eq!(sample_affine(&mut a), sample_affine(&mut b));
    }

    #[test]
    fn identity_is_bitwise() {
        let img = smooth(16);
        assert_eq!(apply_affine(&img, &AffineParams::IDENTITY).unwrap(), img);
    }

    #[test]
    fn one_pixel_translation_shifts_step() {
        let n = 32;
        let img = Tensor::new(
            vec![n, n, 3],
            (0..n * n).flat_map(|i| if i % n < 16 { [0.0; 3] } else { [1.0; 3] }).collect(),
        )
        .unwrap();
        let p = AffineParams {
            translate: (1.0 / n as f32, 0.0),
            ..AffineParams::IDENTITY
        };
        let out = apply_affine(&img, &p).unwrap();
        for y in 0..n {
            for x in 1..n {
                let expect = if x - 1 < 16 { 0.0 } else { 1.0 };
                assert!((out.data()[(y * n + x) * 3] - expect).abs() < 1e-6, "({y},{x})");
            }
        }
    }

    #[test]
    fn rotation_round_trip_loss_is_small() {
        let img = smooth(32);
        let plus = AffineParams { rotation_deg: 5.0, ..AffineParams::IDENTITY };
        let minus = AffineParams { rotation_deg: -5.0, ..AffineParams::IDENTITY };
        let back = apply_affine(&apply_affine(&img, &plus).unwrap(), &minus).unwrap();
        assert!(back.mean_abs_diff(&img) < 0.02);
        assert!(matches!(
            apply_affine(&img, &AffineParams { rotation_deg: 6.0, ..AffineParams::IDENTITY }),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn tuning_set_pairs_share_one_warp() {
        let n = 16;
        // Edited image is the source with channels 0 and 1 swapped; a shared
        // warp keeps that relation for every triple.
        let mut s = Vec::new();
        let mut e = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let (gx, gy) = (x as f32 / n as f32, y as f32 / n as f32);
                s.extend([gx, gy, 0.25]);
                e.extend([gy, gx, 0.25]);
            }
        }
        let s = Tensor::new(vec![n, n, 3], s).unwrap();
        let e = Tensor::new(vec![n, n, 3], e).unwrap();
        let instr = EditInstruction::parse("invert_style").unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let set = build_tuning_set(&s, &e, &instr, 8, &mut rng).unwrap();
        assert_eq!(set.len(), 8);
        assert_eq!(set[0].source, s);
        assert_eq!(set[0].edited, e);
        for t in &set[1..] {
            assert_ne!(t.source, s);
            for (a, b) in t.source.data().chunks(3).zip(t.edited.data().chunks(3)) {
                assert_eq!((a[0], a[1]), (b[1], b[0]));
            }
            // The x-ramp channel equals the warped coordinate itself.
            let (sx, _) = t.params.source_point(8.5, 8.5, n, n);
            let expect = ((sx - 0.5).clamp(0.0, (n - 1) as f64) / n as f64) as f32;
            assert!((t.source.data()[(8 * n + 8) * 3] - expect).abs() < 1e-5);
        }
        let only = build_tuning_set(&s, &e, &instr, 1, &mut rng).unwrap();
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].params, AffineParams::IDENTITY);
        let mut r1 = Rng::seed_from_u64(9);
        let mut r2 = Rng::seed_from_u64(9);
        assert_eq!(
            build_tuning_set(&s, &e, &instr, 4, &mut r1).unwrap(),
            build_tuning_set(&s, &e, &instr, 4, &mut r2).unwrap()
        );
    }

    #[test]
    fn selectors() {
        assert_eq!(RootSelector::First.select(7).unwrap(), 0);
        assert_eq!(RootSelector::Fixed(3).select(7).unwrap(), 3);
        assert!(RootSelector::Fixed(9).select(7).is_err());
        assert!(matches!(RootSelector::First.select(0), Err(Error::Contract(_))));
        let a = RootSelector::Random(5).select(100).unwrap();
        assert_eq!(a, RootSelector::Random(5).select(100).unwrap());
    }

    #[test]
    fn zero_lr_finetune_is_identity_and_copy_on_tune() {
        let cfg = DenoiserConfig {
            channels: [8, 8, 8],
            resolution: 16,
            ..Default::default()
        };
        let den = Denoiser::init(cfg, 0).unwrap();
        let before = den.params().clone();
        let img = smooth(16);
        let instr = EditInstruction::parse("darken_bg:0.5").unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let set = build_tuning_set(&img, &img.map(|v| v * 0.5), &instr, 4, &mut rng).unwrap();
        let schedule = NoiseSchedule::standard();
        let frozen = TtaConfig { lr: 0.0, steps: 1, batch: 2, ..Default::default() };
        let t = finetune(&den, &set, &schedule, &frozen, &mut rng).unwrap();
        assert_eq!(t.model.params(), &before);
        let live = TtaConfig { steps: 30, batch: 4, lr: 3e-3, ..Default::default() };
        let mut r1 = Rng::seed_from_u64(4);
        let t = finetune(&den, &set, &schedule, &live, &mut r1).unwrap();
        assert_eq!(den.params(), &before);
        assert_ne!(t.model.params(), &before);
        let mut r2 = Rng::seed_from_u64(4);
        assert_eq!(finetune(&den, &set, &schedule, &live, &mut r2).unwrap().model.params(), t.model.params());
        assert!(matches!(finetune(&den, &[], &schedule, &live, &mut r2), Err(Error::Contract(_))));
    }

    #[test]
    fn tuned_checkpoint_has_suffix_and_manifest() {
        let cfg = DenoiserConfig { channels: [8, 8, 8], resolution: 16, ..Default::default() };
        let den = Denoiser::init(cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        let p = save_tuned(&den, &base, &TtaConfig::default(), 3).unwrap();
        assert!(p.to_string_lossy().ends_with("model-tta"));
        let m = std::fs::read_to_string(manifest_path(&p)).unwrap();
        assert!(m.contains("tta_root_index=3") && m.contains("tta_steps=100"));
        Denoiser::load(&p).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn warp_preserves_range(seed in 0u64..10_000) {
            let mut rng = Rng::seed_from_u64(seed);
            let p = sample_affine(&mut rng);
            let out = apply_affine(&smooth(16), &p).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
