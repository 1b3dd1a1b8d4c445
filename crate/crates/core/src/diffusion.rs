//! Forward noising, the denoising objective, and deterministic DDIM
//! sampling and inversion with dual-scale classifier-free guidance.
//!
//! Trajectories are indexed by *level* `t ∈ 0..=T` for `T` inference steps:
//! level 0 is the clean image and level `t ≥ 1` sits at training timestep
//! `grid[t − 1]`. Sampling walks `T → 0`; the sampler step index handed to
//! attention hooks is `T − t`, so step 0 is the noisiest.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::attn::{AttnControl, Branch, FrameHooks};
use crate::denoiser::{Conditioning, Denoiser, EditInstruction};
use crate::error::{ensure, Error, Result};
use crate::numkit::checkpoint::write_records;
use crate::numkit::{AdamW, Gradients, Graph, Mode, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 2, Config, "schedule needs at least two steps");
        ensure!(
            0.0 < beta_start && beta_start < beta_end && beta_end < 1.0,
            Config,
            "betas must satisfy 0 < start < end < 1"
        );
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// 256 steps of the usual 1e-4 → 0.02 linear schedule, with both ends
    /// scaled by 1000/256 so the total noise matches the 1000-step original
    /// and the last step is close to pure noise.
    pub fn standard() -> Self {
        let scale = 1000.0 / 256.0;
        Self::linear(256, 1e-4 * scale, 0.02 * scale).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Range(format!("timestep {t} outside 0..{}", self.steps())))
    }

    /// Inference timesteps `grid[i] = round(steps·(i+1)/T) − 1`, ascending.
    pub fn grid(&self, inference_steps: usize) -> Result<Vec<usize>> {
        let n = self.steps();
        ensure!(
            (1..=n).contains(&inference_steps),
            Config,
            "inference steps {inference_steps} outside 1..={n}"
        );
        Ok((0..inference_steps)
            .map(|i| ((n * (i + 1)) as f64 / inference_steps as f64).round() as usize - 1)
            .collect())
    }

    /// Cumulative alpha at trajectory level `level` (level 0 is clean).
    pub fn level_alpha_bar(&self, grid: &[usize], level: usize) -> Result<f64> {
        match level {
            0 => Ok(1.0),
            l if l <= grid.len() => self.alpha_bar(grid[l - 1]),
            l => Err(Error::Range(format!("level {l} outside 0..={}", grid.len()))),
        }
    }
}

/// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    mix(z0, eps, ab)
}

fn mix(x0: &Tensor, eps: &Tensor, ab: f64) -> Result<Tensor> {
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

pub fn randn_like(t: &Tensor, rng: &mut Rng) -> Tensor {
    let data = (0..t.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_parts(t.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub image: f32,
    pub instruction: f32,
}

impl Guidance {
    pub const NONE: Guidance = Guidance {
        image: 1.0,
        instruction: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        self.image == 1.0 && self.instruction == 1.0
    }
}

impl Default for Guidance {
    fn default() -> Self {
        Self {
            image: 1.5,
            instruction: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Inference step count `T`.
    pub steps: usize,
    pub guidance: Guidance,
    /// Clamp each step's clean-frame estimate to the pixel range `[0, 1]`.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            guidance: Guidance::default(),
            clip_x0: true,
        }
    }
}

/// One point of a per-frame trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub frame: usize,
    /// Trajectory level, `0..=T`.
    pub t: usize,
    pub z: Tensor,
}

/// `ε_u + s_I·(ε_img − ε_u) + s_T·(ε_full − ε_img)`. Scales `(1, 1)` return
/// `ε_full` exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_img: &Tensor, eps_full: &Tensor, g: Guidance) -> Result<Tensor> {
    eps_uncond.ensure_shape(eps_img, "cfg_combine")?;
    eps_uncond.ensure_shape(eps_full, "cfg_combine")?;
    if g.is_identity() {
        return Ok(eps_full.clone());
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_img.data())
        .zip(eps_full.data())
        .map(|((&u, &i), &f)| u + g.image * (i - u) + g.instruction * (f - i))
        .collect();
    Ok(Tensor::from_parts(eps_uncond.shape().to_vec(), data))
}

/// Anything that predicts the noise in a noisy frame.
pub trait NoisePredictor: Sync {
    fn predict(&self, z_t: &Tensor, timestep: usize, cond: &Conditioning, ctl: &mut AttnControl) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z_t: &Tensor, timestep: usize, cond: &Conditioning, ctl: &mut AttnControl) -> Result<Tensor> {
        self.predict_noise(z_t, timestep, cond, ctl)
    }
}

/// Guided noise estimate. With identity guidance only the full branch runs.
pub fn guided_eps(
    model: &dyn NoisePredictor,
    z: &Tensor,
    timestep: usize,
    step: usize,
    cond: &Conditioning,
    guidance: Guidance,
    hooks: &mut FrameHooks,
) -> Result<Tensor> {
    let mut run = |branch: Branch| {
        let c = cond.for_branch(branch);
        model.predict(z, timestep, &c, &mut hooks.control(step, branch))
    };
    if guidance.is_identity() {
        return run(Branch::Full);
    }
    let u = run(Branch::Uncond)?;
    let i = run(Branch::Image)?;
    let f = run(Branch::Full)?;
    cfg_combine(&u, &i, &f, guidance)
}

/// Sampling `t → t'` (or inversion `t' → t`) with a fixed noise estimate.
/// With `clip`, the clean estimate is clamped and the noise estimate
/// re-derived from it.
fn ddim_move(z: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64, clip: bool) -> Result<Tensor> {
    let (sa, sb) = (ab_from.sqrt() as f32, (1.0 - ab_from).sqrt() as f32);
    let x0 = z.zip_map(eps, |z, e| (z - sb * e) / sa)?;
    if !clip || sb == 0.0 {
        return mix(&x0, eps, ab_to);
    }
    let x0 = x0.map(|v| v.clamp(0.0, 1.0));
    let eps = z.zip_map(&x0, |z, x| (z - sa * x) / sb)?;
    mix(&x0, &eps, ab_to)
}

/// Deterministic DDIM update from `state.t` to level `t_next < state.t`,
/// using the noise estimate at `state.t`.
pub fn ddim_step(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    state: &LatentState,
    t_next: usize,
    cond: &Conditioning,
    hooks: &mut FrameHooks,
) -> Result<LatentState> {
    ensure!(
        t_next < state.t && state.t <= config.steps,
        Contract,
        "sampling must move to a lower level: {} -> {t_next}",
        state.t
    );
    let grid = schedule.grid(config.steps)?;
    let eps = guided_eps(
        model,
        &state.z,
        grid[state.t - 1],
        config.steps - state.t,
        cond,
        config.guidance,
        hooks,
    )?;
    let ab_from = schedule.level_alpha_bar(&grid, state.t)?;
    let ab_to = schedule.level_alpha_bar(&grid, t_next)?;
    Ok(LatentState {
        frame: state.frame,
        t: t_next,
        z: ddim_move(&state.z, &eps, ab_from, ab_to, config.clip_x0)?,
    })
}

/// Full sampling loop from `z_T`. Before each step `pre_step(t, z_t)` may
/// replace the latent (used for masked blending). Returns levels `T..=0`.
pub fn sample_with(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    frame: usize,
    z_top: Tensor,
    cond: &Conditioning,
    hooks: &mut FrameHooks,
    mut pre_step: impl FnMut(usize, Tensor) -> Result<Tensor>,
) -> Result<Vec<LatentState>> {
    let mut state = LatentState {
        frame,
        t: config.steps,
        z: z_top,
    };
    let mut out = Vec::with_capacity(config.steps + 1);
    while state.t > 0 {
        state.z = pre_step(state.t, state.z)?;
        let next = ddim_step(model, schedule, config, &state, state.t - 1, cond, hooks)?;
        out.push(state);
        state = next;
    }
    out.push(state);
    Ok(out)
}

/// Samples from `z_T` and returns the clean frame.
pub fn sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    frame: usize,
    z_top: Tensor,
    cond: &Conditioning,
    hooks: &mut FrameHooks,
) -> Result<Tensor> {
    let traj = sample_with(model, schedule, config, frame, z_top, cond, hooks, |_, z| Ok(z))?;
    Ok(traj.into_iter().last().expect("non-empty trajectory").z)
}

/// DDIM inversion `z_0 → z_T`, on the same grid as sampling. Step `t−1 → t`
/// uses the noise estimate of the current latent at level `t`'s timestep.
/// Returns `T + 1` states indexed by level.
pub fn ddim_invert(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    frame: usize,
    z0: &Tensor,
    cond: &Conditioning,
    hooks: &mut FrameHooks,
) -> Result<Vec<LatentState>> {
    let grid = schedule.grid(config.steps)?;
    let mut states = vec![LatentState {
        frame,
        t: 0,
        z: z0.clone(),
    }];
    for t in 1..=config.steps {
        let z = &states[t - 1].z;
        let eps = guided_eps(model, z, grid[t - 1], config.steps - t, cond, config.guidance, hooks)?;
        let ab_from = schedule.level_alpha_bar(&grid, t - 1)?;
        let ab_to = schedule.level_alpha_bar(&grid, t)?;
        let z = ddim_move(z, &eps, ab_from, ab_to, config.clip_x0)?;
        states.push(LatentState { frame, t, z });
    }
    Ok(states)
}

/// Writes one file per level, `frameFFFFF_levelLL.traj`.
pub fn dump_trajectory(dir: &Path, states: &[LatentState]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in states {
        let path = dir.join(format!("frame{:05}_level{:02}.traj", s.frame, s.t));
        write_records(&path, [("z", &s.z)])?;
    }
    Ok(())
}

/// A `(source, target, instruction)` example for the denoising objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub source: Tensor,
    pub target: Tensor,
    pub instruction: EditInstruction,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub image: f64,
    pub instruction: f64,
}

impl Default for Dropout {
    fn default() -> Self {
        Self {
            image: 0.1,
            instruction: 0.1,
        }
    }
}

/// The random parts of one training example.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub timestep: usize,
    pub eps: Tensor,
    pub z_t: Tensor,
    pub null_image: bool,
    pub null_instruction: bool,
}

/// Which training timesteps are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestepSampling {
    /// Uniform over `0..T_train`.
    Uniform,
    /// Uniform over the `n`-step inference grid.
    Grid(usize),
}

impl TimestepSampling {
    pub fn draw(&self, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<usize> {
        Ok(match *self {
            TimestepSampling::Uniform => rng.gen_range(0..schedule.steps()),
            TimestepSampling::Grid(n) => {
                let grid = schedule.grid(n)?;
                grid[rng.gen_range(0..grid.len())]
            }
        })
    }
}

pub fn draw_noise(pair: &TrainingPair, schedule: &NoiseSchedule, dropout: Dropout, rng: &mut Rng) -> Result<NoiseDraw> {
    let timestep = rng.gen_range(0..schedule.steps());
    draw_noise_at(pair, schedule, timestep, dropout, rng)
}

/// [`draw_noise`] at a given timestep.
pub fn draw_noise_at(pair: &TrainingPair, schedule: &NoiseSchedule, timestep: usize, dropout: Dropout, rng: &mut Rng) -> Result<NoiseDraw> {
    pair.source.ensure_shape(&pair.target, "training pair")?;
    let null_image = rng.gen_bool(dropout.image);
    let null_instruction = rng.gen_bool(dropout.instruction);
    // Without an instruction the model learns to reproduce the source.
    let x0 = if null_instruction { &pair.source } else { &pair.target };
    let eps = randn_like(x0, rng);
    let z_t = add_noise(x0, &eps, timestep, schedule)?;
    Ok(NoiseDraw {
        timestep,
        eps,
        z_t,
        null_image,
        null_instruction,
    })
}

impl NoiseDraw {
    pub fn conditioning<'a>(&self, pair: &'a TrainingPair) -> Conditioning<'a> {
        Conditioning {
            source: &pair.source,
            instruction: &pair.instruction,
            null_image: self.null_image,
            null_instruction: self.null_instruction,
        }
    }
}

/// Mean squared noise-prediction error for one draw, evaluated only.
pub fn training_loss(
    model: &dyn NoisePredictor,
    pair: &TrainingPair,
    schedule: &NoiseSchedule,
    dropout: Dropout,
    rng: &mut Rng,
) -> Result<f64> {
    let d = draw_noise(pair, schedule, dropout, rng)?;
    let pred = model.predict(&d.z_t, d.timestep, &d.conditioning(pair), &mut AttnControl::passive())?;
    pred.ensure_shape(&d.eps, "training_loss")?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(d.eps.data())
        .map(|(&p, &e)| f64::from(p - e).powi(2))
        .sum::<f64>()
        / n)
}

/// Loss and gradients for one draw.
pub fn loss_and_gradients(den: &Denoiser, pair: &TrainingPair, draw: &NoiseDraw) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(den.params(), Mode::Train);
    let z = g.constant(draw.z_t.clone())?;
    let pred = den.forward(&mut g, z, draw.timestep, &draw.conditioning(pair), &mut AttnControl::passive())?;
    let loss = g.mse(pred, &draw.eps)?;
    let value = f64::from(g.value(loss).data()[0]);
    Ok((value, g.backward(loss)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub dropout: Dropout,
    pub timesteps: TimestepSampling,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            weight_decay: 1e-4,
            dropout: Dropout::default(),
            timesteps: TimestepSampling::Uniform,
            cosine_decay: false,
        }
    }
}

/// Minimizes the denoising objective over `data`, drawing examples
/// uniformly with replacement. Returns the per-step mean batch loss.
pub fn train(den: &mut Denoiser, data: &[TrainingPair], schedule: &NoiseSchedule, config: &TrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    train_with(den, data, schedule, config, rng, |_, _| {})
}

/// [`train`] with a callback receiving `(step, loss)` after every step.
pub fn train_with(
    den: &mut Denoiser,
    data: &[TrainingPair],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    ensure!(!data.is_empty(), Contract, "empty training set");
    ensure!(config.steps >= 1 && config.batch >= 1, Config, "steps and batch must be positive");
    let mut opt = AdamW::new(den.params(), config.lr, config.weight_decay);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if config.cosine_decay {
            let p = step as f32 / config.steps as f32;
            opt.lr = config.lr * 0.5 * (1.0 + (std::f32::consts::PI * p).cos());
        }
        let mut total = Gradients::zeros_like(den.params());
        let mut loss = 0.0;
        for _ in 0..config.batch {
            let pair = &data[rng.gen_range(0..data.len())];
            let timestep = config.timesteps.draw(schedule, rng)?;
            let draw = draw_noise_at(pair, schedule, timestep, config.dropout, rng)?;
            let (l, grads) = loss_and_gradients(den, pair, &draw)?;
            loss += l / config.batch as f64;
            total.accumulate(&grads, 1.0 / config.batch as f32)?;
        }
        if !loss.is_finite() || total.ensure_finite().is_err() {
            return Err(Error::Training {
                step,
                message: format!("loss {loss}"),
            });
        }
        opt.step(den.params_mut(), &total)?;
        if let Some((_, name, _)) = den.params().iter().find(|(_, _, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Training {
                step,
                message: format!("parameter {name} became non-finite"),
            });
        }
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(losses)
}
