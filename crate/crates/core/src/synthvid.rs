//! Procedural videos of moving flat-colored shapes over textured
//! backgrounds, with exact foreground masks and ground-truth edit targets.

use std::collections::BTreeMap;
use std::f32::consts::TAU;
use std::fmt::Write as _;

use rand::{Rng as _, SeedableRng};

use crate::denoiser::{parse_key_values, EditCode, EditInstruction, ParamKind};
use crate::diffusion::TrainingPair;
use crate::error::{ensure, Error, Result};
use crate::localadapt::{EditMask, MaskList, MaskSource};
use crate::numkit::Tensor;
use crate::rng::Rng;
use crate::video::FrameSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown shape kind {s:?}")))
    }

    /// Whether a point at offset `(dx, dy)` from the center is covered.
    fn covers(self, dx: f32, dy: f32, size: f32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= size * size,
            ShapeKind::Square => dx.abs().max(dy.abs()) <= 0.85 * size,
            ShapeKind::Triangle => dy >= -size && dy <= 0.7 * size && dx.abs() <= 0.6 * (dy + size),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    /// Pixels per frame.
    Linear { vx: f32, vy: f32 },
    /// `a·sin(2π·f/period + phase)` per axis.
    Sinusoidal {
        ax: f32,
        ay: f32,
        px: f32,
        py: f32,
        phase: f32,
    },
}

impl Motion {
    pub fn offset(&self, frame: usize) -> (f32, f32) {
        let f = frame as f32;
        match *self {
            Motion::Linear { vx, vy } => (vx * f, vy * f),
            Motion::Sinusoidal { ax, ay, px, py, phase } => {
                (ax * (TAU * f / px + phase).sin(), ay * (TAU * f / py + phase).sin())
            }
        }
    }

    pub fn is_static(&self) -> bool {
        match *self {
            Motion::Linear { vx, vy } => vx == 0.0 && vy == 0.0,
            Motion::Sinusoidal { ax, ay, .. } => ax == 0.0 && ay == 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    /// Half-extent in pixels.
    pub size: f32,
    /// Center at frame 0, in pixel coordinates.
    pub start: (f32, f32),
    pub motion: Motion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// 0 vertical gradient, 1 horizontal gradient, 2 diagonal stripes, 3 radial.
    pub background: usize,
    pub bg_colors: [[f32; 3]; 2],
    pub shapes: Vec<ShapeSpec>,
    pub resolution: usize,
    pub frames: usize,
    /// Seeds the static background texture.
    pub seed: u64,
    /// Allows shapes to leave the frame entirely.
    pub exit: bool,
}

/// One shape as drawn in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    pub size: f32,
    pub center: (f32, f32),
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: Tensor,
    pub background: Tensor,
    pub shapes: Vec<ShapeInstance>,
    /// Union of all shape coverages.
    pub mask: EditMask,
}

#[derive(Debug, Clone)]
pub struct RenderedVideo {
    pub spec: SceneSpec,
    pub frames: Vec<RenderedFrame>,
}

impl RenderedVideo {
    pub fn sequence(&self) -> FrameSequence {
        FrameSequence::new(self.frames.iter().map(|f| f.image.clone()).collect()).expect("rendered frames share a shape")
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn lerp3(a: [f32; 3], b: [f32; 3], w: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * w, a[1] + (b[1] - a[1]) * w, a[2] + (b[2] - a[2]) * w]
}

fn background(spec: &SceneSpec) -> Tensor {
    let n = spec.resolution;
    let mut rng = Rng::seed_from_u64(spec.seed ^ 0x5eed_ba5e);
    let denom = (n.max(2) - 1) as f32;
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f32 / denom, y as f32 / denom);
            let w = match spec.background % 4 {
                0 => fy,
                1 => fx,
                2 => 0.5 + 0.5 * (TAU * (fx + fy) * 2.0).sin(),
                _ => (((fx - 0.5).powi(2) + (fy - 0.5).powi(2)).sqrt() * 2.0).min(1.0),
            };
            let c = lerp3(spec.bg_colors[0], spec.bg_colors[1], w);
            let tex: f32 = rng.gen_range(-0.03..0.03);
            data.extend(c.iter().map(|v| (v + tex).clamp(0.0, 1.0)));
        }
    }
    Tensor::new(vec![n, n, 3], data).expect("sized")
}

fn coverage(shape: &ShapeInstance, n: usize) -> EditMask {
    EditMask::from_fn(n, n, MaskSource::GroundTruth, |y, x| {
        shape
            .kind
            .covers(x as f32 + 0.5 - shape.center.0, y as f32 + 0.5 - shape.center.1, shape.size)
    })
}

/// Draws `shapes` over `background` in order; returns the image and the
/// union mask.
pub fn compose(background: &Tensor, shapes: &[ShapeInstance]) -> (Tensor, EditMask) {
    let n = background.shape()[0];
    let mut img = background.clone();
    let mut mask = EditMask::zeros(n, n);
    mask.source = MaskSource::GroundTruth;
    for s in shapes {
        let cov = coverage(s, n);
        for (i, px) in img.data_mut().chunks_mut(3).enumerate() {
            if cov.data()[i] == 1 {
                px.copy_from_slice(&s.color);
            }
        }
        mask = mask.union(&cov).expect("same size");
    }
    (img, mask)
}

fn instances(spec: &SceneSpec, frame: usize) -> Vec<ShapeInstance> {
    spec.shapes
        .iter()
        .map(|s| {
            let (ox, oy) = s.motion.offset(frame);
            ShapeInstance {
                kind: s.kind,
                color: s.color,
                size: s.size,
                center: (s.start.0 + ox, s.start.1 + oy),
            }
        })
        .collect()
}

fn validate(spec: &SceneSpec) -> Result<()> {
    ensure!(spec.resolution >= 4, Spec, "resolution {} too small", spec.resolution);
    ensure!(spec.frames >= 1, Spec, "scene needs at least one frame");
    ensure!((1..=2).contains(&spec.shapes.len()), Spec, "scene needs one or two shapes");
    for s in &spec.shapes {
        ensure!(
            s.color.iter().all(|c| (0.0..=1.0).contains(c)),
            Spec,
            "shape color {:?} outside [0, 1]",
            s.color
        );
        ensure!(s.size > 0.0, Spec, "shape size must be positive");
    }
    for c in spec.bg_colors.iter().flatten() {
        ensure!((0.0..=1.0).contains(c), Spec, "background color outside [0, 1]");
    }
    Ok(())
}

/// Renders one frame of a scene.
pub fn render_frame(spec: &SceneSpec, frame: usize) -> Result<RenderedFrame> {
    validate(spec)?;
    render_with_background(spec, frame, &background(spec))
}

fn render_with_background(spec: &SceneSpec, frame: usize, bg: &Tensor) -> Result<RenderedFrame> {
    let shapes = instances(spec, frame);
    if !spec.exit {
        for (i, s) in shapes.iter().enumerate() {
            if coverage(s, spec.resolution).area() == 0 {
                return Err(Error::Spec(format!("shape {i} is fully out of frame at frame {frame}")));
            }
        }
    }
    let (image, mask) = compose(bg, &shapes);
    Ok(RenderedFrame {
        image,
        background: bg.clone(),
        shapes,
        mask,
    })
}

/// Renders every frame; deterministic given the scene.
pub fn render_video(spec: &SceneSpec) -> Result<RenderedVideo> {
    validate(spec)?;
    let bg = background(spec);
    let frames = (0..spec.frames)
        .map(|f| render_with_background(spec, f, &bg))
        .collect::<Result<_>>()?;
    Ok(RenderedVideo {
        spec: spec.clone(),
        frames,
    })
}

/// Exact foreground masks of a rendered video.
pub fn ground_truth_mask_provider(video: &RenderedVideo) -> MaskList {
    MaskList(video.frames.iter().map(|f| f.mask.clone()).collect())
}

/// Region masks of `task` for every frame of `video`.
pub fn task_mask_provider(video: &RenderedVideo, task: &EditTask) -> MaskList {
    MaskList(video.frames.iter().map(|f| task.region(f)).collect())
}

fn saturated_color(rng: &mut Rng) -> [f32; 3] {
    let h = rng.gen_range(0.0..1.0);
    let s = rng.gen_range(0.65..1.0);
    let v = rng.gen_range(0.65..1.0);
    hsv_to_rgb(h, s, v)
}

fn muted_color(rng: &mut Rng) -> [f32; 3] {
    let h = rng.gen_range(0.0..1.0);
    let s = rng.gen_range(0.0..0.35);
    let v = rng.gen_range(0.25..0.85);
    hsv_to_rgb(h, s, v)
}

/// Options for [`SceneSpec::random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    pub resolution: usize,
    pub frames: usize,
    pub max_shapes: usize,
    /// Require every shape to move.
    pub moving: bool,
}

impl SceneSpec {
    /// A random scene whose shapes stay fully in frame for every frame.
    pub fn random(opts: SceneOptions, rng: &mut Rng) -> Self {
        let n = opts.resolution as f32;
        let count = rng.gen_range(1..=opts.max_shapes.clamp(1, 2));
        let shapes = (0..count)
            .map(|_| {
                let size = rng.gen_range(0.14 * n..0.22 * n);
                let kind = ShapeKind::ALL[rng.gen_range(0..3)];
                let lo = size + 1.0;
                let hi = n - size - 1.0;
                let motion = if rng.gen_bool(0.5) && opts.frames > 1 {
                    let span = (hi - lo).max(0.0);
                    let speed_cap = (span / (opts.frames - 1) as f32).min(0.9);
                    let speed = if opts.moving {
                        rng.gen_range(0.3 * speed_cap..=speed_cap)
                    } else {
                        rng.gen_range(0.0..=speed_cap)
                    };
                    let angle = rng.gen_range(0.0..TAU);
                    Motion::Linear {
                        vx: speed * angle.cos(),
                        vy: speed * angle.sin(),
                    }
                } else {
                    let amp_cap = ((hi - lo) / 2.0).max(0.0);
                    let lo_amp = if opts.moving { 0.4 * amp_cap } else { 0.0 };
                    Motion::Sinusoidal {
                        ax: rng.gen_range(lo_amp..=amp_cap),
                        ay: rng.gen_range(0.0..=amp_cap * 0.5),
                        px: rng.gen_range(16.0..40.0),
                        py: rng.gen_range(16.0..40.0),
                        phase: rng.gen_range(0.0..TAU),
                    }
                };
                // Place the start so the whole trajectory stays inside [lo, hi].
                let (mut min_x, mut max_x, mut min_y, mut max_y) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
                for f in 0..opts.frames {
                    let (ox, oy) = motion.offset(f);
                    min_x = min_x.min(ox);
                    max_x = max_x.max(ox);
                    min_y = min_y.min(oy);
                    max_y = max_y.max(oy);
                }
                let pick = |rng: &mut Rng, lo_off: f32, hi_off: f32| {
                    let a = lo - lo_off;
                    let b = hi - hi_off;
                    if a < b {
                        rng.gen_range(a..=b)
                    } else {
                        0.5 * (a + b)
                    }
                };
                let sx = pick(rng, min_x, max_x);
                let sy = pick(rng, min_y, max_y);
                ShapeSpec {
                    kind,
                    color: saturated_color(rng),
                    size,
                    start: (sx, sy),
                    motion,
                }
            })
            .collect();
        Self {
            background: rng.gen_range(0..4),
            bg_colors: [muted_color(rng), muted_color(rng)],
            shapes,
            resolution: opts.resolution,
            frames: opts.frames,
            seed: rng.gen(),
            exit: false,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c3 = |c: &[f32; 3]| format!("{},{},{}", c[0], c[1], c[2]);
        let _ = writeln!(s, "resolution={}", self.resolution);
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "exit={}", self.exit);
        let _ = writeln!(s, "background={}", self.background);
        let _ = writeln!(s, "bg0={}", c3(&self.bg_colors[0]));
        let _ = writeln!(s, "bg1={}", c3(&self.bg_colors[1]));
        let _ = writeln!(s, "shapes={}", self.shapes.len());
        for (i, sh) in self.shapes.iter().enumerate() {
            let _ = writeln!(s, "shape{i}.kind={}", sh.kind.name());
            let _ = writeln!(s, "shape{i}.color={}", c3(&sh.color));
            let _ = writeln!(s, "shape{i}.size={}", sh.size);
            let _ = writeln!(s, "shape{i}.start={},{}", sh.start.0, sh.start.1);
            let m = match sh.motion {
                Motion::Linear { vx, vy } => format!("linear:{vx},{vy}"),
                Motion::Sinusoidal { ax, ay, px, py, phase } => format!("sin:{ax},{ay},{px},{py},{phase}"),
            };
            let _ = writeln!(s, "shape{i}.motion={m}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text);
        let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| Error::Spec(format!("missing key {k}")));
        let floats = |k: &str, n: usize| -> Result<Vec<f32>> {
            let v: Vec<f32> = get(k)?
                .split(',')
                .map(|x| x.trim().parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Spec(format!("bad numbers for {k}")))?;
            ensure!(v.len() == n, Spec, "{k} needs {n} values");
            Ok(v)
        };
        let int = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Spec(format!("bad integer for {k}"))) };
        let c3 = |k: &str| -> Result<[f32; 3]> {
            let v = floats(k, 3)?;
            Ok([v[0], v[1], v[2]])
        };
        let count = int("shapes")? as usize;
        let mut shapes = Vec::with_capacity(count);
        for i in 0..count {
            let start = floats(&format!("shape{i}.start"), 2)?;
            let motion_key = format!("shape{i}.motion");
            let motion_text = get(&motion_key)?;
            let (kind, nums) = motion_text
                .split_once(':')
                .ok_or_else(|| Error::Spec(format!("bad motion {motion_text:?}")))?;
            let nums: Vec<f32> = nums
                .split(',')
                .map(|x| x.trim().parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Spec(format!("bad motion {motion_text:?}")))?;
            let motion = match (kind, nums.as_slice()) {
                ("linear", [vx, vy]) => Motion::Linear { vx: *vx, vy: *vy },
                ("sin", [ax, ay, px, py, phase]) => Motion::Sinusoidal {
                    ax: *ax,
                    ay: *ay,
                    px: *px,
                    py: *py,
                    phase: *phase,
                },
                _ => return Err(Error::Spec(format!("bad motion {motion_text:?}"))),
            };
            shapes.push(ShapeSpec {
                kind: ShapeKind::parse(get(&format!("shape{i}.kind"))?)?,
                color: c3(&format!("shape{i}.color"))?,
                size: floats(&format!("shape{i}.size"), 1)?[0],
                start: (start[0], start[1]),
                motion,
            });
        }
        let spec = Self {
            background: int("background")? as usize,
            bg_colors: [c3("bg0")?, c3("bg1")?],
            shapes,
            resolution: int("resolution")? as usize,
            frames: int("frames")? as usize,
            seed: int("seed")?,
            exit: get("exit").map(|v| v == "true").unwrap_or(false),
        };
        validate(&spec)?;
        Ok(spec)
    }
}

/// HSV in `[0, 1]³` to RGB.
pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv(c: [f32; 3]) -> (f32, f32, f32) {
    let [r, g, b] = c;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h.rem_euclid(1.0), s, max)
}

/// Opponent-colour chroma `(a, b)`; its angle tracks HSV hue.
pub fn chroma(c: [f32; 3]) -> (f32, f32) {
    (c[0] - 0.5 * (c[1] + c[2]), 0.866_025_4 * (c[1] - c[2]))
}

const GLOW: [f32; 3] = [1.0, 0.8, 0.3];
const GLOW_RADIUS: usize = 2;

/// An instruction together with its ground-truth effect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditTask {
    pub instruction: EditInstruction,
}

impl EditTask {
    pub fn new(instruction: EditInstruction) -> Self {
        Self { instruction }
    }

    pub fn code(&self) -> EditCode {
        self.instruction.code()
    }

    fn param(&self) -> f32 {
        self.instruction.param().unwrap_or(0.0)
    }

    fn swapped_shapes(&self, frame: &RenderedFrame) -> Vec<ShapeInstance> {
        let kind = ShapeKind::ALL[self.param() as usize];
        frame.shapes.iter().map(|s| ShapeInstance { kind, ..s.clone() }).collect()
    }

    /// Pixels the edit may change.
    pub fn region(&self, frame: &RenderedFrame) -> EditMask {
        let n = frame.mask.height();
        let mut m = match self.code() {
            EditCode::RecolorFg => frame.mask.clone(),
            EditCode::DarkenBg | EditCode::BrightenBg => {
                EditMask::from_fn(n, n, MaskSource::GroundTruth, |y, x| !frame.mask.get(y, x))
            }
            EditCode::SwapShape => {
                let (_, new_mask) = compose(&frame.background, &self.swapped_shapes(frame));
                frame.mask.union(&new_mask).expect("same size")
            }
            EditCode::InvertStyle => EditMask::ones(n, n),
            EditCode::AddGlow => frame.mask.dilate(GLOW_RADIUS),
        };
        m.source = MaskSource::GroundTruth;
        m
    }

    /// The ground-truth edited frame.
    pub fn apply(&self, frame: &RenderedFrame) -> Tensor {
        let p = self.param();
        let mut out = frame.image.clone();
        let per_pixel = |out: &mut Tensor, region: &EditMask, f: &dyn Fn([f32; 3]) -> [f32; 3]| {
            for (i, px) in out.data_mut().chunks_mut(3).enumerate() {
                if region.data()[i] == 1 {
                    let c = f([px[0], px[1], px[2]]);
                    px.copy_from_slice(&c);
                }
            }
        };
        match self.code() {
            EditCode::RecolorFg => per_pixel(&mut out, &frame.mask, &|c| {
                let (h, s, v) = rgb_to_hsv(c);
                if h == p {
                    c
                } else {
                    hsv_to_rgb(p, s, v)
                }
            }),
            EditCode::DarkenBg => per_pixel(&mut out, &self.region(frame), &|c| c.map(|v| v * p)),
            EditCode::BrightenBg => per_pixel(&mut out, &self.region(frame), &|c| c.map(|v| v + p * (1.0 - v))),
            EditCode::SwapShape => out = compose(&frame.background, &self.swapped_shapes(frame)).0,
            EditCode::InvertStyle => out = out.map(|v| 1.0 - v),
            EditCode::AddGlow => per_pixel(&mut out, &self.region(frame), &|c| {
                [0, 1, 2].map(|k| (c[k] + 0.5 * p * GLOW[k]).min(1.0))
            }),
        }
        out
    }

    /// Scalar summary of how far `image` has moved along this edit,
    /// evaluated on `frame`'s ground-truth region.
    pub fn statistic(&self, image: &Tensor, frame: &RenderedFrame) -> f64 {
        let region = self.region(frame);
        let px = |i: usize| {
            let d = &image.data()[3 * i..3 * i + 3];
            [d[0], d[1], d[2]]
        };
        let mean_over = |f: &dyn Fn(usize) -> f64| {
            let idx: Vec<usize> = (0..region.data().len()).filter(|i| region.data()[*i] == 1).collect();
            if idx.is_empty() {
                0.0
            } else {
                idx.iter().map(|i| f(*i)).sum::<f64>() / idx.len() as f64
            }
        };
        match self.code() {
            EditCode::RecolorFg => {
                let (ct, st) = ((TAU * self.param()).cos(), (TAU * self.param()).sin());
                mean_over(&|i| {
                    let (a, b) = chroma(px(i));
                    f64::from(a * ct + b * st)
                })
            }
            EditCode::DarkenBg | EditCode::BrightenBg => {
                mean_over(&|i| px(i).iter().map(|v| f64::from(*v)).sum::<f64>() / 3.0)
            }
            EditCode::SwapShape => {
                let gt = self.apply(frame);
                mean_over(&|i| {
                    -(0..3)
                        .map(|k| f64::from((image.data()[3 * i + k] - gt.data()[3 * i + k]).abs()))
                        .sum::<f64>()
                        / 3.0
                })
            }
            EditCode::InvertStyle => mean_over(&|i| {
                (0..3)
                    .map(|k| f64::from((image.data()[3 * i + k] - 0.5) * (frame.image.data()[3 * i + k] - 0.5)))
                    .sum::<f64>()
                    / 3.0
            }),
            EditCode::AddGlow => mean_over(&|i| {
                let c = px(i);
                f64::from(c[0] * GLOW[0] + c[1] * GLOW[1] + c[2] * GLOW[2])
            }),
        }
    }

    /// `statistic(image) − statistic(source)`.
    pub fn effect(&self, image: &Tensor, frame: &RenderedFrame) -> f64 {
        self.statistic(image, frame) - self.statistic(&frame.image, frame)
    }
}

/// `(source, ground-truth target)` for one rendered frame.
pub fn make_edit_pair(frame: &RenderedFrame, task: &EditTask) -> (Tensor, Tensor) {
    (frame.image.clone(), task.apply(frame))
}

/// A random valid parameter for `code`.
pub fn random_instruction(code: EditCode, rng: &mut Rng) -> EditInstruction {
    let p = match code.param_kind() {
        ParamKind::None => None,
        ParamKind::HalfOpen(lo, hi) => Some(rng.gen_range(lo..hi)),
        ParamKind::Closed(lo, hi) => Some(rng.gen_range(lo..=hi)),
        ParamKind::Choice(n) => Some(rng.gen_range(0..n) as f32),
    };
    EditInstruction::new(code, p).expect("in range by construction")
}

/// `n_pairs` training pairs cycling through `catalog`, each from a random
/// frame of a fresh random scene.
pub fn training_corpus(catalog: &[EditCode], n_pairs: usize, seed: u64, resolution: usize) -> Result<Vec<TrainingPair>> {
    ensure!(!catalog.is_empty(), Catalog, "empty catalog");
    ensure!(
        n_pairs >= catalog.len(),
        Contract,
        "{n_pairs} pairs cannot cover {} codes",
        catalog.len()
    );
    let mut rng = Rng::seed_from_u64(seed);
    let opts = SceneOptions {
        resolution,
        frames: 48,
        max_shapes: 2,
        moving: false,
    };
    (0..n_pairs)
        .map(|k| {
            let code = catalog[k % catalog.len()];
            let spec = SceneSpec::random(opts, &mut rng);
            let frame = render_frame(&spec, rng.gen_range(0..spec.frames))?;
            let instruction = random_instruction(code, &mut rng);
            let (source, target) = make_edit_pair(&frame, &EditTask::new(instruction));
            Ok(TrainingPair {
                source,
                target,
                instruction,
            })
        })
        .collect()
}

/// Count of pairs per code.
pub fn code_histogram(pairs: &[TrainingPair]) -> BTreeMap<EditCode, usize> {
    let mut h = BTreeMap::new();
    for p in pairs {
        *h.entry(p.instruction.code()).or_default() += 1;
    }
    h
}
