//! Gather-and-swap attention adaptation.
//!
//! Gather edits a few evenly spaced frames in sequence, each attending to
//! the keys/values of the frame before it, and collects their own keys and
//! values into one attention group. Swap then re-edits every frame with
//! that group substituted at the adapted (layer, step) slots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::attn::{read_kv_store, write_kv_store, Branch, CaptureSession, FrameHooks, KvInjector, KvOverride, KvRecord, LayerId, OverrideMode};
use crate::denoiser::{Denoiser, EditInstruction};
use crate::editor::FrameEditor;
use crate::error::{ensure, Error, Result};
use crate::numkit::Tensor;
use crate::tta::{adapt, RootSelector, TtaConfig};
use crate::video::FrameSequence;

/// What each later gather frame attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatherMode {
    /// Only the frame edited just before it.
    PrevFrame,
    /// Everything gathered so far.
    RunningGroup,
    /// No cross-frame conditioning while gathering.
    Independent,
}

impl GatherMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GatherMode::PrevFrame => "prev-frame",
            GatherMode::RunningGroup => "running-group",
            GatherMode::Independent => "independent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prev-frame" => Some(GatherMode::PrevFrame),
            "running-group" => Some(GatherMode::RunningGroup),
            "independent" => Some(GatherMode::Independent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherConfig {
    /// `k + 1`.
    pub group_size: usize,
    /// Sampler step indices, 0 = noisiest.
    pub adapt_steps: BTreeSet<usize>,
    pub layers: Vec<LayerId>,
    pub mode: GatherMode,
    /// How gather frames use their predecessor's keys/values.
    pub gather_override: OverrideMode,
}

impl Default for GatherConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            adapt_steps: (0..8).collect(),
            layers: vec![0, 1, 2, 3],
            mode: GatherMode::PrevFrame,
            gather_override: OverrideMode::Replace,
        }
    }
}

impl GatherConfig {
    pub fn validate(&self, known_layers: &[LayerId], steps: usize) -> Result<()> {
        ensure!(self.group_size >= 1, Config, "group size must be at least 1");
        ensure!(!self.layers.is_empty(), Config, "no adapted attention layers");
        for l in &self.layers {
            ensure!(known_layers.contains(l), Config, "unknown attention layer {l}");
        }
        if let Some(&s) = self.adapt_steps.iter().next_back() {
            ensure!(s < steps, Config, "adapted step {s} outside the {steps}-step grid");
        }
        Ok(())
    }
}

/// `k + 1` evenly spaced indices from `0` to `N − 1`.
pub fn select_group_frames(n: usize, k: usize) -> Result<Vec<usize>> {
    ensure!(k + 1 <= n, Contract, "group of {} frames from a {n}-frame video", k + 1);
    if k == 0 {
        return Ok(vec![0]);
    }
    Ok((0..=k).map(|i| ((i * (n - 1)) as f64 / k as f64).round() as usize).collect())
}

type SlotKey = (LayerId, usize, Branch);

#[derive(Debug, Clone, PartialEq)]
pub struct SlotKv {
    pub k: Tensor,
    pub v: Tensor,
    /// Frames concatenated into this slot.
    pub contributions: usize,
}

/// Group keys/values per (layer, step, branch), frame-major in gather order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionGroup {
    pub frames: Vec<usize>,
    pub slots: BTreeMap<SlotKey, SlotKv>,
    /// Per-frame records in gather order.
    pub records: Vec<KvRecord>,
}

impl AttentionGroup {
    pub fn from_records(records: Vec<KvRecord>) -> Result<Self> {
        let mut g = AttentionGroup::default();
        let mut by_frame: Vec<usize> = Vec::new();
        for r in &records {
            if by_frame.last() != Some(&r.frame) {
                ensure!(!by_frame.contains(&r.frame), Integrity, "records for frame {} are not contiguous", r.frame);
                by_frame.push(r.frame);
            }
        }
        for frame in by_frame {
            let part: Vec<KvRecord> = records.iter().filter(|r| r.frame == frame).cloned().collect();
            g.append(frame, part)?;
        }
        Ok(g)
    }

    /// Appends one frame's captured records.
    pub fn append(&mut self, frame: usize, records: Vec<KvRecord>) -> Result<()> {
        ensure!(!self.frames.contains(&frame), Integrity, "frame {frame} already in the group");
        for r in &records {
            ensure!(r.frame == frame, Integrity, "record for frame {} appended as frame {frame}", r.frame);
            let key = (r.layer, r.step, r.branch);
            match self.slots.get_mut(&key) {
                Some(slot) => {
                    slot.k = Tensor::concat_rows(&[&slot.k, &r.k])?;
                    slot.v = Tensor::concat_rows(&[&slot.v, &r.v])?;
                    slot.contributions += 1;
                }
                None => {
                    self.slots.insert(
                        key,
                        SlotKv {
                            k: r.k.clone(),
                            v: r.v.clone(),
                            contributions: 1,
                        },
                    );
                }
            }
        }
        self.frames.push(frame);
        self.records.extend(records);
        Ok(())
    }

    /// Checks that every adapted (layer, step) slot holds one contribution
    /// per group frame, for every guidance branch present in the group.
    pub fn verify(&self, config: &GatherConfig) -> Result<()> {
        let n = self.frames.len();
        let branches: BTreeSet<Branch> = self.slots.keys().map(|k| k.2).collect();
        ensure!(
            config.adapt_steps.is_empty() || !branches.is_empty(),
            Integrity,
            "group has no slots"
        );
        for &layer in &config.layers {
            for &step in &config.adapt_steps {
                for &branch in &branches {
                    let slot = self.slots.get(&(layer, step, branch)).ok_or_else(|| {
                        Error::Integrity(format!("group has no slot for layer {layer} step {step} branch {}", branch.as_str()))
                    })?;
                    ensure!(
                        slot.contributions == n,
                        Integrity,
                        "slot layer {layer} step {step} has {} contributions for {n} frames",
                        slot.contributions
                    );
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_kv_store(dir, &self.records)
    }

    /// Loads a stored group; frame order follows the stored frame indices.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut records = read_kv_store(dir)?;
        records.sort_by_key(|r| r.frame);
        Self::from_records(records)
    }
}

/// Serves group slots as overrides at adapted (layer, step) pairs.
pub struct GroupInjector<'a> {
    pub group: &'a AttentionGroup,
    pub layers: &'a [LayerId],
    pub steps: &'a BTreeSet<usize>,
    pub mode: OverrideMode,
}

impl KvInjector for GroupInjector<'_> {
    fn kv_override(&self, layer: LayerId, step: usize, branch: Branch) -> Option<KvOverride> {
        if !self.layers.contains(&layer) || !self.steps.contains(&step) {
            return None;
        }
        self.group.slots.get(&(layer, step, branch)).map(|s| KvOverride {
            mode: self.mode,
            k: s.k.clone(),
            v: s.v.clone(),
        })
    }
}

fn arm(editor_layers: &[LayerId], config: &GatherConfig) -> Result<CaptureSession> {
    CaptureSession::arm(editor_layers, &config.layers, config.adapt_steps.iter().copied())
}

#[derive(Debug, Clone)]
pub struct GatherOutput {
    pub group: AttentionGroup,
    /// Gather-stage edits of the group frames, in gather order.
    pub edits: Vec<Tensor>,
}

/// Sequentially edits the group frames, conditioning each on its
/// predecessor (or the running group), and collects their keys/values.
pub fn gather_stage(
    editor: &FrameEditor,
    known_layers: &[LayerId],
    seq: &FrameSequence,
    instruction: &EditInstruction,
    config: &GatherConfig,
) -> Result<GatherOutput> {
    config.validate(known_layers, editor.sampler.steps)?;
    let frames = select_group_frames(seq.len(), config.group_size - 1)?;
    let mut group = AttentionGroup::default();
    let mut prev = AttentionGroup::default();
    let mut edits = Vec::with_capacity(frames.len());
    for (j, &f) in frames.iter().enumerate() {
        let mut capture = arm(known_layers, config)?;
        let source = group_conditioning(&group, &prev, config.mode);
        let injector = GroupInjector {
            group: source,
            layers: &config.layers,
            steps: &config.adapt_steps,
            mode: config.gather_override,
        };
        let mut hooks = FrameHooks {
            frame: f,
            capture: Some(&mut capture),
            injector: if j == 0 || config.mode == GatherMode::Independent { None } else { Some(&injector) },
        };
        edits.push(editor.edit(f, seq.frame(f), instruction, &mut hooks)?);
        let records = capture.into_records();
        prev = AttentionGroup::default();
        prev.append(f, records.clone())?;
        group.append(f, records)?;
    }
    group.verify(config)?;
    Ok(GatherOutput { group, edits })
}

fn group_conditioning<'g>(group: &'g AttentionGroup, prev: &'g AttentionGroup, mode: GatherMode) -> &'g AttentionGroup {
    match mode {
        GatherMode::PrevFrame => prev,
        GatherMode::RunningGroup | GatherMode::Independent => group,
    }
}

/// Runs `f` for every frame on a pool of `workers` threads; results are
/// placed by frame index.
pub fn parallel_frames<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    ensure!(workers >= 1, Config, "workers must be at least 1");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(i))).unwrap_or_else(|p| {
                    let message = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panic".into());
                    Err(Error::Worker { frame: i, message })
                });
                r.map_err(|e| match e {
                    Error::Worker { .. } => e,
                    other => Error::Worker {
                        frame: i,
                        message: other.to_string(),
                    },
                })
            })
            .collect()
    })
}

/// Re-edits every frame with the group swapped in at the adapted slots.
pub fn swap_stage(
    editor: &FrameEditor,
    seq: &FrameSequence,
    instruction: &EditInstruction,
    group: &AttentionGroup,
    config: &GatherConfig,
    workers: usize,
) -> Result<FrameSequence> {
    group.verify(config)?;
    let injector = GroupInjector {
        group,
        layers: &config.layers,
        steps: &config.adapt_steps,
        mode: OverrideMode::Replace,
    };
    Ok(swap_stage_timed(editor, seq, instruction, &injector, workers)?.0)
}

fn swap_stage_timed(
    editor: &FrameEditor,
    seq: &FrameSequence,
    instruction: &EditInstruction,
    injector: &GroupInjector,
    workers: usize,
) -> Result<(FrameSequence, Vec<f64>)> {
    let out = parallel_frames(workers, seq.len(), |i| {
        let t = Instant::now();
        let mut hooks = FrameHooks {
            frame: i,
            capture: None,
            injector: Some(injector),
        };
        let e = editor.edit(i, seq.frame(i), instruction, &mut hooks)?;
        Ok((e, t.elapsed().as_secs_f64()))
    })?;
    let (frames, times): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((FrameSequence::new(frames)?, times))
}

/// Baseline: every frame edited on its own.
pub fn edit_independent(editor: &FrameEditor, seq: &FrameSequence, instruction: &EditInstruction, workers: usize) -> Result<FrameSequence> {
    let frames = parallel_frames(workers, seq.len(), |i| editor.edit(i, seq.frame(i), instruction, &mut FrameHooks::none(i)))?;
    FrameSequence::new(frames)
}

#[derive(Debug, Clone)]
pub struct VideoEditConfig {
    pub gather: GatherConfig,
    pub tta: Option<TtaConfig>,
    pub root: RootSelector,
    pub workers: usize,
    /// Gather and swap; when off every frame is edited on its own.
    pub spatiotemporal: bool,
}

impl Default for VideoEditConfig {
    fn default() -> Self {
        Self {
            gather: GatherConfig::default(),
            tta: Some(TtaConfig::default()),
            root: RootSelector::First,
            workers: 1,
            spatiotemporal: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub frames: usize,
    pub group_frames: Vec<usize>,
    pub tta_root: Option<usize>,
    pub workers: usize,
    pub tta_seconds: f64,
    pub gather_seconds: f64,
    pub swap_seconds: f64,
    /// Swap-stage wall time per frame.
    pub frame_seconds: Vec<f64>,
    pub config: Vec<(String, String)>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "group_frames={}", list(&self.group_frames));
        let _ = writeln!(s, "tta_root={}", self.tta_root.map(|r| r.to_string()).unwrap_or_else(|| "none".into()));
        let _ = writeln!(s, "workers={}", self.workers);
        let _ = writeln!(s, "tta_seconds={:.3}", self.tta_seconds);
        let _ = writeln!(s, "gather_seconds={:.3}", self.gather_seconds);
        let _ = writeln!(s, "swap_seconds={:.3}", self.swap_seconds);
        let times = self.frame_seconds.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "frame_seconds={times}");
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct VideoEdit {
    pub frames: FrameSequence,
    pub group: AttentionGroup,
    pub manifest: RunManifest,
}

/// Optional TTA, then gather, then swap.
pub fn edit_video(
    base: &FrameEditor,
    den: &Denoiser,
    seq: &FrameSequence,
    instruction: &EditInstruction,
    config: &VideoEditConfig,
) -> Result<VideoEdit> {
    let t0 = Instant::now();
    let tuned;
    let (editor, tta_root) = match &config.tta {
        Some(tc) => {
            let (t, root) = adapt(&base.with_model(den), den, seq, instruction, config.root, tc)?;
            tuned = t.model;
            (base.with_model(&tuned), Some(root.index))
        }
        None => (base.with_model(den), None),
    };
    let tta_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let group = if config.spatiotemporal {
        gather_stage(&editor, &den.layer_ids(), seq, instruction, &config.gather)?.group
    } else {
        AttentionGroup::default()
    };
    let gather_seconds = t1.elapsed().as_secs_f64();
    let t2 = Instant::now();
    let empty = BTreeSet::new();
    let injector = GroupInjector {
        group: &group,
        layers: &config.gather.layers,
        steps: if config.spatiotemporal { &config.gather.adapt_steps } else { &empty },
        mode: OverrideMode::Replace,
    };
    if config.spatiotemporal {
        group.verify(&config.gather)?;
    }
    let (frames, frame_seconds) = swap_stage_timed(&editor, seq, instruction, &injector, config.workers)?;
    let swap_seconds = t2.elapsed().as_secs_f64();
    let g = &config.gather;
    let manifest = RunManifest {
        frames: seq.len(),
        group_frames: group.frames.clone(),
        tta_root,
        workers: config.workers,
        tta_seconds,
        gather_seconds,
        swap_seconds,
        frame_seconds,
        config: vec![
            ("instruction".into(), instruction.to_string()),
            ("group_size".into(), g.group_size.to_string()),
            (
                "adapt_steps".into(),
                g.adapt_steps.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("layers".into(), g.layers.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
            ("gather_mode".into(), g.mode.as_str().into()),
            ("init".into(), editor.init.as_str().into()),
            ("local".into(), editor.masks.is_some().to_string()),
            ("spatiotemporal".into(), config.spatiotemporal.to_string()),
            ("seed".into(), editor.streams.seed().to_string()),
        ],
    };
    Ok(VideoEdit {
        frames,
        group,
        manifest,
    })
}
