//! Paired ablations over pipeline toggles, plus the chunked long-video
//! baseline.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::attn::AttnKind;
use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{ensure, Result};
use crate::localadapt::{BlendMode, MaskList};
use crate::metrics::{FlowConfig, MetricsReport};
use crate::rng::SeedStreams;
use crate::stadapt::{GatherMode, RunManifest};
use crate::synthvid::task_mask_provider;
use crate::video::FrameSequence;

use super::{run_edit, BenchCase, RunConfig};

/// One component of the pipeline that a cell can switch off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Toggle {
    Tta,
    Spatiotemporal,
    CrossAttn,
    Local,
    Progressive,
    Gather,
}

impl Toggle {
    pub const ALL: [Toggle; 6] = [
        Toggle::Tta,
        Toggle::Spatiotemporal,
        Toggle::CrossAttn,
        Toggle::Local,
        Toggle::Progressive,
        Toggle::Gather,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Toggle::Tta => "w/o TTA",
            Toggle::Spatiotemporal => "w/o SA",
            Toggle::CrossAttn => "w/o CA",
            Toggle::Local => "w/o LLA",
            Toggle::Progressive => "static blend",
            Toggle::Gather => "no gather",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub tta: bool,
    pub spatiotemporal: bool,
    /// Keep cross-attention layers among the adapted slots.
    pub cross_attn: bool,
    pub local: bool,
    pub progressive: bool,
    /// Chain gather frames; off gathers each group frame on its own.
    pub gather: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        tta: true,
        spatiotemporal: true,
        cross_attn: true,
        local: true,
        progressive: true,
        gather: true,
    };

    pub fn without(self, t: Toggle) -> Self {
        let mut c = self;
        match t {
            Toggle::Tta => c.tta = false,
            Toggle::Spatiotemporal => c.spatiotemporal = false,
            Toggle::CrossAttn => c.cross_attn = false,
            Toggle::Local => c.local = false,
            Toggle::Progressive => c.progressive = false,
            Toggle::Gather => c.gather = false,
        }
        c
    }

    pub fn name(&self) -> String {
        let off: Vec<&str> = Toggle::ALL
            .iter()
            .filter(|t| self.is_off(**t))
            .map(|t| t.label())
            .collect();
        if off.is_empty() {
            "full".into()
        } else {
            off.join(" + ")
        }
    }

    fn is_off(&self, t: Toggle) -> bool {
        match t {
            Toggle::Tta => !self.tta,
            Toggle::Spatiotemporal => !self.spatiotemporal,
            Toggle::CrossAttn => !self.cross_attn,
            Toggle::Local => !self.local,
            Toggle::Progressive => !self.progressive,
            Toggle::Gather => !self.gather,
        }
    }

    /// `base` with this cell's switches applied.
    pub fn apply(&self, base: &RunConfig, den: &Denoiser) -> RunConfig {
        let mut cfg = base.clone();
        cfg.tta_enabled = base.tta_enabled && self.tta;
        cfg.spatiotemporal = base.spatiotemporal && self.spatiotemporal;
        if !self.progressive {
            cfg.blend_mode = BlendMode::Static;
        }
        if !self.cross_attn {
            cfg.gather.layers.retain(|l| den.layer_kind(*l) == Some(AttnKind::SelfAttn));
        }
        if !self.gather {
            cfg.gather.mode = GatherMode::Independent;
        }
        cfg
    }
}

/// Cells × paired (seed, scene) runs. Cell 0 is the reference for the
/// paired summaries.
#[derive(Debug, Clone)]
pub struct AblationMatrix {
    pub cells: Vec<Toggles>,
    pub seeds: Vec<u64>,
    pub cases: Vec<BenchCase>,
    pub base: RunConfig,
    /// Chunk length for the chunked baseline row, if wanted.
    pub chunked: Option<usize>,
}

impl AblationMatrix {
    /// One benchmark case per seed, generated from that same seed.
    pub fn from_seeds(cells: Vec<Toggles>, seeds: Vec<u64>, base: RunConfig, frames: usize, code: crate::denoiser::EditCode) -> Result<Self> {
        let cases = seeds
            .iter()
            .map(|&s| BenchCase::generate(s, frames, base.resolution, code))
            .collect::<Result<_>>()?;
        Ok(Self {
            cells,
            seeds,
            cases,
            base,
            chunked: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub seed: u64,
    pub frames: FrameSequence,
    pub report: MetricsReport,
    pub manifest: RunManifest,
}

/// Paired difference `cell − reference` over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedStat {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    /// Two-sided p-value of a paired t-test; 1 when undefined.
    pub p_two_sided: f64,
    /// One-sided p-value for `mean > 0`.
    pub p_greater: f64,
}

pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, f64::NAN);
    }
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn paired(cell: &[f64], reference: &[f64]) -> PairedStat {
    let d: Vec<f64> = cell.iter().zip(reference).map(|(a, b)| a - b).collect();
    let (mean, stderr) = mean_stderr(&d);
    let (p2, pg) = if d.len() >= 2 && stderr > 0.0 {
        let t = mean / stderr;
        let dist = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).expect("positive degrees of freedom");
        (2.0 * (1.0 - dist.cdf(t.abs())), 1.0 - dist.cdf(t))
    } else if d.len() >= 2 && mean != 0.0 {
        (0.0, if mean > 0.0 { 0.0 } else { 1.0 })
    } else {
        (1.0, 1.0)
    };
    PairedStat {
        n: d.len(),
        mean,
        stderr,
        p_two_sided: p2,
        p_greater: pg,
    }
}

#[derive(Debug, Clone)]
pub struct PairedSummary {
    pub cell: String,
    pub tem_con: PairedStat,
    pub pixel_mse: PairedStat,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub names: Vec<String>,
    /// `runs[cell][seed]`.
    pub runs: Vec<Vec<CellRun>>,
    pub chunked: Option<Vec<CellRun>>,
    /// One per non-reference cell, plus the chunked row; empty with one seed.
    pub paired: Vec<PairedSummary>,
}

fn masks_for(case: &BenchCase, local: bool) -> Option<MaskList> {
    local.then(|| task_mask_provider(&case.video, &case.task))
}

fn evaluate(case: &BenchCase, frames: &FrameSequence) -> Result<MetricsReport> {
    MetricsReport::evaluate(frames, &case.source(), Some((&case.task, &case.video.frames)), FlowConfig::default())
}

pub fn run_cell(base: &RunConfig, den: &Denoiser, schedule: &NoiseSchedule, case: &BenchCase, seed: u64, cell: Toggles) -> Result<CellRun> {
    let mut cfg = cell.apply(base, den);
    cfg.seed = Some(seed);
    let masks = masks_for(case, cell.local);
    let seq = case.source();
    let edit = run_edit(&cfg, den, schedule, &seq, &case.instruction, masks.as_ref().map(|m| m as _))?;
    Ok(CellRun {
        seed,
        report: evaluate(case, &edit.frames)?,
        frames: edit.frames,
        manifest: edit.manifest,
    })
}

/// Chunked baseline: `chunk`-frame pieces, each a separate run of `cell`
/// with its own seed, concatenated.
pub fn run_chunked(
    base: &RunConfig,
    den: &Denoiser,
    schedule: &NoiseSchedule,
    case: &BenchCase,
    seed: u64,
    cell: Toggles,
    chunk: usize,
) -> Result<CellRun> {
    ensure!(chunk >= 2, Config, "chunk must hold at least two frames");
    let seq = case.source();
    let masks = masks_for(case, cell.local);
    let base = &cell.apply(base, den);
    let streams = SeedStreams::new(seed);
    let mut frames = Vec::with_capacity(seq.len());
    let mut manifest = RunManifest::default();
    let mut start = 0;
    let mut c = 0u64;
    while start < seq.len() {
        let end = (start + chunk).min(seq.len());
        let mut cfg = base.clone();
        cfg.seed = Some(streams.child_seed(&format!("chunk-{c}")));
        let piece = seq.slice(start, end)?;
        let piece_masks = masks.as_ref().map(|m| MaskList(m.0[start..end].to_vec()));
        let e = run_edit(&cfg, den, schedule, &piece, &case.instruction, piece_masks.as_ref().map(|m| m as _))?;
        manifest.tta_seconds += e.manifest.tta_seconds;
        manifest.gather_seconds += e.manifest.gather_seconds;
        manifest.swap_seconds += e.manifest.swap_seconds;
        manifest.frame_seconds.extend(e.manifest.frame_seconds);
        manifest.group_frames.extend(e.manifest.group_frames.iter().map(|g| g + start));
        frames.extend(e.frames.into_frames());
        start = end;
        c += 1;
    }
    manifest.frames = seq.len();
    manifest.workers = base.workers;
    manifest.config = vec![("chunk".into(), chunk.to_string()), ("seed".into(), seed.to_string())];
    let frames = FrameSequence::new(frames)?;
    Ok(CellRun {
        seed,
        report: evaluate(case, &frames)?,
        frames,
        manifest,
    })
}

pub fn run_ablation(matrix: &AblationMatrix, den: &Denoiser, schedule: &NoiseSchedule) -> Result<AblationReport> {
    ensure!(!matrix.cells.is_empty(), Config, "ablation needs at least one cell");
    ensure!(
        matrix.seeds.len() == matrix.cases.len() && !matrix.seeds.is_empty(),
        Config,
        "need one scene per seed ({} seeds, {} scenes)",
        matrix.seeds.len(),
        matrix.cases.len()
    );
    let mut runs = Vec::with_capacity(matrix.cells.len());
    for cell in &matrix.cells {
        let row = matrix
            .cases
            .iter()
            .zip(&matrix.seeds)
            .map(|(case, &seed)| run_cell(&matrix.base, den, schedule, case, seed, *cell))
            .collect::<Result<Vec<_>>>()?;
        runs.push(row);
    }
    let chunked = match matrix.chunked {
        Some(n) => Some(
            matrix
                .cases
                .iter()
                .zip(&matrix.seeds)
                .map(|(case, &seed)| run_chunked(&matrix.base, den, schedule, case, seed, matrix.cells[0], n))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let names: Vec<String> = matrix.cells.iter().map(|c| c.name()).collect();
    let mut paired_rows = Vec::new();
    if matrix.seeds.len() >= 2 {
        let col = |rows: &[CellRun], f: fn(&MetricsReport) -> f64| rows.iter().map(|r| f(&r.report)).collect::<Vec<_>>();
        let (rt, rp) = (col(&runs[0], |r| r.tem_con), col(&runs[0], |r| r.pixel_mse));
        let others = runs.iter().zip(&names).skip(1).map(|(r, n)| (n.clone(), r.as_slice()));
        let chunk_row = chunked.as_deref().map(|r| ("chunked".to_string(), r));
        for (name, rows) in others.chain(chunk_row) {
            paired_rows.push(PairedSummary {
                cell: name,
                tem_con: paired(&col(rows, |r| r.tem_con), &rt),
                pixel_mse: paired(&col(rows, |r| r.pixel_mse), &rp),
            });
        }
    }
    Ok(AblationReport {
        names,
        runs,
        chunked,
        paired: paired_rows,
    })
}

/// Indices `i` of Tem-Con pairs `(i, i + 1)` that straddle a chunk edge.
pub fn boundary_pairs(frames: usize, chunk: usize) -> Vec<usize> {
    (0..frames.saturating_sub(1)).filter(|i| (i + 1) % chunk == 0).collect()
}

/// Pools per-pair series from several runs and splits them at chunk
/// boundaries. Returns `(boundary mean, interior mean, stderr of the
/// difference)`.
pub fn boundary_split(runs: &[Vec<f64>], chunk: usize) -> (f64, f64, f64) {
    let (mut bv, mut iv) = (Vec::new(), Vec::new());
    for series in runs {
        let b = boundary_pairs(series.len() + 1, chunk);
        for (i, &v) in series.iter().enumerate() {
            if b.contains(&i) {
                bv.push(v);
            } else {
                iv.push(v);
            }
        }
    }
    let (bm, be) = mean_stderr(&bv);
    let (im, ie) = mean_stderr(&iv);
    (bm, im, (be * be + ie * ie).sqrt())
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>12} {:>12} {:>12}", "cell", "Tem-Con", "Pixel-MSE", "edit acc");
        let mut row = |name: &str, rows: &[CellRun]| {
            let (t, _) = mean_stderr(&rows.iter().map(|r| r.report.tem_con).collect::<Vec<_>>());
            let (p, _) = mean_stderr(&rows.iter().map(|r| r.report.pixel_mse).collect::<Vec<_>>());
            let (a, _) = mean_stderr(&rows.iter().map(|r| r.report.edit_accuracy.unwrap_or(f64::NAN)).collect::<Vec<_>>());
            let _ = writeln!(s, "{name:<24} {t:>12.6} {p:>12.6} {a:>12.4}");
        };
        for (n, r) in self.names.iter().zip(&self.runs) {
            row(n, r);
        }
        if let Some(c) = &self.chunked {
            row("chunked", c);
        }
        if !self.paired.is_empty() {
            let _ = writeln!(s, "\npaired vs {} (mean ± stderr, two-sided p)", self.names[0]);
            for p in &self.paired {
                let _ = writeln!(
                    s,
                    "{:<24} Tem-Con {:+.6} ± {:.6} (p={:.4})  Pixel-MSE {:+.6} ± {:.6} (p={:.4})",
                    p.cell, p.tem_con.mean, p.tem_con.stderr, p.tem_con.p_two_sided, p.pixel_mse.mean, p.pixel_mse.stderr, p.pixel_mse.p_two_sided
                );
            }
        }
        s
    }

    /// One row per (cell, seed).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,seed,tem_con,pixel_mse,edit_accuracy\n");
        let chunk = self.chunked.iter().map(|c| ("chunked".to_string(), c));
        for (name, rows) in self.names.iter().cloned().zip(&self.runs).chain(chunk) {
            for r in rows {
                let acc = r.report.edit_accuracy.map(|a| a.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{name},{},{},{},{acc}", r.seed, r.report.tem_con, r.report.pixel_mse);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names() {
        assert_eq!(Toggles::FULL.name(), "full");
        assert_eq!(Toggles::FULL.without(Toggle::Tta).name(), "w/o TTA");
        assert_eq!(Toggles::FULL.without(Toggle::Tta).without(Toggle::Local).name(), "w/o TTA + w/o LLA");
    }

    #[test]
    fn paired_t_against_oracle() {
        // d = [1, 2, 3, 4]: mean 2.5, sd 1.29099, se 0.645497, t 3.87298, df 3.
        let s = paired(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]);
        assert!((s.mean - 2.5).abs() < 1e-12);
        assert!((s.stderr - 0.645_497_224).abs() < 1e-8);
        // scipy.stats.t.sf(3.872983, 3) = 0.015225
        assert!((s.p_greater - 0.015_225).abs() < 1e-4, "{}", s.p_greater);
        assert!((s.p_two_sided - 0.030_45).abs() < 2e-4);
        assert_eq!(paired(&[1.0], &[0.0]).p_two_sided, 1.0);
    }

    #[test]
    fn boundaries() {
        assert_eq!(boundary_pairs(72, 24), vec![23, 47]);
        let mut series = vec![1.0; 71];
        series[23] = 0.5;
        series[47] = 0.5;
        let (b, i, e) = boundary_split(&[series.clone(), series], 24);
        assert_eq!((b, i, e), (0.5, 1.0, 0.0));
    }
}
